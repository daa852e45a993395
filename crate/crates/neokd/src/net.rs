//! The multi-exit network: a trunk of fully-connected blocks with a
//! classifier head after every block. Exit `i` sees blocks `1..=i` plus its
//! own classifier, so early exits are strict prefixes of later ones and all
//! exits share the trunk.

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tape::{Tape, VarId};
use crate::tensor::{kernels, Tensor};

/// Architecture description. `block_widths[i]` lists the hidden-layer widths
/// of block `i+1`; an empty list makes the block an identity pass-through
/// (useful for hand-constructed nets in tests).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub block_widths: Vec<Vec<usize>>,
    pub classes: usize,
    pub init_seed: u64,
}

impl NetworkSpec {
    /// 3-exit MLP sized for desk-scale MNIST-format data.
    pub fn desk_default(seed: u64) -> Self {
        NetworkSpec {
            input_dim: 784,
            block_widths: vec![vec![128], vec![64], vec![64]],
            classes: 10,
            init_seed: seed,
        }
    }

    pub fn exits(&self) -> usize {
        self.block_widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("model.input_dim", "must be >= 1"));
        }
        if self.classes < 2 {
            return Err(Error::config("model.classes", "must be >= 2"));
        }
        if self.block_widths.is_empty() {
            return Err(Error::config("model.blocks", "need at least one block"));
        }
        for (i, block) in self.block_widths.iter().enumerate() {
            if block.contains(&0) {
                return Err(Error::config(
                    "model.blocks",
                    format!("zero width in block {}", i + 1),
                ));
            }
        }
        Ok(())
    }

    /// Feature width entering block `i` (0-based).
    fn width_into_block(&self, i: usize) -> usize {
        let mut w = self.input_dim;
        for block in &self.block_widths[..i] {
            if let Some(&last) = block.last() {
                w = last;
            }
        }
        w
    }

    /// Feature width leaving block `i` (0-based), i.e. what classifier `i` sees.
    fn width_out_of_block(&self, i: usize) -> usize {
        let mut w = self.width_into_block(i);
        if let Some(&last) = self.block_widths[i].last() {
            w = last;
        }
        w
    }

    /// Total scalar parameter count implied by the spec, without
    /// materializing anything. `None` on overflow.
    pub fn scalar_param_count(&self) -> Option<usize> {
        let mut total: usize = 0;
        let mut add_affine = |fan_in: usize, fan_out: usize| -> Option<()> {
            total = total
                .checked_add(fan_in.checked_mul(fan_out)?)?
                .checked_add(fan_out)?;
            Some(())
        };
        for i in 0..self.exits() {
            let mut fan_in = self.width_into_block(i);
            for &w in &self.block_widths[i] {
                add_affine(fan_in, w)?;
                fan_in = w;
            }
        }
        for i in 0..self.exits() {
            add_affine(self.width_out_of_block(i), self.classes)?;
        }
        Some(total)
    }

    /// Canonical text encoding, embedded in checkpoint files.
    pub fn to_text(&self) -> String {
        let blocks = self
            .block_widths
            .iter()
            .map(|b| {
                b.iter()
                    .map(|w| w.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect::<Vec<_>>()
            .join(";");
        format!(
            "input_dim={}\nclasses={}\nblocks={}\ninit_seed={}\n",
            self.input_dim, self.classes, blocks, self.init_seed
        )
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut input_dim = None;
        let mut classes = None;
        let mut blocks = None;
        let mut init_seed = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config("model", format!("bad spec line: {line}")))?;
            match key {
                "input_dim" => {
                    input_dim = Some(parse_usize("model.input_dim", value)?);
                }
                "classes" => {
                    classes = Some(parse_usize("model.classes", value)?);
                }
                "init_seed" => {
                    init_seed = Some(
                        value
                            .parse::<u64>()
                            .map_err(|_| Error::config("model.init_seed", "not a u64"))?,
                    );
                }
                "blocks" => {
                    let mut parsed = Vec::new();
                    for part in value.split(';') {
                        if part.trim().is_empty() {
                            parsed.push(Vec::new());
                        } else {
                            let widths = part
                                .split(',')
                                .map(|w| parse_usize("model.blocks", w.trim()))
                                .collect::<Result<Vec<_>>>()?;
                            parsed.push(widths);
                        }
                    }
                    blocks = Some(parsed);
                }
                other => {
                    return Err(Error::config("model", format!("unknown spec key: {other}")));
                }
            }
        }
        let spec = NetworkSpec {
            input_dim: input_dim.ok_or_else(|| Error::config("model.input_dim", "missing"))?,
            classes: classes.ok_or_else(|| Error::config("model.classes", "missing"))?,
            block_widths: blocks.ok_or_else(|| Error::config("model.blocks", "missing"))?,
            init_seed: init_seed.ok_or_else(|| Error::config("model.init_seed", "missing"))?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn parse_usize(field: &str, value: &str) -> Result<usize> {
    value
        .parse::<usize>()
        .map_err(|_| Error::config(field, format!("not a non-negative integer: {value}")))
}

/// One affine transform. Weight is `[fan_in × fan_out]`, bias is `[1 × fan_out]`.
#[derive(Debug, Clone)]
pub struct AffineLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl AffineLayer {
    fn glorot(fan_in: usize, fan_out: usize, rng: &mut Stream) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
        let data: Vec<f32> = (0..fan_in * fan_out)
            .map(|_| rng.next_f32_range(-bound, bound))
            .collect();
        AffineLayer {
            weight: Tensor::new(vec![fan_in, fan_out], data)
                .expect("glorot shape")
                .with_grad(),
            bias: Tensor::zeros(vec![1, fan_out]).with_grad(),
        }
    }

    fn apply_plain(&self, x: &Tensor) -> Tensor {
        let (b, k) = (x.rows(), x.cols());
        let n = self.weight.cols();
        let mut out = kernels::matmul(x.data(), self.weight.data(), b, k, n);
        for r in 0..b {
            for c in 0..n {
                out[r * n + c] += self.bias.data()[c];
            }
        }
        Tensor::new(vec![b, n], out).expect("affine shape")
    }

}

/// Cumulative multiply-accumulate cost of exiting at each exit
/// (2·fan_in·fan_out per affine layer, summed over blocks `1..=i` plus
/// classifier `i`). Strictly increasing by construction check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopsProfile {
    pub per_exit: Vec<u64>,
}

impl FlopsProfile {
    pub fn exit_cost(&self, exit: usize) -> u64 {
        self.per_exit[exit]
    }
}

/// Result of a tape forward pass: exit logits plus the parameter leaves in
/// canonical order (matching [`MultiExitNetwork::params`]).
pub struct TapeForward {
    pub exit_logits: Vec<VarId>,
    pub param_vars: Vec<VarId>,
}

#[derive(Debug, Clone)]
pub struct MultiExitNetwork {
    spec: NetworkSpec,
    blocks: Vec<Vec<AffineLayer>>,
    classifiers: Vec<AffineLayer>,
}

impl MultiExitNetwork {
    /// Deterministic Glorot-uniform initialization; biases zero. Draw order
    /// is the canonical parameter order, so equal seeds give bitwise-equal
    /// parameters.
    pub fn init(spec: &NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = Stream::labeled(spec.init_seed, "init");
        let mut blocks = Vec::new();
        for (i, widths) in spec.block_widths.iter().enumerate() {
            let mut fan_in = spec.width_into_block(i);
            let mut layers = Vec::new();
            for &w in widths {
                layers.push(AffineLayer::glorot(fan_in, w, &mut rng));
                fan_in = w;
            }
            blocks.push(layers);
        }
        let mut classifiers = Vec::new();
        for i in 0..spec.exits() {
            classifiers.push(AffineLayer::glorot(
                spec.width_out_of_block(i),
                spec.classes,
                &mut rng,
            ));
        }
        Ok(MultiExitNetwork {
            spec: spec.clone(),
            blocks,
            classifiers,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn exits(&self) -> usize {
        self.spec.exits()
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    /// Replace every layer of a block or classifier. Test helper for
    /// hand-constructed networks.
    pub fn set_block_layers(&mut self, block: usize, layers: Vec<AffineLayer>) {
        self.blocks[block] = layers;
    }

    pub fn set_classifier(&mut self, exit: usize, layer: AffineLayer) {
        self.classifiers[exit] = layer;
    }

    pub fn affine(weight: Tensor, bias: Tensor) -> AffineLayer {
        AffineLayer {
            weight: weight.with_grad(),
            bias: bias.with_grad(),
        }
    }

    /// Canonical parameter order: block layers (weight then bias) in block
    /// order, then classifiers (weight then bias) in exit order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for block in &self.blocks {
            for layer in block {
                out.push(&layer.weight);
                out.push(&layer.bias);
            }
        }
        for clf in &self.classifiers {
            out.push(&clf.weight);
            out.push(&clf.bias);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for block in &mut self.blocks {
            for layer in block {
                out.push(&mut layer.weight);
                out.push(&mut layer.bias);
            }
        }
        for clf in &mut self.classifiers {
            out.push(&mut clf.weight);
            out.push(&mut clf.bias);
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            for l in 0..block.len() {
                out.push(format!("block{i}.layer{l}.weight"));
                out.push(format!("block{i}.layer{l}.bias"));
            }
        }
        for i in 0..self.classifiers.len() {
            out.push(format!("classifier{i}.weight"));
            out.push(format!("classifier{i}.bias"));
        }
        out
    }

    /// Total scalar parameter count of the materialized network.
    pub fn scalar_param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Gradient-free forward pass; returns one `[B×C]` logit tensor per exit.
    pub fn forward_all_exits(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        if x.shape().len() != 2 || x.cols() != self.spec.input_dim {
            return Err(Error::dim(format!(
                "input shape {:?} does not match input_dim {}",
                x.shape(),
                self.spec.input_dim
            )));
        }
        let mut h = x.detach();
        let mut out = Vec::with_capacity(self.exits());
        for (block, clf) in self.blocks.iter().zip(&self.classifiers) {
            for layer in block {
                let pre = layer.apply_plain(&h);
                h = Tensor::new(pre.shape().to_vec(), kernels::relu(pre.data()))
                    .expect("relu shape");
            }
            out.push(clf.apply_plain(&h));
        }
        Ok(out)
    }

    /// Register every parameter as a tape leaf, in canonical order.
    /// `track` controls gradient participation (attacks only need the input
    /// gradient, so they register frozen parameters).
    pub fn register_params(&self, tape: &mut Tape, track: bool) -> Vec<VarId> {
        self.params()
            .into_iter()
            .map(|p| {
                tape.leaf_data(
                    p.shape().to_vec(),
                    p.data().to_vec(),
                    track && p.requires_grad(),
                )
            })
            .collect()
    }

    /// Forward pass over parameters already registered on the tape (in
    /// canonical order), so several inputs can share one set of parameter
    /// leaves and their gradients accumulate together.
    pub fn forward_registered(
        &self,
        tape: &mut Tape,
        x: VarId,
        params: &[VarId],
    ) -> Result<Vec<VarId>> {
        if tape.shape(x).len() != 2 || tape.shape(x)[1] != self.spec.input_dim {
            return Err(Error::dim(format!(
                "input shape {:?} does not match input_dim {}",
                tape.shape(x),
                self.spec.input_dim
            )));
        }
        if params.len() != self.params().len() {
            return Err(Error::contract(format!(
                "{} registered parameters, expected {}",
                params.len(),
                self.params().len()
            )));
        }
        let mut next = 0;
        let mut take_pair = || {
            let pair = (params[next], params[next + 1]);
            next += 2;
            pair
        };
        let mut h = x;
        let mut exit_logits = Vec::with_capacity(self.exits());
        let mut deferred_classifiers = Vec::with_capacity(self.exits());
        for block in &self.blocks {
            for _ in block {
                let (w, b) = take_pair();
                let pre = tape.matmul(h, w)?;
                let pre = tape.add(pre, b)?;
                h = tape.relu(pre);
            }
            deferred_classifiers.push(h);
        }
        for feat in deferred_classifiers {
            let (w, b) = take_pair();
            let logits = tape.matmul(feat, w)?;
            let logits = tape.add(logits, b)?;
            exit_logits.push(logits);
        }
        Ok(exit_logits)
    }

    /// Forward pass recorded on a tape, registering parameters on the fly.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        x: VarId,
        track_params: bool,
    ) -> Result<TapeForward> {
        let param_vars = self.register_params(tape, track_params);
        let exit_logits = self.forward_registered(tape, x, &param_vars)?;
        Ok(TapeForward {
            exit_logits,
            param_vars,
        })
    }

    /// Analytic cost model: 2·fan_in·fan_out MACs per affine layer,
    /// accumulated over the prefix each exit depends on.
    pub fn count_flops(spec: &NetworkSpec) -> Result<FlopsProfile> {
        spec.validate()?;
        let mut per_exit = Vec::with_capacity(spec.exits());
        let mut trunk: u64 = 0;
        for i in 0..spec.exits() {
            let mut fan_in = spec.width_into_block(i);
            for &w in &spec.block_widths[i] {
                trunk += 2 * fan_in as u64 * w as u64;
                fan_in = w;
            }
            per_exit.push(trunk + 2 * fan_in as u64 * spec.classes as u64);
        }
        for pair in per_exit.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::config(
                    "model.blocks",
                    format!("exit costs not strictly increasing: {per_exit:?}"),
                ));
            }
        }
        Ok(FlopsProfile { per_exit })
    }
}

// ──────────────────────────────────────────────────────────────────────
// Checkpoint format.
//
//   magic "MXNN" | u16 version=1 | u32 spec_len | spec text (UTF-8)
//   then per parameter: u32 name_len | name | u8 rank | rank×u32 extents
//                       | numel × f32, all integers and floats little-endian.
// Records run to end of file; parameter names, order, and shapes must match
// the canonical list derived from the embedded spec.
// ──────────────────────────────────────────────────────────────────────

const CHECKPOINT_MAGIC: &[u8; 4] = b"MXNN";
const CHECKPOINT_VERSION: u16 = 1;

/// Maximum scalar parameters accepted from an untrusted checkpoint.
const MAX_CHECKPOINT_PARAMS: usize = 1 << 28;

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    source: &'a str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8], source: &'a str) -> Self {
        ByteReader { buf, pos: 0, source }
    }

    pub(crate) fn fail(&self, reason: impl Into<String>) -> Error {
        Error::format(self.source, self.pos, reason)
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated: wanted {n} bytes, {} remain",
                self.buf.len() - self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16_le(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub(crate) fn u32_le(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub(crate) fn write_tensor_record(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.shape().len() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn read_tensor_record(r: &mut ByteReader<'_>) -> Result<(String, Tensor)> {
    let name_len = r.u32_le()? as usize;
    if name_len > 4096 {
        return Err(r.fail(format!("unreasonable name length {name_len}")));
    }
    let name = std::str::from_utf8(r.take(name_len)?)
        .map_err(|_| r.fail("parameter name is not UTF-8"))?
        .to_string();
    let rank = r.u8()? as usize;
    if rank == 0 || rank > 8 {
        return Err(r.fail(format!("unsupported tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for _ in 0..rank {
        let e = r.u32_le()? as usize;
        if e == 0 {
            return Err(r.fail("zero extent"));
        }
        numel = numel
            .checked_mul(e)
            .filter(|&n| n <= MAX_CHECKPOINT_PARAMS)
            .ok_or_else(|| r.fail("tensor too large"))?;
        shape.push(e);
    }
    let raw = r.take(numel * 4)?;
    let mut data = Vec::with_capacity(numel);
    for chunk in raw.chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(r.fail(format!("non-finite value in parameter {name}")));
        }
        data.push(v);
    }
    Ok((name, Tensor::new(shape, data).expect("validated shape")))
}

impl MultiExitNetwork {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let spec_text = self.spec.to_text();
        out.extend_from_slice(&(spec_text.len() as u32).to_le_bytes());
        out.extend_from_slice(spec_text.as_bytes());
        for (name, param) in self.param_names().iter().zip(self.params()) {
            write_tensor_record(&mut out, name, param);
        }
        out
    }

    /// Decode a checkpoint from untrusted bytes. Never panics: every fault
    /// is a format error carrying the byte offset.
    pub fn from_bytes(bytes: &[u8], source_name: &str) -> Result<Self> {
        let mut r = ByteReader::new(bytes, source_name);
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format(source_name, 0, "bad magic, expected MXNN"));
        }
        let version = r.u16_le()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                source_name,
                4,
                format!("unsupported version {version}"),
            ));
        }
        let spec_len = r.u32_le()? as usize;
        let spec_offset = r.pos;
        let spec_text = std::str::from_utf8(r.take(spec_len)?)
            .map_err(|_| Error::format(source_name, spec_offset, "spec record is not UTF-8"))?;
        let spec = NetworkSpec::parse_text(spec_text)
            .map_err(|e| Error::format(source_name, spec_offset, e.to_string()))?;
        // Bound the implied allocation before materializing anything: the
        // spec text is untrusted.
        match spec.scalar_param_count() {
            Some(total) if total <= MAX_CHECKPOINT_PARAMS => {}
            _ => return Err(Error::format(source_name, spec_offset, "spec too large")),
        }

        let mut net = MultiExitNetwork::init(&spec)
            .map_err(|e| Error::format(source_name, spec_offset, e.to_string()))?;
        let expected_names = net.param_names();
        let mut loaded = Vec::new();
        while !r.done() {
            loaded.push(read_tensor_record(&mut r)?);
        }
        if loaded.len() != expected_names.len() {
            return Err(Error::format(
                source_name,
                bytes.len(),
                format!(
                    "expected {} parameter records, found {}",
                    expected_names.len(),
                    loaded.len()
                ),
            ));
        }
        for ((name, tensor), (expected_name, slot)) in loaded
            .into_iter()
            .zip(expected_names.iter().zip(net.params_mut()))
        {
            if &name != expected_name {
                return Err(Error::format(
                    source_name,
                    bytes.len(),
                    format!("parameter {name} out of order, expected {expected_name}"),
                ));
            }
            if tensor.shape() != slot.shape() {
                return Err(Error::format(
                    source_name,
                    bytes.len(),
                    format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        tensor.shape(),
                        slot.shape()
                    ),
                ));
            }
            slot.data_mut().copy_from_slice(tensor.data());
        }
        Ok(net)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::report::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}
