//! Finite-difference gradient verification.
//!
//! The checker never trusts the tape: forward values for the difference
//! quotients come from a separate f64 reference evaluation of the same
//! mathematical function, written as plain scalar loops. Central differences
//! `(L(x+h) − L(x−h)) / 2h` with `h = 1e-3` are compared against the tape's
//! analytic gradients, coordinate by coordinate.
//!
//! ReLU kinks invalidate difference quotients; test points are resampled
//! until every pre-activation clears the kink by a safe margin.

use crate::net::MultiExitNetwork;
use crate::rng::Stream;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const DEFAULT_TOL: f64 = 1e-4;
const H: f64 = 1e-3;
/// Pre-activation magnitude below which a point is considered too close to
/// a ReLU kink for finite differences.
const KINK_MARGIN: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct GradCheckRow {
    pub name: String,
    pub max_rel_err: f64,
    pub coords: usize,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tol: f64,
    pub rows: Vec<GradCheckRow>,
}

impl GradCheckReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }
}

/// Relative error with a floor so near-zero coordinate pairs compare on an
/// absolute scale.
pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-2)
}

/// Max relative error between an analytic gradient and a finite-difference
/// gradient. Exposed so a deliberately corrupted gradient can be shown to
/// fail (mutation check).
pub fn compare_grads(analytic: &[f32], fd: &[f64]) -> f64 {
    assert_eq!(analytic.len(), fd.len());
    analytic
        .iter()
        .zip(fd)
        .map(|(&a, &f)| rel_err(a as f64, f))
        .fold(0.0, f64::max)
}

// ── f64 reference kernels ───────────────────────────────────────────

mod reference {
    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0f64; m * n];
        for i in 0..m {
            for kk in 0..k {
                let aik = a[i * k + kk];
                for j in 0..n {
                    out[i * n + j] += aik * b[kk * n + j];
                }
            }
        }
        out
    }

    pub fn log_sum_exp_row(row: &[f64]) -> f64 {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
    }

    pub fn softmax_row(row: &[f64]) -> Vec<f64> {
        let lse = log_sum_exp_row(row);
        row.iter().map(|&v| (v - lse).exp()).collect()
    }

    pub fn cross_entropy(logits: &[f64], labels: &[usize], b: usize, c: usize) -> f64 {
        let mut acc = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &logits[r * c..(r + 1) * c];
            acc += log_sum_exp_row(row) - row[y];
        }
        acc / b as f64
    }

    pub fn soft_cross_entropy(logits: &[f64], targets: &[f64], b: usize, c: usize) -> f64 {
        let mut acc = 0.0;
        for r in 0..b {
            let row = &logits[r * c..(r + 1) * c];
            let lse = log_sum_exp_row(row);
            for cc in 0..c {
                acc += targets[r * c + cc] * (lse - row[cc]);
            }
        }
        acc / b as f64
    }
}

fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

/// Central finite differences of `f` with respect to `x`.
fn fd_grad(x: &[f32], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let base = to_f64(x);
    let mut out = vec![0f64; x.len()];
    let mut probe = base.clone();
    for i in 0..x.len() {
        probe[i] = base[i] + H;
        let up = f(&probe);
        probe[i] = base[i] - H;
        let down = f(&probe);
        probe[i] = base[i];
        out[i] = (up - down) / (2.0 * H);
    }
    out
}

fn random_vec(rng: &mut Stream, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.next_f32_range(lo, hi)).collect()
}

/// Loss used to exercise a non-scalar op: a fixed random projection of the
/// output, so every output coordinate influences the scalar.
fn projection(rng: &mut Stream, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.next_f32_range(-1.0, 1.0)).collect()
}

fn proj_f64(out: &[f64], proj: &[f32]) -> f64 {
    out.iter().zip(proj).map(|(&o, &p)| o * p as f64).sum()
}

// Each per-op check builds the op on a tape, projects the output to a
// scalar with a `sum(scalar_mul-weighted)` trick via leaf constants, runs
// backward, and compares against finite differences of the f64 reference.

fn check_matmul(rng: &mut Stream) -> GradCheckRow {
    let (m, k, n) = (3, 4, 2);
    let a = random_vec(rng, m * k, -1.0, 1.0);
    let b = random_vec(rng, k * n, -1.0, 1.0);

    let mut tape = Tape::new();
    let av = tape.leaf_data(vec![m, k], a.clone(), true);
    let bv = tape.leaf_data(vec![k, n], b.clone(), true);
    let c = tape.matmul(av, bv).unwrap();
    let loss = tape.sum(c);
    tape.backward(loss).unwrap();

    let fd_a = fd_grad(&a, |ax| {
        reference::matmul(ax, &to_f64(&b), m, k, n).iter().sum()
    });
    let fd_b = fd_grad(&b, |bx| {
        reference::matmul(&to_f64(&a), bx, m, k, n).iter().sum()
    });
    let err = compare_grads(tape.grad(av).unwrap(), &fd_a)
        .max(compare_grads(tape.grad(bv).unwrap(), &fd_b));
    row("matmul", err, a.len() + b.len())
}

fn check_elementwise(
    name: &'static str,
    rng: &mut Stream,
    lo: f32,
    hi: f32,
    tape_op: impl Fn(&mut Tape, crate::tape::VarId) -> crate::tape::VarId,
    ref_op: impl Fn(f64) -> f64,
) -> GradCheckRow {
    let n = 12;
    let mut x = random_vec(rng, n, lo, hi);
    if name == "relu" {
        // Keep clear of the kink.
        for v in x.iter_mut() {
            if v.abs() < KINK_MARGIN as f32 {
                *v += 3.0 * KINK_MARGIN as f32;
            }
        }
    }
    let proj = projection(rng, n);

    let mut tape = Tape::new();
    let xv = tape.leaf_data(vec![1, n], x.clone(), true);
    let y = tape_op(&mut tape, xv);
    // scalar = y · proj, so every output coordinate reaches the loss
    let proj_col = tape.leaf_data(vec![n, 1], proj.clone(), false);
    let s = tape.matmul(y, proj_col).unwrap();
    let loss = tape.sum(s);
    tape.backward(loss).unwrap();

    let fd = fd_grad(&x, |xx| {
        let y: Vec<f64> = xx.iter().map(|&v| ref_op(v)).collect();
        proj_f64(&y, &proj)
    });
    let err = compare_grads(tape.grad(xv).unwrap(), &fd);
    row(name, err, n)
}

fn check_add_sub(rng: &mut Stream, subtract: bool) -> GradCheckRow {
    let (m, n) = (3, 4);
    let a = random_vec(rng, m * n, -1.0, 1.0);
    let b = random_vec(rng, n, -1.0, 1.0); // broadcast [1×n]
    let proj = projection(rng, m * n);

    let mut tape = Tape::new();
    let av = tape.leaf_data(vec![m, n], a.clone(), true);
    let bv = tape.leaf_data(vec![1, n], b.clone(), true);
    let y = if subtract {
        tape.sub(av, bv).unwrap()
    } else {
        tape.add(av, bv).unwrap()
    };
    let proj_col = tape.leaf_data(vec![n, 1], proj[..n].to_vec(), false);
    let s = tape.matmul(y, proj_col).unwrap();
    let loss = tape.sum(s);
    tape.backward(loss).unwrap();

    let sign = if subtract { -1.0 } else { 1.0 };
    let eval = |ax: &[f64], bx: &[f64]| -> f64 {
        let mut acc = 0.0;
        for i in 0..m {
            for j in 0..n {
                acc += (ax[i * n + j] + sign * bx[j]) * proj[j] as f64;
            }
        }
        acc
    };
    let fd_a = fd_grad(&a, |ax| eval(ax, &to_f64(&b)));
    let fd_b = fd_grad(&b, |bx| eval(&to_f64(&a), bx));
    let err = compare_grads(tape.grad(av).unwrap(), &fd_a)
        .max(compare_grads(tape.grad(bv).unwrap(), &fd_b));
    row(if subtract { "sub" } else { "add" }, err, a.len() + b.len())
}

fn check_mean(rng: &mut Stream) -> GradCheckRow {
    let n = 15;
    let x = random_vec(rng, n, -2.0, 2.0);
    let mut tape = Tape::new();
    let xv = tape.leaf_data(vec![3, 5], x.clone(), true);
    let loss = tape.mean(xv);
    tape.backward(loss).unwrap();
    let fd = fd_grad(&x, |xx| xx.iter().sum::<f64>() / n as f64);
    row("mean", compare_grads(tape.grad(xv).unwrap(), &fd), n)
}

fn check_softmax(rng: &mut Stream) -> GradCheckRow {
    let (b, c) = (3, 5);
    let x = random_vec(rng, b * c, -2.0, 2.0);
    let proj = projection(rng, c);
    let mut tape = Tape::new();
    let xv = tape.leaf_data(vec![b, c], x.clone(), true);
    let p = tape.softmax_rows(xv).unwrap();
    let proj_col = tape.leaf_data(vec![c, 1], proj.clone(), false);
    let s = tape.matmul(p, proj_col).unwrap();
    let loss = tape.sum(s);
    tape.backward(loss).unwrap();
    let fd = fd_grad(&x, |xx| {
        let mut acc = 0.0;
        for r in 0..b {
            let p = reference::softmax_row(&xx[r * c..(r + 1) * c]);
            acc += proj_f64(&p, &proj);
        }
        acc
    });
    row("softmax", compare_grads(tape.grad(xv).unwrap(), &fd), b * c)
}

fn check_cross_entropy(rng: &mut Stream) -> GradCheckRow {
    let (b, c) = (4, 6);
    let x = random_vec(rng, b * c, -2.0, 2.0);
    let labels: Vec<usize> = (0..b).map(|_| rng.next_below(c)).collect();
    let mut tape = Tape::new();
    let xv = tape.leaf_data(vec![b, c], x.clone(), true);
    let loss = tape.cross_entropy(xv, &labels).unwrap();
    tape.backward(loss).unwrap();
    let fd = fd_grad(&x, |xx| reference::cross_entropy(xx, &labels, b, c));
    row(
        "cross_entropy",
        compare_grads(tape.grad(xv).unwrap(), &fd),
        b * c,
    )
}

fn check_soft_cross_entropy(rng: &mut Stream) -> GradCheckRow {
    let (b, c) = (4, 5);
    let x = random_vec(rng, b * c, -2.0, 2.0);
    let mut targets = vec![0f32; b * c];
    for r in 0..b {
        let raw: Vec<f32> = (0..c).map(|_| rng.next_f32() + 0.05).collect();
        let sum: f32 = raw.iter().sum();
        for cc in 0..c {
            targets[r * c + cc] = raw[cc] / sum;
        }
    }
    let target_tensor = Tensor::new(vec![b, c], targets.clone()).unwrap();
    let mut tape = Tape::new();
    let xv = tape.leaf_data(vec![b, c], x.clone(), true);
    let loss = tape.soft_cross_entropy(xv, &target_tensor).unwrap();
    tape.backward(loss).unwrap();
    let fd = fd_grad(&x, |xx| {
        reference::soft_cross_entropy(xx, &to_f64(&targets), b, c)
    });
    row(
        "soft_cross_entropy",
        compare_grads(tape.grad(xv).unwrap(), &fd),
        b * c,
    )
}

// ── whole-network check ─────────────────────────────────────────────

/// f64 reference forward pass over a network's parameter vector. Returns
/// the summed cross-entropy over all exits, plus the minimum pre-activation
/// magnitude seen (for kink screening).
fn reference_net_loss(
    spec: &crate::net::NetworkSpec,
    flat_params: &[f64],
    x: &[f64],
    batch: usize,
    labels: &[usize],
) -> (f64, f64) {
    let mut min_preact = f64::INFINITY;
    let mut offset = 0;
    let mut take = |fan_in: usize, fan_out: usize| {
        let w = flat_params[offset..offset + fan_in * fan_out].to_vec();
        offset += fan_in * fan_out;
        let b = flat_params[offset..offset + fan_out].to_vec();
        offset += fan_out;
        (w, b)
    };

    let mut h = x.to_vec();
    let mut width = spec.input_dim;
    let mut loss = 0.0;
    let mut clf_inputs: Vec<(Vec<f64>, usize)> = Vec::new();
    for widths in &spec.block_widths {
        for &w_out in widths {
            let (w, b) = take(width, w_out);
            let mut pre = reference::matmul(&h, &w, batch, width, w_out);
            for r in 0..batch {
                for c in 0..w_out {
                    pre[r * w_out + c] += b[c];
                    let v = pre[r * w_out + c];
                    min_preact = min_preact.min(v.abs());
                    if v < 0.0 {
                        pre[r * w_out + c] = 0.0;
                    }
                }
            }
            h = pre;
            width = w_out;
        }
        clf_inputs.push((h.clone(), width));
    }
    for (feat, feat_width) in &clf_inputs {
        let (w, b) = take(*feat_width, spec.classes);
        let mut logits = reference::matmul(feat, &w, batch, *feat_width, spec.classes);
        for r in 0..batch {
            for c in 0..spec.classes {
                logits[r * spec.classes + c] += b[c];
            }
        }
        loss += reference::cross_entropy(&logits, labels, batch, spec.classes);
    }
    (loss, min_preact)
}

fn flatten_params(net: &MultiExitNetwork) -> Vec<f32> {
    let mut out = Vec::new();
    for p in net.params() {
        out.extend_from_slice(p.data());
    }
    out
}

/// Check every parameter and input gradient of a random 3-exit network
/// against finite differences of the f64 reference forward pass.
fn check_network(rng: &mut Stream) -> GradCheckRow {
    let spec = crate::net::NetworkSpec {
        input_dim: 6,
        block_widths: vec![vec![5], vec![4], vec![3]],
        classes: 3,
        init_seed: rng.next_u64(),
    };
    let batch = 4;

    // Resample until all pre-activations clear the ReLU kink margin.
    let (net, x, labels) = loop {
        let net = MultiExitNetwork::init(&crate::net::NetworkSpec {
            init_seed: rng.next_u64(),
            ..spec.clone()
        })
        .unwrap();
        let x = random_vec(rng, batch * spec.input_dim, -1.0, 1.0);
        let labels: Vec<usize> = (0..batch).map(|_| rng.next_below(spec.classes)).collect();
        let flat = to_f64(&flatten_params(&net));
        let (_, margin) = reference_net_loss(net.spec(), &flat, &to_f64(&x), batch, &labels);
        if margin > KINK_MARGIN {
            break (net, x, labels);
        }
    };

    // Analytic gradients from the tape.
    let mut tape = Tape::new();
    let xv = tape.leaf_data(vec![batch, spec.input_dim], x.clone(), true);
    let fwd = net.forward_on_tape(&mut tape, xv, true).unwrap();
    let mut loss = tape.cross_entropy(fwd.exit_logits[0], &labels).unwrap();
    for &logits in &fwd.exit_logits[1..] {
        let term = tape.cross_entropy(logits, &labels).unwrap();
        loss = tape.add(loss, term).unwrap();
    }
    tape.backward(loss).unwrap();

    let mut analytic: Vec<f32> = Vec::new();
    for &pv in &fwd.param_vars {
        match tape.grad(pv) {
            Some(g) => analytic.extend_from_slice(g),
            None => analytic.extend(std::iter::repeat_n(0.0, tape.data(pv).len())),
        }
    }
    analytic.extend_from_slice(tape.grad(xv).unwrap());

    // Finite differences over (params, input) jointly.
    let flat_params = flatten_params(&net);
    let n_params = flat_params.len();
    let mut joint = flat_params;
    joint.extend_from_slice(&x);
    let fd = fd_grad(&joint, |j| {
        reference_net_loss(net.spec(), &j[..n_params], &j[n_params..], batch, &labels).0
    });

    row(
        "multiexit_net",
        compare_grads(&analytic, &fd),
        analytic.len(),
    )
}

fn row(name: &str, err: f64, coords: usize) -> GradCheckRow {
    GradCheckRow {
        name: name.to_string(),
        max_rel_err: err,
        coords,
        pass: err < DEFAULT_TOL,
    }
}

/// The full suite: one row per differentiable op plus the network check.
pub fn run_full_suite(seed: u64) -> GradCheckReport {
    let mut rng = Stream::labeled(seed, "gradcheck");
    let rows = vec![
        check_matmul(&mut rng),
        check_add_sub(&mut rng, false),
        check_add_sub(&mut rng, true),
        check_elementwise("relu", &mut rng, -1.0, 1.0, |t, x| t.relu(x), |v| v.max(0.0)),
        check_elementwise(
            "scalar_mul",
            &mut rng,
            -1.0,
            1.0,
            |t, x| t.scalar_mul(x, 2.5),
            |v| 2.5f32 as f64 * v,
        ),
        check_elementwise("log", &mut rng, 0.2, 3.0, |t, x| t.log(x), f64::ln),
        check_elementwise("exp", &mut rng, -1.5, 1.5, |t, x| t.exp(x), f64::exp),
        check_mean(&mut rng),
        check_softmax(&mut rng),
        check_cross_entropy(&mut rng),
        check_soft_cross_entropy(&mut rng),
        check_network(&mut rng),
    ];
    GradCheckReport {
        tol: DEFAULT_TOL,
        rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_suite_passes_default_seed() {
        let report = run_full_suite(0);
        for r in &report.rows {
            assert!(r.pass, "{} max rel err {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn full_suite_passes_many_seeds() {
        for seed in 1..6 {
            let report = run_full_suite(seed);
            assert!(report.all_pass(), "seed {seed}: {:?}", report.rows);
        }
    }

    #[test]
    fn sign_flip_mutation_is_caught() {
        // A corrupted backward rule (sign flip on one coordinate) must fail.
        let analytic = vec![0.5f32, -0.25, 1.0];
        let mut fd: Vec<f64> = analytic.iter().map(|&v| v as f64).collect();
        assert!(compare_grads(&analytic, &fd) < DEFAULT_TOL);
        fd[1] = -fd[1];
        assert!(compare_grads(&analytic, &fd) > DEFAULT_TOL);
    }

    #[test]
    fn report_has_one_row_per_op() {
        let report = run_full_suite(3);
        let names: Vec<&str> = report.rows.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(
            names,
            vec![
                "matmul",
                "add",
                "sub",
                "relu",
                "scalar_mul",
                "log",
                "exp",
                "mean",
                "softmax",
                "cross_entropy",
                "soft_cross_entropy",
                "multiexit_net"
            ]
        );
    }
}
