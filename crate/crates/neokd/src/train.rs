//! The adversarial training loop.
//!
//! Per batch: generate adversarial examples against the current parameters,
//! run clean and adversarial forwards over one shared set of parameter
//! leaves, build the configured objective, backprop, and apply SGD with
//! momentum and weight decay. The learning rate follows a step-decay
//! schedule computed statelessly from the epoch number, and the orthogonal
//! class assignment is redrawn at the start of every epoch that needs one.
//!
//! Determinism contract: identical `(config, dataset, seed)` produce
//! bitwise-identical parameters, and resuming from a saved state reproduces
//! the uninterrupted trajectory bitwise (all random draws are derived from
//! `(seed, label, epoch, batch)`, never from mutable RNG state).

use std::time::Instant;

use crate::attack::{run_attack, AttackConfig};
use crate::data::{BatchIterator, Dataset};
use crate::error::{Error, Result};
use crate::loss::{kind_uses_assignment, training_loss, DistillConfig, LossKind, OrthogonalAssignment};
use crate::net::{read_tensor_record, write_tensor_record, ByteReader, MultiExitNetwork};
use crate::report::{fmt_f32, Csv};
use crate::rng::Stream;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// 1-based epoch numbers; the decay factor applies from that epoch on.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub train_attack: AttackConfig,
    pub loss_kind: LossKind,
    pub distill: DistillConfig,
    pub seed: u64,
    /// Probe-attack steps used for the per-epoch adversarial accuracy column.
    pub probe_attack: Option<AttackConfig>,
    pub threads: usize,
}

impl TrainConfig {
    pub fn validate(&self, exits: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("optim.epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("optim.batch_size", "must be >= 1"));
        }
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::config("optim.lr", "must be finite and >= 0"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::config("optim.lr_decay_factor", "must be in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("optim.momentum", "must be in [0, 1)"));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::config("optim.weight_decay", "must be finite and >= 0"));
        }
        self.train_attack.validate(exits)?;
        if let Some(p) = &self.probe_attack {
            p.validate(exits)?;
        }
        self.distill.validate(exits)?;
        Ok(())
    }

    /// Learning rate for a 0-based epoch index, from the step-decay schedule.
    pub fn lr_at_epoch(&self, epoch: usize) -> f32 {
        let decays = self
            .lr_decay_epochs
            .iter()
            .filter(|&&d| epoch + 1 >= d)
            .count();
        self.lr * self.lr_decay_factor.powi(decays as i32)
    }
}

/// One SGD-with-momentum update:
/// `v ← momentum·v + (grad + weight_decay·param)`, `param ← param − lr·v`.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    grads: &[Vec<f32>],
    velocities: &mut [Vec<f32>],
    lr: f32,
    momentum: f32,
    weight_decay: f32,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocities.len() {
        return Err(Error::contract("param/grad/velocity counts differ"));
    }
    for ((param, grad), vel) in params.iter_mut().zip(grads).zip(velocities.iter_mut()) {
        if grad.len() != param.numel() || vel.len() != param.numel() {
            return Err(Error::contract(format!(
                "buffer sizes differ: param {} grad {} velocity {}",
                param.numel(),
                grad.len(),
                vel.len()
            )));
        }
        let data = param.data_mut();
        for i in 0..data.len() {
            vel[i] = momentum * vel[i] + (grad[i] + weight_decay * data[i]);
            data[i] -= lr * vel[i];
        }
    }
    Ok(())
}

/// Per-epoch metrics. Wall time stays in memory (and on the console); the
/// CSV carries only deterministic columns so reruns are bitwise identical.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f32,
    pub total_loss: f32,
    pub clean_ce: Vec<f32>,
    pub adv_ce: Vec<f32>,
    pub nkd: Vec<f32>,
    pub eokd: Vec<f32>,
    pub probe_clean_acc: Option<Vec<f64>>,
    pub probe_adv_acc: Option<Vec<f64>>,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self, exits: usize) -> String {
        let mut header: Vec<String> = vec!["epoch".into(), "lr".into(), "total_loss".into()];
        for i in 1..=exits {
            header.push(format!("clean_ce_{i}"));
            header.push(format!("adv_ce_{i}"));
            header.push(format!("nkd_{i}"));
            header.push(format!("eokd_{i}"));
        }
        for i in 1..=exits {
            header.push(format!("probe_clean_acc_{i}"));
            header.push(format!("probe_adv_acc_{i}"));
        }
        let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
        let mut csv = Csv::new(&header_refs);
        for rec in &self.epochs {
            let mut row = vec![
                rec.epoch.to_string(),
                fmt_f32(rec.lr),
                fmt_f32(rec.total_loss),
            ];
            for i in 0..exits {
                row.push(fmt_f32(rec.clean_ce[i]));
                row.push(fmt_f32(rec.adv_ce[i]));
                row.push(fmt_f32(rec.nkd[i]));
                row.push(fmt_f32(rec.eokd[i]));
            }
            for i in 0..exits {
                match &rec.probe_clean_acc {
                    Some(a) => row.push(format!("{}", a[i])),
                    None => row.push(String::new()),
                }
                match &rec.probe_adv_acc {
                    Some(a) => row.push(format!("{}", a[i])),
                    None => row.push(String::new()),
                }
            }
            csv.row(&row);
        }
        csv.render()
    }
}

/// Network plus optimizer state plus the epoch cursor: everything needed to
/// continue training bitwise-identically.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub net: MultiExitNetwork,
    velocities: Vec<Vec<f32>>,
    pub epochs_done: usize,
}

impl TrainState {
    pub fn fresh(net: MultiExitNetwork) -> Self {
        let velocities = net.params().iter().map(|p| vec![0.0; p.numel()]).collect();
        TrainState {
            net,
            velocities,
            epochs_done: 0,
        }
    }

    /// Train from the current cursor up to `cfg.epochs`. `on_epoch` fires
    /// after every completed epoch (checkpoint cadence hooks in here).
    pub fn run_with(
        &mut self,
        dataset: &Dataset,
        probe: Option<&Dataset>,
        cfg: &TrainConfig,
        mut on_epoch: impl FnMut(&TrainState, &EpochRecord) -> Result<()>,
    ) -> Result<TrainLog> {
        cfg.validate(self.net.exits())?;
        if dataset.classes != self.net.classes() {
            return Err(Error::config(
                "data.classes",
                format!(
                    "dataset has {} classes, network {}",
                    dataset.classes,
                    self.net.classes()
                ),
            ));
        }
        let exits = self.net.exits();
        let mut log = TrainLog::default();
        for epoch in self.epochs_done..cfg.epochs {
            let started = Instant::now();
            let lr = cfg.lr_at_epoch(epoch);
            let assignment = if kind_uses_assignment(cfg.loss_kind, &cfg.distill) {
                Some(OrthogonalAssignment::draw(
                    self.net.classes(),
                    exits,
                    epoch,
                    cfg.seed,
                )?)
            } else {
                None
            };

            let mut sum = EpochSums::new(exits);
            for (batch_idx, batch) in
                BatchIterator::new(dataset, cfg.batch_size, cfg.seed, epoch).enumerate()
            {
                let attack_seed = Stream::indexed(cfg.seed, "attack", &[epoch as u64, batch_idx as u64])
                    .next_u64();
                let attack_cfg = cfg.train_attack.with_seed(attack_seed);
                let adv = run_attack(
                    &self.net,
                    &batch.inputs,
                    &batch.labels,
                    &batch.indices,
                    &attack_cfg,
                    cfg.threads,
                )?;

                let mut tape = Tape::new();
                let params = self.net.register_params(&mut tape, true);
                let clean_x = tape.leaf_data(
                    batch.inputs.shape().to_vec(),
                    batch.inputs.data().to_vec(),
                    false,
                );
                let adv_x = tape.leaf_data(
                    adv.inputs.shape().to_vec(),
                    adv.inputs.data().to_vec(),
                    false,
                );
                let clean_logits = self.net.forward_registered(&mut tape, clean_x, &params)?;
                let adv_logits = self.net.forward_registered(&mut tape, adv_x, &params)?;
                let (loss, breakdown) = training_loss(
                    &mut tape,
                    cfg.loss_kind,
                    &clean_logits,
                    &adv_logits,
                    &batch.labels,
                    assignment.as_ref(),
                    &cfg.distill,
                )?;
                if !tape.data(loss)[0].is_finite() {
                    return Err(Error::NanLoss {
                        epoch,
                        batch: batch_idx,
                    });
                }
                tape.backward(loss)?;

                let grads: Vec<Vec<f32>> = params
                    .iter()
                    .map(|&v| match tape.grad(v) {
                        Some(g) => g.to_vec(),
                        None => vec![0.0; tape.data(v).len()],
                    })
                    .collect();
                sgd_step(
                    &mut self.net.params_mut(),
                    &grads,
                    &mut self.velocities,
                    lr,
                    cfg.momentum,
                    cfg.weight_decay,
                )?;
                sum.accumulate(&breakdown, batch.labels.len());
            }

            let (probe_clean, probe_adv) = match probe {
                Some(p) => {
                    let (c, a) = probe_accuracy(&self.net, p, cfg, epoch)?;
                    (Some(c), Some(a))
                }
                None => (None, None),
            };
            let record = sum.into_record(epoch, lr, probe_clean, probe_adv, started.elapsed().as_secs_f64());
            self.epochs_done = epoch + 1;
            on_epoch(self, &record)?;
            log.epochs.push(record);
        }
        Ok(log)
    }

    pub fn run(
        &mut self,
        dataset: &Dataset,
        probe: Option<&Dataset>,
        cfg: &TrainConfig,
    ) -> Result<TrainLog> {
        self.run_with(dataset, probe, cfg, |_, _| Ok(()))
    }

    // ── resume-state wire format ─────────────────────────────────────
    //
    //   magic "MXTS" | u16 version=1 | u32 epochs_done
    //   | u32 net_len | embedded MXNN checkpoint
    //   | one tensor record per velocity buffer, named
    //     "velocity.<param name>", until end of file.

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"MXTS");
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&(self.epochs_done as u32).to_le_bytes());
        let net_bytes = self.net.to_bytes();
        out.extend_from_slice(&(net_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&net_bytes);
        for ((name, param), vel) in self
            .net
            .param_names()
            .iter()
            .zip(self.net.params())
            .zip(&self.velocities)
        {
            let t = Tensor::new(param.shape().to_vec(), vel.clone()).expect("velocity shape");
            write_tensor_record(&mut out, &format!("velocity.{name}"), &t);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], source: &str) -> Result<Self> {
        let mut r = ByteReader::new(bytes, source);
        if r.take(4)? != b"MXTS" {
            return Err(Error::format(source, 0, "bad magic, expected MXTS"));
        }
        let version = r.u16_le()?;
        if version != 1 {
            return Err(Error::format(source, 4, format!("unsupported version {version}")));
        }
        let epochs_done = r.u32_le()? as usize;
        let net_len = r.u32_le()? as usize;
        let net_bytes = r.take(net_len)?;
        let net = MultiExitNetwork::from_bytes(net_bytes, source)?;
        let names = net.param_names();
        let mut velocities = Vec::with_capacity(names.len());
        for (name, param) in names.iter().zip(net.params()) {
            if r.done() {
                return Err(r.fail(format!("missing velocity record for {name}")));
            }
            let (rec_name, tensor) = read_tensor_record(&mut r)?;
            if rec_name != format!("velocity.{name}") {
                return Err(r.fail(format!("unexpected record {rec_name}, wanted velocity.{name}")));
            }
            if tensor.shape() != param.shape() {
                return Err(r.fail(format!("velocity shape mismatch for {name}")));
            }
            velocities.push(tensor.data().to_vec());
        }
        if !r.done() {
            return Err(r.fail("trailing bytes after velocity records"));
        }
        Ok(TrainState {
            net,
            velocities,
            epochs_done,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::report::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

/// Convenience wrapper: fresh state, full run.
pub fn train(
    net: MultiExitNetwork,
    dataset: &Dataset,
    probe: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(MultiExitNetwork, TrainLog)> {
    let mut state = TrainState::fresh(net);
    let log = state.run(dataset, probe, cfg)?;
    Ok((state.net, log))
}

struct EpochSums {
    samples: usize,
    total: f64,
    clean: Vec<f64>,
    adv: Vec<f64>,
    nkd: Vec<f64>,
    eokd: Vec<f64>,
}

impl EpochSums {
    fn new(exits: usize) -> Self {
        EpochSums {
            samples: 0,
            total: 0.0,
            clean: vec![0.0; exits],
            adv: vec![0.0; exits],
            nkd: vec![0.0; exits],
            eokd: vec![0.0; exits],
        }
    }

    fn accumulate(&mut self, b: &crate::loss::LossBreakdown, batch_len: usize) {
        let w = batch_len as f64;
        self.samples += batch_len;
        self.total += b.total as f64 * w;
        for i in 0..self.clean.len() {
            self.clean[i] += b.clean_ce[i] as f64 * w;
            self.adv[i] += b.adv_ce[i] as f64 * w;
            self.nkd[i] += b.nkd[i] as f64 * w;
            self.eokd[i] += b.eokd[i] as f64 * w;
        }
    }

    fn into_record(
        self,
        epoch: usize,
        lr: f32,
        probe_clean_acc: Option<Vec<f64>>,
        probe_adv_acc: Option<Vec<f64>>,
        wall_secs: f64,
    ) -> EpochRecord {
        let n = self.samples.max(1) as f64;
        let avg = |v: Vec<f64>| v.into_iter().map(|x| (x / n) as f32).collect();
        EpochRecord {
            epoch,
            lr,
            total_loss: (self.total / n) as f32,
            clean_ce: avg(self.clean),
            adv_ce: avg(self.adv),
            nkd: avg(self.nkd),
            eokd: avg(self.eokd),
            probe_clean_acc,
            probe_adv_acc,
            wall_secs,
        }
    }
}

/// Per-exit clean and adversarial accuracy on the probe set.
fn probe_accuracy(
    net: &MultiExitNetwork,
    probe: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let clean = per_exit_accuracy(net, &probe.inputs, &probe.labels)?;
    let attack_cfg = cfg
        .probe_attack
        .clone()
        .unwrap_or_else(|| cfg.train_attack.clone());
    let seed = Stream::indexed(cfg.seed, "probe-attack", &[epoch as u64]).next_u64();
    let indices: Vec<usize> = (0..probe.len()).collect();
    let adv = run_attack(
        net,
        &probe.inputs,
        &probe.labels,
        &indices,
        &attack_cfg.with_seed(seed),
        cfg.threads,
    )?;
    let adv_acc = per_exit_accuracy(net, &adv.inputs, &probe.labels)?;
    Ok((clean, adv_acc))
}

pub(crate) fn per_exit_accuracy(
    net: &MultiExitNetwork,
    inputs: &Tensor,
    labels: &[usize],
) -> Result<Vec<f64>> {
    let logits = net.forward_all_exits(inputs)?;
    let n = labels.len();
    let mut acc = Vec::with_capacity(logits.len());
    for exit_logits in &logits {
        let mut correct = 0usize;
        for (r, &y) in labels.iter().enumerate() {
            if crate::tensor::kernels::argmax(exit_logits.row(r)) == y {
                correct += 1;
            }
        }
        acc.push(correct as f64 / n as f64);
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::AttackKind;
    use crate::data::synthetic_gaussians;
    use crate::net::NetworkSpec;

    fn tiny_dataset(seed: u64) -> Dataset {
        synthetic_gaussians(3, 6, 20, seed, 0.15).unwrap()
    }

    fn tiny_net(seed: u64) -> MultiExitNetwork {
        MultiExitNetwork::init(&NetworkSpec {
            input_dim: 6,
            block_widths: vec![vec![8], vec![6]],
            classes: 3,
            init_seed: seed,
        })
        .unwrap()
    }

    fn tiny_cfg(epochs: usize, kind: LossKind) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            lr: 0.05,
            lr_decay_epochs: vec![],
            lr_decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            train_attack: AttackConfig {
                kind: AttackKind::MaxAverage,
                epsilon: 0.1,
                step_size: 0.05,
                steps: 2,
                random_start: false,
                seed: 0,
            },
            loss_kind: kind,
            distill: DistillConfig::defaults(2),
            seed: 7,
            probe_attack: None,
            threads: 2,
        }
    }

    #[test]
    fn sgd_step_plain_gradient_descent() {
        let mut p = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap().with_grad();
        let mut params = vec![&mut p];
        let grads = vec![vec![0.5, -0.5]];
        let mut vel = vec![vec![0.0, 0.0]];
        sgd_step(&mut params, &grads, &mut vel, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.05, -2.0 + 0.05]);
    }

    #[test]
    fn sgd_velocity_decays_geometrically_with_zero_grad() {
        let mut p = Tensor::new(vec![1], vec![1.0]).unwrap().with_grad();
        let mut vel = vec![vec![2.0]];
        let grads = vec![vec![0.0]];
        let momentum = 0.5;
        let lr = 0.1;
        let mut expected_param = 1.0f32;
        let mut expected_vel = 2.0f32;
        for _ in 0..3 {
            let mut params = vec![&mut p];
            sgd_step(&mut params, &grads, &mut vel, lr, momentum, 0.0).unwrap();
            expected_vel *= momentum;
            expected_param -= lr * expected_vel;
        }
        assert!((vel[0][0] - expected_vel).abs() < 1e-7);
        assert!((p.data()[0] - expected_param).abs() < 1e-7);
    }

    #[test]
    fn sgd_three_step_trajectory_matches_hand_unrolled_recursion() {
        // Quadratic loss ½·q·x² → grad = q·x, with momentum and weight decay.
        let q = 2.0f32;
        let (lr, momentum, wd) = (0.1f32, 0.9f32, 0.01f32);
        let mut x = 1.0f32;
        let mut v = 0.0f32;
        let mut expected = Vec::new();
        for _ in 0..3 {
            v = momentum * v + (q * x + wd * x);
            x -= lr * v;
            expected.push(x);
        }

        let mut p = Tensor::new(vec![1], vec![1.0]).unwrap().with_grad();
        let mut vel = vec![vec![0.0]];
        for step in 0..3 {
            let g = vec![vec![q * p.data()[0]]];
            let mut params = vec![&mut p];
            sgd_step(&mut params, &g, &mut vel, lr, momentum, wd).unwrap();
            assert!(
                (p.data()[0] - expected[step]).abs() < 1e-6,
                "step {step}: {} vs {}",
                p.data()[0],
                expected[step]
            );
        }
    }

    #[test]
    fn sgd_shape_mismatch_is_contract_error() {
        let mut p = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad();
        let mut params = vec![&mut p];
        let grads = vec![vec![0.1]];
        let mut vel = vec![vec![0.0, 0.0]];
        assert!(sgd_step(&mut params, &grads, &mut vel, 0.1, 0.0, 0.0).is_err());
    }

    #[test]
    fn lr_schedule_steps_down_at_decay_epochs() {
        let mut cfg = tiny_cfg(10, LossKind::Baseline);
        cfg.lr = 0.01;
        cfg.lr_decay_epochs = vec![3, 6];
        cfg.lr_decay_factor = 0.1;
        assert!((cfg.lr_at_epoch(0) - 0.01).abs() < 1e-9);
        assert!((cfg.lr_at_epoch(1) - 0.01).abs() < 1e-9);
        // epoch index 2 is 1-based epoch 3 → one decay
        assert!((cfg.lr_at_epoch(2) - 0.001).abs() < 1e-9);
        assert!((cfg.lr_at_epoch(5) - 0.0001).abs() < 1e-10);
    }

    #[test]
    fn zero_lr_leaves_parameters_bitwise_unchanged() {
        let ds = tiny_dataset(1);
        let net = tiny_net(2);
        let before: Vec<Vec<u32>> = net.params().iter().map(|p| p.bits()).collect();
        let mut cfg = tiny_cfg(1, LossKind::Baseline);
        cfg.lr = 0.0;
        let (trained, _) = train(net, &ds, None, &cfg).unwrap();
        for (p, b) in trained.params().iter().zip(&before) {
            assert_eq!(&p.bits(), b);
        }
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let ds = tiny_dataset(3);
        let cfg = tiny_cfg(2, LossKind::NeoKd);
        let (net_a, log_a) = train(tiny_net(5), &ds, None, &cfg).unwrap();
        let (net_b, log_b) = train(tiny_net(5), &ds, None, &cfg).unwrap();
        for (a, b) in net_a.params().iter().zip(net_b.params()) {
            assert_eq!(a.bits(), b.bits());
        }
        assert_eq!(log_a.epochs.len(), log_b.epochs.len());
        for (ra, rb) in log_a.epochs.iter().zip(&log_b.epochs) {
            assert_eq!(ra.total_loss.to_bits(), rb.total_loss.to_bits());
        }
    }

    #[test]
    fn neokd_with_zero_weights_matches_baseline_bitwise() {
        let ds = tiny_dataset(4);
        let mut cfg = tiny_cfg(2, LossKind::NeoKd);
        cfg.distill.alpha = 0.0;
        cfg.distill.beta = 0.0;
        let (net_a, _) = train(tiny_net(6), &ds, None, &cfg).unwrap();
        let mut cfg_b = cfg.clone();
        cfg_b.loss_kind = LossKind::Baseline;
        let (net_b, _) = train(tiny_net(6), &ds, None, &cfg_b).unwrap();
        for (a, b) in net_a.params().iter().zip(net_b.params()) {
            assert_eq!(a.bits(), b.bits());
        }
    }

    #[test]
    fn assignment_is_constant_within_epoch_and_changes_across() {
        let a0 = OrthogonalAssignment::draw(10, 3, 0, 5).unwrap();
        let a0_again = OrthogonalAssignment::draw(10, 3, 0, 5).unwrap();
        let a1 = OrthogonalAssignment::draw(10, 3, 1, 5).unwrap();
        assert_eq!(a0, a0_again);
        assert_ne!(a0, a1);
    }

    #[test]
    fn resume_matches_uninterrupted_training_bitwise() {
        let ds = tiny_dataset(8);
        let cfg = tiny_cfg(3, LossKind::NeoKd);

        // Uninterrupted: 3 epochs.
        let (net_full, _) = train(tiny_net(9), &ds, None, &cfg).unwrap();

        // Interrupted: 2 epochs, serialize, reload, 1 more epoch.
        let mut state = TrainState::fresh(tiny_net(9));
        let mut cfg_partial = cfg.clone();
        cfg_partial.epochs = 2;
        state.run(&ds, None, &cfg_partial).unwrap();
        let bytes = state.to_bytes();
        let mut resumed = TrainState::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(resumed.epochs_done, 2);
        resumed.run(&ds, None, &cfg).unwrap();

        for (a, b) in net_full.params().iter().zip(resumed.net.params()) {
            assert_eq!(a.bits(), b.bits());
        }
    }

    #[test]
    fn state_roundtrip_is_bitwise_and_detects_corruption() {
        let mut state = TrainState::fresh(tiny_net(11));
        let ds = tiny_dataset(12);
        let cfg = tiny_cfg(1, LossKind::Baseline);
        state.run(&ds, None, &cfg).unwrap();
        let bytes = state.to_bytes();
        let back = TrainState::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back.epochs_done, state.epochs_done);
        for (a, b) in state.net.params().iter().zip(back.net.params()) {
            assert_eq!(a.bits(), b.bits());
        }
        for (a, b) in state.velocities.iter().zip(&back.velocities) {
            let ab: Vec<u32> = a.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }

        // Corrupt one byte inside the velocity section → format error.
        let mut corrupt = bytes.clone();
        let net_len = state.net.to_bytes().len();
        let velocity_name_offset = 4 + 2 + 4 + 4 + net_len + 4;
        corrupt[velocity_name_offset] ^= 0xFF;
        assert!(TrainState::from_bytes(&corrupt, "mem").is_err());

        // Truncation → format error.
        assert!(TrainState::from_bytes(&bytes[..bytes.len() - 2], "mem").is_err());
    }

    #[test]
    fn state_size_matches_computed_layout() {
        let state = TrainState::fresh(tiny_net(13));
        let bytes = state.to_bytes();
        let net_len = state.net.to_bytes().len();
        let mut expected = 4 + 2 + 4 + 4 + net_len;
        for (name, p) in state.net.param_names().iter().zip(state.net.params()) {
            let rec_name = format!("velocity.{name}");
            expected += 4 + rec_name.len() + 1 + 4 * p.shape().len() + 4 * p.numel();
        }
        assert_eq!(bytes.len(), expected);
    }

    #[test]
    fn train_log_csv_has_fixed_header_and_rows() {
        let ds = tiny_dataset(14);
        let probe = ds.take(10, crate::data::SplitTag::Val);
        let cfg = tiny_cfg(2, LossKind::NeoKd);
        let (_, log) = train(tiny_net(15), &ds, Some(&probe), &cfg).unwrap();
        let csv = log.to_csv(2);
        let mut lines = csv.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("epoch,lr,total_loss,clean_ce_1,adv_ce_1,nkd_1,eokd_1"));
        assert_eq!(lines.count(), 2);
    }

    #[cfg(not(debug_assertions))]
    #[test]
    fn nan_loss_aborts_with_context() {
        // A huge learning rate blows the parameters up to inf within a few
        // steps; the next loss evaluation must abort with epoch context
        // rather than propagate NaN into the checkpoint.
        let ds = tiny_dataset(20);
        let mut cfg = tiny_cfg(50, LossKind::Baseline);
        cfg.lr = 1e30;
        let err = train(tiny_net(21), &ds, None, &cfg).unwrap_err();
        match err {
            Error::NanLoss { .. } => {}
            other => panic!("expected NanLoss, got {other}"),
        }
    }
}
