//! Adversarial example generation.
//!
//! All three attacks are built on the same PGD inner loop: iterated
//! sign-gradient ascent on a scalar loss of the exit logits, projected onto
//! the ℓ∞ ball around the clean input intersected with the valid range
//! `[0,1]`. The single attack maximizes one exit's cross-entropy; the
//! average attack maximizes the mean cross-entropy over all exits; the
//! max-average attack runs the single attack per exit and keeps, per sample,
//! the candidate with the highest all-exit average loss.

use crate::error::{Error, Result};
use crate::net::MultiExitNetwork;
use crate::rng::Stream;
use crate::tape::{Tape, VarId};
use crate::tensor::{kernels, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    /// Target one exit (1-based).
    Single(usize),
    MaxAverage,
    Average,
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AttackKind::Single(i) => write!(f, "single:{i}"),
            AttackKind::MaxAverage => write!(f, "max_average"),
            AttackKind::Average => write!(f, "average"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// ℓ∞ radius, in input units.
    pub epsilon: f32,
    /// Per-step magnitude.
    pub step_size: f32,
    /// PGD iteration count.
    pub steps: usize,
    /// Start from a uniform draw inside the ε-ball instead of the clean input.
    pub random_start: bool,
    pub seed: u64,
}

impl AttackConfig {
    pub fn validate(&self, exits: usize) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(Error::config("attack.epsilon", "must be finite and >= 0"));
        }
        if !self.step_size.is_finite() || self.step_size <= 0.0 {
            return Err(Error::config("attack.step_size", "must be finite and > 0"));
        }
        if let AttackKind::Single(i) = self.kind {
            if i == 0 || i > exits {
                return Err(Error::config(
                    "attack.kind",
                    format!("single-attack exit {i} out of range 1..={exits}"),
                ));
            }
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> AttackConfig {
        AttackConfig {
            seed,
            ..self.clone()
        }
    }

    pub fn with_kind(&self, kind: AttackKind) -> AttackConfig {
        AttackConfig { kind, ..self.clone() }
    }
}

/// A batch of adversarial inputs plus where they came from.
#[derive(Debug, Clone)]
pub struct AdversarialBatch {
    pub inputs: Tensor,
    pub clean_indices: Vec<usize>,
    pub config: AttackConfig,
}

/// Per-coordinate projection onto the ε-interval around `x0` intersected
/// with `[0,1]`. Containment is exact in f32 because the bounds themselves
/// are the comparison values.
#[inline]
fn project(raw: f32, x0: f32, eps: f32) -> f32 {
    let lo = (x0 - eps).max(0.0);
    let hi = (x0 + eps).min(1.0);
    raw.clamp(lo, hi)
}

#[inline]
fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Scalar attack objective built from the tape and all exit logits.
pub type AttackLossFn<'a> = &'a dyn Fn(&mut Tape, &[VarId], &[usize]) -> Result<VarId>;

/// PGD inner loop. `loss_fn` maps the tape and all exit logits to a scalar
/// loss var; its gradient with respect to the input drives the ascent.
pub fn pgd(
    net: &MultiExitNetwork,
    x: &Tensor,
    y: &[usize],
    loss_fn: AttackLossFn<'_>,
    cfg: &AttackConfig,
) -> Result<Tensor> {
    cfg.validate(net.exits())?;
    let x0 = x.data();
    // Zero-radius ball (or no movement at all): the clean batch, bitwise.
    if cfg.epsilon == 0.0 || (cfg.steps == 0 && !cfg.random_start) {
        return Ok(x.detach());
    }

    let mut cur = x0.to_vec();
    if cfg.random_start {
        let mut rng = Stream::labeled(cfg.seed, "attack-start");
        for (c, &orig) in cur.iter_mut().zip(x0) {
            let draw = orig + rng.next_f32_range(-cfg.epsilon, cfg.epsilon);
            *c = project(draw, orig, cfg.epsilon);
        }
    }

    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let xv = tape.leaf_data(x.shape().to_vec(), cur.clone(), true);
        let fwd = net.forward_on_tape(&mut tape, xv, false)?;
        let loss = loss_fn(&mut tape, &fwd.exit_logits, y)?;
        if tape.data(loss).len() != 1 {
            return Err(Error::contract("attack loss_fn must produce a scalar"));
        }
        tape.backward(loss)?;
        let grad = tape
            .grad(xv)
            .ok_or_else(|| Error::contract("attack loss does not depend on the input"))?;
        for ((c, &g), &orig) in cur.iter_mut().zip(grad).zip(x0) {
            let raw = *c + cfg.step_size * sign(g);
            *c = project(raw, orig, cfg.epsilon);
        }
    }
    Tensor::new(x.shape().to_vec(), cur)
}

fn exit_ce_loss(tape: &mut Tape, logits: VarId, y: &[usize]) -> Result<VarId> {
    tape.cross_entropy(logits, y)
}

/// Maximize the cross-entropy of one exit (1-based).
pub fn single_attack(
    net: &MultiExitNetwork,
    x: &Tensor,
    y: &[usize],
    indices: &[usize],
    target_exit: usize,
    cfg: &AttackConfig,
) -> Result<AdversarialBatch> {
    if target_exit == 0 || target_exit > net.exits() {
        return Err(Error::domain(format!(
            "target exit {target_exit} out of range 1..={}",
            net.exits()
        )));
    }
    let loss_fn = move |tape: &mut Tape, logits: &[VarId], y: &[usize]| {
        exit_ce_loss(tape, logits[target_exit - 1], y)
    };
    let adv = pgd(net, x, y, &loss_fn, cfg)?;
    Ok(AdversarialBatch {
        inputs: adv,
        clean_indices: indices.to_vec(),
        config: cfg.with_kind(AttackKind::Single(target_exit)),
    })
}

/// Maximize the mean cross-entropy over all exits directly.
pub fn average_attack(
    net: &MultiExitNetwork,
    x: &Tensor,
    y: &[usize],
    indices: &[usize],
    cfg: &AttackConfig,
) -> Result<AdversarialBatch> {
    let exits = net.exits();
    let loss_fn = move |tape: &mut Tape, logits: &[VarId], y: &[usize]| {
        let mut total = exit_ce_loss(tape, logits[0], y)?;
        for &l in &logits[1..] {
            let term = exit_ce_loss(tape, l, y)?;
            total = tape.add(total, term)?;
        }
        Ok(tape.scalar_mul(total, 1.0 / exits as f32))
    };
    let adv = pgd(net, x, y, &loss_fn, cfg)?;
    Ok(AdversarialBatch {
        inputs: adv,
        clean_indices: indices.to_vec(),
        config: cfg.with_kind(AttackKind::Average),
    })
}

/// Per-sample mean-over-exits cross-entropy of a candidate batch, evaluated
/// without a tape.
pub fn per_sample_average_loss(
    net: &MultiExitNetwork,
    x: &Tensor,
    y: &[usize],
) -> Result<Vec<f64>> {
    let logits = net.forward_all_exits(x)?;
    let (b, c) = (x.rows(), net.classes());
    let mut scores = vec![0f64; b];
    for exit_logits in &logits {
        let lse = kernels::log_sum_exp_rows(exit_logits.data(), b, c);
        for r in 0..b {
            scores[r] += (lse[r] - exit_logits.data()[r * c + y[r]]) as f64;
        }
    }
    for s in scores.iter_mut() {
        *s /= logits.len() as f64;
    }
    Ok(scores)
}

/// Run the single attack for every exit and keep, per sample, the candidate
/// with the largest all-exit average loss; ties break toward the smallest
/// exit index. Candidates are generated in parallel over a frozen network
/// snapshot and merged by exit order, so threading never changes the result.
pub fn max_average_attack(
    net: &MultiExitNetwork,
    x: &Tensor,
    y: &[usize],
    indices: &[usize],
    cfg: &AttackConfig,
    threads: usize,
) -> Result<AdversarialBatch> {
    let exits = net.exits();
    let candidates: Vec<Result<AdversarialBatch>> = parallel_map(exits, threads, |i| {
        single_attack(net, x, y, indices, i + 1, cfg)
    });
    let mut adv_batches = Vec::with_capacity(exits);
    for c in candidates {
        adv_batches.push(c?);
    }
    let mut scores = Vec::with_capacity(exits);
    for cand in &adv_batches {
        scores.push(per_sample_average_loss(net, &cand.inputs, y)?);
    }

    let (b, d) = (x.rows(), x.cols());
    let mut out = vec![0f32; b * d];
    for r in 0..b {
        let mut best_exit = 0;
        let mut best_score = scores[0][r];
        for (i, s) in scores.iter().enumerate().skip(1) {
            if s[r] > best_score {
                best_exit = i;
                best_score = s[r];
            }
        }
        out[r * d..(r + 1) * d].copy_from_slice(adv_batches[best_exit].inputs.row(r));
    }
    Ok(AdversarialBatch {
        inputs: Tensor::new(vec![b, d], out)?,
        clean_indices: indices.to_vec(),
        config: cfg.with_kind(AttackKind::MaxAverage),
    })
}

/// Dispatch on the configured attack kind.
pub fn run_attack(
    net: &MultiExitNetwork,
    x: &Tensor,
    y: &[usize],
    indices: &[usize],
    cfg: &AttackConfig,
    threads: usize,
) -> Result<AdversarialBatch> {
    match cfg.kind {
        AttackKind::Single(i) => single_attack(net, x, y, indices, i, cfg),
        AttackKind::Average => average_attack(net, x, y, indices, cfg),
        AttackKind::MaxAverage => max_average_attack(net, x, y, indices, cfg, threads),
    }
}

/// Index-parallel map with deterministic merge order.
pub(crate) fn parallel_map<T: Send, F>(n: usize, threads: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync,
{
    let threads = threads.max(1).min(n.max(1));
    if threads <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(threads);
    std::thread::scope(|scope| {
        let f = &f;
        let mut handles = Vec::new();
        for (t, slice) in slots.chunks_mut(chunk).enumerate() {
            handles.push(scope.spawn(move || {
                for (off, slot) in slice.iter_mut().enumerate() {
                    *slot = Some(f(t * chunk + off));
                }
            }));
        }
        for h in handles {
            h.join().expect("attack worker panicked");
        }
    });
    slots.into_iter().map(|s| s.expect("slot filled")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetworkSpec;

    fn tiny_net(seed: u64) -> MultiExitNetwork {
        MultiExitNetwork::init(&NetworkSpec {
            input_dim: 4,
            block_widths: vec![vec![6], vec![5]],
            classes: 3,
            init_seed: seed,
        })
        .unwrap()
    }

    fn batch(seed: u64, n: usize) -> (Tensor, Vec<usize>, Vec<usize>) {
        let mut rng = Stream::labeled(seed, "test-batch");
        let x = Tensor::new(vec![n, 4], (0..n * 4).map(|_| rng.next_f32()).collect()).unwrap();
        let y = (0..n).map(|_| rng.next_below(3)).collect();
        (x, y, (0..n).collect())
    }

    fn cfg(kind: AttackKind, eps: f32, steps: usize) -> AttackConfig {
        AttackConfig {
            kind,
            epsilon: eps,
            step_size: 0.05,
            steps,
            random_start: false,
            seed: 99,
        }
    }

    fn assert_contained(adv: &Tensor, clean: &Tensor, eps: f32) {
        for (r, (&a, &c)) in adv.data().iter().zip(clean.data()).enumerate() {
            let lo = (c - eps).max(0.0);
            let hi = (c + eps).min(1.0);
            assert!(a >= lo && a <= hi, "coord {r}: {a} outside [{lo}, {hi}]");
            assert!((a - c).abs() <= eps + 1e-6);
        }
    }

    #[test]
    fn zero_epsilon_returns_clean_bitwise() {
        let net = tiny_net(1);
        let (x, y, idx) = batch(2, 6);
        for kind in [AttackKind::Single(1), AttackKind::MaxAverage, AttackKind::Average] {
            let mut c = cfg(kind, 0.0, 5);
            c.random_start = true;
            let adv = run_attack(&net, &x, &y, &idx, &c, 2).unwrap();
            assert_eq!(adv.inputs.bits(), x.bits());
        }
    }

    #[test]
    fn zero_steps_without_random_start_returns_clean() {
        let net = tiny_net(1);
        let (x, y, idx) = batch(3, 4);
        let adv = single_attack(&net, &x, &y, &idx, 1, &cfg(AttackKind::Single(1), 0.2, 0)).unwrap();
        assert_eq!(adv.inputs.bits(), x.bits());
    }

    #[test]
    fn ball_containment_holds_for_all_attacks() {
        let net = tiny_net(5);
        let (x, y, idx) = batch(7, 10);
        for kind in [AttackKind::Single(2), AttackKind::MaxAverage, AttackKind::Average] {
            let mut c = cfg(kind, 0.1, 7);
            c.random_start = true;
            let adv = run_attack(&net, &x, &y, &idx, &c, 2).unwrap();
            assert_contained(&adv.inputs, &x, 0.1);
        }
    }

    #[test]
    fn attacks_are_deterministic() {
        let net = tiny_net(5);
        let (x, y, idx) = batch(11, 8);
        let mut c = cfg(AttackKind::MaxAverage, 0.15, 5);
        c.random_start = true;
        let a = run_attack(&net, &x, &y, &idx, &c, 1).unwrap();
        let b = run_attack(&net, &x, &y, &idx, &c, 2).unwrap();
        assert_eq!(a.inputs.bits(), b.inputs.bits());
    }

    #[test]
    fn one_step_logistic_matches_closed_form() {
        // f(x) = w·x through an identity block and a hand-set classifier
        // producing logits [w·x, 0]. For label 0 the cross-entropy gradient
        // with respect to x is (σ(wx) − 1)·w < 0 for w > 0, so one PGD step
        // moves x by −δ.
        let spec = NetworkSpec {
            input_dim: 1,
            block_widths: vec![vec![]],
            classes: 2,
            init_seed: 0,
        };
        let mut net = MultiExitNetwork::init(&spec).unwrap();
        let w = 2.0f32;
        net.set_classifier(
            0,
            MultiExitNetwork::affine(
                Tensor::new(vec![1, 2], vec![w, 0.0]).unwrap(),
                Tensor::zeros(vec![1, 2]),
            ),
        );
        let x = Tensor::new(vec![1, 1], vec![0.6]).unwrap();
        let delta = 0.05f32;
        let c = AttackConfig {
            kind: AttackKind::Single(1),
            epsilon: 0.3,
            step_size: delta,
            steps: 1,
            random_start: false,
            seed: 0,
        };
        let adv = single_attack(&net, &x, &[0], &[0], 1, &c).unwrap();
        assert!((adv.inputs.data()[0] - (0.6 - delta)).abs() < 1e-7);

        // Label 1 flips the gradient sign: x moves up by δ.
        let adv = single_attack(&net, &x, &[1], &[0], 1, &c).unwrap();
        assert!((adv.inputs.data()[0] - (0.6 + delta)).abs() < 1e-7);
    }

    #[test]
    fn identical_exits_give_identical_first_step() {
        // Block 2 is an identity pass-through and both classifiers share
        // weights, so attacking exit 1 or exit 2 must produce the same
        // perturbation.
        let spec = NetworkSpec {
            input_dim: 3,
            block_widths: vec![vec![4], vec![]],
            classes: 2,
            init_seed: 3,
        };
        let mut net = MultiExitNetwork::init(&spec).unwrap();
        let shared_w = Tensor::new(vec![4, 2], vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.2, 0.6, -0.5]).unwrap();
        net.set_classifier(0, MultiExitNetwork::affine(shared_w.clone(), Tensor::zeros(vec![1, 2])));
        net.set_classifier(1, MultiExitNetwork::affine(shared_w, Tensor::zeros(vec![1, 2])));
        let x = Tensor::new(vec![2, 3], vec![0.2, 0.8, 0.5, 0.9, 0.1, 0.4]).unwrap();
        let y = vec![0, 1];
        let c = cfg(AttackKind::Single(1), 0.1, 1);
        let a1 = single_attack(&net, &x, &y, &[0, 1], 1, &c).unwrap();
        let a2 = single_attack(&net, &x, &y, &[0, 1], 2, &c).unwrap();
        assert_eq!(a1.inputs.bits(), a2.inputs.bits());
    }

    #[test]
    fn max_average_selects_the_best_candidate() {
        let net = tiny_net(13);
        let (x, y, idx) = batch(17, 12);
        let c = cfg(AttackKind::MaxAverage, 0.2, 4);
        let chosen = max_average_attack(&net, &x, &y, &idx, &c, 2).unwrap();
        let chosen_scores = per_sample_average_loss(&net, &chosen.inputs, &y).unwrap();

        // Exhaustively re-generate every candidate and verify per-sample
        // optimality of the selection.
        let mut candidate_scores = Vec::new();
        for i in 1..=net.exits() {
            let cand = single_attack(&net, &x, &y, &idx, i, &c).unwrap();
            candidate_scores.push(per_sample_average_loss(&net, &cand.inputs, &y).unwrap());
        }
        for r in 0..x.rows() {
            let best = candidate_scores.iter().map(|s| s[r]).fold(f64::MIN, f64::max);
            assert!(
                (chosen_scores[r] - best).abs() < 1e-12,
                "sample {r}: chosen {} vs best {best}",
                chosen_scores[r]
            );
        }
    }

    #[test]
    fn single_exit_net_collapses_all_attacks() {
        let spec = NetworkSpec {
            input_dim: 4,
            block_widths: vec![vec![5]],
            classes: 3,
            init_seed: 21,
        };
        let net = MultiExitNetwork::init(&spec).unwrap();
        let (x, y, idx) = batch(23, 5);
        let c = cfg(AttackKind::Average, 0.1, 3);
        let single = single_attack(&net, &x, &y, &idx, 1, &c).unwrap();
        let avg = average_attack(&net, &x, &y, &idx, &c).unwrap();
        let maxavg = max_average_attack(&net, &x, &y, &idx, &c, 1).unwrap();
        // Average divides the loss by L = 1; the sign of the gradient is
        // unchanged, so the iterates coincide exactly.
        assert_eq!(single.inputs.bits(), avg.inputs.bits());
        assert_eq!(single.inputs.bits(), maxavg.inputs.bits());
    }

    #[test]
    fn average_attack_ascends_on_a_smooth_toy() {
        // Away from ReLU kinks and with a small step, one PGD step cannot
        // decrease the averaged loss on this constructed smooth case.
        let net = tiny_net(31);
        let (x, y, idx) = batch(37, 6);
        let c = AttackConfig {
            kind: AttackKind::Average,
            epsilon: 0.05,
            step_size: 0.01,
            steps: 1,
            random_start: false,
            seed: 0,
        };
        let adv = average_attack(&net, &x, &y, &idx, &c).unwrap();
        let before: f64 = per_sample_average_loss(&net, &x, &y).unwrap().iter().sum();
        let after: f64 = per_sample_average_loss(&net, &adv.inputs, &y).unwrap().iter().sum();
        assert!(after >= before - 1e-9, "before {before} after {after}");
    }

    #[test]
    fn bad_exit_index_is_domain_error() {
        let net = tiny_net(1);
        let (x, y, idx) = batch(2, 3);
        assert!(single_attack(&net, &x, &y, &idx, 0, &cfg(AttackKind::Single(1), 0.1, 1)).is_err());
        assert!(single_attack(&net, &x, &y, &idx, 5, &cfg(AttackKind::Single(1), 0.1, 1)).is_err());
    }
}
