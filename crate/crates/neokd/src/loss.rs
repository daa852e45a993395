//! Training objectives.
//!
//! Everything here composes per-exit cross-entropies on clean and
//! adversarial logits with two kinds of self-distillation teachers:
//!
//! - the neighbor teacher: per exit, the average of the clean softmax
//!   outputs of that exit's neighbors (exit 1 uses exits {1,2}, exit L uses
//!   {L−1,L}, interior exits use {i−1,i,i+1});
//! - the orthogonal teacher: per exit, the clean softmax masked down to the
//!   ground-truth class plus a per-exit set of ⌊(C−1)/L⌋ non-ground-truth
//!   classes, disjoint across exits and redrawn every epoch, renormalized.
//!
//! Teachers are always detached: they are computed from plain data outside
//! the tape, so no gradient can flow into the teacher path.

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tape::{Tape, VarId};
use crate::tensor::{kernels, Tensor};

/// Which training objective the trainer optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Clean + adversarial cross-entropy at every exit, nothing else.
    Baseline,
    /// Baseline plus last-exit self-distillation to every earlier exit,
    /// separately for the clean and adversarial streams.
    Skd,
    /// Baseline plus clean-last-exit distilled to adversarial-last-exit.
    Ard,
    /// Neighbor distillation only (orthogonal term disabled).
    NkdOnly,
    /// Orthogonal distillation only (neighbor term disabled).
    EokdOnly,
    /// Both distillation terms.
    NeoKd,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            LossKind::Baseline => "baseline",
            LossKind::Skd => "skd",
            LossKind::Ard => "ard",
            LossKind::NkdOnly => "nkd",
            LossKind::EokdOnly => "eokd",
            LossKind::NeoKd => "neokd",
        };
        write!(f, "{s}")
    }
}

/// Distillation weights: `alpha` scales the neighbor term, `beta` the
/// orthogonal term, `gamma[i]` rescales both for exit `i+1`.
/// `distill_weight` applies to the SKD/ARD baselines only.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub alpha: f32,
    pub beta: f32,
    pub gamma: Vec<f32>,
    pub distill_weight: f32,
}

impl DistillConfig {
    pub fn defaults(exits: usize) -> Self {
        DistillConfig {
            alpha: 3.0,
            beta: 1.0,
            gamma: vec![1.0; exits],
            distill_weight: 1.0,
        }
    }

    pub fn validate(&self, exits: usize) -> Result<()> {
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return Err(Error::config("loss.alpha", "must be finite and >= 0"));
        }
        if self.beta < 0.0 || !self.beta.is_finite() {
            return Err(Error::config("loss.beta", "must be finite and >= 0"));
        }
        if self.gamma.len() != exits {
            return Err(Error::config(
                "loss.gamma",
                format!("{} weights for {exits} exits", self.gamma.len()),
            ));
        }
        if self.gamma.iter().any(|&g| g <= 0.0 || !g.is_finite()) {
            return Err(Error::config("loss.gamma", "weights must be finite and > 0"));
        }
        if self.distill_weight < 0.0 || !self.distill_weight.is_finite() {
            return Err(Error::config("loss.distill_weight", "must be finite and >= 0"));
        }
        Ok(())
    }
}

// ── orthogonal class assignment ───────────────────────────────────────

/// Per-epoch assignment of non-ground-truth classes to exits.
///
/// One permutation of the class indices is drawn per epoch. For a sample
/// with label `y`: remove `y` from the permutation preserving order, take
/// the first `L·⌊(C−1)/L⌋` remaining classes, and give consecutive chunks
/// of `⌊(C−1)/L⌋` to exits `1..L`. The `(C−1) mod L` tail classes are
/// assigned to no exit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrthogonalAssignment {
    pub epoch: usize,
    permutation: Vec<usize>,
    classes: usize,
    exits: usize,
    per_exit: usize,
}

impl OrthogonalAssignment {
    pub fn draw(classes: usize, exits: usize, epoch: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::domain("need at least 2 classes".to_string()));
        }
        if exits == 0 {
            return Err(Error::domain("need at least 1 exit".to_string()));
        }
        let permutation =
            Stream::indexed(seed, "assignment", &[epoch as u64]).permutation(classes);
        Ok(OrthogonalAssignment {
            epoch,
            permutation,
            classes,
            exits,
            per_exit: (classes - 1) / exits,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn exits(&self) -> usize {
        self.exits
    }

    /// `⌊(C−1)/L⌋`: how many non-ground-truth classes each exit keeps.
    pub fn per_exit(&self) -> usize {
        self.per_exit
    }

    /// The class subset `S_i(y)` kept by `exit` (0-based) for label `y`.
    pub fn exit_classes(&self, exit: usize, y: usize) -> Vec<usize> {
        debug_assert!(exit < self.exits && y < self.classes);
        self.permutation
            .iter()
            .filter(|&&c| c != y)
            .skip(exit * self.per_exit)
            .take(self.per_exit)
            .copied()
            .collect()
    }
}

// ── teachers ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeacherKind {
    NkdNeighbor,
    EokdOrthogonal,
    SkdLast,
    ArdCleanLast,
}

/// Gradient-blocked target rows for one exit.
#[derive(Debug, Clone)]
pub struct TeacherBatch {
    pub probs: Tensor,
    pub kind: TeacherKind,
}

/// Softmax the clean logits of every exit outside the tape, yielding the
/// detached probability tensors every teacher is built from.
pub fn detached_probs(tape: &Tape, logits: &[VarId]) -> Vec<Tensor> {
    logits
        .iter()
        .map(|&l| {
            let shape = tape.shape(l).to_vec();
            let p = kernels::softmax_rows(tape.data(l), shape[0], shape[1]);
            Tensor::new(shape, p).expect("softmax shape")
        })
        .collect()
}

/// Neighbor-ensemble teacher for `exit` (0-based): the elementwise mean of
/// the clean probabilities of the neighboring exits.
pub fn nkd_teacher(clean_probs: &[Tensor], exit: usize) -> Result<TeacherBatch> {
    let exits = clean_probs.len();
    if exit >= exits {
        return Err(Error::domain(format!("exit {exit} out of range")));
    }
    let members: Vec<usize> = if exits == 1 {
        vec![0]
    } else if exit == 0 {
        vec![0, 1]
    } else if exit == exits - 1 {
        vec![exits - 2, exits - 1]
    } else {
        vec![exit - 1, exit, exit + 1]
    };
    let shape = clean_probs[exit].shape().to_vec();
    let n = clean_probs[exit].numel();
    let scale = 1.0 / members.len() as f32;
    let mut out = vec![0f32; n];
    for &m in &members {
        if clean_probs[m].shape() != shape.as_slice() {
            return Err(Error::dim("exit probability shapes differ".to_string()));
        }
        for (dst, &v) in out.iter_mut().zip(clean_probs[m].data()) {
            *dst += v;
        }
    }
    for v in out.iter_mut() {
        *v *= scale;
    }
    Ok(TeacherBatch {
        probs: Tensor::new(shape, out)?,
        kind: TeacherKind::NkdNeighbor,
    })
}

/// Orthogonal teacher for one exit: zero out every class outside
/// `{y} ∪ S_exit(y)` and renormalize the surviving mass. Falls back to the
/// one-hot label if the surviving mass vanishes.
pub fn eokd_target(
    clean_probs_exit: &Tensor,
    y: &[usize],
    assignment: &OrthogonalAssignment,
    exit: usize,
) -> Result<TeacherBatch> {
    let (b, c) = (clean_probs_exit.rows(), clean_probs_exit.cols());
    if y.len() != b {
        return Err(Error::dim(format!("{b} rows vs {} labels", y.len())));
    }
    if c != assignment.classes() {
        return Err(Error::dim(format!(
            "{c} classes vs assignment over {}",
            assignment.classes()
        )));
    }
    let mut out = vec![0f32; b * c];
    for (r, &label) in y.iter().enumerate() {
        let row = clean_probs_exit.row(r);
        let kept = assignment.exit_classes(exit, label);
        let mut mass = row[label] as f64;
        for &k in &kept {
            mass += row[k] as f64;
        }
        let dst = &mut out[r * c..(r + 1) * c];
        if mass < 1e-12 {
            dst[label] = 1.0;
            continue;
        }
        let inv = 1.0 / mass;
        dst[label] = (row[label] as f64 * inv) as f32;
        for &k in &kept {
            dst[k] = (row[k] as f64 * inv) as f32;
        }
    }
    Ok(TeacherBatch {
        probs: Tensor::new(vec![b, c], out)?,
        kind: TeacherKind::EokdOrthogonal,
    })
}

// ── losses ────────────────────────────────────────────────────────────

/// Per-exit scalar values of each loss component, for logging.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: f32,
    pub clean_ce: Vec<f32>,
    pub adv_ce: Vec<f32>,
    pub nkd: Vec<f32>,
    pub eokd: Vec<f32>,
}

impl LossBreakdown {
    fn zeros(exits: usize) -> Self {
        LossBreakdown {
            total: 0.0,
            clean_ce: vec![0.0; exits],
            adv_ce: vec![0.0; exits],
            nkd: vec![0.0; exits],
            eokd: vec![0.0; exits],
        }
    }
}

fn scalar(tape: &Tape, v: VarId) -> f32 {
    tape.data(v)[0]
}

/// Plain adversarial training: `Σ_i [CE(clean_i, y) + CE(adv_i, y)]`.
pub fn baseline_loss(
    tape: &mut Tape,
    clean_logits: &[VarId],
    adv_logits: &[VarId],
    y: &[usize],
) -> Result<(VarId, LossBreakdown)> {
    if clean_logits.len() != adv_logits.len() || clean_logits.is_empty() {
        return Err(Error::contract("clean/adv logit lists differ in length"));
    }
    let exits = clean_logits.len();
    let mut breakdown = LossBreakdown::zeros(exits);
    let mut total: Option<VarId> = None;
    for i in 0..exits {
        let clean = tape.cross_entropy(clean_logits[i], y)?;
        let adv = tape.cross_entropy(adv_logits[i], y)?;
        breakdown.clean_ce[i] = scalar(tape, clean);
        breakdown.adv_ce[i] = scalar(tape, adv);
        let pair = tape.add(clean, adv)?;
        total = Some(match total {
            None => pair,
            Some(t) => tape.add(t, pair)?,
        });
    }
    let total = total.expect("at least one exit");
    breakdown.total = scalar(tape, total);
    Ok((total, breakdown))
}

/// The full objective:
/// `Σ_i [CE(clean_i,y) + CE(adv_i,y) + γ_i·(α·NKD_i + β·EOKD_i)]`.
///
/// Zero-weighted distillation terms are skipped entirely, so `α = β = 0`
/// builds exactly the baseline graph. An assignment is required whenever
/// `β > 0`.
pub fn neokd_total(
    tape: &mut Tape,
    clean_logits: &[VarId],
    adv_logits: &[VarId],
    y: &[usize],
    assignment: Option<&OrthogonalAssignment>,
    dcfg: &DistillConfig,
) -> Result<(VarId, LossBreakdown)> {
    if clean_logits.len() != adv_logits.len() || clean_logits.is_empty() {
        return Err(Error::contract("clean/adv logit lists differ in length"));
    }
    let exits = clean_logits.len();
    dcfg.validate(exits)?;
    if dcfg.beta > 0.0 && assignment.is_none() {
        return Err(Error::contract("orthogonal term requires an assignment"));
    }
    let clean_probs = detached_probs(tape, clean_logits);
    let mut breakdown = LossBreakdown::zeros(exits);
    let mut total: Option<VarId> = None;
    for i in 0..exits {
        let clean = tape.cross_entropy(clean_logits[i], y)?;
        let adv = tape.cross_entropy(adv_logits[i], y)?;
        breakdown.clean_ce[i] = scalar(tape, clean);
        breakdown.adv_ce[i] = scalar(tape, adv);
        let mut exit_term = tape.add(clean, adv)?;

        let gamma = dcfg.gamma[i];
        if dcfg.alpha > 0.0 {
            let teacher = nkd_teacher(&clean_probs, i)?;
            let nkd = tape.soft_cross_entropy(adv_logits[i], &teacher.probs)?;
            breakdown.nkd[i] = scalar(tape, nkd);
            let weighted = tape.scalar_mul(nkd, gamma * dcfg.alpha);
            exit_term = tape.add(exit_term, weighted)?;
        }
        if dcfg.beta > 0.0 {
            let assignment = assignment.expect("checked above");
            let target = eokd_target(&clean_probs[i], y, assignment, i)?;
            let eokd = tape.soft_cross_entropy(adv_logits[i], &target.probs)?;
            breakdown.eokd[i] = scalar(tape, eokd);
            let weighted = tape.scalar_mul(eokd, gamma * dcfg.beta);
            exit_term = tape.add(exit_term, weighted)?;
        }
        total = Some(match total {
            None => exit_term,
            Some(t) => tape.add(t, exit_term)?,
        });
    }
    let total = total.expect("at least one exit");
    breakdown.total = scalar(tape, total);
    Ok((total, breakdown))
}

/// Last-exit self-distillation on both streams:
/// baseline + w·Σ_{i<L} [softCE(clean_i, sg(softmax(clean_L)))
///                       + softCE(adv_i, sg(softmax(adv_L)))].
pub fn skd_loss(
    tape: &mut Tape,
    clean_logits: &[VarId],
    adv_logits: &[VarId],
    y: &[usize],
    weight: f32,
) -> Result<(VarId, LossBreakdown)> {
    let (mut total, mut breakdown) = baseline_loss(tape, clean_logits, adv_logits, y)?;
    let exits = clean_logits.len();
    if exits > 1 && weight > 0.0 {
        let clean_probs = detached_probs(tape, clean_logits);
        let adv_probs = detached_probs(tape, adv_logits);
        let clean_teacher = TeacherBatch {
            probs: clean_probs[exits - 1].detach(),
            kind: TeacherKind::SkdLast,
        };
        let adv_teacher = TeacherBatch {
            probs: adv_probs[exits - 1].detach(),
            kind: TeacherKind::SkdLast,
        };
        for i in 0..exits - 1 {
            let c = tape.soft_cross_entropy(clean_logits[i], &clean_teacher.probs)?;
            let a = tape.soft_cross_entropy(adv_logits[i], &adv_teacher.probs)?;
            let pair = tape.add(c, a)?;
            let weighted = tape.scalar_mul(pair, weight);
            total = tape.add(total, weighted)?;
        }
    }
    breakdown.total = scalar(tape, total);
    Ok((total, breakdown))
}

/// Clean-teacher distillation at the last exit only:
/// baseline + w·softCE(adv_L, sg(softmax(clean_L))).
pub fn ard_loss(
    tape: &mut Tape,
    clean_logits: &[VarId],
    adv_logits: &[VarId],
    y: &[usize],
    weight: f32,
) -> Result<(VarId, LossBreakdown)> {
    let (mut total, mut breakdown) = baseline_loss(tape, clean_logits, adv_logits, y)?;
    let exits = clean_logits.len();
    if weight > 0.0 {
        let clean_probs = detached_probs(tape, clean_logits);
        let teacher = TeacherBatch {
            probs: clean_probs[exits - 1].detach(),
            kind: TeacherKind::ArdCleanLast,
        };
        let distill = tape.soft_cross_entropy(adv_logits[exits - 1], &teacher.probs)?;
        let weighted = tape.scalar_mul(distill, weight);
        total = tape.add(total, weighted)?;
    }
    breakdown.total = scalar(tape, total);
    Ok((total, breakdown))
}

/// Dispatch the configured objective.
pub fn training_loss(
    tape: &mut Tape,
    kind: LossKind,
    clean_logits: &[VarId],
    adv_logits: &[VarId],
    y: &[usize],
    assignment: Option<&OrthogonalAssignment>,
    dcfg: &DistillConfig,
) -> Result<(VarId, LossBreakdown)> {
    match kind {
        LossKind::Baseline => baseline_loss(tape, clean_logits, adv_logits, y),
        LossKind::Skd => skd_loss(tape, clean_logits, adv_logits, y, dcfg.distill_weight),
        LossKind::Ard => ard_loss(tape, clean_logits, adv_logits, y, dcfg.distill_weight),
        LossKind::NkdOnly => {
            let cfg = DistillConfig {
                beta: 0.0,
                ..dcfg.clone()
            };
            neokd_total(tape, clean_logits, adv_logits, y, None, &cfg)
        }
        LossKind::EokdOnly => {
            let cfg = DistillConfig {
                alpha: 0.0,
                ..dcfg.clone()
            };
            neokd_total(tape, clean_logits, adv_logits, y, assignment, &cfg)
        }
        LossKind::NeoKd => neokd_total(tape, clean_logits, adv_logits, y, assignment, dcfg),
    }
}

/// Whether a loss kind consumes the per-epoch orthogonal assignment.
pub fn kind_uses_assignment(kind: LossKind, dcfg: &DistillConfig) -> bool {
    match kind {
        LossKind::EokdOnly => true,
        LossKind::NeoKd => dcfg.beta > 0.0,
        _ => false,
    }
}
