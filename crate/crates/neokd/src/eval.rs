//! Evaluation: anytime per-exit accuracy, budgeted prediction with
//! confidence-threshold calibration and exit ensembling, and the
//! adversarial-transferability map.

use crate::attack::{run_attack, single_attack, AttackConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{FlopsProfile, MultiExitNetwork};
use crate::tensor::{kernels, Tensor};

// ── anytime prediction ───────────────────────────────────────────────

/// Accuracy rows for one attack setting (or clean inputs).
#[derive(Debug, Clone)]
pub struct AnytimeEntry {
    pub attack: String,
    pub per_exit_top1: Vec<f64>,
    pub avg_top1: f64,
    /// Present when the task has more than 5 classes.
    pub per_exit_top5: Option<Vec<f64>>,
    pub avg_top5: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AnytimeReport {
    pub exits: usize,
    pub classes: usize,
    pub samples: usize,
    pub entries: Vec<AnytimeEntry>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn top_k_hit(row: &[f32], label: usize, k: usize) -> bool {
    // Count of classes strictly better than the label, plus earlier ties,
    // must be below k (ties resolve toward smaller class index, matching
    // argmax).
    let ly = row[label];
    let mut rank = 0;
    for (c, &v) in row.iter().enumerate() {
        if v > ly || (v == ly && c < label) {
            rank += 1;
        }
    }
    rank < k
}

/// Per-exit (top1, top5) counts over a batch of logits.
fn count_hits(
    logits: &[Tensor],
    labels: &[usize],
    top1: &mut [usize],
    top5: &mut [usize],
    classes: usize,
) {
    for (exit, exit_logits) in logits.iter().enumerate() {
        for (r, &y) in labels.iter().enumerate() {
            let row = exit_logits.row(r);
            if kernels::argmax(row) == y {
                top1[exit] += 1;
            }
            if classes > 5 && top_k_hit(row, y, 5) {
                top5[exit] += 1;
            }
        }
    }
}

/// Per-exit accuracy under each configured attack. `None` means clean
/// inputs; evaluation runs in mini-batches with attacks regenerated per
/// batch against the frozen network.
pub fn eval_anytime(
    net: &MultiExitNetwork,
    ds: &Dataset,
    attacks: &[(String, Option<AttackConfig>)],
    batch_size: usize,
    threads: usize,
) -> Result<AnytimeReport> {
    let exits = net.exits();
    let classes = net.classes();
    let n = ds.len();
    let mut entries = Vec::with_capacity(attacks.len());
    for (label, attack) in attacks {
        let mut top1 = vec![0usize; exits];
        let mut top5 = vec![0usize; exits];
        let mut start = 0;
        while start < n {
            let end = (start + batch_size).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let batch = ds.subset(&idx, ds.tag);
            let inputs = match attack {
                None => batch.inputs.detach(),
                Some(cfg) => {
                    run_attack(net, &batch.inputs, &batch.labels, &idx, cfg, threads)?.inputs
                }
            };
            let logits = net.forward_all_exits(&inputs)?;
            count_hits(&logits, &batch.labels, &mut top1, &mut top5, classes);
            start = end;
        }
        let per_exit_top1: Vec<f64> = top1.iter().map(|&c| c as f64 / n as f64).collect();
        let avg_top1 = mean(&per_exit_top1);
        let (per_exit_top5, avg_top5) = if classes > 5 {
            let v: Vec<f64> = top5.iter().map(|&c| c as f64 / n as f64).collect();
            let m = mean(&v);
            (Some(v), Some(m))
        } else {
            (None, None)
        };
        entries.push(AnytimeEntry {
            attack: label.clone(),
            per_exit_top1,
            avg_top1,
            per_exit_top5,
            avg_top5,
        });
    }
    Ok(AnytimeReport {
        exits,
        classes,
        samples: n,
        entries,
    })
}

// ── budgeted prediction ──────────────────────────────────────────────

/// Confidence thresholds calibrated from a validation allocation.
/// `thresholds[i]` gates exit `i+1`; the last entry is the `−∞` sentinel
/// (every remaining sample exits at L). `design_mean_flops` is the mean
/// cost implied by the allocation itself on the calibration set.
#[derive(Debug, Clone)]
pub struct BudgetProfile {
    pub thresholds: Vec<f32>,
    pub allocation: Vec<usize>,
    pub val_size: usize,
    pub design_mean_flops: f64,
}

/// Max-softmax confidence of every sample at one exit.
fn exit_confidences(net: &MultiExitNetwork, inputs: &Tensor, exit: usize) -> Result<Vec<f32>> {
    let logits = net.forward_all_exits(inputs)?;
    let (b, c) = (inputs.rows(), net.classes());
    let probs = kernels::softmax_rows(logits[exit].data(), b, c);
    Ok((0..b)
        .map(|r| {
            probs[r * c..(r + 1) * c]
                .iter()
                .copied()
                .fold(f32::NEG_INFINITY, f32::max)
        })
        .collect())
}

/// Sequential threshold calibration: at each exit, the `n_i`-th largest
/// clean confidence among the samples still in flight becomes the
/// threshold, and those `n_i` samples leave. Sorting is stable, so ties
/// resolve by sample order and the allocation is met exactly.
pub fn calibrate_thresholds(
    net: &MultiExitNetwork,
    val: &Dataset,
    allocation: &[usize],
    flops: &FlopsProfile,
) -> Result<BudgetProfile> {
    let exits = net.exits();
    if allocation.len() != exits {
        return Err(Error::config(
            "budget.allocation",
            format!("{} entries for {exits} exits", allocation.len()),
        ));
    }
    let total: usize = allocation.iter().sum();
    if total != val.len() {
        return Err(Error::config(
            "budget.allocation",
            format!("allocates {total} samples, validation set has {}", val.len()),
        ));
    }
    let mut remaining: Vec<usize> = (0..val.len()).collect();
    let mut thresholds = vec![f32::NEG_INFINITY; exits];
    for (exit, &quota) in allocation.iter().enumerate().take(exits - 1) {
        if quota == 0 {
            thresholds[exit] = f32::INFINITY;
            continue;
        }
        let subset = val.subset(&remaining, val.tag);
        let conf = exit_confidences(net, &subset.inputs, exit)?;
        // Stable sort by confidence, descending.
        let mut order: Vec<usize> = (0..remaining.len()).collect();
        order.sort_by(|&a, &b| conf[b].partial_cmp(&conf[a]).expect("finite confidences"));
        thresholds[exit] = conf[order[quota - 1]];
        let leaving: std::collections::BTreeSet<usize> =
            order[..quota].iter().copied().collect();
        remaining = remaining
            .iter()
            .enumerate()
            .filter(|(pos, _)| !leaving.contains(pos))
            .map(|(_, &sample)| sample)
            .collect();
    }
    if remaining.len() != allocation[exits - 1] {
        return Err(Error::contract(format!(
            "{} samples remain for the last exit, allocation says {}",
            remaining.len(),
            allocation[exits - 1]
        )));
    }
    let design_mean_flops = allocation
        .iter()
        .enumerate()
        .map(|(i, &n)| n as f64 * flops.exit_cost(i) as f64)
        .sum::<f64>()
        / val.len() as f64;
    Ok(BudgetProfile {
        thresholds,
        allocation: allocation.to_vec(),
        val_size: val.len(),
        design_mean_flops,
    })
}

#[derive(Debug, Clone)]
pub struct BudgetedResult {
    pub accuracy: f64,
    pub mean_flops: f64,
    /// How many test samples left at each exit.
    pub exit_counts: Vec<usize>,
}

/// Walk the exits per sample; leave at the first exit whose confidence
/// clears its threshold (always at L). With `ensemble` the prediction is
/// the argmax of the mean softmax over all exits up to the leaving one,
/// otherwise the leaving exit's own argmax.
#[allow(clippy::too_many_arguments)]
pub fn eval_budgeted(
    net: &MultiExitNetwork,
    test: &Dataset,
    profile: &BudgetProfile,
    attack: Option<&AttackConfig>,
    ensemble: bool,
    flops: &FlopsProfile,
    batch_size: usize,
    threads: usize,
) -> Result<BudgetedResult> {
    let exits = net.exits();
    let classes = net.classes();
    let n = test.len();
    let mut correct = 0usize;
    let mut flops_total = 0f64;
    let mut exit_counts = vec![0usize; exits];
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let batch = test.subset(&idx, test.tag);
        let inputs = match attack {
            None => batch.inputs.detach(),
            Some(cfg) => run_attack(net, &batch.inputs, &batch.labels, &idx, cfg, threads)?.inputs,
        };
        let logits = net.forward_all_exits(&inputs)?;
        let b = batch.labels.len();
        let probs: Vec<Vec<f32>> = logits
            .iter()
            .map(|l| kernels::softmax_rows(l.data(), b, classes))
            .collect();
        for (r, &y) in batch.labels.iter().enumerate() {
            let mut leave_at = exits - 1;
            for (exit, exit_probs) in probs.iter().enumerate().take(exits - 1) {
                let conf = exit_probs[r * classes..(r + 1) * classes]
                    .iter()
                    .copied()
                    .fold(f32::NEG_INFINITY, f32::max);
                if conf >= profile.thresholds[exit] {
                    leave_at = exit;
                    break;
                }
            }
            exit_counts[leave_at] += 1;
            flops_total += flops.exit_cost(leave_at) as f64;
            let prediction = if ensemble {
                let mut avg = vec![0f64; classes];
                for p in probs.iter().take(leave_at + 1) {
                    for (dst, &v) in avg.iter_mut().zip(&p[r * classes..(r + 1) * classes]) {
                        *dst += v as f64;
                    }
                }
                let avg_f32: Vec<f32> = avg
                    .iter()
                    .map(|&v| (v / (leave_at + 1) as f64) as f32)
                    .collect();
                kernels::argmax(&avg_f32)
            } else {
                kernels::argmax(&probs[leave_at][r * classes..(r + 1) * classes])
            };
            if prediction == y {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(BudgetedResult {
        accuracy: correct as f64 / n as f64,
        mean_flops: flops_total / n as f64,
        exit_counts,
    })
}

/// A family of `cases` validation allocations sweeping the budget from
/// everything-at-exit-1 to everything-at-exit-L. Built from a sliding
/// Gaussian bump over exits via monotone cumulative counts, so the implied
/// mean cost is non-decreasing along the family and the endpoints are the
/// exact corners.
pub fn allocation_sweep(val_size: usize, exits: usize, cases: usize) -> Vec<Vec<usize>> {
    assert!(exits >= 1 && cases >= 2 && val_size >= 1);
    let sigma = (exits as f64 / 4.0).max(0.35);
    let reach = 4.0 * sigma;
    let phi = |z: f64| 0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2));
    let mut out = Vec::with_capacity(cases);
    for case in 0..cases {
        let lambda = case as f64 / (cases - 1) as f64;
        let center = (1.0 - reach) + lambda * ((exits as f64 + reach) - (1.0 - reach));
        // Cumulative samples through exit i (1-based), decreasing in λ.
        let mut cum = Vec::with_capacity(exits);
        for i in 1..=exits {
            let frac = if i == exits {
                1.0
            } else {
                phi((i as f64 + 0.5 - center) / sigma)
            };
            cum.push((frac * val_size as f64).round().min(val_size as f64) as usize);
        }
        for i in 1..exits {
            cum[i] = cum[i].max(cum[i - 1]);
        }
        let mut alloc = Vec::with_capacity(exits);
        let mut prev = 0;
        for &c in &cum {
            alloc.push(c - prev);
            prev = c;
        }
        out.push(alloc);
    }
    // Force exact corner allocations at the ends.
    let mut first = vec![0; exits];
    first[0] = val_size;
    let mut last = vec![0; exits];
    last[exits - 1] = val_size;
    out[0] = first;
    *out.last_mut().expect("cases >= 2") = last;
    out
}

/// Abramowitz–Stegun 7.1.26 rational approximation, |error| < 1.5e-7.
fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592 + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

// ── adversarial transferability ──────────────────────────────────────

/// L×L attack-success-rate matrix: row = target exit of the single attack,
/// column = exit where misclassification is measured. Computed only over
/// samples every exit classifies correctly on clean inputs.
#[derive(Debug, Clone)]
pub struct TransferabilityMap {
    pub success: Vec<Vec<f64>>,
    pub off_diagonal_mean: f64,
    pub eligible: usize,
}

#[derive(Debug, Clone)]
pub enum TransferOutcome {
    /// No sample was correct at every exit; nothing to measure.
    Empty { total: usize },
    Map(TransferabilityMap),
}

pub fn transferability_map(
    net: &MultiExitNetwork,
    test: &Dataset,
    attack: &AttackConfig,
    batch_size: usize,
    threads: usize,
) -> Result<TransferOutcome> {
    let exits = net.exits();
    // Gather samples correct at all exits on clean data.
    let mut eligible = Vec::new();
    let mut start = 0;
    while start < test.len() {
        let end = (start + batch_size).min(test.len());
        let idx: Vec<usize> = (start..end).collect();
        let batch = test.subset(&idx, test.tag);
        let logits = net.forward_all_exits(&batch.inputs)?;
        for (r, &y) in batch.labels.iter().enumerate() {
            let all_correct = logits
                .iter()
                .all(|l| kernels::argmax(l.row(r)) == y);
            if all_correct {
                eligible.push(idx[r]);
            }
        }
        start = end;
    }
    if eligible.is_empty() {
        return Ok(TransferOutcome::Empty { total: test.len() });
    }

    // Per-target single attacks run over a frozen network snapshot, so the
    // target rows can be computed in parallel and merged by index.
    let pool = test.subset(&eligible, test.tag);
    let rows: Vec<Result<Vec<f64>>> =
        crate::attack::parallel_map(exits, threads, |target| -> Result<Vec<f64>> {
            let mut miss = vec![0usize; exits];
            let mut start = 0;
            while start < pool.len() {
                let end = (start + batch_size).min(pool.len());
                let idx: Vec<usize> = (start..end).collect();
                let batch = pool.subset(&idx, pool.tag);
                let adv =
                    single_attack(net, &batch.inputs, &batch.labels, &idx, target + 1, attack)?;
                let logits = net.forward_all_exits(&adv.inputs)?;
                for (r, &y) in batch.labels.iter().enumerate() {
                    for (exit, l) in logits.iter().enumerate() {
                        if kernels::argmax(l.row(r)) != y {
                            miss[exit] += 1;
                        }
                    }
                }
                start = end;
            }
            Ok(miss.iter().map(|&m| m as f64 / pool.len() as f64).collect())
        });
    let mut success = Vec::with_capacity(exits);
    for row in rows {
        success.push(row?);
    }

    let mut off_sum = 0f64;
    let mut off_count = 0usize;
    for (i, row) in success.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if i != j {
                off_sum += v;
                off_count += 1;
            }
        }
    }
    let off_diagonal_mean = if off_count == 0 {
        0.0
    } else {
        off_sum / off_count as f64
    };
    Ok(TransferOutcome::Map(TransferabilityMap {
        success,
        off_diagonal_mean,
        eligible: eligible.len(),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::AttackKind;
    use crate::data::{synthetic_gaussians, SplitTag};
    use crate::net::NetworkSpec;

    fn tiny_net(seed: u64) -> MultiExitNetwork {
        MultiExitNetwork::init(&NetworkSpec {
            input_dim: 6,
            block_widths: vec![vec![8], vec![6]],
            classes: 3,
            init_seed: seed,
        })
        .unwrap()
    }

    fn eval_cfg(steps: usize) -> AttackConfig {
        AttackConfig {
            kind: AttackKind::Average,
            epsilon: 0.1,
            step_size: 0.05,
            steps,
            random_start: false,
            seed: 3,
        }
    }

    #[test]
    fn zero_weight_net_clean_accuracy_is_class0_frequency() {
        let spec = NetworkSpec {
            input_dim: 5,
            block_widths: vec![vec![4]],
            classes: 3,
            init_seed: 0,
        };
        let mut net = MultiExitNetwork::init(&spec).unwrap();
        for p in net.params_mut() {
            p.data_mut().fill(0.0);
        }
        let ds = synthetic_gaussians(3, 5, 10, 4, 0.1).unwrap();
        let freq0 = ds.labels.iter().filter(|&&y| y == 0).count() as f64 / ds.len() as f64;
        let report =
            eval_anytime(&net, &ds, &[("clean".into(), None)], 16, 1).unwrap();
        assert!((report.entries[0].per_exit_top1[0] - freq0).abs() < 1e-12);
    }

    #[test]
    fn anytime_clean_matches_direct_accuracy() {
        let net = tiny_net(5);
        let ds = synthetic_gaussians(3, 6, 30, 6, 0.2).unwrap();
        let report = eval_anytime(&net, &ds, &[("clean".into(), None)], 32, 1).unwrap();
        let direct = crate::train::per_exit_accuracy(&net, &ds.inputs, &ds.labels).unwrap();
        assert_eq!(report.entries[0].per_exit_top1, direct);
        assert!(
            (report.entries[0].avg_top1 - mean(&direct)).abs() < 1e-15
        );
    }

    #[test]
    fn hand_built_logits_accuracy_hand_count() {
        // 5 samples, direct per-row check of the counting logic.
        let logits = vec![
            Tensor::new(
                vec![5, 3],
                vec![
                    2.0, 1.0, 0.0, // → 0
                    0.0, 2.0, 1.0, // → 1
                    0.0, 1.0, 2.0, // → 2
                    2.0, 0.0, 1.0, // → 0
                    1.0, 2.0, 0.0, // → 1
                ],
            )
            .unwrap(),
        ];
        let labels = vec![0, 1, 2, 1, 1]; // hits: 1,1,1,0,1 → 4/5
        let mut top1 = vec![0usize; 1];
        let mut top5 = vec![0usize; 1];
        count_hits(&logits, &labels, &mut top1, &mut top5, 3);
        assert_eq!(top1[0], 4);
    }

    #[test]
    fn top5_reported_only_above_five_classes() {
        let ds6 = synthetic_gaussians(6, 8, 5, 7, 0.1).unwrap();
        let net6 = MultiExitNetwork::init(&NetworkSpec {
            input_dim: 8,
            block_widths: vec![vec![6]],
            classes: 6,
            init_seed: 8,
        })
        .unwrap();
        let report = eval_anytime(&net6, &ds6, &[("clean".into(), None)], 16, 1).unwrap();
        assert!(report.entries[0].per_exit_top5.is_some());

        let ds3 = synthetic_gaussians(3, 6, 5, 7, 0.1).unwrap();
        let report3 = eval_anytime(&tiny_net(1), &ds3, &[("clean".into(), None)], 16, 1).unwrap();
        assert!(report3.entries[0].per_exit_top5.is_none());
    }

    #[test]
    fn calibration_boundary_allocation_uses_min_confidence() {
        let net = tiny_net(9);
        let val = synthetic_gaussians(3, 6, 8, 10, 0.2).unwrap();
        let flops = MultiExitNetwork::count_flops(net.spec()).unwrap();
        let profile =
            calibrate_thresholds(&net, &val, &[val.len(), 0], &flops).unwrap();
        let conf = exit_confidences(&net, &val.inputs, 0).unwrap();
        let min_conf = conf.iter().copied().fold(f32::INFINITY, f32::min);
        assert_eq!(profile.thresholds[0], min_conf);
        // Every validation sample clears its own minimum.
        assert!(conf.iter().all(|&c| c >= profile.thresholds[0]));
        assert_eq!(profile.design_mean_flops, flops.exit_cost(0) as f64);
    }

    #[test]
    fn calibration_toy_six_samples_two_exits() {
        // Hand-checkable 2-exit case with allocation (4, 2): the threshold
        // is the 4th-largest exit-1 confidence and exactly 4 samples leave.
        let net = tiny_net(11);
        let val = synthetic_gaussians(3, 6, 2, 12, 0.25).unwrap(); // 6 samples
        let flops = MultiExitNetwork::count_flops(net.spec()).unwrap();
        let profile = calibrate_thresholds(&net, &val, &[4, 2], &flops).unwrap();
        let conf = exit_confidences(&net, &val.inputs, 0).unwrap();
        let mut sorted = conf.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert_eq!(profile.thresholds[0], sorted[3]);
        let exiting = conf.iter().filter(|&&c| c >= profile.thresholds[0]).count();
        assert_eq!(exiting, 4);
    }

    #[test]
    fn budgeted_walkthrough_hand_case() {
        // Zero-weight net → all confidences are the uniform 1/3 at both
        // exits. Threshold above 1/3 at exit 1 pushes everything to exit 2;
        // threshold at or below 1/3 lets everything leave at exit 1.
        let spec = NetworkSpec {
            input_dim: 4,
            block_widths: vec![vec![3], vec![3]],
            classes: 3,
            init_seed: 0,
        };
        let mut net = MultiExitNetwork::init(&spec).unwrap();
        for p in net.params_mut() {
            p.data_mut().fill(0.0);
        }
        let test = synthetic_gaussians(3, 4, 1, 13, 0.1).unwrap(); // 3 samples
        let flops = MultiExitNetwork::count_flops(&spec).unwrap();

        let all_at_1 = BudgetProfile {
            thresholds: vec![f32::NEG_INFINITY, f32::NEG_INFINITY],
            allocation: vec![3, 0],
            val_size: 3,
            design_mean_flops: flops.exit_cost(0) as f64,
        };
        let r = eval_budgeted(&net, &test, &all_at_1, None, false, &flops, 8, 1).unwrap();
        assert_eq!(r.exit_counts, vec![3, 0]);
        assert_eq!(r.mean_flops, flops.exit_cost(0) as f64);

        let all_at_2 = BudgetProfile {
            thresholds: vec![f32::INFINITY, f32::NEG_INFINITY],
            allocation: vec![0, 3],
            val_size: 3,
            design_mean_flops: flops.exit_cost(1) as f64,
        };
        let r2 = eval_budgeted(&net, &test, &all_at_2, None, true, &flops, 8, 1).unwrap();
        assert_eq!(r2.exit_counts, vec![0, 3]);
        assert_eq!(r2.mean_flops, flops.exit_cost(1) as f64);
    }

    #[test]
    fn allocation_sweep_is_monotone_with_corner_endpoints() {
        for (exits, val) in [(2usize, 37usize), (3, 100), (5, 211)] {
            let sweep = allocation_sweep(val, exits, 100);
            assert_eq!(sweep.len(), 100);
            for alloc in &sweep {
                assert_eq!(alloc.iter().sum::<usize>(), val);
            }
            assert_eq!(sweep[0][0], val);
            assert_eq!(sweep[99][exits - 1], val);
            // Monotone design cost for any strictly increasing cost vector.
            let cost: Vec<f64> = (0..exits).map(|i| (i * i + 1) as f64).collect();
            let mut prev = f64::MIN;
            for alloc in &sweep {
                let c: f64 = alloc
                    .iter()
                    .enumerate()
                    .map(|(i, &n)| n as f64 * cost[i])
                    .sum();
                assert!(c >= prev - 1e-9, "sweep cost decreased: {c} < {prev}");
                prev = c;
            }
        }
    }

    #[test]
    fn transfer_zero_epsilon_is_all_zeros() {
        let net = tiny_net(21);
        let ds = synthetic_gaussians(3, 6, 20, 22, 0.05).unwrap();
        let outcome =
            transferability_map(&net, &ds, &eval_cfg(0).with_kind(AttackKind::Single(1)), 16, 1)
                .unwrap();
        match outcome {
            TransferOutcome::Map(m) => {
                assert!(m.eligible > 0);
                for row in &m.success {
                    for &v in row {
                        assert_eq!(v, 0.0);
                    }
                }
                assert_eq!(m.off_diagonal_mean, 0.0);
            }
            TransferOutcome::Empty { .. } => panic!("expected eligible samples"),
        }
    }

    #[test]
    fn transfer_decoupled_exits_have_zero_off_diagonal() {
        // Exit 1 reads only the first two input dims, exit 2 only the last
        // two (identity trunk); an attack on one exit cannot move the other.
        let spec = NetworkSpec {
            input_dim: 4,
            block_widths: vec![vec![], vec![]],
            classes: 2,
            init_seed: 0,
        };
        let mut net = MultiExitNetwork::init(&spec).unwrap();
        net.set_classifier(
            0,
            MultiExitNetwork::affine(
                Tensor::new(vec![4, 2], vec![3.0, -3.0, -3.0, 3.0, 0.0, 0.0, 0.0, 0.0]).unwrap(),
                Tensor::zeros(vec![1, 2]),
            ),
        );
        net.set_classifier(
            1,
            MultiExitNetwork::affine(
                Tensor::new(vec![4, 2], vec![0.0, 0.0, 0.0, 0.0, 3.0, -3.0, -3.0, 3.0]).unwrap(),
                Tensor::zeros(vec![1, 2]),
            ),
        );
        // Class 0 ↦ (1,0,1,0)-ish, class 1 ↦ (0,1,0,1)-ish.
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut rng = crate::rng::Stream::labeled(5, "decoupled");
        for i in 0..40 {
            let y = i % 2;
            let mut jitter = || 0.05 * rng.next_f32();
            if y == 0 {
                rows.extend([0.9 - jitter(), 0.1 + jitter(), 0.9 - jitter(), 0.1 + jitter()]);
            } else {
                rows.extend([0.1 + jitter(), 0.9 - jitter(), 0.1 + jitter(), 0.9 - jitter()]);
            }
            labels.push(y);
        }
        let ds = Dataset::new(
            Tensor::new(vec![40, 4], rows).unwrap(),
            labels,
            2,
            SplitTag::Test,
        )
        .unwrap();
        let cfg = AttackConfig {
            kind: AttackKind::Single(1),
            epsilon: 0.12,
            step_size: 0.06,
            steps: 10,
            random_start: false,
            seed: 0,
        };
        match transferability_map(&net, &ds, &cfg, 16, 1).unwrap() {
            TransferOutcome::Map(m) => {
                assert!(m.eligible > 0);
                assert_eq!(m.success[0][1], 0.0, "{:?}", m.success);
                assert_eq!(m.success[1][0], 0.0, "{:?}", m.success);
            }
            TransferOutcome::Empty { .. } => panic!("expected eligible samples"),
        }
    }

    #[test]
    fn transfer_empty_when_nothing_is_eligible() {
        // A zero net predicts class 0 everywhere; samples of class 1 are
        // always wrong, so no sample is correct at every exit... unless all
        // labels are 0. Use a two-class set with both labels present.
        let spec = NetworkSpec {
            input_dim: 4,
            block_widths: vec![vec![3]],
            classes: 2,
            init_seed: 0,
        };
        let mut net = MultiExitNetwork::init(&spec).unwrap();
        for p in net.params_mut() {
            p.data_mut().fill(0.0);
        }
        let ds = Dataset::new(
            Tensor::new(vec![2, 4], vec![0.2; 8]).unwrap(),
            vec![1, 1],
            2,
            SplitTag::Test,
        )
        .unwrap();
        match transferability_map(&net, &ds, &eval_cfg(1).with_kind(AttackKind::Single(1)), 8, 1)
            .unwrap()
        {
            TransferOutcome::Empty { total } => assert_eq!(total, 2),
            TransferOutcome::Map(_) => panic!("expected empty outcome"),
        }
    }
}
