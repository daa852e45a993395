//! Batch experiment driver: train, evaluate (anytime / budgeted /
//! transferability), and gradient-check from one config file.
//!
//! Every command is idempotent: rerunning with the same config and seed
//! overwrites its outputs with bitwise-identical content (reports carry no
//! timestamps; all randomness flows from the config seed).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use neokd::attack::run_attack;
use neokd::config::{BudgetAllocations, ExperimentConfig};
use neokd::data::{Dataset, SplitTag};
use neokd::error::Error;
use neokd::eval::{
    allocation_sweep, calibrate_thresholds, eval_anytime, eval_budgeted, transferability_map,
    AnytimeReport, TransferOutcome,
};
use neokd::net::MultiExitNetwork;
use neokd::report::{fmt_f64, write_json, Csv};
use neokd::train::TrainState;
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "neokd",
    about = "Adversarial training and evaluation for multi-exit networks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOpts {
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config's root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's worker thread count.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Adversarially train a model and write checkpoint, log, and snapshot.
    Train {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Per-exit accuracy on clean and attacked test data.
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        /// Model checkpoint (.mxnn) to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Budgeted prediction: calibrate thresholds per allocation and emit the
    /// accuracy/FLOPs frontier.
    Budget {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Adversarial-transferability map from per-exit single attacks.
    Transfer {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference verification of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { common } => with_config(&common, cmd_train),
        Command::Eval { common, checkpoint } => {
            with_config(&common, |cfg, out| cmd_eval(cfg, out, &checkpoint))
        }
        Command::Budget { common, checkpoint } => {
            with_config(&common, |cfg, out| cmd_budget(cfg, out, &checkpoint))
        }
        Command::Transfer { common, checkpoint } => {
            with_config(&common, |cfg, out| cmd_transfer(cfg, out, &checkpoint))
        }
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config { .. } | Error::Io { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn with_config(
    common: &CommonOpts,
    f: impl FnOnce(&ExperimentConfig, &Path) -> neokd::Result<ExitCode>,
) -> neokd::Result<ExitCode> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.run.seed = seed;
    }
    if let Some(threads) = common.threads {
        cfg.run.threads = threads.max(1);
    }
    if let Some(out) = &common.out {
        cfg.run.out_dir = out.clone();
    }
    cfg.validate()?;
    let out_dir = cfg.run.out_dir.clone();
    f(&cfg, &out_dir)
}

fn load_net(cfg: &ExperimentConfig, checkpoint: &Path) -> neokd::Result<MultiExitNetwork> {
    let net = MultiExitNetwork::load(checkpoint)?;
    let expected = cfg.network_spec();
    if net.spec().input_dim != expected.input_dim
        || net.spec().classes != expected.classes
        || net.spec().block_widths != expected.block_widths
    {
        return Err(Error::config(
            "checkpoint",
            format!(
                "model shape {:?} does not match config {:?}",
                net.spec(),
                expected
            ),
        ));
    }
    Ok(net)
}

fn cmd_train(cfg: &ExperimentConfig, out_dir: &Path) -> neokd::Result<ExitCode> {
    let (train_set, val_set, _test) = cfg.load_data()?;
    let probe = val_set
        .as_ref()
        .map(|v| v.take(cfg.run.probe_size, SplitTag::Val));
    let train_cfg = cfg.train_config();
    let spec = cfg.network_spec();
    let net = MultiExitNetwork::init(&spec)?;
    let mut state = TrainState::fresh(net);

    let cadence = cfg.run.checkpoint_every;
    let resume_path = out_dir.join("resume.mxts");
    let log = state.run_with(&train_set, probe.as_ref(), &train_cfg, |state, record| {
        println!(
            "epoch {:>3}  lr {:.5}  loss {:.4}  ({:.1}s)",
            record.epoch + 1,
            record.lr,
            record.total_loss,
            record.wall_secs
        );
        if cadence > 0 && (record.epoch + 1) % cadence == 0 {
            state.save(&resume_path)?;
        }
        Ok(())
    })?;

    state.net.save(&out_dir.join("model.mxnn"))?;
    state.save(&resume_path)?;
    neokd::report::write_atomic(
        &out_dir.join("train_log.csv"),
        log.to_csv(state.net.exits()).as_bytes(),
    )?;
    neokd::report::write_atomic(
        &out_dir.join("config.snapshot.conf"),
        cfg.to_text().as_bytes(),
    )?;
    println!(
        "wrote {}, train_log.csv, config.snapshot.conf",
        out_dir.join("model.mxnn").display()
    );
    Ok(ExitCode::SUCCESS)
}

fn anytime_csv(report: &AnytimeReport) -> Csv {
    let mut csv = Csv::new(&["exit", "metric", "attack", "value"]);
    for entry in &report.entries {
        for (i, &v) in entry.per_exit_top1.iter().enumerate() {
            csv.row(&[
                (i + 1).to_string(),
                "top1".into(),
                entry.attack.clone(),
                fmt_f64(v),
            ]);
        }
        csv.row(&[
            "avg".into(),
            "top1".into(),
            entry.attack.clone(),
            fmt_f64(entry.avg_top1),
        ]);
        if let (Some(top5), Some(avg5)) = (&entry.per_exit_top5, entry.avg_top5) {
            for (i, &v) in top5.iter().enumerate() {
                csv.row(&[
                    (i + 1).to_string(),
                    "top5".into(),
                    entry.attack.clone(),
                    fmt_f64(v),
                ]);
            }
            csv.row(&["avg".into(), "top5".into(), entry.attack.clone(), fmt_f64(avg5)]);
        }
    }
    csv
}

fn cmd_eval(cfg: &ExperimentConfig, out_dir: &Path, checkpoint: &Path) -> neokd::Result<ExitCode> {
    let net = load_net(cfg, checkpoint)?;
    let (_, _, test) = cfg.load_data()?;
    let eval_attack = cfg.eval_attack();
    let attacks = vec![
        ("clean".to_string(), None),
        (eval_attack.kind.to_string(), Some(eval_attack.clone())),
    ];
    let report = eval_anytime(&net, &test, &attacks, cfg.optim.batch_size, cfg.run.threads)?;
    anytime_csv(&report).write(&out_dir.join("anytime.csv"))?;

    let entries: Vec<serde_json::Value> = report
        .entries
        .iter()
        .map(|e| {
            json!({
                "attack": e.attack,
                "per_exit_top1": e.per_exit_top1,
                "avg_top1": e.avg_top1,
                "per_exit_top5": e.per_exit_top5,
                "avg_top5": e.avg_top5,
            })
        })
        .collect();
    write_json(
        &out_dir.join("anytime.json"),
        &json!({
            "command": "eval",
            "exits": report.exits,
            "classes": report.classes,
            "samples": report.samples,
            "entries": entries,
        }),
    )?;
    for e in &report.entries {
        println!(
            "{:<12} per-exit top1 {:?}  avg {:.4}",
            e.attack, e.per_exit_top1, e.avg_top1
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_budget(cfg: &ExperimentConfig, out_dir: &Path, checkpoint: &Path) -> neokd::Result<ExitCode> {
    let net = load_net(cfg, checkpoint)?;
    let (_, val, test) = cfg.load_data()?;
    let val = val.ok_or_else(|| {
        Error::config("data.val_fraction", "budgeted prediction needs a validation split")
    })?;
    let flops = MultiExitNetwork::count_flops(net.spec())?;
    let allocations = match &cfg.run.budget_allocations {
        BudgetAllocations::Auto(cases) => allocation_sweep(val.len(), net.exits(), *cases),
        BudgetAllocations::Explicit(list) => list.clone(),
    };

    // Adversarial inputs do not depend on thresholds: attack the test set
    // once, then sweep profiles over the fixed adversarial inputs.
    let eval_attack = cfg.eval_attack();
    let adv_test = {
        let mut inputs = Vec::with_capacity(test.len() * test.dim());
        let mut start = 0;
        while start < test.len() {
            let end = (start + cfg.optim.batch_size).min(test.len());
            let idx: Vec<usize> = (start..end).collect();
            let batch = test.subset(&idx, test.tag);
            let adv = run_attack(
                &net,
                &batch.inputs,
                &batch.labels,
                &idx,
                &eval_attack,
                cfg.run.threads,
            )?;
            inputs.extend_from_slice(adv.inputs.data());
            start = end;
        }
        Dataset::new(
            neokd::Tensor::new(vec![test.len(), test.dim()], inputs)?,
            test.labels.clone(),
            test.classes,
            SplitTag::Test,
        )?
    };

    let mut csv = Csv::new(&[
        "case",
        "allocation",
        "val_mean_flops",
        "test_mean_flops",
        "test_accuracy",
    ]);
    let mut frontier = Vec::new();
    for (case, alloc) in allocations.iter().enumerate() {
        let profile = calibrate_thresholds(&net, &val, alloc, &flops)?;
        let result = eval_budgeted(
            &net,
            &adv_test,
            &profile,
            None,
            cfg.run.budget_ensemble,
            &flops,
            cfg.optim.batch_size,
            cfg.run.threads,
        )?;
        let alloc_text = alloc
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(";");
        csv.row(&[
            case.to_string(),
            alloc_text,
            fmt_f64(profile.design_mean_flops),
            fmt_f64(result.mean_flops),
            fmt_f64(result.accuracy),
        ]);
        frontier.push(json!({
            "case": case,
            "allocation": alloc,
            "val_mean_flops": profile.design_mean_flops,
            "test_mean_flops": result.mean_flops,
            "test_accuracy": result.accuracy,
        }));
    }
    csv.write(&out_dir.join("budget_frontier.csv"))?;
    write_json(
        &out_dir.join("budget.json"),
        &json!({
            "command": "budget",
            "attack": eval_attack.kind.to_string(),
            "ensemble": cfg.run.budget_ensemble,
            "exit_flops": flops.per_exit,
            "cases": frontier,
        }),
    )?;
    println!(
        "budget frontier: {} allocations, flops range [{}, {}]",
        allocations.len(),
        flops.per_exit.first().expect("at least one exit"),
        flops.per_exit.last().expect("at least one exit"),
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_transfer(cfg: &ExperimentConfig, out_dir: &Path, checkpoint: &Path) -> neokd::Result<ExitCode> {
    let net = load_net(cfg, checkpoint)?;
    let (_, _, test) = cfg.load_data()?;
    let attack = cfg.eval_attack();
    let outcome = transferability_map(&net, &test, &attack, cfg.optim.batch_size, cfg.run.threads)?;
    match outcome {
        TransferOutcome::Empty { total } => {
            write_json(
                &out_dir.join("transfer.json"),
                &json!({
                    "command": "transfer",
                    "status": "empty",
                    "eligible": 0,
                    "total": total,
                }),
            )?;
            println!("no sample is correct at every exit; transfer map is empty");
            Ok(ExitCode::SUCCESS)
        }
        TransferOutcome::Map(map) => {
            let exits = map.success.len();
            let mut header: Vec<String> = vec!["target_exit".into()];
            for j in 1..=exits {
                header.push(format!("eval_{j}"));
            }
            let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
            let mut csv = Csv::new(&header_refs);
            for (i, row) in map.success.iter().enumerate() {
                let mut fields = vec![(i + 1).to_string()];
                fields.extend(row.iter().map(|&v| fmt_f64(v)));
                csv.row(&fields);
            }
            csv.write(&out_dir.join("transfer_map.csv"))?;
            write_json(
                &out_dir.join("transfer.json"),
                &json!({
                    "command": "transfer",
                    "status": "ok",
                    "eligible": map.eligible,
                    "success": map.success,
                    "off_diagonal_mean": map.off_diagonal_mean,
                }),
            )?;
            println!(
                "transferability over {} eligible samples, off-diagonal mean {:.4}",
                map.eligible, map.off_diagonal_mean
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn cmd_gradcheck(seed: u64) -> neokd::Result<ExitCode> {
    let report = neokd::gradcheck::run_full_suite(seed);
    println!("{:<20} {:>12} {:>8} {:>6}", "op", "max_rel_err", "coords", "pass");
    for row in &report.rows {
        println!(
            "{:<20} {:>12.3e} {:>8} {:>6}",
            row.name,
            row.max_rel_err,
            row.coords,
            if row.pass { "ok" } else { "FAIL" }
        );
    }
    println!(
        "max relative error {:.3e} (tolerance {:.0e})",
        report.max_rel_err(),
        report.tol
    );
    if report.all_pass() {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(1))
    }
}
