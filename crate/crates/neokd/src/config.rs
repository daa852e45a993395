//! The experiment config file: UTF-8 key-value pairs under bracketed
//! sections (`[data]`, `[model]`, `[attack.train]`, `[attack.eval]`,
//! `[loss]`, `[optim]`, `[run]`). `#` starts a comment. Unknown sections or
//! keys, duplicate keys, and cross-field inconsistencies are all rejected
//! with field-level messages before any work starts.
//!
//! `to_text` re-emits a parsed config canonically (fixed section and key
//! order, shortest round-tripping floats), which is what `train` snapshots
//! into its output directory; the snapshot alone can drive every eval
//! command later.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::attack::{AttackConfig, AttackKind};
use crate::data::{split, synthetic_gaussians, Dataset, SplitTag};
use crate::error::{Error, Result};
use crate::loss::{DistillConfig, LossKind};
use crate::net::NetworkSpec;
use crate::rng::Stream;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// 0 = use everything.
        limit_train: usize,
        limit_test: usize,
    },
    Synthetic {
        classes: usize,
        dim: usize,
        train_per_class: usize,
        test_per_class: usize,
        sigma: f32,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// Fraction of the training data held out for threshold calibration.
    pub val_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub block_widths: Vec<Vec<usize>>,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossSection {
    pub kind: LossKind,
    pub distill: DistillConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BudgetAllocations {
    /// `auto:N` — a generated N-case sweep from all-early to all-late.
    Auto(usize),
    /// Explicit allocations, e.g. `1800,100,100; 600,700,700`.
    Explicit(Vec<Vec<usize>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Write a resumable state every this many epochs (0 = final only).
    pub checkpoint_every: usize,
    pub probe_size: usize,
    pub threads: usize,
    pub budget_allocations: BudgetAllocations,
    pub budget_ensemble: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub attack_train: AttackConfig,
    pub attack_eval: AttackConfig,
    pub loss: LossSection,
    pub optim: OptimConfig,
    pub run: RunConfig,
}

// ── raw section/key parsing ──────────────────────────────────────────

struct RawConfig {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

fn parse_raw(text: &str) -> Result<RawConfig> {
    let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (lineno, raw_line) in text.lines().enumerate() {
        let line = match raw_line.find('#') {
            Some(pos) => &raw_line[..pos],
            None => raw_line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| Error::config(format!("line {}", lineno + 1), "unterminated section header"))?
                .trim()
                .to_string();
            if name.is_empty() {
                return Err(Error::config(format!("line {}", lineno + 1), "empty section name"));
            }
            if sections.contains_key(&name) {
                return Err(Error::config(name, "duplicate section"));
            }
            sections.insert(name.clone(), BTreeMap::new());
            current = Some(name);
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config(
                format!("line {}", lineno + 1),
                format!("expected key = value, got: {line}"),
            )
        })?;
        let section = current
            .as_ref()
            .ok_or_else(|| Error::config(format!("line {}", lineno + 1), "key before any [section]"))?;
        let key = key.trim().to_string();
        if key.is_empty() {
            return Err(Error::config(section.clone(), "empty key"));
        }
        let entry = sections.get_mut(section).expect("section exists");
        if entry.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(Error::config(format!("{section}.{key}"), "duplicate key"));
        }
    }
    Ok(RawConfig { sections })
}

struct Section<'a> {
    name: &'a str,
    keys: BTreeMap<String, String>,
    used: std::collections::BTreeSet<String>,
}

impl<'a> Section<'a> {
    fn take(raw: &mut RawConfig, name: &'a str) -> Result<Self> {
        let keys = raw
            .sections
            .remove(name)
            .ok_or_else(|| Error::config(name, "missing section"))?;
        Ok(Section {
            name,
            keys,
            used: Default::default(),
        })
    }

    fn field(&self, key: &str) -> String {
        format!("{}.{}", self.name, key)
    }

    fn get(&mut self, key: &str) -> Result<&str> {
        self.used.insert(key.to_string());
        self.keys
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::config(self.field(key), "missing key"))
    }

    fn get_or(&mut self, key: &str, default: &str) -> String {
        self.used.insert(key.to_string());
        self.keys
            .get(key)
            .cloned()
            .unwrap_or_else(|| default.to_string())
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let field = self.field(key);
        let value = self.get(key)?;
        value
            .parse::<T>()
            .map_err(|_| Error::config(field, format!("cannot parse value: {value}")))
    }

    fn parse_or<T: std::str::FromStr>(&mut self, key: &str, default: &str) -> Result<T> {
        let field = self.field(key);
        let value = self.get_or(key, default);
        value
            .parse::<T>()
            .map_err(|_| Error::config(field, format!("cannot parse value: {value}")))
    }

    fn finish(self) -> Result<()> {
        for key in self.keys.keys() {
            if !self.used.contains(key) {
                return Err(Error::config(self.field(key), "unknown key"));
            }
        }
        Ok(())
    }
}

fn parse_usize_list(field: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::config(field, format!("bad integer: {p}")))
        })
        .collect()
}

fn parse_f32_list(field: &str, value: &str) -> Result<Vec<f32>> {
    value
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<f32>()
                .map_err(|_| Error::config(field, format!("bad number: {p}")))
        })
        .collect()
}

fn parse_blocks(field: &str, value: &str) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::new();
    for part in value.split(';') {
        if part.trim().is_empty() {
            out.push(Vec::new());
        } else {
            out.push(parse_usize_list(field, part)?);
        }
    }
    Ok(out)
}

fn parse_attack_kind(field: &str, value: &str) -> Result<AttackKind> {
    match value {
        "max_average" => Ok(AttackKind::MaxAverage),
        "average" => Ok(AttackKind::Average),
        other => {
            if let Some(rest) = other.strip_prefix("single:") {
                let exit = rest
                    .parse::<usize>()
                    .map_err(|_| Error::config(field, format!("bad exit index: {rest}")))?;
                Ok(AttackKind::Single(exit))
            } else {
                Err(Error::config(
                    field,
                    format!("unknown attack kind: {other} (want single:<i> | max_average | average)"),
                ))
            }
        }
    }
}

fn parse_loss_kind(field: &str, value: &str) -> Result<LossKind> {
    match value {
        "baseline" => Ok(LossKind::Baseline),
        "skd" => Ok(LossKind::Skd),
        "ard" => Ok(LossKind::Ard),
        "nkd" => Ok(LossKind::NkdOnly),
        "eokd" => Ok(LossKind::EokdOnly),
        "neokd" => Ok(LossKind::NeoKd),
        other => Err(Error::config(
            field,
            format!("unknown loss kind: {other} (want baseline|skd|ard|nkd|eokd|neokd)"),
        )),
    }
}

fn parse_bool(field: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::config(field, format!("expected true/false, got {other}"))),
    }
}

fn parse_attack_section(section: &mut Section<'_>) -> Result<AttackConfig> {
    let kind = parse_attack_kind(&section.field("kind"), section.get("kind")?)?;
    let epsilon: f32 = section.parse("epsilon")?;
    let step_size: f32 = section.parse("step_size")?;
    let steps: usize = section.parse("steps")?;
    let random_start = parse_bool(
        &section.field("random_start"),
        &section.get_or("random_start", "false"),
    )?;
    Ok(AttackConfig {
        kind,
        epsilon,
        step_size,
        steps,
        random_start,
        seed: 0, // derived from [run] seed at use sites
    })
}

fn parse_allocations(field: &str, value: &str) -> Result<BudgetAllocations> {
    if let Some(n) = value.strip_prefix("auto:") {
        let cases = n
            .parse::<usize>()
            .map_err(|_| Error::config(field, format!("bad sweep size: {n}")))?;
        if cases < 2 {
            return Err(Error::config(field, "auto sweep needs at least 2 cases"));
        }
        return Ok(BudgetAllocations::Auto(cases));
    }
    let mut out = Vec::new();
    for group in value.split(';') {
        out.push(parse_usize_list(field, group)?);
    }
    if out.is_empty() || out.iter().any(Vec::is_empty) {
        return Err(Error::config(field, "empty allocation list"));
    }
    Ok(BudgetAllocations::Explicit(out))
}

impl ExperimentConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut raw = parse_raw(text)?;

        let mut data_s = Section::take(&mut raw, "data")?;
        let source = match data_s.get("source")? {
            "idx" => DataSource::Idx {
                train_images: PathBuf::from(data_s.get("train_images")?),
                train_labels: PathBuf::from(data_s.get("train_labels")?),
                test_images: PathBuf::from(data_s.get("test_images")?),
                test_labels: PathBuf::from(data_s.get("test_labels")?),
                limit_train: data_s.parse_or("limit_train", "0")?,
                limit_test: data_s.parse_or("limit_test", "0")?,
            },
            "synthetic" => DataSource::Synthetic {
                classes: data_s.parse("classes")?,
                dim: data_s.parse("dim")?,
                train_per_class: data_s.parse("train_per_class")?,
                test_per_class: data_s.parse("test_per_class")?,
                sigma: data_s.parse("sigma")?,
            },
            other => {
                return Err(Error::config(
                    "data.source",
                    format!("unknown source: {other} (want idx | synthetic)"),
                ))
            }
        };
        let val_fraction: f64 = data_s.parse_or("val_fraction", "0.1")?;
        data_s.finish()?;

        let mut model_s = Section::take(&mut raw, "model")?;
        let model = ModelConfig {
            input_dim: model_s.parse("input_dim")?,
            block_widths: parse_blocks(&model_s.field("blocks"), model_s.get("blocks")?)?,
            classes: model_s.parse("classes")?,
        };
        model_s.finish()?;

        let mut at_s = Section::take(&mut raw, "attack.train")?;
        let attack_train = parse_attack_section(&mut at_s)?;
        at_s.finish()?;

        let mut ae_s = Section::take(&mut raw, "attack.eval")?;
        let attack_eval = parse_attack_section(&mut ae_s)?;
        ae_s.finish()?;

        let mut loss_s = Section::take(&mut raw, "loss")?;
        let kind = parse_loss_kind(&loss_s.field("kind"), loss_s.get("kind")?)?;
        let gamma = parse_f32_list(&loss_s.field("gamma"), loss_s.get("gamma")?)?;
        let loss = LossSection {
            kind,
            distill: DistillConfig {
                alpha: loss_s.parse_or("alpha", "3")?,
                beta: loss_s.parse_or("beta", "1")?,
                gamma,
                distill_weight: loss_s.parse_or("distill_weight", "1")?,
            },
        };
        loss_s.finish()?;

        let mut optim_s = Section::take(&mut raw, "optim")?;
        let optim = OptimConfig {
            epochs: optim_s.parse("epochs")?,
            batch_size: optim_s.parse("batch_size")?,
            lr: optim_s.parse("lr")?,
            lr_decay_epochs: parse_usize_list(
                &optim_s.field("lr_decay_epochs"),
                &optim_s.get_or("lr_decay_epochs", ""),
            )?,
            lr_decay_factor: optim_s.parse_or("lr_decay_factor", "0.1")?,
            momentum: optim_s.parse_or("momentum", "0.9")?,
            weight_decay: optim_s.parse_or("weight_decay", "0.0005")?,
        };
        optim_s.finish()?;

        let mut run_s = Section::take(&mut raw, "run")?;
        let run = RunConfig {
            seed: run_s.parse("seed")?,
            out_dir: PathBuf::from(run_s.get_or("out_dir", "runs/out")),
            checkpoint_every: run_s.parse_or("checkpoint_every", "0")?,
            probe_size: run_s.parse_or("probe_size", "256")?,
            threads: run_s.parse_or("threads", "2")?,
            budget_allocations: parse_allocations(
                &run_s.field("budget_allocations"),
                &run_s.get_or("budget_allocations", "auto:100"),
            )?,
            budget_ensemble: parse_bool(
                &run_s.field("budget_ensemble"),
                &run_s.get_or("budget_ensemble", "true"),
            )?,
        };
        run_s.finish()?;

        if let Some(name) = raw.sections.keys().next() {
            return Err(Error::config(name.clone(), "unknown section"));
        }

        let cfg = ExperimentConfig {
            data: DataConfig {
                source,
                val_fraction,
            },
            model,
            attack_train,
            attack_eval,
            loss,
            optim,
            run,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse_str(&text)
    }

    /// Cross-field consistency, checked before any work starts.
    pub fn validate(&self) -> Result<()> {
        let spec = self.network_spec();
        spec.validate()?;
        let exits = spec.exits();
        self.attack_train.validate(exits)?;
        self.attack_eval.validate(exits)?;
        self.loss.distill.validate(exits)?;
        self.train_config().validate(exits)?;
        match &self.data.source {
            DataSource::Synthetic {
                classes,
                dim,
                train_per_class,
                test_per_class,
                sigma,
            } => {
                if *classes != self.model.classes {
                    return Err(Error::config(
                        "data.classes",
                        format!("{classes} classes vs model.classes {}", self.model.classes),
                    ));
                }
                if *dim != self.model.input_dim {
                    return Err(Error::config(
                        "data.dim",
                        format!("{dim} dims vs model.input_dim {}", self.model.input_dim),
                    ));
                }
                if *train_per_class == 0 || *test_per_class == 0 {
                    return Err(Error::config("data.train_per_class", "must be >= 1"));
                }
                if !sigma.is_finite() || *sigma < 0.0 {
                    return Err(Error::config("data.sigma", "must be finite and >= 0"));
                }
            }
            DataSource::Idx { .. } => {
                if self.model.classes != 10 {
                    return Err(Error::config(
                        "model.classes",
                        "idx digit data has 10 classes",
                    ));
                }
            }
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(Error::config("data.val_fraction", "must be in [0, 1)"));
        }
        if self.run.probe_size == 0 {
            return Err(Error::config("run.probe_size", "must be >= 1"));
        }
        if self.run.threads == 0 {
            return Err(Error::config("run.threads", "must be >= 1"));
        }
        if let BudgetAllocations::Explicit(allocs) = &self.run.budget_allocations {
            for a in allocs {
                if a.len() != exits {
                    return Err(Error::config(
                        "run.budget_allocations",
                        format!("allocation {a:?} has {} entries for {exits} exits", a.len()),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Canonical re-emission; `parse_str(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("[data]\n");
        match &self.data.source {
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                limit_train,
                limit_test,
            } => {
                out.push_str("source = idx\n");
                out.push_str(&format!("train_images = {}\n", train_images.display()));
                out.push_str(&format!("train_labels = {}\n", train_labels.display()));
                out.push_str(&format!("test_images = {}\n", test_images.display()));
                out.push_str(&format!("test_labels = {}\n", test_labels.display()));
                out.push_str(&format!("limit_train = {limit_train}\n"));
                out.push_str(&format!("limit_test = {limit_test}\n"));
            }
            DataSource::Synthetic {
                classes,
                dim,
                train_per_class,
                test_per_class,
                sigma,
            } => {
                out.push_str("source = synthetic\n");
                out.push_str(&format!("classes = {classes}\n"));
                out.push_str(&format!("dim = {dim}\n"));
                out.push_str(&format!("train_per_class = {train_per_class}\n"));
                out.push_str(&format!("test_per_class = {test_per_class}\n"));
                out.push_str(&format!("sigma = {sigma}\n"));
            }
        }
        out.push_str(&format!("val_fraction = {}\n", self.data.val_fraction));

        out.push_str("\n[model]\n");
        out.push_str(&format!("input_dim = {}\n", self.model.input_dim));
        let blocks = self
            .model
            .block_widths
            .iter()
            .map(|b| b.iter().map(ToString::to_string).collect::<Vec<_>>().join(","))
            .collect::<Vec<_>>()
            .join(";");
        out.push_str(&format!("blocks = {blocks}\n"));
        out.push_str(&format!("classes = {}\n", self.model.classes));

        for (name, a) in [("attack.train", &self.attack_train), ("attack.eval", &self.attack_eval)] {
            out.push_str(&format!("\n[{name}]\n"));
            out.push_str(&format!("kind = {}\n", a.kind));
            out.push_str(&format!("epsilon = {}\n", a.epsilon));
            out.push_str(&format!("step_size = {}\n", a.step_size));
            out.push_str(&format!("steps = {}\n", a.steps));
            out.push_str(&format!("random_start = {}\n", a.random_start));
        }

        out.push_str("\n[loss]\n");
        out.push_str(&format!("kind = {}\n", self.loss.kind));
        out.push_str(&format!("alpha = {}\n", self.loss.distill.alpha));
        out.push_str(&format!("beta = {}\n", self.loss.distill.beta));
        let gamma = self
            .loss
            .distill
            .gamma
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",");
        out.push_str(&format!("gamma = {gamma}\n"));
        out.push_str(&format!("distill_weight = {}\n", self.loss.distill.distill_weight));

        out.push_str("\n[optim]\n");
        out.push_str(&format!("epochs = {}\n", self.optim.epochs));
        out.push_str(&format!("batch_size = {}\n", self.optim.batch_size));
        out.push_str(&format!("lr = {}\n", self.optim.lr));
        let decays = self
            .optim
            .lr_decay_epochs
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",");
        out.push_str(&format!("lr_decay_epochs = {decays}\n"));
        out.push_str(&format!("lr_decay_factor = {}\n", self.optim.lr_decay_factor));
        out.push_str(&format!("momentum = {}\n", self.optim.momentum));
        out.push_str(&format!("weight_decay = {}\n", self.optim.weight_decay));

        out.push_str("\n[run]\n");
        out.push_str(&format!("seed = {}\n", self.run.seed));
        out.push_str(&format!("out_dir = {}\n", self.run.out_dir.display()));
        out.push_str(&format!("checkpoint_every = {}\n", self.run.checkpoint_every));
        out.push_str(&format!("probe_size = {}\n", self.run.probe_size));
        out.push_str(&format!("threads = {}\n", self.run.threads));
        match &self.run.budget_allocations {
            BudgetAllocations::Auto(n) => {
                out.push_str(&format!("budget_allocations = auto:{n}\n"));
            }
            BudgetAllocations::Explicit(allocs) => {
                let text = allocs
                    .iter()
                    .map(|a| a.iter().map(ToString::to_string).collect::<Vec<_>>().join(","))
                    .collect::<Vec<_>>()
                    .join("; ");
                out.push_str(&format!("budget_allocations = {text}\n"));
            }
        }
        out.push_str(&format!("budget_ensemble = {}\n", self.run.budget_ensemble));
        out
    }

    // ── derived objects ──────────────────────────────────────────────

    pub fn network_spec(&self) -> NetworkSpec {
        NetworkSpec {
            input_dim: self.model.input_dim,
            block_widths: self.model.block_widths.clone(),
            classes: self.model.classes,
            init_seed: Stream::labeled(self.run.seed, "init").next_u64(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.optim.epochs,
            batch_size: self.optim.batch_size,
            lr: self.optim.lr,
            lr_decay_epochs: self.optim.lr_decay_epochs.clone(),
            lr_decay_factor: self.optim.lr_decay_factor,
            momentum: self.optim.momentum,
            weight_decay: self.optim.weight_decay,
            train_attack: self
                .attack_train
                .with_seed(Stream::labeled(self.run.seed, "attack-train").next_u64()),
            loss_kind: self.loss.kind,
            distill: self.loss.distill.clone(),
            seed: self.run.seed,
            probe_attack: None,
            threads: self.run.threads,
        }
    }

    pub fn eval_attack(&self) -> AttackConfig {
        self.attack_eval
            .with_seed(Stream::labeled(self.run.seed, "attack-eval").next_u64())
    }

    /// Materialize (train, val, test) datasets. The validation piece is a
    /// deterministic `val_fraction` split of the training data.
    pub fn load_data(&self) -> Result<(Dataset, Option<Dataset>, Dataset)> {
        let (full_train, test) = match &self.data.source {
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                limit_train,
                limit_test,
            } => {
                let mut train = crate::data::load_idx(train_images, train_labels)?;
                if *limit_train > 0 {
                    train = train.take(*limit_train, SplitTag::Train);
                }
                let mut test = crate::data::load_idx(test_images, test_labels)?;
                if *limit_test > 0 {
                    test = test.take(*limit_test, SplitTag::Test);
                }
                (train, test)
            }
            DataSource::Synthetic {
                classes,
                dim,
                train_per_class,
                test_per_class,
                sigma,
            } => {
                let train_seed = Stream::labeled(self.run.seed, "data-train").next_u64();
                let test_seed = Stream::labeled(self.run.seed, "data-test").next_u64();
                let train =
                    synthetic_gaussians(*classes, *dim, *train_per_class, train_seed, *sigma)?;
                let test = synthetic_gaussians(*classes, *dim, *test_per_class, test_seed, *sigma)?;
                (train, test)
            }
        };
        if full_train.dim() != self.model.input_dim {
            return Err(Error::config(
                "model.input_dim",
                format!(
                    "data dimension {} does not match input_dim {}",
                    full_train.dim(),
                    self.model.input_dim
                ),
            ));
        }
        if self.data.val_fraction == 0.0 {
            return Ok((full_train, None, test));
        }
        let split_seed = Stream::labeled(self.run.seed, "split").next_u64();
        let parts = split(
            &full_train,
            &[1.0 - self.data.val_fraction, self.data.val_fraction],
            split_seed,
        )?;
        let mut iter = parts.into_iter();
        let train = iter.next().expect("train split");
        let val = iter.next().expect("val split");
        Ok((train, Some(val), test))
    }
}

/// The shipped preset configs, compiled in so tests and tooling can reuse
/// them without caring about the working directory.
pub fn preset(name: &str) -> Option<&'static str> {
    match name {
        "digits-neokd-desk" => Some(include_str!("../presets/digits-neokd-desk.conf")),
        "digits-baseline-desk" => Some(include_str!("../presets/digits-baseline-desk.conf")),
        "digits-skd-desk" => Some(include_str!("../presets/digits-skd-desk.conf")),
        "mnist-neokd-desk" => Some(include_str!("../presets/mnist-neokd-desk.conf")),
        "mnist-baseline-desk" => Some(include_str!("../presets/mnist-baseline-desk.conf")),
        "mnist-skd-desk" => Some(include_str!("../presets/mnist-skd-desk.conf")),
        "synth-smoke" => Some(include_str!("../presets/synth-smoke.conf")),
        _ => None,
    }
}

pub fn preset_names() -> &'static [&'static str] {
    &[
        "digits-neokd-desk",
        "digits-baseline-desk",
        "digits-skd-desk",
        "mnist-neokd-desk",
        "mnist-baseline-desk",
        "mnist-skd-desk",
        "synth-smoke",
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_text() -> String {
        "\
[data]
source = synthetic
classes = 3
dim = 6
train_per_class = 20
test_per_class = 5
sigma = 0.15
val_fraction = 0.1

[model]
input_dim = 6
blocks = 8;6
classes = 3

[attack.train]
kind = max_average
epsilon = 0.1
step_size = 0.05
steps = 2

[attack.eval]
kind = average
epsilon = 0.1
step_size = 0.05
steps = 5

[loss]
kind = neokd
alpha = 3
beta = 1
gamma = 1,1

[optim]
epochs = 2
batch_size = 16
lr = 0.05

[run]
seed = 7
out_dir = runs/test
"
        .to_string()
    }

    #[test]
    fn parse_and_canonical_roundtrip() {
        let cfg = ExperimentConfig::parse_str(&sample_text()).unwrap();
        assert_eq!(cfg.model.block_widths, vec![vec![8], vec![6]]);
        assert_eq!(cfg.loss.kind, LossKind::NeoKd);
        let text = cfg.to_text();
        let back = ExperimentConfig::parse_str(&text).unwrap();
        assert_eq!(cfg, back);
        // Canonical emission is a fixed point.
        assert_eq!(text, back.to_text());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let text = sample_text().replace("[loss]", "# objective\n\n[loss]");
        assert!(ExperimentConfig::parse_str(&text).is_ok());
    }

    #[test]
    fn gamma_length_mismatch_is_field_error() {
        let text = sample_text().replace("gamma = 1,1", "gamma = 1,1,1");
        let err = ExperimentConfig::parse_str(&text).unwrap_err();
        assert!(err.to_string().contains("loss.gamma"), "{err}");
    }

    #[test]
    fn single_attack_exit_out_of_range_is_rejected() {
        let text = sample_text().replace("kind = max_average", "kind = single:5");
        let err = ExperimentConfig::parse_str(&text).unwrap_err();
        assert!(err.to_string().contains("attack.kind"), "{err}");
    }

    #[test]
    fn unknown_key_and_duplicate_key_are_rejected() {
        let text = sample_text().replace("seed = 7", "seed = 7\nbogus = 1");
        assert!(ExperimentConfig::parse_str(&text).is_err());
        let text = sample_text().replace("seed = 7", "seed = 7\nseed = 8");
        let err = ExperimentConfig::parse_str(&text).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn missing_section_is_named() {
        let text = sample_text().replace("[optim]", "[optimizer]");
        let err = ExperimentConfig::parse_str(&text).unwrap_err();
        assert!(err.to_string().contains("optim"), "{err}");
    }

    #[test]
    fn explicit_allocations_parse() {
        let text = sample_text().replace(
            "out_dir = runs/test",
            "out_dir = runs/test\nbudget_allocations = 30,3; 3,30",
        );
        let cfg = ExperimentConfig::parse_str(&text).unwrap();
        assert_eq!(
            cfg.run.budget_allocations,
            BudgetAllocations::Explicit(vec![vec![30, 3], vec![3, 30]])
        );
    }

    #[test]
    fn loaded_data_matches_model_shape() {
        let cfg = ExperimentConfig::parse_str(&sample_text()).unwrap();
        let (train, val, test) = cfg.load_data().unwrap();
        assert_eq!(train.dim(), 6);
        assert_eq!(train.len() + val.as_ref().unwrap().len(), 60);
        assert_eq!(test.len(), 15);
        // Deterministic: same config → bitwise-equal data.
        let (train2, _, _) = cfg.load_data().unwrap();
        assert_eq!(train.inputs.bits(), train2.inputs.bits());
    }

    #[test]
    fn presets_all_parse() {
        for name in preset_names() {
            let text = preset(name).unwrap();
            // IDX presets reference files that may not exist; parsing and
            // validation must still succeed.
            let cfg = ExperimentConfig::parse_str(text)
                .unwrap_or_else(|e| panic!("preset {name}: {e}"));
            cfg.validate().unwrap();
        }
    }
}
