//! Config-driven experiment commands.
//!
//! Configs are flat `key=value` text with dotted section prefixes, one
//! assignment per line and `#` comments. Every file a command writes starts
//! with `# config_sha256=<hex>`, the SHA-256 of the resolved configuration.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::generators::{self, QualityReport, SamplerHandle};
use crate::image::HintTransformSpec;
use crate::losses::{self, LossVariant};
use crate::metrics::{self, CorrelationStudyRow};
use crate::seed::{self, stream};
use crate::task::{self, Dataset, SyntheticTaskSpec};
use crate::trainer::{self, fmt_sig10, ClassifierParams, RunRecord, Scheduler, TrainingConfig, TrainingOutcome};

pub const DEFAULT_ALPHAS: [f64; 7] = [0.1, 0.5, 1.0, 5.0, 10.0, 25.0, 50.0];
pub const DEFAULT_BANDWIDTHS: [f64; 6] = [0.0, 0.05, 0.1, 0.2, 0.5, 1.0];
pub const SWEEP_HEADER: &str = "alpha,seed,final_accuracy,final_hint_loss_real";
pub const STUDY_HEADER: &str = "sampler,fid_analog,pearson_r";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerChoice {
    TrueDistribution,
    Kde,
    Noise,
}

impl SamplerChoice {
    fn name(self) -> &'static str {
        match self {
            SamplerChoice::TrueDistribution => "true_distribution",
            SamplerChoice::Kde => "kde",
            SamplerChoice::Noise => "noise",
        }
    }
}

impl FromStr for SamplerChoice {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "true_distribution" => Ok(SamplerChoice::TrueDistribution),
            "kde" => Ok(SamplerChoice::Kde),
            "noise" => Ok(SamplerChoice::Noise),
            other => Err(format!("unknown sampler {other:?}")),
        }
    }
}

/// Fully resolved experiment settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub task: SyntheticTaskSpec,
    pub n_train: usize,
    pub n_test: usize,
    /// Seed of the generated train/test sets, shared by all runs.
    pub data_seed: u64,
    pub training: TrainingConfig,
    pub sampler: SamplerChoice,
    pub sampler_bandwidth: f64,
    pub sampler_seed: u64,
    /// Training seeds; each seed is one independent run.
    pub seeds: Vec<u64>,
    /// Also run the α = 0 baseline when `train` runs with hints.
    pub compare_baseline: bool,
    pub sweep_alphas: Vec<f64>,
    pub study_bandwidths: Vec<f64>,
    pub study_samples: usize,
    pub embedder_seed: u64,
    /// Hint-only epochs per sampler in the quality study.
    pub study_epochs: usize,
    /// Supervised epochs (no augmentation, no hints) of the shared starting
    /// model for the quality study; 0 starts from a fresh initialisation.
    pub study_warm_start_epochs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: SyntheticTaskSpec::default(),
            n_train: 2000,
            n_test: 2000,
            data_seed: 0,
            training: TrainingConfig::default(),
            sampler: SamplerChoice::TrueDistribution,
            sampler_bandwidth: 0.1,
            sampler_seed: 0,
            seeds: vec![0, 1, 2, 3, 4],
            compare_baseline: true,
            sweep_alphas: DEFAULT_ALPHAS.to_vec(),
            study_bandwidths: DEFAULT_BANDWIDTHS.to_vec(),
            study_samples: 1024,
            embedder_seed: 0,
            study_epochs: 5,
            study_warm_start_epochs: 20,
        }
    }
}

fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| format!("bad list element {s:?}")))
        .collect()
}

fn join<T: std::fmt::Debug>(xs: &[T]) -> String {
    xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

/// Parsed `key=value` pairs. Values are consumed by key; anything left over
/// is reported as unknown.
struct Fields {
    map: BTreeMap<String, String>,
    used: BTreeSet<String>,
    errors: Vec<String>,
}

impl Fields {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            let key = k.trim().to_string();
            if map.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {key}", n + 1)));
            }
        }
        Ok(Self {
            map,
            used: BTreeSet::new(),
            errors: Vec::new(),
        })
    }

    fn take<T>(&mut self, key: &str, slot: &mut T, parse: impl Fn(&str) -> std::result::Result<T, String>) {
        self.used.insert(key.to_string());
        if let Some(v) = self.map.get(key) {
            match parse(v) {
                Ok(x) => *slot = x,
                Err(e) => self.errors.push(format!("{key}: {e}")),
            }
        }
    }

    fn scalar<T: FromStr>(&mut self, key: &str, slot: &mut T) {
        self.take(key, slot, |v| v.parse().map_err(|_| format!("cannot parse {v:?}")));
    }

    fn finish(self) -> Result<()> {
        let unknown: Vec<&String> = self.map.keys().filter(|k| !self.used.contains(*k)).collect();
        let mut problems = self.errors;
        if !unknown.is_empty() {
            let names: Vec<&str> = unknown.iter().map(|s| s.as_str()).collect();
            problems.push(format!("unknown keys: {}", names.join(", ")));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

fn spec_fields(f: &mut Fields, prefix: &str, spec: &mut HintTransformSpec) {
    f.scalar(&format!("{prefix}.flip_probability"), &mut spec.flip_probability);
    f.scalar(&format!("{prefix}.max_translate_fraction"), &mut spec.max_translate_fraction);
    f.scalar(&format!("{prefix}.max_rotate_degrees"), &mut spec.max_rotate_degrees);
    f.scalar(&format!("{prefix}.seed_stream"), &mut spec.seed_stream);
}

fn spec_lines(out: &mut String, prefix: &str, spec: &HintTransformSpec) {
    let _ = writeln!(out, "{prefix}.flip_probability={:?}", spec.flip_probability);
    let _ = writeln!(out, "{prefix}.max_translate_fraction={:?}", spec.max_translate_fraction);
    let _ = writeln!(out, "{prefix}.max_rotate_degrees={:?}", spec.max_rotate_degrees);
    let _ = writeln!(out, "{prefix}.seed_stream={}", spec.seed_stream);
}

impl ExperimentConfig {
    /// Parses config text over the defaults; every key must be known.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut f = Fields::parse(text)?;
        let t = &mut c.task;
        f.scalar("task.image_side", &mut t.image_side);
        f.scalar("task.num_classes", &mut t.num_classes);
        f.scalar("task.position_jitter", &mut t.position_jitter);
        f.scalar("task.intensity_min", &mut t.intensity_min);
        f.scalar("task.intensity_max", &mut t.intensity_max);
        f.scalar("task.pixel_noise_std", &mut t.pixel_noise_std);
        f.scalar("task.n_train", &mut c.n_train);
        f.scalar("task.n_test", &mut c.n_test);
        f.scalar("task.seed", &mut c.data_seed);

        let tr = &mut c.training;
        f.scalar("training.epochs", &mut tr.epochs);
        f.scalar("training.batch_size", &mut tr.batch_size);
        f.scalar("training.learning_rate", &mut tr.learning_rate);
        f.scalar("training.weight_decay", &mut tr.weight_decay);
        f.scalar("training.alpha", &mut tr.alpha);
        f.scalar("training.temperature", &mut tr.train_temperature);
        f.scalar("training.eval_temperature", &mut tr.eval_temperature);
        f.take("training.loss_variant", &mut tr.loss_variant, |v| {
            LossVariant::parse(v).map_err(|e| e.to_string())
        });
        f.take("training.scheduler", &mut tr.scheduler, |v| {
            Scheduler::parse(v).map_err(|e| e.to_string())
        });
        f.scalar("training.checkpoint_count", &mut tr.checkpoint_count);
        f.scalar("training.eval_size", &mut tr.eval_size);
        f.scalar("training.hint_only", &mut tr.hint_only);
        spec_fields(&mut f, "hint", &mut tr.hint_spec);
        spec_fields(&mut f, "aug", &mut tr.aug_spec);

        f.scalar("sampler.kind", &mut c.sampler);
        f.scalar("sampler.bandwidth", &mut c.sampler_bandwidth);
        f.scalar("sampler.seed", &mut c.sampler_seed);
        f.take("experiment.seeds", &mut c.seeds, parse_list);
        f.scalar("experiment.compare_baseline", &mut c.compare_baseline);
        f.take("sweep.alphas", &mut c.sweep_alphas, parse_list);
        f.take("study.bandwidths", &mut c.study_bandwidths, parse_list);
        f.scalar("study.samples", &mut c.study_samples);
        f.scalar("study.embedder_seed", &mut c.embedder_seed);
        f.scalar("study.epochs", &mut c.study_epochs);
        f.scalar("study.warm_start_epochs", &mut c.study_warm_start_epochs);
        f.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.training.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("experiment.seeds must not be empty".into()));
        }
        if self.n_train < self.task.num_classes || self.n_test < self.task.num_classes {
            return Err(Error::Config(format!(
                "task.n_train and task.n_test must be >= {}",
                self.task.num_classes
            )));
        }
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !nonneg(self.sampler_bandwidth) || !self.study_bandwidths.iter().all(|&b| nonneg(b)) {
            return Err(Error::Config("bandwidths must be finite and >= 0".into()));
        }
        if !self.sweep_alphas.iter().all(|&a| nonneg(a)) {
            return Err(Error::Config("sweep.alphas must be finite and >= 0".into()));
        }
        if self.study_samples < generators::MIN_QUALITY_SAMPLES {
            return Err(Error::Config(format!(
                "study.samples must be >= {}",
                generators::MIN_QUALITY_SAMPLES
            )));
        }
        if self.study_epochs < 1 {
            return Err(Error::Config("study.epochs must be >= 1".into()));
        }
        Ok(())
    }

    /// Canonical text of every setting; the basis of the config hash.
    pub fn resolved_text(&self) -> String {
        let (t, tr) = (&self.task, &self.training);
        let mut o = String::new();
        let _ = writeln!(o, "task.image_side={}", t.image_side);
        let _ = writeln!(o, "task.num_classes={}", t.num_classes);
        let _ = writeln!(o, "task.position_jitter={:?}", t.position_jitter);
        let _ = writeln!(o, "task.intensity_min={:?}", t.intensity_min);
        let _ = writeln!(o, "task.intensity_max={:?}", t.intensity_max);
        let _ = writeln!(o, "task.pixel_noise_std={:?}", t.pixel_noise_std);
        let _ = writeln!(o, "task.n_train={}", self.n_train);
        let _ = writeln!(o, "task.n_test={}", self.n_test);
        let _ = writeln!(o, "task.seed={}", self.data_seed);
        let _ = writeln!(o, "training.epochs={}", tr.epochs);
        let _ = writeln!(o, "training.batch_size={}", tr.batch_size);
        let _ = writeln!(o, "training.learning_rate={:?}", tr.learning_rate);
        let _ = writeln!(o, "training.weight_decay={:?}", tr.weight_decay);
        let _ = writeln!(o, "training.alpha={:?}", tr.alpha);
        let _ = writeln!(o, "training.temperature={:?}", tr.train_temperature);
        let _ = writeln!(o, "training.eval_temperature={:?}", tr.eval_temperature);
        let _ = writeln!(o, "training.loss_variant={}", tr.loss_variant.name());
        let _ = writeln!(o, "training.scheduler={}", tr.scheduler.name());
        let _ = writeln!(o, "training.checkpoint_count={}", tr.checkpoint_count);
        let _ = writeln!(o, "training.eval_size={}", tr.eval_size);
        let _ = writeln!(o, "training.hint_only={}", tr.hint_only);
        // rotation limits are degrees; a 0-5% rotation range reads as 5% of 360 = 18
        spec_lines(&mut o, "hint", &tr.hint_spec);
        spec_lines(&mut o, "aug", &tr.aug_spec);
        let _ = writeln!(o, "sampler.kind={}", self.sampler.name());
        let _ = writeln!(o, "sampler.bandwidth={:?}", self.sampler_bandwidth);
        let _ = writeln!(o, "sampler.seed={}", self.sampler_seed);
        let _ = writeln!(o, "experiment.seeds={}", join(&self.seeds));
        let _ = writeln!(o, "experiment.compare_baseline={}", self.compare_baseline);
        let _ = writeln!(o, "sweep.alphas={}", join(&self.sweep_alphas));
        let _ = writeln!(o, "study.bandwidths={}", join(&self.study_bandwidths));
        let _ = writeln!(o, "study.samples={}", self.study_samples);
        let _ = writeln!(o, "study.embedder_seed={}", self.embedder_seed);
        let _ = writeln!(o, "study.epochs={}", self.study_epochs);
        let _ = writeln!(o, "study.warm_start_epochs={}", self.study_warm_start_epochs);
        o
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.resolved_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Restricts the run to one seed, which also seeds the data.
    pub fn override_seed(&mut self, seed: u64) {
        self.seeds = vec![seed];
        self.data_seed = seed;
    }

    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        self.task.synth_dataset(self.n_train, self.n_test, self.data_seed)
    }

    /// The configured sampler for one run seed.
    pub fn sampler_for(&self, corpus: &[crate::image::RasterImage], run_seed: u64) -> Result<SamplerHandle> {
        let s = seed::derive(&[self.sampler_seed, run_seed]);
        let side = self.task.image_side;
        match self.sampler {
            SamplerChoice::TrueDistribution => SamplerHandle::true_distribution(self.task.clone(), s),
            SamplerChoice::Kde => generators::fit_kde(corpus, self.sampler_bandwidth, s),
            SamplerChoice::Noise => SamplerHandle::noise(side, side, s),
        }
    }
}

fn header(hash: &str) -> String {
    format!("# config_sha256={hash}\n")
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_resolved(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    write_file(&out.join("config.txt"), &(header(&cfg.hash()) + &cfg.resolved_text()))
}

/// Runs independent jobs on up to `jobs` threads; results keep input order.
pub fn run_jobs<T, F>(jobs: usize, tasks: Vec<F>) -> Vec<Result<T>>
where
    T: Send,
    F: FnOnce() -> Result<T> + Send,
{
    let n = tasks.len();
    let slots: Vec<Mutex<Option<F>>> = tasks.into_iter().map(|t| Mutex::new(Some(t))).collect();
    let results: Vec<Mutex<Option<Result<T>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        if i >= n {
            break;
        }
        let task = slots[i].lock().expect("job slot").take().expect("job taken once");
        *results[i].lock().expect("result slot") = Some(task());
    };
    let threads = jobs.clamp(1, n.max(1));
    std::thread::scope(|scope| {
        for _ in 1..threads {
            scope.spawn(worker);
        }
        worker();
    });
    results
        .into_iter()
        .map(|r| r.into_inner().expect("result slot").expect("every job ran"))
        .collect()
}

fn collect<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    results.into_iter().collect()
}

/// Writes the train and test sets plus the resolved config under `out`.
pub fn cmd_synth_data(cfg: &ExperimentConfig, out: &Path) -> Result<(PathBuf, PathBuf)> {
    let (train, test) = cfg.datasets()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let hash = cfg.hash();
    let a = task::save_dataset(out, "train", &train, Some(&hash))?;
    let b = task::save_dataset(out, "test", &test, Some(&hash))?;
    write_resolved(cfg, out)?;
    Ok((a, b))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Baseline,
    Hints,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Hints => "hints",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub final_test_accuracy: f64,
    pub final_train_accuracy: f64,
    pub final_hint_loss_real: f64,
    pub final_hint_loss_virtual: f64,
}

impl SeedResult {
    fn from_outcome(seed: u64, o: &TrainingOutcome) -> Self {
        Self {
            seed,
            final_test_accuracy: o.final_test_accuracy,
            final_train_accuracy: o.final_train_accuracy,
            final_hint_loss_real: o.final_hint_loss_real,
            final_hint_loss_virtual: o.final_hint_loss_virtual,
        }
    }

    fn fields(&self) -> [(&'static str, f64); 4] {
        [
            ("final_test_accuracy", self.final_test_accuracy),
            ("final_train_accuracy", self.final_train_accuracy),
            ("final_hint_loss_real", self.final_hint_loss_real),
            ("final_hint_loss_virtual", self.final_hint_loss_virtual),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModeSummary {
    pub mode: Mode,
    pub alpha: f64,
    pub per_seed: Vec<SeedResult>,
}

impl ModeSummary {
    pub fn mean(&self, pick: impl Fn(&SeedResult) -> f64) -> f64 {
        self.per_seed.iter().map(pick).sum::<f64>() / self.per_seed.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub config_hash: String,
    /// Label of the configured run: `baseline` when α = 0, else `hints`.
    pub mode: Mode,
    pub modes: Vec<ModeSummary>,
}

impl TrainSummary {
    pub fn get(&self, mode: Mode) -> Option<&ModeSummary> {
        self.modes.iter().find(|m| m.mode == mode)
    }

    /// Key-value text: one `<mode>.seed_<s>` line per seed and a
    /// `<mode>.mean` line per mode.
    pub fn to_text(&self) -> String {
        let mut o = header(&self.config_hash);
        let _ = writeln!(o, "mode={}", self.mode.name());
        for m in &self.modes {
            let _ = writeln!(o, "{}.alpha={:?}", m.mode.name(), m.alpha);
            let row = |vals: [(&str, f64); 4]| {
                vals.iter()
                    .map(|(k, v)| format!("{k}:{}", fmt_sig10(*v)))
                    .collect::<Vec<_>>()
                    .join(",")
            };
            for s in &m.per_seed {
                let _ = writeln!(o, "{}.seed_{}={}", m.mode.name(), s.seed, row(s.fields()));
            }
            let mean = SeedResult {
                seed: 0,
                final_test_accuracy: m.mean(|s| s.final_test_accuracy),
                final_train_accuracy: m.mean(|s| s.final_train_accuracy),
                final_hint_loss_real: m.mean(|s| s.final_hint_loss_real),
                final_hint_loss_virtual: m.mean(|s| s.final_hint_loss_virtual),
            };
            let _ = writeln!(o, "{}.mean={}", m.mode.name(), row(mean.fields()));
        }
        o
    }
}

fn train_one(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    alpha: f64,
    run_seed: u64,
) -> Result<TrainingOutcome> {
    let sampler = cfg.sampler_for(&train.images, run_seed)?;
    let tc = TrainingConfig {
        alpha,
        seed: run_seed,
        ..cfg.training.clone()
    };
    trainer::run_training(&tc, train, &sampler, test)
}

/// Trains every configured seed, plus the α = 0 baseline when hints are on
/// and `experiment.compare_baseline` is set. Writes per-run CSVs and models
/// under `<out>/<mode>/seed_<s>/`, then `summary.txt` and `config.txt`.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<TrainSummary> {
    let (train, test) = cfg.datasets()?;
    let hash = cfg.hash();
    let mode = if cfg.training.alpha == 0.0 { Mode::Baseline } else { Mode::Hints };
    let mut runs = Vec::new();
    if mode == Mode::Hints && cfg.compare_baseline {
        runs.push((Mode::Baseline, 0.0));
    }
    runs.push((mode, cfg.training.alpha));

    let cells: Vec<(Mode, f64, u64)> = runs
        .iter()
        .flat_map(|&(m, a)| cfg.seeds.iter().map(move |&s| (m, a, s)))
        .collect();
    let tasks: Vec<_> = cells
        .iter()
        .map(|&(m, a, s)| {
            let (train, test, hash) = (&train, &test, &hash);
            move || -> Result<SeedResult> {
                let outcome = train_one(cfg, train, test, a, s)?;
                let dir = out.join(m.name()).join(format!("seed_{s}"));
                write_file(&dir.join("run.csv"), &(header(hash) + &outcome.record.to_csv()))?;
                write_file(&dir.join("model.txt"), &(header(hash) + &outcome.params.to_text()))?;
                Ok(SeedResult::from_outcome(s, &outcome))
            }
        })
        .collect();
    let results = collect(run_jobs(jobs, tasks))?;

    let modes = runs
        .iter()
        .enumerate()
        .map(|(k, &(m, a))| ModeSummary {
            mode: m,
            alpha: a,
            per_seed: results[k * cfg.seeds.len()..(k + 1) * cfg.seeds.len()].to_vec(),
        })
        .collect();
    let summary = TrainSummary {
        config_hash: hash,
        mode,
        modes,
    };
    write_file(&out.join("summary.txt"), &summary.to_text())?;
    write_resolved(cfg, out)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub seed: u64,
    pub final_accuracy: f64,
    pub final_hint_loss_real: f64,
}

pub fn sweep_csv(hash: &str, rows: &[SweepRow]) -> String {
    let mut o = header(hash) + SWEEP_HEADER + "\n";
    for r in rows {
        let _ = writeln!(
            o,
            "{:?},{},{},{}",
            r.alpha,
            r.seed,
            fmt_sig10(r.final_accuracy),
            fmt_sig10(r.final_hint_loss_real)
        );
    }
    o
}

/// One full run per (α, seed), α in the given order; duplicates are run
/// again as independent rows. Writes `<out>/sweep.csv`.
pub fn cmd_sweep_alpha(cfg: &ExperimentConfig, alphas: &[f64], out: &Path, jobs: usize) -> Result<Vec<SweepRow>> {
    if alphas.is_empty() {
        return Err(Error::Config("alpha list must not be empty".into()));
    }
    if let Some(a) = alphas.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
        return Err(Error::Config(format!("alpha {a} must be finite and >= 0")));
    }
    let (train, test) = cfg.datasets()?;
    let tasks: Vec<_> = alphas
        .iter()
        .flat_map(|&a| cfg.seeds.iter().map(move |&s| (a, s)))
        .map(|(a, s)| {
            let (train, test) = (&train, &test);
            move || -> Result<SweepRow> {
                let o = train_one(cfg, train, test, a, s)?;
                Ok(SweepRow {
                    alpha: a,
                    seed: s,
                    final_accuracy: o.final_test_accuracy,
                    final_hint_loss_real: o.final_hint_loss_real,
                })
            }
        })
        .collect();
    let rows = collect(run_jobs(jobs, tasks))?;
    write_file(&out.join("sweep.csv"), &sweep_csv(&cfg.hash(), &rows))?;
    write_resolved(cfg, out)?;
    Ok(rows)
}

pub fn study_csv(hash: &str, rows: &[CorrelationStudyRow]) -> String {
    let mut o = header(hash) + STUDY_HEADER + "\n";
    for r in rows {
        let _ = writeln!(o, "{},{},{}", r.sampler, fmt_sig10(r.fid_analog), fmt_sig10(r.pearson_r));
    }
    o
}

/// The study's samplers: the true distribution, one KDE per bandwidth, and
/// uniform noise, all seeded from the first experiment seed.
pub fn study_samplers(cfg: &ExperimentConfig, corpus: &[crate::image::RasterImage], bandwidths: &[f64]) -> Result<Vec<SamplerHandle>> {
    let base = cfg.seeds[0];
    let s = |k: u64| seed::derive(&[cfg.sampler_seed, base, k]);
    let side = cfg.task.image_side;
    let mut v = vec![SamplerHandle::true_distribution(cfg.task.clone(), s(0))?];
    for (i, &b) in bandwidths.iter().enumerate() {
        v.push(generators::fit_kde(corpus, b, s(1 + i as u64))?);
    }
    v.push(SamplerHandle::noise(side, side, s(u64::MAX))?);
    Ok(v)
}

/// Supervised starting model shared by every sampler of the quality study.
pub fn study_warm_start(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<ClassifierParams> {
    let seed = cfg.seeds[0];
    let side = cfg.task.image_side;
    if cfg.study_warm_start_epochs == 0 {
        return ClassifierParams::init(cfg.task.num_classes, side, seed);
    }
    let tc = TrainingConfig {
        epochs: cfg.study_warm_start_epochs,
        alpha: 0.0,
        aug_spec: HintTransformSpec::identity(),
        hint_only: false,
        checkpoint_count: 2,
        seed,
        ..cfg.training.clone()
    };
    // with alpha = 0 the sampler's images never reach the model
    let sampler = SamplerHandle::noise(side, side, seed)?;
    Ok(trainer::run_training(&tc, train, &sampler, test)?.params)
}

/// For each sampler: a quality report against the training images and a
/// hint-only run (no classification updates, no real-data augmentation) of
/// `study.epochs` epochs from the shared warm start, with `checkpoint_count`
/// metric points. Writes `<out>/study.csv`, the per-sampler run CSVs and the
/// warm-start model.
pub fn cmd_quality_study(
    cfg: &ExperimentConfig,
    bandwidths: &[f64],
    out: &Path,
    jobs: usize,
) -> Result<Vec<CorrelationStudyRow>> {
    if bandwidths.is_empty() {
        return Err(Error::Config("bandwidth list must not be empty".into()));
    }
    let (train, test) = cfg.datasets()?;
    let samplers = study_samplers(cfg, &train.images, bandwidths)?;
    let hash = cfg.hash();
    let init = study_warm_start(cfg, &train, &test)?;
    write_file(&out.join("warm_start.txt"), &(header(&hash) + &init.to_text()))?;
    let tc = TrainingConfig {
        epochs: cfg.study_epochs,
        hint_only: true,
        aug_spec: HintTransformSpec::identity(),
        seed: cfg.seeds[0],
        ..cfg.training.clone()
    };
    let tasks: Vec<_> = samplers
        .iter()
        .map(|h| {
            let (train, test, tc, hash, init) = (&train, &test, &tc, &hash, &init);
            move || -> Result<(QualityReport, RunRecord)> {
                let report = generators::quality_report(h, &train.images, cfg.study_samples, cfg.embedder_seed)?;
                let outcome = trainer::run_training_from(tc, init.clone(), train, h, test)?;
                let path = out.join("runs").join(format!("{}.csv", h.description()));
                write_file(&path, &(header(hash) + &outcome.record.to_csv()))?;
                Ok((report, outcome.record))
            }
        })
        .collect();
    let (reports, records): (Vec<_>, Vec<_>) = collect(run_jobs(jobs, tasks))?.into_iter().unzip();
    let rows = metrics::correlation_study(&records, &reports)?;
    write_file(&out.join("study.csv"), &study_csv(&hash, &rows))?;
    write_resolved(cfg, out)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub config_hash: String,
    pub images: usize,
    pub accuracy: f64,
    pub hint_loss: f64,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        format!(
            "{}eval.images={}\neval.accuracy={}\neval.hint_loss={}\n",
            header(&self.config_hash),
            self.images,
            fmt_sig10(self.accuracy),
            fmt_sig10(self.hint_loss)
        )
    }
}

/// Accuracy and hint loss (at the evaluation temperature, with the
/// configured hint spec) of a saved model on a saved dataset.
pub fn cmd_eval(cfg: &ExperimentConfig, model: &Path, dataset: &Path) -> Result<EvalReport> {
    let params = ClassifierParams::load(model)?;
    let data = task::load_dataset(dataset)?;
    let tr = &cfg.training;
    let hint_loss = losses::evaluate_hint_loss_on_set(
        |b| trainer::forward(&params, b),
        &data.images,
        &tr.hint_spec,
        &tr.hint_config(),
        tr.eval_temperature,
        seed::derive(&[cfg.seeds[0], stream::EVAL_HINT]),
    )?;
    let accuracy = metrics::accuracy(&trainer::predict(&params, &data.images)?, &data.labels)?;
    Ok(EvalReport {
        config_hash: cfg.hash(),
        images: data.len(),
        accuracy,
        hint_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_text() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::parse(&c.resolved_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
        assert_eq!(c.sweep_alphas, vec![0.1, 0.5, 1.0, 5.0, 10.0, 25.0, 50.0]);
    }

    #[test]
    fn unknown_keys_are_listed() {
        let err = ExperimentConfig::parse("training.alpah=1\n# note\ntask.sied=3\ntraining.epochs=2\n").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Config(_)));
        assert!(msg.contains("training.alpah") && msg.contains("task.sied"), "{msg}");
    }

    #[test]
    fn bad_values_and_lines_are_config_errors() {
        for text in [
            "training.epochs=many",
            "training.epochs=0",
            "no equals sign",
            "training.alpha=1\ntraining.alpha=2",
            "training.loss_variant=huber",
            "experiment.seeds=",
            "sampler.kind=gan",
        ] {
            assert!(matches!(ExperimentConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn overrides_change_the_hash() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig::parse("training.alpha=5\n").unwrap();
        assert_eq!(b.training.alpha, 5.0);
        assert_ne!(a.hash(), b.hash());
        let c = ExperimentConfig::parse("experiment.seeds=3, 1\nsweep.alphas=0,0\n").unwrap();
        assert_eq!(c.seeds, vec![3, 1]);
        assert_eq!(c.sweep_alphas, vec![0.0, 0.0]);
    }

    #[test]
    fn jobs_keep_order() {
        let tasks: Vec<_> = (0..10).map(|i| move || Ok(i * i)).collect();
        let out = collect(run_jobs(3, tasks)).unwrap();
        assert_eq!(out, (0..10).map(|i| i * i).collect::<Vec<_>>());
        let failing: Vec<Box<dyn FnOnce() -> Result<i32> + Send>> =
            vec![Box::new(|| Ok(1)), Box::new(|| Err(Error::Empty("x")))];
        assert!(collect(run_jobs(2, failing)).is_err());
    }
}
