//! Experiment configuration, orchestration and on-disk artifacts behind the
//! command-line tool.
//!
//! A run is described by one TOML file ([`ExperimentConfig`]). Every artifact
//! written under the output directory carries the fingerprint of the
//! effective configuration; artifacts with a different fingerprint are
//! rejected when read back.
//!
//! Layout under the output directory:
//!
//! ```text
//! models/{a,b,c}.json             train-toy
//! models/dataset_{a,b,c}.txt      train-toy (toy models only)
//! sample/{role}/run_{r}/          sample: distribution.csv, full_distribution.csv,
//!                                 replica_{k}.csv, reservoir.jsonl, diagnostics.json
//! diff/run_{r}/                   diff: {ab,ba}.csv, {ab,ba}.json, ratio.json,
//!                                 trace_{ab,ba}.jsonl
//! diff/summary_{ab,ba}.csv        diff: per-bin mean and std over runs
//! diff/summary.json               diff: ratio terms, mean and std over runs
//! oracle/                         enumerate
//! annotate/report.json            annotate-report
//! compare_ref/                    compare-ref
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::annotate::{self, AnnotationSet};
use crate::diffstat::{self, DRegion, DiffOptions, DiffResult, DiffSample, Direction, NormalizedRatio, TraceRecord};
use crate::error::{Error, Result};
use crate::fingerprint;
use crate::histogram::{Band, BinGrid, Histogram};
use crate::oracle::{self, EnumerationOptions};
use crate::reweight::{self, OutputDistribution, WhamOptions, WhamResult};
use crate::rng;
use crate::seqmodel::{generate_modulo_dataset, train_ngram, Model, NoiseWrapper, OffsetModel, ScoredModel, UniformModel};
use crate::tempering::{self, PtConfig, PtOutput, RepresentativeStore, StoredInput, TemperatureLadder};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CONVERGENCE: i32 = 3;
pub const EXIT_PRECONDITION: i32 = 4;

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::Convergence { .. } => EXIT_CONVERGENCE,
        Error::Precondition(_)
        | Error::Mismatch(_)
        | Error::Binning(_)
        | Error::EnumerationCap { .. }
        | Error::NoOverlap(_)
        | Error::Fingerprint(_) => EXIT_PRECONDITION,
        Error::Io { .. } | Error::Parse { .. } => EXIT_FAILURE,
    }
}

/// How to obtain one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// A model file, relative to the config file's directory.
    File { path: PathBuf },
    /// An n-gram trained on a generated modulo dataset.
    Toy {
        order: usize,
        alpha: f64,
        #[serde(default = "default_modulus")]
        modulus: u64,
        #[serde(default = "default_dataset_size")]
        dataset_size: usize,
        #[serde(default = "default_one")]
        dataset_seed: u64,
    },
    Uniform,
    /// Gaussian noise on the base n-gram's log-probabilities.
    Noise { base: Box<ModelSpec>, sigma: f64, seed: u64 },
    /// A constant added to the base model's score.
    Offset { base: Box<ModelSpec>, offset: f64 },
}

fn default_modulus() -> u64 {
    30
}
fn default_dataset_size() -> usize {
    50_000
}
fn default_one() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSet {
    pub a: ModelSpec,
    pub b: ModelSpec,
    #[serde(default)]
    pub c: Option<ModelSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LadderConfig {
    pub t_min: f64,
    pub t_max: f64,
    pub count: usize,
}

impl Default for LadderConfig {
    fn default() -> Self {
        Self {
            t_min: 0.05,
            t_max: 2.0,
            count: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// Metropolis steps per replica, burn-in included.
    pub steps: u64,
    pub burn_in: u64,
    pub thin: u64,
    pub swap_interval: u64,
    pub z_bin_width: f64,
    pub reservoir_capacity: usize,
    pub subdivisions: u32,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            steps: 220_000,
            burn_in: 20_000,
            thin: 1,
            swap_interval: 100,
            z_bin_width: 0.05,
            reservoir_capacity: 256,
            subdivisions: tempering::DEFAULT_SUBDIVISIONS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReweightConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ReweightConfig {
    fn default() -> Self {
        let d = WhamOptions::default();
        Self {
            tol: d.tol,
            max_iter: d.max_iter,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffConfig {
    pub samples: u64,
    pub d_bin_width: f64,
    pub lambdas: Vec<f64>,
    /// Write per-sample traces for annotation.
    pub trace: bool,
}

impl Default for DiffConfig {
    fn default() -> Self {
        Self {
            samples: 50_000,
            d_bin_width: 0.05,
            lambdas: vec![-1.0, -0.5, -0.25, 0.0, 0.25, 0.5, 1.0],
            trace: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub cap: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { cap: oracle::DEFAULT_CAP }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotateConfig {
    /// Half-width of the averaging window around each D bin.
    pub window: f64,
    pub region: DRegion,
}

impl Default for AnnotateConfig {
    fn default() -> Self {
        Self {
            window: 0.05,
            region: DRegion::Below(0.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub region: DRegion,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self { region: DRegion::All }
    }
}

/// Everything that determines a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seq_len: usize,
    pub vocab_size: usize,
    #[serde(default = "default_one")]
    pub seed: u64,
    #[serde(default = "default_runs")]
    pub runs: u32,
    pub models: ModelSet,
    pub band: Band,
    #[serde(default)]
    pub ladder: LadderConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub reweight: ReweightConfig,
    #[serde(default)]
    pub diff: DiffConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub annotate: AnnotateConfig,
    #[serde(default)]
    pub compare: CompareConfig,
    /// Directory that relative model paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_runs() -> u32 {
    3
}

/// The three model slots of an experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Role {
    A,
    B,
    C,
}

impl Role {
    pub fn name(&self) -> &'static str {
        match self {
            Role::A => "a",
            Role::B => "b",
            Role::C => "c",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Role::A),
            "b" => Ok(Role::B),
            "c" => Ok(Role::C),
            _ => Err(Error::Config(format!("unknown model role {s:?}, expected a, b or c"))),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seq_len == 0 || self.vocab_size == 0 {
            return bad("seq_len and vocab_size must be positive".into());
        }
        if self.runs == 0 {
            return bad("runs must be at least 1".into());
        }
        if !(self.band.lo < self.band.hi) {
            return bad(format!("band lower edge {} must be below {}", self.band.lo, self.band.hi));
        }
        if self.diff.samples == 0 {
            return bad("diff.samples must be at least 1".into());
        }
        if !(self.annotate.window > 0.0) {
            return bad("annotate.window must be positive".into());
        }
        self.ladder()?;
        self.pt_config()?.validate()?;
        BinGrid::centered(self.diff.d_bin_width)?;
        if !(self.reweight.tol > 0.0) || self.reweight.max_iter == 0 {
            return bad("reweight.tol and reweight.max_iter must be positive".into());
        }
        Ok(())
    }

    /// Identifies the effective configuration; model file contents are not
    /// included, only their paths.
    pub fn fingerprint(&self) -> String {
        fingerprint::hash_json(self)
    }

    /// One seed per run: `seed, seed + 1, ...`.
    pub fn run_seeds(&self) -> Vec<u64> {
        (0..self.runs as u64).map(|r| self.seed.wrapping_add(r)).collect()
    }

    pub fn ladder(&self) -> Result<TemperatureLadder> {
        let l = &self.ladder;
        TemperatureLadder::geometric(l.t_min, l.t_max, l.count).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn z_grid(&self) -> Result<BinGrid> {
        BinGrid::aligned(self.sampling.z_bin_width)
    }

    pub fn d_grid(&self) -> Result<BinGrid> {
        BinGrid::centered(self.diff.d_bin_width)
    }

    pub fn pt_config(&self) -> Result<PtConfig> {
        let s = &self.sampling;
        Ok(PtConfig {
            seq_len: self.seq_len,
            steps_per_replica: s.steps,
            swap_interval: s.swap_interval,
            burn_in: s.burn_in,
            thin: s.thin,
            band: self.band,
            grid: self.z_grid()?,
            reservoir_capacity: s.reservoir_capacity,
            subdivisions: s.subdivisions,
        })
    }

    pub fn wham_options(&self) -> WhamOptions {
        WhamOptions {
            tol: self.reweight.tol,
            max_iter: self.reweight.max_iter,
        }
    }

    pub fn spec(&self, role: Role) -> Result<&ModelSpec> {
        match role {
            Role::A => Ok(&self.models.a),
            Role::B => Ok(&self.models.b),
            Role::C => self
                .models
                .c
                .as_ref()
                .ok_or_else(|| Error::Config("this command needs models.c".into())),
        }
    }

    pub fn roles(&self) -> Vec<Role> {
        let mut r = vec![Role::A, Role::B];
        if self.models.c.is_some() {
            r.push(Role::C);
        }
        r
    }

    pub fn build_model(&self, role: Role) -> Result<Model> {
        let model = self.build_spec(self.spec(role)?)?;
        if model.vocab_size() != self.vocab_size {
            return Err(Error::Config(format!(
                "model {} has vocabulary {}, config says {}",
                role.name(),
                model.vocab_size(),
                self.vocab_size
            )));
        }
        if let Some(n) = model.seq_len() {
            if n != self.seq_len {
                return Err(Error::Config(format!(
                    "model {} is built for length {n}, config says {}",
                    role.name(),
                    self.seq_len
                )));
            }
        }
        Ok(model)
    }

    fn build_spec(&self, spec: &ModelSpec) -> Result<Model> {
        match spec {
            ModelSpec::File { path } => Model::load(self.base_dir.join(path)),
            ModelSpec::Toy { order, alpha, modulus, dataset_size, dataset_seed } => {
                let data = generate_modulo_dataset(self.seq_len, self.vocab_size, *modulus, *dataset_size, *dataset_seed)?;
                Ok(train_ngram(&data, *order, *alpha)?.into())
            }
            ModelSpec::Uniform => Ok(UniformModel {
                vocab_size: self.vocab_size,
                seq_len: Some(self.seq_len),
            }
            .into()),
            ModelSpec::Noise { base, sigma, seed } => match self.build_spec(base)? {
                Model::Ngram(m) => Ok(NoiseWrapper::new(m, *sigma, *seed)?.into()),
                _ => Err(Error::Config("noise can only wrap an n-gram model".into())),
            },
            ModelSpec::Offset { base, offset } => Ok(OffsetModel::new(self.build_spec(base)?, *offset)?.into()),
        }
    }
}

/// One model's sampled output distribution and representative inputs.
#[derive(Clone, Debug)]
pub struct SampleRun {
    pub pt: PtOutput,
    pub wham: WhamResult,
    /// Reweighted density on the output grid, over the whole sampled range.
    pub full: OutputDistribution,
    /// `full` restricted and normalized over the band.
    pub restricted: OutputDistribution,
}

impl SampleRun {
    pub fn store(&self) -> &RepresentativeStore {
        &self.pt.store
    }
}

/// Tempering, reweighting and band restriction for one model.
pub fn sample_model(model: &dyn ScoredModel, cfg: &ExperimentConfig, seed: u64) -> Result<SampleRun> {
    let ladder = cfg.ladder()?;
    let pt_cfg = cfg.pt_config()?;
    let pt = tempering::run_pt(model, &ladder, &pt_cfg, seed)?;
    let wham = reweight::wham(&pt.histograms, &ladder.betas(), cfg.wham_options())?;
    let full = wham.distribution.coarsen(pt_cfg.grid, pt_cfg.subdivisions)?;
    let gaps = full.gaps();
    if !gaps.is_empty() {
        log::warn!(
            "reweighted distribution has empty bins inside its support at z = {:?}",
            gaps.iter().map(|&i| pt_cfg.grid.center(i)).collect::<Vec<_>>()
        );
    }
    let restricted = reweight::restrict(&full, &cfg.band)?;
    Ok(SampleRun {
        pt,
        wham,
        full,
        restricted,
    })
}

/// Seed of the D draws from `source`'s inputs. Draws from the same source
/// in the same run are identical whichever model scores them.
pub fn diff_seed(run_seed: u64, source: Role) -> u64 {
    rng::derive(run_seed, &format!("diff:{}", source.name()))
}

pub fn sample_seed(run_seed: u64, role: Role) -> u64 {
    rng::derive(run_seed, &format!("sample:{}", role.name()))
}

/// Draws `D` samples from `source`'s inputs scored by `other`.
pub fn diff_from(
    source: &OutputDistribution,
    store: &RepresentativeStore,
    other: &dyn ScoredModel,
    direction: Direction,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<DiffSample> {
    diffstat::sample_diff(
        source,
        store,
        other,
        direction,
        &DiffOptions {
            samples: cfg.diff.samples,
            grid: cfg.d_grid()?,
            seed,
            trace: cfg.diff.trace,
        },
    )
}

// ---------------------------------------------------------------------------
// Artifacts

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// CSV with a leading `# fingerprint=...` line.
fn write_csv(path: &Path, fp: &str, body: &str) -> Result<()> {
    write_file(path, &format!("# fingerprint={fp}\n{body}"))
}

fn read_csv(path: &Path, fp: &str) -> Result<Vec<Vec<String>>> {
    let text = read_file(path)?;
    let mut lines = text.lines();
    let found = lines
        .next()
        .and_then(|l| l.strip_prefix("# fingerprint="))
        .ok_or_else(|| Error::parse(path.display().to_string(), "missing fingerprint line"))?;
    check_fingerprint(path, found, fp)?;
    lines.next();
    Ok(lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect())
}

fn check_fingerprint(path: &Path, found: &str, expected: &str) -> Result<()> {
    if found != expected {
        return Err(Error::Fingerprint(format!(
            "{} was written under configuration {found}, current configuration is {expected}",
            path.display()
        )));
    }
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("json values serialize");
    text.push('\n');
    write_file(path, &text)
}

fn read_json(path: &Path, fp: &str) -> Result<serde_json::Value> {
    let value: serde_json::Value =
        serde_json::from_str(&read_file(path)?).map_err(|e| Error::parse(path.display().to_string(), e))?;
    let found = value["fingerprint"].as_str().unwrap_or("");
    check_fingerprint(path, found, fp)?;
    Ok(value)
}

/// JSONL whose first line is `{"fingerprint": ...}`.
fn write_jsonl<T: Serialize>(path: &Path, fp: &str, rows: &[T]) -> Result<()> {
    let mut out = serde_json::to_string(&json!({ "fingerprint": fp })).expect("header");
    out.push('\n');
    for r in rows {
        out.push_str(&serde_json::to_string(r).expect("rows serialize"));
        out.push('\n');
    }
    write_file(path, &out)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path, fp: &str) -> Result<Vec<T>> {
    let text = read_file(path)?;
    let mut lines = text.lines();
    let header: serde_json::Value = lines
        .next()
        .map(serde_json::from_str)
        .transpose()
        .map_err(|e| Error::parse(path.display().to_string(), e))?
        .unwrap_or_default();
    check_fingerprint(path, header["fingerprint"].as_str().unwrap_or(""), fp)?;
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::parse(path.display().to_string(), e)))
        .collect()
}

fn parse_f64(s: &str, path: &Path) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::parse(path.display().to_string(), format!("not a number: {s:?}")))
}

fn sample_dir(out: &Path, role: Role, run: usize) -> PathBuf {
    out.join("sample").join(role.name()).join(format!("run_{run}"))
}

fn diff_dir(out: &Path, run: usize) -> PathBuf {
    out.join("diff").join(format!("run_{run}"))
}

fn direction_name(d: Direction) -> &'static str {
    match d {
        Direction::AToB => "ab",
        Direction::BToA => "ba",
    }
}

fn write_sample(dir: &Path, fp: &str, role: Role, run: usize, seed: u64, s: &SampleRun) -> Result<()> {
    write_csv(&dir.join("distribution.csv"), fp, &s.restricted.to_csv())?;
    write_csv(&dir.join("full_distribution.csv"), fp, &s.full.to_csv())?;
    for (k, h) in s.pt.histograms.iter().enumerate() {
        write_csv(&dir.join(format!("replica_{k}.csv")), fp, &h.to_csv())?;
    }
    write_jsonl(&dir.join("reservoir.jsonl"), fp, &s.store().entries())?;
    let grid = s.full.grid();
    let bins: Vec<_> = s
        .store()
        .bins()
        .map(|(i, r)| json!({ "bin_center": grid.center(i), "seen": r.seen(), "stored": r.items().len() }))
        .collect();
    write_json(
        &dir.join("diagnostics.json"),
        &json!({
            "fingerprint": fp,
            "model": role.name(),
            "run": run,
            "seed": seed,
            "tempering": s.pt.diagnostics,
            "reweight": {
                "iterations": s.wham.iterations,
                "final_residual": s.wham.residuals.last(),
                "free_energies": s.wham.free_energies,
            },
            "support_gaps": s.full.gaps().iter().map(|&i| grid.center(i)).collect::<Vec<_>>(),
            "store": bins,
        }),
    )
}

/// Reloads the band-restricted distribution and the store written by
/// [`cmd_sample`].
pub fn load_sample(cfg: &ExperimentConfig, out: &Path, role: Role, run: usize) -> Result<(OutputDistribution, RepresentativeStore)> {
    let fp = cfg.fingerprint();
    let dir = sample_dir(out, role, run);
    let grid = cfg.z_grid()?;
    let path = dir.join("distribution.csv");
    let rows = read_csv(&path, &fp)?;
    let entries = rows
        .iter()
        .map(|r| Ok((grid.index(parse_f64(&r[0], &path)?), parse_f64(&r[1], &path)?)))
        .collect::<Result<Vec<_>>>()?;
    let full = OutputDistribution::from_log_density(grid, &entries)?;
    let dist = reweight::restrict(&full, &cfg.band)?;
    let entries: Vec<StoredInput> = read_jsonl(&dir.join("reservoir.jsonl"), &fp)?;
    let store = RepresentativeStore::from_entries(grid, cfg.band, cfg.sampling.reservoir_capacity, entries)?;
    Ok((dist, store))
}

fn diff_sidecar(fp: &str, d: &DiffResult, lambdas: &[f64]) -> serde_json::Value {
    let lambda_report: Vec<_> = lambdas
        .iter()
        .map(|&l| {
            let (below, above) = diffstat::directed_sums(d, l);
            json!({ "lambda": l, "below": below, "above": above })
        })
        .collect();
    json!({
        "fingerprint": fp,
        "direction": d.direction.label(),
        "n_drawn": d.n_drawn(),
        "overlap_count": d.overlap_count,
        "band": d.band,
        "d_bin_width": d.grid().width,
        "d_min_max": d.extrema(),
        "zero_bin_mass": d.zero_bin_mass(),
        "lambda_report": lambda_report,
        "source_fingerprint": d.source_fingerprint,
        "result": d,
    })
}

fn write_diff(dir: &Path, fp: &str, d: &DiffResult, trace: &[TraceRecord], lambdas: &[f64]) -> Result<()> {
    let name = direction_name(d.direction);
    write_csv(&dir.join(format!("{name}.csv")), fp, &d.histogram.to_csv())?;
    write_json(&dir.join(format!("{name}.json")), &diff_sidecar(fp, d, lambdas))?;
    if !trace.is_empty() {
        write_jsonl(&dir.join(format!("trace_{name}.jsonl")), fp, trace)?;
    }
    Ok(())
}

pub fn load_diff(cfg: &ExperimentConfig, out: &Path, run: usize, direction: Direction) -> Result<DiffResult> {
    let path = diff_dir(out, run).join(format!("{}.json", direction_name(direction)));
    let v = read_json(&path, &cfg.fingerprint())?;
    serde_json::from_value(v["result"].clone()).map_err(|e| Error::parse(path.display().to_string(), e))
}

fn ratio_json(rows: &[NormalizedRatio]) -> serde_json::Value {
    serde_json::Value::Array(
        rows.iter()
            .map(|r| {
                json!({
                    "lambda": r.lambda,
                    "unscaled": r.unscaled,
                    "terms": r.terms(),
                    "degenerate": r.degenerate,
                })
            })
            .collect(),
    )
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

// ---------------------------------------------------------------------------
// Commands

/// Builds every configured model and writes it, with any generated dataset.
pub fn cmd_train_toy(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for role in cfg.roles() {
        if let ModelSpec::Toy { modulus, dataset_size, dataset_seed, .. } = cfg.spec(role)? {
            let data = generate_modulo_dataset(cfg.seq_len, cfg.vocab_size, *modulus, *dataset_size, *dataset_seed)?;
            let path = out.join("models").join(format!("dataset_{}.txt", role.name()));
            write_file(&path, &data.to_text())?;
            written.push(path);
        }
        let model = cfg.build_model(role)?;
        let path = out.join("models").join(format!("{}.json", role.name()));
        write_file(&path, &model.to_json())?;
        log::info!("model {} written to {}", role.name(), path.display());
        written.push(path);
    }
    Ok(written)
}

/// Samples each requested model once per run.
pub fn cmd_sample(cfg: &ExperimentConfig, out: &Path, roles: &[Role]) -> Result<()> {
    let fp = cfg.fingerprint();
    for &role in roles {
        let model = cfg.build_model(role)?;
        for (run, &run_seed) in cfg.run_seeds().iter().enumerate() {
            let seed = sample_seed(run_seed, role);
            let s = sample_model(&model, cfg, seed).map_err(|e| with_context(e, role, run))?;
            let dir = sample_dir(out, role, run);
            write_sample(&dir, &fp, role, run, seed, &s)?;
            log::info!(
                "model {} run {run}: {} stored inputs, reweighting took {} iterations",
                role.name(),
                s.store().len(),
                s.wham.iterations
            );
        }
    }
    Ok(())
}

fn with_context(e: Error, role: Role, run: usize) -> Error {
    match e {
        Error::Precondition(m) => Error::Precondition(format!("model {} run {run}: {m}", role.name())),
        Error::Config(m) => Error::Config(format!("model {} run {run}: {m}", role.name())),
        other => other,
    }
}

/// Ratio rows of one run of [`cmd_diff`].
#[derive(Clone, Debug)]
pub struct DiffRun {
    pub ab: DiffResult,
    pub ba: DiffResult,
    pub sweep: Vec<NormalizedRatio>,
}

/// Both directions for every run, plus the across-run summary.
pub fn cmd_diff(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<DiffRun>> {
    let fp = cfg.fingerprint();
    let a = cfg.build_model(Role::A)?;
    let b = cfg.build_model(Role::B)?;
    let mut runs = Vec::new();
    for (run, &run_seed) in cfg.run_seeds().iter().enumerate() {
        let (dist_a, store_a) = load_sample(cfg, out, Role::A, run)?;
        let (dist_b, store_b) = load_sample(cfg, out, Role::B, run)?;
        let ab = diff_from(&dist_a, &store_a, &b, Direction::AToB, cfg, diff_seed(run_seed, Role::A))?;
        let ba = diff_from(&dist_b, &store_b, &a, Direction::BToA, cfg, diff_seed(run_seed, Role::B))?;
        let dir = diff_dir(out, run);
        write_diff(&dir, &fp, &ab.result, &ab.trace, &cfg.diff.lambdas)?;
        write_diff(&dir, &fp, &ba.result, &ba.trace, &cfg.diff.lambdas)?;
        let sweep = diffstat::lambda_sweep(&ab.result, &ba.result, &cfg.diff.lambdas)?;
        let identical = ab.result.zero_bin_mass() == ab.result.n_drawn() && ba.result.zero_bin_mass() == ba.result.n_drawn();
        write_json(
            &dir.join("ratio.json"),
            &json!({
                "fingerprint": fp,
                "run": run,
                "seed": run_seed,
                "identical_models": identical,
                "rows": ratio_json(&sweep),
            }),
        )?;
        runs.push(DiffRun {
            ab: ab.result,
            ba: ba.result,
            sweep,
        });
    }
    write_diff_summary(cfg, out, &fp, &runs)?;
    Ok(runs)
}

fn write_diff_summary(cfg: &ExperimentConfig, out: &Path, fp: &str, runs: &[DiffRun]) -> Result<()> {
    let grid = cfg.d_grid()?;
    for (name, pick) in [("ab", 0usize), ("ba", 1)] {
        let hists: Vec<&DiffResult> = runs.iter().map(|r| if pick == 0 { &r.ab } else { &r.ba }).collect();
        let lo = hists.iter().filter_map(|d| d.histogram.index_range()).map(|r| r.0).min();
        let hi = hists.iter().filter_map(|d| d.histogram.index_range()).map(|r| r.1).max();
        let mut body = String::from("bin_center,mean,std\n");
        if let (Some(lo), Some(hi)) = (lo, hi) {
            for i in lo..=hi {
                let v: Vec<f64> = hists
                    .iter()
                    .map(|d| d.histogram.count(i) as f64 / d.n_drawn() as f64)
                    .collect();
                let (m, s) = mean_std(&v);
                writeln!(body, "{},{m},{s}", grid.center(i)).expect("string write");
            }
        }
        write_csv(&out.join("diff").join(format!("summary_{name}.csv")), fp, &body)?;
    }
    let rows: Vec<_> = cfg
        .diff
        .lambdas
        .iter()
        .enumerate()
        .map(|(j, &l)| {
            let terms: Vec<[f64; 4]> = runs.iter().filter_map(|r| r.sweep[j].terms()).collect();
            let stats: Vec<_> = (0..4)
                .map(|t| {
                    if terms.is_empty() {
                        return json!(null);
                    }
                    let (m, s) = mean_std(&terms.iter().map(|x| x[t]).collect::<Vec<_>>());
                    json!({ "mean": m, "std": s })
                })
                .collect();
            json!({ "lambda": l, "runs_used": terms.len(), "terms": stats })
        })
        .collect();
    write_json(
        &out.join("diff").join("summary.json"),
        &json!({ "fingerprint": fp, "runs": runs.len(), "rows": rows }),
    )
}

/// Exact histograms, directed differences and ratios by enumeration.
pub fn cmd_enumerate(cfg: &ExperimentConfig, out: &Path) -> Result<oracle::EnumerationReport> {
    let fp = cfg.fingerprint();
    let a = cfg.build_model(Role::A)?;
    let b = cfg.build_model(Role::B)?;
    let options = EnumerationOptions {
        band: cfg.band,
        z_grid: cfg.z_grid()?,
        d_grid: cfg.d_grid()?,
        cap: cfg.oracle.cap,
    };
    let report = oracle::enumerate(&a, &b, cfg.seq_len, &options)?;
    let dir = out.join("oracle");
    for (name, h) in [("a", &report.hist_a), ("b", &report.hist_b)] {
        write_csv(&dir.join(format!("hist_{name}.csv")), &fp, &h.to_csv())?;
        if let Ok(d) = oracle::exact_distribution(h, Some(&cfg.band)) {
            write_csv(&dir.join(format!("distribution_{name}.csv")), &fp, &d.to_csv())?;
        }
    }
    write_diff(&dir, &fp, &report.diff_ab, &[], &cfg.diff.lambdas)?;
    write_diff(&dir, &fp, &report.diff_ba, &[], &cfg.diff.lambdas)?;
    let rows = if report.size_ab > 0 {
        ratio_json(&diffstat::lambda_sweep(&report.diff_ab, &report.diff_ba, &cfg.diff.lambdas)?)
    } else {
        json!([])
    };
    write_json(
        &dir.join("ratio.json"),
        &json!({
            "fingerprint": fp,
            "space_size": report.space_size(),
            "size_a": report.size_a,
            "size_b": report.size_b,
            "size_ab": report.size_ab,
            "rows": rows,
        }),
    )?;
    Ok(report)
}

/// Precision and proportional recall of annotated inputs from one run.
pub fn cmd_annotate_report(
    cfg: &ExperimentConfig,
    out: &Path,
    annotations: &Path,
    trace: Option<&Path>,
    direction: Direction,
    run: usize,
) -> Result<annotate::AnnotationReport> {
    let fp = cfg.fingerprint();
    let diff = load_diff(cfg, out, run, direction)?;
    let default_trace = diff_dir(out, run).join(format!("trace_{}.jsonl", direction_name(direction)));
    let trace_path = trace.unwrap_or(&default_trace);
    let records: Vec<TraceRecord> = read_jsonl(trace_path, &fp)?;
    let set = AnnotationSet::parse_jsonl(&read_file(annotations)?, cfg.annotate.window)?;
    let annotated = set.over(&records);
    let report = annotate::report(&diff, &annotated, cfg.annotate.region)?;
    write_json(
        &out.join("annotate").join("report.json"),
        &json!({
            "fingerprint": fp,
            "direction": direction.label(),
            "run": run,
            "window": cfg.annotate.window,
            "region": report.region,
            "precision": report.precision,
            "proportional_recall": report.proportional_recall,
            "coverage": {
                "region_mass": report.mass,
                "region_bins": report.bins,
                "annotated_inputs": report.annotated_inputs,
                "annotations": set.len(),
                "trace_records": records.len(),
            },
        }),
    )?;
    Ok(report)
}

/// B and C compared through the reference model A, per run.
pub fn cmd_compare_ref(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<diffstat::ReferenceComparison>> {
    let fp = cfg.fingerprint();
    let a = cfg.build_model(Role::A)?;
    let b = cfg.build_model(Role::B)?;
    let c = cfg.build_model(Role::C)?;
    let mut results = Vec::new();
    for (run, &run_seed) in cfg.run_seeds().iter().enumerate() {
        let (dist_a, store_a) = load_sample(cfg, out, Role::A, run)?;
        let (dist_b, store_b) = load_sample(cfg, out, Role::B, run)?;
        let (dist_c, store_c) = load_sample(cfg, out, Role::C, run)?;
        let seed_a = diff_seed(run_seed, Role::A);
        let ab = diff_from(&dist_a, &store_a, &b, Direction::AToB, cfg, seed_a)?.result;
        let ac = diff_from(&dist_a, &store_a, &c, Direction::AToB, cfg, seed_a)?.result;
        let ba = diff_from(&dist_b, &store_b, &a, Direction::BToA, cfg, diff_seed(run_seed, Role::B))?.result;
        let ca = diff_from(&dist_c, &store_c, &a, Direction::BToA, cfg, diff_seed(run_seed, Role::C))?.result;
        let cmp = diffstat::compare_via_reference(&ab, &ac, &ba, &ca, cfg.compare.region)?;
        write_json(
            &out.join("compare_ref").join(format!("run_{run}.json")),
            &json!({
                "fingerprint": fp,
                "run": run,
                "seed": run_seed,
                "comparison": cmp,
                "reverse_ratio": cmp.reverse_ratio(),
            }),
        )?;
        results.push(cmp);
    }
    let (m, s) = mean_std(&results.iter().map(|c| c.reverse_ratio()).collect::<Vec<_>>());
    write_json(
        &out.join("compare_ref").join("summary.json"),
        &json!({ "fingerprint": fp, "runs": results.len(), "reverse_ratio": { "mean": m, "std": s } }),
    )?;
    Ok(results)
}

/// Exact output histogram of one model, for comparisons against sampling.
pub fn exact_histogram(cfg: &ExperimentConfig, role: Role) -> Result<Histogram> {
    let model = cfg.build_model(role)?;
    oracle::exact_histogram(&model, cfg.seq_len, cfg.z_grid()?, cfg.oracle.cap)
}
