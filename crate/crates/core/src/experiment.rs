//! Experiment runner: variants, sweeps, content-addressed run records,
//! summaries with baseline-relative gains, and plot-ready curve files.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::data::{generate_blobs, split, BlobParams, Dataset, Role};
use crate::encoder::{encode, EncoderParams};
use crate::error::{Error, Result};
use crate::losses::{Hyperparams, QuantizedForm, SupervisedKind};
use crate::retrieval::{evaluate, pack, CodeSet, MetricsReport};
use crate::trainer::{train, train_supervised, TrainConfig, TrainOutput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    BaselineDsh,
    BaselineDpsh,
    Pts3hDsh,
    Pts3hDpsh,
    /// Consistent similarity loss only (`gamma = 0`).
    Pts3hP,
    /// Quantized similarity loss only (no consistency term).
    Pts3hQ,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::BaselineDsh,
        Variant::BaselineDpsh,
        Variant::Pts3hDsh,
        Variant::Pts3hDpsh,
        Variant::Pts3hP,
        Variant::Pts3hQ,
    ];

    pub fn is_baseline(self) -> bool {
        matches!(self, Variant::BaselineDsh | Variant::BaselineDpsh)
    }

    /// Loss kind the variant trains with; ablations keep the configured kind.
    pub fn kind(self, configured: SupervisedKind) -> SupervisedKind {
        match self {
            Variant::BaselineDsh | Variant::Pts3hDsh => SupervisedKind::Dsh,
            Variant::BaselineDpsh | Variant::Pts3hDpsh => SupervisedKind::Dpsh,
            Variant::Pts3hP | Variant::Pts3hQ => configured,
        }
    }

    /// The supervised-only variant a run is compared against.
    pub fn baseline(self, configured: SupervisedKind) -> Variant {
        match self.kind(configured) {
            SupervisedKind::Dpsh => Variant::BaselineDpsh,
            _ => Variant::BaselineDsh,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::BaselineDsh => "baseline-DSH",
            Variant::BaselineDpsh => "baseline-DPSH",
            Variant::Pts3hDsh => "PTS3H-DSH",
            Variant::Pts3hDpsh => "PTS3H-DPSH",
            Variant::Pts3hP => "PTS3H-P",
            Variant::Pts3hQ => "PTS3H-Q",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CodeSource {
    Teacher,
    Student,
}

impl FromStr for CodeSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "teacher" => Ok(CodeSource::Teacher),
            "student" => Ok(CodeSource::Student),
            other => Err(Error::Config(format!("unknown code source '{other}'"))),
        }
    }
}

/// One sweep axis: a config key and the values it takes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepAxis {
    pub param: String,
    pub values: Vec<f64>,
}

/// Where the data comes from when no dataset file is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub path: Option<PathBuf>,
    pub blobs: BlobParams,
    pub labeled_fraction: f64,
    pub queries_per_class: usize,
    pub split_seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            path: None,
            blobs: BlobParams::default(),
            labeled_fraction: 0.1,
            queries_per_class: 50,
            split_seed: 0,
        }
    }
}

impl DataSpec {
    pub fn load(&self) -> Result<Dataset> {
        match &self.path {
            Some(p) => Dataset::load(p),
            None => split(
                &generate_blobs(&self.blobs)?,
                self.labeled_fraction,
                self.queries_per_class,
                self.split_seed,
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub data: DataSpec,
    pub variants: Vec<Variant>,
    /// Shared training configuration; the seed field is replaced per run.
    pub train: TrainConfig,
    /// Unsupervised weight for PTS3H-P runs, if different from `omega`.
    pub omega_p: Option<f64>,
    /// Unsupervised weight for PTS3H-Q runs, if different from `omega`.
    pub omega_q: Option<f64>,
    pub seeds: Vec<u64>,
    pub code_source: CodeSource,
    pub sweep: Option<SweepAxis>,
    /// MAP cutoff; `None` ranks the whole database.
    pub map_k: Option<usize>,
    pub topk: Vec<usize>,
}

/// Unsupervised weight giving the best validation MAP for PTS3H-P on the
/// default blobs.
pub const DEFAULT_OMEGA_P: f64 = 30.0;

impl Default for ExperimentSpec {
    fn default() -> Self {
        let mut train = TrainConfig::new(default_hyperparams(SupervisedKind::Dsh, 16));
        train.lr = 0.03;
        train.lower_layer_scale = 1.0;
        train.sigma = 0.3;
        Self {
            data: DataSpec::default(),
            variants: vec![Variant::BaselineDsh, Variant::Pts3hDsh],
            train,
            omega_p: Some(DEFAULT_OMEGA_P),
            omega_q: None,
            seeds: (0..5).collect(),
            code_source: CodeSource::Teacher,
            sweep: None,
            map_k: None,
            topk: vec![100, 500, 1000],
        }
    }
}

/// Loss weights used for synthetic blobs, per supervised kind.
pub fn default_hyperparams(kind: SupervisedKind, code_bits: usize) -> Hyperparams {
    let mut hp = Hyperparams::for_kind(kind, code_bits);
    if kind == SupervisedKind::Dsh {
        hp.omega = 3.0;
    }
    hp
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: '{v}' is not a number")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: '{v}' is not a nonnegative integer")))
}

fn parse_list<T>(key: &str, v: &str, f: impl Fn(&str, &str) -> Result<T>) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| f(key, s))
        .collect()
}

/// Keys accepted by [`ExperimentSpec::set`], for help output.
pub const CONFIG_KEYS: &[&str] = &[
    "dataset", "classes", "per_class", "dim", "spread", "data_seed", "labeled_fraction",
    "queries_per_class", "variant", "kind", "b", "omega", "omega_p", "omega_q", "gamma", "eta",
    "alpha", "rho", "quantized", "margin", "epochs", "rampup", "batch", "m_l", "lr", "momentum",
    "lower_layer_scale", "hidden", "sigma", "validation", "seed", "seeds", "code_source", "sweep",
    "map_k", "topk",
];

impl ExperimentSpec {
    /// Applies one `key=value` setting. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let v = value.trim();
        match key.trim() {
            "dataset" => self.data.path = Some(PathBuf::from(v)),
            "classes" => self.data.blobs.classes = parse_usize(key, v)?,
            "per_class" => self.data.blobs.per_class = parse_usize(key, v)?,
            "dim" => self.data.blobs.dim = parse_usize(key, v)?,
            "spread" => self.data.blobs.spread = parse_f64(key, v)?,
            "data_seed" => {
                let s = parse_usize(key, v)? as u64;
                self.data.blobs.seed = s;
                self.data.split_seed = s;
            }
            "labeled_fraction" => self.data.labeled_fraction = parse_f64(key, v)?,
            "queries_per_class" => self.data.queries_per_class = parse_usize(key, v)?,
            "variant" | "variants" => {
                self.variants = parse_list(key, v, |_, s| s.parse::<Variant>())?;
            }
            "kind" => {
                let kind: SupervisedKind = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
                let d = default_hyperparams(kind, t.hp.code_bits);
                t.hp.kind = kind;
                t.hp.omega = d.omega;
                t.hp.gamma = d.gamma;
                t.hp.eta = d.eta;
            }
            "b" => t.hp.code_bits = parse_usize(key, v)?,
            "omega" => t.hp.omega = parse_f64(key, v)?,
            "omega_p" => self.omega_p = Some(parse_f64(key, v)?),
            "omega_q" => self.omega_q = Some(parse_f64(key, v)?),
            "gamma" => t.hp.gamma = parse_f64(key, v)?,
            "eta" => t.hp.eta = parse_f64(key, v)?,
            "alpha" => t.hp.alpha = parse_f64(key, v)?,
            "rho" => {
                t.hp.rho = if v.eq_ignore_ascii_case("auto") {
                    None
                } else {
                    Some(parse_f64(key, v)?)
                }
            }
            "quantized" => {
                t.hp.quantized_form = match v.to_ascii_lowercase().as_str() {
                    "hinge" => QuantizedForm::default(),
                    "verbatim" => QuantizedForm::Verbatim,
                    other => return Err(Error::Config(format!("unknown quantized form '{other}'"))),
                }
            }
            "margin" => {
                t.hp.quantized_form = QuantizedForm::NormalizedHinge {
                    margin: parse_f64(key, v)?,
                }
            }
            "epochs" => {
                t.epochs = parse_usize(key, v)?;
                t.rampup_epochs = t.epochs / 4;
            }
            "rampup" => t.rampup_epochs = parse_usize(key, v)?,
            "batch" => t.batch_size = parse_usize(key, v)?,
            "m_l" => t.labeled_per_batch = parse_usize(key, v)?,
            "lr" => t.lr = parse_f64(key, v)?,
            "momentum" => t.momentum = parse_f64(key, v)?,
            "lower_layer_scale" => t.lower_layer_scale = parse_f64(key, v)?,
            "hidden" => t.hidden = parse_list(key, v, parse_usize)?,
            "sigma" => t.sigma = parse_f64(key, v)?,
            "validation" => t.validation_fraction = parse_f64(key, v)?,
            "seed" => self.seeds = vec![parse_usize(key, v)? as u64],
            "seeds" => {
                self.seeds = parse_list(key, v, parse_usize)?
                    .into_iter()
                    .map(|s| s as u64)
                    .collect()
            }
            "code_source" => self.code_source = v.parse()?,
            "sweep" => {
                let (param, vals) = v.split_once(':').ok_or_else(|| {
                    Error::Config(format!("sweep must look like 'param:v1,v2,...', got '{v}'"))
                })?;
                let param = param.trim().to_string();
                if !CONFIG_KEYS.contains(&param.as_str()) {
                    return Err(Error::Config(format!("cannot sweep unknown key '{param}'")));
                }
                self.sweep = Some(SweepAxis {
                    values: parse_list(key, vals, parse_f64)?,
                    param,
                });
            }
            "map_k" => {
                self.map_k = if v.eq_ignore_ascii_case("all") {
                    None
                } else {
                    Some(parse_usize(key, v)?)
                }
            }
            "topk" => self.topk = parse_list(key, v, parse_usize)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parses a flat `key=value` file; `#` starts a comment.
    pub fn apply_config_text(&mut self, text: &str) -> Result<()> {
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", ln + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", ln + 1)))?;
        }
        Ok(())
    }

    pub fn from_config_file(path: impl AsRef<Path>) -> Result<Self> {
        let mut spec = Self::default();
        spec.apply_config_text(&std::fs::read_to_string(path)?)?;
        Ok(spec)
    }

    /// Training configuration of one run, with the variant's forced settings.
    pub fn config_for(&self, variant: Variant, point: Option<f64>, seed: u64) -> Result<TrainConfig> {
        let mut spec = self.clone();
        if let (Some(axis), Some(x)) = (&self.sweep, point) {
            spec.set(&axis.param, &x.to_string())?;
        }
        let mut cfg = spec.train.clone();
        cfg.seed = seed;
        let kind = variant.kind(cfg.hp.kind);
        if kind != cfg.hp.kind {
            let d = default_hyperparams(kind, cfg.hp.code_bits);
            cfg.hp.kind = kind;
            cfg.hp.omega = d.omega;
            cfg.hp.gamma = d.gamma;
            cfg.hp.eta = d.eta;
        }
        let swept = |k: &str| self.sweep.as_ref().is_some_and(|a| a.param == k);
        match variant {
            Variant::BaselineDsh | Variant::BaselineDpsh => cfg.hp.omega = 0.0,
            Variant::Pts3hDsh | Variant::Pts3hDpsh => {}
            Variant::Pts3hP => {
                cfg.hp.gamma = 0.0;
                cfg.hp.consistency = true;
                if let (Some(w), false) = (spec.omega_p, swept("omega")) {
                    cfg.hp.omega = w;
                }
            }
            Variant::Pts3hQ => {
                cfg.hp.consistency = false;
                if let (Some(w), false) = (spec.omega_q, swept("omega")) {
                    cfg.hp.omega = w;
                }
            }
        }
        Ok(cfg)
    }

    fn points(&self) -> Vec<Option<f64>> {
        match &self.sweep {
            Some(a) => a.values.iter().map(|&v| Some(v)).collect(),
            None => vec![None],
        }
    }
}

/// Hex SHA-256 of any serializable value.
pub fn content_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Headline numbers of one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub map: f64,
    pub precision_hamming2: f64,
    pub topk_curve: Vec<(usize, f64)>,
}

impl From<&MetricsReport> for MetricSummary {
    fn from(r: &MetricsReport) -> Self {
        Self {
            map: r.map_at_k,
            precision_hamming2: r.precision_hamming2,
            topk_curve: r.topk_curve.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub spec_hash: String,
    pub variant: Variant,
    pub seed: u64,
    pub sweep: Option<(String, f64)>,
    pub config: TrainConfig,
    pub code_source: CodeSource,
    pub student: Option<MetricSummary>,
    pub teacher: Option<MetricSummary>,
    pub final_validation_map: Option<f64>,
    /// Per-iteration pseudo-pair thresholds.
    pub thr_trace: Vec<f64>,
    pub iterations_per_epoch: usize,
    pub error: Option<String>,
}

impl RunRecord {
    /// Metrics of the requested code source, falling back to the student.
    pub fn metrics(&self) -> Option<&MetricSummary> {
        match self.code_source {
            CodeSource::Teacher => self.teacher.as_ref().or(self.student.as_ref()),
            CodeSource::Student => self.student.as_ref(),
        }
    }

    pub fn ok(&self) -> bool {
        self.error.is_none() && self.metrics().is_some()
    }
}

/// Codes of every item whose role passes `pred`, with labels and item ids.
pub fn encode_roles(
    ds: &Dataset,
    params: &EncoderParams,
    pred: impl Fn(Role) -> bool,
) -> Result<CodeSet> {
    let idx = ds.indices_with(pred);
    let codes = encode(params, &ds.features().select_rows(&idx))?;
    pack(&codes, params.arch.code_bits)?
        .with_labels(idx.iter().map(|&i| ds.labels()[i]).collect())?
        .with_ids(idx.iter().map(|&i| i as u64).collect())
}

/// Query-vs-database evaluation of `params` on `ds`.
pub fn evaluate_params(
    ds: &Dataset,
    params: &EncoderParams,
    map_k: Option<usize>,
    topk: &[usize],
) -> Result<MetricsReport> {
    let q = encode_roles(ds, params, |r| r == Role::Query)?;
    let db = encode_roles(ds, params, Role::in_database)?;
    evaluate(&q, &db, map_k.unwrap_or(db.len()).max(1), topk)
}

/// Trains one configuration the way `variant` prescribes.
pub fn train_variant(ds: &Dataset, variant: Variant, cfg: &TrainConfig) -> Result<TrainOutput> {
    let view = ds.train_view(cfg.validation_fraction, cfg.seed)?;
    if variant.is_baseline() {
        train_supervised(&view, cfg)
    } else {
        train(&view, cfg)
    }
}

pub fn checkpoint_of(out: &TrainOutput) -> Checkpoint {
    Checkpoint {
        student: out.student.clone(),
        teacher: out.teacher.clone().unwrap_or_else(|| out.student.clone()),
        optimizer: out.optimizer.clone(),
    }
}

/// Trains and evaluates a single run. Failures become records with `error` set.
pub fn execute_run(
    ds: &Dataset,
    spec: &ExperimentSpec,
    variant: Variant,
    point: Option<f64>,
    seed: u64,
) -> Result<(RunRecord, Option<TrainOutput>)> {
    let cfg = spec.config_for(variant, point, seed)?;
    let spec_hash = content_hash(spec)?;
    let sweep = spec
        .sweep
        .as_ref()
        .zip(point)
        .map(|(a, x)| (a.param.clone(), x));
    let run_id = content_hash(&(&spec_hash, variant, &sweep, seed))?;
    let mut rec = RunRecord {
        run_id,
        spec_hash,
        variant,
        seed,
        sweep,
        config: cfg.clone(),
        code_source: spec.code_source,
        student: None,
        teacher: None,
        final_validation_map: None,
        thr_trace: Vec::new(),
        iterations_per_epoch: 0,
        error: None,
    };
    let out = match train_variant(ds, variant, &cfg) {
        Ok(o) => o,
        Err(e) => {
            log::warn!("run {variant} seed {seed} failed: {e}");
            rec.error = Some(e.to_string());
            return Ok((rec, None));
        }
    };
    let eval = |p: &EncoderParams| -> Result<MetricSummary> {
        Ok(MetricSummary::from(&evaluate_params(ds, p, spec.map_k, &spec.topk)?))
    };
    rec.student = Some(eval(&out.student)?);
    if let Some(t) = &out.teacher {
        rec.teacher = Some(eval(t)?);
    }
    rec.final_validation_map = out.log.epochs.last().map(|e| e.validation_map);
    rec.thr_trace = out.log.iterations.iter().map(|i| i.thr).collect();
    rec.iterations_per_epoch = out.log.iterations.len() / cfg.epochs.max(1);
    Ok((rec, Some(out)))
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: Variant,
    pub sweep: Option<(String, f64)>,
    pub runs: usize,
    pub failed: usize,
    pub map_mean: f64,
    pub map_std: f64,
    pub prec2_mean: f64,
    pub prec2_std: f64,
    /// `map_mean` minus the matching baseline's `map_mean`, when present.
    pub gain: Option<f64>,
}

fn point_key(s: &Option<(String, f64)>) -> Option<(String, u64)> {
    s.as_ref().map(|(k, v)| (k.clone(), v.to_bits()))
}

/// Aggregates records per (variant, sweep point) over seeds.
pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(Option<(String, u64)>, Variant), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((point_key(&r.sweep), r.variant)).or_default().push(r);
    }
    let mut rows: Vec<SummaryRow> = groups
        .values()
        .map(|rs| {
            let ok: Vec<&MetricSummary> = rs.iter().filter(|r| r.ok()).filter_map(|r| r.metrics()).collect();
            let maps: Vec<f64> = ok.iter().map(|m| m.map).collect();
            let precs: Vec<f64> = ok.iter().map(|m| m.precision_hamming2).collect();
            let (map_mean, map_std) = mean_std(&maps);
            let (prec2_mean, prec2_std) = mean_std(&precs);
            SummaryRow {
                variant: rs[0].variant,
                sweep: rs[0].sweep.clone(),
                runs: ok.len(),
                failed: rs.len() - ok.len(),
                map_mean,
                map_std,
                prec2_mean,
                prec2_std,
                gain: None,
            }
        })
        .collect();
    let lookup: BTreeMap<(Option<(String, u64)>, Variant), f64> = rows
        .iter()
        .map(|r| ((point_key(&r.sweep), r.variant), r.map_mean))
        .collect();
    for (row, rs) in rows.iter_mut().zip(groups.values()) {
        if row.variant.is_baseline() {
            continue;
        }
        let base = row.variant.baseline(rs[0].config.hp.kind);
        if let Some(b) = lookup.get(&(point_key(&row.sweep), base)) {
            if row.runs > 0 && b.is_finite() {
                row.gain = Some(row.map_mean - b);
            }
        }
    }
    rows
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("variant,sweep_param,sweep_value,runs,failed,map_mean,map_std,prec2_mean,prec2_std,gain\n");
    for r in rows {
        let (p, v) = r
            .sweep
            .as_ref()
            .map_or((String::new(), String::new()), |(p, v)| (p.clone(), v.to_string()));
        s.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{}\n",
            r.variant,
            p,
            v,
            r.runs,
            r.failed,
            r.map_mean,
            r.map_std,
            r.prec2_mean,
            r.prec2_std,
            r.gain.map_or(String::new(), |g| format!("{g:.6}"))
        ));
    }
    s
}

/// Writes plot-ready CSVs into `dir`: one curve per (sweep axis, variant)
/// with `x, map_mean, map_std, prec2_mean, prec2_std`, and one threshold
/// trace per run. Returns the files written.
pub fn export_curves(records: &[RunRecord], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let rows = summarize(records);
    let mut curves: BTreeMap<(String, Variant), Vec<&SummaryRow>> = BTreeMap::new();
    for r in &rows {
        if let Some((p, _)) = &r.sweep {
            curves.entry((p.clone(), r.variant)).or_default().push(r);
        }
    }
    for ((param, variant), mut pts) in curves {
        pts.retain(|r| {
            if r.runs == 0 {
                log::warn!("no completed runs for {variant} at {:?}; point omitted", r.sweep);
            }
            r.runs > 0
        });
        if pts.is_empty() {
            log::warn!("curve {param}/{variant} has no completed runs; omitted");
            continue;
        }
        pts.sort_by(|a, b| a.sweep.as_ref().unwrap().1.total_cmp(&b.sweep.as_ref().unwrap().1));
        let mut s = format!("{param},map_mean,map_std,prec2_mean,prec2_std\n");
        for r in pts {
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6}\n",
                r.sweep.as_ref().unwrap().1,
                r.map_mean,
                r.map_std,
                r.prec2_mean,
                r.prec2_std
            ));
        }
        let path = dir.join(format!("curve_{param}_{variant}.csv"));
        std::fs::write(&path, s)?;
        written.push(path);
    }
    for r in records.iter().filter(|r| !r.thr_trace.is_empty()) {
        let per = r.iterations_per_epoch.max(1);
        let mut s = String::from("epoch,iteration,thr\n");
        for (k, t) in r.thr_trace.iter().enumerate() {
            s.push_str(&format!("{},{},{}\n", k / per, k % per, t));
        }
        let path = dir.join(format!("thr_{}.csv", &r.run_id[..16]));
        std::fs::write(&path, s)?;
        written.push(path);
    }
    Ok(written)
}

/// Result of [`run`]: every record plus the aggregated table.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub records: Vec<RunRecord>,
    pub rows: Vec<SummaryRow>,
}

/// Runs every (sweep point, variant, seed) of `spec`.
///
/// Records land in `out_dir/runs/<run_id>.json`, where the id hashes the spec
/// and the run coordinates. An existing record is reused, never overwritten.
/// The summary (`summary.json`, `summary.csv`) and curve files are rebuilt
/// from the records.
pub fn run(spec: &ExperimentSpec, out_dir: impl AsRef<Path>) -> Result<RunSummary> {
    let out_dir = out_dir.as_ref();
    let runs_dir = out_dir.join("runs");
    std::fs::create_dir_all(&runs_dir)?;
    let ds = spec.data.load()?;
    let spec_hash = content_hash(spec)?;
    std::fs::write(
        out_dir.join(format!("spec_{}.json", &spec_hash[..16])),
        serde_json::to_string_pretty(spec)?,
    )?;
    let mut records = Vec::new();
    for point in spec.points() {
        for &variant in &spec.variants {
            for &seed in &spec.seeds {
                let sweep = spec.sweep.as_ref().zip(point).map(|(a, x)| (a.param.clone(), x));
                let run_id = content_hash(&(&spec_hash, variant, &sweep, seed))?;
                let path = runs_dir.join(format!("{run_id}.json"));
                if path.exists() {
                    let rec: RunRecord = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
                    records.push(rec);
                    continue;
                }
                let (rec, _) = execute_run(&ds, spec, variant, point, seed)?;
                std::fs::write(&path, serde_json::to_string(&rec)?)?;
                records.push(rec);
            }
        }
    }
    let rows = summarize(&records);
    write_report(&records, &rows, out_dir)?;
    Ok(RunSummary { records, rows })
}

/// Writes `records.jsonl`, `summary.json`, `summary.csv` and the curve files.
pub fn write_report(records: &[RunRecord], rows: &[SummaryRow], out_dir: &Path) -> Result<()> {
    let mut lines = String::new();
    for r in records {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    std::fs::write(out_dir.join("records.jsonl"), lines)?;
    std::fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(rows)?)?;
    std::fs::write(out_dir.join("summary.csv"), summary_csv(rows))?;
    export_curves(records, out_dir.join("curves"))?;
    Ok(())
}

/// Loads every record under `dir/runs`.
pub fn load_records(dir: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir.as_ref().join("runs"))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("PTS3H-X".parse::<Variant>().is_err());
    }

    #[test]
    fn variant_forcing_is_exact() {
        let mut spec = ExperimentSpec::default();
        spec.set("gamma", "0.7").unwrap();
        let p = spec.config_for(Variant::Pts3hP, None, 1).unwrap();
        assert_eq!(p.hp.gamma, 0.0);
        assert!(serde_json::to_string(&p).unwrap().contains("\"gamma\":0.0"));
        let q = spec.config_for(Variant::Pts3hQ, None, 1).unwrap();
        assert!(!q.hp.consistency);
        let b = spec.config_for(Variant::BaselineDpsh, None, 1).unwrap();
        assert_eq!(b.hp.omega, 0.0);
        assert_eq!(b.hp.kind, SupervisedKind::Dpsh);
        assert_eq!(b.seed, 1);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let mut spec = ExperimentSpec::default();
        assert!(spec.apply_config_text("omega=0.5\nbogus=1\n").is_err());
        assert!(spec.apply_config_text("omega 0.5").is_err());
        assert!(spec.set("sweep", "nonsense:1,2").is_err());
    }

    #[test]
    fn config_text_parses() {
        let mut spec = ExperimentSpec::default();
        spec.apply_config_text(
            "# comment\nvariant=baseline-DSH,PTS3H-DSH\nb=32\nseeds=1,2,3\nrho=0.2 # trailing\nsweep=omega:0,0.5\nhidden=32,16\n",
        )
        .unwrap();
        assert_eq!(spec.variants, vec![Variant::BaselineDsh, Variant::Pts3hDsh]);
        assert_eq!(spec.train.hp.code_bits, 32);
        assert_eq!(spec.seeds, vec![1, 2, 3]);
        assert_eq!(spec.train.hp.rho, Some(0.2));
        assert_eq!(spec.train.hidden, vec![32, 16]);
        let axis = spec.sweep.clone().unwrap();
        assert_eq!(axis.values, vec![0.0, 0.5]);
        let c = spec.config_for(Variant::Pts3hDsh, Some(0.5), 0).unwrap();
        assert_eq!(c.hp.omega, 0.5);
    }

    fn record(variant: Variant, seed: u64, map: f64) -> RunRecord {
        let cfg = ExperimentSpec::default().config_for(variant, None, seed).unwrap();
        RunRecord {
            run_id: format!("{variant}-{seed}-0000000000000000"),
            spec_hash: String::new(),
            variant,
            seed,
            sweep: None,
            config: cfg,
            code_source: CodeSource::Student,
            student: Some(MetricSummary {
                map,
                precision_hamming2: map / 2.0,
                topk_curve: vec![],
            }),
            teacher: None,
            final_validation_map: None,
            thr_trace: vec![],
            iterations_per_epoch: 1,
            error: None,
        }
    }

    #[test]
    fn gain_is_difference_of_means() {
        let recs = vec![
            record(Variant::BaselineDsh, 0, 0.5),
            record(Variant::BaselineDsh, 1, 0.7),
            record(Variant::Pts3hDsh, 0, 0.75),
            record(Variant::Pts3hDsh, 1, 0.65),
        ];
        let rows = summarize(&recs);
        let full = rows.iter().find(|r| r.variant == Variant::Pts3hDsh).unwrap();
        assert!((full.gain.unwrap() - (0.7 - 0.6)).abs() < 1e-12);
        let base = rows.iter().find(|r| r.variant == Variant::BaselineDsh).unwrap();
        assert!(base.gain.is_none());
        assert!(base.map_std > 0.0);
    }

    #[test]
    fn single_seed_std_is_zero() {
        assert_eq!(mean_std(&[0.4]), (0.4, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn failed_runs_do_not_count() {
        let mut bad = record(Variant::Pts3hDsh, 2, 0.0);
        bad.error = Some("diverged".into());
        let recs = vec![record(Variant::Pts3hDsh, 0, 0.6), bad];
        let rows = summarize(&recs);
        assert_eq!(rows[0].runs, 1);
        assert_eq!(rows[0].failed, 1);
        assert_eq!(rows[0].map_mean, 0.6);
    }

    #[test]
    fn curves_and_traces() {
        let dir = tempfile::tempdir().unwrap();
        let mut recs = Vec::new();
        for (x, m) in [(0.0, 0.5), (1.0, 0.6)] {
            for seed in 0..2 {
                let mut r = record(Variant::Pts3hDsh, seed, m + seed as f64 * 0.01);
                r.sweep = Some(("omega".into(), x));
                r.run_id = format!("{x}-{seed}-aaaaaaaaaaaaaaaaaaaa");
                r.thr_trace = vec![-1.0, -0.5, -0.25, -0.2];
                r.iterations_per_epoch = 2;
                recs.push(r);
            }
        }
        let files = export_curves(&recs, dir.path()).unwrap();
        let curve = std::fs::read_to_string(dir.path().join("curve_omega_PTS3H-DSH.csv")).unwrap();
        let lines: Vec<&str> = curve.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0,0.505"));
        let traces: Vec<_> = files.iter().filter(|p| p.to_string_lossy().contains("thr_")).collect();
        assert_eq!(traces.len(), 4);
        let t = std::fs::read_to_string(traces[0]).unwrap();
        assert_eq!(t.lines().count(), 1 + 4);
        assert!(t.contains("1,1,-0.2"));
    }
}
