use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use tshash_core::checkpoint::Checkpoint;
use tshash_core::data::{generate_blobs, split, Dataset, Role};
use tshash_core::encoder::EncoderParams;
use tshash_core::experiment::{
    self, checkpoint_of, encode_roles, evaluate_params, load_records, summarize, write_report,
    CodeSource, ExperimentSpec, SummaryRow, Variant,
};
use tshash_core::retrieval::{evaluate, CodeSet};

#[derive(Parser, Debug)]
#[command(name = "tshash", version, about = "Semi-supervised hashing with a teacher-student encoder")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a blob dataset or import a CSV, then assign roles.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output dataset file (PTSD).
        #[arg(long)]
        out: PathBuf,
        /// Import features from CSV (feature columns, then an integer label).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train one variant and write a checkpoint plus its epoch log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Encode dataset items with a checkpoint into a packed code file.
    Encode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Which::Database)]
        role: Which,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate codes: either two code files, or a checkpoint on the dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "checkpoint", requires = "database")]
        queries: Option<PathBuf>,
        #[arg(long)]
        database: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Write the full report (with per-query diagnostics) here as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the variant ablation (all variants unless --variant is given).
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Sweep one parameter over a list of values.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Rebuild summary and curve files from stored run records.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Which {
    Query,
    Database,
    All,
}

/// Options shared by every subcommand. Each flag overrides the matching
/// config key; `--set key=value` reaches the rest.
#[derive(Args, Debug, Default)]
struct Common {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the other flags.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Single seed; for gen-data this seeds the data and the split.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    variant: Option<Vec<String>>,
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    b: Option<usize>,
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Pseudo-pair ratio, or `auto` for the labeled similar-pair fraction.
    #[arg(long)]
    rho: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    m_l: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    code_source: Option<String>,
    /// MAP cutoff, or `all`.
    #[arg(long)]
    map_k: Option<String>,
}

impl Common {
    fn spec(&self) -> Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(p) => ExperimentSpec::from_config_file(p)
                .with_context(|| format!("reading config {}", p.display()))?,
            None => ExperimentSpec::default(),
        };
        let mut pairs: Vec<(&str, String)> = Vec::new();
        let mut put = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                pairs.push((k, v));
            }
        };
        let join = |xs: &[u64]| xs.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
        put("dataset", self.dataset.as_ref().map(|p| p.display().to_string()));
        put("variant", self.variant.as_ref().map(|v| v.join(",")));
        // kind resets the loss weights, so it goes before them
        put("kind", self.kind.clone());
        put("b", self.b.map(|v| v.to_string()));
        put("omega", self.omega.map(|v| v.to_string()));
        put("gamma", self.gamma.map(|v| v.to_string()));
        put("eta", self.eta.map(|v| v.to_string()));
        put("alpha", self.alpha.map(|v| v.to_string()));
        put("rho", self.rho.clone());
        put("epochs", self.epochs.map(|v| v.to_string()));
        put("batch", self.batch.map(|v| v.to_string()));
        put("m_l", self.m_l.map(|v| v.to_string()));
        put("sigma", self.sigma.map(|v| v.to_string()));
        put("lr", self.lr.map(|v| v.to_string()));
        put("code_source", self.code_source.clone());
        put("map_k", self.map_k.clone());
        put("seeds", self.seeds.as_deref().map(join));
        put("seed", self.seed.map(|v| v.to_string()));
        for (k, v) in pairs {
            spec.set(k, &v).with_context(|| format!("--{k}"))?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got '{kv}'"))?;
            spec.set(k, v).with_context(|| format!("--set {kv}"))?;
        }
        Ok(spec)
    }
}

fn load_dataset(spec: &ExperimentSpec) -> Result<Dataset> {
    spec.data.load().context("loading dataset")
}

fn network(ck: &Checkpoint, source: CodeSource) -> &EncoderParams {
    match source {
        CodeSource::Teacher => &ck.teacher,
        CodeSource::Student => &ck.student,
    }
}

fn print_rows(rows: &[SummaryRow]) {
    println!(
        "{:<14} {:>14} {:>5} {:>17} {:>17} {:>8}",
        "variant", "point", "runs", "MAP", "P@H<=2", "gain"
    );
    for r in rows {
        let point = r
            .sweep
            .as_ref()
            .map_or("-".to_string(), |(p, v)| format!("{p}={v}"));
        let gain = r.gain.map_or("-".to_string(), |g| format!("{g:+.4}"));
        println!(
            "{:<14} {:>14} {:>5} {:>8.4}±{:<8.4} {:>8.4}±{:<8.4} {:>8}",
            r.variant.to_string(),
            point,
            r.runs,
            r.map_mean,
            r.map_std,
            r.prec2_mean,
            r.prec2_std,
            gain
        );
        if r.failed > 0 {
            println!("  ({} failed run(s), see records)", r.failed);
        }
    }
}

fn gen_data(common: &Common, out: &Path, csv: Option<&Path>) -> Result<()> {
    let mut spec = ExperimentSpec::default();
    if let Some(p) = &common.config {
        spec = ExperimentSpec::from_config_file(p)?;
    }
    for kv in &common.set {
        let (k, v) = kv.split_once('=').context("--set expects KEY=VALUE")?;
        spec.set(k, v)?;
    }
    if let Some(s) = common.seed {
        spec.set("data_seed", &s.to_string())?;
    }
    let d = &spec.data;
    let base = match csv {
        Some(p) => Dataset::from_csv(std::fs::File::open(p).with_context(|| format!("opening {}", p.display()))?)?,
        None => generate_blobs(&d.blobs)?,
    };
    let ds = split(&base, d.labeled_fraction, d.queries_per_class, d.split_seed)?;
    ds.save(out)?;
    let [l, u, q, db] = ds.role_counts();
    println!(
        "wrote {}: n={} d={} classes={} labeled={l} unlabeled={u} query={q} database={db}",
        out.display(),
        ds.len(),
        ds.dim(),
        ds.num_classes()
    );
    Ok(())
}

fn train_cmd(common: &Common, out_dir: &Path) -> Result<()> {
    let spec = common.spec()?;
    let ds = load_dataset(&spec)?;
    let variant = match spec.variants.as_slice() {
        [v] => *v,
        _ if common.variant.is_none() => Variant::Pts3hDsh,
        _ => bail!("train takes exactly one variant"),
    };
    let seed = spec.seeds.first().copied().unwrap_or(0);
    let cfg = spec.config_for(variant, None, seed)?;
    std::fs::create_dir_all(out_dir)?;
    let out = experiment::train_variant(&ds, variant, &cfg)?;
    checkpoint_of(&out).save(out_dir.join("checkpoint.pts3"))?;
    std::fs::write(out_dir.join("train_log.jsonl"), out.log.to_json_lines()?)?;
    std::fs::write(out_dir.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    if let Some(e) = out.log.epochs.last() {
        println!(
            "{variant} seed {seed}: {} epochs, final loss {:.5}, validation MAP {:.4}",
            out.log.epochs.len(),
            e.loss.total,
            e.validation_map
        );
    }
    Ok(())
}

fn encode_cmd(common: &Common, checkpoint: &Path, role: Which, out: &Path) -> Result<()> {
    let spec = common.spec()?;
    let ds = load_dataset(&spec)?;
    let ck = Checkpoint::load(checkpoint)?;
    let pred = move |r: Role| match role {
        Which::Query => r == Role::Query,
        Which::Database => r.in_database(),
        Which::All => true,
    };
    let codes = encode_roles(&ds, network(&ck, spec.code_source), pred)?;
    codes.save(out)?;
    println!("wrote {} codes of {} bits to {}", codes.len(), codes.bits(), out.display());
    Ok(())
}

fn eval_cmd(
    common: &Common,
    queries: Option<&Path>,
    database: Option<&Path>,
    checkpoint: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let spec = common.spec()?;
    let report = match (queries, database, checkpoint) {
        (Some(q), Some(db), None) => {
            let q = CodeSet::load(q)?;
            let db = CodeSet::load(db)?;
            evaluate(&q, &db, spec.map_k.unwrap_or(db.len()).max(1), &spec.topk)?
        }
        (None, _, Some(c)) => {
            let ds = load_dataset(&spec)?;
            let ck = Checkpoint::load(c)?;
            evaluate_params(&ds, network(&ck, spec.code_source), spec.map_k, &spec.topk)?
        }
        _ => bail!("eval needs --queries and --database, or --checkpoint"),
    };
    println!("MAP@{} {:.6}", report.k, report.map_at_k);
    println!("precision@H<=2 {:.6}", report.precision_hamming2);
    for (k, p) in &report.topk_curve {
        println!("precision@{k} {p:.6}");
    }
    if let Some(o) = out {
        std::fs::write(o, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn run_and_print(spec: &ExperimentSpec, out_dir: &Path) -> Result<()> {
    let summary = experiment::run(spec, out_dir)?;
    print_rows(&summary.rows);
    println!("records and summary in {}", out_dir.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match &cli.cmd {
        Cmd::GenData { common, out, csv } => gen_data(common, out, csv.as_deref()),
        Cmd::Train { common, out_dir } => train_cmd(common, out_dir),
        Cmd::Encode {
            common,
            checkpoint,
            role,
            out,
        } => encode_cmd(common, checkpoint, *role, out),
        Cmd::Eval {
            common,
            queries,
            database,
            checkpoint,
            out,
        } => eval_cmd(common, queries.as_deref(), database.as_deref(), checkpoint.as_deref(), out.as_deref()),
        Cmd::Ablate { common, out_dir } => {
            let mut spec = common.spec()?;
            if common.variant.is_none() && !common.set.iter().any(|s| s.starts_with("variant")) {
                let from_file = common
                    .config
                    .as_ref()
                    .map(std::fs::read_to_string)
                    .transpose()?
                    .is_some_and(|t| t.lines().any(|l| l.trim_start().starts_with("variant")));
                if !from_file {
                    spec.variants = Variant::ALL.to_vec();
                }
            }
            run_and_print(&spec, out_dir)
        }
        Cmd::Sweep {
            common,
            param,
            values,
            out_dir,
        } => {
            let mut spec = common.spec()?;
            let vals = values.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
            spec.set("sweep", &format!("{param}:{vals}"))?;
            run_and_print(&spec, out_dir)
        }
        Cmd::Report { common: _, dir } => {
            let records = load_records(dir)?;
            if records.is_empty() {
                bail!("no run records under {}", dir.join("runs").display());
            }
            let rows = summarize(&records);
            write_report(&records, &rows, dir)?;
            print_rows(&rows);
            Ok(())
        }
    }
}
