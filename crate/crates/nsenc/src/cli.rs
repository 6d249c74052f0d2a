//! Experiment driver: data generation, training/synthesis runs, evaluation,
//! program inspection, and latent export.
//!
//! Every run directory is self-describing: it holds a copy of the resolved
//! config, a manifest with content hashes of the inputs, per-seed program
//! text files, synthesis logs, training histories, checkpoints, and metrics.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{
    feature_augment, generate_synthetic, load_trajectories, save_trajectories, ChannelDef,
    DataError, DataSplits, Dataset, Normalizer, SyntheticConfig,
};
use crate::dsl::{parse_program, pretty_print, Architecture, DslError, FeatureSchema, Grammar,
    ParameterStore};
use crate::metrics::{assign_clusters, report, MetricsError, MetricsReport};
use crate::nets::{load_checkpoint, save_checkpoint, NetsError};
use crate::synthesis::{synthesize_k_programs, SynthesisConfig, SynthesisError};
use crate::vae::{TrainConfig, VaeError, VaeModel};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("training failure: {0}")]
    Training(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dsl(#[from] DslError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] NetsError),
}

impl CliError {
    /// 0 success; 2 config error; 3 data error; 4 training failure; 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Dsl(_) => 2,
            CliError::Data(_) => 3,
            CliError::Training(_) => 4,
            _ => 1,
        }
    }
}

impl From<SynthesisError> for CliError {
    fn from(e: SynthesisError) -> Self {
        CliError::Training(e.to_string())
    }
}

impl From<VaeError> for CliError {
    fn from(e: VaeError) -> Self {
        match e {
            VaeError::Config(msg) => CliError::Config(msg),
            other => CliError::Training(other.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic(SyntheticConfig),
    File {
        train: String,
        val: String,
        test: String,
        schema: String,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FeaturesSpec {
    /// Standardize every channel (including derived ones) using statistics
    /// fitted on the training split.
    pub normalize: bool,
    pub derived: Vec<ChannelDef>,
}

impl Default for FeaturesSpec {
    fn default() -> Self {
        FeaturesSpec {
            normalize: true,
            derived: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GrammarSpec {
    pub id: String,
}

impl Default for GrammarSpec {
    fn default() -> Self {
        GrammarSpec {
            id: "sequence-classifier".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSpec {
    pub k: usize,
    pub seeds: Vec<u64>,
    pub out_dir: String,
    #[serde(default)]
    pub parallel_seeds: bool,
}

/// Full experiment description; see `configs/synthetic.toml` for the
/// documented default instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub features: FeaturesSpec,
    #[serde(default)]
    pub grammar: GrammarSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub synthesis: SynthesisConfig,
    pub run: RunSpec,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.run.seeds.is_empty() {
            return Err(CliError::Config("run.seeds must be nonempty".into()));
        }
        if self.run.k == 0 {
            return Err(CliError::Config("run.k must be at least 1".into()));
        }
        if let DatasetSpec::File {
            train,
            val,
            test,
            schema,
        } = &self.dataset
        {
            for p in [train, val, test, schema] {
                if !Path::new(p).exists() {
                    return Err(CliError::Config(format!("referenced path `{p}` does not exist")));
                }
            }
        }
        if self.grammar.id != "sequence-classifier" {
            return Err(CliError::Config(format!(
                "unknown grammar id `{}`",
                self.grammar.id
            )));
        }
        self.train.validate().map_err(CliError::from)?;
        Ok(())
    }
}

/// Splits after augmentation and normalization, plus the grammar built from
/// the augmented schema.
pub struct PreparedData {
    pub splits: DataSplits<Scalar>,
    pub normalizer: Option<Normalizer>,
    pub grammar: Grammar,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData, CliError> {
    let raw: DataSplits<Scalar> = match &cfg.dataset {
        DatasetSpec::Synthetic(s) => generate_synthetic(s),
        DatasetSpec::File {
            train,
            val,
            test,
            schema,
        } => {
            let schema_text =
                std::fs::read_to_string(Path::new(schema)).map_err(io_err(Path::new(schema)))?;
            let schema: FeatureSchema = serde_json::from_str(&schema_text)
                .map_err(|e| CliError::Config(format!("bad schema file: {e}")))?;
            DataSplits {
                train: load_trajectories(Path::new(train), &schema)?,
                val: load_trajectories(Path::new(val), &schema)?,
                test: load_trajectories(Path::new(test), &schema)?,
            }
        }
    };
    let augmented = DataSplits {
        train: feature_augment(&raw.train, &cfg.features.derived)?,
        val: feature_augment(&raw.val, &cfg.features.derived)?,
        test: feature_augment(&raw.test, &cfg.features.derived)?,
    };
    let (splits, normalizer) = if cfg.features.normalize {
        let norm = Normalizer::fit(&augmented.train);
        (
            DataSplits {
                train: norm.apply(&augmented.train),
                val: norm.apply(&augmented.val),
                test: norm.apply(&augmented.test),
            },
            Some(norm),
        )
    } else {
        (augmented, None)
    };
    let grammar = Grammar::sequence_classifier(&splits.train.schema);
    Ok(PreparedData {
        splits,
        normalizer,
        grammar,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text).map_err(io_err(path))
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize)]
struct SplitEntry {
    name: String,
    file: String,
    count: usize,
    indices: Vec<usize>,
}

#[derive(Serialize)]
struct DataManifest {
    format: String,
    splits: Vec<SplitEntry>,
}

/// `gen-data`: write JSONL splits, the schema, a label file, and a manifest.
pub fn cmd_gen_data(config_path: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config_path)?;
    let synth = match &cfg.dataset {
        DatasetSpec::Synthetic(s) => s.clone(),
        DatasetSpec::File { .. } => {
            return Err(CliError::Config(
                "gen-data needs a synthetic dataset config".into(),
            ))
        }
    };
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let splits: DataSplits<Scalar> = generate_synthetic(&synth);

    let mut manifest = DataManifest {
        format: "nsenc-data v1".into(),
        splits: Vec::new(),
    };
    let mut offset = 0usize;
    let mut labels = serde_json::Map::new();
    for (name, ds) in [
        ("train", &splits.train),
        ("val", &splits.val),
        ("test", &splits.test),
    ] {
        let file = format!("{name}.jsonl");
        save_trajectories(&out.join(&file), ds)?;
        manifest.splits.push(SplitEntry {
            name: name.into(),
            file,
            count: ds.len(),
            indices: (offset..offset + ds.len()).collect(),
        });
        offset += ds.len();
        labels.insert(
            name.to_string(),
            serde_json::to_value(ds.labels()).expect("labels"),
        );
    }
    write_json(&out.join("schema.json"), &splits.train.schema)?;
    write_json(&out.join("manifest.json"), &manifest)?;
    write_json(&out.join("labels.json"), &serde_json::Value::Object(labels))?;
    println!(
        "wrote {}/{}/{} trajectories to {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct RunOverrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub k: Option<usize>,
    pub max_depth: Option<usize>,
    pub parallel_seeds: bool,
}

#[derive(Serialize)]
struct SeedSummary {
    seed: u64,
    status: String,
    metrics: Option<MetricsReport>,
    programs: Vec<String>,
    distill_agreements: Vec<f64>,
}

#[derive(Serialize)]
struct RunSummary {
    seeds: Vec<SeedSummary>,
    median: Option<MedianMetrics>,
}

#[derive(Serialize)]
struct MedianMetrics {
    purity: f64,
    nmi: f64,
    ri: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// `run`: per-seed synthesis + evaluation under one output directory.
/// Individual seed failures are recorded in the summary; remaining seeds
/// still run.
pub fn cmd_run(config_path: &Path, overrides: &RunOverrides) -> Result<PathBuf, CliError> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(seed) = overrides.seed {
        cfg.run.seeds = vec![seed];
    }
    if let Some(out) = &overrides.out {
        cfg.run.out_dir = out.display().to_string();
    }
    if let Some(k) = overrides.k {
        cfg.run.k = k;
    }
    if let Some(d) = overrides.max_depth {
        cfg.synthesis.max_depth = d;
    }
    if overrides.parallel_seeds {
        cfg.run.parallel_seeds = true;
    }
    cfg.validate()?;

    let out = PathBuf::from(&cfg.run.out_dir);
    std::fs::create_dir_all(&out).map_err(io_err(&out))?;

    // Self-description: resolved config plus content hashes of the inputs.
    let resolved = toml::to_string_pretty(&cfg).expect("serializable config");
    std::fs::write(out.join("config.toml"), &resolved).map_err(io_err(&out))?;
    let mut hashes = serde_json::Map::new();
    hashes.insert("config".into(), sha256_hex(resolved.as_bytes()).into());
    if let DatasetSpec::File {
        train,
        val,
        test,
        schema,
    } = &cfg.dataset
    {
        for (name, p) in [("train", train), ("val", val), ("test", test), ("schema", schema)] {
            let bytes = std::fs::read(Path::new(p)).map_err(io_err(Path::new(p)))?;
            hashes.insert(format!("data.{name}"), sha256_hex(&bytes).into());
        }
    } else {
        let spec = serde_json::to_vec(&cfg.dataset).expect("serializable");
        hashes.insert("data.synthetic_spec".into(), sha256_hex(&spec).into());
    }
    write_json(
        &out.join("run_manifest.json"),
        &serde_json::Value::Object(hashes),
    )?;

    let prepared = prepare_data(&cfg)?;
    if let Some(norm) = &prepared.normalizer {
        write_json(&out.join("normalizer.json"), norm)?;
    }

    let seeds = cfg.run.seeds.clone();
    let mut summaries: Vec<SeedSummary> = Vec::with_capacity(seeds.len());
    if cfg.run.parallel_seeds && seeds.len() > 1 {
        let results: Vec<Result<SeedSummary, CliError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = seeds
                .iter()
                .map(|&seed| {
                    let cfg = &cfg;
                    let prepared = &prepared;
                    let out = &out;
                    scope.spawn(move || run_single_seed(cfg, prepared, out, seed))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("seed thread panicked"))
                .collect()
        });
        for (seed, result) in seeds.iter().zip(results) {
            summaries.push(seed_summary(*seed, result));
        }
    } else {
        for &seed in &seeds {
            let result = run_single_seed(&cfg, &prepared, &out, seed);
            summaries.push(seed_summary(seed, result));
        }
    }

    let median_metrics = {
        let ok: Vec<&SeedSummary> = summaries.iter().filter(|s| s.status == "ok").collect();
        if ok.is_empty() {
            None
        } else {
            Some(MedianMetrics {
                purity: median(ok.iter().map(|s| s.metrics.as_ref().unwrap().purity).collect()),
                nmi: median(ok.iter().map(|s| s.metrics.as_ref().unwrap().nmi).collect()),
                ri: median(ok.iter().map(|s| s.metrics.as_ref().unwrap().ri).collect()),
            })
        }
    };
    let any_failed = summaries.iter().any(|s| s.status != "ok");
    let all_failed = summaries.iter().all(|s| s.status != "ok");
    write_json(
        &out.join("summary.json"),
        &RunSummary {
            seeds: summaries,
            median: median_metrics,
        },
    )?;
    println!("run complete: {}", out.display());
    if any_failed && all_failed {
        return Err(CliError::Training("all seeds failed; see summary.json".into()));
    }
    Ok(out)
}

fn seed_summary(seed: u64, result: Result<SeedSummary, CliError>) -> SeedSummary {
    match result {
        Ok(s) => s,
        Err(e) => SeedSummary {
            seed,
            status: format!("failed: {e}"),
            metrics: None,
            programs: Vec::new(),
            distill_agreements: Vec::new(),
        },
    }
}

fn run_single_seed(
    cfg: &ExperimentConfig,
    prepared: &PreparedData,
    out: &Path,
    seed: u64,
) -> Result<SeedSummary, CliError> {
    let seed_dir = out.join(format!("seed_{seed}"));
    std::fs::create_dir_all(&seed_dir).map_err(io_err(&seed_dir))?;

    let outcome = synthesize_k_programs::<Scalar>(
        &prepared.splits,
        &prepared.grammar,
        &cfg.train,
        &cfg.synthesis,
        cfg.run.k,
        seed,
    )?;

    let schema = &prepared.splits.train.schema;
    let mut program_texts = Vec::new();
    for (i, p) in outcome.programs.iter().enumerate() {
        let text = pretty_print(&p.arch, &p.params, schema)?;
        let path = seed_dir.join(format!("program_{}.txt", i + 1));
        std::fs::write(&path, format!("{text}\n")).map_err(io_err(&path))?;
        program_texts.push(text);
    }

    let log_path = seed_dir.join("synthesis_log.jsonl");
    {
        let file = std::fs::File::create(&log_path).map_err(io_err(&log_path))?;
        let mut w = std::io::BufWriter::new(file);
        for log in &outcome.logs {
            for rec in &log.deepenings {
                let line = serde_json::to_string(rec).expect("serializable record");
                writeln!(w, "{line}").map_err(io_err(&log_path))?;
            }
        }
    }

    for (round, histories) in outcome.histories.iter().enumerate() {
        for (t, h) in histories.iter().enumerate() {
            let path = seed_dir.join(format!("history_r{}_t{}.csv", round + 1, t + 1));
            std::fs::write(&path, h.to_csv()).map_err(io_err(&path))?;
        }
    }

    let mut sections = vec![
        ("encoder", &outcome.model.encoder.params),
        ("decoder", &outcome.model.decoder.params),
    ];
    if let Some(adv) = &outcome.model.adversary {
        sections.push(("adversary", &adv.params));
    }
    save_checkpoint(&seed_dir.join("checkpoint.json"), &sections)?;

    let pairs: Vec<(Architecture, ParameterStore<Scalar>)> = outcome
        .programs
        .iter()
        .map(|p| (p.arch.clone(), p.params.clone()))
        .collect();
    let clustering = assign_clusters(
        &pairs,
        &prepared.splits.test,
        cfg.synthesis.ite_temperature,
    )?;
    let labels = prepared.splits.test.labels();
    if labels.len() != prepared.splits.test.len() {
        return Err(CliError::Config(
            "test split must be fully labeled for evaluation".into(),
        ));
    }
    let metrics = report(&clustering, &labels)?;
    write_json(&seed_dir.join("metrics.json"), &metrics)?;

    Ok(SeedSummary {
        seed,
        status: "ok".into(),
        metrics: Some(metrics),
        programs: program_texts,
        distill_agreements: outcome.distill_agreements,
    })
}

/// Load `program_*.txt` files in learning order.
pub fn load_programs(
    dir: &Path,
    grammar: &Grammar,
    schema: &FeatureSchema,
) -> Result<Vec<(Architecture, ParameterStore<Scalar>)>, CliError> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("program_") && n.ends_with(".txt"))
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(CliError::Config(format!(
            "no program_*.txt files in {}",
            dir.display()
        )));
    }
    names
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(io_err(p))?;
            parse_program::<Scalar>(text.trim(), grammar, schema).map_err(CliError::from)
        })
        .collect()
}

/// `eval`: score saved programs against the labeled test split.
pub fn cmd_eval(
    config_path: &Path,
    programs_dir: &Path,
    out: Option<&Path>,
) -> Result<MetricsReport, CliError> {
    let cfg = ExperimentConfig::load(config_path)?;
    let prepared = prepare_data(&cfg)?;
    let programs = load_programs(programs_dir, &prepared.grammar, &prepared.splits.test.schema)?;
    let clustering = assign_clusters(
        &programs,
        &prepared.splits.test,
        cfg.synthesis.ite_temperature,
    )?;
    let labels = prepared.splits.test.labels();
    if labels.len() != prepared.splits.test.len() {
        return Err(CliError::Config(
            "test split must be fully labeled for evaluation".into(),
        ));
    }
    let metrics = report(&clustering, &labels)?;
    let text = serde_json::to_string_pretty(&metrics).expect("serializable");
    println!("{text}");
    if let Some(path) = out {
        std::fs::write(path, text).map_err(io_err(path))?;
    }
    Ok(metrics)
}

/// `show-program`: pretty text plus a glossary of the channels it reads.
pub fn cmd_show_program(config_path: &Path, file: &Path) -> Result<String, CliError> {
    let cfg = ExperimentConfig::load(config_path)?;
    let prepared = prepare_data(&cfg)?;
    let schema = &prepared.splits.test.schema;
    let text = std::fs::read_to_string(file).map_err(io_err(file))?;
    let (arch, params) = parse_program::<Scalar>(text.trim(), &prepared.grammar, schema)?;
    let rendered = pretty_print(&arch, &params, schema)?;

    let mut used: Vec<usize> = arch
        .nodes()
        .into_iter()
        .flat_map(|(_, n)| match &n.kind {
            crate::dsl::NodeKind::AffineLib { channels }
            | crate::dsl::NodeKind::Select { channels } => channels.clone(),
            _ => Vec::new(),
        })
        .collect();
    used.sort_unstable();
    used.dedup();
    let mut out = format!("{rendered}\n\nfeatures:\n");
    for c in used {
        out.push_str(&format!("  {} (channel {c})\n", schema.names()[c]));
    }
    println!("{out}");
    Ok(out)
}

/// Two-dimensional principal-component projection: returns per-point
/// `[pc1, pc2]` scores and the two leading eigenvalues.
pub fn pca_2d(points: &[Vec<f64>]) -> (Vec<[f64; 2]>, [f64; 2]) {
    let n = points.len();
    assert!(n > 0, "empty point set");
    let d = points[0].len();
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![vec![0.0; d]; d];
    for p in points {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (p[i] - mean[i]) * (p[j] - mean[j]);
            }
        }
    }
    for row in &mut cov {
        for v in row.iter_mut() {
            *v /= n as f64;
        }
    }
    let (eigvals, eigvecs) = jacobi_eigen(&cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigvals[b].partial_cmp(&eigvals[a]).unwrap());
    let mut components = Vec::with_capacity(2);
    for &idx in order.iter().take(2) {
        let mut v: Vec<f64> = (0..d).map(|r| eigvecs[r][idx]).collect();
        // Deterministic sign: largest-magnitude entry positive.
        let lead = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        if v[lead] < 0.0 {
            for x in &mut v {
                *x = -*x;
            }
        }
        components.push(v);
    }
    while components.len() < 2 {
        components.push(vec![0.0; d]);
    }
    let scores = points
        .iter()
        .map(|p| {
            let centered: Vec<f64> = p.iter().zip(&mean).map(|(v, m)| v - m).collect();
            [
                centered.iter().zip(&components[0]).map(|(a, b)| a * b).sum(),
                centered.iter().zip(&components[1]).map(|(a, b)| a * b).sum(),
            ]
        })
        .collect();
    let l1 = if d > 0 { eigvals[order[0]] } else { 0.0 };
    let l2 = if d > 1 { eigvals[order[1]] } else { 0.0 };
    (scores, [l1, l2])
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix; returns
/// (eigenvalues, eigenvector columns).
fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut v = vec![vec![0.0; d]; d];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..d {
            for j in (i + 1)..d {
                off += m[i][j] * m[i][j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                if m[p][q].abs() < 1e-18 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for k in 0..d {
                    let (vkp, vkq) = (v[k][p], v[k][q]);
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig = (0..d).map(|i| m[i][i]).collect();
    (eig, v)
}

/// `export-latents`: CSV with the neural latent, its 2-D principal-component
/// projection, the symbolic bits, the cluster id, and the label for every
/// test trajectory.
pub fn cmd_export_latents(
    config_path: &Path,
    checkpoint: &Path,
    programs_dir: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config_path)?;
    let prepared = prepare_data(&cfg)?;
    let schema = &prepared.splits.test.schema;
    let programs = load_programs(programs_dir, &prepared.grammar, schema)?;
    let k = programs.len();

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    use rand::SeedableRng as _;
    let mut model = VaeModel::<Scalar>::new(prepared.splits.test.raw_dim, k, &cfg.train, &mut rng);
    let mut sections = vec![
        ("encoder", &mut model.encoder.params),
        ("decoder", &mut model.decoder.params),
    ];
    if let Some(adv) = model.adversary.as_mut() {
        sections.push(("adversary", &mut adv.params));
    }
    load_checkpoint(checkpoint, &mut sections)?;

    let ds: &Dataset<Scalar> = &prepared.splits.test;
    let mut zs: Vec<Vec<f64>> = Vec::with_capacity(ds.len());
    for item in &ds.items {
        let (mu, _) = model.encoder.encode(item, schema.dim());
        zs.push(mu);
    }
    let (projected, _eigvals) = pca_2d(&zs);
    let clustering = assign_clusters(&programs, ds, cfg.synthesis.ite_temperature)?;

    let file = std::fs::File::create(out).map_err(io_err(out))?;
    let mut w = std::io::BufWriter::new(file);
    let z_dim = cfg.train.z_dim;
    let mut header = String::from("index");
    for i in 0..z_dim {
        header.push_str(&format!(",z{i}"));
    }
    header.push_str(",pc1,pc2");
    for i in 0..k {
        header.push_str(&format!(",bit{i}"));
    }
    header.push_str(",cluster,label");
    writeln!(w, "{header}").map_err(io_err(out))?;
    let empty = crate::nets::StandinSet::empty();
    for (i, item) in ds.items.iter().enumerate() {
        let mut row = format!("{i}");
        for v in &zs[i] {
            row.push_str(&format!(",{v}"));
        }
        row.push_str(&format!(",{},{}", projected[i][0], projected[i][1]));
        for (arch, params) in &programs {
            let logit = crate::dsl::evaluate_logit(
                arch,
                params,
                &empty,
                item,
                schema,
                cfg.synthesis.ite_temperature,
            )?;
            row.push_str(if logit > 0.0 { ",1" } else { ",0" });
        }
        row.push_str(&format!(
            ",{},{}",
            clustering.ids[i],
            item.label.map(|l| l.to_string()).unwrap_or_default()
        ));
        writeln!(w, "{row}").map_err(io_err(out))?;
    }
    println!("wrote {} rows to {}", ds.len(), out.display());
    Ok(())
}
