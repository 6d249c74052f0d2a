//! Trajectory datasets: the synthetic generator, JSONL ingestion, and
//! derived feature channels.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::FeatureSchema;
use crate::num::Real;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },
    #[error("derived channel `{0}` collides with an existing channel")]
    NameCollision(String),
    #[error("derived channel references unknown source `{0}`")]
    UnknownSource(String),
    #[error(transparent)]
    Schema(#[from] crate::dsl::DslError),
}

/// Bookkeeping the generator keeps per trajectory so tests can check the
/// dynamics exactly; models never see it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticMeta<F> {
    /// Post-force velocity, fixed for the whole trajectory.
    pub velocity: [F; 2],
    pub force_x: bool,
    pub force_y: bool,
}

/// Fixed-length sequence of per-timestep feature vectors, stored row-major
/// `T x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<F> {
    pub features: Vec<F>,
    pub label: Option<u32>,
    pub meta: Option<SyntheticMeta<F>>,
}

impl<F: Real> Trajectory<F> {
    pub fn frame(&self, t: usize, dim: usize) -> &[F] {
        &self.features[t * dim..(t + 1) * dim]
    }
}

/// Trajectories plus their schema. The first `raw_dim` channels are what the
/// neural encoder/decoder see; channels past that are derived and visible to
/// programs only.
#[derive(Debug, Clone)]
pub struct Dataset<F> {
    pub schema: FeatureSchema,
    pub raw_dim: usize,
    pub items: Vec<Trajectory<F>>,
}

impl<F: Real> Dataset<F> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<u32> {
        self.items.iter().filter_map(|t| t.label).collect()
    }
}

#[derive(Debug, Clone)]
pub struct DataSplits<F> {
    pub train: Dataset<F>,
    pub val: Dataset<F>,
    pub test: Dataset<F>,
}

/// Synthetic trajectory generator settings. Positions start near
/// `initial_mean`; a per-axis force of `force_magnitude` pushes in the
/// positive or negative direction according to two fair coin flips, which
/// define the 4-way ground-truth label `2*c_x + c_y`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub trajectory_length: usize,
    pub initial_mean: [f64; 2],
    pub initial_std: [f64; 2],
    pub velocity_min_norm: f64,
    pub velocity_max_norm: f64,
    pub force_magnitude: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_train: 10_000,
            n_val: 2_000,
            n_test: 2_000,
            trajectory_length: 25,
            initial_mean: [10.0, 10.0],
            initial_std: [1.0, 1.0],
            velocity_min_norm: 0.05,
            velocity_max_norm: 0.4,
            force_magnitude: 0.4,
            noise_scale: 0.2,
            seed: 7,
        }
    }
}

pub fn synthetic_schema(trajectory_length: usize) -> FeatureSchema {
    FeatureSchema::new(vec!["x".into(), "y".into()], trajectory_length)
        .expect("static schema is valid")
}

/// Generate train/val/test splits from one seeded stream, so a fixed seed
/// reproduces the dataset bitwise.
pub fn generate_synthetic<F: Real>(cfg: &SyntheticConfig) -> DataSplits<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let schema = synthetic_schema(cfg.trajectory_length);
    let mut gen_split = |n: usize| -> Dataset<F> {
        let items = (0..n).map(|_| generate_one(cfg, &mut rng)).collect();
        Dataset {
            schema: schema.clone(),
            raw_dim: 2,
            items,
        }
    };
    let train = gen_split(cfg.n_train);
    let val = gen_split(cfg.n_val);
    let test = gen_split(cfg.n_test);
    DataSplits { train, val, test }
}

fn generate_one<F: Real>(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Trajectory<F> {
    let t_len = cfg.trajectory_length;
    let mut x = cfg.initial_mean[0] + cfg.initial_std[0] * f64::standard_normal(rng);
    let mut y = cfg.initial_mean[1] + cfg.initial_std[1] * f64::standard_normal(rng);

    // Rejection-sample the pre-force velocity onto the admissible annulus.
    let (vx, vy) = loop {
        let vx = f64::standard_normal(rng);
        let vy = f64::standard_normal(rng);
        let norm = (vx * vx + vy * vy).sqrt();
        if norm > cfg.velocity_min_norm && norm < cfg.velocity_max_norm {
            break (vx, vy);
        }
    };
    let c_x = f64::uniform_01(rng) < 0.5;
    let c_y = f64::uniform_01(rng) < 0.5;
    let vx = vx + cfg.force_magnitude * if c_x { 1.0 } else { -1.0 };
    let vy = vy + cfg.force_magnitude * if c_y { 1.0 } else { -1.0 };

    let mut features = Vec::with_capacity(t_len * 2);
    features.push(F::of(x));
    features.push(F::of(y));
    for _ in 1..t_len {
        x += vx + cfg.noise_scale * f64::standard_normal(rng);
        y += vy + cfg.noise_scale * f64::standard_normal(rng);
        features.push(F::of(x));
        features.push(F::of(y));
    }
    let label = 2 * (c_x as u32) + (c_y as u32);
    Trajectory {
        features,
        label: Some(label),
        meta: Some(SyntheticMeta {
            velocity: [F::of(vx), F::of(vy)],
            force_x: c_x,
            force_y: c_y,
        }),
    }
}

#[derive(Serialize, Deserialize)]
struct JsonlRecord {
    features: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<u32>,
}

/// One JSON record per line: `{"features": [[..]; T], "label": n}`.
pub fn save_trajectories<F: Real>(path: &Path, ds: &Dataset<F>) -> Result<(), DataError> {
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut w = std::io::BufWriter::new(file);
    let dim = ds.schema.dim();
    for item in &ds.items {
        let rec = JsonlRecord {
            features: (0..ds.schema.trajectory_length())
                .map(|t| item.frame(t, dim).iter().map(|x| x.as_f64()).collect())
                .collect(),
            label: item.label,
        };
        let line = serde_json::to_string(&rec).expect("serializable record");
        writeln!(w, "{line}").map_err(io_err)?;
    }
    Ok(())
}

/// Load and validate a JSONL trajectory file against a schema.
pub fn load_trajectories<F: Real>(
    path: &Path,
    schema: &FeatureSchema,
) -> Result<Dataset<F>, DataError> {
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io_err)?;
    let reader = std::io::BufReader::new(file);
    let mut items = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let mal = |message: String| DataError::Malformed {
            path: path.display().to_string(),
            line: i + 1,
            message,
        };
        let rec: JsonlRecord =
            serde_json::from_str(&line).map_err(|e| mal(format!("invalid JSON: {e}")))?;
        if rec.features.len() != schema.trajectory_length() {
            return Err(mal(format!(
                "expected {} timesteps, got {}",
                schema.trajectory_length(),
                rec.features.len()
            )));
        }
        let mut features = Vec::with_capacity(schema.trajectory_length() * schema.dim());
        for (t, frame) in rec.features.iter().enumerate() {
            if frame.len() != schema.dim() {
                return Err(mal(format!(
                    "timestep {t}: expected {} channels, got {}",
                    schema.dim(),
                    frame.len()
                )));
            }
            for &v in frame {
                if !v.is_finite() {
                    return Err(mal(format!("timestep {t}: non-finite value")));
                }
                features.push(F::of(v));
            }
        }
        items.push(Trajectory {
            features,
            label: rec.label,
            meta: None,
        });
    }
    Ok(Dataset {
        schema: schema.clone(),
        raw_dim: schema.dim(),
        items,
    })
}

/// Derived channel definitions: pure functions of the raw channels, one value
/// per timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ChannelDef {
    /// Broadcast the channel's final-timestep value across all timesteps.
    Final { name: String, source: String },
    /// Euclidean step length between consecutive `(x, y)` frames; the first
    /// timestep copies the second.
    Speed { name: String, x: String, y: String },
}

impl ChannelDef {
    pub fn name(&self) -> &str {
        match self {
            ChannelDef::Final { name, .. } | ChannelDef::Speed { name, .. } => name,
        }
    }
}

/// Extend every trajectory (and the schema) with derived channels.
pub fn feature_augment<F: Real>(
    ds: &Dataset<F>,
    defs: &[ChannelDef],
) -> Result<Dataset<F>, DataError> {
    let mut schema = ds.schema.clone();
    let t_len = schema.trajectory_length();

    // Resolve sources against the pre-augmentation schema and check names
    // against the growing one, so re-adding an existing definition errors.
    let mut plans: Vec<(usize, ChannelPlan)> = Vec::new();
    for def in defs {
        if schema.channel(def.name()).is_some() {
            return Err(DataError::NameCollision(def.name().to_string()));
        }
        let plan = match def {
            ChannelDef::Final { source, .. } => ChannelPlan::Final(
                ds.schema
                    .channel(source)
                    .ok_or_else(|| DataError::UnknownSource(source.clone()))?,
            ),
            ChannelDef::Speed { x, y, .. } => ChannelPlan::Speed(
                ds.schema
                    .channel(x)
                    .ok_or_else(|| DataError::UnknownSource(x.clone()))?,
                ds.schema
                    .channel(y)
                    .ok_or_else(|| DataError::UnknownSource(y.clone()))?,
            ),
        };
        schema = schema.with_channel(def.name())?;
        plans.push((schema.dim() - 1, plan));
    }

    let old_dim = ds.schema.dim();
    let new_dim = schema.dim();
    let items = ds
        .items
        .iter()
        .map(|item| {
            let mut features = vec![F::zero(); t_len * new_dim];
            for t in 0..t_len {
                features[t * new_dim..t * new_dim + old_dim]
                    .copy_from_slice(item.frame(t, old_dim));
            }
            for (slot, plan) in &plans {
                match plan {
                    ChannelPlan::Final(src) => {
                        let v = item.frame(t_len - 1, old_dim)[*src];
                        for t in 0..t_len {
                            features[t * new_dim + slot] = v;
                        }
                    }
                    ChannelPlan::Speed(cx, cy) => {
                        for t in 0..t_len {
                            let s = t.max(1);
                            let cur = item.frame(s, old_dim);
                            let prev = item.frame(s - 1, old_dim);
                            let dx = cur[*cx] - prev[*cx];
                            let dy = cur[*cy] - prev[*cy];
                            features[t * new_dim + slot] = (dx * dx + dy * dy).sqrt();
                        }
                    }
                }
            }
            Trajectory {
                features,
                label: item.label,
                meta: item.meta.clone(),
            }
        })
        .collect();

    Ok(Dataset {
        schema,
        raw_dim: ds.raw_dim,
        items,
    })
}

enum ChannelPlan {
    Final(usize),
    Speed(usize, usize),
}

/// Per-channel standardization fitted on the training split. Applied after
/// feature augmentation so derived channels are standardized too; program
/// weights and thresholds are reported in standardized units.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit<F: Real>(ds: &Dataset<F>) -> Self {
        let dim = ds.schema.dim();
        let mut mean = vec![0.0f64; dim];
        let mut count = 0usize;
        for item in &ds.items {
            for frame in item.features.chunks(dim) {
                for (m, &v) in mean.iter_mut().zip(frame) {
                    *m += v.as_f64();
                }
            }
            count += ds.schema.trajectory_length();
        }
        let count = count.max(1) as f64;
        for m in &mut mean {
            *m /= count;
        }
        let mut var = vec![0.0f64; dim];
        for item in &ds.items {
            for frame in item.features.chunks(dim) {
                for ((s, &v), m) in var.iter_mut().zip(frame).zip(&mean) {
                    let d = v.as_f64() - m;
                    *s += d * d;
                }
            }
        }
        let std = var
            .into_iter()
            .map(|s| (s / count).sqrt().max(1e-8))
            .collect();
        Normalizer { mean, std }
    }

    pub fn apply<F: Real>(&self, ds: &Dataset<F>) -> Dataset<F> {
        let dim = ds.schema.dim();
        assert_eq!(dim, self.mean.len(), "normalizer/schema dim mismatch");
        let items = ds
            .items
            .iter()
            .map(|item| {
                let features = item
                    .features
                    .chunks(dim)
                    .flat_map(|frame| {
                        frame.iter().enumerate().map(|(c, &v)| {
                            F::of((v.as_f64() - self.mean[c]) / self.std[c])
                        })
                    })
                    .collect();
                Trajectory {
                    features,
                    label: item.label,
                    meta: item.meta.clone(),
                }
            })
            .collect();
        Dataset {
            schema: ds.schema.clone(),
            raw_dim: ds.raw_dim,
            items,
        }
    }
}
