//! Program synthesis: alternating VAE training with one-level program
//! deepening, and the greedy loop that learns k programs.
//!
//! Each deepening distills the current encoder into every child of the
//! program graph: children train against the labels the current encoder
//! assigns, nonterminals filled by neural stand-ins, and the child with the
//! lowest `structural_cost + validation BCE` is committed. Heuristics are
//! recomputed from scratch at every deepening; label distributions shift
//! between iterations, so nothing from earlier scoring rounds is reused.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataSplits, Dataset};
use crate::dsl::{
    enumerate_children, evaluate, lift_frames, lift_program, structural_cost, Architecture,
    DslError, Grammar, ParameterStore,
};
use crate::grad::{Tape, Value};
use crate::nets::{StandinConfig, StandinSet};
use crate::num::Real;
use crate::params::Adam;
use crate::vae::{train, ProgramEncoder, TrainConfig, TrainHistory, VaeError, VaeModel};

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("no admissible children: depth exhausted with nonterminals remaining")]
    NoAdmissibleChildren,
    #[error("program graph exhausted after {achieved} distinct programs (wanted {wanted})")]
    GrammarExhausted { achieved: usize, wanted: usize },
    #[error("deepening budget exceeded: {deepenings} deepenings for max depth {max_depth}")]
    DepthBudget { deepenings: usize, max_depth: usize },
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error(transparent)]
    Dsl(#[from] DslError),
}

/// Program-learning hyperparameters. `neural_epochs` trains children that
/// still contain stand-ins (the neural heuristic); `symbolic_epochs` trains
/// fully symbolic children.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    pub max_depth: usize,
    pub structural_penalty: f64,
    pub neural_epochs: usize,
    pub symbolic_epochs: usize,
    /// Cap on the ranked candidate list retained in the synthesis log;
    /// every child is still scored.
    pub frontier_size: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub standin: StandinConfig,
    pub ite_temperature: f64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            max_depth: 2,
            structural_penalty: 0.01,
            neural_epochs: 10,
            symbolic_epochs: 10,
            frontier_size: 30,
            learning_rate: 2e-4,
            batch_size: 32,
            standin: StandinConfig::default(),
            ite_temperature: 4.0,
        }
    }
}

/// Hard labels the current encoder assigns to the train and validation
/// splits (`1[logit > 0]`).
#[derive(Debug, Clone, PartialEq)]
pub struct DistillationSet {
    pub train_labels: Vec<u8>,
    pub val_labels: Vec<u8>,
}

/// Label both splits with the current (possibly partial) program.
pub fn make_distillation_set<F: Real>(
    current: &ProgramEncoder<F>,
    splits: &DataSplits<F>,
    ite_temperature: F,
) -> Result<DistillationSet, SynthesisError> {
    let label_split = |ds: &Dataset<F>| -> Result<Vec<u8>, SynthesisError> {
        ds.items
            .iter()
            .map(|x| {
                let logit = crate::dsl::evaluate_logit(
                    &current.arch,
                    &current.params,
                    &current.standins,
                    x,
                    &ds.schema,
                    ite_temperature,
                )?;
                Ok((logit > F::zero()) as u8)
            })
            .collect()
    };
    Ok(DistillationSet {
        train_labels: label_split(&splits.train)?,
        val_labels: label_split(&splits.val)?,
    })
}

/// A trained candidate child.
#[derive(Debug, Clone)]
pub struct ScoredChild<F: Real> {
    pub arch: Architecture,
    pub params: ParameterStore<F>,
    pub standins: StandinSet<F>,
    pub val_bce: f64,
    pub structural_cost: f64,
    pub heuristic: f64,
}

/// Train a child's parameters and stand-ins on the distillation labels and
/// score it: `heuristic = structural_cost + validation BCE`. Divergence
/// reports an infinite heuristic instead of failing the search.
pub fn score_child<F: Real>(
    child: &Architecture,
    dset: &DistillationSet,
    splits: &DataSplits<F>,
    cfg: &SynthesisConfig,
    seed: u64,
) -> Result<ScoredChild<F>, SynthesisError> {
    let schema = &splits.train.schema;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParameterStore::init(child, &mut rng);
    let mut standins = StandinSet::for_architecture(child, schema.dim(), &cfg.standin, &mut rng);
    let epochs = if child.is_complete() {
        cfg.symbolic_epochs
    } else {
        cfg.neural_epochs
    };
    let beta = F::of(cfg.ite_temperature);

    let mut array_lens: Vec<usize> = params.entries().map(|(_, v)| v.len()).collect();
    for (_, s) in standins.iter() {
        array_lens.extend(s.params().iter().map(|a| a.data.len()));
    }
    let mut adam = Adam::new(F::of(cfg.learning_rate), &array_lens);

    let n = splits.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut diverged = false;

    'training: for _epoch in 0..epochs {
        for i in (1..order.len()).rev() {
            use rand::Rng as _;
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let lifted = lift_program(&mut tape, child, &params, &standins, schema)?;
            let mut wrt = lifted.param_values();
            wrt.extend(lifted.standin_values());

            let mut acc: Option<Value> = None;
            for &i in chunk {
                let item = &splits.train.items[i];
                let frames = lift_frames(&mut tape, item, schema)?;
                let logit = evaluate(&mut tape, child, &lifted, &frames, beta)?;
                let bce = bce_with_logit(&mut tape, logit, dset.train_labels[i]);
                acc = Some(match acc {
                    Some(a) => tape.add(a, bce),
                    None => bce,
                });
            }
            let loss = acc.expect("nonempty chunk");
            let loss = tape.scale(loss, F::one() / F::of(chunk.len() as f64));
            if !tape.scalar_value(loss).as_f64().is_finite() {
                diverged = true;
                break 'training;
            }
            let grads = tape.backward(loss, &wrt).expect("scalar loss");
            let mut arrays: Vec<&mut [F]> = Vec::new();
            for (_, v) in params.entries_mut() {
                arrays.push(v.as_mut_slice());
            }
            for (_, s) in standins.iter_mut() {
                for a in s.params_mut().iter_mut() {
                    arrays.push(a.data.as_mut_slice());
                }
            }
            adam.step(&mut arrays, &grads, Some(F::of(5.0)));
        }
    }

    let cost = structural_cost(child, cfg.structural_penalty);
    let val_bce = if diverged {
        f64::INFINITY
    } else {
        validation_bce(child, &params, &standins, splits, &dset.val_labels, beta)?
    };
    let heuristic = if val_bce.is_finite() {
        cost + val_bce
    } else {
        f64::INFINITY
    };
    Ok(ScoredChild {
        arch: child.clone(),
        params,
        standins,
        val_bce,
        structural_cost: cost,
        heuristic,
    })
}

fn bce_with_logit<F: Real>(tape: &mut Tape<F>, logit: Value, label: u8) -> Value {
    // softplus(l) - y*l is the stable form of -[y ln s(l) + (1-y) ln(1-s(l))]
    let sp = tape.softplus(logit);
    if label == 0 {
        sp
    } else {
        let yl = tape.scale(logit, F::of(label as f64));
        tape.sub(sp, yl)
    }
}

fn validation_bce<F: Real>(
    arch: &Architecture,
    params: &ParameterStore<F>,
    standins: &StandinSet<F>,
    splits: &DataSplits<F>,
    labels: &[u8],
    beta: F,
) -> Result<f64, SynthesisError> {
    let schema = &splits.val.schema;
    let mut total = 0.0f64;
    let mut tape = Tape::new();
    let lifted = lift_program(&mut tape, arch, params, standins, schema)?;
    for (item, &y) in splits.val.items.iter().zip(labels) {
        let frames = lift_frames(&mut tape, item, schema)?;
        let logit = evaluate(&mut tape, arch, &lifted, &frames, beta)?;
        let bce = bce_with_logit(&mut tape, logit, y);
        total += tape.scalar_value(bce).as_f64();
    }
    Ok(total / splits.val.len().max(1) as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub text: String,
    pub firings: usize,
    pub depth: usize,
    pub complete: bool,
    pub structural_cost: f64,
    pub val_bce: f64,
    pub heuristic: f64,
}

/// One JSON record per deepening: the ranked candidate list (capped at the
/// frontier size) and the committed winner.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeepeningRecord {
    pub round: usize,
    pub iteration: usize,
    pub candidates: Vec<CandidateRecord>,
    pub winner_text: String,
    pub winner_firings: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SynthesisLog {
    pub deepenings: Vec<DeepeningRecord>,
}

/// Score every admissible child of the current program and commit the one
/// with the minimum heuristic; ties break on fewer firings, then rule order.
#[allow(clippy::too_many_arguments)]
pub fn deepen_once<F: Real>(
    current: &ProgramEncoder<F>,
    grammar: &Grammar,
    dset: &DistillationSet,
    splits: &DataSplits<F>,
    cfg: &SynthesisConfig,
    excluded: &[Architecture],
    seed: u64,
    round: usize,
    iteration: usize,
) -> Result<(ProgramEncoder<F>, DeepeningRecord), SynthesisError> {
    let children = enumerate_children(&current.arch, grammar, cfg.max_depth)?;
    let admissible: Vec<Architecture> = children
        .into_iter()
        .filter(|c| !(c.is_complete() && excluded.iter().any(|e| e.structural_eq(c))))
        .collect();
    if admissible.is_empty() {
        return Err(SynthesisError::NoAdmissibleChildren);
    }

    let mut scored: Vec<(usize, ScoredChild<F>)> = Vec::with_capacity(admissible.len());
    for (idx, child) in admissible.iter().enumerate() {
        let s = score_child(child, dset, splits, cfg, seed + idx as u64)?;
        scored.push((idx, s));
    }

    // Rank by heuristic, then fewer firings, then rule (enumeration) order.
    let mut ranked: Vec<usize> = (0..scored.len()).collect();
    ranked.sort_by(|&a, &b| {
        let (ia, sa) = &scored[a];
        let (ib, sb) = &scored[b];
        sa.heuristic
            .partial_cmp(&sb.heuristic)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(sa.arch.firings().cmp(&sb.arch.firings()))
            .then(ia.cmp(ib))
    });

    let schema = &splits.train.schema;
    let candidates: Vec<CandidateRecord> = ranked
        .iter()
        .take(cfg.frontier_size.max(1))
        .map(|&i| {
            let s = &scored[i].1;
            CandidateRecord {
                text: crate::dsl::to_text_lossy(&s.arch, &s.params, schema),
                firings: s.arch.firings(),
                depth: s.arch.depth(),
                complete: s.arch.is_complete(),
                structural_cost: s.structural_cost,
                val_bce: s.val_bce,
                heuristic: s.heuristic,
            }
        })
        .collect();

    let winner = scored.swap_remove(ranked[0]).1;
    let record = DeepeningRecord {
        round,
        iteration,
        winner_text: candidates[0].text.clone(),
        winner_firings: winner.arch.firings(),
        candidates,
    };
    let program = ProgramEncoder {
        arch: winner.arch,
        params: winner.params,
        standins: winner.standins,
        frozen: false,
    };
    Ok((program, record))
}

/// Result of one Algorithm-1 run: the completed program, the audit log, the
/// training histories (one per VAE training call), and the fraction of the
/// final distillation set the committed program agrees with on train.
#[derive(Debug)]
pub struct SynthesisOutcome<F: Real> {
    pub program: ProgramEncoder<F>,
    pub log: SynthesisLog,
    pub histories: Vec<TrainHistory>,
    pub deepenings: usize,
    pub distill_agreement: f64,
}

/// Learn one neurosymbolic encoder: alternate VAE training (architecture
/// fixed) with one-level deepening until the program is complete, then train
/// once more with the complete architecture pinned.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_program<F: Real>(
    splits: &DataSplits<F>,
    model: &mut VaeModel<F>,
    fixed: &[ProgramEncoder<F>],
    grammar: &Grammar,
    train_cfg: &TrainConfig,
    syn_cfg: &SynthesisConfig,
    excluded: &[Architecture],
    seed: u64,
    round: usize,
) -> Result<SynthesisOutcome<F>, SynthesisError> {
    let schema = &splits.train.schema;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut active = ProgramEncoder::empty(grammar, schema, &syn_cfg.standin, &mut rng);
    let mut log = SynthesisLog::default();
    let mut histories = Vec::new();
    let mut deepenings = 0usize;
    let beta = F::of(syn_cfg.ite_temperature);
    let mut last_dset: Option<DistillationSet> = None;

    let mut all: Vec<ProgramEncoder<F>> = fixed.to_vec();
    for p in &mut all {
        p.frozen = true;
    }
    all.push(active.clone());

    while !all.last().unwrap().is_complete() {
        let train_seed = seed
            .wrapping_add(100 * (deepenings as u64))
            .wrapping_add(1);
        histories.push(train(splits, model, &mut all, train_cfg, train_seed)?);

        active = all.pop().unwrap();
        let dset = make_distillation_set(&active, splits, beta)?;
        let deepen_seed = seed.wrapping_add(1000 * (deepenings as u64 + 1));
        let (next, record) = deepen_once(
            &active, grammar, &dset, splits, syn_cfg, excluded, deepen_seed, round, deepenings,
        )?;
        log.deepenings.push(record);
        last_dset = Some(dset);
        deepenings += 1;
        if deepenings > syn_cfg.max_depth {
            return Err(SynthesisError::DepthBudget {
                deepenings,
                max_depth: syn_cfg.max_depth,
            });
        }
        all.push(next);
    }

    // Final training with the complete architecture fixed; parameters keep
    // learning jointly with the encoder and decoder.
    let final_seed = seed.wrapping_add(100 * (deepenings as u64)).wrapping_add(1);
    histories.push(train(splits, model, &mut all, train_cfg, final_seed)?);
    let program = all.pop().unwrap();

    // Fidelity against the distillation labels that selected it.
    let distill_agreement = match &last_dset {
        Some(dset) => {
            let mut agree = 0usize;
            for (item, &y) in splits.train.items.iter().zip(&dset.train_labels) {
                let logit = crate::dsl::evaluate_logit(
                    &program.arch,
                    &program.params,
                    &program.standins,
                    item,
                    schema,
                    beta,
                )?;
                if ((logit > F::zero()) as u8) == y {
                    agree += 1;
                }
            }
            agree as f64 / splits.train.len().max(1) as f64
        }
        None => f64::NAN,
    };

    Ok(SynthesisOutcome {
        program,
        log,
        histories,
        deepenings,
        distill_agreement,
    })
}

#[derive(Debug)]
pub struct KProgramsOutcome<F: Real> {
    pub programs: Vec<ProgramEncoder<F>>,
    pub model: VaeModel<F>,
    pub logs: Vec<SynthesisLog>,
    pub histories: Vec<Vec<TrainHistory>>,
    pub distill_agreements: Vec<f64>,
}

/// Greedy Algorithm-2 loop: learn k programs one at a time, freezing earlier
/// winners (architecture and parameters) and excluding their architectures
/// from later enumeration. The encoder/decoder/adversary are reinitialized
/// each round with one more bit of symbolic latent.
pub fn synthesize_k_programs<F: Real>(
    splits: &DataSplits<F>,
    grammar: &Grammar,
    train_cfg: &TrainConfig,
    syn_cfg: &SynthesisConfig,
    k: usize,
    seed: u64,
) -> Result<KProgramsOutcome<F>, SynthesisError> {
    assert!(k >= 1, "need at least one program");
    let mut fixed: Vec<ProgramEncoder<F>> = Vec::new();
    let mut logs = Vec::new();
    let mut histories = Vec::new();
    let mut agreements = Vec::new();
    let mut model = None;

    for round in 0..k {
        let round_seed = seed.wrapping_add(10_000 * round as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(round_seed.wrapping_add(7));
        let mut round_model =
            VaeModel::new(splits.train.raw_dim, fixed.len() + 1, train_cfg, &mut rng);
        let excluded: Vec<Architecture> = fixed.iter().map(|p| p.arch.clone()).collect();
        let outcome = match synthesize_program(
            splits,
            &mut round_model,
            &fixed,
            grammar,
            train_cfg,
            syn_cfg,
            &excluded,
            round_seed,
            round,
        ) {
            Ok(o) => o,
            Err(SynthesisError::NoAdmissibleChildren) => {
                return Err(SynthesisError::GrammarExhausted {
                    achieved: round,
                    wanted: k,
                })
            }
            Err(e) => return Err(e),
        };
        let mut program = outcome.program;
        program.frozen = true;
        fixed.push(program);
        logs.push(outcome.log);
        histories.push(outcome.histories);
        agreements.push(outcome.distill_agreement);
        model = Some(round_model);
    }

    Ok(KProgramsOutcome {
        programs: fixed,
        model: model.expect("k >= 1"),
        logs,
        histories,
        distill_agreements: agreements,
    })
}
