//! The epoch loop: pairwise self-supervised training with seeded
//! shuffling, per-epoch validation, best-checkpoint retention, and
//! bit-reproducible resume.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use pointkey_core::data::{fresh_pair, make_pair};
use pointkey_core::loss::PairSample;
use pointkey_core::model::{self, init_params};
use pointkey_core::optim::AdamState;
use pointkey_core::rng::SeedStream;
use pointkey_core::train::{
    batch_gradients, gradient_gate, pair_loss, reduce_and_apply, TrainConfig,
};

use crate::checkpoint::{Checkpoint, RngStateJson};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::manifest::{LoadedDataset, Split};

const EPOCH_STREAM_TAG: u64 = 0x65706f6368;
const VAL_STREAM_TAG: u64 = 0x76616c;
const GATE_SEEDS: u64 = 3;
const GATE_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Default)]
pub struct TermsJson {
    pub separation: f64,
    pub shape: f64,
    pub volume: f64,
    pub overlap: f64,
    pub chamfer: f64,
    pub consistency: f64,
    pub pose: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: u64,
    pub train_total: f64,
    pub val_total: f64,
    pub terms: TermsJson,
    pub wall_ms: u64,
}

pub struct FitOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub best_epoch: u64,
    pub log: Vec<EpochRecord>,
}

/// Builds this epoch's training pairs: a shuffled pass over the train
/// split, one pair per object, all draws from the epoch's derived stream.
fn epoch_pairs(
    dataset: &LoadedDataset,
    train: &[usize],
    cfg: &TrainConfig,
    epoch: u64,
) -> Result<Vec<PairSample>> {
    let bank = dataset.bank()?;
    let mut stream = SeedStream::derive(cfg.seed, &[EPOCH_STREAM_TAG, epoch]);
    let mut order = train.to_vec();
    stream.shuffle(&mut order);
    order
        .into_iter()
        .map(|obj| {
            if cfg.fresh_rotations {
                Ok(fresh_pair(&dataset.clouds[obj], &mut stream))
            } else {
                make_pair(&dataset.clouds[obj], obj, &bank, &mut stream).map_err(CliError::from)
            }
        })
        .collect()
}

/// Fixed validation pairs (stable across epochs, derived from the run
/// seed), evaluated with frozen batchnorm statistics.
fn validation_loss(
    params: &pointkey_core::model::NetworkParams,
    dataset: &LoadedDataset,
    val: &[usize],
    cfg: &TrainConfig,
) -> Result<f64> {
    if val.is_empty() {
        return Ok(f64::NAN);
    }
    let bank = dataset.bank()?;
    let totals = val
        .par_iter()
        .map(|&obj| {
            let mut stream = SeedStream::derive(cfg.seed, &[VAL_STREAM_TAG, obj as u64]);
            let sample = make_pair(&dataset.clouds[obj], obj, &bank, &mut stream)?;
            let terms = pair_loss(params, &sample, cfg, model::Mode::Eval)?;
            Ok::<f64, CliError>(terms.total)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(totals.iter().sum::<f64>() / totals.len() as f64)
}

/// Runs the fit loop. `on_epoch` fires after every epoch with the record
/// that also lands in the returned log.
pub fn fit(
    dataset: &LoadedDataset,
    run_cfg: &RunConfig,
    resume: Option<Checkpoint>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<FitOutcome> {
    let net_cfg = run_cfg.net.resolve()?;
    let cfg = run_cfg.train.resolve()?;
    let train = dataset.split_indices(Split::Train)?;
    let val = dataset.split_indices(Split::Val)?;
    if train.is_empty() {
        return Err(CliError::Data("training split is empty".into()));
    }

    // gradient-correctness gate: the objective's tape gradients must match
    // finite differences before any fitting starts
    if !cfg.skip_gradcheck {
        gradient_gate(&cfg, GATE_SEEDS, GATE_TOLERANCE).map_err(CliError::from)?;
    }

    let (mut params, mut adam, start_epoch) = match resume {
        Some(ckpt) => {
            ckpt.validate_against(&net_cfg)?;
            let start = ckpt.rng.next_epoch;
            (ckpt.params, ckpt.adam, start)
        }
        None => {
            let params = init_params(&net_cfg, cfg.seed)?;
            let adam = AdamState::new(&params.params);
            (params, adam, 0)
        }
    };

    let mut best_val = f64::INFINITY;
    let mut best: Option<(Checkpoint, u64)> = None;
    let mut log = Vec::new();

    for epoch in start_epoch..cfg.epochs as u64 {
        let started = Instant::now();
        let pairs = epoch_pairs(dataset, &train, &cfg, epoch)?;

        let mut terms_sum = pointkey_core::train::TermValues::default();
        let mut n_pairs = 0usize;
        for batch in pairs.chunks(cfg.batch_size) {
            let chunks: Vec<&[PairSample]> = batch.chunks(cfg.tape_pairs.max(1)).collect();
            let results = if cfg.deterministic {
                chunks
                    .iter()
                    .map(|c| batch_gradients(&params, c, &cfg))
                    .collect::<std::result::Result<Vec<_>, _>>()
            } else {
                chunks
                    .par_iter()
                    .map(|c| batch_gradients(&params, c, &cfg))
                    .collect::<std::result::Result<Vec<_>, _>>()
            }
            .map_err(CliError::from)?;
            let stats =
                reduce_and_apply(&mut params, &mut adam, results, &cfg).map_err(CliError::from)?;
            let mut weighted = stats.terms;
            {
                // convert batch means back to sums for epoch averaging
                let w = batch.len() as f64;
                weighted.scale_by(w);
            }
            terms_sum.add_from(&weighted);
            n_pairs += batch.len();
        }
        let mut epoch_terms = terms_sum;
        epoch_terms.scale_by(1.0 / n_pairs as f64);

        let val_total = validation_loss(&params, dataset, &val, &cfg)?;
        let record = EpochRecord {
            epoch,
            train_total: epoch_terms.total,
            val_total,
            terms: TermsJson {
                separation: epoch_terms.separation,
                shape: epoch_terms.shape,
                volume: epoch_terms.volume,
                overlap: epoch_terms.overlap,
                chamfer: epoch_terms.chamfer,
                consistency: epoch_terms.consistency,
                pose: epoch_terms.pose,
            },
            wall_ms: started.elapsed().as_millis() as u64,
        };
        on_epoch(&record);
        log.push(record);

        if val_total.is_nan() || val_total < best_val {
            if !val_total.is_nan() {
                best_val = val_total;
            }
            best = Some((
                Checkpoint {
                    params: params.clone(),
                    adam: adam.clone(),
                    epoch,
                    best_val_loss: best_val,
                    rng: RngStateJson {
                        seed: cfg.seed,
                        next_epoch: epoch + 1,
                    },
                    config: run_cfg.clone(),
                },
                epoch,
            ));
        }
    }

    let last = Checkpoint {
        params,
        adam,
        epoch: cfg.epochs as u64 - 1,
        best_val_loss: best_val,
        rng: RngStateJson {
            seed: cfg.seed,
            next_epoch: cfg.epochs as u64,
        },
        config: run_cfg.clone(),
    };
    let (best, best_epoch) = best.unwrap_or_else(|| (last.clone(), last.epoch));
    Ok(FitOutcome {
        best,
        last,
        best_epoch,
        log,
    })
}
