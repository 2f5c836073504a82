//! Training orchestration: the epoch loop with Adam and exponential
//! learning-rate decay, gradient clipping, AUC-monitored early stopping,
//! video-level evaluation, and the six-row ablation protocol.

use crate::data::{self, DataError, SequenceBatch, Split, VideoRecord};
use crate::losses::{self, LossBreakdown, LossError, LossWeights};
use crate::metrics::{EvalReport, MetricsError, ScoreSet, ScoredVideo};
use crate::model::{
    self, ForwardCtx, ModelArch, ModelError, ModelParams, SubspaceMode,
};
use crate::optim::{clip_grad_norm, global_grad_norm, AdamState, OptimError};
use crate::tape::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("no usable data: {0}")]
    NoData(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tape(#[from] crate::tape::TapeError),
}

/// Training hyperparameters. The defaults reproduce the reference
/// configuration: lr 1e-4 with exponential decay, batch 32, gradient clip
/// 1.0, dropout 0.1, hidden dim 128, early-stopping patience 11.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss_weights: LossWeights,
    pub lr: f64,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub dropout: f64,
    pub hidden_dim: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub subspace_mode: SubspaceMode,
    pub decay_rate: f64,
    pub heads: usize,
    pub head_hidden: usize,
    pub seq_len_visual: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss_weights: LossWeights::default(),
            lr: 1e-4,
            batch_size: 32,
            grad_clip: 1.0,
            dropout: 0.1,
            hidden_dim: 128,
            patience: 11,
            max_epochs: 300,
            seed: 0,
            subspace_mode: SubspaceMode::Full,
            decay_rate: 0.98,
            heads: 4,
            head_hidden: 1024,
            seq_len_visual: 30,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.loss_weights
            .validate()
            .map_err(TrainError::BadConfig)?;
        if self.patience < 1 {
            return Err(TrainError::BadConfig("patience must be at least 1".into()));
        }
        if self.lr <= 0.0 || self.decay_rate <= 0.0 {
            return Err(TrainError::BadConfig(
                "learning rate and decay_rate must be positive".into(),
            ));
        }
        if self.grad_clip <= 0.0 {
            return Err(TrainError::BadConfig("grad_clip must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TrainError::BadConfig("dropout must lie in [0, 1)".into()));
        }
        if self.batch_size < 1 || self.max_epochs < 1 || self.seq_len_visual < 1 {
            return Err(TrainError::BadConfig(
                "batch_size, max_epochs and seq_len_visual must be positive".into(),
            ));
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(TrainError::BadConfig(format!(
                "hidden_dim {} not divisible by {} heads",
                self.hidden_dim, self.heads
            )));
        }
        // The invariant-only variant has no specific representations, so an
        // orthogonality weight cannot act on it.
        if self.subspace_mode == SubspaceMode::InvariantOnly && self.loss_weights.beta > 0.0 {
            return Err(TrainError::BadConfig(
                "beta > 0 requires specific representations; use beta = 0 with invariant_only"
                    .into(),
            ));
        }
        Ok(())
    }

    fn arch_for(&self, d_audio: usize, d_visual: usize) -> ModelArch {
        ModelArch {
            d_audio,
            d_visual,
            hidden: self.hidden_dim,
            heads: self.heads,
            head_hidden: self.head_hidden,
            subspace_mode: self.subspace_mode,
        }
    }
}

/// One epoch's bookkeeping. Wall time is kept in memory but never
/// serialized, so persisted logs are byte-identical across reruns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: EvalReport,
    pub lr: f64,
    /// Largest post-clip global gradient norm seen this epoch.
    pub max_grad_norm: f64,
    #[serde(skip)]
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_auc: f64,
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: TrainLog,
}

/// Score a set of videos with a trained model: per-sequence probabilities
/// in evaluation mode, averaged per video.
pub fn score_videos(
    params: &ModelParams,
    records: &[VideoRecord],
    split: Split,
    seq_len_visual: usize,
    batch_size: usize,
) -> Result<ScoreSet, TrainError> {
    let seqs = data::segment_records(records, split, seq_len_visual)?;
    if seqs.is_empty() {
        return Err(TrainError::NoData(format!(
            "split {} produced no sequences",
            split.as_str()
        )));
    }
    let labels: BTreeMap<&str, u8> = records
        .iter()
        .map(|r| (r.video_id.as_str(), r.label))
        .collect();
    let mut sequence_scores = Vec::with_capacity(seqs.len());
    for batch in data::batches(&seqs, batch_size, 0, false)? {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = ForwardCtx::eval(&mut rng);
        let (_, _, y_hat) = model::forward(&mut tape, &vars, &batch, &mut ctx)?;
        for (i, id) in batch.video_ids.iter().enumerate() {
            sequence_scores.push((id.clone(), tape.data(y_hat)[i]));
        }
    }
    let entries = model::predict_video(&sequence_scores)
        .into_iter()
        .map(|(video_id, score)| {
            let label = *labels.get(video_id.as_str()).expect("scored known videos");
            ScoredVideo {
                video_id,
                score,
                label,
            }
        })
        .collect();
    Ok(ScoreSet::new(entries))
}

/// Evaluate a model on one split at the given operating point.
pub fn evaluate(
    params: &ModelParams,
    records: &[VideoRecord],
    split: Split,
    seq_len_visual: usize,
    threshold: f64,
    max_fpr: f64,
) -> Result<EvalReport, TrainError> {
    let scores = score_videos(params, records, split, seq_len_visual, 64)?;
    Ok(EvalReport::compute(&scores, threshold, max_fpr)?)
}

/// Train with seeded shuffling, gradient clipping, Adam with per-epoch decay,
/// and early stopping on validation AUC. Returns the parameters from the
/// best-validation-AUC epoch together with the per-epoch log.
pub fn train(
    cfg: &TrainConfig,
    train_records: &[VideoRecord],
    val_records: &[VideoRecord],
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let first = train_records
        .first()
        .ok_or_else(|| TrainError::NoData("empty training set".into()))?;
    if val_records.is_empty() {
        return Err(TrainError::NoData("empty validation set".into()));
    }
    let val_pos = val_records.iter().filter(|r| r.label == 1).count();
    if val_pos == 0 || val_pos == val_records.len() {
        return Err(TrainError::NoData(
            "validation set needs both classes for AUC monitoring".into(),
        ));
    }
    let d_audio = first.audio_features.cols();
    let d_visual = first.visual_features.cols();

    let train_seqs = data::segment_records(train_records, Split::Train, cfg.seq_len_visual)?;
    if train_seqs.is_empty() {
        return Err(TrainError::NoData("no training sequences".into()));
    }

    let mut rng_init = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(cfg.arch_for(d_audio, d_visual), &mut rng_init)?;
    let mut rng_dropout = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut adam = AdamState::new(cfg.lr, cfg.decay_rate);

    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, ModelParams)> = None;

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let batch_list = data::batches(
            &train_seqs,
            cfg.batch_size,
            cfg.seed.wrapping_add(epoch as u64),
            true,
        )?;
        let mut sums = (0.0, 0.0, 0.0, 0.0, 0.0);
        let mut seen = 0usize;
        let mut max_grad_norm = 0.0f64;
        for (bi, batch) in batch_list.iter().enumerate() {
            let bd = train_step(cfg, &mut params, &mut adam, &mut rng_dropout, batch)
                .map_err(|e| match e {
                    TrainError::Diverged { .. } => TrainError::Diverged { epoch, batch: bi },
                    other => other,
                })?;
            let b = batch.batch_size() as f64;
            sums.0 += bd.0.l_inv * b;
            sums.1 += bd.0.l_orth * b;
            sums.2 += bd.0.l_sim * b;
            sums.3 += bd.0.l_cls * b;
            sums.4 += bd.0.l_total * b;
            seen += batch.batch_size();
            max_grad_norm = max_grad_norm.max(bd.1);
        }
        adam.decay_epoch();
        let n = seen as f64;
        let train_bd = LossBreakdown {
            l_inv: sums.0 / n,
            l_orth: sums.1 / n,
            l_sim: sums.2 / n,
            l_cls: sums.3 / n,
            l_total: sums.4 / n,
        };
        let val = evaluate(
            &params,
            val_records,
            Split::Val,
            cfg.seq_len_visual,
            0.5,
            0.1,
        )?;
        let record = EpochRecord {
            epoch,
            train: train_bd,
            val: val.clone(),
            lr: adam.lr,
            max_grad_norm,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        progress(&record);
        log.epochs.push(record);

        let improved = best.as_ref().map_or(true, |(auc, _, _)| val.auc > *auc);
        if improved {
            best = Some((val.auc, epoch, params.clone()));
        }
        let (_, best_epoch, _) = best.as_ref().expect("set above");
        if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    let (best_auc, best_epoch, best_params) = best.expect("at least one epoch ran");
    log.best_epoch = best_epoch;
    log.best_val_auc = best_auc;
    Ok(TrainOutcome {
        params: best_params,
        log,
    })
}

/// One optimization step; returns the loss breakdown and the post-clip
/// global gradient norm.
fn train_step(
    cfg: &TrainConfig,
    params: &mut ModelParams,
    adam: &mut AdamState,
    rng_dropout: &mut ChaCha8Rng,
    batch: &SequenceBatch,
) -> Result<(LossBreakdown, f64), TrainError> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, true);
    let mut ctx = ForwardCtx {
        train_mode: true,
        dropout: cfg.dropout,
        rng: rng_dropout,
    };
    let (reps, _attn, y_hat) = model::forward(&mut tape, &vars, batch, &mut ctx)?;
    let (total, bd) = losses::combined_loss(
        &mut tape,
        &reps,
        y_hat,
        &batch.labels,
        &cfg.loss_weights,
    )?;
    if !bd.l_total.is_finite() {
        return Err(TrainError::Diverged { epoch: 0, batch: 0 });
    }
    let identity = cfg
        .loss_weights
        .combine(bd.l_inv, bd.l_orth, bd.l_sim, bd.l_cls);
    assert!(
        (bd.l_total - identity).abs() <= 1e-12,
        "loss breakdown identity violated: {} vs {identity}",
        bd.l_total
    );
    tape.backward(total)?;
    params.collect_grads(&tape, &vars);
    drop(tape);
    let mut tensors = params.tensors_mut();
    clip_grad_norm(&mut tensors, cfg.grad_clip)?;
    let post_norm = global_grad_norm(&tensors)?;
    adam.step(&mut tensors)?;
    Ok((bd, post_norm))
}

/// Named ablation row: the variant label and its test-set report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub report: EvalReport,
}

pub const ABLATION_ROWS: [&str; 6] = [
    "full",
    "no_inv",
    "no_orth",
    "no_sim",
    "specific_only",
    "invariant_only",
];

/// Retrain the model under the six standard variants (full, one loss zeroed
/// at a time, and each single-subspace model) with identical seeds and data
/// order, evaluating each on the test split.
pub fn ablate(
    cfg: &TrainConfig,
    train_records: &[VideoRecord],
    val_records: &[VideoRecord],
    test_records: &[VideoRecord],
    progress: &mut dyn FnMut(&str, &EvalReport),
) -> Result<Vec<AblationRow>, TrainError> {
    let mut rows = Vec::with_capacity(ABLATION_ROWS.len());
    for name in ABLATION_ROWS {
        let variant = ablation_variant(cfg, name);
        let outcome = train(&variant, train_records, val_records, &mut |_| {})?;
        let report = evaluate(
            &outcome.params,
            test_records,
            Split::Test,
            variant.seq_len_visual,
            0.5,
            0.1,
        )?;
        progress(name, &report);
        rows.push(AblationRow {
            name: name.to_string(),
            report,
        });
    }
    Ok(rows)
}

/// The configuration for one named ablation row.
pub fn ablation_variant(base: &TrainConfig, name: &str) -> TrainConfig {
    let mut cfg = base.clone();
    match name {
        "full" => {}
        "no_inv" => cfg.loss_weights.alpha = 0.0,
        "no_orth" => cfg.loss_weights.beta = 0.0,
        "no_sim" => cfg.loss_weights.gamma = 0.0,
        "specific_only" => {
            cfg.subspace_mode = SubspaceMode::SpecificOnly;
            // No invariant subspace to align.
            cfg.loss_weights.alpha = 0.0;
        }
        "invariant_only" => {
            cfg.subspace_mode = SubspaceMode::InvariantOnly;
            // No specific subspace, so no orthogonality constraints either.
            cfg.loss_weights.beta = 0.0;
        }
        other => panic!("unknown ablation row {other:?}"),
    }
    cfg
}
