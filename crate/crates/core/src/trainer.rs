//! The fine-tuning loop: AdamW with a linearly decaying learning rate over
//! the composite objectives, plus the self-supervised pretraining loop that
//! produces the frozen reference encoder.
//!
//! Every run is a pure function of (config, dataset): all randomness flows
//! from the config seed and records are bit-reproducible.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::encoder::{
    backward_vision, forward_vision, forward_vision_traced, CaptionTable, EncoderArch,
    EncoderParams, EncoderSnapshot,
};
use crate::error::{Error, Result};
use crate::losses::{
    arc_margin_loss, classification_objective, pairwise_objective, LossHyper, ModelGrads,
    Objective,
};
use crate::matrix::Matrix;
use crate::rng::Rng;
use crate::sampler::{caption_for_class, sample_identity_batch, sample_labeled_batch, PairBatch};
use crate::synthdata::{Dataset, DatasetSplits, Renderer};
use crate::textfmt::csv_f64;

/// Hyperparameters quoted for full-scale encoders; the desk-scale defaults
/// below differ because the toy networks train at much larger rates.
pub mod presets {
    /// Drift-weight sweep grid.
    pub const ALPHA_SWEEP: [f64; 4] = [0.1, 1.0, 100.0, 1000.0];
    pub const CLASSIFICATION_LR_FULL: f64 = 5e-5;
    pub const PAIRWISE_LR_FULL: f64 = 1e-5;
    pub const CLASSIFICATION_BATCH_FULL: usize = 128;
    pub const PAIRWISE_BATCH_FULL: usize = 256;
    /// Favored drift weights per task at full scale.
    pub const CLASSIFICATION_ALPHA: f64 = 100.0;
    pub const PAIRWISE_ALPHA: f64 = 1.0;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Pairwise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    ClipContrastive,
    ArcMargin,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f64,
    pub tau: f64,
    pub lr0: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub task: Task,
    pub loss_variant: LossVariant,
    pub arc_scale: f64,
    pub arc_margin: f64,
}

impl TrainConfig {
    /// Desk-scale defaults for image-caption fine-tuning; tau 0.01 mirrors
    /// the sharp temperature that full-scale contrastive pipelines use.
    pub fn classification_defaults() -> Self {
        Self {
            alpha: presets::CLASSIFICATION_ALPHA,
            tau: 0.01,
            lr0: 1e-3,
            steps: 300,
            batch_size: 32,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            task: Task::Classification,
            loss_variant: LossVariant::ClipContrastive,
            arc_scale: 64.0,
            arc_margin: 0.5,
        }
    }

    /// Desk-scale defaults for pair-based verification fine-tuning.
    pub fn pairwise_defaults() -> Self {
        Self {
            alpha: presets::PAIRWISE_ALPHA,
            tau: 0.1,
            task: Task::Pairwise,
            ..Self::classification_defaults()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::InvalidConfig("steps must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch_size must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::InvalidConfig("adam betas must lie in [0, 1)".into()));
        }
        if self.tau <= 0.0 || self.alpha < 0.0 || self.lr0 < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig(
                "tau must be > 0; alpha, lr0 and weight_decay must be >= 0".into(),
            ));
        }
        Ok(())
    }

    fn hyper(&self) -> LossHyper {
        LossHyper {
            tau: self.tau,
            alpha: self.alpha,
            arc_scale: self.arc_scale,
            arc_margin: self.arc_margin,
            ..LossHyper::default()
        }
    }
}

/// Linearly decaying learning rate: `lr0 * (1 - step/steps)`.
pub fn lr_at(step: usize, config: &TrainConfig) -> Result<f64> {
    if step > config.steps {
        return Err(Error::StepOutOfRange {
            step,
            total: config.steps,
        });
    }
    Ok(config.lr0 * (1.0 - step as f64 / config.steps as f64))
}

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        Self {
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// First/second moment accumulators over the flattened parameter vector.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl OptimizerState {
    pub fn new(params: usize) -> Self {
        Self {
            m: vec![0.0; params],
            v: vec![0.0; params],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One decoupled-weight-decay Adam update in place:
/// m and v track the gradient moments, bias correction uses the incremented
/// step counter, and the decay term applies to the raw parameters.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    lr: f64,
    hyper: &AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            expected: params.len(),
            found: if params.len() != grads.len() {
                grads.len()
            } else {
                state.m.len()
            },
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    if lr < 0.0 {
        return Err(Error::InvalidConfig(format!("negative learning rate {lr}")));
    }
    state.t += 1;
    let bc1 = 1.0 - hyper.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * (m_hat / (v_hat.sqrt() + hyper.eps) + hyper.weight_decay * params[i]);
    }
    Ok(())
}

/// Per-step scalars; `contrastive_loss` carries the task term (the angular
/// margin term under the arc variant) and `mean_drift` the drift term that
/// enters the objective, so `total = contrastive + alpha * drift` holds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepStat {
    pub step: usize,
    pub lr: f64,
    pub total_loss: f64,
    pub contrastive_loss: f64,
    pub mean_drift: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: serde_json::Value,
    pub steps: Vec<StepStat>,
    pub diverged: bool,
}

impl RunRecord {
    /// CSV with one row per completed step, floats at 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,total_loss,contrastive_loss,mean_drift\n");
        for s in &self.steps {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                s.step,
                csv_f64(s.lr),
                csv_f64(s.total_loss),
                csv_f64(s.contrastive_loss),
                csv_f64(s.mean_drift)
            );
        }
        out
    }

    pub fn final_total_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.total_loss)
    }
}

/// Trainable state beyond the encoder: the caption table for image-caption
/// training, or the class-weight matrix for the angular-margin variant.
#[derive(Clone, Debug)]
pub enum ModelHead {
    None,
    CaptionTable(CaptionTable),
    ArcWeights(Matrix),
}

impl ModelHead {
    fn matrix(&self) -> Option<&Matrix> {
        match self {
            ModelHead::None => None,
            ModelHead::CaptionTable(t) => Some(t.embeddings()),
            ModelHead::ArcWeights(w) => Some(w),
        }
    }

    fn matrix_mut(&mut self) -> Option<&mut Matrix> {
        match self {
            ModelHead::None => None,
            ModelHead::CaptionTable(t) => Some(t.embeddings_mut()),
            ModelHead::ArcWeights(w) => Some(w),
        }
    }

    pub fn caption_table(&self) -> Option<&CaptionTable> {
        match self {
            ModelHead::CaptionTable(t) => Some(t),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub encoder: EncoderParams,
    pub head: ModelHead,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub record: RunRecord,
    pub model: TrainedModel,
}

/// Caption rows initialized to per-class centroids of the frozen encoder's
/// embeddings over `data`. This stands in for a pretrained text encoder: the
/// rows are aligned with the reference embedding space and cover classes the
/// fine-tuning set never shows.
pub fn caption_table_from_centroids(
    params: &EncoderParams,
    data: &Dataset,
    class_names: &[String],
) -> Result<CaptionTable> {
    let emb = forward_vision(params, &data.features_matrix())?;
    let mut rows = Matrix::zeros(class_names.len(), emb.cols());
    let by_label = data.by_label();
    for (class, name) in class_names.iter().enumerate() {
        let members = by_label.get(&class).ok_or(Error::EmptyClass)?;
        let row = rows.row_mut(class);
        for &i in members {
            for (r, &e) in row.iter_mut().zip(emb.row(i)) {
                *r += e;
            }
        }
        for r in row.iter_mut() {
            *r /= members.len() as f64;
        }
        let _ = name;
    }
    let captions = class_names
        .iter()
        .map(|n| caption_for_class(n))
        .collect::<Result<Vec<_>>>()?;
    CaptionTable::new(captions, rows)
}

/// Class-weight matrix for the angular-margin head, one centroid row per
/// distinct label of `data`, plus the label -> row mapping.
pub fn arc_weights_from_centroids(
    params: &EncoderParams,
    data: &Dataset,
) -> Result<(Matrix, BTreeMap<usize, usize>)> {
    let emb = forward_vision(params, &data.features_matrix())?;
    let by_label = data.by_label();
    let mut weights = Matrix::zeros(by_label.len(), emb.cols());
    let mut index = BTreeMap::new();
    for (row, (&label, members)) in by_label.iter().enumerate() {
        index.insert(label, row);
        let w = weights.row_mut(row);
        for &i in members {
            for (r, &e) in w.iter_mut().zip(emb.row(i)) {
                *r += e;
            }
        }
        for r in w.iter_mut() {
            *r /= members.len() as f64;
        }
    }
    Ok((weights, index))
}

/// Angular-margin composite: arc term on the embeddings of `images` plus
/// `alpha * sum of row drifts / drift_divisor`.
fn arc_objective(
    params: &EncoderParams,
    weights: &Matrix,
    snapshot: &EncoderSnapshot,
    images: &Matrix,
    labels: &[usize],
    hyper: &LossHyper,
    drift_divisor: f64,
) -> Result<Objective> {
    let (emb, trace) = forward_vision_traced(params, images)?;
    let arc = arc_margin_loss(&emb, labels, weights, hyper.arc_scale, hyper.arc_margin)?;
    let frozen = forward_vision(snapshot.params(), images)?;
    let diff = emb.sub(&frozen)?;
    let drift_term = diff.data().iter().map(|v| v * v).sum::<f64>() / drift_divisor;
    let value = arc.value + hyper.alpha * drift_term;

    let mut grad_emb = arc.grads.embeddings;
    grad_emb.add_assign(&diff.scale(2.0 * hyper.alpha / drift_divisor))?;
    let encoder = backward_vision(params, &trace, &grad_emb)?;
    Ok(Objective {
        value,
        task_term: arc.value,
        drift_term,
        grads: ModelGrads {
            encoder,
            head: Some(arc.grads.class_weights),
        },
    })
}

fn stack_pair_batch(batch: &PairBatch) -> Matrix {
    let b = batch.u.rows();
    let mut stacked = Matrix::zeros(2 * b, batch.u.cols());
    for i in 0..b {
        stacked.row_mut(i).copy_from_slice(batch.u.row(i));
        stacked.row_mut(b + i).copy_from_slice(batch.v.row(i));
    }
    stacked
}

fn flatten_model(params: &EncoderParams, head: &ModelHead) -> Vec<f64> {
    let mut flat = params.flatten();
    if let Some(m) = head.matrix() {
        flat.extend_from_slice(m.data());
    }
    flat
}

fn assign_model(params: &mut EncoderParams, head: &mut ModelHead, flat: &[f64]) -> Result<()> {
    let n_enc = params.param_count();
    params.assign_from_flat(&flat[..n_enc])?;
    if let Some(m) = head.matrix_mut() {
        m.data_mut().copy_from_slice(&flat[n_enc..]);
    }
    Ok(())
}

fn flatten_grads(grads: &ModelGrads, head: &ModelHead) -> Result<Vec<f64>> {
    let mut flat = grads.encoder.flatten();
    match (head.matrix(), &grads.head) {
        (Some(_), Some(g)) => flat.extend_from_slice(g.data()),
        (None, None) => {}
        _ => {
            return Err(Error::InvalidConfig(
                "head gradients do not match the trainable head".into(),
            ))
        }
    }
    Ok(flat)
}

fn is_divergence(err: &Error) -> bool {
    matches!(
        err,
        Error::NonFinite { .. } | Error::NonFiniteGradient | Error::ZeroRow { .. }
    )
}

/// Fine-tunes a copy of `pretrained` on the fine-tuning split, holding the
/// frozen snapshot as the drift reference. Bit-deterministic under
/// (config, splits); on a non-finite loss the run stops and the partial
/// record is returned with `diverged` set.
pub fn run_training(
    pretrained: &EncoderParams,
    splits: &DatasetSplits,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    pretrained.validate()?;
    let snapshot = EncoderSnapshot::of(pretrained);
    let mut params = pretrained.clone();
    let mut rng = Rng::new(config.seed);
    let data = &splits.finetune_id;
    if data.is_empty() {
        return Err(Error::InvalidConfig("fine-tuning split is empty".into()));
    }
    let hyper = config.hyper();
    let class_names = splits.class_names();

    // Trainable head and, for the arc variant, the label -> class-row map.
    let (mut head, arc_index) = match (config.task, config.loss_variant) {
        (Task::Classification, LossVariant::ClipContrastive) => (
            ModelHead::CaptionTable(caption_table_from_centroids(
                pretrained,
                &splits.pretrain,
                &class_names,
            )?),
            None,
        ),
        (_, LossVariant::ArcMargin) => {
            let (w, index) = arc_weights_from_centroids(pretrained, data)?;
            (ModelHead::ArcWeights(w), Some(index))
        }
        (Task::Pairwise, LossVariant::ClipContrastive) => (ModelHead::None, None),
    };

    let mut flat = flatten_model(&params, &head);
    let mut state = OptimizerState::new(flat.len());
    let adam = AdamHyper::from(config);
    let mut steps = Vec::with_capacity(config.steps);
    let mut diverged = false;

    for k in 1..=config.steps {
        let objective = match (config.task, config.loss_variant) {
            (Task::Classification, LossVariant::ClipContrastive) => {
                let batch = sample_labeled_batch(data, &class_names, config.batch_size, &mut rng)?;
                let table = head.caption_table().expect("classification head");
                classification_objective(&params, table, &snapshot, &batch, &hyper)
            }
            (Task::Classification, LossVariant::ArcMargin) => {
                let batch = sample_labeled_batch(data, &class_names, config.batch_size, &mut rng)?;
                let index = arc_index.as_ref().expect("arc head");
                let labels = batch
                    .class_ids
                    .iter()
                    .map(|c| index[c])
                    .collect::<Vec<_>>();
                let weights = match &head {
                    ModelHead::ArcWeights(w) => w.clone(),
                    _ => unreachable!(),
                };
                arc_objective(
                    &params,
                    &weights,
                    &snapshot,
                    &batch.images,
                    &labels,
                    &hyper,
                    batch.images.rows() as f64,
                )
            }
            (Task::Pairwise, LossVariant::ClipContrastive) => {
                let batch = sample_identity_batch(data, config.batch_size, &mut rng)?;
                pairwise_objective(&params, &snapshot, &batch, &hyper)
            }
            (Task::Pairwise, LossVariant::ArcMargin) => {
                let batch = sample_identity_batch(data, config.batch_size, &mut rng)?;
                let index = arc_index.as_ref().expect("arc head");
                let ids: Vec<usize> = batch.identity_ids.iter().map(|c| index[c]).collect();
                let mut labels = ids.clone();
                labels.extend_from_slice(&ids);
                let stacked = stack_pair_batch(&batch);
                let weights = match &head {
                    ModelHead::ArcWeights(w) => w.clone(),
                    _ => unreachable!(),
                };
                // Drift divisor B keeps the pair convention: the penalty sums
                // both views of each pair and averages over pairs.
                arc_objective(
                    &params,
                    &weights,
                    &snapshot,
                    &stacked,
                    &labels,
                    &hyper,
                    batch.u.rows() as f64,
                )
            }
        };

        let objective = match objective {
            Ok(o) => o,
            Err(e) if is_divergence(&e) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };

        let lr = lr_at(k, config)?;
        let grads = flatten_grads(&objective.grads, &head)?;
        match adamw_step(&mut flat, &grads, &mut state, lr, &adam) {
            Ok(()) => {}
            Err(Error::NonFiniteGradient) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        }
        assign_model(&mut params, &mut head, &flat)?;

        steps.push(StepStat {
            step: k,
            lr,
            total_loss: objective.value,
            contrastive_loss: objective.task_term,
            mean_drift: objective.drift_term,
        });
    }

    debug_assert_eq!(snapshot.fingerprint(), pretrained.fingerprint());
    Ok(TrainOutcome {
        record: RunRecord {
            config: serde_json::to_value(config)?,
            steps,
            diverged,
        },
        model: TrainedModel {
            encoder: params,
            head,
        },
    })
}

/// Pretraining configuration: self-supervised two-view contrastive training
/// over the pretraining split.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub tau: f64,
    /// Gaussian noise scale applied independently to each of the two views.
    pub view_noise: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            batch_size: 64,
            lr0: 1e-3,
            tau: 0.1,
            view_noise: 0.1,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    fn as_train_config(&self) -> TrainConfig {
        TrainConfig {
            alpha: 0.0,
            tau: self.tau,
            lr0: self.lr0,
            steps: self.steps,
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            seed: self.seed,
            task: Task::Pairwise,
            loss_variant: LossVariant::ClipContrastive,
            arc_scale: 64.0,
            arc_margin: 0.5,
        }
    }
}

/// Trains a fresh encoder by pulling together two views of the same
/// underlying sample, each independently noised and rendered through an
/// independently drawn domain map. Matching views across domains is what
/// makes the reference encoder domain-robust before fine-tuning narrows it.
/// The record's `mean_drift` column tracks distance from the random init.
pub fn run_pretraining(
    arch: &EncoderArch,
    splits: &DatasetSplits,
    config: &PretrainConfig,
) -> Result<(EncoderParams, RunRecord)> {
    let proxy = config.as_train_config();
    proxy.validate()?;
    let renderer = Renderer::from_spec(&splits.spec)?;
    if arch.input_dim != splits.spec.input_dim {
        return Err(Error::DimMismatch {
            context: "pretraining encoder input width",
            expected: splits.spec.input_dim,
            found: arch.input_dim,
        });
    }
    let mut rng = Rng::new(config.seed);
    let mut params = EncoderParams::init(arch, &mut rng);
    let init_snapshot = EncoderSnapshot::of(&params);
    let hyper = LossHyper {
        tau: config.tau,
        alpha: 0.0,
        ..LossHyper::default()
    };

    let mut flat = params.flatten();
    let mut state = OptimizerState::new(flat.len());
    let adam = AdamHyper::from(&proxy);
    let mut steps = Vec::with_capacity(config.steps);
    let mut diverged = false;
    let dim = splits.spec.input_dim;

    for k in 1..=config.steps {
        let mut u = Matrix::zeros(config.batch_size, dim);
        let mut v = Matrix::zeros(config.batch_size, dim);
        for row in 0..config.batch_size {
            let class = rng.next_index(renderer.num_classes());
            let latent = renderer.sample_latent(class, &mut rng);
            for (view, out) in [&mut u, &mut v].into_iter().enumerate() {
                let mut noised = latent.clone();
                for x in noised.iter_mut() {
                    *x += config.view_noise * rng.normal();
                }
                let domain = rng.next_index(renderer.num_domains());
                out.row_mut(row)
                    .copy_from_slice(&renderer.render(&noised, domain));
                let _ = view;
            }
        }
        let batch = PairBatch {
            u,
            v,
            identity_ids: (0..config.batch_size).collect(),
        };
        let objective = match pairwise_objective(&params, &init_snapshot, &batch, &hyper) {
            Ok(o) => o,
            Err(e) if is_divergence(&e) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };

        let lr = lr_at(k, &proxy)?;
        let grads = objective.grads.encoder.flatten();
        match adamw_step(&mut flat, &grads, &mut state, lr, &adam) {
            Ok(()) => {}
            Err(Error::NonFiniteGradient) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        }
        params.assign_from_flat(&flat)?;

        steps.push(StepStat {
            step: k,
            lr,
            total_loss: objective.value,
            contrastive_loss: objective.task_term,
            mean_drift: objective.drift_term,
        });
    }

    let record = RunRecord {
        config: serde_json::to_value(config)?,
        steps,
        diverged,
    };
    Ok((params, record))
}

/// Picks the strongest drift weight whose primary in-distribution metric
/// stays within `max_id_drop` of the weakest-regularization baseline.
/// `rows` are (alpha, id_metric) pairs; returns None on empty input.
pub fn recommend_alpha(rows: &[(f64, f64)], max_id_drop: f64) -> Option<f64> {
    let baseline = rows
        .iter()
        .cloned()
        .min_by(|a, b| a.0.partial_cmp(&b.0).expect("finite alphas"))?;
    rows.iter()
        .filter(|(_, metric)| *metric >= baseline.1 - max_id_drop)
        .map(|&(alpha, _)| alpha)
        .max_by(|a, b| a.partial_cmp(b).expect("finite alphas"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_classification, generate_identities, SyntheticSpec};

    fn tiny_spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 5,
            held_out_classes: vec![4],
            num_domains: 2,
            input_dim: 6,
            samples_per_class_per_domain: 6,
            noise_sigma: 0.1,
            domain_shift_strength: 0.4,
            seed,
        }
    }

    fn tiny_arch() -> EncoderArch {
        EncoderArch {
            input_dim: 6,
            hidden_dims: vec![8],
            embed_dim: 5,
            activation: crate::encoder::Activation::Tanh,
        }
    }

    fn quick_config(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 4,
            tau: 0.1,
            seed: 3,
            ..TrainConfig::classification_defaults()
        }
    }

    #[test]
    fn lr_schedule_endpoints_and_midpoint() {
        let cfg = TrainConfig {
            lr0: 0.4,
            steps: 10,
            ..quick_config(10)
        };
        assert_eq!(lr_at(0, &cfg).unwrap(), 0.4);
        assert_eq!(lr_at(10, &cfg).unwrap(), 0.0);
        assert!((lr_at(5, &cfg).unwrap() - 0.2).abs() < 1e-15);
        assert!(matches!(
            lr_at(11, &cfg),
            Err(Error::StepOutOfRange { step: 11, total: 10 })
        ));
    }

    fn default_adam() -> AdamHyper {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    #[test]
    fn adamw_zero_gradient_leaves_params_unchanged() {
        let mut p = vec![1.5, -2.0];
        let mut state = OptimizerState::new(2);
        adamw_step(&mut p, &[0.0, 0.0], &mut state, 0.1, &default_adam()).unwrap();
        assert_eq!(p, vec![1.5, -2.0]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adamw_first_step_is_bias_corrected() {
        // With g = 1 at t = 1 the corrected moments are exactly m = v = 1,
        // so the step is lr / (1 + eps).
        let mut p = vec![1.0];
        let mut state = OptimizerState::new(1);
        adamw_step(&mut p, &[1.0], &mut state, 0.1, &default_adam()).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn adamw_decoupled_decay_only() {
        let mut p = vec![2.0];
        let mut state = OptimizerState::new(1);
        let hyper = AdamHyper {
            weight_decay: 0.01,
            ..default_adam()
        };
        adamw_step(&mut p, &[0.0], &mut state, 0.1, &hyper).unwrap();
        assert!((p[0] - 2.0 * (1.0 - 0.001)).abs() < 1e-15);
    }

    #[test]
    fn adamw_rejects_bad_inputs() {
        let mut p = vec![1.0];
        let mut state = OptimizerState::new(1);
        assert!(matches!(
            adamw_step(&mut p, &[1.0, 2.0], &mut state, 0.1, &default_adam()),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            adamw_step(&mut p, &[f64::NAN], &mut state, 0.1, &default_adam()),
            Err(Error::NonFiniteGradient)
        ));
    }

    #[test]
    fn alpha_zero_total_equals_contrastive_term() {
        let splits = generate_classification(&tiny_spec(1)).unwrap();
        let mut rng = Rng::new(10);
        let pretrained = EncoderParams::init(&tiny_arch(), &mut rng);
        let cfg = TrainConfig {
            alpha: 0.0,
            ..quick_config(20)
        };
        let out = run_training(&pretrained, &splits, &cfg).unwrap();
        assert!(!out.record.diverged);
        assert_eq!(out.record.steps.len(), 20);
        for s in &out.record.steps {
            assert!((s.total_loss - s.contrastive_loss).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_pretrained_params() {
        let splits = generate_classification(&tiny_spec(2)).unwrap();
        let pretrained = EncoderParams::init(&tiny_arch(), &mut Rng::new(11));
        let cfg = TrainConfig {
            lr0: 0.0,
            ..quick_config(15)
        };
        let out = run_training(&pretrained, &splits, &cfg).unwrap();
        assert_eq!(out.model.encoder.fingerprint(), pretrained.fingerprint());
    }

    #[test]
    fn training_is_bit_deterministic() {
        let splits = generate_classification(&tiny_spec(3)).unwrap();
        let pretrained = EncoderParams::init(&tiny_arch(), &mut Rng::new(12));
        let cfg = quick_config(25);
        let a = run_training(&pretrained, &splits, &cfg).unwrap();
        let b = run_training(&pretrained, &splits, &cfg).unwrap();
        assert_eq!(a.record.to_csv(), b.record.to_csv());
        assert_eq!(
            a.model.encoder.fingerprint(),
            b.model.encoder.fingerprint()
        );
    }

    #[test]
    fn snapshot_is_untouched_by_training() {
        let splits = generate_classification(&tiny_spec(4)).unwrap();
        let pretrained = EncoderParams::init(&tiny_arch(), &mut Rng::new(13));
        let before = pretrained.fingerprint();
        let out = run_training(&pretrained, &splits, &quick_config(30)).unwrap();
        assert_eq!(pretrained.fingerprint(), before);
        assert_ne!(out.model.encoder.fingerprint(), before);
    }

    #[test]
    fn divergence_sets_flag_and_returns_partial_record() {
        let splits = generate_classification(&tiny_spec(5)).unwrap();
        let pretrained = EncoderParams::init(&tiny_arch(), &mut Rng::new(14));
        let cfg = TrainConfig {
            lr0: 1e12,
            alpha: 100.0,
            ..quick_config(50)
        };
        let out = run_training(&pretrained, &splits, &cfg).unwrap();
        assert!(out.record.diverged);
        assert!(out.record.steps.len() < 50);
    }

    #[test]
    fn pairwise_and_arc_variants_run() {
        let spec = SyntheticSpec {
            num_classes: 12,
            held_out_classes: vec![10, 11],
            samples_per_class_per_domain: 3,
            ..tiny_spec(6)
        };
        let splits = generate_identities(&spec).unwrap();
        let pretrained = EncoderParams::init(&tiny_arch(), &mut Rng::new(15));
        for variant in [LossVariant::ClipContrastive, LossVariant::ArcMargin] {
            let cfg = TrainConfig {
                task: Task::Pairwise,
                loss_variant: variant,
                batch_size: 4,
                arc_scale: 16.0,
                ..quick_config(10)
            };
            let out = run_training(&pretrained, &splits, &cfg).unwrap();
            assert!(!out.record.diverged, "{variant:?}");
            assert_eq!(out.record.steps.len(), 10);
            for s in &out.record.steps {
                let recomposed = s.contrastive_loss + cfg.alpha * s.mean_drift;
                assert!((s.total_loss - recomposed).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pretraining_reduces_the_view_contrastive_loss() {
        let splits = generate_classification(&tiny_spec(7)).unwrap();
        let cfg = PretrainConfig {
            steps: 300,
            batch_size: 16,
            lr0: 5e-3,
            seed: 21,
            ..PretrainConfig::default()
        };
        let (params, record) = run_pretraining(&tiny_arch(), &splits, &cfg).unwrap();
        assert!(!record.diverged);
        // Per-batch losses are noisy; compare windowed means.
        let mean = |stats: &[StepStat]| {
            stats.iter().map(|s| s.contrastive_loss).sum::<f64>() / stats.len() as f64
        };
        let first = mean(&record.steps[..10]);
        let last = mean(&record.steps[290..]);
        assert!(last < first - 0.1, "no progress: {first} -> {last}");
        params.validate().unwrap();
    }

    #[test]
    fn alpha_recommendation_prefers_strong_regularization_within_budget() {
        let rows = [
            (0.0, 0.95),
            (0.1, 0.94),
            (1.0, 0.93),
            (10.0, 0.90),
            (100.0, 0.70),
        ];
        assert_eq!(recommend_alpha(&rows, 0.10), Some(10.0));
        assert_eq!(recommend_alpha(&rows, 0.30), Some(100.0));
        assert_eq!(recommend_alpha(&rows, 0.001), Some(0.0));
        assert_eq!(recommend_alpha(&[], 0.1), None);
    }
}
