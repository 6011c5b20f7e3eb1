//! The flat JSON run configuration. One document fully determines a run;
//! every field has a default so configs only state what they change.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use tether_core::encoder::Activation;
use tether_core::synthdata::{DatasetKind, SyntheticSpec};
use tether_core::trainer::{LossVariant, PretrainConfig, Task, TrainConfig};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JobConfig {
    // ---- synthetic data ----
    pub data_kind: DatasetKind,
    pub num_classes: usize,
    pub held_out_classes: Vec<usize>,
    pub num_domains: usize,
    pub input_dim: usize,
    pub samples_per_class_per_domain: usize,
    pub noise_sigma: f64,
    pub domain_shift_strength: f64,

    // ---- encoder architecture ----
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,

    // ---- pretraining ----
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr0: f64,
    pub pretrain_tau: f64,
    pub view_noise: f64,

    // ---- fine-tuning ----
    pub alpha: f64,
    pub tau: f64,
    pub lr0: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub task: Task,
    pub loss_variant: LossVariant,
    pub arc_scale: f64,
    pub arc_margin: f64,

    // ---- evaluation ----
    pub eval_split: String,

    // ---- sweep ----
    pub sweep_alphas: Vec<f64>,
    /// Largest tolerated drop of the primary ID metric when the sweep picks
    /// its recommended alpha.
    pub sweep_max_id_drop: f64,

    // ---- gradient checking ----
    pub gradcheck_instances: usize,
    pub gradcheck_tolerance: f64,
    /// Fault-injection fixture: offsets the named loss's analytic gradient so
    /// the checker provably fails. Leave unset for real checks.
    pub corrupt_gradient: Option<String>,

    // ---- inputs ----
    /// Dataset directory (holding data.csv + spec.json).
    pub data: Option<PathBuf>,
    /// Reference checkpoint produced by `pretrain`.
    pub pretrained_checkpoint: Option<PathBuf>,
    /// Checkpoint to evaluate (defaults to the pretrained one).
    pub checkpoint: Option<PathBuf>,

    pub seed: u64,
}

impl Default for JobConfig {
    fn default() -> Self {
        let train = TrainConfig::classification_defaults();
        let pre = PretrainConfig::default();
        Self {
            data_kind: DatasetKind::Classification,
            num_classes: 10,
            held_out_classes: vec![8, 9],
            num_domains: 3,
            input_dim: 12,
            samples_per_class_per_domain: 20,
            noise_sigma: 0.1,
            domain_shift_strength: 0.5,

            hidden_dims: vec![32],
            embed_dim: 16,
            activation: Activation::Tanh,

            pretrain_steps: pre.steps,
            pretrain_batch: pre.batch_size,
            pretrain_lr0: pre.lr0,
            pretrain_tau: pre.tau,
            view_noise: pre.view_noise,

            alpha: train.alpha,
            tau: train.tau,
            lr0: train.lr0,
            steps: train.steps,
            batch_size: train.batch_size,
            weight_decay: train.weight_decay,
            adam_beta1: train.adam_beta1,
            adam_beta2: train.adam_beta2,
            adam_eps: train.adam_eps,
            task: train.task,
            loss_variant: train.loss_variant,
            arc_scale: train.arc_scale,
            arc_margin: train.arc_margin,

            eval_split: "test_id".to_string(),

            sweep_alphas: vec![0.0, 0.1, 1.0, 100.0, 1000.0],
            sweep_max_id_drop: 0.10,

            gradcheck_instances: 100,
            gradcheck_tolerance: 1e-4,
            corrupt_gradient: None,

            data: None,
            pretrained_checkpoint: None,
            checkpoint: None,

            seed: 0,
        }
    }
}

impl JobConfig {
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: self.num_classes,
            held_out_classes: self.held_out_classes.clone(),
            num_domains: self.num_domains,
            input_dim: self.input_dim,
            samples_per_class_per_domain: self.samples_per_class_per_domain,
            noise_sigma: self.noise_sigma,
            domain_shift_strength: self.domain_shift_strength,
            seed: self.seed,
        }
    }

    pub fn encoder_arch(&self) -> tether_core::encoder::EncoderArch {
        tether_core::encoder::EncoderArch {
            input_dim: self.input_dim,
            hidden_dims: self.hidden_dims.clone(),
            embed_dim: self.embed_dim,
            activation: self.activation,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain_steps,
            batch_size: self.pretrain_batch,
            lr0: self.pretrain_lr0,
            tau: self.pretrain_tau,
            view_noise: self.view_noise,
            weight_decay: self.weight_decay,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            alpha: self.alpha,
            tau: self.tau,
            lr0: self.lr0,
            steps: self.steps,
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            seed: self.seed,
            task: self.task,
            loss_variant: self.loss_variant,
            arc_scale: self.arc_scale,
            arc_margin: self.arc_margin,
        }
    }
}
