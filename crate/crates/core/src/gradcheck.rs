//! Finite-difference gradient oracle and the checking harness that compares
//! every analytic loss gradient against it.
//!
//! The oracle is deliberately independent of the analytic code paths: it only
//! ever calls a loss through a scalar closure over a flat parameter vector.

use crate::encoder::{CaptionTable, EncoderArch, EncoderParams, EncoderSnapshot};
use crate::error::{Error, Result};
use crate::losses::{self, LossHyper, TripletMetric};
use crate::matrix::Matrix;
use crate::rng::Rng;
use crate::sampler::{caption_for_class, LabeledBatch, PairBatch};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative-error tolerance used by the standard check run.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Central difference (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate.
///
/// `h` must lie in [1e-7, 1e-3]; second-order accuracy keeps the comparison
/// tolerance realistic at the default 1e-5 step.
pub fn finite_diff_grad<F>(f: F, at: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step {h} outside [1e-7, 1e-3]"
        )));
    }
    let mut x = at.to_vec();
    let mut grad = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x)?;
        x[i] = orig - h;
        let fm = f(&x)?;
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFiniteEvaluation);
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// Worst relative error between two gradient vectors. Components are compared
/// against max(|a|, |b|, 1e-4) so near-zero entries are judged on absolute
/// error at the same 1e-4 scale.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4))
        .fold(0.0, f64::max)
}

/// Outcome of checking one loss over a batch of random instances.
#[derive(Clone, Debug, serde::Serialize)]
pub struct LossCheck {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
}

impl LossCheck {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < tolerance
    }
}

/// Names accepted by [`check_loss`], in report order.
pub const CHECKED_LOSSES: [&str; 7] = [
    "contrastive_loss",
    "clip_symmetric_loss",
    "triplet_loss",
    "arc_margin_loss",
    "similarity_loss",
    "classification_objective",
    "pairwise_objective",
];

/// Options for a harness run. `corrupt` names a loss whose analytic gradient
/// is offset before comparison; it exists to prove the checker catches wrong
/// gradients and is only reachable through explicit configuration.
#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub instances: usize,
    pub seed: u64,
    pub corrupt: Option<String>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            instances: 100,
            seed: 0x7e7e,
            corrupt: None,
        }
    }
}

/// Runs the finite-difference comparison for every loss.
pub fn check_all(opts: &CheckOptions) -> Result<Vec<LossCheck>> {
    CHECKED_LOSSES
        .iter()
        .map(|name| check_loss(name, opts))
        .collect()
}

/// Runs the comparison for one loss across `opts.instances` seeded instances.
pub fn check_loss(name: &str, opts: &CheckOptions) -> Result<LossCheck> {
    if opts.instances == 0 {
        return Err(Error::InvalidConfig(
            "gradient check needs at least one instance".into(),
        ));
    }
    let mut rng = Rng::new(opts.seed ^ stable_tag(name));
    let corrupt = opts.corrupt.as_deref() == Some(name);
    let mut worst: f64 = 0.0;
    for _ in 0..opts.instances {
        let (analytic, numeric) = match name {
            "contrastive_loss" => contrastive_instance(&mut rng)?,
            "clip_symmetric_loss" => clip_instance(&mut rng)?,
            "triplet_loss" => triplet_instance(&mut rng)?,
            "arc_margin_loss" => arc_instance(&mut rng)?,
            "similarity_loss" => similarity_instance(&mut rng)?,
            "classification_objective" => classification_instance(&mut rng)?,
            "pairwise_objective" => pairwise_instance(&mut rng)?,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown loss {other:?} in gradient check"
                )))
            }
        };
        let analytic = if corrupt {
            analytic.iter().map(|g| g + 0.01).collect()
        } else {
            analytic
        };
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    Ok(LossCheck {
        name: name.to_string(),
        instances: opts.instances,
        max_rel_err: worst,
    })
}

fn stable_tag(name: &str) -> u64 {
    // FNV-1a, so each loss gets its own reproducible stream.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

const BATCH: usize = 4;
const EMB_DIM: usize = 8;

fn random_emb(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    // Offset away from the origin so row norms stay comfortably nonzero.
    let mut m = rng.normal_matrix(rows, cols);
    for v in m.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1_f64.copysign(*v + 0.01);
        }
    }
    m
}

fn flatten_pair(a: &Matrix, b: &Matrix) -> Vec<f64> {
    let mut flat = a.data().to_vec();
    flat.extend_from_slice(b.data());
    flat
}

fn unflatten_pair(flat: &[f64], rows: usize, cols: usize) -> (Matrix, Matrix) {
    let n = rows * cols;
    (
        Matrix::new(rows, cols, flat[..n].to_vec()).expect("sized"),
        Matrix::new(rows, cols, flat[n..].to_vec()).expect("sized"),
    )
}

fn contrastive_instance(rng: &mut Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    let u = random_emb(rng, BATCH, EMB_DIM);
    let v = random_emb(rng, BATCH, EMB_DIM);
    let tau = 0.1 + rng.next_f64();
    let loss = losses::contrastive_loss(&u, &v, tau)?;
    let analytic = flatten_pair(&loss.grads.left, &loss.grads.right);
    let numeric = finite_diff_grad(
        |flat| {
            let (u, v) = unflatten_pair(flat, BATCH, EMB_DIM);
            Ok(losses::contrastive_loss(&u, &v, tau)?.value)
        },
        &flatten_pair(&u, &v),
        DEFAULT_STEP,
    )?;
    Ok((analytic, numeric))
}

fn clip_instance(rng: &mut Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    let img = random_emb(rng, BATCH, EMB_DIM);
    let txt = random_emb(rng, BATCH, EMB_DIM);
    let tau = 0.1 + rng.next_f64();
    let loss = losses::clip_symmetric_loss(&img, &txt, tau)?;
    let analytic = flatten_pair(&loss.grads.left, &loss.grads.right);
    let numeric = finite_diff_grad(
        |flat| {
            let (i, t) = unflatten_pair(flat, BATCH, EMB_DIM);
            Ok(losses::clip_symmetric_loss(&i, &t, tau)?.value)
        },
        &flatten_pair(&img, &txt),
        DEFAULT_STEP,
    )?;
    Ok((analytic, numeric))
}

fn triplet_instance(rng: &mut Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    let metric = if rng.next_index(2) == 0 {
        TripletMetric::Euclidean
    } else {
        TripletMetric::Cosine
    };
    let margin = 0.1 + rng.next_f64();
    // Resample until every row is safely off the hinge kink, so the loss is
    // differentiable in the probed neighborhood.
    loop {
        let a = random_emb(rng, BATCH, EMB_DIM);
        let p = random_emb(rng, BATCH, EMB_DIM);
        let n = random_emb(rng, BATCH, EMB_DIM);
        let slacks = losses::triplet_slacks(&a, &p, &n, margin, metric)?;
        if slacks.iter().any(|s| s.abs() < 1e-2) {
            continue;
        }
        let loss = losses::triplet_loss(&a, &p, &n, margin, metric)?;
        let mut analytic = loss.grads.anchor.data().to_vec();
        analytic.extend_from_slice(loss.grads.positive.data());
        analytic.extend_from_slice(loss.grads.negative.data());
        let mut at = a.data().to_vec();
        at.extend_from_slice(p.data());
        at.extend_from_slice(n.data());
        let numeric = finite_diff_grad(
            |flat| {
                let sz = BATCH * EMB_DIM;
                let a = Matrix::new(BATCH, EMB_DIM, flat[..sz].to_vec()).expect("sized");
                let p = Matrix::new(BATCH, EMB_DIM, flat[sz..2 * sz].to_vec()).expect("sized");
                let n = Matrix::new(BATCH, EMB_DIM, flat[2 * sz..].to_vec()).expect("sized");
                Ok(losses::triplet_loss(&a, &p, &n, margin, metric)?.value)
            },
            &at,
            DEFAULT_STEP,
        )?;
        return Ok((analytic, numeric));
    }
}

fn arc_instance(rng: &mut Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    let classes = 5;
    let emb = random_emb(rng, BATCH, EMB_DIM);
    let weights = random_emb(rng, classes, EMB_DIM);
    let labels: Vec<usize> = (0..BATCH).map(|_| rng.next_index(classes)).collect();
    let scale = 4.0 + 8.0 * rng.next_f64();
    let margin = 0.1 + 0.4 * rng.next_f64();
    let loss = losses::arc_margin_loss(&emb, &labels, &weights, scale, margin)?;
    let analytic = flatten_pair(&loss.grads.embeddings, &loss.grads.class_weights);
    let mut at = emb.data().to_vec();
    at.extend_from_slice(weights.data());
    let numeric = finite_diff_grad(
        |flat| {
            let ne = BATCH * EMB_DIM;
            let e = Matrix::new(BATCH, EMB_DIM, flat[..ne].to_vec()).expect("sized");
            let w = Matrix::new(classes, EMB_DIM, flat[ne..].to_vec()).expect("sized");
            Ok(losses::arc_margin_loss(&e, &labels, &w, scale, margin)?.value)
        },
        &at,
        DEFAULT_STEP,
    )?;
    Ok((analytic, numeric))
}

/// Small architecture used for whole-model checks; every parameter gets
/// finite-differenced, so it stays tiny.
fn check_arch() -> EncoderArch {
    EncoderArch {
        input_dim: 5,
        hidden_dims: vec![6],
        embed_dim: 4,
        activation: crate::encoder::Activation::Tanh,
    }
}

fn similarity_instance(rng: &mut Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    let arch = check_arch();
    let params = EncoderParams::init(&arch, rng);
    let mut drifted = params.clone();
    let noise = rng.normal_vec(drifted.param_count());
    let flat: Vec<f64> = drifted
        .flatten()
        .iter()
        .zip(&noise)
        .map(|(p, n)| p + 0.1 * n)
        .collect();
    drifted.assign_from_flat(&flat)?;
    let snapshot = EncoderSnapshot::of(&params);
    let x = rng.normal_matrix(3, arch.input_dim);

    let loss = losses::similarity_loss(&drifted, &snapshot, &x)?;
    let analytic = loss.grads.flatten();
    let numeric = finite_diff_grad(
        |flat| {
            let mut p = drifted.clone();
            p.assign_from_flat(flat)?;
            Ok(losses::similarity_loss(&p, &snapshot, &x)?.value)
        },
        &drifted.flatten(),
        DEFAULT_STEP,
    )?;
    Ok((analytic, numeric))
}

fn classification_instance(rng: &mut Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    let arch = check_arch();
    let params = EncoderParams::init(&arch, rng);
    let snapshot = EncoderSnapshot::of(&params);
    let mut probe = params.clone();
    let flat: Vec<f64> = probe
        .flatten()
        .iter()
        .map(|p| p + 0.05 * rng.normal())
        .collect();
    probe.assign_from_flat(&flat)?;

    let class_names = ["ridge", "delta", "mesa"];
    let captions: Vec<String> = class_names
        .iter()
        .map(|n| caption_for_class(n).expect("nonempty"))
        .collect();
    let table = CaptionTable::new(
        captions.clone(),
        random_emb(rng, class_names.len(), arch.embed_dim),
    )?;

    let class_ids: Vec<usize> = (0..3).map(|_| rng.next_index(class_names.len())).collect();
    let batch = LabeledBatch {
        images: rng.normal_matrix(3, arch.input_dim),
        captions: class_ids.iter().map(|&c| captions[c].clone()).collect(),
        class_ids,
    };
    let hyper = LossHyper {
        tau: 0.2 + rng.next_f64(),
        alpha: 10.0 * rng.next_f64(),
        ..LossHyper::default()
    };

    let loss = losses::classification_objective(&probe, &table, &snapshot, &batch, &hyper)?;
    let mut analytic = loss.grads.encoder.flatten();
    analytic.extend_from_slice(
        loss.grads
            .head
            .as_ref()
            .expect("caption table grads")
            .data(),
    );

    let mut at = probe.flatten();
    at.extend_from_slice(table.embeddings().data());
    let n_enc = probe.param_count();
    let numeric = finite_diff_grad(
        |flat| {
            let mut p = probe.clone();
            p.assign_from_flat(&flat[..n_enc])?;
            let emb = Matrix::new(class_names.len(), arch.embed_dim, flat[n_enc..].to_vec())
                .expect("sized");
            let t = CaptionTable::new(captions.clone(), emb)?;
            Ok(losses::classification_objective(&p, &t, &snapshot, &batch, &hyper)?.value)
        },
        &at,
        DEFAULT_STEP,
    )?;
    Ok((analytic, numeric))
}

fn pairwise_instance(rng: &mut Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    let arch = check_arch();
    let params = EncoderParams::init(&arch, rng);
    let snapshot = EncoderSnapshot::of(&params);
    let mut probe = params.clone();
    let flat: Vec<f64> = probe
        .flatten()
        .iter()
        .map(|p| p + 0.05 * rng.normal())
        .collect();
    probe.assign_from_flat(&flat)?;

    let batch = PairBatch {
        u: rng.normal_matrix(3, arch.input_dim),
        v: rng.normal_matrix(3, arch.input_dim),
        identity_ids: vec![11, 22, 33],
    };
    let hyper = LossHyper {
        tau: 0.1,
        alpha: 1.0,
        ..LossHyper::default()
    };

    let loss = losses::pairwise_objective(&probe, &snapshot, &batch, &hyper)?;
    let analytic = loss.grads.encoder.flatten();
    let numeric = finite_diff_grad(
        |flat| {
            let mut p = probe.clone();
            p.assign_from_flat(flat)?;
            Ok(losses::pairwise_objective(&p, &snapshot, &batch, &hyper)?.value)
        },
        &probe.flatten(),
        DEFAULT_STEP,
    )?;
    Ok((analytic, numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let g = finite_diff_grad(|x| Ok(x[0] * x[0]), &[3.0], DEFAULT_STEP).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = finite_diff_grad(|_| Ok(7.5), &[1.0, -2.0, 0.3], DEFAULT_STEP).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn step_size_is_validated() {
        assert!(finite_diff_grad(|x| Ok(x[0]), &[1.0], 1e-2).is_err());
        assert!(finite_diff_grad(|x| Ok(x[0]), &[1.0], 1e-8).is_err());
    }

    #[test]
    fn non_finite_evaluation_is_reported() {
        let r = finite_diff_grad(|x| Ok(1.0 / (x[0] - 1.0)), &[1.0], DEFAULT_STEP);
        assert!(r.is_ok(), "finite at the probe points");
        let r = finite_diff_grad(|x| Ok((x[0] - 1.0).ln()), &[1.0], DEFAULT_STEP);
        assert!(matches!(r, Err(Error::NonFiniteEvaluation)));
    }

    #[test]
    fn zero_instances_rejected() {
        let opts = CheckOptions {
            instances: 0,
            ..CheckOptions::default()
        };
        assert!(check_loss("contrastive_loss", &opts).is_err());
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let opts = CheckOptions {
            instances: 3,
            seed: 5,
            corrupt: Some("contrastive_loss".into()),
        };
        let check = check_loss("contrastive_loss", &opts).unwrap();
        assert!(!check.passed(DEFAULT_TOLERANCE), "corruption must fail");
    }
}
