//! Objective functions with values and analytic gradients: in-batch
//! contrastive, symmetric two-direction contrastive, triplet, additive
//! angular margin, the drift penalty, and the two composite objectives that
//! the training loop consumes.
//!
//! All softmax terms subtract the row max before exponentiating, so sharp
//! temperatures (down to 0.01) stay finite. Contrastive similarities are
//! cosines of normalized copies; the drift penalty sees raw embeddings.

use crate::encoder::{
    backward_vision, forward_vision, forward_vision_traced, CaptionTable, EncoderGrads,
    EncoderParams, EncoderSnapshot,
};
use crate::error::{Error, Result};
use crate::matrix::{dot, l2_norm, row_l2_normalize, Matrix};
use crate::sampler::{LabeledBatch, PairBatch};

/// Hyperparameters shared across the loss family.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct LossHyper {
    /// Softmax temperature dividing similarities.
    pub tau: f64,
    /// Triplet hinge margin.
    pub margin: f64,
    /// Weight of the drift penalty in composite objectives.
    pub alpha: f64,
    /// Logit scale for the angular-margin loss.
    pub arc_scale: f64,
    /// Additive angular margin in radians.
    pub arc_margin: f64,
    pub triplet_metric: TripletMetric,
}

impl Default for LossHyper {
    fn default() -> Self {
        Self {
            tau: 0.1,
            margin: 0.2,
            alpha: 0.0,
            arc_scale: 64.0,
            arc_margin: 0.5,
            triplet_metric: TripletMetric::Euclidean,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TripletMetric {
    Euclidean,
    Cosine,
}

/// A scalar objective together with gradients for one parameter grouping.
#[derive(Clone, Debug)]
pub struct LossValue<G> {
    pub value: f64,
    pub grads: G,
}

/// Gradients with respect to the two embedding arguments of a pair loss.
#[derive(Clone, Debug)]
pub struct PairGrads {
    pub left: Matrix,
    pub right: Matrix,
}

#[derive(Clone, Debug)]
pub struct TripletGrads {
    pub anchor: Matrix,
    pub positive: Matrix,
    pub negative: Matrix,
}

#[derive(Clone, Debug)]
pub struct ArcGrads {
    pub embeddings: Matrix,
    pub class_weights: Matrix,
}

/// Gradients for everything a training step can touch: the vision encoder
/// and, when present, a trainable head (caption table or class weights).
#[derive(Clone, Debug)]
pub struct ModelGrads {
    pub encoder: EncoderGrads,
    pub head: Option<Matrix>,
}

/// Composite objective broken down for logging: `value` is always
/// `task_term + alpha * drift_term`.
#[derive(Clone, Debug)]
pub struct Objective {
    pub value: f64,
    pub task_term: f64,
    pub drift_term: f64,
    pub grads: ModelGrads,
}

fn check_finite(value: f64, context: &'static str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { context })
    }
}

fn check_same_shape(a: &Matrix, b: &Matrix, context: &'static str) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::DimMismatch {
            context,
            expected: a.rows() * a.cols(),
            found: b.rows() * b.cols(),
        });
    }
    Ok(())
}

/// Backpropagates a gradient on row-normalized vectors to the raw rows:
/// d(u/|u|) pushes g to (g - (g.uhat) uhat) / |u|.
fn normalize_backward(raw: &Matrix, unit: &Matrix, grad_unit: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(raw.rows(), raw.cols());
    for i in 0..raw.rows() {
        let n = raw.row_norm(i);
        let uhat = unit.row(i);
        let g = grad_unit.row(i);
        let proj = dot(g, uhat);
        for (o, (&gv, &uv)) in out.row_mut(i).iter_mut().zip(g.iter().zip(uhat)) {
            *o = (gv - proj * uv) / n;
        }
    }
    out
}

/// Row-wise log-sum-exp of `m / tau`, returning (lse per row, softmax probs).
fn row_softmax_lse(m: &Matrix, tau: f64) -> (Vec<f64>, Matrix) {
    let mut lse = Vec::with_capacity(m.rows());
    let mut probs = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        let row = m.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / tau));
        let mut sum = 0.0;
        for (p, &v) in probs.row_mut(i).iter_mut().zip(row) {
            *p = (v / tau - max).exp();
            sum += *p;
        }
        for p in probs.row_mut(i) {
            *p /= sum;
        }
        lse.push(max + sum.ln());
    }
    (lse, probs)
}

/// In-batch contrastive loss: for each anchor row i of `u`, the positive is
/// row i of `v` and the denominator runs over all rows of `v` (positive
/// included). Averaged over anchors.
pub fn contrastive_loss(u: &Matrix, v: &Matrix, tau: f64) -> Result<LossValue<PairGrads>> {
    check_same_shape(u, v, "contrastive batch")?;
    if tau <= 0.0 {
        return Err(Error::InvalidConfig(format!("tau must be > 0, got {tau}")));
    }
    let b = u.rows();
    let un = row_l2_normalize(u)?;
    let vn = row_l2_normalize(v)?;
    let sims = un.matmul_tb(&vn)?;
    let (lse, probs) = row_softmax_lse(&sims, tau);

    let mut value = 0.0;
    for i in 0..b {
        value += lse[i] - sims.get(i, i) / tau;
    }
    value /= b as f64;

    // d value / d sims[i][j] = (p_ij - delta_ij) / (B tau)
    let mut gsims = probs;
    for i in 0..b {
        let v = gsims.get(i, i);
        gsims.set(i, i, v - 1.0);
    }
    let gsims = gsims.scale(1.0 / (b as f64 * tau));
    let grad_un = gsims.matmul(&vn)?;
    let grad_vn = gsims.matmul_ta(&un)?;

    Ok(LossValue {
        value: check_finite(value, "contrastive_loss")?,
        grads: PairGrads {
            left: normalize_backward(u, &un, &grad_un),
            right: normalize_backward(v, &vn, &grad_vn),
        },
    })
}

/// Symmetric two-direction contrastive loss over one similarity matrix:
/// the image-to-text direction softmaxes rows, the text-to-image direction
/// softmaxes columns, and the two are averaged.
pub fn clip_symmetric_loss(img: &Matrix, txt: &Matrix, tau: f64) -> Result<LossValue<PairGrads>> {
    check_same_shape(img, txt, "symmetric contrastive batch")?;
    if tau <= 0.0 {
        return Err(Error::InvalidConfig(format!("tau must be > 0, got {tau}")));
    }
    let b = img.rows();
    let inorm = row_l2_normalize(img)?;
    let tnorm = row_l2_normalize(txt)?;
    let sims = inorm.matmul_tb(&tnorm)?;
    let (lse_row, p_row) = row_softmax_lse(&sims, tau);
    let sims_t = sims.transpose();
    let (lse_col, p_col_t) = row_softmax_lse(&sims_t, tau);
    let p_col = p_col_t.transpose();

    let mut value = 0.0;
    for i in 0..b {
        value += (lse_row[i] - sims.get(i, i) / tau) + (lse_col[i] - sims.get(i, i) / tau);
    }
    value /= 2.0 * b as f64;

    let mut gsims = Matrix::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            let delta = if i == j { 1.0 } else { 0.0 };
            let g = (p_row.get(i, j) - delta) + (p_col.get(i, j) - delta);
            gsims.set(i, j, g / (2.0 * b as f64 * tau));
        }
    }
    let grad_in = gsims.matmul(&tnorm)?;
    let grad_tn = gsims.matmul_ta(&inorm)?;

    Ok(LossValue {
        value: check_finite(value, "clip_symmetric_loss")?,
        grads: PairGrads {
            left: normalize_backward(img, &inorm, &grad_in),
            right: normalize_backward(txt, &tnorm, &grad_tn),
        },
    })
}

fn pair_distance(a: &[f64], b: &[f64], metric: TripletMetric) -> Result<f64> {
    match metric {
        TripletMetric::Euclidean => {
            Ok(a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<f64>().sqrt())
        }
        TripletMetric::Cosine => {
            let (na, nb) = (l2_norm(a), l2_norm(b));
            if na <= 1e-12 || nb <= 1e-12 {
                return Err(Error::ZeroRow { row: 0 });
            }
            Ok(1.0 - dot(a, b) / (na * nb))
        }
    }
}

/// Per-row hinge arguments D(a,p) - D(a,n) + margin; exposed so callers can
/// sample away from the kink before differentiating.
pub fn triplet_slacks(
    a: &Matrix,
    p: &Matrix,
    n: &Matrix,
    margin: f64,
    metric: TripletMetric,
) -> Result<Vec<f64>> {
    check_same_shape(a, p, "triplet anchor/positive")?;
    check_same_shape(a, n, "triplet anchor/negative")?;
    (0..a.rows())
        .map(|i| {
            Ok(pair_distance(a.row(i), p.row(i), metric)?
                - pair_distance(a.row(i), n.row(i), metric)?
                + margin)
        })
        .collect()
}

// d D(a,b) / d a for the two metrics; the Euclidean direction is defined
// as zero when the points coincide (subgradient choice).
fn distance_grad_wrt_first(a: &[f64], b: &[f64], metric: TripletMetric) -> Vec<f64> {
    match metric {
        TripletMetric::Euclidean => {
            let d: f64 = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            if d <= 1e-12 {
                return vec![0.0; a.len()];
            }
            a.iter().zip(b).map(|(&x, &y)| (x - y) / d).collect()
        }
        TripletMetric::Cosine => {
            let (na, nb) = (l2_norm(a), l2_norm(b));
            let c = dot(a, b) / (na * nb);
            a.iter()
                .zip(b)
                .map(|(&x, &y)| -(y / (na * nb) - c * x / (na * na)))
                .collect()
        }
    }
}

/// Hinge over D(anchor,positive) - D(anchor,negative) + margin, averaged
/// over rows. The subgradient at zero slack is zero (hinge inactive).
pub fn triplet_loss(
    a: &Matrix,
    p: &Matrix,
    n: &Matrix,
    margin: f64,
    metric: TripletMetric,
) -> Result<LossValue<TripletGrads>> {
    if margin < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "margin must be >= 0, got {margin}"
        )));
    }
    let slacks = triplet_slacks(a, p, n, margin, metric)?;
    let b = a.rows();
    let value = slacks.iter().map(|s| s.max(0.0)).sum::<f64>() / b as f64;

    let mut ga = Matrix::zeros(b, a.cols());
    let mut gp = Matrix::zeros(b, a.cols());
    let mut gn = Matrix::zeros(b, a.cols());
    let inv_b = 1.0 / b as f64;
    for i in 0..b {
        if slacks[i] <= 0.0 {
            continue;
        }
        let dp_da = distance_grad_wrt_first(a.row(i), p.row(i), metric);
        let dn_da = distance_grad_wrt_first(a.row(i), n.row(i), metric);
        let dp_dp = distance_grad_wrt_first(p.row(i), a.row(i), metric);
        let dn_dn = distance_grad_wrt_first(n.row(i), a.row(i), metric);
        for j in 0..a.cols() {
            ga.set(i, j, inv_b * (dp_da[j] - dn_da[j]));
            gp.set(i, j, inv_b * dp_dp[j]);
            gn.set(i, j, -inv_b * dn_dn[j]);
        }
    }

    Ok(LossValue {
        value: check_finite(value, "triplet_loss")?,
        grads: TripletGrads {
            anchor: ga,
            positive: gp,
            negative: gn,
        },
    })
}

/// Additive angular-margin cross-entropy: logits are `scale * cos(theta_j)`
/// with the target class logit replaced by `scale * cos(theta_y + margin)`.
pub fn arc_margin_loss(
    emb: &Matrix,
    labels: &[usize],
    class_weights: &Matrix,
    scale: f64,
    margin: f64,
) -> Result<LossValue<ArcGrads>> {
    if labels.len() != emb.rows() {
        return Err(Error::DimMismatch {
            context: "arc margin labels",
            expected: emb.rows(),
            found: labels.len(),
        });
    }
    if emb.cols() != class_weights.cols() {
        return Err(Error::DimMismatch {
            context: "arc margin feature dimension",
            expected: emb.cols(),
            found: class_weights.cols(),
        });
    }
    let classes = class_weights.rows();
    for &l in labels {
        if l >= classes {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
    }

    let b = emb.rows();
    let en = row_l2_normalize(emb)?;
    let wn = row_l2_normalize(class_weights)?;
    let cos = en.matmul_tb(&wn)?;

    // Build margin-shifted logits and remember the chain factor for the
    // target entry: d cos(theta + m) / d cos(theta) = sin(theta+m)/sin(theta).
    let mut logits = cos.scale(scale);
    let mut target_chain = vec![0.0; b];
    for (i, &y) in labels.iter().enumerate() {
        let c = cos.get(i, y).clamp(-1.0, 1.0);
        let theta = c.acos();
        logits.set(i, y, scale * (theta + margin).cos());
        let sin_theta = theta.sin().max(1e-12);
        target_chain[i] = (theta + margin).sin() / sin_theta;
    }

    let (lse, probs) = row_softmax_lse(&logits, 1.0);
    let mut value = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        value += lse[i] - logits.get(i, y);
    }
    value /= b as f64;

    // Gradient on the cosine matrix.
    let mut gcos = Matrix::zeros(b, classes);
    let inv_b = 1.0 / b as f64;
    for (i, &y) in labels.iter().enumerate() {
        for j in 0..classes {
            let delta = if j == y { 1.0 } else { 0.0 };
            let glogit = inv_b * (probs.get(i, j) - delta);
            let chain = if j == y { scale * target_chain[i] } else { scale };
            gcos.set(i, j, glogit * chain);
        }
    }
    let grad_en = gcos.matmul(&wn)?;
    let grad_wn = gcos.matmul_ta(&en)?;

    Ok(LossValue {
        value: check_finite(value, "arc_margin_loss")?,
        grads: ArcGrads {
            embeddings: normalize_backward(emb, &en, &grad_en),
            class_weights: normalize_backward(class_weights, &wn, &grad_wn),
        },
    })
}

/// Mean squared distance between current and frozen embeddings over the
/// batch. Gradient flows only into the live parameters.
pub fn similarity_loss(
    params: &EncoderParams,
    snapshot: &EncoderSnapshot,
    x: &Matrix,
) -> Result<LossValue<EncoderGrads>> {
    let b = x.rows();
    let (emb, trace) = forward_vision_traced(params, x)?;
    let frozen = forward_vision(snapshot.params(), x)?;
    let diff = emb.sub(&frozen)?;
    let value = diff.data().iter().map(|v| v * v).sum::<f64>() / b as f64;
    let grads = backward_vision(params, &trace, &diff.scale(2.0 / b as f64))?;
    Ok(LossValue {
        value: check_finite(value, "similarity_loss")?,
        grads,
    })
}

fn mean_row_sumsq(diff: &Matrix) -> f64 {
    diff.data().iter().map(|v| v * v).sum::<f64>() / diff.rows() as f64
}

/// Image-caption objective: symmetric contrastive term plus `alpha` times
/// the mean drift of the image embeddings. Gradients cover the encoder and
/// the caption table (duplicate captions accumulate).
pub fn classification_objective(
    params: &EncoderParams,
    table: &CaptionTable,
    snapshot: &EncoderSnapshot,
    batch: &LabeledBatch,
    hyper: &LossHyper,
) -> Result<Objective> {
    let b = batch.images.rows();
    if b == 0 {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let (img_emb, trace) = forward_vision_traced(params, &batch.images)?;
    let txt_emb = forward_text(table, &batch.captions)?;
    let clip = clip_symmetric_loss(&img_emb, &txt_emb, hyper.tau)?;

    let frozen = forward_vision(snapshot.params(), &batch.images)?;
    let diff = img_emb.sub(&frozen)?;
    let drift_term = mean_row_sumsq(&diff);
    let value = clip.value + hyper.alpha * drift_term;

    let mut grad_emb = clip.grads.left;
    grad_emb.add_assign(&diff.scale(2.0 * hyper.alpha / b as f64))?;
    let encoder = backward_vision(params, &trace, &grad_emb)?;

    let mut head = Matrix::zeros(table.len(), txt_emb.cols());
    for i in 0..b {
        let r = table.row_of(&batch.captions[i])?;
        for (h, &g) in head.row_mut(r).iter_mut().zip(clip.grads.right.row(i)) {
            *h += g;
        }
    }

    Ok(Objective {
        value: check_finite(value, "classification_objective")?,
        task_term: clip.value,
        drift_term,
        grads: ModelGrads {
            encoder,
            head: Some(head),
        },
    })
}

fn forward_text(table: &CaptionTable, captions: &[String]) -> Result<Matrix> {
    crate::encoder::forward_text(table, captions)
}

/// Image-image objective over aligned positive pairs: symmetric contrastive
/// term plus `alpha / B * sum_i (drift(U_i) + drift(V_i))`.
pub fn pairwise_objective(
    params: &EncoderParams,
    snapshot: &EncoderSnapshot,
    batch: &PairBatch,
    hyper: &LossHyper,
) -> Result<Objective> {
    let b = batch.u.rows();
    if b == 0 {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    check_same_shape(&batch.u, &batch.v, "pair batch views")?;
    let mut seen = std::collections::BTreeSet::new();
    for &id in &batch.identity_ids {
        if !seen.insert(id) {
            return Err(Error::DuplicateIdentity(id));
        }
    }

    let (u_emb, tr_u) = forward_vision_traced(params, &batch.u)?;
    let (v_emb, tr_v) = forward_vision_traced(params, &batch.v)?;
    let clip = clip_symmetric_loss(&u_emb, &v_emb, hyper.tau)?;

    let u_frozen = forward_vision(snapshot.params(), &batch.u)?;
    let v_frozen = forward_vision(snapshot.params(), &batch.v)?;
    let du = u_emb.sub(&u_frozen)?;
    let dv = v_emb.sub(&v_frozen)?;
    let drift_term = mean_row_sumsq(&du) + mean_row_sumsq(&dv);
    let value = clip.value + hyper.alpha * drift_term;

    let mut grad_u = clip.grads.left;
    grad_u.add_assign(&du.scale(2.0 * hyper.alpha / b as f64))?;
    let mut grad_v = clip.grads.right;
    grad_v.add_assign(&dv.scale(2.0 * hyper.alpha / b as f64))?;

    let mut encoder = backward_vision(params, &tr_u, &grad_u)?;
    encoder.add_assign(&backward_vision(params, &tr_v, &grad_v)?)?;

    Ok(Objective {
        value: check_finite(value, "pairwise_objective")?,
        task_term: clip.value,
        drift_term,
        grads: ModelGrads {
            encoder,
            head: None,
        },
    })
}
