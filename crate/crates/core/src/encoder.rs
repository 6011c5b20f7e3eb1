//! The trainable vision encoder (a small feedforward net), its frozen
//! pretrained snapshot, and the caption-embedding table that plays the role
//! of a text encoder.
//!
//! Hidden layers apply the configured activation; the final layer is affine.
//! Drift is always measured on the unnormalized final embeddings, so the
//! penalty keeps its signal even far from the unit sphere; contrastive terms
//! normalize their own copies.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the post-activation value.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One affine layer: `weight` is (d_out x d_in), bias has length d_out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Shape description used to initialize fresh encoders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderArch {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
}

impl Default for EncoderArch {
    fn default() -> Self {
        Self {
            input_dim: 12,
            hidden_dims: vec![32],
            embed_dim: 16,
            activation: Activation::Tanh,
        }
    }
}

/// Trainable parameters of the vision encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub layers: Vec<Layer>,
    pub activation: Activation,
    pub embed_dim: usize,
}

impl EncoderParams {
    /// Seeded Gaussian init with 1/sqrt(fan_in) weight scale and zero biases.
    pub fn init(arch: &EncoderArch, rng: &mut Rng) -> Self {
        let mut dims = vec![arch.input_dim];
        dims.extend_from_slice(&arch.hidden_dims);
        dims.push(arch.embed_dim);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (d_in, d_out) = (w[0], w[1]);
                let scale = 1.0 / (d_in as f64).sqrt();
                Layer {
                    weight: rng.normal_matrix(d_out, d_in).scale(scale),
                    bias: vec![0.0; d_out],
                }
            })
            .collect();
        Self {
            layers,
            activation: arch.activation,
            embed_dim: arch.embed_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.cols())
    }

    /// Checks the layer-chaining invariant and the final output width.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidConfig("encoder has no layers".into()));
        }
        for pair in self.layers.windows(2) {
            if pair[1].weight.cols() != pair[0].weight.rows() {
                return Err(Error::DimMismatch {
                    context: "encoder layer chaining",
                    expected: pair[0].weight.rows(),
                    found: pair[1].weight.cols(),
                });
            }
        }
        for layer in &self.layers {
            if layer.bias.len() != layer.weight.rows() {
                return Err(Error::DimMismatch {
                    context: "encoder layer bias",
                    expected: layer.weight.rows(),
                    found: layer.bias.len(),
                });
            }
        }
        let last = self.layers.last().expect("nonempty").weight.rows();
        if last != self.embed_dim {
            return Err(Error::DimMismatch {
                context: "encoder output width",
                expected: self.embed_dim,
                found: last,
            });
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }

    /// Flat view: per layer, weight entries row-major then bias entries.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Writes a flat vector (same layout as [`flatten`](Self::flatten)) back.
    pub fn assign_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::ShapeMismatch {
                expected: self.param_count(),
                found: flat.len(),
            });
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weight.data().len();
            l.weight.data_mut().copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// Order-sensitive FNV hash over the raw parameter bits; used to assert
    /// snapshot immutability across training runs.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |v: f64| {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for l in &self.layers {
            l.weight.data().iter().copied().for_each(&mut feed);
            l.bias.iter().copied().for_each(&mut feed);
        }
        h
    }
}

/// Frozen copy of the pretrained parameters. No mutable access is exposed,
/// so the reference the drift penalty is measured against cannot change.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderSnapshot(EncoderParams);

impl EncoderSnapshot {
    pub fn of(params: &EncoderParams) -> Self {
        Self(params.clone())
    }

    pub fn params(&self) -> &EncoderParams {
        &self.0
    }

    pub fn fingerprint(&self) -> u64 {
        self.0.fingerprint()
    }
}

/// Gradients mirroring [`EncoderParams`] layer by layer.
#[derive(Clone, Debug)]
pub struct EncoderGrads {
    pub layers: Vec<Layer>,
}

impl EncoderGrads {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &EncoderGrads) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::ShapeMismatch {
                expected: self.layers.len(),
                found: other.layers.len(),
            });
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.add_assign(&b.weight)?;
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale_assign(&mut self, s: f64) {
        for l in &mut self.layers {
            for v in l.weight.data_mut() {
                *v *= s;
            }
            for v in &mut l.bias {
                *v *= s;
            }
        }
    }

    /// Same layout as [`EncoderParams::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }
}

/// Per-layer inputs captured by a forward pass, enough to backpropagate.
/// `layer_inputs[k]` is what layer k consumed; hidden post-activations are
/// the next entry, so activation derivatives come straight from them.
pub struct ForwardTrace {
    layer_inputs: Vec<Matrix>,
}

/// Forward pass: hidden layers apply the activation, final layer is affine.
pub fn forward_vision(params: &EncoderParams, x: &Matrix) -> Result<Matrix> {
    forward_vision_traced(params, x).map(|(out, _)| out)
}

pub fn forward_vision_traced(
    params: &EncoderParams,
    x: &Matrix,
) -> Result<(Matrix, ForwardTrace)> {
    if x.cols() != params.input_dim() {
        return Err(Error::DimMismatch {
            context: "encoder input width",
            expected: params.input_dim(),
            found: x.cols(),
        });
    }
    let n_layers = params.layers.len();
    let mut inputs = Vec::with_capacity(n_layers);
    let mut h = x.clone();
    for (k, layer) in params.layers.iter().enumerate() {
        let mut a = h.matmul_tb(&layer.weight)?;
        a.add_row_broadcast(&layer.bias)?;
        inputs.push(h);
        h = if k + 1 < n_layers {
            a.map(|v| params.activation.apply(v))
        } else {
            a
        };
    }
    Ok((h, ForwardTrace { layer_inputs: inputs }))
}

/// Backpropagates a gradient on the final embeddings into parameter space.
pub fn backward_vision(
    params: &EncoderParams,
    trace: &ForwardTrace,
    grad_output: &Matrix,
) -> Result<EncoderGrads> {
    let n_layers = params.layers.len();
    let mut grads = EncoderGrads::zeros_like(params);
    let mut dh = grad_output.clone();
    for k in (0..n_layers).rev() {
        let da = if k + 1 < n_layers {
            // dh is the gradient on the post-activation of layer k, which is
            // the recorded input of layer k+1.
            let post = &trace.layer_inputs[k + 1];
            dh.hadamard(&post.map(|y| params.activation.derivative_from_output(y)))?
        } else {
            dh
        };
        grads.layers[k].weight = da.matmul_ta(&trace.layer_inputs[k])?;
        grads.layers[k].bias = da.col_sums();
        dh = da.matmul(&params.layers[k].weight)?;
    }
    Ok(grads)
}

/// Squared L2 distance between current and snapshot embeddings, one value
/// per input row, computed on unnormalized outputs.
pub fn drift(params: &EncoderParams, snapshot: &EncoderSnapshot, x: &Matrix) -> Result<Vec<f64>> {
    let now = forward_vision(params, x)?;
    let then = forward_vision(snapshot.params(), x)?;
    let diff = now.sub(&then)?;
    Ok((0..diff.rows())
        .map(|i| diff.row(i).iter().map(|v| v * v).sum())
        .collect())
}

/// Learnable per-caption embedding rows standing in for a text encoder.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CaptionTable {
    embeddings: Matrix,
    caption_index: BTreeMap<String, usize>,
}

impl CaptionTable {
    pub fn new(captions: Vec<String>, embeddings: Matrix) -> Result<Self> {
        if captions.len() != embeddings.rows() {
            return Err(Error::DimMismatch {
                context: "caption table rows",
                expected: captions.len(),
                found: embeddings.rows(),
            });
        }
        let mut caption_index = BTreeMap::new();
        for (i, c) in captions.into_iter().enumerate() {
            if caption_index.insert(c.clone(), i).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate caption {c:?}")));
            }
        }
        Ok(Self {
            embeddings,
            caption_index,
        })
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn embeddings_mut(&mut self) -> &mut Matrix {
        &mut self.embeddings
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row_of(&self, caption: &str) -> Result<usize> {
        self.caption_index
            .get(caption)
            .copied()
            .ok_or_else(|| Error::UnknownCaption(caption.to_string()))
    }
}

/// Row i of the result is the table row for caption i.
pub fn forward_text(table: &CaptionTable, captions: &[String]) -> Result<Matrix> {
    let dim = table.embeddings.cols();
    let mut out = Matrix::zeros(captions.len(), dim);
    for (i, caption) in captions.iter().enumerate() {
        let row = table.row_of(caption)?;
        out.row_mut(i).copy_from_slice(table.embeddings.row(row));
    }
    Ok(out)
}

/// On-disk model document. JSON keeps f64 round-trips exact (shortest
/// representation that parses back to the same bits).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub encoder: EncoderParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption_table: Option<CaptionTable>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arc_weights: Option<Matrix>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        ckpt.encoder.validate()?;
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_layer(weight: Matrix, bias: Vec<f64>) -> EncoderParams {
        let embed_dim = weight.rows();
        EncoderParams {
            layers: vec![Layer { weight, bias }],
            activation: Activation::Tanh,
            embed_dim,
        }
    }

    #[test]
    fn identity_network_passes_input_through() {
        let w = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let params = single_layer(w, vec![0.0, 0.0]);
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let y = forward_vision(&params, &x).unwrap();
        assert_eq!(y.row(0), &[1.0, 2.0]);
    }

    #[test]
    fn bias_only_network_repeats_bias() {
        let params = single_layer(Matrix::zeros(2, 3), vec![0.5, -1.0]);
        let x = Matrix::from_rows(&[vec![9.0, 9.0, 9.0], vec![1.0, 2.0, 3.0]]).unwrap();
        let y = forward_vision(&params, &x).unwrap();
        assert_eq!(y.row(0), &[0.5, -1.0]);
        assert_eq!(y.row(1), &[0.5, -1.0]);
    }

    #[test]
    fn forward_is_reproducible_across_inits() {
        let arch = EncoderArch::default();
        let a = EncoderParams::init(&arch, &mut Rng::new(11));
        let b = EncoderParams::init(&arch, &mut Rng::new(11));
        let x = Rng::new(5).normal_matrix(4, arch.input_dim);
        let ya = forward_vision(&a, &x).unwrap();
        let yb = forward_vision(&b, &x).unwrap();
        assert_eq!(ya, yb);
    }

    #[test]
    fn bias_free_linear_layer_is_homogeneous() {
        let w = Rng::new(2).normal_matrix(3, 4);
        let params = single_layer(w, vec![0.0; 3]);
        let x = Rng::new(3).normal_matrix(2, 4);
        let y1 = forward_vision(&params, &x).unwrap();
        let y2 = forward_vision(&params, &x.scale(2.0)).unwrap();
        for (a, b) in y1.data().iter().zip(y2.data()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn drift_is_zero_against_own_snapshot() {
        let params = EncoderParams::init(&EncoderArch::default(), &mut Rng::new(1));
        let snap = EncoderSnapshot::of(&params);
        let x = Rng::new(2).normal_matrix(6, 12);
        let d = drift(&params, &snap, &x).unwrap();
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn drift_matches_hand_computed_value() {
        // f maps everything to the bias, so drift is a pure bias difference.
        let tuned = single_layer(Matrix::zeros(2, 2), vec![1.0, 2.0]);
        let frozen = single_layer(Matrix::zeros(2, 2), vec![0.0, 0.0]);
        let snap = EncoderSnapshot::of(&frozen);
        let x = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let d = drift(&tuned, &snap, &x).unwrap();
        assert_eq!(d, vec![5.0]);
    }

    #[test]
    fn drift_matches_direct_recomputation() {
        let arch = EncoderArch::default();
        let mut rng = Rng::new(77);
        let tuned = EncoderParams::init(&arch, &mut rng);
        let frozen = EncoderParams::init(&arch, &mut rng);
        let snap = EncoderSnapshot::of(&frozen);
        let x = rng.normal_matrix(8, arch.input_dim);
        let d = drift(&tuned, &snap, &x).unwrap();
        // Independent recomputation: two forward passes and a row subtraction.
        let a = forward_vision(&tuned, &x).unwrap();
        let b = forward_vision(&frozen, &x).unwrap();
        for i in 0..8 {
            let direct: f64 = a
                .row(i)
                .iter()
                .zip(b.row(i))
                .map(|(p, q)| (p - q) * (p - q))
                .sum();
            assert!((d[i] - direct).abs() < 1e-15);
        }
    }

    #[test]
    fn snapshot_fingerprint_is_stable_under_param_updates() {
        let mut params = EncoderParams::init(&EncoderArch::default(), &mut Rng::new(8));
        let snap = EncoderSnapshot::of(&params);
        let before = snap.fingerprint();
        let flat: Vec<f64> = params.flatten().iter().map(|v| v + 1.0).collect();
        params.assign_from_flat(&flat).unwrap();
        assert_eq!(before, snap.fingerprint());
        assert_ne!(params.fingerprint(), snap.fingerprint());
    }

    #[test]
    fn caption_lookup_and_duplicates() {
        let table = CaptionTable::new(
            vec!["a photo of a beach".into()],
            Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap(),
        )
        .unwrap();
        let out = forward_text(&table, &["a photo of a beach".into()]).unwrap();
        assert_eq!(out.row(0), &[1.0, 0.0]);

        let out = forward_text(
            &table,
            &["a photo of a beach".into(), "a photo of a beach".into()],
        )
        .unwrap();
        assert_eq!(out.rows(), 2);
        assert_eq!(out.row(0), out.row(1));

        let err = forward_text(&table, &["a photo of a reef".into()]);
        assert!(matches!(err, Err(Error::UnknownCaption(_))));
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = std::env::temp_dir().join(format!("tether-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.json");
        let mut rng = Rng::new(44);
        let ckpt = Checkpoint {
            encoder: EncoderParams::init(&EncoderArch::default(), &mut rng),
            caption_table: Some(
                CaptionTable::new(
                    vec!["a photo of a ridge".into(), "a photo of a mesa".into()],
                    rng.normal_matrix(2, 16),
                )
                .unwrap(),
            ),
            arc_weights: None,
        };
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let before = ckpt.encoder.flatten();
        let after = loaded.encoder.flatten();
        for (a, b) in before.iter().zip(&after) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let tb = ckpt.caption_table.unwrap();
        let ta = loaded.caption_table.unwrap();
        for (a, b) in tb.embeddings().data().iter().zip(ta.embeddings().data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn forward_rejects_wrong_input_width() {
        let params = EncoderParams::init(&EncoderArch::default(), &mut Rng::new(1));
        let x = Matrix::zeros(2, 5);
        assert!(matches!(
            forward_vision(&params, &x),
            Err(Error::DimMismatch { .. })
        ));
    }
}
