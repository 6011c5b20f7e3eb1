//! Seeded generators for the synthetic benchmark data: Gaussian class (or
//! identity) clusters in input space, pushed through per-domain linear maps.
//!
//! Domain 0 is the in-distribution domain (its map is the identity); domains
//! >= 1 apply a blend `(1 - lambda) I + lambda A_m` of the identity with a
//! seeded random invertible map, so `domain_shift_strength` is a monotone
//! shift knob and `lambda = 0` is a null-shift control.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Classification,
    Identities,
}

/// Generation parameters; one spec fully determines a dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    /// Classes (or identities) present only in the pretraining and OOD splits.
    pub held_out_classes: Vec<usize>,
    pub num_domains: usize,
    pub input_dim: usize,
    pub samples_per_class_per_domain: usize,
    pub noise_sigma: f64,
    pub domain_shift_strength: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.input_dim == 0 || self.samples_per_class_per_domain == 0 {
            return Err(Error::InvalidSpec(
                "num_classes, input_dim and samples_per_class_per_domain must be positive".into(),
            ));
        }
        if self.num_domains < 2 {
            return Err(Error::InvalidSpec("need at least two domains".into()));
        }
        if self.held_out_classes.iter().any(|&c| c >= self.num_classes) {
            return Err(Error::InvalidSpec(
                "held_out_classes must lie in [0, num_classes)".into(),
            ));
        }
        if self.held_out_classes.len() >= self.num_classes {
            return Err(Error::InvalidSpec(
                "at least one class must remain for fine-tuning".into(),
            ));
        }
        if self.noise_sigma < 0.0 || self.domain_shift_strength < 0.0 {
            return Err(Error::InvalidSpec(
                "noise_sigma and domain_shift_strength must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// One data point; `label` is a class id or identity id depending on kind.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub domain: usize,
    pub label: usize,
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub input_dim: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn features_matrix(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.len() * self.input_dim);
        for s in &self.samples {
            data.extend_from_slice(&s.features);
        }
        Matrix::new(self.len(), self.input_dim, data).expect("consistent sample widths")
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Sorted distinct labels present in the dataset.
    pub fn distinct_labels(&self) -> Vec<usize> {
        let set: std::collections::BTreeSet<usize> = self.labels().into_iter().collect();
        set.into_iter().collect()
    }

    /// Sample indices grouped by label, in sorted label order.
    pub fn by_label(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            map.entry(s.label).or_default().push(i);
        }
        map
    }
}

/// The four generated splits plus the spec that produced them.
#[derive(Clone, Debug)]
pub struct DatasetSplits {
    pub kind: DatasetKind,
    pub spec: SyntheticSpec,
    pub pretrain: Dataset,
    pub finetune_id: Dataset,
    pub test_id: Dataset,
    pub test_ood: Dataset,
}

pub const SPLIT_NAMES: [&str; 4] = ["pretrain", "finetune_id", "test_id", "test_ood"];

impl DatasetSplits {
    pub fn split(&self, name: &str) -> Result<&Dataset> {
        match name {
            "pretrain" => Ok(&self.pretrain),
            "finetune_id" => Ok(&self.finetune_id),
            "test_id" => Ok(&self.test_id),
            "test_ood" => Ok(&self.test_ood),
            other => Err(Error::InvalidConfig(format!("unknown split {other:?}"))),
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.spec.num_classes).map(class_name).collect()
    }
}

pub fn class_name(id: usize) -> String {
    format!("class_{id}")
}

/// The deterministic geometry behind a spec: class prototypes and blended
/// per-domain maps, reproducible from the spec alone. Both the split
/// generator and the pretraining view sampler draw through this.
pub struct Renderer {
    spec: SyntheticSpec,
    prototypes: Matrix,
    /// Blended per-domain maps; entry 0 is the identity.
    domain_maps: Vec<Matrix>,
}

impl Renderer {
    pub fn from_spec(spec: &SyntheticSpec) -> Result<Renderer> {
        Self::with_rng(spec, &mut Rng::new(spec.seed))
    }

    fn with_rng(spec: &SyntheticSpec, rng: &mut Rng) -> Result<Renderer> {
        spec.validate()?;
        let d = spec.input_dim;
        let prototypes = rng.normal_matrix(spec.num_classes, d);
        let lambda = spec.domain_shift_strength;
        let mut domain_maps = Vec::with_capacity(spec.num_domains);
        for m in 0..spec.num_domains {
            let mut map = Matrix::zeros(d, d);
            if m == 0 {
                for i in 0..d {
                    map.set(i, i, 1.0);
                }
            } else {
                // Random invertible map at roughly unit scale, blended with
                // the identity by lambda.
                let a = rng.normal_matrix(d, d).scale(1.0 / (d as f64).sqrt());
                for i in 0..d {
                    for j in 0..d {
                        let identity = if i == j { 1.0 } else { 0.0 };
                        map.set(i, j, (1.0 - lambda) * identity + lambda * a.get(i, j));
                    }
                }
            }
            domain_maps.push(map);
        }
        Ok(Renderer {
            spec: spec.clone(),
            prototypes,
            domain_maps,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn num_domains(&self) -> usize {
        self.spec.num_domains
    }

    /// A latent-space draw for `class`: prototype plus sample noise.
    pub fn sample_latent(&self, class: usize, rng: &mut Rng) -> Vec<f64> {
        let mut latent = self.prototypes.row(class).to_vec();
        for v in latent.iter_mut() {
            *v += self.spec.noise_sigma * rng.normal();
        }
        latent
    }

    /// Applies the domain map to a latent vector.
    pub fn render(&self, latent: &[f64], domain: usize) -> Vec<f64> {
        let map = &self.domain_maps[domain];
        (0..self.spec.input_dim)
            .map(|i| crate::matrix::dot(map.row(i), latent))
            .collect()
    }
}

struct Generator {
    renderer: Renderer,
    rng: Rng,
}

impl Generator {
    fn new(spec: &SyntheticSpec) -> Result<Generator> {
        // One seed, one stream: geometry first, then every sample draw.
        let mut rng = Rng::new(spec.seed);
        let renderer = Renderer::with_rng(spec, &mut rng)?;
        Ok(Generator { renderer, rng })
    }

    fn spec(&self) -> &SyntheticSpec {
        &self.renderer.spec
    }

    fn sample(&mut self, class: usize, domain: usize) -> Sample {
        let latent = self.renderer.sample_latent(class, &mut self.rng);
        Sample {
            domain,
            label: class,
            features: self.renderer.render(&latent, domain),
        }
    }

    fn fill(&mut self, classes: &[usize], domains: &[usize], per_combo: usize) -> Dataset {
        let mut samples = Vec::new();
        for &domain in domains {
            for &class in classes {
                for _ in 0..per_combo {
                    samples.push(self.sample(class, domain));
                }
            }
        }
        Dataset {
            input_dim: self.spec().input_dim,
            samples,
        }
    }

    fn splits(mut self, kind: DatasetKind) -> DatasetSplits {
        let spec = self.spec().clone();
        let all_classes: Vec<usize> = (0..spec.num_classes).collect();
        let kept: Vec<usize> = all_classes
            .iter()
            .copied()
            .filter(|c| !spec.held_out_classes.contains(c))
            .collect();
        let all_domains: Vec<usize> = (0..spec.num_domains).collect();
        let ood_domains: Vec<usize> = (1..spec.num_domains).collect();
        let n = spec.samples_per_class_per_domain;

        let pretrain = self.fill(&all_classes, &all_domains, n);
        let finetune_id = self.fill(&kept, &[0], n);
        let test_id = self.fill(&kept, &[0], n);
        let test_ood = self.fill(&all_classes, &ood_domains, n);
        DatasetSplits {
            kind,
            spec,
            pretrain,
            finetune_id,
            test_id,
            test_ood,
        }
    }
}

/// Multi-domain labeled dataset with held-out classes confined to the
/// pretraining and OOD splits.
pub fn generate_classification(spec: &SyntheticSpec) -> Result<DatasetSplits> {
    spec.validate()?;
    Ok(Generator::new(spec)?.splits(DatasetKind::Classification))
}

/// Identity-labeled dataset for verification tasks; every identity keeps at
/// least two images per split it appears in, so positive pairs always exist.
pub fn generate_identities(spec: &SyntheticSpec) -> Result<DatasetSplits> {
    spec.validate()?;
    if spec.samples_per_class_per_domain < 2 {
        return Err(Error::InvalidSpec(
            "identity datasets need at least two images per identity per domain".into(),
        ));
    }
    Ok(Generator::new(spec)?.splits(DatasetKind::Identities))
}

use crate::textfmt::csv_f64;

/// Writes `data.csv` (`split,domain,class_or_identity,x0..x{d-1}`) and
/// `spec.json` into `dir`.
pub fn save_splits(splits: &DatasetSplits, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let d = splits.spec.input_dim;
    let mut csv = String::from("split,domain,class_or_identity");
    for j in 0..d {
        let _ = write!(csv, ",x{j}");
    }
    csv.push('\n');
    for name in SPLIT_NAMES {
        let ds = splits.split(name)?;
        for s in &ds.samples {
            let _ = write!(csv, "{name},{},{}", s.domain, s.label);
            for v in &s.features {
                let _ = write!(csv, ",{}", csv_f64(*v));
            }
            csv.push('\n');
        }
    }
    std::fs::write(dir.join("data.csv"), csv)?;

    let doc = serde_json::json!({ "kind": splits.kind, "spec": splits.spec });
    std::fs::write(dir.join("spec.json"), serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

/// Loads a dataset directory written by [`save_splits`].
pub fn load_splits(dir: &Path) -> Result<DatasetSplits> {
    let spec_text = std::fs::read_to_string(dir.join("spec.json"))?;
    let doc: serde_json::Value = serde_json::from_str(&spec_text)?;
    let kind: DatasetKind = serde_json::from_value(
        doc.get("kind")
            .cloned()
            .ok_or_else(|| Error::DataFormat("spec.json missing kind".into()))?,
    )?;
    let spec: SyntheticSpec = serde_json::from_value(
        doc.get("spec")
            .cloned()
            .ok_or_else(|| Error::DataFormat("spec.json missing spec".into()))?,
    )?;

    let csv = std::fs::read_to_string(dir.join("data.csv"))?;
    let mut lines = csv.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::DataFormat("empty data.csv".into()))?;
    let expected_cols = 3 + spec.input_dim;
    if header.split(',').count() != expected_cols {
        return Err(Error::DataFormat(format!(
            "header has {} columns, expected {expected_cols}",
            header.split(',').count()
        )));
    }

    let empty = || Dataset {
        input_dim: spec.input_dim,
        samples: Vec::new(),
    };
    let (mut pretrain, mut finetune_id, mut test_id, mut test_ood) =
        (empty(), empty(), empty(), empty());
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected_cols {
            return Err(Error::DataFormat(format!(
                "line {}: {} columns, expected {expected_cols}",
                lineno + 2,
                fields.len()
            )));
        }
        let parse_usize = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| Error::DataFormat(format!("line {}: {e}", lineno + 2)))
        };
        let domain = parse_usize(fields[1])?;
        let label = parse_usize(fields[2])?;
        let mut features = Vec::with_capacity(spec.input_dim);
        for f in &fields[3..] {
            features.push(
                f.parse::<f64>()
                    .map_err(|e| Error::DataFormat(format!("line {}: {e}", lineno + 2)))?,
            );
        }
        let sample = Sample {
            domain,
            label,
            features,
        };
        match fields[0] {
            "pretrain" => pretrain.samples.push(sample),
            "finetune_id" => finetune_id.samples.push(sample),
            "test_id" => test_id.samples.push(sample),
            "test_ood" => test_ood.samples.push(sample),
            other => {
                return Err(Error::DataFormat(format!(
                    "line {}: unknown split {other:?}",
                    lineno + 2
                )))
            }
        }
    }
    Ok(DatasetSplits {
        kind,
        spec,
        pretrain,
        finetune_id,
        test_id,
        test_ood,
    })
}
