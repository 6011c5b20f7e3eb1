//! Evaluation protocols: retrieval at k, zero-shot classification accuracy,
//! 1:1 verification TAR at FAR, per-class cluster variance, and probe-set
//! drift, bundled into a serializable report.
//!
//! Everything downstream of embeddings is cosine-based, so all metrics are
//! invariant to per-row rescaling.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{drift, forward_vision, CaptionTable, EncoderParams, EncoderSnapshot};
use crate::error::{Error, Result};
use crate::matrix::{pairwise_cosine, row_l2_normalize, Matrix};
use crate::sampler::caption_for_class;
use crate::synthdata::Dataset;
use crate::textfmt::csv_f64;

/// Similarity scores split into same-identity and cross-identity pairs.
#[derive(Clone, Debug, Default)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

/// FAR targets reachable with desk-scale impostor counts.
pub const FAR_TARGETS: [f64; 3] = [1e-1, 5e-2, 1e-2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SplitTag {
    Id,
    Ood,
}

/// Named scalar metrics for one split; every rate lies in [0, 1].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metrics: BTreeMap<String, f64>,
    pub tag: SplitTag,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl MetricsReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    /// Single-row CSV: a `tag` column followed by the metrics in name order.
    pub fn to_csv(&self) -> String {
        let mut header = String::from("tag");
        let mut row = format!("{:?}", self.tag).to_uppercase();
        for (name, value) in &self.metrics {
            let _ = write!(header, ",{name}");
            let _ = write!(row, ",{}", csv_f64(*value));
        }
        format!("{header}\n{row}\n")
    }
}

/// Fraction of queries whose true column ranks in the top k by similarity.
/// Ties rank by ascending column index, so results are deterministic.
pub fn retrieval_at_k(
    sim: &Matrix,
    truth: &[usize],
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    let candidates = sim.cols();
    if truth.len() != sim.rows() {
        return Err(Error::DimMismatch {
            context: "retrieval truth length",
            expected: sim.rows(),
            found: truth.len(),
        });
    }
    for &t in truth {
        if t >= candidates {
            return Err(Error::LabelOutOfRange {
                label: t,
                classes: candidates,
            });
        }
    }
    for &k in ks {
        if k == 0 || k > candidates {
            return Err(Error::KOutOfRange { k, max: candidates });
        }
    }

    let mut ranks = Vec::with_capacity(sim.rows());
    for (i, &t) in truth.iter().enumerate() {
        let row = sim.row(i);
        let target = row[t];
        let outranking = row
            .iter()
            .enumerate()
            .filter(|&(j, &s)| s > target || (s == target && j < t))
            .count();
        ranks.push(outranking + 1);
    }

    let q = sim.rows() as f64;
    Ok(ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / q))
        .collect())
}

/// Fraction of rows whose nearest class embedding (by cosine) is the true
/// class. Ties resolve to the lowest class index.
pub fn zero_shot_accuracy(
    img_emb: &Matrix,
    class_emb: &Matrix,
    truth: &[usize],
) -> Result<f64> {
    if truth.len() != img_emb.rows() {
        return Err(Error::DimMismatch {
            context: "accuracy truth length",
            expected: img_emb.rows(),
            found: truth.len(),
        });
    }
    let sims = pairwise_cosine(img_emb, class_emb)?;
    let mut correct = 0usize;
    for (i, &t) in truth.iter().enumerate() {
        if t >= class_emb.rows() {
            return Err(Error::LabelOutOfRange {
                label: t,
                classes: class_emb.rows(),
            });
        }
        let row = sims.row(i);
        let mut best = 0usize;
        for (j, &s) in row.iter().enumerate().skip(1) {
            if s > row[best] {
                best = j;
            }
        }
        if best == t {
            correct += 1;
        }
    }
    Ok(correct as f64 / truth.len() as f64)
}

/// True accept rate at each FAR target. The threshold for a target is the
/// minimum over candidate thresholds (observed impostor scores plus +inf)
/// whose empirical FAR does not exceed the target; accept means score >=
/// threshold. Returns (far_target, tar) pairs in input order.
pub fn tar_at_far(scores: &ScoreSet, far_targets: &[f64]) -> Result<Vec<(f64, f64)>> {
    if scores.genuine.is_empty() || scores.impostor.is_empty() {
        return Err(Error::EmptyScores);
    }
    if scores
        .genuine
        .iter()
        .chain(&scores.impostor)
        .any(|s| !s.is_finite())
    {
        return Err(Error::NonFinite {
            context: "verification scores",
        });
    }
    let mut ascending = scores.impostor.clone();
    ascending.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let m = ascending.len() as f64;

    let mut out = Vec::with_capacity(far_targets.len());
    for &target in far_targets {
        if !(0.0..=1.0).contains(&target) || target == 0.0 {
            return Err(Error::InvalidConfig(format!(
                "FAR target {target} outside (0, 1]"
            )));
        }
        // Scanning distinct impostor values upward, FAR(v) = #(impostor >= v)/M
        // only falls; the first value satisfying the target is the threshold.
        let mut threshold = f64::INFINITY;
        for (i, &v) in ascending.iter().enumerate() {
            if i > 0 && v == ascending[i - 1] {
                continue;
            }
            let far = (ascending.len() - i) as f64 / m;
            if far <= target {
                threshold = v;
                break;
            }
        }
        let tar = scores.genuine.iter().filter(|&&g| g >= threshold).count() as f64
            / scores.genuine.len() as f64;
        out.push((target, tar));
    }
    Ok(out)
}

/// Mean over classes of the per-dimension embedding variance around the
/// class centroid, computed on row-normalized embeddings.
pub fn cluster_variance(emb: &Matrix, labels: &[usize]) -> Result<f64> {
    let unit = row_l2_normalize(emb)?;
    cluster_variance_unnormalized(&unit, labels)
}

fn cluster_variance_unnormalized(emb: &Matrix, labels: &[usize]) -> Result<f64> {
    if emb.rows() == 0 || labels.len() != emb.rows() {
        return Err(Error::EmptyClass);
    }
    let d = emb.cols() as f64;
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    let mut total = 0.0;
    for members in groups.values() {
        let mut centroid = vec![0.0; emb.cols()];
        for &i in members {
            for (c, &e) in centroid.iter_mut().zip(emb.row(i)) {
                *c += e;
            }
        }
        for c in centroid.iter_mut() {
            *c /= members.len() as f64;
        }
        let mut mean_sq = 0.0;
        for &i in members {
            mean_sq += emb
                .row(i)
                .iter()
                .zip(&centroid)
                .map(|(&e, &c)| (e - c) * (e - c))
                .sum::<f64>();
        }
        total += mean_sq / members.len() as f64 / d;
    }
    Ok(total / groups.len() as f64)
}

/// All cosine scores between distinct rows, split by label agreement.
pub fn verification_scores(emb: &Matrix, labels: &[usize]) -> Result<ScoreSet> {
    if labels.len() != emb.rows() {
        return Err(Error::DimMismatch {
            context: "verification labels",
            expected: emb.rows(),
            found: labels.len(),
        });
    }
    let unit = row_l2_normalize(emb)?;
    let mut scores = ScoreSet::default();
    for i in 0..unit.rows() {
        for j in (i + 1)..unit.rows() {
            let s = crate::matrix::dot(unit.row(i), unit.row(j));
            if labels[i] == labels[j] {
                scores.genuine.push(s);
            } else {
                scores.impostor.push(s);
            }
        }
    }
    Ok(scores)
}

/// What to measure on a split.
pub enum Protocol<'a> {
    /// Zero-shot accuracy and retrieval against caption embeddings.
    Classification {
        table: &'a CaptionTable,
        class_names: &'a [String],
    },
    /// 1:1 verification over all image pairs.
    Verification,
}

/// Embeds the split once and computes every applicable metric, including
/// mean drift against the frozen snapshot.
pub fn evaluate(
    params: &EncoderParams,
    snapshot: &EncoderSnapshot,
    data: &Dataset,
    protocol: &Protocol,
    tag: SplitTag,
) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::InvalidConfig("cannot evaluate an empty split".into()));
    }
    let features = data.features_matrix();
    let emb = forward_vision(params, &features)?;
    let labels = data.labels();

    let mut metrics = BTreeMap::new();
    let drifts = drift(params, snapshot, &features)?;
    metrics.insert(
        "mean_drift".to_string(),
        drifts.iter().sum::<f64>() / drifts.len() as f64,
    );
    metrics.insert("cluster_variance".to_string(), cluster_variance(&emb, &labels)?);

    match protocol {
        Protocol::Classification { table, class_names } => {
            // Candidate classes are the ones present in this split; captions
            // come from the table so unseen classes keep their frozen rows.
            let candidates = data.distinct_labels();
            let captions = candidates
                .iter()
                .map(|&c| {
                    let name = class_names.get(c).ok_or(Error::LabelOutOfRange {
                        label: c,
                        classes: class_names.len(),
                    })?;
                    caption_for_class(name)
                })
                .collect::<Result<Vec<_>>>()?;
            let class_emb = crate::encoder::forward_text(table, &captions)?;
            let truth: Vec<usize> = labels
                .iter()
                .map(|l| candidates.binary_search(l).expect("label is a candidate"))
                .collect();

            metrics.insert(
                "accuracy".to_string(),
                zero_shot_accuracy(&emb, &class_emb, &truth)?,
            );
            let sims = pairwise_cosine(&emb, &class_emb)?;
            let ks: Vec<usize> = [1usize, 5, 10]
                .into_iter()
                .filter(|&k| k <= candidates.len())
                .collect();
            for (k, rate) in retrieval_at_k(&sims, &truth, &ks)? {
                metrics.insert(format!("ret@{k}"), rate);
            }
        }
        Protocol::Verification => {
            let scores = verification_scores(&emb, &labels)?;
            for (far, tar) in tar_at_far(&scores, &FAR_TARGETS)? {
                metrics.insert(format!("tar@far={far:e}"), tar);
            }
        }
    }

    Ok(MetricsReport {
        metrics,
        tag,
        config: serde_json::Value::Null,
    })
}

/// CSV dump of embeddings (`id,label,e0..e{d-1}`) for external plotting.
pub fn write_embedding_dump(emb: &Matrix, labels: &[usize], path: &Path) -> Result<()> {
    if labels.len() != emb.rows() {
        return Err(Error::DimMismatch {
            context: "embedding dump labels",
            expected: emb.rows(),
            found: labels.len(),
        });
    }
    let mut out = String::from("id,label");
    for j in 0..emb.cols() {
        let _ = write!(out, ",e{j}");
    }
    out.push('\n');
    for i in 0..emb.rows() {
        let _ = write!(out, "{i},{}", labels[i]);
        for v in emb.row(i) {
            let _ = write!(out, ",{}", csv_f64(*v));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderArch;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn retrieval_diagonal_dominant() {
        let sim = Matrix::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        let r = retrieval_at_k(&sim, &[0, 1], &[1]).unwrap();
        assert_eq!(r[&1], 1.0);
    }

    #[test]
    fn retrieval_partial_and_full_k() {
        let sim = Matrix::from_rows(&[vec![0.1, 0.9], vec![0.2, 0.8]]).unwrap();
        let r = retrieval_at_k(&sim, &[0, 1], &[1, 2]).unwrap();
        assert_eq!(r[&1], 0.5);
        assert_eq!(r[&2], 1.0);
    }

    #[test]
    fn retrieval_k_equal_to_candidates_is_always_one() {
        let mut rng = Rng::new(1);
        for _ in 0..20 {
            let sim = rng.normal_matrix(6, 9);
            let truth: Vec<usize> = (0..6).map(|_| rng.next_index(9)).collect();
            let r = retrieval_at_k(&sim, &truth, &[9]).unwrap();
            assert_eq!(r[&9], 1.0);
        }
    }

    #[test]
    fn retrieval_rejects_bad_k() {
        let sim = Matrix::zeros(2, 3);
        assert!(matches!(
            retrieval_at_k(&sim, &[0, 1], &[4]),
            Err(Error::KOutOfRange { k: 4, max: 3 })
        ));
        assert!(matches!(
            retrieval_at_k(&sim, &[0, 1], &[0]),
            Err(Error::KOutOfRange { k: 0, max: 3 })
        ));
    }

    #[test]
    fn zero_shot_perfect_on_orthonormal_classes() {
        let class_emb = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let img = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 0.5], vec![1.0, 0.0]]).unwrap();
        let acc = zero_shot_accuracy(&img, &class_emb, &[0, 1, 0]).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn zero_shot_tie_goes_to_class_zero() {
        let class_emb = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let img = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert_eq!(zero_shot_accuracy(&img, &class_emb, &[0]).unwrap(), 1.0);
        assert_eq!(zero_shot_accuracy(&img, &class_emb, &[1]).unwrap(), 0.0);
    }

    #[test]
    fn zero_shot_matches_bruteforce_nearest_centroid() {
        let mut rng = Rng::new(5);
        let img = rng.normal_matrix(50, 7);
        let classes = rng.normal_matrix(6, 7);
        let truth: Vec<usize> = (0..50).map(|_| rng.next_index(6)).collect();
        let acc = zero_shot_accuracy(&img, &classes, &truth).unwrap();
        // Brute force: explicit cosine argmax per query.
        let cos = pairwise_cosine(&img, &classes).unwrap();
        let mut correct = 0;
        for i in 0..50 {
            let row = cos.row(i);
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            if best == truth[i] {
                correct += 1;
            }
        }
        assert_eq!(acc, correct as f64 / 50.0);
    }

    #[test]
    fn tar_worked_example() {
        let scores = ScoreSet {
            genuine: vec![0.9, 0.8, 0.4],
            impostor: vec![0.7, 0.3, 0.1, 0.05],
        };
        let out = tar_at_far(&scores, &[0.25]).unwrap();
        assert!((out[0].1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn tar_separable_scores_reach_one() {
        // Any achievable target (>= 1/M) accepts all genuine scores when they
        // sit strictly above every impostor score.
        let mut rng = Rng::new(2);
        let scores = ScoreSet {
            genuine: vec![0.9, 0.95, 0.99],
            impostor: (0..200).map(|_| 0.5 * rng.next_f64()).collect(),
        };
        for far in [0.005, 0.01, 0.34, 1.0] {
            let out = tar_at_far(&scores, &[far]).unwrap();
            assert_eq!(out[0].1, 1.0, "far {far}");
        }
    }

    #[test]
    fn tar_at_far_one_uses_minimum_impostor() {
        let scores = ScoreSet {
            genuine: vec![0.5, 0.05, 0.4],
            impostor: vec![0.3, 0.1, 0.2],
        };
        let out = tar_at_far(&scores, &[1.0]).unwrap();
        // threshold 0.1: genuine >= 0.1 are 0.5 and 0.4.
        assert!((out[0].1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn tar_unreachable_target_gives_zero() {
        let scores = ScoreSet {
            genuine: vec![0.9],
            impostor: vec![0.5, 0.6],
        };
        let out = tar_at_far(&scores, &[0.2]).unwrap();
        assert_eq!(out[0].1, 0.0, "no threshold reaches FAR 0.2 with 2 impostors");
    }

    #[test]
    fn tar_rejects_empty_and_bad_targets() {
        let empty = ScoreSet::default();
        assert!(matches!(tar_at_far(&empty, &[0.1]), Err(Error::EmptyScores)));
        let scores = ScoreSet {
            genuine: vec![0.1],
            impostor: vec![0.2],
        };
        assert!(tar_at_far(&scores, &[0.0]).is_err());
        assert!(tar_at_far(&scores, &[1.5]).is_err());
    }

    #[test]
    fn cluster_variance_singletons_are_zero() {
        let emb = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(cluster_variance(&emb, &[0, 1]).unwrap(), 0.0);
    }

    #[test]
    fn cluster_variance_hand_computed_unnormalized() {
        // Centroid [1,0]; mean squared distance 1; per-dimension 0.5.
        let emb = Matrix::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        let v = cluster_variance_unnormalized(&emb, &[0, 0]).unwrap();
        assert_eq!(v, 0.5);
    }

    #[test]
    fn cluster_variance_matches_two_pass_recomputation() {
        let mut rng = Rng::new(9);
        let emb = rng.normal_matrix(30, 5);
        let labels: Vec<usize> = (0..30).map(|_| rng.next_index(4)).collect();
        let got = cluster_variance(&emb, &labels).unwrap();
        // Oracle: recompute independently on the normalized rows.
        let unit = row_l2_normalize(&emb).unwrap();
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            by_class.entry(l).or_default().push(i);
        }
        let mut acc = 0.0;
        for (_, members) in &by_class {
            let k = members.len() as f64;
            let mut mu = vec![0.0; 5];
            for &i in members {
                for (m, &e) in mu.iter_mut().zip(unit.row(i)) {
                    *m += e / k;
                }
            }
            let mut s = 0.0;
            for &i in members {
                for (m, &e) in mu.iter().zip(unit.row(i)) {
                    s += (e - m) * (e - m);
                }
            }
            acc += s / k / 5.0;
        }
        let expect = acc / by_class.len() as f64;
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn evaluate_snapshot_against_itself_has_zero_drift() {
        let arch = EncoderArch::default();
        let params = EncoderParams::init(&arch, &mut Rng::new(3));
        let snap = EncoderSnapshot::of(&params);
        let spec = crate::synthdata::SyntheticSpec {
            num_classes: 4,
            held_out_classes: vec![3],
            num_domains: 2,
            input_dim: arch.input_dim,
            samples_per_class_per_domain: 4,
            noise_sigma: 0.1,
            domain_shift_strength: 0.3,
            seed: 4,
        };
        let splits = crate::synthdata::generate_identities(&spec).unwrap();
        let report = evaluate(
            &params,
            &snap,
            &splits.test_id,
            &Protocol::Verification,
            SplitTag::Id,
        )
        .unwrap();
        assert_eq!(report.get("mean_drift"), Some(0.0));
        for (name, value) in &report.metrics {
            if name.starts_with("tar@") {
                assert!((0.0..=1.0).contains(value), "{name} = {value}");
            }
        }
    }

    #[test]
    fn perfectly_separated_split_scores_full_marks() {
        // Constructed data: one orthogonal direction per class, table exact.
        let class_emb = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let img = Matrix::from_rows(&[
            vec![0.9, 0.1, 0.0],
            vec![0.0, 1.1, 0.1],
            vec![0.1, 0.0, 0.8],
        ])
        .unwrap();
        let truth = [0, 1, 2];
        assert_eq!(zero_shot_accuracy(&img, &class_emb, &truth).unwrap(), 1.0);
        let sims = pairwise_cosine(&img, &class_emb).unwrap();
        let r = retrieval_at_k(&sims, &truth, &[1]).unwrap();
        assert_eq!(r[&1], 1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn tar_is_monotone_in_far(seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let scores = ScoreSet {
                genuine: rng.normal_vec(20),
                impostor: rng.normal_vec(40),
            };
            let out = tar_at_far(&scores, &[0.01, 0.05, 0.1, 0.5, 1.0]).unwrap();
            for w in out.windows(2) {
                prop_assert!(w[1].1 >= w[0].1);
            }
        }

        #[test]
        fn retrieval_is_monotone_in_k(seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let sim = rng.normal_matrix(8, 10);
            let truth: Vec<usize> = (0..8).map(|_| rng.next_index(10)).collect();
            let r = retrieval_at_k(&sim, &truth, &[1, 3, 5, 10]).unwrap();
            let vals: Vec<f64> = [1, 3, 5, 10].iter().map(|k| r[k]).collect();
            for w in vals.windows(2) {
                prop_assert!(w[1] >= w[0]);
            }
        }

        #[test]
        fn metrics_invariant_under_row_rescaling(seed in 0u64..500, scale in 0.2f64..5.0) {
            let mut rng = Rng::new(seed);
            let emb = rng.normal_matrix(12, 6);
            let labels: Vec<usize> = (0..12).map(|_| rng.next_index(3)).collect();
            let base = cluster_variance(&emb, &labels).unwrap();
            let scaled = cluster_variance(&emb.scale(scale), &labels).unwrap();
            prop_assert!((base - scaled).abs() < 1e-12);

            let s1 = verification_scores(&emb, &labels).unwrap();
            let s2 = verification_scores(&emb.scale(scale), &labels).unwrap();
            let t1 = tar_at_far(&s1, &FAR_TARGETS).unwrap();
            let t2 = tar_at_far(&s2, &FAR_TARGETS).unwrap();
            for (a, b) in t1.iter().zip(&t2) {
                prop_assert!((a.1 - b.1).abs() < 1e-12);
            }
        }
    }
}
