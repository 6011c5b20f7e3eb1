//! Batch construction: caption templating plus the two mini-batch samplers
//! (labeled batches for image-caption training, unique-identity positive
//! pairs for verification training).

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;
use crate::synthdata::Dataset;

/// A batch of images with class ids and their templated captions.
#[derive(Clone, Debug)]
pub struct LabeledBatch {
    pub images: Matrix,
    pub class_ids: Vec<usize>,
    pub captions: Vec<String>,
}

/// Two aligned views per row, one row per distinct identity.
#[derive(Clone, Debug)]
pub struct PairBatch {
    pub u: Matrix,
    pub v: Matrix,
    pub identity_ids: Vec<usize>,
}

/// The fixed caption template: "a photo of a {class}". Casing is preserved.
pub fn caption_for_class(class_name: &str) -> Result<String> {
    if class_name.is_empty() {
        return Err(Error::EmptyClassName);
    }
    Ok(format!("a photo of a {class_name}"))
}

/// Uniform sample of `batch_size` distinct rows from `data`.
pub fn sample_labeled_batch(
    data: &Dataset,
    class_names: &[String],
    batch_size: usize,
    rng: &mut Rng,
) -> Result<LabeledBatch> {
    if data.is_empty() {
        return Err(Error::InvalidConfig("cannot sample from an empty dataset".into()));
    }
    if batch_size < 2 {
        return Err(Error::InvalidConfig("batch_size must be at least 2".into()));
    }
    if batch_size > data.len() {
        return Err(Error::BatchTooLarge {
            requested: batch_size,
            available: data.len(),
        });
    }
    let picks = rng.sample_indices(data.len(), batch_size);
    let mut images = Matrix::zeros(batch_size, data.input_dim);
    let mut class_ids = Vec::with_capacity(batch_size);
    let mut captions = Vec::with_capacity(batch_size);
    for (row, &i) in picks.iter().enumerate() {
        let sample = &data.samples[i];
        images.row_mut(row).copy_from_slice(&sample.features);
        class_ids.push(sample.label);
        let name = class_names.get(sample.label).ok_or(Error::LabelOutOfRange {
            label: sample.label,
            classes: class_names.len(),
        })?;
        captions.push(caption_for_class(name)?);
    }
    Ok(LabeledBatch {
        images,
        class_ids,
        captions,
    })
}

/// Picks `batch_size` distinct identities uniformly and, for each, two
/// distinct images as the aligned views. Self-pairs are never produced;
/// an identity with a single image is an error rather than a silent skip.
pub fn sample_identity_batch(
    data: &Dataset,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<PairBatch> {
    if batch_size < 2 {
        return Err(Error::InvalidConfig("batch_size must be at least 2".into()));
    }
    let groups = data.by_label();
    if groups.len() < batch_size {
        return Err(Error::NotEnoughIdentities {
            requested: batch_size,
            available: groups.len(),
        });
    }
    for (&identity, members) in &groups {
        if members.len() < 2 {
            return Err(Error::IdentityHasSingleImage(identity));
        }
    }

    let identities: Vec<usize> = groups.keys().copied().collect();
    let picks = rng.sample_indices(identities.len(), batch_size);

    let mut u = Matrix::zeros(batch_size, data.input_dim);
    let mut v = Matrix::zeros(batch_size, data.input_dim);
    let mut identity_ids = Vec::with_capacity(batch_size);
    for (row, &pick) in picks.iter().enumerate() {
        let identity = identities[pick];
        let members = &groups[&identity];
        let two = rng.sample_indices(members.len(), 2);
        u.row_mut(row)
            .copy_from_slice(&data.samples[members[two[0]]].features);
        v.row_mut(row)
            .copy_from_slice(&data.samples[members[two[1]]].features);
        identity_ids.push(identity);
    }
    Ok(PairBatch { u, v, identity_ids })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::Sample;

    fn toy_dataset(identities: usize, images_each: usize) -> Dataset {
        let mut samples = Vec::new();
        for id in 0..identities {
            for img in 0..images_each {
                samples.push(Sample {
                    domain: 0,
                    label: id,
                    features: vec![id as f64, img as f64],
                });
            }
        }
        Dataset {
            input_dim: 2,
            samples,
        }
    }

    #[test]
    fn caption_template_matches_exactly() {
        assert_eq!(caption_for_class("beach").unwrap(), "a photo of a beach");
        assert_eq!(
            caption_for_class("solar panel").unwrap(),
            "a photo of a solar panel"
        );
        assert!(matches!(caption_for_class(""), Err(Error::EmptyClassName)));
    }

    #[test]
    fn caption_template_is_injective_and_preserves_case() {
        let names = ["Beach", "beach", "solar panel", "solar_panel"];
        let mut captions: Vec<String> = names
            .iter()
            .map(|n| caption_for_class(n).unwrap())
            .collect();
        assert_eq!(captions[0], "a photo of a Beach");
        captions.sort();
        captions.dedup();
        assert_eq!(captions.len(), names.len());
    }

    #[test]
    fn full_batch_is_a_permutation_of_the_dataset() {
        let data = toy_dataset(4, 3);
        let names: Vec<String> = (0..4).map(|i| format!("c{i}")).collect();
        let batch = sample_labeled_batch(&data, &names, data.len(), &mut Rng::new(1)).unwrap();
        let mut seen: Vec<Vec<f64>> = (0..batch.images.rows())
            .map(|i| batch.images.row(i).to_vec())
            .collect();
        seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut expect: Vec<Vec<f64>> = data.samples.iter().map(|s| s.features.clone()).collect();
        expect.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(seen, expect);
    }

    #[test]
    fn labeled_sampling_is_seed_deterministic() {
        let data = toy_dataset(10, 2);
        let names: Vec<String> = (0..10).map(|i| format!("c{i}")).collect();
        let a = sample_labeled_batch(&data, &names, 6, &mut Rng::new(5)).unwrap();
        let b = sample_labeled_batch(&data, &names, 6, &mut Rng::new(5)).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.class_ids, b.class_ids);
        assert_eq!(a.captions, b.captions);
    }

    #[test]
    fn different_seeds_give_different_batches() {
        let data = toy_dataset(500, 2);
        let names: Vec<String> = (0..500).map(|i| format!("c{i}")).collect();
        let mut distinct = 0;
        for s in 0..100u64 {
            let a = sample_labeled_batch(&data, &names, 8, &mut Rng::new(s)).unwrap();
            let b = sample_labeled_batch(&data, &names, 8, &mut Rng::new(s + 10_000)).unwrap();
            if a.class_ids != b.class_ids {
                distinct += 1;
            }
        }
        assert!(distinct >= 99, "only {distinct}/100 seed pairs differed");
    }

    #[test]
    fn batch_larger_than_dataset_is_rejected() {
        let data = toy_dataset(2, 2);
        let names = vec!["a".to_string(), "b".to_string()];
        assert!(matches!(
            sample_labeled_batch(&data, &names, 5, &mut Rng::new(0)),
            Err(Error::BatchTooLarge { requested: 5, available: 4 })
        ));
    }

    #[test]
    fn exact_identity_count_uses_every_identity_once() {
        let data = toy_dataset(6, 2);
        let batch = sample_identity_batch(&data, 6, &mut Rng::new(3)).unwrap();
        let mut ids = batch.identity_ids.clone();
        ids.sort_unstable();
        assert_eq!(ids, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn identities_are_distinct_and_views_differ_across_many_draws() {
        let data = toy_dataset(20, 4);
        let mut rng = Rng::new(77);
        for _ in 0..1000 {
            let batch = sample_identity_batch(&data, 8, &mut rng).unwrap();
            let mut ids = batch.identity_ids.clone();
            ids.sort_unstable();
            ids.dedup();
            assert_eq!(ids.len(), 8, "identities must be pairwise distinct");
            for i in 0..8 {
                assert_ne!(batch.u.row(i), batch.v.row(i), "self-pair produced");
                assert_eq!(batch.u.get(i, 0), batch.identity_ids[i] as f64);
                assert_eq!(batch.v.get(i, 0), batch.identity_ids[i] as f64);
            }
        }
    }

    #[test]
    fn single_image_identity_is_an_error() {
        let mut data = toy_dataset(5, 2);
        data.samples.push(Sample {
            domain: 0,
            label: 9,
            features: vec![9.0, 0.0],
        });
        assert!(matches!(
            sample_identity_batch(&data, 3, &mut Rng::new(0)),
            Err(Error::IdentityHasSingleImage(9))
        ));
    }

    #[test]
    fn too_few_identities_is_an_error() {
        let data = toy_dataset(3, 2);
        assert!(matches!(
            sample_identity_batch(&data, 4, &mut Rng::new(0)),
            Err(Error::NotEnoughIdentities { requested: 4, available: 3 })
        ));
    }
}
