//! Per-category augmentation pools: labeled target samples plus the weak
//! views of unlabeled samples whose top predicted probability clears the
//! confidence threshold.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    GroundTruth,
    Pseudo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry<T> {
    pub image: GrayImage<T>,
    /// Zero-based category index.
    pub label: usize,
    pub provenance: Provenance,
    /// 1 for ground truth; the accepted top probability for pseudo entries.
    pub confidence: f64,
    pub added_iter: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationPool<T> {
    classes: Vec<Vec<PoolEntry<T>>>,
    capacity_per_class: usize,
    sigma: f64,
    inserted: u64,
    evicted: u64,
}

impl<T: Scalar> AugmentationPool<T> {
    /// Seeds each of `num_classes` categories with its labeled samples, in
    /// input order.
    pub fn init(
        labeled_target: &[(GrayImage<T>, usize)],
        num_classes: usize,
        capacity: usize,
        sigma: f64,
    ) -> Result<Self> {
        let mut classes: Vec<Vec<PoolEntry<T>>> = vec![Vec::new(); num_classes];
        for (image, label) in labeled_target {
            let list = classes.get_mut(*label).ok_or_else(|| {
                Error::Config(format!("labeled sample has category {label}, only {num_classes} exist"))
            })?;
            list.push(PoolEntry {
                image: image.clone(),
                label: *label,
                provenance: Provenance::GroundTruth,
                confidence: 1.0,
                added_iter: 0,
            });
        }
        for (k, list) in classes.iter().enumerate() {
            if list.is_empty() {
                return Err(Error::Config(format!("category {k} has no labeled target sample")));
            }
            if list.len() > capacity {
                return Err(Error::Config(format!(
                    "category {k} has {} labeled samples but pool capacity is {capacity}",
                    list.len()
                )));
            }
        }
        Ok(Self { classes, capacity_per_class: capacity, sigma, inserted: 0, evicted: 0 })
    }

    /// Rebuilds a pool from checkpointed parts.
    pub fn from_parts(
        classes: Vec<Vec<PoolEntry<T>>>,
        capacity_per_class: usize,
        sigma: f64,
        inserted: u64,
        evicted: u64,
    ) -> Result<Self> {
        for (k, list) in classes.iter().enumerate() {
            if list.is_empty() || list.len() > capacity_per_class {
                return Err(Error::State(format!("restored pool category {k} has {} entries", list.len())));
            }
            if list.iter().any(|e| e.label != k) {
                return Err(Error::State(format!("restored pool category {k} holds a foreign label")));
            }
        }
        Ok(Self { classes, capacity_per_class, sigma, inserted, evicted })
    }

    /// Offers a weak view with its predicted distribution. Returns whether
    /// it was stored. A full category drops its oldest pseudo entry; ground
    /// truth is never evicted.
    pub fn try_add(&mut self, weak_image: &GrayImage<T>, probs: &[f64], iter: u64) -> bool {
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6, "probs must sum to 1");
        let (label, confidence) = argmax(probs);
        if !(confidence >= self.sigma) || label >= self.classes.len() {
            return false;
        }
        let cap = self.capacity_per_class;
        let list = &mut self.classes[label];
        if list.len() >= cap {
            match list.iter().position(|e| e.provenance == Provenance::Pseudo) {
                Some(oldest) => {
                    list.remove(oldest);
                    self.evicted += 1;
                }
                None => return false,
            }
        }
        list.push(PoolEntry {
            image: weak_image.clone(),
            label,
            provenance: Provenance::Pseudo,
            confidence,
            added_iter: iter,
        });
        self.inserted += 1;
        true
    }

    /// Uniform draw from one category's entries.
    pub fn sample_partner<R: Rng + ?Sized>(&self, category: usize, rng: &mut R) -> Result<&GrayImage<T>> {
        let list = self
            .classes
            .get(category)
            .ok_or_else(|| Error::Parameter(format!("unknown category {category}")))?;
        Ok(&list[rng.random_range(0..list.len())].image)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn entries(&self, category: usize) -> &[PoolEntry<T>] {
        &self.classes[category]
    }

    pub fn classes(&self) -> &[Vec<PoolEntry<T>>] {
        &self.classes
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.classes.iter().map(Vec::len).collect()
    }

    pub fn total_len(&self) -> usize {
        self.classes.iter().map(Vec::len).sum()
    }

    pub fn capacity_per_class(&self) -> usize {
        self.capacity_per_class
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Pseudo entries accepted so far, including later-evicted ones.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn evicted(&self) -> u64 {
        self.evicted
    }
}

/// Index of the largest entry (lowest index on ties) and its value.
pub fn argmax(values: &[f64]) -> (usize, f64) {
    values
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img(v: f64) -> GrayImage<f64> {
        GrayImage::from_fn(4, 4, |_, _| v)
    }

    fn one_shot(classes: usize) -> Vec<(GrayImage<f64>, usize)> {
        (0..classes).map(|k| (img(k as f64 / 10.0), k)).collect()
    }

    #[test]
    fn one_shot_ten_classes() {
        let pool = AugmentationPool::init(&one_shot(10), 10, 64, 0.95).unwrap();
        assert_eq!(pool.sizes(), vec![1; 10]);
        assert!(pool.classes().iter().flatten().all(|e| e.provenance == Provenance::GroundTruth && e.confidence == 1.0));
    }

    #[test]
    fn capacity_below_labeled_count_rejected() {
        let labeled: Vec<_> = (0..3).map(|i| (img(i as f64 * 0.1), 0)).collect();
        assert!(matches!(AugmentationPool::init(&labeled, 1, 1, 0.95), Err(Error::Config(_))));
    }

    #[test]
    fn empty_category_rejected() {
        assert!(matches!(AugmentationPool::init(&one_shot(2), 3, 8, 0.95), Err(Error::Config(_))));
    }

    #[test]
    fn input_order_kept() {
        let labeled = vec![(img(0.1), 0), (img(0.2), 1), (img(0.3), 0)];
        let pool = AugmentationPool::init(&labeled, 2, 8, 0.95).unwrap();
        assert_eq!(pool.entries(0)[0].image, img(0.1));
        assert_eq!(pool.entries(0)[1].image, img(0.3));
    }

    #[test]
    fn threshold_accept_and_reject() {
        let mut pool = AugmentationPool::init(&one_shot(3), 3, 8, 0.95).unwrap();
        assert!(pool.try_add(&img(0.5), &[0.97, 0.02, 0.01], 1));
        assert_eq!(pool.entries(0).len(), 2);
        assert_eq!(pool.entries(0)[1].label, 0);
        assert_eq!(pool.entries(0)[1].provenance, Provenance::Pseudo);

        let mut two = AugmentationPool::init(&one_shot(2), 2, 8, 0.95).unwrap();
        let before = two.clone();
        assert!(!two.try_add(&img(0.5), &[0.5, 0.5], 1));
        assert_eq!(two, before);
    }

    #[test]
    fn eviction_keeps_ground_truth() {
        let cap = 4;
        let mut pool = AugmentationPool::init(&[(img(0.0), 0)], 1, cap, 0.5).unwrap();
        for it in 1..cap as u64 {
            assert!(pool.try_add(&img(it as f64 / 10.0), &[1.0], it));
        }
        assert_eq!(pool.entries(0).len(), cap);
        assert!(pool.try_add(&img(0.9), &[1.0], 99));
        let e = pool.entries(0);
        assert_eq!(e.len(), cap);
        assert_eq!(e[0].provenance, Provenance::GroundTruth);
        assert_eq!(e[1].added_iter, 2, "oldest pseudo (iter 1) evicted");
        assert_eq!(e.last().unwrap().added_iter, 99);
        assert_eq!(pool.evicted(), 1);
    }

    #[test]
    fn full_of_ground_truth_rejects() {
        let labeled = vec![(img(0.1), 0), (img(0.2), 0)];
        let mut pool = AugmentationPool::init(&labeled, 1, 2, 0.5).unwrap();
        assert!(!pool.try_add(&img(0.3), &[1.0], 1));
        assert_eq!(pool.entries(0).len(), 2);
    }

    #[test]
    fn single_entry_always_drawn() {
        let pool = AugmentationPool::init(&one_shot(3), 3, 8, 0.95).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            assert_eq!(pool.sample_partner(2, &mut rng).unwrap(), &img(0.2));
        }
        assert!(matches!(pool.sample_partner(3, &mut rng), Err(Error::Parameter(_))));
    }

    #[test]
    fn partner_draws_are_uniform_and_stay_in_category() {
        let mut labeled: Vec<_> = (0..5).map(|i| (img(i as f64 / 10.0), 0)).collect();
        labeled.push((img(0.9), 1));
        let pool = AugmentationPool::init(&labeled, 2, 8, 0.95).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let draws = 10_000;
        let mut counts = [0usize; 5];
        for _ in 0..draws {
            let p = pool.sample_partner(0, &mut rng).unwrap();
            let idx = (p.get(0, 0) * 10.0).round() as usize;
            assert!(idx < 5, "draw crossed categories");
            counts[idx] += 1;
        }
        // binomial(n, 1/5): mean 2000, sd 40
        let (mean, sd) = (draws as f64 / 5.0, (draws as f64 * 0.2 * 0.8).sqrt());
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn argmax_tie_breaks_low() {
        assert_eq!(argmax(&[0.2, 0.7, 0.1]), (1, 0.7));
        assert_eq!(argmax(&[0.5, 0.5]), (0, 0.5));
    }
}
