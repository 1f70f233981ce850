use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DomainDataset, Sample};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitCase {
    /// Test on 17 degree elevation, train on the rest.
    #[serde(rename = "1")]
    CaseI,
    /// Test on 14 to 16 degree elevation, train on the rest.
    #[serde(rename = "2")]
    CaseII,
    /// Per-category random test fraction.
    #[serde(rename = "custom")]
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub k_shot: usize,
    pub case: SplitCase,
    pub seed: u64,
    /// Only read for [`SplitCase::Custom`].
    #[serde(default)]
    pub test_fraction: Option<f64>,
}

/// Labeled, unlabeled and test partitions of the target domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub labeled: DomainDataset<T>,
    pub unlabeled: DomainDataset<T>,
    pub test: DomainDataset<T>,
}

fn is_elevation(sample_elev: f64, deg: f64) -> bool {
    (sample_elev - deg).abs() < 0.5
}

/// Partitions `target` into exactly `k_shot` labeled samples per category,
/// the remaining training samples as unlabeled, and the test set chosen by
/// `spec.case`. Output order follows the input order.
pub fn make_split<T: Scalar>(target: &DomainDataset<T>, spec: &SplitSpec) -> Result<Split<T>> {
    if spec.k_shot == 0 {
        return Err(Error::Config("k_shot must be at least 1".into()));
    }
    let samples = target.samples();
    let c = target.num_classes();
    let mut is_test = vec![false; samples.len()];
    match spec.case {
        SplitCase::CaseI | SplitCase::CaseII => {
            for (i, s) in samples.iter().enumerate() {
                let elev = s.meta.elevation.ok_or_else(|| {
                    Error::Config(format!(
                        "sample {} has no elevation metadata; use the custom split",
                        s.meta.path.as_deref().unwrap_or("<unnamed>")
                    ))
                })?;
                let at17 = is_elevation(elev, 17.0);
                let low = (14..=16).any(|d| is_elevation(elev, d as f64));
                is_test[i] = if spec.case == SplitCase::CaseI { at17 } else { low };
            }
        }
        SplitCase::Custom => {
            let frac = spec.test_fraction.unwrap_or(0.5);
            if !(frac > 0.0 && frac < 1.0) {
                return Err(Error::Config(format!("test_fraction {frac} must lie in (0, 1)")));
            }
            for k in 0..c {
                let mut idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].label == k).collect();
                idx.shuffle(&mut category_rng(spec.seed, k, 1));
                let n_test = (idx.len() as f64 * frac).round() as usize;
                for &i in &idx[..n_test] {
                    is_test[i] = true;
                }
            }
        }
    }

    let mut is_labeled = vec![false; samples.len()];
    for k in 0..c {
        let mut pool: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].label == k && !is_test[i]).collect();
        if pool.len() < spec.k_shot + 1 {
            return Err(Error::Input(format!(
                "category `{}` has {} training samples, {}-shot needs at least {}",
                target.categories()[k],
                pool.len(),
                spec.k_shot,
                spec.k_shot + 1
            )));
        }
        pool.shuffle(&mut category_rng(spec.seed, k, 2));
        for &i in &pool[..spec.k_shot] {
            is_labeled[i] = true;
        }
    }

    let take = |pred: &dyn Fn(usize) -> bool| -> Result<DomainDataset<T>> {
        let picked: Vec<Sample<T>> = (0..samples.len()).filter(|&i| pred(i)).map(|i| samples[i].clone()).collect();
        DomainDataset::new(picked, target.categories().to_vec())
    };
    Ok(Split {
        labeled: take(&|i| is_labeled[i])?,
        unlabeled: take(&|i| !is_labeled[i] && !is_test[i])?,
        test: take(&|i| is_test[i])?,
    })
}

fn category_rng(seed: u64, category: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5917);
    rng.set_stream(purpose << 32 | category as u64);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Domain, SampleMeta};
    use crate::image::GrayImage;

    fn dataset(per_class: usize, classes: usize) -> DomainDataset<f64> {
        let mut samples = Vec::new();
        for k in 0..classes {
            for i in 0..per_class {
                samples.push(Sample {
                    image: GrayImage::from_fn(2, 2, |_, _| (k * 100 + i) as f64),
                    label: k,
                    domain: Domain::Target,
                    meta: SampleMeta { elevation: Some(14.0 + (i % 4) as f64), azimuth: None, path: None },
                });
            }
        }
        DomainDataset::new(samples, (0..classes).map(|k| format!("c{k}")).collect()).unwrap()
    }

    fn ids(ds: &DomainDataset<f64>) -> Vec<i64> {
        ds.samples().iter().map(|s| s.image.get(0, 0) as i64).collect()
    }

    #[test]
    fn one_shot_ten_classes() {
        let ds = dataset(8, 10);
        let spec = SplitSpec { k_shot: 1, case: SplitCase::Custom, seed: 3, test_fraction: Some(0.25) };
        let s = make_split(&ds, &spec).unwrap();
        assert_eq!(s.labeled.len(), 10);
        assert_eq!(s.labeled.class_counts(), vec![1; 10]);
        assert_eq!(s.test.class_counts(), vec![2; 10]);
        assert_eq!(s.unlabeled.len(), 50);
        let mut all: Vec<i64> = [ids(&s.labeled), ids(&s.unlabeled), ids(&s.test)].concat();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 80);
        assert_eq!(make_split(&ds, &spec).unwrap(), s);
        let other = make_split(&ds, &SplitSpec { seed: 4, ..spec }).unwrap();
        assert_ne!(ids(&other.labeled), ids(&s.labeled));
    }

    #[test]
    fn elevation_cases() {
        let ds = dataset(8, 2);
        let one = make_split(&ds, &SplitSpec { k_shot: 1, case: SplitCase::CaseI, seed: 0, test_fraction: None }).unwrap();
        assert!(one.test.samples().iter().all(|s| s.meta.elevation == Some(17.0)));
        assert_eq!(one.test.len(), 4);
        let two = make_split(&ds, &SplitSpec { k_shot: 1, case: SplitCase::CaseII, seed: 0, test_fraction: None }).unwrap();
        assert_eq!(two.test.len(), 12);
        assert!(two.labeled.samples().iter().all(|s| s.meta.elevation == Some(17.0)));
    }

    #[test]
    fn errors() {
        let ds = dataset(3, 2);
        let err = make_split(&ds, &SplitSpec { k_shot: 3, case: SplitCase::Custom, seed: 0, test_fraction: Some(0.3) })
            .unwrap_err();
        assert!(err.to_string().contains("c0"));
        assert!(make_split(&ds, &SplitSpec { k_shot: 0, case: SplitCase::Custom, seed: 0, test_fraction: None }).is_err());
        let bare = ds.filter(|_| true);
        let stripped = DomainDataset::new(
            bare.into_samples().into_iter().map(|mut s| { s.meta.elevation = None; s }).collect(),
            vec!["c0".into(), "c1".into()],
        )
        .unwrap();
        assert!(matches!(
            make_split(&stripped, &SplitSpec { k_shot: 1, case: SplitCase::CaseI, seed: 0, test_fraction: None }),
            Err(Error::Config(_))
        ));
    }

    proptest::proptest! {
        #[test]
        fn splits_partition_with_exact_counts(per_class in 5usize..16, classes in 2usize..5, k in 1usize..3, case in 0u8..3, seed in 0u64..1000) {
            let ds = dataset(per_class, classes);
            let case = [SplitCase::CaseI, SplitCase::CaseII, SplitCase::Custom][case as usize];
            let spec = SplitSpec { k_shot: k, case, seed, test_fraction: None };
            let Ok(split) = make_split(&ds, &spec) else { return Ok(()) };
            let mut all: Vec<i64> = [&split.labeled, &split.unlabeled, &split.test].iter().flat_map(|d| ids(d)).collect();
            all.sort_unstable();
            let mut want = ids(&ds);
            want.sort_unstable();
            proptest::prop_assert_eq!(all, want);
            proptest::prop_assert_eq!(split.labeled.class_counts(), vec![k; classes]);
        }
    }
}
