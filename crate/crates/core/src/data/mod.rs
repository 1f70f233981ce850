//! Datasets, target-domain splits, raw tensor files and the synthetic
//! paired-domain generator.

mod load;
pub mod raw;
mod split;
mod synthetic;
mod write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::scalar::Scalar;

pub use raw::RawTensor;
pub use load::{load_dataset, parse_filename_meta, FileMeta, Manifest};
pub use split::{make_split, Split, SplitCase, SplitSpec};
pub use synthetic::{gap_ratio, generate_synthetic, render_template, DomainGap, SyntheticSpec};
pub use write::{save_png, write_dataset, FileFormat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elevation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub azimuth: Option<f64>,
    /// Origin of the sample, relative to the dataset root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub image: GrayImage<T>,
    /// Zero-based index into the dataset's category table.
    pub label: usize,
    pub domain: Domain,
    pub meta: SampleMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset<T> {
    samples: Vec<Sample<T>>,
    categories: Vec<String>,
}

impl<T: Scalar> DomainDataset<T> {
    /// Checks that labels index `categories` and that all images share one
    /// shape.
    pub fn new(samples: Vec<Sample<T>>, categories: Vec<String>) -> Result<Self> {
        let shape = samples.first().map(|s| s.image.shape());
        for (i, s) in samples.iter().enumerate() {
            if s.label >= categories.len() {
                return Err(Error::Input(format!(
                    "sample {i} has label {} but only {} categories exist",
                    s.label,
                    categories.len()
                )));
            }
            if Some(s.image.shape()) != shape {
                return Err(Error::Dimension(format!(
                    "sample {i} is {:?}, expected {:?}",
                    s.image.shape(),
                    shape.unwrap()
                )));
            }
        }
        Ok(Self { samples, categories })
    }

    pub fn empty(categories: Vec<String>) -> Self {
        Self { samples: Vec::new(), categories }
    }

    pub fn samples(&self) -> &[Sample<T>] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Sample<T>> {
        self.samples
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_shape(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| s.image.shape())
    }

    pub fn images(&self) -> Vec<&GrayImage<T>> {
        self.samples.iter().map(|s| &s.image).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.categories.len()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Samples of one domain, keeping order and the category table.
    pub fn domain(&self, domain: Domain) -> Self {
        self.filter(|s| s.domain == domain)
    }

    pub fn filter(&self, mut keep: impl FnMut(&Sample<T>) -> bool) -> Self {
        Self {
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
            categories: self.categories.clone(),
        }
    }

    /// Appends `other`, which must share the category table.
    pub fn merged(mut self, other: Self) -> Result<Self> {
        if self.categories != other.categories {
            return Err(Error::Input("cannot merge datasets with different category tables".into()));
        }
        self.samples.extend(other.samples);
        Self::new(self.samples, self.categories)
    }

    /// `(image, label)` pairs, the shape expected by pool initialisation.
    pub fn labeled_pairs(&self) -> Vec<(GrayImage<T>, usize)> {
        self.samples.iter().map(|s| (s.image.clone(), s.label)).collect()
    }
}
