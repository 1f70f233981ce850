use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use super::raw::RawTensor;
use super::{Domain, DomainDataset, Sample, SampleMeta};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::scalar::Scalar;

/// Dataset description: category names (their order defines the label
/// indices), the working image size and optional per-file metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub categories: Vec<String>,
    pub image_size: usize,
    #[serde(default = "default_source_dir")]
    pub source_dir: String,
    #[serde(default = "default_target_dir")]
    pub target_dir: String,
    /// Keyed by path relative to the dataset root, e.g. `target/2S1/a.png`.
    #[serde(default)]
    pub files: BTreeMap<String, FileMeta>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileMeta {
    #[serde(default)]
    pub elevation: Option<f64>,
    #[serde(default)]
    pub azimuth: Option<f64>,
}

fn default_source_dir() -> String {
    "source".into()
}

fn default_target_dir() -> String {
    "target".into()
}

impl Manifest {
    pub fn new(categories: Vec<String>, image_size: usize) -> Self {
        Self {
            categories,
            image_size,
            source_dir: default_source_dir(),
            target_dir: default_target_dir(),
            files: BTreeMap::new(),
        }
    }

    /// The ten vehicle classes of the simulated/measured SAR benchmark.
    pub fn sar_ten_class(image_size: usize) -> Self {
        let names = ["2S1", "BMP2", "BTR70", "M1", "M2", "M35", "M548", "M60", "T72", "ZSU23"];
        Self::new(names.iter().map(|s| s.to_string()).collect(), image_size)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de).map_err(|e| Error::format(path, format!("at `{}`: {}", e.path(), e.inner())))
    }
}

/// Reads `elevDeg_NNN` and `azCenter_NNN[_FF]` tokens from a file stem.
pub fn parse_filename_meta(stem: &str) -> FileMeta {
    let tokens: Vec<&str> = stem.split(['_', '-']).collect();
    let number = |i: usize| tokens.get(i).and_then(|t| t.parse::<u32>().ok().map(|_| *t));
    let mut meta = FileMeta::default();
    for (i, tok) in tokens.iter().enumerate() {
        if tok.eq_ignore_ascii_case("elevDeg") {
            meta.elevation = number(i + 1).and_then(|t| t.parse().ok());
        } else if tok.eq_ignore_ascii_case("azCenter") {
            meta.azimuth = number(i + 1).and_then(|whole| {
                let text = match number(i + 2) {
                    Some(frac) => format!("{whole}.{frac}"),
                    None => whole.to_string(),
                };
                text.parse().ok()
            });
        }
    }
    meta
}

/// Loads `<root>/<source_dir|target_dir>/<category>/<files>`. Files are
/// read in lexicographic order; PNG images and raw tensor files (`.ssda`)
/// are accepted. Every image is center-cropped to a square, resized to
/// `manifest.image_size` and scaled to `[0, 1]`.
pub fn load_dataset<T: Scalar>(root: &Path, manifest: &Manifest) -> Result<DomainDataset<T>> {
    if manifest.categories.is_empty() {
        return Err(Error::Config("manifest lists no categories".into()));
    }
    if manifest.image_size < 2 {
        return Err(Error::Config(format!("image_size {} is too small", manifest.image_size)));
    }
    let mut samples = Vec::new();
    for (domain, dir) in [(Domain::Source, &manifest.source_dir), (Domain::Target, &manifest.target_dir)] {
        let domain_root = root.join(dir);
        let found = sorted_entries(&domain_root)?;
        for path in &found {
            let name = file_name(path);
            if path.is_dir() && !manifest.categories.iter().any(|c| c == &name) {
                return Err(Error::Input(format!(
                    "{} contains category `{name}` which is not in the manifest",
                    domain_root.display()
                )));
            }
        }
        for (label, category) in manifest.categories.iter().enumerate() {
            let cat_dir = domain_root.join(category);
            if !cat_dir.is_dir() {
                return Err(Error::Input(format!(
                    "category `{category}` has no directory under {}",
                    domain_root.display()
                )));
            }
            let before = samples.len();
            for file in sorted_entries(&cat_dir)? {
                if !file.is_file() {
                    continue;
                }
                let rel = format!("{dir}/{category}/{}", file_name(&file));
                let stem = file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                let meta = manifest.files.get(&rel).cloned().unwrap_or_else(|| parse_filename_meta(&stem));
                let grids = read_grids(&file)?;
                let multiple = grids.len() > 1;
                for (k, grid) in grids.into_iter().enumerate() {
                    let image = fit(grid, manifest.image_size).cast();
                    let path = if multiple { format!("{rel}#{k}") } else { rel.clone() };
                    samples.push(Sample {
                        image,
                        label,
                        domain,
                        meta: SampleMeta { elevation: meta.elevation, azimuth: meta.azimuth, path: Some(path) },
                    });
                }
            }
            if samples.len() == before {
                return Err(Error::Input(format!("category `{category}` in {} is empty", domain_root.display())));
            }
        }
    }
    DomainDataset::new(samples, manifest.categories.clone())
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

type Grid = ImageBuffer<Luma<f32>, Vec<f32>>;

fn read_grids(path: &Path) -> Result<Vec<Grid>> {
    let ext = path.extension().map(|e| e.to_string_lossy().to_ascii_lowercase());
    match ext.as_deref() {
        Some("ssda") => {
            let raw = RawTensor::read(path)?;
            if raw.height == 0 || raw.width == 0 {
                return Err(Error::format(path, "empty grid"));
            }
            (0..raw.count)
                .map(|i| {
                    let grid = raw.grid(i);
                    if grid.iter().any(|v| !v.is_finite()) {
                        return Err(Error::format(path, format!("grid {i} contains non-finite values")));
                    }
                    Ok(Grid::from_raw(raw.width as u32, raw.height as u32, grid.to_vec()).unwrap())
                })
                .collect()
        }
        _ => {
            let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?.to_luma8();
            let (w, h) = img.dimensions();
            let values = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
            Ok(vec![Grid::from_raw(w, h, values).unwrap()])
        }
    }
}

fn fit(grid: Grid, size: usize) -> GrayImage<f32> {
    let (w, h) = grid.dimensions();
    let side = w.min(h);
    let square = if w == h {
        grid
    } else {
        imageops::crop_imm(&grid, (w - side) / 2, (h - side) / 2, side, side).to_image()
    };
    let resized = if side as usize == size {
        square
    } else {
        imageops::resize(&square, size as u32, size as u32, FilterType::Triangle)
    };
    GrayImage::new(size, size, resized.into_raw()).unwrap().clamp_unit()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filename_tokens() {
        let m = parse_filename_meta("2s1_real_A_elevDeg_017_azCenter_010_22_serial_b01");
        assert_eq!(m.elevation, Some(17.0));
        assert_eq!(m.azimuth, Some(10.22));
        let m = parse_filename_meta("plain_name");
        assert_eq!(m, FileMeta::default());
        assert_eq!(parse_filename_meta("x_elevDeg_15").elevation, Some(15.0));
    }

    #[test]
    fn fit_crops_and_resizes() {
        let grid = Grid::from_fn(6, 4, |x, _| Luma([if x == 0 || x == 5 { 9.0 } else { 0.5 }]));
        let out = fit(grid, 4);
        assert_eq!(out.shape(), (4, 4));
        assert!(out.pixels().iter().all(|&v| v == 0.5));
        let small = fit(Grid::from_pixel(2, 2, Luma([0.25])), 4);
        assert!(small.pixels().iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }
}
