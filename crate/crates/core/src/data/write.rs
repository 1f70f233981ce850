use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use super::raw::RawTensor;
use super::{Domain, DomainDataset, FileMeta, Manifest};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileFormat {
    /// 8-bit grayscale; pixel values are quantised.
    Png,
    /// Raw `f32` tensor file, lossless for `f32` data.
    Ssda,
}

/// Writes an image clamped to `[0, 1]` as an 8-bit grayscale PNG.
pub fn save_png<T: Scalar>(image: &GrayImage<T>, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = image.pixels().iter().map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(image.width() as u32, image.height() as u32, bytes)
        .ok_or_else(|| Error::Dimension("image buffer size mismatch".into()))?;
    buf.save(path).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes both domains in the directory layout read by `load_dataset`,
/// with elevation and azimuth encoded in the file names, plus
/// `<root>/manifest.json`. Returns the manifest.
pub fn write_dataset<T: Scalar>(
    source: &DomainDataset<T>,
    target: &DomainDataset<T>,
    root: &Path,
    format: FileFormat,
) -> Result<Manifest> {
    let size = source
        .image_shape()
        .or(target.image_shape())
        .ok_or_else(|| Error::Input("nothing to write".into()))?;
    if size.0 != size.1 {
        return Err(Error::Input(format!("images must be square, got {size:?}")));
    }
    let mut manifest = Manifest::new(source.categories().to_vec(), size.0);
    for (ds, domain) in [(source, Domain::Source), (target, Domain::Target)] {
        let dir_name = match domain {
            Domain::Source => manifest.source_dir.clone(),
            Domain::Target => manifest.target_dir.clone(),
        };
        for category in ds.categories() {
            let dir = root.join(&dir_name).join(category);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for (i, s) in ds.samples().iter().enumerate() {
            let category = &ds.categories()[s.label];
            let mut stem = format!("{category}_{}", domain.as_str());
            if let Some(e) = s.meta.elevation {
                stem.push_str(&format!("_elevDeg_{:03}", e.round() as i64));
            }
            if let Some(a) = s.meta.azimuth {
                let centi = (a.rem_euclid(360.0) * 100.0).round() as i64;
                stem.push_str(&format!("_azCenter_{:03}_{:02}", centi / 100, centi % 100));
            }
            stem.push_str(&format!("_{i:05}"));
            let ext = match format {
                FileFormat::Png => "png",
                FileFormat::Ssda => "ssda",
            };
            let file = format!("{stem}.{ext}");
            let path = root.join(&dir_name).join(category).join(&file);
            match format {
                FileFormat::Png => save_png(&s.image, &path)?,
                FileFormat::Ssda => {
                    let data = s.image.pixels().iter().map(|v| v.as_f64() as f32).collect();
                    RawTensor::new(1, s.image.height(), s.image.width(), data)?.write(&path)?;
                }
            }
            if s.meta.elevation.is_some() || s.meta.azimuth.is_some() {
                manifest.files.insert(
                    format!("{dir_name}/{category}/{file}"),
                    FileMeta { elevation: s.meta.elevation, azimuth: s.meta.azimuth },
                );
            }
        }
    }
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
