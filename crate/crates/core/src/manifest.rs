//! Run manifests: every emitted artifact carries the hashes of the inputs
//! that produced it, the effective configuration, and the seeds, so reruns
//! are reproducible from the manifest alone.

use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    /// Input name -> sha256.
    pub inputs: BTreeMap<String, String>,
    /// Output file name -> sha256.
    pub outputs: BTreeMap<String, String>,
    /// Canonical TOML of the effective configuration.
    pub effective_config: String,
    pub tool_version: String,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, effective_config: String) -> Self {
        RunManifest {
            command: command.to_string(),
            seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            effective_config,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn input(&mut self, name: &str, hash: impl Into<String>) -> &mut Self {
        self.inputs.insert(name.to_string(), hash.into());
        self
    }

    pub fn input_file(&mut self, name: &str, path: &Path) -> Result<&mut Self> {
        let h = crate::container::file_hash(path)?;
        self.inputs.insert(name.to_string(), h);
        Ok(self)
    }

    pub fn output_file(&mut self, name: &str, path: &Path) -> Result<&mut Self> {
        let h = crate::container::file_hash(path)?;
        self.outputs.insert(name.to_string(), h);
        Ok(self)
    }

    /// Write `<stem>.manifest.json` next to the artifact, atomically.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| CoreError::io(parent, e))?;
            }
        }
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CoreError::format(path, e.to_string()))?;
        let tmp = path.with_extension("tmp-write");
        std::fs::write(&tmp, text).map_err(|e| CoreError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| CoreError::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CoreError::format(path, e.to_string()))
    }
}

/// Save an image tensor in [-1,1] as an RGB PNG (quantized to u8).
pub fn save_image_png(path: &Path, image: &ndarray::Array3<f64>) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| CoreError::io(parent, e))?;
        }
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            buf.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    crate::tensor::unit_to_u8(image[[0, y, x]]),
                    crate::tensor::unit_to_u8(image[[1, y, x]]),
                    crate::tensor::unit_to_u8(image[[2, y, x]]),
                ]),
            );
        }
    }
    buf.save(path).map_err(|e| CoreError::format(path, format!("png encode: {e}")))
}

pub fn load_image_png(path: &Path) -> Result<ndarray::Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| CoreError::format(path, format!("png decode: {e}")))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = ndarray::Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                out[[c, y, x]] = crate::tensor::u8_to_unit(p.0[c]);
            }
        }
    }
    Ok(out)
}
