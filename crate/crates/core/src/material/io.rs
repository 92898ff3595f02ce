//! PNG and dataset-directory I/O.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use super::synth::{Family, SynthItem};
use super::{pack_maps, MaterialSet};
use crate::error::{HimatError, Result};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum BitDepth {
    #[default]
    Eight,
    Sixteen,
}

fn quantize(v: f64, max: f64) -> f64 {
    (v.clamp(0.0, 1.0) * max).round()
}

/// Writes `[H, W]` (grayscale) or `[H, W, 3]` (RGB) values in `[0, 1]`.
/// Out-of-range values are clamped.
pub fn write_png(path: impl AsRef<Path>, img: &Tensor, depth: BitDepth) -> Result<()> {
    let s = img.shape();
    let (h, w, ch) = match s {
        [h, w] => (*h, *w, 1),
        [h, w, 3] => (*h, *w, 3),
        _ => return Err(HimatError::shape("write_png", format!("expected [H, W] or [H, W, 3], got {s:?}"))),
    };
    let (w32, h32) = (w as u32, h as u32);
    let err = |e: image::ImageError| HimatError::Image(e.to_string());
    match (depth, ch) {
        (BitDepth::Eight, 1) => {
            let raw = img.data().iter().map(|&v| quantize(v, 255.0) as u8).collect();
            ImageBuffer::<Luma<u8>, Vec<u8>>::from_raw(w32, h32, raw).expect("size").save(path).map_err(err)
        }
        (BitDepth::Eight, _) => {
            let raw = img.data().iter().map(|&v| quantize(v, 255.0) as u8).collect();
            ImageBuffer::<Rgb<u8>, Vec<u8>>::from_raw(w32, h32, raw).expect("size").save(path).map_err(err)
        }
        (BitDepth::Sixteen, 1) => {
            let raw = img.data().iter().map(|&v| quantize(v, 65535.0) as u16).collect();
            ImageBuffer::<Luma<u16>, Vec<u16>>::from_raw(w32, h32, raw).expect("size").save(path).map_err(err)
        }
        (BitDepth::Sixteen, _) => {
            let raw = img.data().iter().map(|&v| quantize(v, 65535.0) as u16).collect();
            ImageBuffer::<Rgb<u16>, Vec<u16>>::from_raw(w32, h32, raw).expect("size").save(path).map_err(err)
        }
    }
}

/// Reads any PNG as `[H, W, 3]` in `[0, 1]`, keeping 16-bit precision.
pub fn read_png_rgb(path: impl AsRef<Path>) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| HimatError::Image(e.to_string()))?.into_rgb16();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect();
    Tensor::new(&[h as usize, w as usize, 3], data)
}

/// Reads any PNG as `[H, W]` luminance in `[0, 1]`.
pub fn read_png_gray(path: impl AsRef<Path>) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| HimatError::Image(e.to_string()))?.into_luma16();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect();
    Tensor::new(&[h as usize, w as usize], data)
}

pub fn write_material_pngs(dir: impl AsRef<Path>, m: &MaterialSet, depth: BitDepth) -> Result<Vec<String>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for (name, t) in m.named_maps() {
        let file = format!("{name}.png");
        write_png(dir.join(&file), t, depth)?;
        files.push(file);
    }
    Ok(files)
}

pub fn read_material_pngs(dir: impl AsRef<Path>) -> Result<MaterialSet> {
    let dir = dir.as_ref();
    Ok(MaterialSet {
        basecolor: read_png_rgb(dir.join("basecolor.png"))?,
        normal: read_png_rgb(dir.join("normal.png"))?,
        roughness: read_png_gray(dir.join("roughness.png"))?,
        metallic: read_png_gray(dir.join("metallic.png"))?,
        height: read_png_gray(dir.join("height.png"))?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub index: usize,
    pub prompt_id: usize,
    pub family: Family,
    pub dir: String,
    pub files: Vec<String>,
    pub stack: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub version: String,
    pub items: Vec<ManifestItem>,
}

/// Writes each item as PNG maps plus a packed HIMT stack, and `manifest.json`.
pub fn write_dataset(dir: impl AsRef<Path>, seed: u64, items: &[SynthItem], depth: BitDepth) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(items.len());
    for it in items {
        let sub = format!("item_{:05}", it.index);
        let files = write_material_pngs(dir.join(&sub), &it.material, depth)?;
        let stack = format!("{sub}/packed.himt");
        pack_maps(&it.material)?.write_himt(dir.join(&stack), DType::F32)?;
        entries.push(ManifestItem { index: it.index, prompt_id: it.prompt_id(), family: it.family, dir: sub, files, stack });
    }
    let (h, w) = items.first().map(|i| i.material.dims()).unwrap_or((0, 0));
    let manifest = DatasetManifest {
        seed,
        count: items.len(),
        height: h,
        width: w,
        version: crate::VERSION.to_string(),
        items: entries,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}
