//! Image and attribute fidelity measures.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::codec::size_report;
use crate::compress::{attribute_mse, dequantize, CompressError, Group, QuantizedCloud};
use crate::render::{render, Camera, Image, RenderError, RenderOptions};
use crate::splat::{SplatCloud, PARAMS_PER_SPLAT};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("image sizes differ: {0}x{1} vs {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),
    #[error(transparent)]
    Compress(#[from] CompressError),
    #[error(transparent)]
    Render(#[from] RenderError),
}

/// Mean squared error over all channels.
pub fn mse(a: &Image, b: &Image) -> Result<f64, MetricsError> {
    if !a.same_size(b) {
        return Err(MetricsError::SizeMismatch(a.width(), a.height(), b.width(), b.height()));
    }
    if a.data().is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data().len() as f64)
}

/// `10 log10(1 / MSE)` with peak value 1; `f64::INFINITY` for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, MetricsError> {
    let m = mse(a, b)?;
    Ok(psnr_from_mse(m))
}

pub fn psnr_from_mse(m: f64) -> f64 {
    if m == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * m.log10()
    }
}

/// PSNR after rounding both images to 8 bits per channel.
pub fn psnr_8bit(a: &Image, b: &Image) -> Result<f64, MetricsError> {
    psnr(&a.quantized_8bit(), &b.quantized_8bit())
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub splats: usize,
    pub original_splats: usize,
    pub cameras: usize,
    /// Mean of per-image PSNR in dB over images that differ; `None` when
    /// there are no cameras or every image is identical.
    pub psnr_db: Option<f64>,
    /// Every rendered image matched its reference exactly.
    pub psnr_infinite: bool,
    /// Images identical to their reference, left out of the mean.
    pub identical_images: usize,
    pub per_camera_psnr_db: Vec<Option<f64>>,
    /// Per-group attribute MSE; `None` when splat counts differ (pruning).
    pub attribute_mse: Option<[f64; 4]>,
    pub compressed_bytes: u64,
    /// The compressed splats as uncompressed 32-bit floats.
    pub uncompressed_bytes: u64,
    pub ratio: f64,
    /// The original cloud's raw size over the compressed size.
    pub ratio_vs_original: f64,
    pub codebook_active_fraction: [f64; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalOptions {
    pub render: RenderOptions,
    /// Quantize renders to 8 bits before comparing.
    pub eight_bit: bool,
}

/// Mean per-image PSNR of `test` against `reference`, skipping identical
/// pairs. Returns `(mean, per_image, identical)`.
pub fn mean_psnr(
    reference: &SplatCloud,
    test: &SplatCloud,
    cams: &[Camera],
    opts: &EvalOptions,
) -> Result<(Option<f64>, Vec<f64>, usize), MetricsError> {
    let per: Vec<f64> = cams
        .par_iter()
        .map(|cam| {
            let (a, _) = render(reference, cam, &opts.render)?;
            let (b, _) = render(test, cam, &opts.render)?;
            if opts.eight_bit {
                psnr_8bit(&a, &b)
            } else {
                psnr(&a, &b)
            }
        })
        .collect::<Result<_, _>>()?;
    let finite: Vec<f64> = per.iter().copied().filter(|v| v.is_finite()).collect();
    let identical = per.len() - finite.len();
    let mean = (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64);
    Ok((mean, per, identical))
}

/// Compare a compressed cloud with the original it came from.
pub fn evaluate(
    original: &SplatCloud,
    q: &QuantizedCloud,
    cams: &[Camera],
    opts: &EvalOptions,
) -> Result<EvalReport, MetricsError> {
    let decoded = dequantize(q)?;
    let (psnr_db, per, identical) = if cams.is_empty() {
        (None, Vec::new(), 0)
    } else {
        mean_psnr(original, &decoded, cams, opts)?
    };
    let sizes = size_report(q);
    let attribute = (original.len() == q.len())
        .then(|| attribute_mse(original, q))
        .transpose()?;
    let active = Group::ALL.map(|g| {
        let counts = q.assignment_counts(g);
        counts.iter().filter(|&&c| c > 0).count() as f64 / counts.len() as f64
    });
    let original_bytes = (original.len() * PARAMS_PER_SPLAT * 4) as u64;
    Ok(EvalReport {
        splats: q.len(),
        original_splats: original.len(),
        cameras: cams.len(),
        psnr_db,
        psnr_infinite: !cams.is_empty() && identical == cams.len(),
        identical_images: identical,
        per_camera_psnr_db: per.into_iter().map(|v| v.is_finite().then_some(v)).collect(),
        attribute_mse: attribute,
        compressed_bytes: sizes.total,
        uncompressed_bytes: sizes.uncompressed,
        ratio: sizes.ratio,
        ratio_vs_original: original_bytes as f64 / sizes.total as f64,
        codebook_active_fraction: active,
    })
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "label,splats,psnr_db,psnr_infinite,mse_s,mse_r,mse_c,mse_sh,compressed_bytes,uncompressed_bytes,ratio,active_s,active_r,active_c,active_sh";

    pub fn csv_row(&self, label: &str) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mse = self.attribute_mse.map_or([None; 4], |m| m.map(Some));
        let mut cols = vec![
            label.to_string(),
            self.splats.to_string(),
            opt(self.psnr_db),
            self.psnr_infinite.to_string(),
        ];
        cols.extend(mse.iter().map(|&m| opt(m)));
        cols.push(self.compressed_bytes.to_string());
        cols.push(self.uncompressed_bytes.to_string());
        cols.push(self.ratio.to_string());
        cols.extend(self.codebook_active_fraction.iter().map(|v| v.to_string()));
        cols.join(",")
    }
}
