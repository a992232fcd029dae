//! End-point error and keypoint accuracy over predicted correspondences.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::evalsynth::fixtures::AnnotatedCorrespondence;
use crate::geometry::Pixel;
use crate::raster::RgbImage;

/// Thresholds reported by [`evaluate`], in pixels.
pub const PCK_THRESHOLDS: [f64; 2] = [3.0, 5.0];

fn distances(pred: &[Pixel], gt: &[Pixel]) -> Result<Vec<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::Domain(format!(
            "{} predictions for {} ground-truth points",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Domain("no correspondences to score".into()));
    }
    Ok(pred.iter().zip(gt).map(|(p, g)| p.distance(g)).collect())
}

/// Mean Euclidean distance between predicted and true pixels.
pub fn aepe(pred: &[Pixel], gt: &[Pixel]) -> Result<f64> {
    let d = distances(pred, gt)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Fraction of predictions strictly closer than `delta` to the truth.
pub fn pck(pred: &[Pixel], gt: &[Pixel], delta: f64) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(Error::Domain(format!("PCK threshold must be positive, got {delta}")));
    }
    let d = distances(pred, gt)?;
    Ok(d.iter().filter(|x| **x < delta).count() as f64 / d.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    /// Mean error over valid predictions (NaN when there are none).
    pub aepe: f64,
    /// `(δ, fraction)` pairs in increasing δ.
    pub pck: Vec<(f64, f64)>,
    pub n: usize,
    /// Predictions the matcher could not produce; they count as misses.
    pub invalid: usize,
}

impl EvalResult {
    pub fn pck_at(&self, delta: f64) -> Option<f64> {
        self.pck.iter().find(|(d, _)| *d == delta).map(|p| p.1)
    }

    pub fn csv_header(&self) -> String {
        let mut s = String::from("method,n,invalid,aepe");
        for (d, _) in &self.pck {
            write!(s, ",pck@{d}px").unwrap();
        }
        s
    }

    pub fn csv_row(&self, method: &str) -> String {
        let mut s = format!("{method},{},{},{:.6}", self.n, self.invalid, self.aepe);
        for (_, p) in &self.pck {
            write!(s, ",{p:.6}").unwrap();
        }
        s
    }
}

/// Scores optional predictions against ground truth. Missing predictions
/// are left out of the mean error and count as failures for every PCK
/// threshold.
pub fn evaluate(pred: &[Option<Pixel>], gt: &[Pixel], thresholds: &[f64]) -> Result<EvalResult> {
    if pred.len() != gt.len() {
        return Err(Error::Domain(format!(
            "{} predictions for {} ground-truth points",
            pred.len(),
            gt.len()
        )));
    }
    if gt.is_empty() {
        return Err(Error::Domain("no annotations to evaluate".into()));
    }
    let d: Vec<f64> = pred
        .iter()
        .zip(gt)
        .filter_map(|(p, g)| p.map(|p| p.distance(g)))
        .collect();
    let n = gt.len();
    let aepe = if d.is_empty() {
        f64::NAN
    } else {
        d.iter().sum::<f64>() / d.len() as f64
    };
    let mut thresholds = thresholds.to_vec();
    thresholds.sort_by(f64::total_cmp);
    let pck = thresholds
        .iter()
        .map(|&t| (t, d.iter().filter(|x| **x < t).count() as f64 / n as f64))
        .collect();
    Ok(EvalResult {
        aepe,
        pck,
        n,
        invalid: n - d.len(),
    })
}

/// Runs `predict` on every annotation and scores it at [`PCK_THRESHOLDS`].
pub fn evaluate_matcher<F>(annotations: &[AnnotatedCorrespondence], predict: F) -> Result<EvalResult>
where
    F: Fn(&AnnotatedCorrespondence) -> Result<Option<Pixel>> + Sync,
{
    let pred = annotations.par_iter().map(&predict).collect::<Result<Vec<_>>>()?;
    let gt: Vec<Pixel> = annotations.iter().map(|a| a.u_t_gt).collect();
    evaluate(&pred, &gt, &PCK_THRESHOLDS)
}

/// Peak signal-to-noise ratio in dB for images with values in `[0, 1]`.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::Domain(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .flat_map(|(p, q)| (0..3).map(move |c| (p[c] as f64 - q[c] as f64).powi(2)))
        .sum::<f64>()
        / (3 * a.data.len()) as f64;
    Ok(-10.0 * mse.log10())
}
