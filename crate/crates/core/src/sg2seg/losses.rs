//! Reference (f64) layout losses with analytic gradients w.r.t. the
//! network outputs. Training uses the tensor versions in `model`; these
//! define the values those must reproduce.

use ndarray::{Array2, Array3, Zip};

use crate::error::{Error, Result};

/// Sum over objects of the L1 distance between 4-coordinate boxes.
pub fn loss_box(pred: &[[f64; 4]], gt: &[[f64; 4]]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch(pred.len(), gt.len()));
    }
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| p.iter().zip(g).map(|(a, b)| (a - b).abs()).sum::<f64>())
        .sum())
}

/// d loss_box / d pred (subgradient 0 at ties).
pub fn loss_box_grad(pred: &[[f64; 4]], gt: &[[f64; 4]]) -> Result<Vec<[f64; 4]>> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch(pred.len(), gt.len()));
    }
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let mut out = [0.0; 4];
            for k in 0..4 {
                out[k] = (p[k] - g[k]).signum() * f64::from(p[k] != g[k]);
            }
            out
        })
        .collect())
}

fn check_pairs(pred: &[Array2<f64>], gt: &[Array2<f64>]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch(pred.len(), gt.len()));
    }
    for (p, g) in pred.iter().zip(gt) {
        if p.dim() != g.dim() {
            return Err(Error::Shape(format!("mask {:?} vs {:?}", p.dim(), g.dim())));
        }
    }
    Ok(())
}

/// Per-object mean binary cross entropy, summed over objects. Predictions
/// are clamped to `[1e-12, 1 - 1e-12]` before taking logs.
pub fn loss_mask(pred: &[Array2<f64>], gt: &[Array2<f64>]) -> Result<f64> {
    check_pairs(pred, gt)?;
    const EPS: f64 = 1e-12;
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let sum: f64 = Zip::from(p)
                .and(g)
                .fold(0.0, |acc, &p, &y| {
                    let p = p.clamp(EPS, 1.0 - EPS);
                    acc - (y * p.ln() + (1.0 - y) * (1.0 - p).ln())
                });
            sum / p.len() as f64
        })
        .sum())
}

pub fn loss_mask_grad(pred: &[Array2<f64>], gt: &[Array2<f64>]) -> Result<Vec<Array2<f64>>> {
    check_pairs(pred, gt)?;
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let n = p.len() as f64;
            Zip::from(p).and(g).map_collect(|&p, &y| (p - y) / (p * (1.0 - p)) / n)
        })
        .collect())
}

/// Mean absolute difference between two soft class maps.
pub fn loss_seg(pred: &Array3<f64>, gt: &Array3<f64>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!("seg {:?} vs {:?}", pred.dim(), gt.dim())));
    }
    Ok(Zip::from(pred).and(gt).fold(0.0, |acc, a, b| acc + (a - b).abs()) / pred.len() as f64)
}

pub fn loss_seg_grad(pred: &Array3<f64>, gt: &Array3<f64>) -> Result<Array3<f64>> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!("seg {:?} vs {:?}", pred.dim(), gt.dim())));
    }
    let n = pred.len() as f64;
    Ok(Zip::from(pred)
        .and(gt)
        .map_collect(|a, b| (a - b).signum() * f64::from(a != b) / n))
}
