//! Evaluation metrics: dice score, 95th-percentile Hausdorff distance, the
//! combined segmentation score and centre localization error.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::distance::{squared_edt, UNREACHABLE};
use crate::error::{Error, Result};
use crate::mask::Mask;

fn same_extent(a: &Mask, b: &Mask, op: &'static str) -> Result<()> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::shape(
            op,
            format!("{}x{} vs {}x{}", a.width(), a.height(), b.width(), b.height()),
        ));
    }
    Ok(())
}

/// `2 |P ∩ G| / (|P| + |G|)`; two empty masks score 1.
pub fn dice_score(pred: &Mask, gt: &Mask) -> Result<f64> {
    same_extent(pred, gt, "dice_score")?;
    let inter = pred.values().iter().zip(gt.values()).filter(|(&a, &b)| a & b != 0).count();
    let total = pred.count() + gt.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Foreground pixels with at least one 4-neighbour in the background;
/// pixels outside the image count as background.
pub fn boundary(mask: &Mask) -> Vec<bool> {
    let (w, h) = (mask.width(), mask.height());
    let mut out = vec![false; w * h];
    for i in 0..h {
        for j in 0..w {
            if !mask.get(i, j) {
                continue;
            }
            let interior = i > 0
                && j > 0
                && i + 1 < h
                && j + 1 < w
                && mask.get(i - 1, j)
                && mask.get(i + 1, j)
                && mask.get(i, j - 1)
                && mask.get(i, j + 1);
            out[i * w + j] = !interior;
        }
    }
    out
}

/// Nearest-rank percentile of an ascending slice, `q` in (0, 1].
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Symmetric 95th-percentile Hausdorff distance in pixels.
///
/// Distances from every boundary pixel of each mask to the nearest
/// boundary pixel of the other are pooled, and the nearest-rank 95th
/// percentile of the pool is returned.
pub fn hausdorff95(pred: &Mask, gt: &Mask) -> Result<f64> {
    same_extent(pred, gt, "hausdorff95")?;
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::EmptyForeground(
            "hausdorff95 is undefined when either mask is empty".into(),
        ));
    }
    let (w, h) = (pred.width(), pred.height());
    let (bp, bg) = (boundary(pred), boundary(gt));
    let to_gt = squared_edt(w, h, &bg);
    let to_pred = squared_edt(w, h, &bp);
    let mut pooled: Vec<f64> = Vec::new();
    for (from, to) in [(&bp, &to_gt), (&bg, &to_pred)] {
        for (k, _) in from.iter().enumerate().filter(|(_, &b)| b) {
            debug_assert_ne!(to[k], UNREACHABLE);
            pooled.push((to[k] as f64).sqrt());
        }
    }
    pooled.sort_by(f64::total_cmp);
    Ok(nearest_rank(&pooled, 0.95))
}

/// Combined score `sum_c (dice_c / 200 - hausdorff_c / 60)` with dice in
/// percent and Hausdorff distances in pixels.
pub fn s_score(dice_percent: &[f64], hausdorff: &[f64]) -> f64 {
    assert_eq!(dice_percent.len(), hausdorff.len(), "one dice and one distance per class");
    dice_percent.iter().map(|d| d / 200.0).sum::<f64>() - hausdorff.iter().map(|h| h / 60.0).sum::<f64>()
}

pub fn euclidean_distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Aggregate evaluation of one model on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean dice per class, in [0, 1].
    pub dice: Vec<f64>,
    /// Mean 95% Hausdorff distance per class, pixels.
    pub hausdorff95: Vec<f64>,
    pub s: f64,
    /// Mean centre error in pixels, for localization.
    pub ed: Option<f64>,
    pub n: usize,
}

impl EvalReport {
    pub fn segmentation(dice: Vec<f64>, hausdorff95: Vec<f64>, n: usize) -> Self {
        let percent: Vec<f64> = dice.iter().map(|d| d * 100.0).collect();
        let s = s_score(&percent, &hausdorff95);
        Self {
            dice,
            hausdorff95,
            s,
            ed: None,
            n,
        }
    }

    pub fn localization(distances: &[f64]) -> Self {
        let n = distances.len();
        Self {
            dice: Vec::new(),
            hausdorff95: Vec::new(),
            s: 0.0,
            ed: Some(distances.iter().sum::<f64>() / n.max(1) as f64),
            n,
        }
    }

    /// Fixed-width table: one row per class, then the summary line.
    pub fn table(&self) -> String {
        let mut out = String::new();
        if !self.dice.is_empty() {
            let _ = writeln!(out, "{:<8} {:>8} {:>10}", "class", "Dice", "Hausdorff");
            for (c, (d, h)) in self.dice.iter().zip(&self.hausdorff95).enumerate() {
                let _ = writeln!(out, "{:<8} {:>8.1} {:>10.2}", c, d * 100.0, h);
            }
            let _ = writeln!(out, "{:<8} {:>19.2}", "S", self.s);
        }
        if let Some(ed) = self.ed {
            let _ = writeln!(out, "{:<8} {:>8.2}", "ED", ed);
        }
        let _ = writeln!(out, "{:<8} {:>8}", "n", self.n);
        out
    }
}
