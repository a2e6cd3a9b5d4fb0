//! Evaluation metrics over thresholded masks: Dice overlap and the 95th
//! percentile Hausdorff distance between boundary point sets, plus the
//! per-slice volume report and its CSV/summary serializations.

use serde::{Deserialize, Serialize};

use crate::util::{inner_boundary_pixels, percentile_sorted};
use crate::{Error, Mask, Result};

/// How the two directed distance multisets combine into one HD95 value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Hd95Pooling {
    /// Pool both directed multisets, then take one 95th percentile.
    #[default]
    PooledDirected,
    /// Take each direction's 95th percentile, then the maximum.
    MaxOfDirected,
}

/// One slice's metrics. `hd95` is `None` when exactly one of the masks was
/// empty — the distance is undefined there, and reports exclude (but count)
/// such slices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceResult {
    pub slice_index: usize,
    pub dice: Option<f64>,
    pub hd95: Option<f64>,
}

fn check_shapes(pred: &Mask, gt: &Mask) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::contract(format!(
            "mask shapes differ: {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    Ok(())
}

/// 2|P∩G| / (|P|+|G|); 1.0 when both masks are empty.
pub fn dice_score(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_shapes(pred, gt)?;
    let mut intersection = 0usize;
    let mut p_count = 0usize;
    let mut g_count = 0usize;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let p = p > 0;
        let g = g > 0;
        p_count += usize::from(p);
        g_count += usize::from(g);
        intersection += usize::from(p && g);
    }
    if p_count + g_count == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * intersection as f64 / (p_count + g_count) as f64)
}

fn directed_distances(from: &[(usize, usize)], to: &[(usize, usize)], spacing: (f64, f64)) -> Vec<f64> {
    let (row_mm, col_mm) = spacing;
    from.iter()
        .map(|&(r1, c1)| {
            to.iter()
                .map(|&(r2, c2)| {
                    let dr = (r1 as f64 - r2 as f64) * row_mm;
                    let dc = (c1 as f64 - c2 as f64) * col_mm;
                    (dr * dr + dc * dc).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// 95th percentile of boundary-to-boundary distances under the given pixel
/// spacing. `None` when exactly one mask is empty; 0.0 when both are.
pub fn hd95(pred: &Mask, gt: &Mask, spacing: (f64, f64)) -> Result<Option<f64>> {
    hd95_with_pooling(pred, gt, spacing, Hd95Pooling::default())
}

pub fn hd95_with_pooling(
    pred: &Mask,
    gt: &Mask,
    spacing: (f64, f64),
    pooling: Hd95Pooling,
) -> Result<Option<f64>> {
    check_shapes(pred, gt)?;
    let pb = inner_boundary_pixels(pred);
    let gb = inner_boundary_pixels(gt);
    match (pb.is_empty(), gb.is_empty()) {
        (true, true) => return Ok(Some(0.0)),
        (true, false) | (false, true) => return Ok(None),
        (false, false) => {}
    }
    let mut p_to_g = directed_distances(&pb, &gb, spacing);
    let mut g_to_p = directed_distances(&gb, &pb, spacing);
    let value = match pooling {
        Hd95Pooling::PooledDirected => {
            let mut pooled = p_to_g;
            pooled.append(&mut g_to_p);
            pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
            percentile_sorted(&pooled, 95.0)
        }
        Hd95Pooling::MaxOfDirected => {
            p_to_g.sort_by(|a, b| a.partial_cmp(b).unwrap());
            g_to_p.sort_by(|a, b| a.partial_cmp(b).unwrap());
            percentile_sorted(&p_to_g, 95.0).max(percentile_sorted(&g_to_p, 95.0))
        }
    };
    Ok(Some(value))
}

/// Per-slice Dice and HD95 for parallel lists of prediction and ground-truth
/// masks (one CT volume).
pub fn per_slice_volume_report(
    volume_preds: &[Mask],
    volume_gts: &[Mask],
    spacing: (f64, f64),
) -> Result<Vec<SliceResult>> {
    if volume_preds.len() != volume_gts.len() {
        return Err(Error::contract(format!(
            "volume lengths differ: {} predictions vs {} ground truths",
            volume_preds.len(),
            volume_gts.len()
        )));
    }
    volume_preds
        .iter()
        .zip(volume_gts.iter())
        .enumerate()
        .map(|(slice_index, (p, g))| {
            Ok(SliceResult {
                slice_index,
                dice: Some(dice_score(p, g)?),
                hd95: hd95(p, g, spacing)?,
            })
        })
        .collect()
}

/// Mean/std over defined entries plus excluded-slice counts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSummary {
    pub num_slices: usize,
    pub mean_dice: Option<f64>,
    pub std_dice: Option<f64>,
    pub excluded_dice: usize,
    pub mean_hd95: Option<f64>,
    pub std_hd95: Option<f64>,
    pub excluded_hd95: usize,
}

fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (Some(mean), Some(var.sqrt()))
}

pub fn summarize(results: &[SliceResult]) -> MetricSummary {
    let dice: Vec<f64> = results.iter().filter_map(|r| r.dice).collect();
    let hd: Vec<f64> = results.iter().filter_map(|r| r.hd95).collect();
    let (mean_dice, std_dice) = mean_std(&dice);
    let (mean_hd95, std_hd95) = mean_std(&hd);
    MetricSummary {
        num_slices: results.len(),
        mean_dice,
        std_dice,
        excluded_dice: results.len() - dice.len(),
        mean_hd95,
        std_hd95,
        excluded_hd95: results.len() - hd.len(),
    }
}

/// CSV with header `slice,dice,hd95`; undefined entries serialize as `NA`.
pub fn report_csv(results: &[SliceResult]) -> String {
    let mut out = String::from("slice,dice,hd95\n");
    for r in results {
        let dice = r.dice.map_or("NA".to_string(), |v| format!("{v:.6}"));
        let hd = r.hd95.map_or("NA".to_string(), |v| format!("{v:.6}"));
        out.push_str(&format!("{},{},{}\n", r.slice_index, dice, hd));
    }
    out
}
