//! CT slice pipeline: percentile-clip normalization, geometric and noise
//! augmentation, 5-fold splits, point-prompt sampling, and dataset I/O over
//! the named-array container format.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container::NamedArrays;
use crate::util::{mix_seed, percentile_sorted};
use crate::{Error, Mask, Result};

pub const NUM_FOLDS: usize = 5;

/// One normalized CT slice with its label and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSample {
    /// Intensities in [0, 1].
    pub image: Array2<f64>,
    pub mask: Mask,
    pub case_id: String,
    pub slice_index: usize,
    /// (row_mm, col_mm) pixel spacing for distance metrics.
    pub spacing: (f64, f64),
}

/// One cross-validation fold: disjoint train/validation index lists into the
/// dataset's sample vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldSpec {
    pub fold_index: usize,
    pub train_ids: Vec<usize>,
    pub val_ids: Vec<usize>,
}

/// Clip to the [0.5, 99.5] percentiles of the foreground intensities, then
/// min-max rescale to [0, 1]. Foreground defaults to pixels above the raw
/// minimum (the non-air region of a CT slice); pass an explicit mask to
/// override. A constant window collapses to all zeros.
pub fn percentile_clip_normalize(raw: &Array2<f64>, fg_mask: Option<&Mask>) -> Result<Array2<f64>> {
    if raw.is_empty() {
        return Err(Error::Data("cannot normalize an empty image".into()));
    }
    if let Some(m) = fg_mask {
        if m.dim() != raw.dim() {
            return Err(Error::contract("foreground mask shape mismatch"));
        }
    }
    let mut fg_values: Vec<f64> = match fg_mask {
        Some(m) => raw
            .iter()
            .zip(m.iter())
            .filter(|(_, &keep)| keep > 0)
            .map(|(&v, _)| v)
            .collect(),
        None => {
            let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
            raw.iter().cloned().filter(|&v| v > min).collect()
        }
    };
    // Degenerate foreground (constant image or empty mask): fall back to the
    // whole image so the percentiles are still well defined.
    if fg_values.is_empty() {
        fg_values = raw.iter().cloned().collect();
    }
    fg_values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let p_lo = percentile_sorted(&fg_values, 0.5);
    let p_hi = percentile_sorted(&fg_values, 99.5);
    if p_hi <= p_lo {
        return Ok(Array2::zeros(raw.dim()));
    }
    let range = p_hi - p_lo;
    Ok(raw.mapv(|v| (v.clamp(p_lo, p_hi) - p_lo) / range))
}

/// Augmentation probabilities and magnitudes. Magnitude defaults: shifts up
/// to 10% of each side, rotations up to ±15°, noise σ = 0.05.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub shift_prob: f64,
    pub max_shift_frac: f64,
    pub rotate_prob: f64,
    pub max_rotate_deg: f64,
    pub noise_prob: f64,
    pub noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            shift_prob: 0.5,
            max_shift_frac: 0.1,
            rotate_prob: 0.5,
            max_rotate_deg: 15.0,
            noise_prob: 0.5,
            noise_sigma: 0.05,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            shift_prob: 0.0,
            rotate_prob: 0.0,
            noise_prob: 0.0,
            ..Self::default()
        }
    }
}

/// Seed for sample `sample_index`'s augmentation in epoch `epoch`. Depends
/// only on these values — never on worker scheduling — so parallel loaders
/// reproduce the single-threaded stream.
pub fn augment_seed(global_seed: u64, epoch: usize, sample_index: usize) -> u64 {
    mix_seed(global_seed, &[epoch as u64, sample_index as u64])
}

/// Shift by (dx columns, dy rows), zero-filling vacated pixels. The same
/// translation is applied to image and mask.
fn shift_sample(image: &Array2<f64>, mask: &Mask, dx: isize, dy: isize) -> (Array2<f64>, Mask) {
    let (h, w) = image.dim();
    let mut out_img = Array2::zeros((h, w));
    let mut out_mask = Array2::zeros((h, w));
    for r in 0..h as isize {
        for c in 0..w as isize {
            let src_r = r - dy;
            let src_c = c - dx;
            if src_r >= 0 && src_r < h as isize && src_c >= 0 && src_c < w as isize {
                out_img[[r as usize, c as usize]] = image[[src_r as usize, src_c as usize]];
                out_mask[[r as usize, c as usize]] = mask[[src_r as usize, src_c as usize]];
            }
        }
    }
    (out_img, out_mask)
}

fn bilinear_sample_zero(img: &Array2<f64>, r: f64, c: f64) -> f64 {
    let (h, w) = img.dim();
    let r0 = r.floor();
    let c0 = c.floor();
    let fr = r - r0;
    let fc = c - c0;
    let mut acc = 0.0;
    for (dr, wr) in [(0isize, 1.0 - fr), (1, fr)] {
        for (dc, wc) in [(0isize, 1.0 - fc), (1, fc)] {
            let rr = r0 as isize + dr;
            let cc = c0 as isize + dc;
            if rr >= 0 && (rr as usize) < h && cc >= 0 && (cc as usize) < w {
                acc += wr * wc * img[[rr as usize, cc as usize]];
            }
        }
    }
    acc
}

/// Rotate about the image center by `degrees` (counterclockwise in row/col
/// space). Image resamples bilinearly, mask nearest-neighbor; both share the
/// exact same inverse mapping, and out-of-frame reads are zero.
fn rotate_sample(image: &Array2<f64>, mask: &Mask, degrees: f64) -> (Array2<f64>, Mask) {
    let (h, w) = image.dim();
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cr = (h as f64 - 1.0) / 2.0;
    let cc = (w as f64 - 1.0) / 2.0;
    let mut out_img = Array2::zeros((h, w));
    let mut out_mask: Mask = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let yr = r as f64 - cr;
            let xc = c as f64 - cc;
            // Inverse rotation of the output coordinate.
            let src_r = cos * yr + sin * xc + cr;
            let src_c = -sin * yr + cos * xc + cc;
            out_img[[r, c]] = bilinear_sample_zero(image, src_r, src_c);
            let nr = src_r.round();
            let nc = src_c.round();
            if nr >= 0.0 && (nr as usize) < h && nc >= 0.0 && (nc as usize) < w {
                out_mask[[r, c]] = mask[[nr as usize, nc as usize]];
            }
        }
    }
    (out_img, out_mask)
}

/// Apply the configured augmentations in a fixed order (shift, rotate,
/// noise). Deterministic per seed; probabilities of zero leave the sample
/// untouched.
pub fn augment(sample: &SliceSample, config: &AugmentConfig, seed: u64) -> SliceSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = sample.image.dim();
    let mut image = sample.image.clone();
    let mut mask = sample.mask.clone();

    if rng.random::<f64>() < config.shift_prob {
        let max_dy = ((h as f64) * config.max_shift_frac).floor() as isize;
        let max_dx = ((w as f64) * config.max_shift_frac).floor() as isize;
        let dy = if max_dy > 0 {
            rng.random_range(-(max_dy as i64)..=max_dy as i64) as isize
        } else {
            0
        };
        let dx = if max_dx > 0 {
            rng.random_range(-(max_dx as i64)..=max_dx as i64) as isize
        } else {
            0
        };
        if dx != 0 || dy != 0 {
            (image, mask) = shift_sample(&image, &mask, dx, dy);
        }
    }

    if rng.random::<f64>() < config.rotate_prob {
        let degrees = rng.random_range(-config.max_rotate_deg..=config.max_rotate_deg);
        if degrees != 0.0 {
            (image, mask) = rotate_sample(&image, &mask, degrees);
        }
    }

    if rng.random::<f64>() < config.noise_prob {
        let normal = Normal::new(0.0, config.noise_sigma).unwrap();
        image.mapv_inplace(|v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0));
    }

    SliceSample { image, mask, ..sample.clone() }
}

/// Shuffle sample indices and split them into 5 near-equal validation
/// chunks; when the count is not divisible by 5 the earlier folds take the
/// extra samples.
pub fn make_folds(num_samples: usize, seed: u64) -> Result<Vec<FoldSpec>> {
    if num_samples < NUM_FOLDS {
        return Err(Error::contract(format!(
            "need at least {NUM_FOLDS} samples for {NUM_FOLDS}-fold validation, got {num_samples}"
        )));
    }
    let mut indices: Vec<usize> = (0..num_samples).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[b'f' as u64]));
    indices.shuffle(&mut rng);
    let base = num_samples / NUM_FOLDS;
    let remainder = num_samples % NUM_FOLDS;
    let mut folds = Vec::with_capacity(NUM_FOLDS);
    let mut start = 0;
    for fold_index in 0..NUM_FOLDS {
        let size = base + usize::from(fold_index < remainder);
        let val_ids: Vec<usize> = indices[start..start + size].to_vec();
        let train_ids: Vec<usize> = indices[..start]
            .iter()
            .chain(indices[start + size..].iter())
            .cloned()
            .collect();
        folds.push(FoldSpec { fold_index, train_ids, val_ids });
        start += size;
    }
    Ok(folds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptMode {
    /// Uniform over foreground pixels (training-time jitter).
    Random,
    /// Foreground pixel nearest the foreground centroid (evaluation).
    Centroid,
}

/// A single point prompt in pixel coordinates (x = column, y = row).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PointPrompt {
    pub x: usize,
    pub y: usize,
}

/// Pick a foreground point. The result always lies on the mask; an empty
/// mask yields an error so callers can skip or supply a manual point.
pub fn sample_point_prompt(mask: &Mask, mode: PromptMode, seed: u64) -> Result<PointPrompt> {
    // Row-major foreground scan gives the deterministic tie order.
    let fg: Vec<(usize, usize)> = {
        let (h, w) = mask.dim();
        let mut v = Vec::new();
        for r in 0..h {
            for c in 0..w {
                if mask[[r, c]] > 0 {
                    v.push((r, c));
                }
            }
        }
        v
    };
    if fg.is_empty() {
        return Err(Error::Data("cannot sample a prompt from an empty mask".into()));
    }
    let (r, c) = match mode {
        PromptMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            fg[rng.random_range(0..fg.len())]
        }
        PromptMode::Centroid => {
            let n = fg.len() as f64;
            let cr = fg.iter().map(|&(r, _)| r as f64).sum::<f64>() / n;
            let cc = fg.iter().map(|&(_, c)| c as f64).sum::<f64>() / n;
            let mut best = fg[0];
            let mut best_d = f64::INFINITY;
            for &(r, c) in &fg {
                let d = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
                if d < best_d {
                    best_d = d;
                    best = (r, c);
                }
            }
            best
        }
    };
    Ok(PointPrompt { x: c, y: r })
}

/// One case's slice container in a dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub case_id: String,
    /// Container path, relative to the manifest file.
    pub path: String,
    /// (row_mm, col_mm); defaults to unit spacing.
    pub spacing: Option<(f64, f64)>,
}

/// UTF-8 JSON manifest listing every case container of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub cases: Vec<CaseEntry>,
}

/// Load every slice of every case, normalizing images on the way in. Sample
/// order (manifest case order, then slice index) defines the global sample
/// indices used by folds.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<SliceSample>> {
    let text = std::fs::read_to_string(manifest_path)
        .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", manifest_path.display())))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("bad manifest: {e}")))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::new();
    for case in &manifest.cases {
        let container = NamedArrays::read_from(base.join(&case.path))?;
        let spacing = case.spacing.unwrap_or((1.0, 1.0));
        for k in 0.. {
            let image_name = format!("image.{k}");
            let mask_name = format!("mask.{k}");
            if !container.contains(&image_name) {
                break;
            }
            let raw = container.get_f64(&image_name).map_err(|e| {
                Error::Data(format!("case {}: {e}", case.case_id))
            })?;
            let mask = container.get_u8(&mask_name).map_err(|e| {
                Error::Data(format!("case {}: {e}", case.case_id))
            })?;
            if raw.dim() != mask.dim() {
                return Err(Error::Data(format!(
                    "case {} slice {k}: image {:?} vs mask {:?}",
                    case.case_id,
                    raw.dim(),
                    mask.dim()
                )));
            }
            samples.push(SliceSample {
                image: percentile_clip_normalize(raw, None)?,
                mask: mask.clone(),
                case_id: case.case_id.clone(),
                slice_index: k,
                spacing,
            });
        }
    }
    if samples.is_empty() {
        return Err(Error::Data("dataset contains no slices".into()));
    }
    Ok(samples)
}

/// Write a deterministic synthetic dataset of bright elliptical lesions on a
/// noisy gradient background. Returns the manifest path. Intended for tests,
/// examples, and desk-scale training runs.
pub fn generate_toy_dataset(
    dir: &Path,
    num_cases: usize,
    slices_per_case: usize,
    side: usize,
    seed: u64,
) -> Result<PathBuf> {
    assert!(side >= 8, "toy slices need room for a lesion");
    std::fs::create_dir_all(dir)?;
    let mut cases = Vec::new();
    for case_idx in 0..num_cases {
        let case_id = format!("case{case_idx:03}");
        let mut container = NamedArrays::new();
        for k in 0..slices_per_case {
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix_seed(seed, &[case_idx as u64, k as u64]));
            let margin = side / 4;
            let cr = rng.random_range(margin..side - margin) as f64;
            let cc = rng.random_range(margin..side - margin) as f64;
            let min_radius = (side as f64 / 8.0).max(1.2);
            let radius_r = rng.random_range(min_radius..(side as f64 / 4.0));
            let radius_c = rng.random_range(min_radius..(side as f64 / 4.0));
            let mut mask: Mask = Array2::zeros((side, side));
            let mut image = Array2::zeros((side, side));
            for r in 0..side {
                for c in 0..side {
                    let dr = (r as f64 - cr) / radius_r;
                    let dc = (c as f64 - cc) / radius_c;
                    let inside = dr * dr + dc * dc <= 1.0;
                    if inside {
                        mask[[r, c]] = 1;
                    }
                    // Lesion sits well above a sloped, noisy background.
                    let background = 40.0 * (r as f64 / side as f64)
                        + 20.0 * (c as f64 / side as f64)
                        + rng.random_range(-5.0..5.0);
                    image[[r, c]] = background + if inside { 120.0 } else { 0.0 };
                }
            }
            container.insert_f64(format!("image.{k}"), image)?;
            container.insert_u8(format!("mask.{k}"), mask)?;
        }
        let file_name = format!("{case_id}.bin");
        container.write_to(dir.join(&file_name))?;
        cases.push(CaseEntry { case_id, path: file_name, spacing: None });
    }
    let manifest = DatasetManifest { cases };
    let manifest_path = dir.join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest_path)
}
