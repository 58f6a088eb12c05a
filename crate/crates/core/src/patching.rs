//! Patch grid, saliency scoring and the adaptive patch sampler.
//!
//! An image of size H×W is cut into `HW / s_p²` non-overlapping square
//! patches in row-major grid order. Each patch is scored as
//! `α·edge + β·text + γ·contrast` and the sampler keeps patches whose score
//! strictly exceeds λ, falling back to the top-scoring
//! `ceil(min_retention_fraction · N_P)` patches when too few pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{luminance, Image};

/// Largest Sobel gradient magnitude a 3×3 window of values in `[0, 1]` can
/// produce: `|gx| = 4` and `|gy| = 2` simultaneously, i.e. `√20`.
pub const SOBEL_MAX: f64 = 4.472_135_954_999_58;

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// `size × size × 3`, channel-last, row-major.
    pub pixels: Vec<f64>,
    pub size: usize,
    pub grid_index: (usize, usize),
    pub flat_index: usize,
}

impl Patch {
    fn luma_grid(&self) -> Vec<f64> {
        self.pixels.chunks_exact(3).map(|p| luminance(p[0], p[1], p[2])).collect()
    }

    pub fn mean_luma(&self) -> f64 {
        let l = self.luma_grid();
        l.iter().sum::<f64>() / l.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaliencyScore {
    pub edge: f64,
    pub text: f64,
    pub contrast: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub lambda_threshold: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub min_retention_fraction: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { lambda_threshold: 0.3, alpha: 0.4, beta: 0.4, gamma: 0.2, min_retention_fraction: 0.25 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_threshold) {
            return Err(Error::Config(format!("lambda_threshold {} outside [0, 1]", self.lambda_threshold)));
        }
        if (self.alpha + self.beta + self.gamma - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "saliency weights must sum to 1, got {} + {} + {}",
                self.alpha, self.beta, self.gamma
            )));
        }
        if !(self.min_retention_fraction > 0.0 && self.min_retention_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "min_retention_fraction {} outside (0, 1]",
                self.min_retention_fraction
            )));
        }
        Ok(())
    }
}

pub fn num_patches(height: usize, width: usize, patch_size: usize) -> Result<usize> {
    if patch_size == 0 || !height.is_multiple_of(patch_size) || !width.is_multiple_of(patch_size) {
        return Err(Error::Precondition(format!(
            "image {height}×{width} is not divisible by patch size {patch_size}"
        )));
    }
    Ok(height * width / (patch_size * patch_size))
}

pub fn patchify(image: &Image, patch_size: usize) -> Result<Vec<Patch>> {
    num_patches(image.height, image.width, patch_size)?;
    let (gh, gw) = (image.height / patch_size, image.width / patch_size);
    let mut out = Vec::with_capacity(gh * gw);
    for row in 0..gh {
        for col in 0..gw {
            let mut pixels = Vec::with_capacity(patch_size * patch_size * 3);
            for y in 0..patch_size {
                let start = ((row * patch_size + y) * image.width + col * patch_size) * 3;
                pixels.extend_from_slice(&image.data[start..start + patch_size * 3]);
            }
            out.push(Patch { pixels, size: patch_size, grid_index: (row, col), flat_index: row * gw + col });
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`]: places every patch back at its grid position.
pub fn reassemble(patches: &[Patch], height: usize, width: usize) -> Result<Image> {
    let mut img = Image::new(height, width);
    for p in patches {
        let (row, col) = p.grid_index;
        if (row + 1) * p.size > height || (col + 1) * p.size > width {
            return Err(Error::Shape(format!("patch {:?} outside {height}×{width}", p.grid_index)));
        }
        for y in 0..p.size {
            let dst = ((row * p.size + y) * width + col * p.size) * 3;
            let src = y * p.size * 3;
            img.data[dst..dst + p.size * 3].copy_from_slice(&p.pixels[src..src + p.size * 3]);
        }
    }
    Ok(img)
}

/// Sobel responses (gx, gy) of a square grid with replicate padding.
pub fn sobel(grid: &[f64], size: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |y: isize, x: isize| {
        let yc = y.clamp(0, size as isize - 1) as usize;
        let xc = x.clamp(0, size as isize - 1) as usize;
        grid[yc * size + xc]
    };
    let mut gx = vec![0.0; size * size];
    let mut gy = vec![0.0; size * size];
    for y in 0..size as isize {
        for x in 0..size as isize {
            let i = y as usize * size + x as usize;
            gx[i] = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            gy[i] = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
        }
    }
    (gx, gy)
}

pub fn saliency_score(patch: &Patch, neighbors: &[&Patch], cfg: &SamplerConfig) -> SaliencyScore {
    let luma = patch.luma_grid();
    let (gx, gy) = sobel(&luma, patch.size);
    let n = luma.len() as f64;

    let edge = gx.iter().zip(&gy).map(|(a, b)| (a * a + b * b).sqrt()).sum::<f64>() / n / SOBEL_MAX;

    // Stroke density: share of pixels with a strong horizontal gradient.
    let max_gx = gx.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let text = if max_gx > 0.0 {
        gx.iter().filter(|v| v.abs() > 0.5 * max_gx).count() as f64 / n
    } else {
        0.0
    };

    let contrast = if neighbors.is_empty() {
        0.0
    } else {
        let own = luma.iter().sum::<f64>() / n;
        let around = neighbors.iter().map(|p| p.mean_luma()).sum::<f64>() / neighbors.len() as f64;
        (own - around).abs()
    };

    let edge = edge.clamp(0.0, 1.0);
    let text = text.clamp(0.0, 1.0);
    let contrast = contrast.clamp(0.0, 1.0);
    SaliencyScore { edge, text, contrast, total: cfg.alpha * edge + cfg.beta * text + cfg.gamma * contrast }
}

/// The (up to 8) grid-adjacent patches of `patches[index]`.
pub fn neighbors_of(patches: &[Patch], grid_width: usize, index: usize) -> Vec<&Patch> {
    let grid_height = patches.len() / grid_width;
    let (row, col) = (index / grid_width, index % grid_width);
    let mut out = Vec::with_capacity(8);
    for dr in -1isize..=1 {
        for dc in -1isize..=1 {
            if dr == 0 && dc == 0 {
                continue;
            }
            let (r, c) = (row as isize + dr, col as isize + dc);
            if r >= 0 && c >= 0 && (r as usize) < grid_height && (c as usize) < grid_width {
                out.push(&patches[r as usize * grid_width + c as usize]);
            }
        }
    }
    out
}

pub fn score_all(patches: &[Patch], grid_width: usize, cfg: &SamplerConfig) -> Vec<SaliencyScore> {
    (0..patches.len()).map(|i| saliency_score(&patches[i], &neighbors_of(patches, grid_width, i), cfg)).collect()
}

/// Retained flat indices in ascending order.
pub fn adaptive_sample(patches: &[Patch], scores: &[SaliencyScore], cfg: &SamplerConfig) -> Vec<usize> {
    assert_eq!(patches.len(), scores.len(), "patches and scores must align");
    let n = patches.len();
    if n == 0 {
        return Vec::new();
    }
    let mut kept: Vec<usize> = (0..n)
        .filter(|&i| scores[i].total > cfg.lambda_threshold)
        .map(|i| patches[i].flat_index)
        .collect();
    let floor = ((cfg.min_retention_fraction * n as f64).ceil() as usize).clamp(1, n);
    if kept.len() < floor {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .total
                .partial_cmp(&scores[a].total)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(patches[a].flat_index.cmp(&patches[b].flat_index))
        });
        kept = order[..floor].iter().map(|&i| patches[i].flat_index).collect();
    }
    kept.sort_unstable();
    kept
}

/// Patches, their saliency scores and the retained subset for one image.
#[derive(Debug, Clone)]
pub struct PatchSet {
    pub patches: Vec<Patch>,
    pub scores: Vec<SaliencyScore>,
    pub retained: Vec<usize>,
    pub grid_width: usize,
}

impl PatchSet {
    pub fn from_image(image: &Image, patch_size: usize, cfg: &SamplerConfig) -> Result<Self> {
        let patches = patchify(image, patch_size)?;
        let grid_width = image.width / patch_size;
        let scores = score_all(&patches, grid_width, cfg);
        let retained = adaptive_sample(&patches, &scores, cfg);
        Ok(Self { patches, scores, retained, grid_width })
    }

    pub fn retained_patches(&self) -> Vec<&Patch> {
        self.retained.iter().map(|&i| &self.patches[i]).collect()
    }

    pub fn retention(&self) -> f64 {
        self.retained.len() as f64 / self.patches.len() as f64
    }
}
