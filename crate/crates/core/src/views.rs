//! Stochastic multi-view generation: a few information-rich global views and
//! several masked local views per sample.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Matrix;
use crate::error::{PawsError, Result};

/// How local views discard information.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LocalMode {
    /// Zero a random subset of coordinates.
    Mask,
    /// Keep a random contiguous window of a `height × width` grid, zero the rest.
    Window { height: usize, width: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Standard deviation of additive Gaussian noise.
    pub noise_sigma: f64,
    /// Per-sample multiplicative jitter drawn uniformly from this range.
    pub scale_jitter: (f64, f64),
    /// Fraction of coordinates (or grid cells) removed in local views.
    pub mask_fraction_local: f64,
    pub local_mode: LocalMode,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { noise_sigma: 0.1, scale_jitter: (0.9, 1.1), mask_fraction_local: 0.5, local_mode: LocalMode::Mask }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self { noise_sigma: 0.0, scale_jitter: (1.0, 1.0), mask_fraction_local: 0.0, local_mode: LocalMode::Mask }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_jitter;
        if !(self.noise_sigma >= 0.0) {
            return Err(PawsError::Domain(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(lo > 0.0 && lo <= hi) {
            return Err(PawsError::Domain(format!("scale jitter needs 0 < low <= high, got ({lo}, {hi})")));
        }
        if !(0.0..1.0).contains(&self.mask_fraction_local) {
            return Err(PawsError::Domain(format!(
                "mask fraction must lie in [0, 1), got {}",
                self.mask_fraction_local
            )));
        }
        if let LocalMode::Window { height, width } = self.local_mode {
            if height == 0 || width == 0 {
                return Err(PawsError::Domain("window grid dimensions must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewBatch {
    pub global_views: Vec<Matrix>,
    pub local_views: Vec<Matrix>,
    pub source_indices: Vec<usize>,
}

impl ViewBatch {
    pub fn num_views(&self) -> usize {
        self.global_views.len() + self.local_views.len()
    }

    /// Globals first, then locals.
    pub fn all_views(&self) -> impl Iterator<Item = &Matrix> {
        self.global_views.iter().chain(&self.local_views)
    }
}

/// Scale jitter plus Gaussian noise, applied row by row.
pub fn augment_global<R: Rng + ?Sized>(x: &Matrix, cfg: &AugmentConfig, rng: &mut R) -> Matrix {
    let mut out = x.clone();
    let (lo, hi) = cfg.scale_jitter;
    for r in 0..out.rows() {
        let s = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        for v in out.row_mut(r) {
            *v *= s;
            if cfg.noise_sigma > 0.0 {
                let eps: f64 = rng.sample(StandardNormal);
                *v += cfg.noise_sigma * eps;
            }
        }
    }
    out
}

fn mask_row<R: Rng + ?Sized>(row: &mut [f64], cfg: &AugmentConfig, rng: &mut R) {
    match cfg.local_mode {
        LocalMode::Mask => {
            let k = (cfg.mask_fraction_local * row.len() as f64).round() as usize;
            if k == 0 {
                return;
            }
            for i in sample(rng, row.len(), k.min(row.len())) {
                row[i] = 0.0;
            }
        }
        LocalMode::Window { height, width } => {
            let keep = (1.0 - cfg.mask_fraction_local).sqrt();
            let wh = ((height as f64 * keep).round() as usize).clamp(1, height);
            let ww = ((width as f64 * keep).round() as usize).clamp(1, width);
            let top = rng.gen_range(0..=height - wh);
            let left = rng.gen_range(0..=width - ww);
            let channels = row.len() / (height * width);
            for c in 0..channels {
                for y in 0..height {
                    for x in 0..width {
                        if y < top || y >= top + wh || x < left || x >= left + ww {
                            row[c * height * width + y * width + x] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Local view: a global-style perturbation followed by information removal.
pub fn augment_local<R: Rng + ?Sized>(x: &Matrix, cfg: &AugmentConfig, rng: &mut R) -> Matrix {
    let mut out = augment_global(x, cfg, rng);
    for r in 0..out.rows() {
        mask_row(out.row_mut(r), cfg, rng);
    }
    out
}

pub fn generate_views<R: Rng + ?Sized>(
    x: &Matrix,
    cfg: &AugmentConfig,
    globals: usize,
    locals: usize,
    rng: &mut R,
) -> Result<ViewBatch> {
    cfg.validate()?;
    if globals < 2 {
        return Err(PawsError::Domain(format!("need at least 2 global views, got {globals}")));
    }
    if let LocalMode::Window { height, width } = cfg.local_mode {
        if !x.cols().is_multiple_of(height * width) {
            return Err(PawsError::Shape(format!("{} input columns do not tile a {height}x{width} grid", x.cols())));
        }
    }
    let global_views = (0..globals).map(|_| augment_global(x, cfg, rng)).collect();
    let local_views = (0..locals).map(|_| augment_local(x, cfg, rng)).collect();
    Ok(ViewBatch { global_views, local_views, source_indices: (0..x.rows()).collect() })
}

/// For each view (globals first, then locals), the views whose predictions form its target.
pub fn pair_structure(batch: &ViewBatch) -> Result<Vec<Vec<usize>>> {
    if batch.global_views.len() != 2 {
        return Err(PawsError::Config(format!(
            "multi-crop pairing is defined for exactly 2 global views, got {}",
            batch.global_views.len()
        )));
    }
    let mut map = vec![vec![1], vec![0]];
    map.extend((0..batch.local_views.len()).map(|_| vec![0, 1]));
    Ok(map)
}
