//! Seeded generator of paired ROIs holding soft-edged ellipsoidal nodules.
//!
//! Each case draws a class, a T0 ellipsoid and a diameter change for that
//! class, renders both time points and measures the thresholded masks with
//! the dataprep rules. Draws whose measured diameters disagree with the class
//! are rejected and redrawn, so the stored label always equals
//! `label_evolution` of the stored diameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataprep::{label_evolution, measure_diameter, Texture, STABILITY_BAND_MM};
use crate::dataset::{LabeledCase, Split};
use crate::error::{Error, Result};
use crate::hloss::EvolutionLabel;
use crate::volume::Volume3D;

pub const BACKGROUND: f32 = 0.15;
pub const FOREGROUND: f32 = 0.85;
/// Width (mm) of the logistic edge of the rendered ellipsoid.
pub const EDGE_MM: f64 = 0.5;
pub const MAX_JITTER_VOXELS: f64 = 2.0;
pub const AXIS_RATIO: (f64, f64) = (0.8, 1.25);
const MAX_ATTEMPTS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n: usize,
    pub seed: u64,
    pub roi_size: usize,
    /// `(z, y, x)` in mm.
    pub spacing: [f64; 3],
    /// Base semi-axis range in mm.
    pub radius_mm: (f64, f64),
    /// Diameter increase range for dilatation (mm).
    pub dilatation_mm: (f64, f64),
    /// Diameter decrease magnitude range for shrinkage (mm).
    pub shrinkage_mm: (f64, f64),
    /// Largest absolute diameter change for stability (mm).
    pub stability_mm: f64,
    /// Indexed by label code: stability, dilatation, shrinkage.
    pub priors: [f64; 3],
    pub noise_std: f64,
    pub missing_t0_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            seed: 0,
            roi_size: 32,
            spacing: [1.0; 3],
            radius_mm: (3.0, 8.0),
            dilatation_mm: (2.0, 4.0),
            shrinkage_mm: (2.0, 4.0),
            stability_mm: 1.0,
            priors: [0.92, 0.06, 0.02],
            noise_std: 0.1,
            missing_t0_prob: 0.3,
        }
    }
}

impl SynthConfig {
    pub fn balanced() -> Self {
        Self {
            priors: [1.0 / 3.0; 3],
            ..Self::default()
        }
    }

    /// 80/12/8 class mix used for the end-to-end learning check.
    pub fn moderate() -> Self {
        Self {
            n: 2000,
            seed: 42,
            priors: [0.80, 0.12, 0.08],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n == 0 {
            return bad("n must be at least 1".into());
        }
        if self.roi_size == 0 {
            return bad("roi_size must be positive".into());
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad(format!("spacing must be positive, got {:?}", self.spacing));
        }
        let (r_lo, r_hi) = self.radius_mm;
        if !(r_lo > 0.0 && r_lo <= r_hi) {
            return bad(format!("radius range {:?} is invalid", self.radius_mm));
        }
        let (d_lo, d_hi) = self.dilatation_mm;
        let (s_lo, s_hi) = self.shrinkage_mm;
        if !(d_lo > STABILITY_BAND_MM && d_lo <= d_hi) || !(s_lo > STABILITY_BAND_MM && s_lo <= s_hi) {
            return bad(format!(
                "dilatation {:?} and shrinkage {:?} ranges must lie beyond ±{STABILITY_BAND_MM} mm",
                self.dilatation_mm, self.shrinkage_mm
            ));
        }
        if !(self.stability_mm >= 0.0 && self.stability_mm < STABILITY_BAND_MM) {
            return bad(format!("stability range ±{} must lie inside ±{STABILITY_BAND_MM} mm", self.stability_mm));
        }
        if 2.0 * r_lo * AXIS_RATIO.0 <= s_hi {
            return bad("largest shrinkage would make the smallest nodule vanish".into());
        }
        // Largest in-plane semi-axis after the largest growth, plus jitter.
        let reach = r_hi * AXIS_RATIO.1 + d_hi.max(self.stability_mm) / 2.0;
        let min_spacing = self.spacing.iter().copied().fold(f64::INFINITY, f64::min);
        let half_roi = self.roi_size as f64 * min_spacing / 2.0;
        let max_spacing = self.spacing.iter().copied().fold(0.0, f64::max);
        if reach + (MAX_JITTER_VOXELS + 1.0) * max_spacing > half_roi {
            return bad(format!(
                "nodules up to {reach:.2} mm semi-axis do not fit a {} voxel ROI",
                self.roi_size
            ));
        }
        if self.priors.iter().any(|&p| !(p >= 0.0)) || (self.priors.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("priors {:?} must be non-negative and sum to 1", self.priors));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.missing_t0_prob) {
            return bad("missing_t0_prob must lie in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCase {
    pub id: String,
    pub index: usize,
    pub split: Split,
    pub label: EvolutionLabel,
    pub texture: Texture,
    pub roi_t0: Option<Volume3D>,
    pub roi_t1: Volume3D,
    pub mask_t0: Option<Volume3D>,
    pub mask_t1: Volume3D,
    /// Measured diameters of the T0 mask (also when the T0 scan is dropped)
    /// and of the T1 mask.
    pub d_t0_mm: f64,
    pub d_t1_mm: f64,
}

impl SynthCase {
    pub fn into_labeled(self) -> LabeledCase {
        let present = self.roi_t0.is_some();
        LabeledCase {
            id: self.id,
            split: self.split,
            label: self.label,
            texture: self.texture,
            roi_t0: self.roi_t0,
            roi_t1: self.roi_t1,
            d_t0_mm: present.then_some(self.d_t0_mm),
            d_t1_mm: self.d_t1_mm,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// 70/15/15 train/val/test by a hash of the case index.
pub fn split_for_index(index: usize) -> Split {
    let u = (splitmix64(index as u64) >> 11) as f64 / (1u64 << 53) as f64;
    if u < 0.70 {
        Split::Train
    } else if u < 0.85 {
        Split::Val
    } else {
        Split::Test
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    /// `(z, y, x)` in mm.
    center: [f64; 3],
    /// `(z, y, x)` semi-axes in mm before the in-plane rotation.
    axes: [f64; 3],
    angle: f64,
}

impl Ellipsoid {
    fn scaled(self, s: f64) -> Self {
        Self {
            axes: self.axes.map(|a| a * s),
            ..self
        }
    }

    /// In-plane diameter along the longer axis.
    fn nominal_diameter(&self) -> f64 {
        2.0 * self.axes[1].max(self.axes[2])
    }

    /// Returns `(roi, mask)`.
    fn render(&self, size: usize, spacing: [f64; 3]) -> (Volume3D, Volume3D) {
        let n = size * size * size;
        let mut roi = Vec::with_capacity(n);
        let mut mask = Vec::with_capacity(n);
        let (sin, cos) = self.angle.sin_cos();
        let r_eff = (self.axes[0] * self.axes[1] * self.axes[2]).cbrt();
        for z in 0..size {
            let dz = (z as f64 + 0.5) * spacing[0] - self.center[0];
            for y in 0..size {
                let dy = (y as f64 + 0.5) * spacing[1] - self.center[1];
                for x in 0..size {
                    let dx = (x as f64 + 0.5) * spacing[2] - self.center[2];
                    let u = cos * dx + sin * dy;
                    let w = -sin * dx + cos * dy;
                    let rho = ((dz / self.axes[0]).powi(2) + (w / self.axes[1]).powi(2) + (u / self.axes[2]).powi(2)).sqrt();
                    let t = 1.0 / (1.0 + (-(1.0 - rho) * r_eff / EDGE_MM).exp());
                    roi.push(BACKGROUND + (FOREGROUND - BACKGROUND) * t as f32);
                    mask.push(if rho <= 1.0 { 1.0 } else { 0.0 });
                }
            }
        }
        (
            Volume3D::new([size; 3], spacing, roi).expect("sized buffer"),
            Volume3D::new([size; 3], spacing, mask).expect("sized buffer"),
        )
    }
}

fn draw_label<R: Rng>(rng: &mut R, priors: &[f64; 3]) -> EvolutionLabel {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (code, &p) in priors.iter().enumerate() {
        acc += p;
        if u < acc {
            return EvolutionLabel::ALL[code];
        }
    }
    // rounding at the top end
    let last = priors.iter().rposition(|&p| p > 0.0).unwrap_or(0);
    EvolutionLabel::ALL[last]
}

fn draw_delta<R: Rng>(rng: &mut R, label: EvolutionLabel, cfg: &SynthConfig) -> f64 {
    match label {
        EvolutionLabel::Dilatation => rng.random_range(cfg.dilatation_mm.0..=cfg.dilatation_mm.1),
        EvolutionLabel::Shrinkage => -rng.random_range(cfg.shrinkage_mm.0..=cfg.shrinkage_mm.1),
        EvolutionLabel::Stability => rng.random_range(-cfg.stability_mm..=cfg.stability_mm),
    }
}

fn add_noise<R: Rng>(v: &mut Volume3D, noise: &Normal<f64>, rng: &mut R) {
    for x in v.voxels_mut() {
        *x = (*x as f64 + noise.sample(rng)).clamp(0.0, 1.0) as f32;
    }
}

/// Case `index` of the stream seeded by `cfg.seed`. Each index owns an
/// independent ChaCha stream, so cases can be generated in any order.
pub fn generate_case(cfg: &SynthConfig, index: usize) -> Result<SynthCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);

    let label = draw_label(&mut rng, &cfg.priors);
    let texture = Texture::ALL[rng.random_range(0..Texture::ALL.len())];
    let missing_t0 = rng.random_bool(cfg.missing_t0_prob);

    let size = cfg.roi_size;
    let mid = cfg.spacing.map(|s| size as f64 * s / 2.0);
    let mut found = None;
    for _ in 0..MAX_ATTEMPTS {
        let r = rng.random_range(cfg.radius_mm.0..=cfg.radius_mm.1);
        let axes = [0, 1, 2].map(|_| r * rng.random_range(AXIS_RATIO.0..=AXIS_RATIO.1));
        let center = [0, 1, 2].map(|i| mid[i] + rng.random_range(-MAX_JITTER_VOXELS..=MAX_JITTER_VOXELS) * cfg.spacing[i]);
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let e0 = Ellipsoid { center, axes, angle };
        let d0 = e0.nominal_diameter();
        let delta = draw_delta(&mut rng, label, cfg);
        let e1 = e0.scaled((d0 + delta) / d0);

        let (roi0, mask0) = e0.render(size, cfg.spacing);
        let (roi1, mask1) = e1.render(size, cfg.spacing);
        let (Ok(m0), Ok(m1)) = (measure_diameter(&mask0), measure_diameter(&mask1)) else {
            continue;
        };
        if label_evolution(m0.value_mm, m1.value_mm)? == label {
            found = Some((roi0, mask0, roi1, mask1, m0.value_mm, m1.value_mm));
            break;
        }
    }
    let Some((mut roi0, mask0, mut roi1, mask1, d0, d1)) = found else {
        return Err(Error::Data(format!(
            "case {index}: no {label} geometry consistent with the measured diameters after {MAX_ATTEMPTS} draws"
        )));
    };

    if cfg.noise_std > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
        add_noise(&mut roi0, &noise, &mut rng);
        add_noise(&mut roi1, &noise, &mut rng);
    }

    Ok(SynthCase {
        id: format!("case{index:05}"),
        index,
        split: split_for_index(index),
        label,
        texture,
        roi_t0: (!missing_t0).then_some(roi0),
        roi_t1: roi1,
        mask_t0: (!missing_t0).then_some(mask0),
        mask_t1: mask1,
        d_t0_mm: d0,
        d_t1_mm: d1,
    })
}

/// `cfg.n` cases, generated in parallel and returned in index order.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Vec<LabeledCase>> {
    cfg.validate()?;
    (0..cfg.n)
        .into_par_iter()
        .map(|i| generate_case(cfg, i).map(SynthCase::into_labeled))
        .collect()
}
