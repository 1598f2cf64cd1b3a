//! Synthetic patches with known height trajectories.
//!
//! Every pixel follows a linear growth trajectory; pixels inside disturbed
//! blocks lose most of their height after a chosen year (by construction
//! meeting the disturbance predicate of [`crate::growth`]) and regrow.
//! Input channels are fixed smooth monotone responses to the current height
//! plus a seasonal term and Gaussian noise, so height is recoverable from the
//! input and overfitting experiments are meaningful.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gedi::LabelGrid;
use super::input::{assemble_input, normalize_value, Sources, MONTHS_PER_YEAR, N_OPTICAL};
use crate::error::{Error, Result};
use crate::grid::Cube;
use crate::growth::GrowthConfig;
use crate::nn::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticWorldConfig {
    pub rows: usize,
    pub cols: usize,
    pub years: usize,
    /// Range of first-year heights (m).
    pub base_height: [f64; 2],
    /// Range of growth slopes (m/yr), inside [0, 3].
    pub growth_slope: [f64; 2],
    /// Tall stands grow slowly and short ones fast when set.
    pub slope_height_coupling: bool,
    /// Probability that a square block of pixels is disturbed.
    pub disturbance_probability: f64,
    /// Side of a disturbance block in pixels.
    pub disturbance_block: usize,
    /// The post-disturbance height is this fraction (drawn uniformly from the
    /// range) of the largest height still satisfying the disturbance predicate.
    pub residual_fraction: [f64; 2],
    /// Disturbed pixels are at least this tall in the year before the drop.
    pub min_pre_height: f64,
    /// Standard deviation of the additive noise, in normalized units.
    pub noise_std: f64,
    /// Fraction of (pixel, year) sites left unlabeled.
    pub label_sparsity: f64,
    pub pixel_size: f64,
    pub seed: u64,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        SyntheticWorldConfig {
            rows: 48,
            cols: 48,
            years: 3,
            base_height: [3.0, 30.0],
            growth_slope: [0.2, 2.0],
            slope_height_coupling: true,
            disturbance_probability: 0.25,
            disturbance_block: 8,
            residual_fraction: [0.0, 0.8],
            min_pre_height: 12.0,
            noise_std: 0.02,
            label_sparsity: 0.9,
            pixel_size: 10.0,
            seed: 0,
        }
    }
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.rows == 0 || self.cols == 0 {
            return fail("grid must be non-empty".into());
        }
        if self.years < 2 {
            return fail(format!("years must be at least 2, got {}", self.years));
        }
        let [h0, h1] = self.base_height;
        if !(0.0 <= h0 && h0 <= h1 && h1.is_finite()) {
            return fail(format!("invalid base_height range {:?}", self.base_height));
        }
        let [s0, s1] = self.growth_slope;
        if !(0.0 <= s0 && s0 <= s1 && s1 <= 3.0) {
            return fail(format!("growth_slope {:?} must lie inside [0, 3]", self.growth_slope));
        }
        if !(0.0..=1.0).contains(&self.disturbance_probability) {
            return fail("disturbance_probability must lie in [0, 1]".into());
        }
        if self.disturbance_block == 0 {
            return fail("disturbance_block must be positive".into());
        }
        let [u0, u1] = self.residual_fraction;
        if !(0.0 <= u0 && u0 <= u1 && u1 <= 1.0) {
            return fail(format!("residual_fraction {:?} must lie inside [0, 1]", self.residual_fraction));
        }
        let g = GrowthConfig::default();
        if !(self.min_pre_height >= g.drop_absolute && self.min_pre_height.is_finite()) {
            return fail(format!("min_pre_height must be at least {} m", g.drop_absolute));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail("noise_std must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.label_sparsity) {
            return fail("label_sparsity must lie in [0, 1]".into());
        }
        if !(self.pixel_size > 0.0) {
            return fail("pixel_size must be positive".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticPatch {
    /// `18 × 12Y × H × W`, normalized.
    pub input: Tensor<f32>,
    pub labels: LabelGrid,
    pub truth: Cube,
    /// Per pixel, the 1-based year preceding the injected drop, or `Y` if none.
    pub disturbance_year: Vec<usize>,
}

/// Derives the seed of patch `index` from a run seed.
pub fn patch_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Smooth field in [0, 1] from a few random plane waves.
fn smooth_field(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    const WAVES: usize = 4;
    let waves: Vec<(f64, f64, f64)> = (0..WAVES)
        .map(|_| {
            let wavelength = rng.random_range(12.0..48.0);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let k = std::f64::consts::TAU / wavelength;
            (k * angle.cos(), k * angle.sin(), phase)
        })
        .collect();
    let mut field: Vec<f64> = (0..rows * cols)
        .map(|i| {
            let (r, c) = ((i / cols) as f64, (i % cols) as f64);
            waves.iter().map(|(kx, ky, p)| (kx * c + ky * r + p).cos()).sum::<f64>()
        })
        .collect();
    let lo = field.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    for v in &mut field {
        *v = (*v - lo) / span;
    }
    field
}

/// Largest `f32` not above `x` (x ≥ 0).
fn f32_at_most(x: f64) -> f32 {
    let mut v = x as f32;
    while v as f64 > x {
        v = f32::from_bits(v.to_bits() - 1);
    }
    v
}

/// Vegetation signal in [0, 1).
fn greenness(h: f64) -> f64 {
    (h / 15.0).tanh()
}

/// `(offset, gain, seasonal amplitude)` of each dynamic channel in normalized
/// units: 12 optical bands, 2 quarterly radar, 2 yearly radar.
const RESPONSE: [(f64, f64, f64); 16] = [
    (-0.70, -0.20, 0.05),
    (-0.55, -0.25, 0.05),
    (-0.45, -0.20, 0.08),
    (-0.40, -0.35, 0.06),
    (-0.35, -0.10, 0.08),
    (-0.50, 0.30, 0.10),
    (-0.55, 0.45, 0.12),
    (-0.60, 0.50, 0.12),
    (-0.58, 0.48, 0.12),
    (-0.75, 0.20, 0.05),
    (-0.30, -0.30, 0.06),
    (-0.40, -0.40, 0.05),
    (0.10, 0.45, 0.04),
    (0.05, 0.50, 0.04),
    (0.20, 0.35, 0.00),
    (0.00, 0.55, 0.00),
];

pub fn synth_generate(cfg: &SyntheticWorldConfig) -> Result<SyntheticPatch> {
    cfg.validate()?;
    let (rows, cols, years) = (cfg.rows, cfg.cols, cfg.years);
    let px = rows * cols;
    let growth = GrowthConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let base = smooth_field(&mut rng, rows, cols);
    let slope_field = if cfg.slope_height_coupling {
        base.iter().map(|b| 1.0 - b).collect()
    } else {
        smooth_field(&mut rng, rows, cols)
    };
    let terrain = smooth_field(&mut rng, rows, cols);
    let [h_lo, h_hi] = cfg.base_height;
    let [s_lo, s_hi] = cfg.growth_slope;

    // Block-level disturbance draws: (disturbed year, regrowth slope).
    let b = cfg.disturbance_block;
    let (brows, bcols) = (rows.div_ceil(b), cols.div_ceil(b));
    let blocks: Vec<Option<(usize, f64)>> = (0..brows * bcols)
        .map(|_| {
            let hit = rng.random::<f64>() < cfg.disturbance_probability;
            let year = rng.random_range(1..years);
            let regrowth = rng.random_range(s_lo..=s_hi);
            hit.then_some((year, regrowth))
        })
        .collect();

    let mut truth = Cube::zeros(years, rows, cols);
    let mut disturbance_year = vec![years; px];
    let [u_lo, u_hi] = cfg.residual_fraction;
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            let h0 = h_lo + (h_hi - h_lo) * base[i];
            let s = s_lo + (s_hi - s_lo) * slope_field[i];
            let u = rng.random_range(u_lo..=u_hi);
            let mut z = vec![0f32; years];
            match blocks[(r / b) * bcols + c / b] {
                None => {
                    for (y, v) in z.iter_mut().enumerate() {
                        *v = (h0 + s * y as f64) as f32;
                    }
                }
                Some((d, regrowth)) => {
                    let start = h0.max(cfg.min_pre_height);
                    for (y, v) in z.iter_mut().enumerate().take(d) {
                        *v = (start + s * y as f64) as f32;
                    }
                    let pre = z[d - 1] as f64;
                    let cap = (growth.drop_fraction * pre)
                        .min(pre - growth.drop_absolute)
                        .min(growth.low_threshold);
                    let post = f32_at_most(u * cap) as f64;
                    for (k, v) in z.iter_mut().skip(d).enumerate() {
                        *v = (post + regrowth * k as f64) as f32;
                    }
                    disturbance_year[i] = d;
                }
            }
            let series: Vec<f64> = z.iter().map(|v| *v as f64).collect();
            truth.set_series(r, c, &series);
        }
    }

    let mut labels = LabelGrid::empty(years, rows, cols);
    for y in 0..years {
        for p in 0..px {
            if rng.random::<f64>() >= cfg.label_sparsity {
                let i = y * px + p;
                labels.heights[i] = truth.data[i] as f32;
                labels.valid[i] = true;
            }
        }
    }

    let sources = render_sources(cfg, &truth, &terrain)?;
    let input = assemble_input(&sources, years)?;
    Ok(SyntheticPatch {
        input,
        labels,
        truth,
        disturbance_year,
    })
}

/// Renders the per-sensor composites. Each `(channel, timestep)` plane draws
/// its noise from its own stream so planes can be rendered in parallel.
fn render_sources(cfg: &SyntheticWorldConfig, truth: &Cube, terrain: &[f64]) -> Result<Sources> {
    let (rows, cols, years) = (cfg.rows, cfg.cols, cfg.years);
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;
    let months = MONTHS_PER_YEAR * years;
    let quarters = 4 * years;
    // (response index, timestep, steps per year)
    let mut planes = Vec::new();
    for ch in 0..N_OPTICAL {
        planes.extend((0..months).map(|t| (ch, t, MONTHS_PER_YEAR)));
    }
    for ch in 12..14 {
        planes.extend((0..quarters).map(|t| (ch, t, 4)));
    }
    for ch in 14..16 {
        planes.extend((0..years).map(|t| (ch, t, 1)));
    }
    let rendered: Vec<Vec<f32>> = planes
        .par_iter()
        .enumerate()
        .map(|(stream, &(ch, t, per_year))| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(stream as u64 + 1);
            let (offset, gain, amp) = RESPONSE[ch];
            let year = t / per_year;
            let phase = std::f64::consts::TAU * (t % per_year) as f64 / per_year as f64;
            let season = amp * (phase + 0.3 * ch as f64).sin();
            let heights = truth.year_slice(year);
            heights
                .iter()
                .map(|&h| {
                    let g = greenness(h);
                    let e = if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    (offset + gain * g + season * (0.5 + g) + e).clamp(-1.0, 1.0) as f32
                })
                .collect()
        })
        .collect();
    let mut it = rendered.into_iter();
    let mut take = |n: usize| -> Vec<f32> { it.by_ref().take(n).flatten().collect() };
    let optical = Tensor::new(&[N_OPTICAL, months, rows, cols], take(N_OPTICAL * months))?;
    let quarterly_radar = Tensor::new(&[2, quarters, rows, cols], take(2 * quarters))?;
    let yearly_radar = Tensor::new(&[2, years, rows, cols], take(2 * years))?;
    let dem = Tensor::from_fn(&[rows, cols], |i| {
        normalize_value(200.0 + 800.0 * terrain[i], 0.0, 7000.0) as f32
    });
    let first = truth.year_slice(0);
    let forest_class = Tensor::from_fn(&[rows, cols], |i| {
        let class = if first[i] >= 5.0 { 1.0 } else { 0.0 };
        normalize_value(class, 0.0, 2.0) as f32
    });
    Ok(Sources {
        optical,
        quarterly_radar,
        yearly_radar,
        dem,
        forest_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::growth::{detect_disturbance_years, HeightSeries};

    fn small() -> SyntheticWorldConfig {
        SyntheticWorldConfig {
            rows: 12,
            cols: 10,
            years: 4,
            disturbance_block: 4,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn zero_sparsity_labels_everything() {
        let cfg = SyntheticWorldConfig {
            label_sparsity: 0.0,
            ..small()
        };
        let p = synth_generate(&cfg).unwrap();
        assert_eq!(p.input.shape, vec![18, 48, 12, 10]);
        assert!(p.labels.valid.iter().all(|v| *v));
        for (l, t) in p.labels.heights.iter().zip(&p.truth.data) {
            assert_eq!(*l as f64, *t);
        }
        assert!(p.input.data.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn certain_disturbance_trips_the_predicate_at_the_injected_year() {
        let cfg = SyntheticWorldConfig {
            disturbance_probability: 1.0,
            residual_fraction: [0.0, 1.0],
            ..small()
        };
        let p = synth_generate(&cfg).unwrap();
        let g = GrowthConfig::default();
        for r in 0..cfg.rows {
            for c in 0..cfg.cols {
                let z = HeightSeries::new(p.truth.series(r, c)).unwrap();
                let d = p.disturbance_year[r * cfg.cols + c];
                assert!(d < cfg.years);
                assert_eq!(detect_disturbance_years(&z, &g), vec![d]);
            }
        }
    }

    #[test]
    fn undisturbed_pixels_never_decrease() {
        let cfg = SyntheticWorldConfig {
            disturbance_probability: 0.0,
            ..small()
        };
        let p = synth_generate(&cfg).unwrap();
        for r in 0..cfg.rows {
            for c in 0..cfg.cols {
                let z = p.truth.series(r, c);
                assert!(z.windows(2).all(|w| w[1] >= w[0]));
            }
        }
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let a = synth_generate(&small()).unwrap();
        let b = synth_generate(&small()).unwrap();
        assert_eq!(a.input.data, b.input.data);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.truth, b.truth);
        let other = synth_generate(&SyntheticWorldConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.input.data, other.input.data);
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        let bad = SyntheticWorldConfig {
            growth_slope: [0.0, 4.0],
            ..small()
        };
        assert!(synth_generate(&bad).is_err());
        assert!(SyntheticWorldConfig::from_json(r#"{"rows": 4, "colour": 1}"#).is_err());
    }
}
