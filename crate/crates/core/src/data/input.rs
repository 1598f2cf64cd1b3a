//! Band scaling and assembly of the `C×T×H×W` input stack.
//!
//! Channel order (C = 18):
//!
//! | index | channel | cadence | source range |
//! |---|---|---|---|
//! | 0 | Sentinel-2 B01 | monthly | [0, 1000] |
//! | 1–4 | B02, B03, B04, B05 | monthly | [0, 2000] |
//! | 5 | B06 | monthly | [0, 4000] |
//! | 6–9 | B07, B08, B8A, B09 | monthly | [0, 6000] |
//! | 10–11 | B11, B12 | monthly | [0, 4000] |
//! | 12–13 | Sentinel-1 VH ascending / descending | quarterly | [−50, 1] dB |
//! | 14–15 | PALSAR-2 HH / HV | yearly | [−50, 1] dB |
//! | 16 | elevation | static | [0, 7000] m |
//! | 17 | forest / non-forest class | static | [0, 2] |

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const MONTHS_PER_YEAR: usize = 12;
pub const N_OPTICAL: usize = 12;
pub const N_CHANNELS: usize = 18;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelRange {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

/// Per-channel source ranges mapped linearly onto [−1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationSpec {
    pub channels: Vec<ChannelRange>,
}

impl NormalizationSpec {
    /// The 18 channels in stacking order with their standard source ranges.
    pub fn standard() -> Self {
        let optical = [
            ("s2_b01", 1000.0),
            ("s2_b02", 2000.0),
            ("s2_b03", 2000.0),
            ("s2_b04", 2000.0),
            ("s2_b05", 2000.0),
            ("s2_b06", 4000.0),
            ("s2_b07", 6000.0),
            ("s2_b08", 6000.0),
            ("s2_b8a", 6000.0),
            ("s2_b09", 6000.0),
            ("s2_b11", 4000.0),
            ("s2_b12", 4000.0),
        ];
        let mut channels: Vec<ChannelRange> = optical
            .iter()
            .map(|(n, hi)| ChannelRange {
                name: n.to_string(),
                lo: 0.0,
                hi: *hi,
            })
            .collect();
        for n in ["s1_vh_asc", "s1_vh_desc", "palsar_hh", "palsar_hv"] {
            channels.push(ChannelRange {
                name: n.into(),
                lo: -50.0,
                hi: 1.0,
            });
        }
        channels.push(ChannelRange {
            name: "dem".into(),
            lo: 0.0,
            hi: 7000.0,
        });
        channels.push(ChannelRange {
            name: "forest_class".into(),
            lo: 0.0,
            hi: 2.0,
        });
        NormalizationSpec { channels }
    }

    pub fn validate(&self) -> Result<()> {
        for c in &self.channels {
            if !(c.lo.is_finite() && c.hi.is_finite() && c.lo < c.hi) {
                return Err(Error::Config(format!(
                    "channel `{}` has invalid range [{}, {}]",
                    c.name, c.lo, c.hi
                )));
            }
        }
        Ok(())
    }

    pub fn range(&self, name: &str) -> Result<&ChannelRange> {
        self.channels
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown channel `{name}`")))
    }

    pub fn names(&self) -> Vec<String> {
        self.channels.iter().map(|c| c.name.clone()).collect()
    }
}

/// `x ↦ clamp(2·(x−lo)/(hi−lo) − 1, −1, 1)`.
pub fn normalize_value(x: f64, lo: f64, hi: f64) -> f64 {
    (2.0 * (x - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0)
}

/// Inverse of [`normalize_value`] on [−1, 1].
pub fn denormalize_value(v: f64, lo: f64, hi: f64) -> f64 {
    lo + (v + 1.0) * 0.5 * (hi - lo)
}

pub fn normalize_channel(values: &[f64], spec: &NormalizationSpec, channel: &str) -> Result<Vec<f64>> {
    let r = spec.range(channel)?;
    Ok(values.iter().map(|&x| normalize_value(x, r.lo, r.hi)).collect())
}

/// Co-registered, already normalized sources of one patch.
#[derive(Debug, Clone)]
pub struct Sources {
    /// `[12, 12·Y, H, W]` monthly optical bands.
    pub optical: Tensor<f32>,
    /// `[2, 4·Y, H, W]` quarterly radar composites (ascending, descending).
    pub quarterly_radar: Tensor<f32>,
    /// `[2, Y, H, W]` yearly radar composites (HH, HV).
    pub yearly_radar: Tensor<f32>,
    /// `[H, W]` elevation.
    pub dem: Tensor<f32>,
    /// `[H, W]` forest class.
    pub forest_class: Tensor<f32>,
}

/// Stacks the sources into `18 × 12Y × H × W`, repeating quarterly composites
/// over their three months, yearly composites over twelve and static layers
/// over every timestep.
pub fn assemble_input(src: &Sources, years: usize) -> Result<Tensor<f32>> {
    let t = MONTHS_PER_YEAR * years;
    let opt = &src.optical.shape;
    if opt.len() != 4 || opt[0] != N_OPTICAL || opt[1] != t {
        return Err(Error::shape(
            "assemble_input",
            format!("optical {:?}, expected [12, {t}, H, W] (one composite per month)", opt),
        ));
    }
    let (h, w) = (opt[2], opt[3]);
    let expect = [
        ("quarterly radar", &src.quarterly_radar.shape, vec![2, 4 * years, h, w]),
        ("yearly radar", &src.yearly_radar.shape, vec![2, years, h, w]),
        ("elevation", &src.dem.shape, vec![h, w]),
        ("forest class", &src.forest_class.shape, vec![h, w]),
    ];
    for (name, got, want) in expect {
        if *got != want {
            return Err(Error::shape(
                "assemble_input",
                format!("{name} {:?}, expected {:?}", got, want),
            ));
        }
    }
    let px = h * w;
    let mut data = Vec::with_capacity(N_CHANNELS * t * px);
    data.extend_from_slice(&src.optical.data);
    for c in 0..2 {
        for m in 0..t {
            let q = m / 3;
            let off = (c * 4 * years + q) * px;
            data.extend_from_slice(&src.quarterly_radar.data[off..off + px]);
        }
    }
    for c in 0..2 {
        for m in 0..t {
            let off = (c * years + m / MONTHS_PER_YEAR) * px;
            data.extend_from_slice(&src.yearly_radar.data[off..off + px]);
        }
    }
    for layer in [&src.dem, &src.forest_class] {
        for _ in 0..t {
            data.extend_from_slice(&layer.data);
        }
    }
    Tensor::new(&[N_CHANNELS, t, h, w], data)
}
