use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of the temporal U-net.
///
/// Level `l` (0 = full resolution) runs at `H/2^l × W/2^l` with embedding width
/// `E·2^l` and `heads[l]` attention heads. `depths_dec` is listed in execution
/// order, i.e. `depths_dec[0]` is the lowest-resolution decoder layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub timesteps: usize,
    pub height: usize,
    pub width: usize,
    pub years: usize,
    pub embed_dim: usize,
    pub depths_enc: [usize; 4],
    pub depths_dec: [usize; 4],
    pub heads: [usize; 4],
    pub window_t: usize,
    pub window_s: usize,
    /// Timesteps after each of the three temporal downsamplings.
    pub reduce_time: [usize; 3],
    #[serde(default = "default_ffn_ratio")]
    pub ffn_ratio: usize,
    #[serde(default = "default_norm_groups")]
    pub norm_groups: usize,
    /// Fixed multiplier applied to both head outputs, so unit-scale embeddings map to meters.
    #[serde(default = "default_height_scale")]
    pub height_scale: f64,
}

fn default_ffn_ratio() -> usize {
    4
}

fn default_norm_groups() -> usize {
    8
}

fn default_height_scale() -> f64 {
    1.0
}

impl ModelConfig {
    /// The full-scale configuration: 18×84×96×96 inputs, seven years, E=72.
    pub fn full_scale() -> Self {
        ModelConfig {
            channels: 18,
            timesteps: 84,
            height: 96,
            width: 96,
            years: 7,
            embed_dim: 72,
            depths_enc: [6, 4, 4, 6],
            depths_dec: [4, 6, 8, 16],
            heads: [4, 8, 12, 24],
            window_t: 2,
            window_s: 6,
            reduce_time: [28, 14, 7],
            ffn_ratio: 4,
            norm_groups: 8,
            height_scale: 1.0,
        }
    }

    /// Three years of monthly composites on 48×48 patches; trains on one CPU core.
    pub fn desk() -> Self {
        ModelConfig {
            channels: 18,
            timesteps: 36,
            height: 48,
            width: 48,
            years: 3,
            embed_dim: 8,
            depths_enc: [1, 1, 1, 1],
            depths_dec: [1, 1, 1, 1],
            heads: [1, 2, 4, 8],
            window_t: 2,
            window_s: 6,
            reduce_time: [12, 6, 3],
            ffn_ratio: 4,
            norm_groups: 4,
            height_scale: 10.0,
        }
    }

    /// Smallest sensible model; used for finite-difference checks.
    pub fn tiny() -> Self {
        ModelConfig {
            channels: 4,
            timesteps: 8,
            height: 8,
            width: 8,
            years: 2,
            embed_dim: 8,
            depths_enc: [1, 1, 1, 1],
            depths_dec: [1, 1, 1, 1],
            heads: [1, 1, 1, 1],
            window_t: 2,
            window_s: 3,
            reduce_time: [6, 4, 2],
            ffn_ratio: 4,
            norm_groups: 2,
            height_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let positive = [
            ("channels", self.channels),
            ("timesteps", self.timesteps),
            ("years", self.years),
            ("embed_dim", self.embed_dim),
            ("window_t", self.window_t),
            ("window_s", self.window_s),
            ("ffn_ratio", self.ffn_ratio),
            ("norm_groups", self.norm_groups),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.height == 0 || self.height % 8 != 0 || self.width == 0 || self.width % 8 != 0 {
            return bad(format!(
                "height and width must be positive multiples of 8, got {}×{}",
                self.height, self.width
            ));
        }
        if self.timesteps % self.years != 0 {
            return bad(format!(
                "timesteps {} not divisible by years {}",
                self.timesteps, self.years
            ));
        }
        let rt = self.reduce_time;
        if rt[2] != self.years {
            return bad(format!("reduce_time must end at years = {}, got {:?}", self.years, rt));
        }
        if !(rt[0] <= self.timesteps && rt[0] > rt[1] && rt[1] > rt[2]) {
            return bad(format!(
                "reduce_time {:?} must be strictly decreasing and not exceed timesteps {}",
                rt, self.timesteps
            ));
        }
        if let Some(t) = rt.iter().find(|t| *t % self.years != 0) {
            return bad(format!("reduce_time entry {t} not divisible by years {}", self.years));
        }
        for (l, &h) in self.heads.iter().enumerate() {
            if h == 0 || self.embed_dim % h != 0 {
                return bad(format!("embed_dim {} not divisible by heads[{l}] = {h}", self.embed_dim));
            }
        }
        if self.embed_dim % self.norm_groups != 0 {
            return bad(format!(
                "norm_groups {} does not divide embed_dim {}",
                self.norm_groups, self.embed_dim
            ));
        }
        if self.embed_dim % 2 != 0 {
            return bad("embed_dim must be even for patch expansion".into());
        }
        if !(self.height_scale.is_finite() && self.height_scale > 0.0) {
            return bad(format!("height_scale must be positive, got {}", self.height_scale));
        }
        Ok(())
    }

    /// Embedding width at level `l`.
    pub fn dim(&self, level: usize) -> usize {
        self.embed_dim << level
    }

    /// Encoder timesteps at level `l`.
    pub fn enc_time(&self, level: usize) -> usize {
        if level == 0 {
            self.timesteps
        } else {
            self.reduce_time[level - 1]
        }
    }

    /// Spatial extent `(H, W)` at level `l`.
    pub fn extent(&self, level: usize) -> (usize, usize) {
        (self.height >> level, self.width >> level)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for cfg in [ModelConfig::full_scale(), ModelConfig::desk(), ModelConfig::tiny()] {
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn rejects_broken_configs() {
        let base = ModelConfig::desk();
        let mut c = base.clone();
        c.timesteps = 35;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.reduce_time = [12, 12, 3];
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.reduce_time = [12, 6, 2];
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.height = 44;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.heads = [3, 2, 4, 8];
        assert!(c.validate().is_err());
        let mut c = base;
        c.norm_groups = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_round_trip_and_unknown_fields() {
        let cfg = ModelConfig::desk();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ModelConfig::from_json(&text).unwrap(), cfg);
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["dropout"] = serde_json::json!(0.1);
        assert!(ModelConfig::from_json(&v.to_string()).is_err());
    }
}
