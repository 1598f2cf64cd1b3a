//! Binary container for patches and grids.
//!
//! Layout: the 8-byte magic `CNPYPTCH`, a little-endian `u64` header length,
//! a UTF-8 JSON [`ContainerHeader`], then every array listed in the header as
//! raw little-endian `f32` values, in header order. Patches store the arrays
//! `input` (`C×T×H×W`), `labels` (`Y×H×W`), `mask` (`Y×H×W`, 1 = valid) and
//! `truth` (`Y×H×W`); prediction grids store a single `heights` array.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::gedi::LabelGrid;
use super::input::NormalizationSpec;
use crate::error::{Error, Result};
use crate::grid::Cube;
use crate::nn::Tensor;

pub const MAGIC: &[u8; 8] = b"CNPYPTCH";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ArrayMeta {
    fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerHeader {
    pub format_version: u32,
    pub arrays: Vec<ArrayMeta>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub channel_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<NormalizationSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Pixel pitch in meters.
    pub pixel_size: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: ContainerHeader,
    pub data: Vec<Vec<f32>>,
}

impl Container {
    pub fn array(&self, name: &str) -> Result<(&ArrayMeta, &[f32])> {
        self.header
            .arrays
            .iter()
            .zip(&self.data)
            .find(|(m, _)| m.name == name)
            .map(|(m, d)| (m, d.as_slice()))
            .ok_or_else(|| Error::Format(format!("missing array `{name}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.header)?;
        let total: usize = self.data.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 4 * total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for a in &self.data {
            for v in a {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic)
            .map_err(|_| Error::Format("truncated before magic".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let mut len = [0u8; 8];
        cur.read_exact(&mut len)
            .map_err(|_| Error::Format("truncated header length".into()))?;
        let len = u64::from_le_bytes(len) as usize;
        if len > cur.len() {
            return Err(Error::Format(format!("header length {len} exceeds file size")));
        }
        let header: ContainerHeader = serde_json::from_slice(&cur[..len])
            .map_err(|e| Error::Format(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        cur = &cur[len..];
        let expected: usize = header.arrays.iter().map(|a| 4 * a.len()).sum();
        if cur.len() != expected {
            return Err(Error::Format(format!(
                "payload holds {} bytes, header describes {expected}",
                cur.len()
            )));
        }
        let mut data = Vec::with_capacity(header.arrays.len());
        for meta in &header.arrays {
            let n = meta.len();
            let (head, rest) = cur.split_at(4 * n);
            data.push(
                head.chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect(),
            );
            cur = rest;
        }
        let c = Container { header, data };
        if c.data.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite values in payload".into()));
        }
        Ok(c)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// One training/evaluation patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFile {
    pub input: Tensor<f32>,
    pub labels: LabelGrid,
    pub truth: Cube,
    pub normalization: NormalizationSpec,
    pub seed: u64,
    pub pixel_size: f64,
}

impl PatchFile {
    pub fn to_container(&self) -> Container {
        let (y, h, w) = (self.labels.years, self.labels.rows, self.labels.cols);
        let grid = vec![y, h, w];
        let meta = |name: &str, shape: Vec<usize>| ArrayMeta {
            name: name.into(),
            shape,
        };
        Container {
            header: ContainerHeader {
                format_version: FORMAT_VERSION,
                arrays: vec![
                    meta("input", self.input.shape.clone()),
                    meta("labels", grid.clone()),
                    meta("mask", grid.clone()),
                    meta("truth", grid),
                ],
                channel_names: self.normalization.names(),
                normalization: Some(self.normalization.clone()),
                seed: Some(self.seed),
                pixel_size: self.pixel_size,
            },
            data: vec![
                self.input.data.clone(),
                self.labels.heights.clone(),
                self.labels.valid.iter().map(|v| if *v { 1.0 } else { 0.0 }).collect(),
                self.truth.data.iter().map(|v| *v as f32).collect(),
            ],
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let (im, input) = c.array("input")?;
        let (lm, labels) = c.array("labels")?;
        let (mm, mask) = c.array("mask")?;
        let (tm, truth) = c.array("truth")?;
        if im.shape.len() != 4 || lm.shape.len() != 3 || lm.shape != mm.shape || lm.shape != tm.shape {
            return Err(Error::Format(format!(
                "inconsistent patch shapes: input {:?}, labels {:?}, mask {:?}, truth {:?}",
                im.shape, lm.shape, mm.shape, tm.shape
            )));
        }
        if im.shape[2..] != lm.shape[1..] {
            return Err(Error::Format(format!(
                "input grid {:?} differs from label grid {:?}",
                &im.shape[2..],
                &lm.shape[1..]
            )));
        }
        if mask.iter().any(|m| *m != 0.0 && *m != 1.0) {
            return Err(Error::Format("mask values must be 0 or 1".into()));
        }
        let (y, h, w) = (lm.shape[0], lm.shape[1], lm.shape[2]);
        let normalization = c
            .header
            .normalization
            .clone()
            .ok_or_else(|| Error::Format("patch lacks a normalization spec".into()))?;
        Ok(PatchFile {
            input: Tensor::new(&im.shape, input.to_vec())?,
            labels: LabelGrid {
                years: y,
                rows: h,
                cols: w,
                heights: labels.to_vec(),
                valid: mask.iter().map(|m| *m == 1.0).collect(),
            },
            truth: Cube::new(y, h, w, truth.iter().map(|v| *v as f64).collect())?,
            normalization,
            seed: c.header.seed.unwrap_or(0),
            pixel_size: c.header.pixel_size,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

/// Wraps a `Y×H×W` grid (predictions, disturbance indices) as a container.
pub fn grid_container(cube: &Cube, pixel_size: f64) -> Container {
    Container {
        header: ContainerHeader {
            format_version: FORMAT_VERSION,
            arrays: vec![ArrayMeta {
                name: "heights".into(),
                shape: vec![cube.years, cube.rows, cube.cols],
            }],
            channel_names: Vec::new(),
            normalization: None,
            seed: None,
            pixel_size,
        },
        data: vec![cube.data.iter().map(|v| *v as f32).collect()],
    }
}

/// Reads the `heights` grid of a container, or the `truth` grid of a patch.
pub fn read_grid(path: impl AsRef<Path>) -> Result<(Cube, f64)> {
    let c = Container::read(path)?;
    let (meta, data) = c.array("heights").or_else(|_| c.array("truth"))?;
    if meta.shape.len() != 3 {
        return Err(Error::Format(format!("grid must be Y×H×W, got {:?}", meta.shape)));
    }
    let cube = Cube::new(
        meta.shape[0],
        meta.shape[1],
        meta.shape[2],
        data.iter().map(|v| *v as f64).collect(),
    )?;
    Ok((cube, c.header.pixel_size))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> PatchFile {
        let (y, h, w) = (2, 3, 2);
        let mut labels = LabelGrid::empty(y, h, w);
        labels.heights[3] = 12.5;
        labels.valid[3] = true;
        PatchFile {
            input: Tensor::from_fn(&[18, 24, h, w], |i| (i as f32 * 0.01).sin()),
            labels,
            truth: Cube::from_fn(y, h, w, |yy, r, c| (yy * 10 + r * 2 + c) as f64),
            normalization: NormalizationSpec::standard(),
            seed: 42,
            pixel_size: 10.0,
        }
    }

    #[test]
    fn round_trip() {
        let p = sample();
        let bytes = p.to_container().to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = PatchFile::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = sample().to_container().to_bytes().unwrap();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Container::from_bytes(&bad).is_err());
        assert!(Container::from_bytes(&bytes[..12]).is_err());
    }

    #[test]
    fn grids_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let cube = Cube::from_fn(3, 2, 2, |y, r, c| (y + r + c) as f64 * 1.5);
        let path = dir.path().join("grid.bin");
        grid_container(&cube, 10.0).write(&path).unwrap();
        assert_eq!(read_grid(&path).unwrap(), (cube, 10.0));
    }
}
