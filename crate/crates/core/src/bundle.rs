//! `CIMB` model bundles: the on-disk network consumed by the runtime.
//!
//! All integers are little-endian. Layout:
//!
//! | field            | type        | notes                                   |
//! |------------------|-------------|-----------------------------------------|
//! | magic            | `[u8; 4]`   | `CIMB`                                  |
//! | version          | `u16`       | 1                                       |
//! | endianness tag   | `u16`       | `0x0102`, stored as bytes `02 01`       |
//! | n_layers         | `u32`       |                                         |
//! | flags            | `u32`       | bit 0 calibration, bit 1 beta trims     |
//! | layers           | record × n  | see below                               |
//! | calibration      | `u32` + text| `col,code,flag` lines (flag bit 0)      |
//! | beta trims       | `u32` + i8s | one per column (flag bit 1)             |
//!
//! Layer record: `kind u8` (0 conv, 1 fc), `pool u8` (0 none, 1 max 2×2,
//! 2 avg 2×2), `k u16`, `c_in u32`, `c_out u32`, `r_in r_w r_out gamma
//! stride padding u8`, `signed u8` (bit 0 input, bit 1 output), `reserved
//! u8`, quantization `6 × f32` (input/weight/output scale and zero point),
//! `beta i8 × c_out`, then a `CIMW` weight plane with `K·C_in` rows and
//! `C_out·r_w` columns, column `o·r_w + j` holding bit `j` of output `o`'s
//! offset-binary weight (LSB column first).
//!
//! Encoding is canonical: `to_bytes(from_bytes(b)) == b` for every accepted `b`.

use std::path::Path;

use crate::adc::{dump_calibration, restore_calibration, CalUnit};
use crate::dataflow::{LayerConfig, LayerKind};
use crate::dp_array::WeightPlane;
use crate::error::{Error, Result};

pub const BUNDLE_MAGIC: &[u8; 4] = b"CIMB";
pub const BUNDLE_VERSION: u16 = 1;
pub const ENDIAN_TAG: u16 = 0x0102;
const FLAG_CALIBRATION: u32 = 1;
const FLAG_TRIMS: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pool {
    #[default]
    None,
    Max2,
    Avg2,
}

/// Per-tensor affine quantization, `real = scale · (q - zero_point)`; only
/// carried for the trainer and for reporting, never used in arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct QuantMeta {
    pub in_scale: f32,
    pub in_zero: f32,
    pub w_scale: f32,
    pub w_zero: f32,
    pub out_scale: f32,
    pub out_zero: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub cfg: LayerConfig,
    pub pool: Pool,
    pub quant: QuantMeta,
    /// `weights[o][row]`, offset-binary `r_w`-bit codes.
    pub weights: Vec<Vec<u32>>,
}

impl LayerRecord {
    pub fn validate(&self, index: usize) -> Result<()> {
        let c = &self.cfg;
        if c.r_w > 4 || c.r_in > 8 || c.r_out > 8 {
            return Err(Error::Load(format!(
                "layer {index}: unsupported precision r_in/r_w/r_out = {}/{}/{} (max 8/4/8)",
                c.r_in, c.r_w, c.r_out
            )));
        }
        c.validate().map_err(|e| Error::Load(format!("layer {index}: {e}")))?;
        if self.weights.len() != c.c_out || self.weights.iter().any(|w| w.len() != c.rows()) {
            return Err(Error::Load(format!(
                "layer {index}: weight tensor must be {} outputs x {} rows",
                c.c_out,
                c.rows()
            )));
        }
        if let Some(v) = self.weights.iter().flatten().find(|v| **v >> c.r_w != 0) {
            return Err(Error::Load(format!("layer {index}: weight {v} exceeds {} bits", c.r_w)));
        }
        Ok(())
    }

    /// Weight bits stored for this layer, `K·C_in × C_out × r_w`.
    pub fn weight_bits(&self) -> usize {
        self.cfg.rows() * self.cfg.c_out * self.cfg.r_w as usize
    }

    fn plane(&self) -> WeightPlane {
        let r_w = self.cfg.r_w as usize;
        let mut p = WeightPlane::zeros(self.cfg.rows(), self.cfg.c_out * r_w);
        for (o, rows) in self.weights.iter().enumerate() {
            for (r, v) in rows.iter().enumerate() {
                for j in 0..r_w {
                    if (v >> j) & 1 == 1 {
                        p.set(r, o * r_w + j, true);
                    }
                }
            }
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelBundle {
    pub layers: Vec<LayerRecord>,
    pub calibration: Option<Vec<CalUnit>>,
    pub beta_trims: Option<Vec<i8>>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    context: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or_else(|| {
            Error::Load(format!(
                "truncated bundle in {}: need {n} bytes at offset {}, {} left",
                self.context,
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl ModelBundle {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Load("bundle has no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.validate(i)?;
        }
        if let Some(t) = &self.beta_trims {
            if t.iter().any(|b| !(-15..=15).contains(b)) {
                return Err(Error::Load("beta trims must lie in [-15, 15]".into()));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BUNDLE_MAGIC);
        out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
        out.extend_from_slice(&ENDIAN_TAG.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        let flags = if self.calibration.is_some() { FLAG_CALIBRATION } else { 0 }
            | if self.beta_trims.is_some() { FLAG_TRIMS } else { 0 };
        out.extend_from_slice(&flags.to_le_bytes());
        for l in &self.layers {
            let c = &l.cfg;
            out.push(match c.kind {
                LayerKind::Conv => 0,
                LayerKind::Fc => 1,
            });
            out.push(match l.pool {
                Pool::None => 0,
                Pool::Max2 => 1,
                Pool::Avg2 => 2,
            });
            out.extend_from_slice(&(c.k as u16).to_le_bytes());
            out.extend_from_slice(&(c.c_in as u32).to_le_bytes());
            out.extend_from_slice(&(c.c_out as u32).to_le_bytes());
            for b in [c.r_in, c.r_w, c.r_out, c.gamma, c.stride as u32, c.padding as u32] {
                out.push(b as u8);
            }
            out.push(u8::from(c.signed_input) | u8::from(c.signed_output) << 1);
            out.push(0);
            let q = &l.quant;
            for v in [q.in_scale, q.in_zero, q.w_scale, q.w_zero, q.out_scale, q.out_zero] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for o in 0..c.c_out {
                out.push(c.beta.get(o).copied().unwrap_or(0) as u8);
            }
            out.extend_from_slice(&l.plane().to_bytes());
        }
        if let Some(cal) = &self.calibration {
            let text = dump_calibration(cal);
            out.extend_from_slice(&(text.len() as u32).to_le_bytes());
            out.extend_from_slice(text.as_bytes());
        }
        if let Some(t) = &self.beta_trims {
            out.extend_from_slice(&(t.len() as u32).to_le_bytes());
            out.extend(t.iter().map(|b| *b as u8));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, context: "header".into() };
        if r.take(4)? != BUNDLE_MAGIC {
            return Err(Error::Load("bundle magic mismatch (expected CIMB)".into()));
        }
        let version = r.u16()?;
        if version != BUNDLE_VERSION {
            return Err(Error::Load(format!("unsupported bundle version {version}")));
        }
        let tag = r.u16()?;
        if tag != ENDIAN_TAG {
            return Err(Error::Load(format!("endianness tag {tag:#06x} (expected {ENDIAN_TAG:#06x})")));
        }
        let n_layers = r.u32()? as usize;
        let flags = r.u32()?;
        if flags & !(FLAG_CALIBRATION | FLAG_TRIMS) != 0 {
            return Err(Error::Load(format!("unknown bundle flags {flags:#x}")));
        }
        let mut layers = Vec::with_capacity(n_layers.min(1024));
        for i in 0..n_layers {
            r.context = format!("layer {i}");
            let kind = match r.u8()? {
                0 => LayerKind::Conv,
                1 => LayerKind::Fc,
                k => return Err(Error::Load(format!("layer {i}: unknown kind {k}"))),
            };
            let pool = match r.u8()? {
                0 => Pool::None,
                1 => Pool::Max2,
                2 => Pool::Avg2,
                p => return Err(Error::Load(format!("layer {i}: unknown pool {p}"))),
            };
            let k = r.u16()? as usize;
            let c_in = r.u32()? as usize;
            let c_out = r.u32()? as usize;
            let p = r.take(6)?;
            let signed = r.u8()?;
            if r.u8()? != 0 || signed > 3 {
                return Err(Error::Load(format!("layer {i}: reserved bits must be zero")));
            }
            let quant = QuantMeta {
                in_scale: r.f32()?,
                in_zero: r.f32()?,
                w_scale: r.f32()?,
                w_zero: r.f32()?,
                out_scale: r.f32()?,
                out_zero: r.f32()?,
            };
            let beta: Vec<i8> = r.take(c_out)?.iter().map(|b| *b as i8).collect();
            let cfg = LayerConfig {
                kind,
                k,
                c_in,
                c_out,
                r_in: p[0] as u32,
                r_w: p[1] as u32,
                r_out: p[2] as u32,
                gamma: p[3] as u32,
                // zero beta vectors are stored explicitly but kept canonical as empty
                beta: if beta.iter().all(|b| *b == 0) { vec![] } else { beta },
                stride: p[4] as usize,
                padding: p[5] as usize,
                signed_input: signed & 1 != 0,
                signed_output: signed & 2 != 0,
            };
            let (plane, used) = WeightPlane::from_bytes(&bytes[r.pos..])
                .map_err(|e| Error::Load(format!("layer {i}: {e}")))?;
            r.pos += used;
            let r_w = cfg.r_w as usize;
            if plane.n_rows() != cfg.rows() || plane.n_cols() != c_out * r_w {
                return Err(Error::Load(format!(
                    "layer {i}: weight plane is {}x{}, expected {}x{}",
                    plane.n_rows(),
                    plane.n_cols(),
                    cfg.rows(),
                    c_out * r_w
                )));
            }
            let weights = (0..c_out)
                .map(|o| {
                    (0..cfg.rows())
                        .map(|row| (0..r_w).map(|j| u32::from(plane.get(row, o * r_w + j)) << j).sum())
                        .collect()
                })
                .collect();
            let rec = LayerRecord { cfg, pool, quant, weights };
            rec.validate(i)?;
            layers.push(rec);
        }
        let calibration = if flags & FLAG_CALIBRATION != 0 {
            r.context = "calibration".into();
            let n = r.u32()? as usize;
            let text = std::str::from_utf8(r.take(n)?).map_err(|_| Error::Load("calibration text is not UTF-8".into()))?;
            let n_cols = text.lines().filter(|l| !l.trim().is_empty()).count();
            let cal = restore_calibration(text, n_cols)?;
            if dump_calibration(&cal) != text {
                return Err(Error::Load("calibration text is not in canonical form".into()));
            }
            Some(cal)
        } else {
            None
        };
        let beta_trims = if flags & FLAG_TRIMS != 0 {
            r.context = "beta trims".into();
            let n = r.u32()? as usize;
            Some(r.take(n)?.iter().map(|b| *b as i8).collect())
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(Error::Load(format!("{} trailing bytes after bundle", bytes.len() - r.pos)));
        }
        let b = ModelBundle { layers, calibration, beta_trims };
        b.validate()?;
        if b.to_bytes() != bytes {
            return Err(Error::Load("bundle is not canonically encoded".into()));
        }
        Ok(b)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        Ok(std::fs::write(path, self.to_bytes())?)
    }
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    let bytes = std::fs::read(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    ModelBundle::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelBundle {
        let mut conv = LayerConfig::conv(4, 3, 4, 2, 4);
        conv.beta = vec![1, -2, 0];
        let fc = LayerConfig::fc(12, 2, 4, 1, 8);
        ModelBundle {
            layers: vec![
                LayerRecord {
                    cfg: conv,
                    pool: Pool::Max2,
                    quant: QuantMeta { in_scale: 0.5, ..Default::default() },
                    weights: (0..3).map(|o| (0..36).map(|r| ((r + o) % 4) as u32).collect()).collect(),
                },
                LayerRecord {
                    cfg: fc,
                    pool: Pool::None,
                    quant: QuantMeta::default(),
                    weights: vec![vec![1; 12], vec![0; 12]],
                },
            ],
            calibration: Some(vec![CalUnit { code: 70, out_of_range: false }, CalUnit { code: 127, out_of_range: true }]),
            beta_trims: Some(vec![0, -3]),
        }
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let b = tiny();
        let bytes = b.to_bytes();
        let back = ModelBundle::from_bytes(&bytes).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_inputs_are_rejected_with_context() {
        let bytes = tiny().to_bytes();
        let err = ModelBundle::from_bytes(&bytes[..60]).unwrap_err().to_string();
        assert!(err.contains("layer 0"), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ModelBundle::from_bytes(&bad).is_err());
        let mut wide = tiny();
        wide.layers[1].cfg.r_w = 8;
        let err = ModelBundle::from_bytes(&wide.to_bytes()).unwrap_err().to_string();
        assert!(err.contains("max 8/4/8"), "{err}");
    }
}
