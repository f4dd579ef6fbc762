//! Binary checkpoint format.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! "PAWS"  u32 version  u32 layer_count
//! u64 × 8 encoder shape: input_dim hidden_dim trunk_layers proj_hidden
//!                        proj_layers embed_dim prediction_head pred_hidden
//! per layer, weight then bias: u64 rows  u64 cols  f64 × rows·cols (row-major)
//! u64 step
//! u8 has_optimizer
//!   f64 momentum  f64 weight_decay  u64 step_count
//!   u32 n_excluded  u32 × n_excluded
//!   per tensor: u64 rows  u64 cols  f64 × rows·cols
//! ```

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::Matrix;
use crate::encoder::{EncoderConfig, EncoderParams, Linear};
use crate::error::{PawsError, Result};
use crate::optim::OptimizerState;

pub const MAGIC: &[u8; 4] = b"PAWS";
pub const VERSION: u32 = 1;
const MAX_ELEMENTS: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub optimizer: Option<OptimizerState>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_matrix(out: &mut Vec<u8>, m: &Matrix) {
    put_u64(out, m.rows() as u64);
    put_u64(out, m.cols() as u64);
    for &v in m.data() {
        put_f64(out, v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(PawsError::Format(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| PawsError::Format(format!("value {v} does not fit in usize")))
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let (r, c) = (self.u64()?, self.u64()?);
        if r.saturating_mul(c) > MAX_ELEMENTS {
            return Err(PawsError::Format(format!("tensor of {r}x{c} is implausibly large")));
        }
        let data = (0..r * c).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Matrix::from_vec(r as usize, c as usize, data).map_err(|e| PawsError::Format(e.to_string()))
    }
}

impl Checkpoint {
    pub fn new(params: EncoderParams) -> Self {
        Self { params, step: 0, optimizer: None }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.params.layers.len() as u32);
        let c = &self.params.config;
        for v in [
            c.input_dim,
            c.hidden_dim,
            c.trunk_layers,
            c.proj_hidden,
            c.proj_layers,
            c.embed_dim,
            c.prediction_head as usize,
            c.pred_hidden,
        ] {
            put_u64(&mut out, v as u64);
        }
        for l in &self.params.layers {
            put_matrix(&mut out, &l.weight);
            put_matrix(&mut out, &l.bias);
        }
        put_u64(&mut out, self.step);
        match &self.optimizer {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                put_f64(&mut out, o.momentum);
                put_f64(&mut out, o.weight_decay);
                put_u64(&mut out, o.step_count);
                put_u32(&mut out, o.excluded.len() as u32);
                for &i in &o.excluded {
                    put_u32(&mut out, i as u32);
                }
                for v in &o.velocity {
                    put_matrix(&mut out, v);
                }
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(PawsError::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(PawsError::Format(format!("unsupported checkpoint version {version}")));
        }
        let n_layers = r.u32()? as usize;
        let mut dims = [0usize; 8];
        for d in &mut dims {
            *d = r.usize()?;
        }
        let config = EncoderConfig {
            input_dim: dims[0],
            hidden_dim: dims[1],
            trunk_layers: dims[2],
            proj_hidden: dims[3],
            proj_layers: dims[4],
            embed_dim: dims[5],
            prediction_head: match dims[6] {
                0 => false,
                1 => true,
                v => return Err(PawsError::Format(format!("bad prediction-head flag {v}"))),
            },
            pred_hidden: dims[7],
        };
        let expected = config.layer_dims().map_err(|e| PawsError::Format(e.to_string()))?.len();
        if expected != n_layers {
            return Err(PawsError::Format(format!("header says {n_layers} layers, encoder shape implies {expected}")));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let weight = r.matrix()?;
            let bias = r.matrix()?;
            layers.push(Linear { weight, bias });
        }
        let params = EncoderParams::from_layers(config, layers).map_err(|e| PawsError::Format(e.to_string()))?;
        let step = r.u64()?;
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let momentum = r.f64()?;
                let weight_decay = r.f64()?;
                let step_count = r.u64()?;
                let n_ex = r.u32()? as usize;
                let excluded = (0..n_ex).map(|_| r.u32().map(|i| i as usize)).collect::<Result<BTreeSet<_>>>()?;
                let velocity = (0..params.num_tensors()).map(|_| r.matrix()).collect::<Result<Vec<_>>>()?;
                for (v, p) in velocity.iter().zip(params.tensors()) {
                    if v.shape() != p.shape() {
                        return Err(PawsError::Format(format!(
                            "velocity {:?} does not match parameter {:?}",
                            v.shape(),
                            p.shape()
                        )));
                    }
                }
                Some(OptimizerState { velocity, momentum, weight_decay, step_count, excluded })
            }
            f => return Err(PawsError::Format(format!("bad optimizer flag {f}"))),
        };
        if r.pos != buf.len() {
            return Err(PawsError::Format(format!("{} trailing bytes after checkpoint", buf.len() - r.pos)));
        }
        Ok(Self { params, step, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_params;

    fn sample() -> Checkpoint {
        let cfg = EncoderConfig { prediction_head: true, ..Default::default() };
        let params = init_params(&cfg, 4).unwrap();
        let mut opt = OptimizerState::for_encoder(&params, 0.9, 1e-6).unwrap();
        for (i, v) in opt.velocity.iter_mut().enumerate() {
            for (j, x) in v.data_mut().iter_mut().enumerate() {
                *x = ((i * 31 + j) as f64).sin() * 1e-3;
            }
        }
        opt.step_count = 17;
        Checkpoint { params, step: 17, optimizer: Some(opt) }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        let bare = Checkpoint::new(init_params(&EncoderConfig::passthrough(3), 0).unwrap());
        assert_eq!(Checkpoint::from_bytes(&bare.to_bytes()).unwrap(), bare);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.paws");
        let c = sample();
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
    }

    #[test]
    fn corrupt_input_is_a_format_error() {
        let bytes = sample().to_bytes();
        let fmt = |b: &[u8]| matches!(Checkpoint::from_bytes(b), Err(PawsError::Format(_)));
        assert!(fmt(&bytes[..bytes.len() - 1]));
        assert!(fmt(b"NOPE"));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(fmt(&bad));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(fmt(&extra));
        let mut wrong_layers = bytes;
        wrong_layers[8] = 3;
        assert!(fmt(&wrong_layers));
    }
}
