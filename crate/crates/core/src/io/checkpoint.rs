//! `SDIF` v1 model checkpoint, all integers and floats little-endian:
//!
//! ```text
//! "SDIF" u16 version
//! u32 n_angles  u32 n_bins  u32 image_size
//! u32 timesteps  f64 beta_start  f64 beta_end
//! f64 norm_scale
//! u32 groups  u32 time_dim  u32 n_levels  u32 width × n_levels
//! u32 n_tensors
//!   per tensor: u32 name_len, name (UTF-8), u32 n_dims, u32 dim × n_dims,
//!               f32 value × Π dims
//! ```

use std::collections::HashMap;
use std::path::Path;

use super::{read_bytes, write_bytes};
use crate::diffusion::{DiffusionSchedule, ModelParams, Normalizer, UnetConfig};
use crate::grid::ProjectionGeometry;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"SDIF";
const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub geometry: ProjectionGeometry,
    pub schedule: DiffusionSchedule,
    pub normalizer: Normalizer,
    pub params: ModelParams<f32>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.bytes(&VERSION.to_le_bytes());
        w.u32(self.geometry.n_angles());
        w.u32(self.geometry.n_bins());
        w.u32(self.geometry.image_size());
        w.u32(self.schedule.timesteps());
        w.f64(self.schedule.beta_start());
        w.f64(self.schedule.beta_end());
        w.f64(self.normalizer.scale());
        let cfg = self.params.config();
        w.u32(cfg.groups);
        w.u32(cfg.time_dim);
        w.u32(cfg.widths.len());
        cfg.widths.iter().for_each(|&x| w.u32(x));
        w.u32(self.params.entries().len());
        for e in self.params.entries() {
            w.u32(e.name.len());
            w.bytes(e.name.as_bytes());
            w.u32(e.shape.len());
            e.shape.iter().for_each(|&d| w.u32(d));
            for v in &self.params.values()[e.offset..e.offset + e.len] {
                w.bytes(&v.to_le_bytes());
            }
        }
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let geometry = ProjectionGeometry::new(r.u32()?, r.u32()?, r.u32()?)?;
        let schedule = DiffusionSchedule::linear(r.u32()?, r.f64()?, r.f64()?)?;
        let normalizer = Normalizer::new(r.f64()?)?;
        let groups = r.u32()?;
        let time_dim = r.u32()?;
        let n_levels = r.u32()?;
        if n_levels > 8 {
            return Err(bad(format!("{n_levels} levels")));
        }
        let widths = (0..n_levels).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let config = UnetConfig { widths, groups, time_dim };
        let mut params = ModelParams::<f32>::init(&config, 0)?;
        let layout: HashMap<String, (Vec<usize>, usize)> =
            params.entries().iter().map(|e| (e.name.clone(), (e.shape.clone(), e.offset))).collect();
        let n_tensors = r.u32()?;
        if n_tensors != layout.len() {
            return Err(bad(format!("expected {} tensors, found {n_tensors}", layout.len())));
        }
        let mut seen = std::collections::HashSet::new();
        for _ in 0..n_tensors {
            let len = r.u32()?;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
            let ndims = r.u32()?;
            if ndims > 8 {
                return Err(bad(format!("tensor {name} has {ndims} dimensions")));
            }
            let shape = (0..ndims).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let (expected, offset) = layout.get(&name).ok_or_else(|| bad(format!("unknown tensor {name}")))?;
            if &shape != expected {
                return Err(bad(format!("tensor {name} has shape {shape:?}, expected {expected:?}")));
            }
            if !seen.insert(name.clone()) {
                return Err(bad(format!("duplicate tensor {name}")));
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4)?;
            let dst = &mut params.values_mut()[*offset..offset + n];
            for (d, c) in dst.iter_mut().zip(raw.chunks_exact(4)) {
                *d = f32::from_le_bytes(c.try_into().unwrap());
            }
        }
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { geometry, schedule, normalizer, params })
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_bytes(path, &ckpt.encode())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::decode(&read_bytes(path)?)
}

fn bad(reason: impl Into<String>) -> Error {
    Error::format("SDIF", reason)
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }

    fn u32(&mut self, v: usize) {
        self.bytes(&u32::try_from(v).expect("fits in u32").to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(bad(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
