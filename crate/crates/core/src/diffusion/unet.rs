//! Time-conditioned UNet-lite with a zero-initialised conditioning branch.
//!
//! Backbone: per level two 3×3 convolutions with group norm and SiLU, the
//! first one shifted by a projection of the timestep embedding. Levels are
//! joined by 2×2 average pooling and nearest-neighbour upsampling with skip
//! concatenation. The conditioning branch mirrors the encoder on the
//! two-channel condition and is added into the backbone after every
//! encoder level through a 1×1 convolution whose weights and bias start at
//! zero. The output convolution also starts at zero, so a fresh model
//! predicts ε̂ = 0.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{
    avg_pool2, avg_pool2_backward, concat, silu, silu_backward, split, timestep_embedding, upsample2,
    upsample2_backward, Conv, ConvCache, GroupNorm, Linear, NormCache, ParamRef, Tensor,
};
use super::scalar::Scalar;
use crate::{Error, Result};

pub const COND_CHANNELS: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnetConfig {
    /// Channel width per resolution level, finest first.
    pub widths: Vec<usize>,
    pub groups: usize,
    /// Length of the sinusoidal timestep embedding.
    pub time_dim: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self { widths: vec![32, 64, 128], groups: 8, time_dim: 32 }
    }
}

impl UnetConfig {
    /// Width-8 network for gradient checks and quick tests.
    pub fn tiny() -> Self {
        Self { widths: vec![8, 16, 32], groups: 4, time_dim: 8 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() > 8 {
            return Err(Error::invalid(format!("need 1..=8 levels, got {}", self.widths.len())));
        }
        if self.groups == 0 || self.widths.iter().any(|&w| w == 0 || w % self.groups != 0) {
            return Err(Error::invalid(format!(
                "widths {:?} must be positive multiples of groups ({})",
                self.widths, self.groups
            )));
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::invalid(format!("time_dim must be even and >= 2, got {}", self.time_dim)));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    /// Spatial sizes must be multiples of this.
    pub fn pad_multiple(&self) -> usize {
        1 << (self.levels() - 1)
    }

    fn temb_dim(&self) -> usize {
        4 * self.widths[0]
    }
}

/// Name, shape and location of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Uniform(f64),
    Zeros,
    Ones,
}

#[derive(Default)]
struct LayoutBuilder {
    entries: Vec<ParamEntry>,
    inits: Vec<Init>,
    total: usize,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> ParamRef {
        let len = shape.iter().product();
        let r = ParamRef { offset: self.total, len };
        self.entries.push(ParamEntry { name, shape, offset: self.total, len });
        self.inits.push(init);
        self.total += len;
        r
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, zero: bool) -> Conv {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        let init = if zero { Init::Zeros } else { Init::Uniform(bound) };
        Conv {
            cin,
            cout,
            k,
            weight: self.add(format!("{name}.weight"), vec![cout, cin, k, k], init),
            bias: self.add(format!("{name}.bias"), vec![cout], init),
        }
    }

    fn norm(&mut self, name: &str, c: usize, groups: usize) -> GroupNorm {
        GroupNorm {
            c,
            groups,
            gamma: self.add(format!("{name}.gamma"), vec![c], Init::Ones),
            beta: self.add(format!("{name}.beta"), vec![c], Init::Zeros),
        }
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Linear {
        let init = Init::Uniform(1.0 / (din as f64).sqrt());
        Linear {
            din,
            dout,
            weight: self.add(format!("{name}.weight"), vec![dout, din], init),
            bias: self.add(format!("{name}.bias"), vec![dout], init),
        }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, groups: usize, temb: Option<usize>) -> Block {
        Block {
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3, false),
            norm1: self.norm(&format!("{name}.norm1"), cout, groups),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, false),
            norm2: self.norm(&format!("{name}.norm2"), cout, groups),
            temb: temb.map(|d| self.linear(&format!("{name}.temb"), d, cout)),
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    conv1: Conv,
    norm1: GroupNorm,
    conv2: Conv,
    norm2: GroupNorm,
    temb: Option<Linear>,
}

struct BlockTape<T> {
    c1: ConvCache<T>,
    n1: NormCache<T>,
    g1: Vec<T>,
    c2: ConvCache<T>,
    n2: NormCache<T>,
    g2: Vec<T>,
}

impl Block {
    fn forward<T: Scalar>(&self, x: &Tensor<T>, semb: Option<&[T]>, p: &[T]) -> (Tensor<T>, BlockTape<T>) {
        let (mut a, c1) = self.conv1.forward(x, p);
        if let (Some(lin), Some(e)) = (&self.temb, semb) {
            let proj = lin.forward(e, p);
            let hw = a.hw();
            for (c, &v) in proj.iter().enumerate() {
                a.data[c * hw..(c + 1) * hw].iter_mut().for_each(|x| *x += v);
            }
        }
        let (g1, n1) = self.norm1.forward(&a, p);
        let s1 = Tensor::from_vec(g1.c, g1.h, g1.w, silu(&g1.data));
        let (b, c2) = self.conv2.forward(&s1, p);
        let (g2, n2) = self.norm2.forward(&b, p);
        let out = Tensor::from_vec(g2.c, g2.h, g2.w, silu(&g2.data));
        (out, BlockTape { c1, n1, g1: g1.data, c2, n2, g2: g2.data })
    }

    /// Returns the input gradient (if requested) and the gradient with
    /// respect to the activated timestep embedding (if the block has one).
    fn backward<T: Scalar>(
        &self,
        dout: &Tensor<T>,
        tape: &BlockTape<T>,
        semb: Option<&[T]>,
        p: &[T],
        g: &mut [T],
        need_input_grad: bool,
    ) -> (Option<Tensor<T>>, Option<Vec<T>>) {
        let (c, h, w) = (dout.c, dout.h, dout.w);
        let dg2 = Tensor::from_vec(c, h, w, silu_backward(&tape.g2, &dout.data));
        let db = self.norm2.backward(&dg2, &tape.n2, p, g);
        let ds1 = self.conv2.backward(&db, &tape.c2, p, g, true).expect("input grad");
        let dg1 = Tensor::from_vec(c, h, w, silu_backward(&tape.g1, &ds1.data));
        let da = self.norm1.backward(&dg1, &tape.n1, p, g);
        let dsemb = match (&self.temb, semb) {
            (Some(lin), Some(e)) => {
                let dproj: Vec<T> = (0..c).map(|ch| da.channel(ch).iter().copied().sum()).collect();
                Some(lin.backward(e, &dproj, p, g))
            }
            _ => None,
        };
        let dx = self.conv1.backward(&da, &tape.c1, p, g, need_input_grad);
        (dx, dsemb)
    }
}

#[derive(Clone, Debug)]
struct Architecture {
    config: UnetConfig,
    time1: Linear,
    time2: Linear,
    enc: Vec<Block>,
    cond: Vec<Block>,
    fuse: Vec<Conv>,
    dec: Vec<Block>,
    out: Conv,
    entries: Vec<ParamEntry>,
    inits: Vec<Init>,
    total: usize,
}

impl Architecture {
    fn new(config: &UnetConfig) -> Result<Self> {
        config.validate()?;
        let ws = &config.widths;
        let g = config.groups;
        let temb = config.temb_dim();
        let mut b = LayoutBuilder::default();
        let time1 = b.linear("time.0", config.time_dim, temb);
        let time2 = b.linear("time.1", temb, temb);
        let mut enc = Vec::new();
        let mut cond = Vec::new();
        let mut fuse = Vec::new();
        for (i, &w) in ws.iter().enumerate() {
            let cin = if i == 0 { 1 } else { ws[i - 1] };
            enc.push(b.block(&format!("enc.{i}"), cin, w, g, Some(temb)));
        }
        for (i, &w) in ws.iter().enumerate() {
            let cin = if i == 0 { COND_CHANNELS } else { ws[i - 1] };
            cond.push(b.block(&format!("cond.{i}"), cin, w, g, None));
            fuse.push(b.conv(&format!("fuse.{i}"), w, w, 1, true));
        }
        let dec =
            (0..ws.len() - 1).map(|i| b.block(&format!("dec.{i}"), ws[i + 1] + ws[i], ws[i], g, Some(temb))).collect();
        let out = b.conv("out", ws[0], 1, 3, true);
        Ok(Self {
            config: config.clone(),
            time1,
            time2,
            enc,
            cond,
            fuse,
            dec,
            out,
            entries: b.entries,
            inits: b.inits,
            total: b.total,
        })
    }
}

/// Weights of the denoiser, one flat vector plus the architecture that
/// indexes it.
#[derive(Clone, Debug)]
pub struct ModelParams<T> {
    arch: Architecture,
    values: Vec<T>,
}

impl<T: Scalar> PartialEq for ModelParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.arch.config == other.arch.config && self.values == other.values
    }
}

pub(crate) struct Tape<T> {
    sin: Vec<T>,
    h1: Vec<T>,
    a1: Vec<T>,
    emb: Vec<T>,
    semb: Vec<T>,
    enc: Vec<BlockTape<T>>,
    cond: Vec<(BlockTape<T>, ConvCache<T>)>,
    dec: Vec<BlockTape<T>>,
    out: ConvCache<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// Seeded initialisation; fusion and output convolutions are zero.
    pub fn init(config: &UnetConfig, seed: u64) -> Result<Self> {
        let arch = Architecture::new(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(arch.total);
        for (entry, init) in arch.entries.iter().zip(&arch.inits) {
            for _ in 0..entry.len {
                values.push(match *init {
                    Init::Uniform(b) => T::from_f64_lossy(rng.random_range(-b..b)),
                    Init::Zeros => T::zero(),
                    Init::Ones => T::one(),
                });
            }
        }
        Ok(Self { arch, values })
    }

    pub fn from_values(config: &UnetConfig, values: Vec<T>) -> Result<Self> {
        let arch = Architecture::new(config)?;
        if values.len() != arch.total {
            return Err(Error::shape(format!("{} parameters", arch.total), values.len()));
        }
        Ok(Self { arch, values })
    }

    pub fn config(&self) -> &UnetConfig {
        &self.arch.config
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.arch.entries
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Parameters of the named tensor.
    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        let e = self.arch.entries.iter().find(|e| e.name == name)?;
        Some(&self.values[e.offset..e.offset + e.len])
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            arch: self.arch.clone(),
            values: self.values.iter().map(|v| U::from_f64_lossy(v.to_f64().unwrap())).collect(),
        }
    }

    /// Offsets of the conditioning fusion layers in the flat vector.
    pub fn fusion_entries(&self) -> impl Iterator<Item = &ParamEntry> {
        self.arch.entries.iter().filter(|e| e.name.starts_with("fuse."))
    }

    /// Network pass on padded inputs: `z` has 1 channel, `cond` 2.
    pub(crate) fn forward(&self, z: &Tensor<T>, t: f64, cond: Option<&Tensor<T>>) -> (Tensor<T>, Tape<T>) {
        let a = &self.arch;
        let p = &self.values;
        let levels = a.config.levels();
        assert_eq!(z.c, 1);
        let m = a.config.pad_multiple();
        assert!(z.h.is_multiple_of(m) && z.w.is_multiple_of(m), "input must be padded to a multiple of {m}");

        let sin = timestep_embedding::<T>(t, a.config.time_dim);
        let h1 = a.time1.forward(&sin, p);
        let a1 = silu(&h1);
        let emb = a.time2.forward(&a1, p);
        let semb = silu(&emb);

        let mut h = z.clone();
        let mut c = cond.cloned();
        let mut skips = Vec::with_capacity(levels);
        let mut enc_t = Vec::with_capacity(levels);
        let mut cond_t = Vec::with_capacity(levels);
        for i in 0..levels {
            if i > 0 {
                h = avg_pool2(&h);
                c = c.map(|c| avg_pool2(&c));
            }
            let (mut hi, bt) = a.enc[i].forward(&h, Some(&semb), p);
            enc_t.push(bt);
            if let Some(ci) = c.take() {
                let (co, ct) = a.cond[i].forward(&ci, None, p);
                let (f, fc) = a.fuse[i].forward(&co, p);
                hi.add_assign(&f);
                cond_t.push((ct, fc));
                c = Some(co);
            }
            h = hi;
            if i + 1 < levels {
                skips.push(h.clone());
            }
        }
        let mut dec_t: Vec<Option<BlockTape<T>>> = (0..levels.saturating_sub(1)).map(|_| None).collect();
        for i in (0..levels - 1).rev() {
            let x = concat(&upsample2(&h), &skips[i]);
            let (o, bt) = a.dec[i].forward(&x, Some(&semb), p);
            dec_t[i] = Some(bt);
            h = o;
        }
        let (out, oc) = a.out.forward(&h, p);
        let tape = Tape {
            sin,
            h1,
            a1,
            emb,
            semb,
            enc: enc_t,
            cond: cond_t,
            dec: dec_t.into_iter().map(|t| t.expect("decoder tape")).collect(),
            out: oc,
        };
        (out, tape)
    }

    /// Accumulates `∂L/∂θ` into `g` given `dout = ∂L/∂output`.
    pub(crate) fn backward(&self, tape: &Tape<T>, dout: &Tensor<T>, g: &mut [T]) {
        let a = &self.arch;
        let p = &self.values;
        let levels = a.config.levels();
        let semb = Some(tape.semb.as_slice());
        let mut dsemb = vec![T::zero(); tape.semb.len()];
        let mut add_semb = |d: Option<Vec<T>>| {
            if let Some(d) = d {
                dsemb.iter_mut().zip(&d).for_each(|(a, &b)| *a += b);
            }
        };

        let mut dh = a.out.backward(dout, &tape.out, p, g, true).expect("input grad");
        let mut dskips = Vec::with_capacity(levels);
        for i in 0..levels - 1 {
            let (dx, ds) = a.dec[i].backward(&dh, &tape.dec[i], semb, p, g, true);
            add_semb(ds);
            let (du, dskip) = split(dx.expect("input grad"), a.config.widths[i + 1]);
            dskips.push(dskip);
            dh = upsample2_backward(&du);
        }
        let conditioned = !tape.cond.is_empty();
        let mut dc_next: Option<Tensor<T>> = None;
        for i in (0..levels).rev() {
            if i + 1 < levels {
                dh.add_assign(&dskips[i]);
            }
            if conditioned {
                let (ct, fc) = &tape.cond[i];
                let mut dco = a.fuse[i].backward(&dh, fc, p, g, true).expect("input grad");
                if let Some(d) = dc_next.take() {
                    dco.add_assign(&d);
                }
                let (dcin, _) = a.cond[i].backward(&dco, ct, None, p, g, i > 0);
                dc_next = dcin.map(|d| avg_pool2_backward(&d));
            }
            let (dx, ds) = a.enc[i].backward(&dh, &tape.enc[i], semb, p, g, i > 0);
            add_semb(ds);
            if let Some(dx) = dx {
                dh = avg_pool2_backward(&dx);
            }
        }
        let demb = silu_backward(&tape.emb, &dsemb);
        let da1 = a.time2.backward(&tape.a1, &demb, p, g);
        let dh1 = silu_backward(&tape.h1, &da1);
        a.time1.backward(&tape.sin, &dh1, p, g);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout() {
        let p = ModelParams::<f32>::init(&UnetConfig::default(), 0).unwrap();
        assert_eq!(p.config().pad_multiple(), 4);
        assert!(p.fusion_entries().count() == 6);
        for e in p.fusion_entries() {
            assert!(p.values()[e.offset..e.offset + e.len].iter().all(|&v| v == 0.0), "{}", e.name);
        }
        assert!(p.tensor("out.weight").unwrap().iter().all(|&v| v == 0.0));
        assert!(p.tensor("enc.0.conv1.weight").unwrap().iter().any(|&v| v != 0.0));
        let names: std::collections::HashSet<_> = p.entries().iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names.len(), p.entries().len());
        let covered: usize = p.entries().iter().map(|e| e.len).sum();
        assert_eq!(covered, p.len());
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(UnetConfig { widths: vec![], ..UnetConfig::default() }.validate().is_err());
        assert!(UnetConfig { widths: vec![12], groups: 8, time_dim: 8 }.validate().is_err());
        assert!(UnetConfig { widths: vec![8], groups: 4, time_dim: 7 }.validate().is_err());
        let p = ModelParams::<f32>::init(&UnetConfig::tiny(), 0).unwrap();
        assert!(ModelParams::from_values(&UnetConfig::tiny(), vec![0.0f32; p.len() - 1]).is_err());
    }

    #[test]
    fn fresh_model_predicts_zero() {
        let p = ModelParams::<f64>::init(&UnetConfig::tiny(), 3).unwrap();
        let z = Tensor::from_vec(1, 8, 8, (0..64).map(|i| (i as f64 * 0.37).sin()).collect());
        let (out, _) = p.forward(&z, 500.0, None);
        assert!(out.data.iter().all(|&v| v == 0.0));
    }
}
