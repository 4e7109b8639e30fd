//! Network building blocks with hand-written backward passes.
//!
//! Parameters live in one flat vector; layers only hold offsets into it,
//! so gradients, optimiser state and checkpoints are flat vectors too.

use super::scalar::{matmul, Mat, Scalar};

/// Channel-major activation of a single sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![T::zero(); c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length");
        Self { c, h, w, data }
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let hw = self.hw();
        &self.data[c * hw..(c + 1) * hw]
    }

    fn same_shape(&self, other: &Self) -> bool {
        (self.c, self.h, self.w) == (other.c, other.h, other.w)
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        assert!(self.same_shape(other));
        self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a += b);
    }
}

/// Slice of the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ParamRef {
    pub offset: usize,
    pub len: usize,
}

impl ParamRef {
    pub fn get<'a, T>(&self, p: &'a [T]) -> &'a [T] {
        &p[self.offset..self.offset + self.len]
    }

    pub fn get_mut<'a, T>(&self, p: &'a mut [T]) -> &'a mut [T] {
        &mut p[self.offset..self.offset + self.len]
    }
}

/// Square convolution, stride 1, zero padding `k / 2`.
#[derive(Clone, Debug)]
pub(crate) struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub weight: ParamRef,
    pub bias: ParamRef,
}

#[derive(Clone, Debug)]
pub(crate) struct GroupNorm {
    pub c: usize,
    pub groups: usize,
    pub gamma: ParamRef,
    pub beta: ParamRef,
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub din: usize,
    pub dout: usize,
    pub weight: ParamRef,
    pub bias: ParamRef,
}

const NORM_EPS: f64 = 1e-5;

/// Unfolds a 3×3 neighbourhood per pixel into a `(cin·9) × hw` matrix.
fn im2col3<T: Scalar>(x: &Tensor<T>) -> Vec<T> {
    let (h, w) = (x.h, x.w);
    let hw = h * w;
    let mut cols = vec![T::zero(); x.c * 9 * hw];
    for (ci, block) in cols.chunks_exact_mut(9 * hw).enumerate() {
        let src = x.channel(ci);
        for (tap, row) in block.chunks_exact_mut(hw).enumerate() {
            let (ky, kx) = (tap / 3, tap % 3);
            for y in 0..h {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                let s = &src[sy as usize * w..(sy as usize + 1) * w];
                let d = &mut row[y * w..(y + 1) * w];
                // d[x] = s[x + kx - 1], zero outside
                match kx {
                    0 => d[1..].copy_from_slice(&s[..w - 1]),
                    1 => d.copy_from_slice(s),
                    _ => d[..w - 1].copy_from_slice(&s[1..]),
                }
            }
        }
    }
    cols
}

/// `w[co][ci][tap]` → `w[ci][co][8 − tap]`: the kernel of the adjoint 3×3
/// convolution.
fn flip3<T: Scalar>(w: &[T], cout: usize, cin: usize) -> Vec<T> {
    let mut out = vec![T::zero(); w.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for tap in 0..9 {
                out[(ci * cout + co) * 9 + 8 - tap] = w[(co * cin + ci) * 9 + tap];
            }
        }
    }
    out
}

/// Saved input of a convolution: the unfolded columns for 3×3, the input
/// itself for 1×1.
pub(crate) struct ConvCache<T> {
    cols: Vec<T>,
    h: usize,
    w: usize,
}

impl Conv {
    pub fn forward<T: Scalar>(&self, x: &Tensor<T>, p: &[T]) -> (Tensor<T>, ConvCache<T>) {
        assert_eq!(x.c, self.cin, "conv input channels");
        let hw = x.hw();
        let cols = match self.k {
            1 => x.data.clone(),
            3 => im2col3(x),
            k => unreachable!("unsupported kernel size {k}"),
        };
        let kk = self.cin * self.k * self.k;
        let mut out = Tensor::zeros(self.cout, x.h, x.w);
        matmul(Mat::new(self.weight.get(p), self.cout, kk), Mat::new(&cols, kk, hw), &mut out.data, false);
        for (c, &b) in self.bias.get(p).iter().enumerate() {
            out.data[c * hw..(c + 1) * hw].iter_mut().for_each(|v| *v += b);
        }
        (out, ConvCache { cols, h: x.h, w: x.w })
    }

    /// Accumulates parameter gradients into `g` and returns the input
    /// gradient when `need_input_grad`.
    pub fn backward<T: Scalar>(
        &self,
        dy: &Tensor<T>,
        cache: &ConvCache<T>,
        p: &[T],
        g: &mut [T],
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let hw = cache.h * cache.w;
        let kk = self.cin * self.k * self.k;
        matmul(Mat::new(&dy.data, self.cout, hw), Mat::t(&cache.cols, kk, hw), self.weight.get_mut(g), true);
        for (c, gb) in self.bias.get_mut(g).iter_mut().enumerate() {
            *gb += dy.channel(c).iter().copied().sum::<T>();
        }
        if !need_input_grad {
            return None;
        }
        let mut dx = Tensor::zeros(self.cin, cache.h, cache.w);
        match self.k {
            1 => matmul(
                Mat::t(self.weight.get(p), self.cout, kk),
                Mat::new(&dy.data, self.cout, hw),
                &mut dx.data,
                false,
            ),
            _ => {
                // The adjoint of a zero-padded 3×3 convolution is the same
                // convolution with the kernel flipped and transposed.
                let wt = flip3(self.weight.get(p), self.cout, self.cin);
                let dcols = im2col3(dy);
                matmul(
                    Mat::new(&wt, self.cin, self.cout * 9),
                    Mat::new(&dcols, self.cout * 9, hw),
                    &mut dx.data,
                    false,
                );
            }
        }
        Some(dx)
    }
}

pub(crate) struct NormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

impl GroupNorm {
    pub fn forward<T: Scalar>(&self, x: &Tensor<T>, p: &[T]) -> (Tensor<T>, NormCache<T>) {
        let hw = x.hw();
        let per = self.c / self.groups * hw;
        let (gamma, beta) = (self.gamma.get(p), self.beta.get(p));
        let mut xhat = vec![T::zero(); x.data.len()];
        let mut rstd = Vec::with_capacity(self.groups);
        for gi in 0..self.groups {
            let src = &x.data[gi * per..(gi + 1) * per];
            let mean = src.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / per as f64;
            let var = src.iter().map(|v| (v.to_f64().unwrap() - mean).powi(2)).sum::<f64>() / per as f64;
            let r = 1.0 / (var + NORM_EPS).sqrt();
            let (m, r) = (T::from_f64_lossy(mean), T::from_f64_lossy(r));
            xhat[gi * per..(gi + 1) * per].iter_mut().zip(src).for_each(|(o, &v)| *o = (v - m) * r);
            rstd.push(r);
        }
        let mut out = Tensor::zeros(x.c, x.h, x.w);
        for c in 0..self.c {
            let (gm, bt) = (gamma[c], beta[c]);
            out.data[c * hw..(c + 1) * hw]
                .iter_mut()
                .zip(&xhat[c * hw..(c + 1) * hw])
                .for_each(|(o, &v)| *o = gm * v + bt);
        }
        (out, NormCache { xhat, rstd })
    }

    pub fn backward<T: Scalar>(&self, dy: &Tensor<T>, cache: &NormCache<T>, p: &[T], g: &mut [T]) -> Tensor<T> {
        let hw = dy.hw();
        let cpg = self.c / self.groups;
        let per = cpg * hw;
        let gamma = self.gamma.get(p);
        let mut dgamma = vec![T::zero(); self.c];
        let mut dbeta = vec![T::zero(); self.c];
        for c in 0..self.c {
            let d = dy.channel(c);
            let xh = &cache.xhat[c * hw..(c + 1) * hw];
            dgamma[c] = d.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
            dbeta[c] = d.iter().copied().sum::<T>();
        }
        self.gamma.get_mut(g).iter_mut().zip(&dgamma).for_each(|(a, &b)| *a += b);
        self.beta.get_mut(g).iter_mut().zip(&dbeta).for_each(|(a, &b)| *a += b);
        let mut dx = Tensor::zeros(dy.c, dy.h, dy.w);
        let n = T::from_usize(per).unwrap();
        for gi in 0..self.groups {
            let mut dxhat = Vec::with_capacity(per);
            for (c, &gm) in gamma.iter().enumerate().skip(gi * cpg).take(cpg) {
                dxhat.extend(dy.channel(c).iter().map(|&v| v * gm));
            }
            let xh = &cache.xhat[gi * per..(gi + 1) * per];
            let m1 = dxhat.iter().copied().sum::<T>() / n;
            let m2 = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n;
            let r = cache.rstd[gi];
            dx.data[gi * per..(gi + 1) * per]
                .iter_mut()
                .zip(dxhat.iter().zip(xh))
                .for_each(|(o, (&d, &x))| *o = r * (d - m1 - x * m2));
        }
        dx
    }
}

impl Linear {
    pub fn forward<T: Scalar>(&self, x: &[T], p: &[T]) -> Vec<T> {
        let mut out = self.bias.get(p).to_vec();
        matmul(Mat::new(self.weight.get(p), self.dout, self.din), Mat::new(x, self.din, 1), &mut out, true);
        out
    }

    /// Returns the input gradient.
    pub fn backward<T: Scalar>(&self, x: &[T], dy: &[T], p: &[T], g: &mut [T]) -> Vec<T> {
        matmul(Mat::new(dy, self.dout, 1), Mat::new(x, 1, self.din), self.weight.get_mut(g), true);
        self.bias.get_mut(g).iter_mut().zip(dy).for_each(|(a, &b)| *a += b);
        let mut dx = vec![T::zero(); self.din];
        matmul(Mat::t(self.weight.get(p), self.dout, self.din), Mat::new(dy, self.dout, 1), &mut dx, false);
        dx
    }
}

pub(crate) fn silu<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * v.sigmoid()).collect()
}

/// `dy · silu'(x)`.
pub(crate) fn silu_backward<T: Scalar>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let s = v.sigmoid();
            d * s * (T::one() + v * (T::one() - s))
        })
        .collect()
}

pub(crate) fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    debug_assert!(x.h.is_multiple_of(2) && x.w.is_multiple_of(2));
    let (h, w) = (x.h / 2, x.w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut out = Tensor::zeros(x.c, h, w);
    for c in 0..x.c {
        let src = x.channel(c);
        for y in 0..h {
            for xx in 0..w {
                let i = 2 * y * x.w + 2 * xx;
                out.data[(c * h + y) * w + xx] = (src[i] + src[i + 1] + src[i + x.w] + src[i + x.w + 1]) * quarter;
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let quarter = T::from_f64_lossy(0.25);
    let mut dx = upsample2(dy);
    dx.data.iter_mut().for_each(|v| *v *= quarter);
    dx
}

/// Nearest-neighbour ×2.
pub(crate) fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.c, h, w);
    for c in 0..x.c {
        let src = x.channel(c);
        for y in 0..h {
            let s = &src[(y / 2) * x.w..(y / 2 + 1) * x.w];
            let d = &mut out.data[(c * h + y) * w..(c * h + y + 1) * w];
            for (xx, v) in d.iter_mut().enumerate() {
                *v = s[xx / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.c, h, w);
    for c in 0..dy.c {
        let src = dy.channel(c);
        for y in 0..h {
            for xx in 0..w {
                let i = 2 * y * dy.w + 2 * xx;
                dx.data[(c * h + y) * w + xx] = src[i] + src[i + 1] + src[i + dy.w] + src[i + dy.w + 1];
            }
        }
    }
    dx
}

pub(crate) fn concat<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!((a.h, a.w), (b.h, b.w));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor::from_vec(a.c + b.c, a.h, a.w, data)
}

pub(crate) fn split<T: Scalar>(x: Tensor<T>, first: usize) -> (Tensor<T>, Tensor<T>) {
    let at = first * x.hw();
    let mut data = x.data;
    let rest = data.split_off(at);
    (Tensor::from_vec(first, x.h, x.w, data), Tensor::from_vec(x.c - first, x.h, x.w, rest))
}

/// Sinusoidal embedding of timestep `t`: `[sin(t·f_k)…, cos(t·f_k)…]` with
/// `f_k = 10000^(−k/(dim/2))`.
pub(crate) fn timestep_embedding<T: Scalar>(t: f64, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        out[k] = T::from_f64_lossy((t * freq).sin());
        out[half + k] = T::from_f64_lossy((t * freq).cos());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_input_gradient_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in [1, 3] {
            let (cin, cout) = (3, 4);
            let n_w = cout * cin * k * k;
            let conv = Conv {
                cin,
                cout,
                k,
                weight: ParamRef { offset: 0, len: n_w },
                bias: ParamRef { offset: n_w, len: cout },
            };
            let mut p: Vec<f64> = (0..n_w).map(|_| rng.random_range(-1.0..1.0)).collect();
            p.extend(std::iter::repeat_n(0.0, cout));
            let x = random_tensor(&mut rng, cin, 5, 7);
            let y = random_tensor(&mut rng, cout, 5, 7);
            let (out, cache) = conv.forward(&x, &p);
            let mut g = vec![0.0; p.len()];
            let dx = conv.backward(&y, &cache, &p, &mut g, true).unwrap();
            assert!((dot(&out.data, &y.data) - dot(&x.data, &dx.data)).abs() < 1e-10, "k={k}");
        }
    }

    #[test]
    fn conv3_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (cin, cout, h, w) = (2, 3, 4, 5);
        let conv = Conv {
            cin,
            cout,
            k: 3,
            weight: ParamRef { offset: 0, len: cout * cin * 9 },
            bias: ParamRef { offset: cout * cin * 9, len: cout },
        };
        let p: Vec<f64> = (0..cout * cin * 9 + cout).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = random_tensor(&mut rng, cin, h, w);
        let (y, _) = conv.forward(&x, &p);
        for co in 0..cout {
            for yy in 0..h {
                for xx in 0..w {
                    let mut acc = p[cout * cin * 9 + co];
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (yy as isize + ky - 1, xx as isize + kx - 1);
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                    let wv = p[((co * cin + ci) * 3 + ky as usize) * 3 + kx as usize];
                                    acc += wv * x.data[(ci * h + sy as usize) * w + sx as usize];
                                }
                            }
                        }
                    }
                    assert!((acc - y.data[(co * h + yy) * w + xx]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pooling_and_upsampling_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, 2, 4, 6);
        let y = random_tensor(&mut rng, 2, 2, 3);
        let px = avg_pool2(&x);
        assert!((dot(&px.data, &y.data) - dot(&x.data, &avg_pool2_backward(&y).data)).abs() < 1e-12);
        let uy = upsample2(&y);
        assert!((dot(&uy.data, &x.data) - dot(&y.data, &upsample2_backward(&x).data)).abs() < 1e-12);
    }

    #[test]
    fn group_norm_normalises_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let norm =
            GroupNorm { c: 4, groups: 2, gamma: ParamRef { offset: 0, len: 4 }, beta: ParamRef { offset: 4, len: 4 } };
        let p = [1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let mut x = random_tensor(&mut rng, 4, 3, 3);
        x.data.iter_mut().for_each(|v| *v = *v * 5.0 + 2.0);
        let (y, _) = norm.forward(&x, &p);
        for g in 0..2 {
            let s = &y.data[g * 18..(g + 1) * 18];
            let mean = s.iter().sum::<f64>() / 18.0;
            let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 18.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn embedding_layout() {
        let e: Vec<f64> = timestep_embedding(0.0, 8);
        assert_eq!(e, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let e: Vec<f64> = timestep_embedding(3.0, 4);
        assert!((e[0] - 3f64.sin()).abs() < 1e-15);
        assert!((e[1] - (3.0 * 0.01f64).sin()).abs() < 1e-15);
    }
}
