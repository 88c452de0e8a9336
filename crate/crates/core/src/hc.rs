//! Disagreement-aware head calibration.
//!
//! Every site's coarse head is applied to the local decoder feature. The
//! per-pixel spread of those predictions around the local one marks the
//! regions the federation disagrees on; after peak suppression and a
//! Gaussian spread the result gates the feature that feeds the calibrated
//! head.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{ParamSet, COARSE_HEAD};
use crate::tensor::{self, Real, Tensor};

pub const DEFAULT_NMS_DELTA: usize = 11;
pub const DEFAULT_GAUSS_SIZE: usize = 11;
pub const DEFAULT_GAUSS_SIGMA: f64 = 3.0;

/// Weights of one per-pixel coarse head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> HeadParams<T> {
    pub fn from_params(ps: &ParamSet<T>) -> Result<Self> {
        Ok(Self {
            weight: ps.tensor(&format!("{COARSE_HEAD}.weight"))?.clone(),
            bias: ps.tensor(&format!("{COARSE_HEAD}.bias"))?.clone(),
        })
    }
}

/// Coarse heads of all sites, as relayed by the server after round `round`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadCollection<T> {
    pub round: u64,
    pub heads: Vec<HeadParams<T>>,
}

impl<T: Real> HeadCollection<T> {
    pub fn new(round: u64, heads: Vec<HeadParams<T>>) -> Result<Self> {
        if let Some(first) = heads.first() {
            for h in &heads {
                if h.weight.shape() != first.weight.shape() || h.bias.shape() != first.bias.shape() {
                    return Err(Error::Shape("head collection members differ in shape".into()));
                }
            }
        }
        Ok(Self { round, heads })
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }
}

/// `S_i = sigmoid(per_pixel_linear(f̂, head_i))` for every head.
pub fn evaluate_heads<T: Real>(f_hat: &Tensor<T>, heads: &HeadCollection<T>) -> Result<Vec<Tensor<T>>> {
    heads
        .heads
        .iter()
        .map(|h| Ok(tensor::per_pixel_linear(f_hat, &h.weight, &h.bias)?.map(tensor::sigmoid)))
        .collect()
}

/// Per pixel and class: `sqrt(1/(K−1) · Σ_i (S_k − S_i)²)`, the `i = k` term
/// included (it is zero). All zeros when fewer than two maps are given.
pub fn disagreement_map<T: Real>(maps: &[Tensor<T>], k: usize) -> Result<Tensor<T>> {
    let sites = maps.len();
    if k >= sites {
        return Err(Error::Invalid(format!("site {k} out of range for {sites} maps")));
    }
    let local = &maps[k];
    if maps.iter().any(|m| m.shape() != local.shape()) {
        return Err(Error::Shape("segmentation maps differ in shape".into()));
    }
    if sites < 2 {
        return Ok(Tensor::zeros(local.shape()));
    }
    let norm = T::one() / T::c((sites - 1) as f64);
    let mut acc: Tensor<T> = Tensor::zeros(local.shape());
    for m in maps {
        for ((a, &s), &l) in acc.data_mut().iter_mut().zip(m.data()).zip(local.data()) {
            let d = l - s;
            *a += d * d;
        }
    }
    Ok(acc.map(|v: T| (v * norm).sqrt()))
}

fn planes<T: Real>(u: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let s = u.shape();
    if s.len() < 2 {
        return Err(Error::Shape(format!("map needs at least 2 dims, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    Ok((u.len() / (h * w), h, w))
}

/// Sliding max over a `size`-wide window clipped at the borders, along rows
/// (`horizontal`) or columns of one `h×w` plane.
fn window_max<T: Real>(src: &[T], h: usize, w: usize, r: usize, horizontal: bool, dst: &mut [T]) {
    for y in 0..h {
        for x in 0..w {
            let (lo, hi, fixed) = if horizontal {
                (x.saturating_sub(r), (x + r).min(w - 1), y)
            } else {
                (y.saturating_sub(r), (y + r).min(h - 1), x)
            };
            let mut m = T::neg_infinity();
            for t in lo..=hi {
                let v = if horizontal { src[fixed * w + t] } else { src[t * w + fixed] };
                if v > m {
                    m = v;
                }
            }
            dst[y * w + x] = m;
        }
    }
}

/// Keeps an element iff it is ≥ every value in its `delta×delta` window
/// (clipped at borders); everything else becomes zero. Applied per plane
/// over the two trailing dimensions.
pub fn nms2d<T: Real>(u: &Tensor<T>, delta: usize) -> Result<Tensor<T>> {
    if delta == 0 || delta.is_multiple_of(2) {
        return Err(Error::Invalid(format!("NMS window must be odd and positive, got {delta}")));
    }
    let (n, h, w) = planes(u)?;
    let r = delta / 2;
    let mut out = u.clone();
    let mut rows = vec![T::zero(); h * w];
    let mut full = vec![T::zero(); h * w];
    for p in 0..n {
        let src = &u.data()[p * h * w..(p + 1) * h * w];
        window_max(src, h, w, r, true, &mut rows);
        window_max(&rows, h, w, r, false, &mut full);
        for (o, (&v, &m)) in out.data_mut()[p * h * w..(p + 1) * h * w]
            .iter_mut()
            .zip(src.iter().zip(&full))
        {
            *o = if v >= m { v } else { T::zero() };
        }
    }
    Ok(out)
}

/// 1-D factor of the peak-normalized Gaussian: `exp(−d²/(2σ²))`, centre 1.
pub fn gaussian_kernel_1d(size: usize, sigma: f64) -> Result<Vec<f64>> {
    if size == 0 || size.is_multiple_of(2) {
        return Err(Error::Invalid(format!("Gaussian size must be odd and positive, got {size}")));
    }
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::Invalid(format!("Gaussian sigma must be positive, got {sigma}")));
    }
    let r = (size / 2) as isize;
    Ok((-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect())
}

/// Zero-padded correlation with `exp(−(dx²+dy²)/(2σ²))`, computed as two
/// separable passes.
pub fn gaussian_spread<T: Real>(u: &Tensor<T>, size: usize, sigma: f64) -> Result<Tensor<T>> {
    let k1: Vec<T> = gaussian_kernel_1d(size, sigma)?.into_iter().map(T::c).collect();
    let (n, h, w) = planes(u)?;
    let r = (size / 2) as isize;
    let mut out = Tensor::zeros(u.shape());
    let mut tmp = vec![T::zero(); h * w];
    for p in 0..n {
        let src = &u.data()[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                for (j, &kv) in k1.iter().enumerate() {
                    let xx = x as isize + j as isize - r;
                    if xx >= 0 && xx < w as isize {
                        acc += kv * src[y * w + xx as usize];
                    }
                }
                tmp[y * w + x] = acc;
            }
        }
        let dst = &mut out.data_mut()[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                for (j, &kv) in k1.iter().enumerate() {
                    let yy = y as isize + j as isize - r;
                    if yy >= 0 && yy < h as isize {
                        acc += kv * tmp[yy as usize * w + x];
                    }
                }
                dst[y * w + x] = acc;
            }
        }
    }
    Ok(out)
}

/// Parameters of the suppression-and-spread stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HcSettings {
    pub nms_delta: usize,
    pub gauss_size: usize,
    pub gauss_sigma: f64,
}

impl Default for HcSettings {
    fn default() -> Self {
        Self {
            nms_delta: DEFAULT_NMS_DELTA,
            gauss_size: DEFAULT_GAUSS_SIZE,
            gauss_sigma: DEFAULT_GAUSS_SIGMA,
        }
    }
}

/// `gauss(nms(U))`, still one channel per class.
pub fn attention_map<T: Real>(u: &Tensor<T>, settings: &HcSettings) -> Result<Tensor<T>> {
    let peaks = nms2d(u, settings.nms_delta)?;
    gaussian_spread(&peaks, settings.gauss_size, settings.gauss_sigma)
}

/// `f̂* = a ⊗ f̂ + f̂`, where `a` is the class-mean of `attention`
/// (`B×N×H×W`) broadcast over the feature channels. The attention is a
/// constant on the tape.
pub fn calibrate<T: Real>(tape: &mut Tape<T>, f_hat: Var, attention: &Tensor<T>) -> Result<Var> {
    let (b, _, h, w) = tape.value(f_hat).dims4()?;
    let (ab, _, ah, aw) = attention.dims4()?;
    if (ab, ah, aw) != (b, h, w) {
        return Err(Error::Shape(format!(
            "attention {:?} does not match feature {:?}",
            attention.shape(),
            tape.value(f_hat).shape()
        )));
    }
    let a = tape.constant(attention.clone());
    let a = tape.channel_mean(a)?;
    let gated = tape.mul(f_hat, a)?;
    tape.add(gated, f_hat)
}
