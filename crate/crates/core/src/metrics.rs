//! Region and boundary metrics on binary masks.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Row-major binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize, bits: Vec<bool>) -> Result<Self> {
        if h == 0 || w == 0 || bits.len() != h * w {
            return Err(Error::Shape(format!("mask {h}x{w} with {} entries", bits.len())));
        }
        Ok(Self { h, w, bits })
    }

    pub fn empty(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            bits: vec![false; h * w],
        }
    }

    /// `v ≥ threshold` is foreground.
    pub fn from_probs<T: Real>(h: usize, w: usize, probs: &[T], threshold: f64) -> Result<Self> {
        Self::new(h, w, probs.iter().map(|p| p.f64() >= threshold).collect())
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.w + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Foreground pixels with a 4-neighbour that is background or outside
    /// the image.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.h {
            for x in 0..self.w {
                if !self.get(y, x) {
                    continue;
                }
                let edge = y == 0
                    || x == 0
                    || y + 1 == self.h
                    || x + 1 == self.w
                    || !self.get(y - 1, x)
                    || !self.get(y + 1, x)
                    || !self.get(y, x - 1)
                    || !self.get(y, x + 1);
                if edge {
                    out.push((y, x));
                }
            }
        }
        out
    }

    fn check_same(&self, other: &Mask) -> Result<()> {
        if (self.h, self.w) != (other.h, other.w) {
            return Err(Error::Shape(format!(
                "masks {}x{} and {}x{}",
                self.h, self.w, other.h, other.w
            )));
        }
        Ok(())
    }
}

/// `|pred ∩ gt| / |pred ∪ gt|`, 1 when the union is empty.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    pred.check_same(gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.bits.iter().zip(&gt.bits) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

const INF: f64 = 1e20;

/// 1-D squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
            } else if s <= z[k] {
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, dq) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let diff = q as f64 - p as f64;
        *dq = diff * diff + f[p];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest seed.
fn squared_distance_map(h: usize, w: usize, seeds: &[(usize, usize)]) -> Vec<f64> {
    let mut g = vec![INF; h * w];
    for &(y, x) in seeds {
        g[y * w + x] = 0.0;
    }
    let n = h.max(w);
    let (mut f, mut d) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..w {
        for y in 0..h {
            f[y] = g[y * w + x];
        }
        edt_1d(&f[..h], &mut d[..h], &mut v, &mut z);
        for y in 0..h {
            g[y * w + x] = d[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&g[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut d[..w], &mut v, &mut z);
        g[y * w..(y + 1) * w].copy_from_slice(&d[..w]);
    }
    g
}

fn mean_nearest(from: &[(usize, usize)], dist2: &[f64], w: usize) -> f64 {
    from.iter().map(|&(y, x)| dist2[y * w + x].sqrt()).sum::<f64>() / from.len() as f64
}

/// Average symmetric surface distance in pixels. Both masks empty gives 0;
/// exactly one empty gives the image diagonal.
pub fn assd(pred: &Mask, gt: &Mask) -> Result<f64> {
    pred.check_same(gt)?;
    let (bp, bg) = (pred.boundary(), gt.boundary());
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(((pred.h * pred.h + pred.w * pred.w) as f64).sqrt()),
        _ => {}
    }
    let to_gt = squared_distance_map(gt.h, gt.w, &bg);
    let to_pred = squared_distance_map(pred.h, pred.w, &bp);
    Ok(0.5 * (mean_nearest(&bp, &to_gt, gt.w) + mean_nearest(&bg, &to_pred, pred.w)))
}

/// Per-class and averaged scores of one site's test set.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteReport {
    pub iou: Vec<f64>,
    pub assd: Vec<f64>,
    pub samples: usize,
    pub mean_iou: f64,
    pub mean_assd: f64,
}

/// Accumulates per-sample, per-class metrics.
#[derive(Debug, Clone)]
pub struct ReportBuilder {
    iou: Vec<f64>,
    assd: Vec<f64>,
    samples: usize,
}

impl ReportBuilder {
    pub fn new(classes: usize) -> Self {
        Self {
            iou: vec![0.0; classes],
            assd: vec![0.0; classes],
            samples: 0,
        }
    }

    /// `probs` and `gt` are `N×H×W` (or `1×N×H×W`) for one sample.
    pub fn add<T: Real>(&mut self, probs: &Tensor<T>, gt: &Tensor<T>, threshold: f64) -> Result<()> {
        if probs.shape() != gt.shape() {
            return Err(Error::Shape(format!("prediction {:?} vs mask {:?}", probs.shape(), gt.shape())));
        }
        let s = probs.shape();
        if s.len() < 2 {
            return Err(Error::Shape(format!("prediction {s:?} is not a map")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let classes = probs.len() / (h * w);
        if classes != self.iou.len() {
            return Err(Error::Shape(format!("{classes} classes, report expects {}", self.iou.len())));
        }
        for c in 0..classes {
            let r = c * h * w..(c + 1) * h * w;
            let p = Mask::from_probs(h, w, &probs.data()[r.clone()], threshold)?;
            let g = Mask::from_probs(h, w, &gt.data()[r], 0.5)?;
            self.iou[c] += iou(&p, &g)?;
            self.assd[c] += assd(&p, &g)?;
        }
        self.samples += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<SiteReport> {
        if self.samples == 0 {
            return Err(Error::EmptyDataset("no test samples to evaluate".into()));
        }
        let n = self.samples as f64;
        let iou: Vec<f64> = self.iou.iter().map(|v| v / n).collect();
        let assd: Vec<f64> = self.assd.iter().map(|v| v / n).collect();
        let mean_iou = iou.iter().sum::<f64>() / iou.len() as f64;
        let mean_assd = assd.iter().sum::<f64>() / assd.len() as f64;
        Ok(SiteReport {
            iou,
            assd,
            samples: self.samples,
            mean_iou,
            mean_assd,
        })
    }
}
