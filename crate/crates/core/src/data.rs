//! Synthetic multi-site segmentation benchmark and a directory loader.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::DynamicImage;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Real, Tensor};

pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeFamily {
    Ellipse,
    Blob,
    Polygon,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 3] = [ShapeFamily::Ellipse, ShapeFamily::Blob, ShapeFamily::Polygon];

    pub fn as_str(self) -> &'static str {
        match self {
            ShapeFamily::Ellipse => "ellipse",
            ShapeFamily::Blob => "blob",
            ShapeFamily::Polygon => "polygon",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Invalid(format!("unknown split '{s}'"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Acquisition style of one synthetic site.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteStyle {
    pub offset: f64,
    pub gain: f64,
    pub noise_std: f64,
    pub blur_radius: usize,
    pub texture_freq: f64,
    pub family: ShapeFamily,
    /// Foreground fraction range of the outer class.
    pub size_range: (f64, f64),
}

impl SiteStyle {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.size_range;
        if !(lo > 0.0 && lo <= hi && hi < 0.9) {
            return Err(Error::Invalid(format!("degenerate size range {lo}..{hi}")));
        }
        if self.gain.is_nan() || self.gain <= 0.0 || self.noise_std.is_nan() || self.noise_std < 0.0 || !self.offset.is_finite() {
            return Err(Error::Invalid("degenerate intensity style".into()));
        }
        Ok(())
    }

    /// Styles of all sites of one benchmark. Intensity offsets are spread
    /// over the full range (in a seed-dependent order) so neighbouring
    /// sites always differ.
    pub fn benchmark(seed: u64, sites: usize) -> Vec<SiteStyle> {
        let mut order: Vec<usize> = (0..sites).collect();
        order.shuffle(&mut seed::rng(&[seed, 0x5717e]));
        (0..sites)
            .map(|k| {
                let mut rng = seed::rng(&[seed, 0x5717e, k as u64 + 1]);
                let base = if sites > 1 {
                    -0.25 + 0.5 * order[k] as f64 / (sites - 1) as f64
                } else {
                    0.0
                };
                let lo = rng.gen_range(0.06..0.12);
                SiteStyle {
                    offset: (base + rng.gen_range(-0.05..0.05)).clamp(-0.3, 0.3),
                    gain: rng.gen_range(0.6..1.6),
                    noise_std: rng.gen_range(0.0..0.15),
                    blur_radius: rng.gen_range(0..=2),
                    texture_freq: rng.gen_range(0.15..0.6),
                    family: ShapeFamily::ALL[(order[k] + k) % 3],
                    size_range: (lo, lo + rng.gen_range(0.1..0.2)),
                }
            })
            .collect()
    }
}

/// One image with its per-class masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `1×H×W`, values in `[0,1]`.
    pub image: Tensor<f64>,
    /// `N×H×W`, values in `{0,1}`; class `c+1` is nested inside class `c`.
    pub mask: Tensor<f64>,
    pub site: usize,
    pub split: Split,
}

impl Sample {
    pub fn size(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s[1], s[2])
    }

    pub fn classes(&self) -> usize {
        self.mask.shape()[0]
    }
}

/// Train and test samples of one site.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SiteData {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl SiteData {
    pub fn from_samples(samples: Vec<Sample>) -> Self {
        let (train, test) = samples.into_iter().partition(|s| s.split == Split::Train);
        Self { train, test }
    }

    pub fn all(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().chain(&self.test)
    }
}

/// `B×1×H×W` images and `B×N×H×W` masks of the selected samples.
pub fn batch<T: Real>(samples: &[Sample], idx: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = samples
        .get(*idx.first().ok_or_else(|| Error::EmptyDataset("empty batch".into()))?)
        .ok_or_else(|| Error::Invalid("batch index out of range".into()))?;
    let (h, w) = first.size();
    let n = first.classes();
    let mut img = Vec::with_capacity(idx.len() * h * w);
    let mut msk = Vec::with_capacity(idx.len() * n * h * w);
    for &i in idx {
        let s = samples.get(i).ok_or_else(|| Error::Invalid("batch index out of range".into()))?;
        if s.image.shape() != first.image.shape() || s.mask.shape() != first.mask.shape() {
            return Err(Error::Shape("samples in one batch differ in size".into()));
        }
        img.extend(s.image.data().iter().map(|&v| T::c(v)));
        msk.extend(s.mask.data().iter().map(|&v| T::c(v)));
    }
    Ok((
        Tensor::new(&[idx.len(), 1, h, w], img)?,
        Tensor::new(&[idx.len(), n, h, w], msk)?,
    ))
}

/// Radius of the outline at angle `a` for unit mean radius.
struct Outline {
    family: ShapeFamily,
    aspect: f64,
    rot: f64,
    harmonics: Vec<(f64, f64)>,
    vertices: Vec<(f64, f64)>,
}

impl Outline {
    fn random(family: ShapeFamily, rng: &mut ChaCha8Rng) -> Self {
        let rot = rng.gen_range(0.0..PI);
        let aspect = rng.gen_range(0.6..1.0);
        let harmonics = (2..5).map(|_| (rng.gen_range(0.0..0.18), rng.gen_range(0.0..2.0 * PI))).collect();
        let n = rng.gen_range(5..9);
        let mut angles: Vec<f64> = (0..n)
            .map(|i| 2.0 * PI * (i as f64 + rng.gen_range(-0.3..0.3)) / n as f64)
            .collect();
        angles.sort_by(f64::total_cmp);
        let vertices = angles.into_iter().map(|a| (a, rng.gen_range(0.75..1.2))).collect();
        Self {
            family,
            aspect,
            rot,
            harmonics,
            vertices,
        }
    }

    /// Normalized radius (relative to the nominal radius) at polar angle `a`.
    fn radius(&self, a: f64) -> f64 {
        match self.family {
            ShapeFamily::Ellipse => {
                let t = a - self.rot;
                let (c, s) = (t.cos(), t.sin() / self.aspect);
                1.0 / (c * c + s * s).sqrt()
            }
            ShapeFamily::Blob => {
                1.0 + self
                    .harmonics
                    .iter()
                    .enumerate()
                    .map(|(i, &(amp, ph))| amp * ((i as f64 + 2.0) * a + ph).cos())
                    .sum::<f64>()
            }
            ShapeFamily::Polygon => {
                let n = self.vertices.len();
                let a = a.rem_euclid(2.0 * PI);
                for i in 0..n {
                    let (a0, r0) = self.vertices[i];
                    let (mut a1, r1) = self.vertices[(i + 1) % n];
                    let a0 = a0.rem_euclid(2.0 * PI);
                    a1 = a1.rem_euclid(2.0 * PI);
                    if a1 <= a0 {
                        a1 += 2.0 * PI;
                    }
                    let aa = if a < a0 { a + 2.0 * PI } else { a };
                    if aa >= a0 && aa <= a1 {
                        let (x0, y0) = (r0 * a0.cos(), r0 * a0.sin());
                        let (x1, y1) = (r1 * a1.cos(), r1 * a1.sin());
                        let (dx, dy) = (a.cos(), a.sin());
                        let (ex, ey) = (x1 - x0, y1 - y0);
                        let den = dx * ey - dy * ex;
                        if den.abs() < 1e-12 {
                            return r0.min(r1);
                        }
                        return (x0 * ey - y0 * ex) / den;
                    }
                }
                1.0
            }
        }
    }
}

fn render_mask(h: usize, w: usize, cy: f64, cx: f64, r: f64, outline: &Outline) -> Vec<bool> {
    let mut m = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let d = (dy * dy + dx * dx).sqrt();
            m[y * w + x] = d <= r * outline.radius(dy.atan2(dx));
        }
    }
    m
}

fn box_blur(img: &mut [f64], h: usize, w: usize, r: usize) {
    if r == 0 {
        return;
    }
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (lo, hi) = (x.saturating_sub(r), (x + r).min(w - 1));
            tmp[y * w + x] = img[y * w + lo..=y * w + hi].iter().sum::<f64>() / (hi - lo + 1) as f64;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let (lo, hi) = (y.saturating_sub(r), (y + r).min(h - 1));
            img[y * w + x] = (lo..=hi).map(|t| tmp[t * w + x]).sum::<f64>() / (hi - lo + 1) as f64;
        }
    }
}

/// Rounds to the 16-bit grid used by image files.
pub fn quantize16(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 65535.0).round() / 65535.0
}

fn render_sample(style: &SiteStyle, h: usize, w: usize, classes: usize, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Vec<bool>)> {
    let area = (h * w) as f64;
    let (lo, hi) = style.size_range;
    for _ in 0..64 {
        let outline = Outline::random(style.family, rng);
        let frac = rng.gen_range(lo..=hi);
        let nominal = (frac * area / PI).sqrt();
        let r = nominal * 0.9;
        let margin = (r * 1.3).min(h.min(w) as f64 / 2.0);
        let cy = rng.gen_range(margin..=(h as f64 - margin).max(margin));
        let cx = rng.gen_range(margin..=(w as f64 - margin).max(margin));
        let outer = render_mask(h, w, cy, cx, r, &outline);
        let got = outer.iter().filter(|&&b| b).count() as f64 / area;
        if got < lo || got > hi {
            continue;
        }
        let mut masks = outer.clone();
        let mut inside = outer;
        for c in 1..classes {
            let scale = 1.0 - 0.35 * c as f64 / classes as f64;
            let inner: Vec<bool> = render_mask(h, w, cy, cx, r * scale, &outline)
                .into_iter()
                .zip(&inside)
                .map(|(a, &b)| a && b)
                .collect();
            masks.extend_from_slice(&inner);
            inside = inner;
        }
        let mut img = vec![0.0; h * w];
        let (p1, p2) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
        let f = style.texture_freq;
        for y in 0..h {
            for x in 0..w {
                let tex = 0.08 * ((f * x as f64 + p1).sin() * (f * 0.7 * y as f64 + p2).cos());
                let mut level = 0.3;
                for c in 0..classes {
                    if masks[c * h * w + y * w + x] {
                        level += 0.4 / classes as f64;
                    }
                }
                img[y * w + x] = level + tex;
            }
        }
        box_blur(&mut img, h, w, style.blur_radius);
        let noise = Normal::new(0.0, style.noise_std.max(0.0)).map_err(|e| Error::Invalid(e.to_string()))?;
        for v in img.iter_mut() {
            let n = if style.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
            *v = quantize16(style.offset + 0.5 + style.gain * (*v - 0.5) + n);
        }
        return Ok((img, masks));
    }
    Err(Error::Invalid(format!(
        "style {:?} cannot place a shape in a {h}x{w} image",
        style.family.as_str()
    )))
}

/// `n` samples of `site`, the first 80% tagged train and the rest test.
pub fn generate_site(style: &SiteStyle, site: usize, n: usize, size: (usize, usize), classes: usize, seed: u64) -> Result<Vec<Sample>> {
    style.validate()?;
    if n == 0 {
        return Err(Error::Invalid("need at least one sample".into()));
    }
    if classes == 0 {
        return Err(Error::Invalid("need at least one class".into()));
    }
    let (h, w) = size;
    let n_train = (n as f64 * TRAIN_FRACTION).round() as usize;
    (0..n)
        .map(|i| {
            let mut rng = seed::rng(&[seed, site as u64, i as u64]);
            let (img, bits) = render_sample(style, h, w, classes, &mut rng)?;
            Ok(Sample {
                image: Tensor::new(&[1, h, w], img)?,
                mask: Tensor::new(&[classes, h, w], bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())?,
                site,
                split: if i < n_train { Split::Train } else { Split::Test },
            })
        })
        .collect()
}

/// Shape of a synthetic benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSpec {
    pub sites: usize,
    pub samples_per_site: usize,
    pub size: (usize, usize),
    pub classes: usize,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            sites: 4,
            samples_per_site: 150,
            size: (64, 64),
            classes: 1,
            seed: 0,
        }
    }
}

pub fn benchmark(spec: &BenchmarkSpec) -> Result<Vec<SiteData>> {
    SiteStyle::benchmark(spec.seed, spec.sites)
        .iter()
        .enumerate()
        .map(|(k, style)| {
            generate_site(style, k, spec.samples_per_site, spec.size, spec.classes, spec.seed).map(SiteData::from_samples)
        })
        .collect()
}


fn read_gray(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = image::open(path).map_err(|e| Error::file(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
        other => other.into_luma16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
    };
    Ok((h, w, data))
}

/// One manifest record: `site split image mask`.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub site: usize,
    pub split: Split,
    pub image: PathBuf,
    pub mask: PathBuf,
}

/// Parses manifest text; relative paths resolve against `base`. Blank lines
/// and `#` comments are skipped.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 {
            return Err(Error::Config(format!("manifest line {}: expected 4 fields", no + 1)));
        }
        let site = parts[0]
            .parse()
            .map_err(|_| Error::Config(format!("manifest line {}: bad site '{}'", no + 1, parts[0])))?;
        out.push(ManifestEntry {
            site,
            split: Split::parse(parts[1]).map_err(|e| Error::Config(format!("manifest line {}: {e}", no + 1)))?,
            image: base.join(parts[2]),
            mask: base.join(parts[3]),
        });
    }
    Ok(out)
}

/// Loads every manifest record. Images are scaled to `[0,1]`; class `c` of
/// an `N`-class mask is foreground where the scaled mask value is at least
/// `(c + 0.5)/N`, so a one-class mask is binarized at 0.5.
pub fn load_directory(manifest: &Path, classes: usize) -> Result<Vec<Sample>> {
    if classes == 0 {
        return Err(Error::Invalid("need at least one class".into()));
    }
    let text = fs::read_to_string(manifest).map_err(|e| Error::file(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for e in parse_manifest(&text, base)? {
        let (h, w, img) = read_gray(&e.image)?;
        let (mh, mw, m) = read_gray(&e.mask)?;
        if (mh, mw) != (h, w) {
            return Err(Error::file(&e.mask, format!("mask is {mw}x{mh}, image is {w}x{h}")));
        }
        let mut mask = Vec::with_capacity(classes * h * w);
        for c in 0..classes {
            let th = (c as f64 + 0.5) / classes as f64;
            mask.extend(m.iter().map(|&v| if v >= th { 1.0 } else { 0.0 }));
        }
        out.push(Sample {
            image: Tensor::new(&[1, h, w], img)?,
            mask: Tensor::new(&[classes, h, w], mask)?,
            site: e.site,
            split: e.split,
        });
    }
    Ok(out)
}

/// Groups samples by site index into `sites` entries.
pub fn by_site(samples: Vec<Sample>, sites: usize) -> Result<Vec<SiteData>> {
    let mut out = vec![SiteData::default(); sites];
    for s in samples {
        let k = s.site;
        let slot = out
            .get_mut(k)
            .ok_or_else(|| Error::Invalid(format!("sample of site {k} but only {sites} sites")))?;
        match s.split {
            Split::Train => slot.train.push(s),
            Split::Test => slot.test.push(s),
        }
    }
    Ok(out)
}

/// Binary graymap (`P5`); samples above 255 are written as big-endian pairs.
pub fn write_pgm(path: &Path, w: usize, h: usize, maxval: u16, samples: &[u16]) -> Result<()> {
    let mut out = format!("P5\n{w} {h}\n{maxval}\n").into_bytes();
    for &v in samples {
        if maxval > 255 {
            out.extend_from_slice(&v.to_be_bytes());
        } else {
            out.push(v as u8);
        }
    }
    fs::write(path, out).map_err(|e| Error::file(path, e))
}

/// Writes every sample as a 16-bit image and an 8-bit mask plus a manifest
/// at `dir/manifest.txt`; returns the manifest path.
pub fn write_directory(dir: &Path, sites: &[SiteData]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let mut manifest = String::new();
    for (k, site) in sites.iter().enumerate() {
        for (i, s) in site.all().enumerate() {
            let (h, w) = s.size();
            let img_name = format!("site{k}_{i:04}_image.pgm");
            let mask_name = format!("site{k}_{i:04}_mask.pgm");
            let img: Vec<u16> = s.image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
            let n = s.classes();
            let levels: Vec<u16> = (0..h * w)
                .map(|p| {
                    let depth = (0..n).filter(|&c| s.mask.data()[c * h * w + p] >= 0.5).count();
                    (depth as f64 / n as f64 * 255.0).round() as u16
                })
                .collect();
            write_pgm(&dir.join(&img_name), w, h, 65535, &img)?;
            write_pgm(&dir.join(&mask_name), w, h, 255, &levels)?;
            manifest.push_str(&format!("{k} {} {img_name} {mask_name}\n", s.split));
        }
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| Error::file(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean(t: &Tensor<f64>) -> f64 {
        t.data().iter().sum::<f64>() / t.len() as f64
    }

    #[test]
    fn generation_is_deterministic() {
        let st = &SiteStyle::benchmark(3, 4)[1];
        let a = generate_site(st, 1, 5, (32, 32), 1, 9).unwrap();
        let b = generate_site(st, 1, 5, (32, 32), 1, 9).unwrap();
        assert_eq!(a, b);
        let c = generate_site(st, 1, 5, (32, 32), 1, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn foreground_fraction_in_range_and_split() {
        for st in SiteStyle::benchmark(1, 4) {
            let s = generate_site(&st, 0, 10, (64, 64), 1, 2).unwrap();
            assert_eq!(s.iter().filter(|x| x.split == Split::Train).count(), 8);
            for x in &s {
                let f = mean(&x.mask);
                assert!(f >= st.size_range.0 && f <= st.size_range.1, "{f} {:?}", st.size_range);
                assert!(x.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn nested_classes() {
        let st = &SiteStyle::benchmark(2, 2)[0];
        for s in generate_site(st, 0, 4, (48, 48), 2, 5).unwrap() {
            let (outer, inner) = s.mask.data().split_at(48 * 48);
            assert!(inner.iter().zip(outer).all(|(i, o)| *i <= *o));
            assert!(inner.iter().any(|&v| v > 0.0));
        }
    }

    #[test]
    fn extreme_styles_differ_in_intensity() {
        let mut lo = SiteStyle::benchmark(0, 2)[0].clone();
        let mut hi = lo.clone();
        lo.offset = -0.3;
        hi.offset = 0.3;
        let a = generate_site(&lo, 0, 10, (32, 32), 1, 1).unwrap();
        let b = generate_site(&hi, 1, 10, (32, 32), 1, 1).unwrap();
        let ma = a.iter().map(|s| mean(&s.image)).sum::<f64>() / 10.0;
        let mb = b.iter().map(|s| mean(&s.image)).sum::<f64>() / 10.0;
        assert!(mb - ma >= 0.2);
    }

    #[test]
    fn benchmark_is_heterogeneous() {
        for seed in 0..5 {
            let sites = benchmark(&BenchmarkSpec {
                samples_per_site: 10,
                size: (32, 32),
                seed,
                ..Default::default()
            })
            .unwrap();
            let means: Vec<f64> = sites
                .iter()
                .map(|s| s.train.iter().map(|x| mean(&x.image)).sum::<f64>() / s.train.len() as f64)
                .collect();
            let gap = means.iter().cloned().fold(f64::MIN, f64::max) - means.iter().cloned().fold(f64::MAX, f64::min);
            assert!(gap >= 0.1, "seed {seed}: {means:?}");
        }
    }

    #[test]
    fn degenerate_style_rejected() {
        let mut st = SiteStyle::benchmark(0, 1)[0].clone();
        st.size_range = (0.0, 0.0);
        assert!(generate_site(&st, 0, 1, (16, 16), 1, 0).is_err());
    }

    #[test]
    fn manifest_parsing() {
        let m = parse_manifest("# c\n0 train a.pgm b.pgm\n\n1 test c.pgm d.pgm\n", Path::new("/x")).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[1].image, PathBuf::from("/x/c.pgm"));
        assert!(parse_manifest("0 val a b\n", Path::new(".")).is_err());
        assert!(parse_manifest("0 train a\n", Path::new(".")).is_err());
    }
}
