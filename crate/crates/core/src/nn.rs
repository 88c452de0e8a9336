//! Parameter registry and the U-shaped encoder-decoder built on the tape.

use std::fmt;

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const NORM_EPS: f64 = 1e-5;

/// Which part of the model a parameter belongs to. Determines whether the
/// server averages it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    BaseBody,
    PcsGenerator,
    Head,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::BaseBody => "base-body",
            Group::PcsGenerator => "pcs-generator",
            Group::Head => "head",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "base-body" => Ok(Group::BaseBody),
            "pcs-generator" => Ok(Group::PcsGenerator),
            "head" => Ok(Group::Head),
            other => Err(Error::Invalid(format!("unknown parameter group {other:?}"))),
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub group: Group,
    pub value: Tensor<T>,
}

/// Named, ordered parameter tensors, each tagged with exactly one group.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    params: IndexMap<String, Param<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, group: Group, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name {name:?}")));
        }
        self.params.insert(name, Param { group, value });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Invalid(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Copy of the parameters whose group is in `groups`, order preserved.
    pub fn subset(&self, groups: &[Group]) -> Self {
        Self {
            params: self
                .params
                .iter()
                .filter(|(_, p)| groups.contains(&p.group))
                .map(|(k, p)| (k.clone(), p.clone()))
                .collect(),
        }
    }

    /// Overwrites every parameter of `self` that also appears in `other`.
    pub fn overwrite_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        for (name, src) in other.iter() {
            let dst = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::Invalid(format!("unknown parameter {name:?}")))?;
            if dst.value.shape() != src.value.shape() || dst.group != src.group {
                return Err(Error::Shape(format!("parameter {name:?} is not aligned")));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }

    /// Registers every parameter as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), tape.param(p.value.clone())))
                .collect(),
        }
    }

    /// SHA-256 over names, groups, shapes and little-endian values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (name, p) in &self.params {
            h.update(name.as_bytes());
            h.update(p.group.as_str().as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            buf.clear();
            for v in p.value.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        hex(&h.finalize())
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            group: p.group,
                            value: p.value.cast(),
                        },
                    )
                })
                .collect(),
        }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Tape handles for a bound [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("parameter {name:?} not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Instance normalization with a learned per-channel affine.
pub fn instance_norm<T: Real>(tape: &mut Tape<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let gamma = p.get(&format!("{prefix}.gamma"))?;
    let beta = p.get(&format!("{prefix}.beta"))?;
    tape.instance_norm(x, gamma, beta, NORM_EPS)
}

/// 2× max-pool.
pub fn downsample<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    tape.max_pool2(x)
}

/// 2× nearest-neighbour.
pub fn upsample<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    tape.upsample2(x)
}

pub fn per_pixel_linear<T: Real>(tape: &mut Tape<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    tape.per_pixel_linear(x, w, b)
}

pub fn fully_connected<T: Real>(tape: &mut Tape<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    tape.linear(x, w, Some(b))
}

/// conv3×3 → instance norm → ReLU, twice.
pub fn conv_block<T: Real>(tape: &mut Tape<T>, p: &Bound, prefix: &str, mut x: Var) -> Result<Var> {
    for j in 0..2 {
        let w = p.get(&format!("{prefix}.conv{j}.weight"))?;
        let b = p.get(&format!("{prefix}.conv{j}.bias"))?;
        x = tape.conv2d(x, w, Some(b), 1, 1)?;
        x = instance_norm(tape, p, &format!("{prefix}.norm{j}"), x)?;
        x = tape.relu(x);
    }
    Ok(x)
}

/// Shape of the segmentation network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelProfile {
    pub in_channels: usize,
    /// Channel width of each encoding stage; the last entry is the deepest.
    pub widths: Vec<usize>,
    pub classes: usize,
    /// Number of sites, the one-hot embedding length.
    pub sites: usize,
    pub pcs: bool,
    /// Whether the calibrated second head exists.
    pub calibrated_head: bool,
}

impl ModelProfile {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Invalid("model needs at least two stages".into()));
        }
        if self.widths.contains(&0) || self.in_channels == 0 || self.classes == 0 || self.sites == 0 {
            return Err(Error::Invalid("model dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    pub fn deepest_width(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    /// Spatial sizes must survive `stages − 1` halvings.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let f = 1 << (self.stages() - 1);
        if !h.is_multiple_of(f) || !w.is_multiple_of(f) || h / f < 2 || w / f < 2 {
            return Err(Error::Shape(format!(
                "input {h}×{w} must be a multiple of {f} with at least 2×2 at the deepest stage"
            )));
        }
        Ok(())
    }
}

fn normal<T: Real, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::c(dist.sample(rng))).collect()).expect("shape")
}

fn add_conv<T: Real, R: Rng>(ps: &mut ParamSet<T>, rng: &mut R, prefix: &str, cin: usize, cout: usize) -> Result<()> {
    for j in 0..2 {
        let cin_j = if j == 0 { cin } else { cout };
        let std = (2.0 / (cin_j * 9) as f64).sqrt();
        ps.insert(format!("{prefix}.conv{j}.weight"), Group::BaseBody, normal(rng, &[cout, cin_j, 3, 3], std))?;
        ps.insert(format!("{prefix}.conv{j}.bias"), Group::BaseBody, Tensor::zeros(&[cout]))?;
        ps.insert(format!("{prefix}.norm{j}.gamma"), Group::BaseBody, Tensor::ones(&[cout]))?;
        ps.insert(format!("{prefix}.norm{j}.beta"), Group::BaseBody, Tensor::zeros(&[cout]))?;
    }
    Ok(())
}

fn add_fc<T: Real, R: Rng>(ps: &mut ParamSet<T>, rng: &mut R, prefix: &str, group: Group, cin: usize, cout: usize) -> Result<()> {
    let std = (1.0 / cin as f64).sqrt();
    ps.insert(format!("{prefix}.weight"), group, normal(rng, &[cin, cout], std))?;
    ps.insert(format!("{prefix}.bias"), group, Tensor::zeros(&[cout]))?;
    Ok(())
}

pub const COARSE_HEAD: &str = "head.coarse";
pub const CALIB_HEAD: &str = "head.calib";

/// Fresh parameters for `profile`.
pub fn init_params<T: Real, R: Rng>(profile: &ModelProfile, rng: &mut R) -> Result<ParamSet<T>> {
    profile.validate()?;
    let mut ps = ParamSet::new();
    let w = &profile.widths;
    let mut cin = profile.in_channels;
    for (i, &c) in w.iter().enumerate() {
        add_conv(&mut ps, rng, &format!("enc{i}"), cin, c)?;
        cin = c;
    }
    for i in (0..w.len() - 1).rev() {
        add_conv(&mut ps, rng, &format!("dec{i}"), w[i + 1] + w[i], w[i])?;
    }
    if profile.pcs {
        let c = profile.deepest_width();
        add_fc(&mut ps, rng, "pcs.ext1", Group::PcsGenerator, profile.sites, c)?;
        ps.insert("pcs.ext_norm.gamma", Group::PcsGenerator, Tensor::ones(&[c]))?;
        ps.insert("pcs.ext_norm.beta", Group::PcsGenerator, Tensor::zeros(&[c]))?;
        add_fc(&mut ps, rng, "pcs.ext2", Group::PcsGenerator, c, c)?;
        add_fc(&mut ps, rng, "pcs.fuse", Group::PcsGenerator, 2 * c, c)?;
    }
    add_fc(&mut ps, rng, COARSE_HEAD, Group::Head, w[0], profile.classes)?;
    if profile.calibrated_head {
        add_fc(&mut ps, rng, CALIB_HEAD, Group::Head, w[0], profile.classes)?;
    }
    Ok(ps)
}

/// Encoder features: one skip per stage except the deepest, then the
/// deepest-stage feature.
pub fn encode<T: Real>(tape: &mut Tape<T>, p: &Bound, stages: usize, x: Var) -> Result<(Vec<Var>, Var)> {
    let mut skips = Vec::with_capacity(stages - 1);
    let mut h = x;
    for i in 0..stages {
        if i > 0 {
            h = downsample(tape, h)?;
        }
        h = conv_block(tape, p, &format!("enc{i}"), h)?;
        if i + 1 < stages {
            skips.push(h);
        }
    }
    Ok((skips, h))
}

/// Decoder with skip concatenation; returns the full-resolution feature.
pub fn decode<T: Real>(tape: &mut Tape<T>, p: &Bound, deep: Var, skips: &[Var]) -> Result<Var> {
    let mut h = deep;
    for i in (0..skips.len()).rev() {
        let up = upsample(tape, h)?;
        let cat = tape.concat(&[up, skips[i]])?;
        h = conv_block(tape, p, &format!("dec{i}"), cat)?;
    }
    Ok(h)
}
