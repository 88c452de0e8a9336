//! Checkpoints: a text header naming every tensor with its shape and byte
//! range, then the little-endian payload.
//!
//! ```text
//! lcfed-checkpoint 1
//! digest <config digest>
//! round <completed rounds>
//! dtype f32|f64
//! config <n>
//! <n lines of config text>
//! adam <site> <step>
//! tensor <name> <d0,d1,..> <offset> <bytes>
//! end
//! <payload>
//! ```
//!
//! Tensor names are `global/<group>/<param>`, `site<k>/param/<group>/<param>`,
//! `site<k>/m/<param>` and `site<k>/v/<param>`. Sampling streams are derived
//! from the master seed, site and round, so no generator state is stored.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::config::{Dtype, ExperimentConfig};
use crate::error::{Error, Result};
use crate::federation::{FederationState, SiteState};
use crate::model;
use crate::nn::{Group, ParamSet};
use crate::optim::{Adam, Moments};
use crate::tensor::{Real, Tensor};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "lcfed-checkpoint";

fn dtype_of<T: Real>() -> &'static str {
    T::DTYPE
}

struct Writer {
    header: Vec<String>,
    payload: Vec<u8>,
}

impl Writer {
    fn tensor<T: Real>(&mut self, name: &str, t: &Tensor<T>) {
        let offset = self.payload.len();
        for &v in t.data() {
            v.write_le(&mut self.payload);
        }
        let dims = t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
        self.header
            .push(format!("tensor {name} {dims} {offset} {}", self.payload.len() - offset));
    }
}

/// Serializes `state` for `cfg`.
pub fn encode<T: Real>(cfg: &ExperimentConfig, state: &FederationState<T>) -> Vec<u8> {
    let cfg_text = cfg.to_text();
    let mut w = Writer {
        header: vec![
            format!("{MAGIC} {FORMAT_VERSION}"),
            format!("digest {}", cfg.digest()),
            format!("round {}", state.round),
            format!("dtype {}", dtype_of::<T>()),
            format!("config {}", cfg_text.lines().count()),
        ],
        payload: Vec::new(),
    };
    w.header.extend(cfg_text.lines().map(str::to_string));
    for (name, p) in state.global.iter() {
        w.tensor(&format!("global/{}/{name}", p.group), &p.value);
    }
    for (k, s) in state.sites.iter().enumerate() {
        w.header.push(format!("adam {k} {}", s.opt.step));
        for (name, p) in s.params.iter() {
            w.tensor(&format!("site{k}/param/{}/{name}", p.group), &p.value);
        }
        for (name, m) in &s.opt.moments {
            w.tensor(&format!("site{k}/m/{name}"), &m.m);
            w.tensor(&format!("site{k}/v/{name}"), &m.v);
        }
    }
    w.header.push("end".into());
    let mut out = w.header.join("\n").into_bytes();
    out.push(b'\n');
    out.extend(w.payload);
    out
}

/// Parsed header plus the raw payload.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub digest: String,
    pub round: u64,
    pub dtype: Dtype,
    pub config: ExperimentConfig,
    adam_steps: IndexMap<usize, u64>,
    tensors: Vec<(String, Vec<usize>, usize, usize)>,
    payload: Vec<u8>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

type MomentPair<T> = (Option<Tensor<T>>, Option<Tensor<T>>);

impl Checkpoint {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut next_line = || -> Result<String> {
            let rest = &bytes[pos.min(bytes.len())..];
            let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header"))?;
            let line = std::str::from_utf8(&rest[..nl]).map_err(|_| bad("header is not text"))?.to_string();
            pos += nl + 1;
            Ok(line)
        };
        let magic = next_line()?;
        let version = magic
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| bad("not a checkpoint file"))?;
        if version != FORMAT_VERSION.to_string() {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let field = |line: String, key: &str| -> Result<String> {
            line.strip_prefix(key)
                .map(|s| s.trim().to_string())
                .ok_or_else(|| bad(format!("expected '{key}' line, got '{line}'")))
        };
        let digest = field(next_line()?, "digest")?;
        let round = field(next_line()?, "round")?.parse().map_err(|_| bad("bad round"))?;
        let dtype = match field(next_line()?, "dtype")?.as_str() {
            "f32" => Dtype::F32,
            "f64" => Dtype::F64,
            d => return Err(bad(format!("unknown dtype {d}"))),
        };
        let n: usize = field(next_line()?, "config")?.parse().map_err(|_| bad("bad config length"))?;
        let mut text = String::new();
        for _ in 0..n {
            text.push_str(&next_line()?);
            text.push('\n');
        }
        let config = ExperimentConfig::parse(&text)?;
        if config.digest() != digest {
            return Err(bad("embedded config does not match the recorded digest"));
        }
        let mut adam_steps = IndexMap::new();
        let mut tensors = Vec::new();
        loop {
            let line = next_line()?;
            let parts: Vec<&str> = line.split(' ').collect();
            match parts[..] {
                ["end"] => break,
                ["adam", k, step] => {
                    adam_steps.insert(
                        k.parse().map_err(|_| bad("bad adam site"))?,
                        step.parse().map_err(|_| bad("bad adam step"))?,
                    );
                }
                ["tensor", name, dims, off, len] => {
                    let shape = dims
                        .split(',')
                        .map(|d| d.parse().map_err(|_| bad(format!("bad shape for {name}"))))
                        .collect::<Result<Vec<usize>>>()?;
                    tensors.push((
                        name.to_string(),
                        shape,
                        off.parse().map_err(|_| bad("bad offset"))?,
                        len.parse().map_err(|_| bad("bad length"))?,
                    ));
                }
                _ => return Err(bad(format!("unexpected header line '{line}'"))),
            }
        }
        Ok(Self {
            digest,
            round,
            dtype,
            config,
            adam_steps,
            tensors,
            payload: bytes[pos..].to_vec(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::File {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::decode(&bytes)
    }

    fn tensor<T: Real>(&self, shape: &[usize], off: usize, len: usize, name: &str) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        if len != n * T::BYTES {
            return Err(bad(format!("{name}: {len} bytes for {n} values")));
        }
        let raw = self
            .payload
            .get(off..off + len)
            .ok_or_else(|| bad(format!("{name}: payload truncated")))?;
        Tensor::new(shape, raw.chunks_exact(T::BYTES).map(T::read_le).collect())
    }

    /// Rebuilds the federation state; `T` must match the stored dtype.
    pub fn state<T: Real>(&self) -> Result<FederationState<T>> {
        if T::DTYPE != self.dtype.as_str() {
            return Err(bad(format!("stored as {}, requested {}", self.dtype.as_str(), T::DTYPE)));
        }
        let sites = self.config.sites;
        let mut global = ParamSet::new();
        let mut params: Vec<ParamSet<T>> = (0..sites).map(|_| ParamSet::new()).collect();
        let mut moments: Vec<IndexMap<String, MomentPair<T>>> =
            (0..sites).map(|_| IndexMap::new()).collect();
        for (name, shape, off, len) in &self.tensors {
            let t = self.tensor::<T>(shape, *off, *len, name)?;
            let (scope, rest) = name.split_once('/').ok_or_else(|| bad(format!("bad tensor name {name}")))?;
            if scope == "global" {
                let (g, pname) = rest.split_once('/').ok_or_else(|| bad(format!("bad tensor name {name}")))?;
                global.insert(pname, Group::parse(g)?, t)?;
                continue;
            }
            let k: usize = scope
                .strip_prefix("site")
                .and_then(|s| s.parse().ok())
                .filter(|&k| k < sites)
                .ok_or_else(|| bad(format!("bad tensor scope in {name}")))?;
            let (kind, rest) = rest.split_once('/').ok_or_else(|| bad(format!("bad tensor name {name}")))?;
            match kind {
                "param" => {
                    let (g, pname) = rest.split_once('/').ok_or_else(|| bad(format!("bad tensor name {name}")))?;
                    params[k].insert(pname, Group::parse(g)?, t)?;
                }
                "m" => moments[k].entry(rest.to_string()).or_default().0 = Some(t),
                "v" => moments[k].entry(rest.to_string()).or_default().1 = Some(t),
                _ => return Err(bad(format!("bad tensor kind in {name}"))),
            }
        }
        let mut site_states = Vec::with_capacity(sites);
        for (k, (p, mo)) in params.into_iter().zip(moments).enumerate() {
            let mut opt = Adam::new(self.config.lr);
            opt.step = *self.adam_steps.get(&k).ok_or_else(|| bad(format!("missing optimizer step of site {k}")))?;
            for (name, (m, v)) in mo {
                let (m, v) = m.zip(v).ok_or_else(|| bad(format!("incomplete moments for {name}")))?;
                opt.moments.insert(name, Moments { m, v });
            }
            site_states.push(SiteState { params: p, opt });
        }
        let all: Vec<ParamSet<T>> = site_states.iter().map(|s| s.params.clone()).collect();
        Ok(FederationState {
            round: self.round,
            profile: self.config.profile(),
            global,
            heads: model::collect_heads(&all, self.round)?,
            sites: site_states,
        })
    }
}

pub fn write<T: Real>(path: &Path, cfg: &ExperimentConfig, state: &FederationState<T>) -> Result<()> {
    fs::write(path, encode(cfg, state)).map_err(|e| Error::File {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::benchmark;
    use crate::federation::run_round;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        for kv in ["sites=2", "widths=2,4", "image_size=16", "samples_per_site=5", "batch=3", "dtype=f64", "lr=1e-3"] {
            c.set_pair(kv).unwrap();
        }
        c
    }

    #[test]
    fn round_trip_after_training() {
        let cfg = tiny();
        let data = benchmark(&cfg.benchmark()).unwrap();
        let mut st = FederationState::<f64>::init(&cfg.profile(), &cfg.train_settings()).unwrap();
        run_round(&mut st, &data, &cfg.train_settings()).unwrap();
        let ck = Checkpoint::decode(&encode(&cfg, &st)).unwrap();
        assert_eq!(ck.round, 1);
        assert_eq!(ck.config, cfg);
        let back: FederationState<f64> = ck.state().unwrap();
        assert_eq!(back, st);
        assert!(ck.state::<f32>().is_err());
    }

    #[test]
    fn rejects_corruption() {
        let cfg = tiny();
        let st = FederationState::<f64>::init(&cfg.profile(), &cfg.train_settings()).unwrap();
        let bytes = encode(&cfg, &st);
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 8]).unwrap().state::<f64>().is_err());
        assert!(Checkpoint::decode(b"hello\n").is_err());
        let text = String::from_utf8_lossy(&bytes).replace("lcfed-checkpoint 1", "lcfed-checkpoint 9");
        assert!(Checkpoint::decode(text.as_bytes()).is_err());
        let tampered = String::from_utf8_lossy(&bytes).replacen("master_seed = 0", "master_seed = 1", 1);
        assert!(Checkpoint::decode(tampered.as_bytes()).is_err());
    }
}
