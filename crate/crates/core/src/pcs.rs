//! Personalized channel selection.
//!
//! A fixed one-hot site embedding is extended to the deepest encoder width,
//! fused with the channel descriptor of the current feature and squashed
//! into a per-channel gate. The gate rescales channels residually, so a
//! wrong selection can never suppress a channel entirely.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{fully_connected, instance_norm, Bound};
use crate::tensor::{Real, Tensor};

/// One-hot identifier of a site. Never trained.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteEmbedding {
    site: usize,
    raw: Vec<f64>,
}

impl SiteEmbedding {
    pub fn one_hot(site: usize, sites: usize) -> Result<Self> {
        if site >= sites {
            return Err(Error::Invalid(format!("site {site} out of range for {sites} sites")));
        }
        let mut raw = vec![0.0; sites];
        raw[site] = 1.0;
        Ok(Self { site, raw })
    }

    /// Embeddings of all `sites` sites, in index order.
    pub fn all(sites: usize) -> Vec<Self> {
        (0..sites).map(|k| Self::one_hot(k, sites).expect("in range")).collect()
    }

    pub fn site(&self) -> usize {
        self.site
    }

    pub fn sites(&self) -> usize {
        self.raw.len()
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    /// `1×K` row tensor.
    pub fn tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_f64(&[1, self.raw.len()], &self.raw).expect("non-empty")
    }

    pub fn to_var<T: Real>(&self, tape: &mut Tape<T>) -> Var {
        tape.constant(self.tensor())
    }
}

/// Augmented embedding `ξ̂ ∈ (0,1)^(B×C)` for embedding `xi` (a `1×K` value)
/// and deepest-stage feature `f: B×C×h×w`.
pub fn augment_embedding<T: Real>(tape: &mut Tape<T>, p: &Bound, xi: Var, f: Var) -> Result<Var> {
    let (batch, channels, _, _) = tape.value(f).dims4()?;
    let ext1 = p.get("pcs.ext1.weight")?;
    let k = tape.value(ext1).shape()[0];
    if tape.value(xi).shape() != [1, k] {
        return Err(Error::Shape(format!(
            "site embedding shape {:?}, generator expects [1, {k}]",
            tape.value(xi).shape()
        )));
    }
    if tape.value(ext1).shape()[1] != channels {
        return Err(Error::Shape(format!(
            "generator width {} vs feature channels {channels}",
            tape.value(ext1).shape()[1]
        )));
    }
    let mut ext = fully_connected(tape, p, "pcs.ext1", xi)?;
    ext = instance_norm(tape, p, "pcs.ext_norm", ext)?;
    ext = tape.relu(ext);
    let xi_star = fully_connected(tape, p, "pcs.ext2", ext)?;
    let zeros = tape.constant(Tensor::zeros(&[batch, channels]));
    let xi_star = tape.add(zeros, xi_star)?;
    let descriptor = tape.global_average_pool(f)?;
    let cat = tape.concat(&[descriptor, xi_star])?;
    let fused = fully_connected(tape, p, "pcs.fuse", cat)?;
    Ok(tape.sigmoid(fused))
}

/// `f' = f + f ⊗ ξ̂`, with `ξ̂: B×C` broadcast over the spatial plane.
pub fn select_channels<T: Real>(tape: &mut Tape<T>, f: Var, xi_hat: Var) -> Result<Var> {
    let (b, c, _, _) = tape.value(f).dims4()?;
    if tape.value(xi_hat).shape() != [b, c] {
        return Err(Error::Shape(format!(
            "channel gate {:?} vs feature {:?}",
            tape.value(xi_hat).shape(),
            tape.value(f).shape()
        )));
    }
    let gated = tape.mul(f, xi_hat)?;
    tape.add(f, gated)
}

/// Site-contrast regularizer for site `k`:
/// `−1/(K−1) Σ_{i≠k} mean|ξ̂_k − stopgrad(ξ̂_i)|`, averaged over the batch.
///
/// `xi_hat_k` may pass in an already computed `ξ̂_k`. `embeddings` holds one
/// `1×K` value per site. Returns a constant zero when `K < 2`.
pub fn site_contrast_loss_with<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    f: Var,
    embeddings: &[Var],
    k: usize,
    xi_hat_k: Option<Var>,
) -> Result<Var> {
    let sites = embeddings.len();
    if k >= sites {
        return Err(Error::Invalid(format!("site {k} out of range for {sites} embeddings")));
    }
    if sites < 2 {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let own = match xi_hat_k {
        Some(v) => v,
        None => augment_embedding(tape, p, embeddings[k], f)?,
    };
    let mut others = Vec::with_capacity(sites - 1);
    for (i, &xi) in embeddings.iter().enumerate() {
        if i != k {
            others.push(augment_embedding(tape, p, xi, f)?);
        }
    }
    contrast_of_gates(tape, own, &others)
}

/// `−1/|others| Σ mean|own − stopgrad(other)|` over already computed gates.
pub fn contrast_of_gates<T: Real>(tape: &mut Tape<T>, own: Var, others: &[Var]) -> Result<Var> {
    if others.is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let mut total: Option<Var> = None;
    for &other in others {
        let other = tape.stop_gradient(other);
        let diff = tape.sub(own, other)?;
        let dist = tape.abs(diff);
        let dist = tape.mean(dist);
        total = Some(match total {
            Some(t) => tape.add(t, dist)?,
            None => dist,
        });
    }
    let total = total.expect("non-empty");
    Ok(tape.scale(total, T::c(-1.0 / others.len() as f64)))
}

pub fn site_contrast_loss<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    f: Var,
    embeddings: &[SiteEmbedding],
    k: usize,
) -> Result<Var> {
    let vars: Vec<Var> = embeddings.iter().map(|e| e.to_var(tape)).collect();
    site_contrast_loss_with(tape, p, f, &vars, k, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, ModelProfile, ParamSet};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn generator(sites: usize, seed: u64) -> ParamSet<f64> {
        let prof = ModelProfile {
            in_channels: 1,
            widths: vec![2, 6],
            classes: 1,
            sites,
            pcs: true,
            calibrated_head: true,
        };
        init_params(&prof, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn feature(tape: &mut Tape<f64>, seed: u64, scale: f64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..2 * 6 * 3 * 3).map(|_| rng.gen_range(0.0..1.0) * scale).collect();
        tape.constant(Tensor::from_f64(&[2, 6, 3, 3], &data).unwrap())
    }

    #[test]
    fn one_hot_layout() {
        let e = SiteEmbedding::one_hot(2, 4).unwrap();
        assert_eq!(e.raw(), &[0.0, 0.0, 1.0, 0.0]);
        assert!(SiteEmbedding::one_hot(4, 4).is_err());
    }

    #[test]
    fn gate_in_open_unit_interval_and_site_specific() {
        let ps = generator(3, 7);
        let mut tape = Tape::new();
        let p = ps.bind(&mut tape);
        let f = feature(&mut tape, 1, 1.0);
        let e = SiteEmbedding::all(3);
        let x0 = e[0].to_var(&mut tape);
        let x1 = e[1].to_var(&mut tape);
        let a = augment_embedding(&mut tape, &p, x0, f).unwrap();
        let b = augment_embedding(&mut tape, &p, x1, f).unwrap();
        assert_eq!(tape.value(a).shape(), &[2, 6]);
        assert!(tape.value(a).data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_ne!(tape.value(a), tape.value(b));
    }

    #[test]
    fn zero_feature_gives_batch_constant_gate() {
        let ps = generator(3, 8);
        let mut tape = Tape::new();
        let p = ps.bind(&mut tape);
        let f = tape.constant(Tensor::zeros(&[2, 6, 3, 3]));
        let xi = SiteEmbedding::one_hot(1, 3).unwrap().to_var(&mut tape);
        let g = augment_embedding(&mut tape, &p, xi, f).unwrap();
        let d = tape.value(g).data();
        assert_eq!(&d[..6], &d[6..]);
    }

    #[test]
    fn wrong_embedding_length_rejected() {
        let ps = generator(3, 8);
        let mut tape = Tape::new();
        let p = ps.bind(&mut tape);
        let f = feature(&mut tape, 1, 1.0);
        let xi = SiteEmbedding::one_hot(0, 4).unwrap().to_var(&mut tape);
        assert!(augment_embedding(&mut tape, &p, xi, f).is_err());
    }

    #[test]
    fn selection_identity_and_doubling() {
        let mut tape = Tape::<f64>::new();
        let f = feature(&mut tape, 3, 1.0);
        let zero = tape.constant(Tensor::zeros(&[2, 6]));
        let one = tape.constant(Tensor::ones(&[2, 6]));
        let same = select_channels(&mut tape, f, zero).unwrap();
        let double = select_channels(&mut tape, f, one).unwrap();
        assert_eq!(tape.value(same), tape.value(f));
        let want = tape.value(f).map(|v| 2.0 * v);
        assert_eq!(tape.value(double), &want);
    }

    #[test]
    fn contrast_hand_case() {
        // K=3, ξ̂_k=[1,0], others [0,0] and [1,1]: −(1/2)(0.5+0.5)
        let mut tape = Tape::<f64>::new();
        let own = tape.constant(Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap());
        let a = tape.constant(Tensor::from_f64(&[1, 2], &[0.0, 0.0]).unwrap());
        let b = tape.constant(Tensor::from_f64(&[1, 2], &[1.0, 1.0]).unwrap());
        let l = contrast_of_gates(&mut tape, own, &[a, b]).unwrap();
        assert_eq!(tape.value(l).item(), -0.5);
        let same = contrast_of_gates(&mut tape, own, &[own, own]).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);
    }

    #[test]
    fn contrast_single_site_is_zero() {
        let ps = generator(1, 2);
        let mut tape = Tape::new();
        let p = ps.bind(&mut tape);
        let f = feature(&mut tape, 1, 1.0);
        let l = site_contrast_loss(&mut tape, &p, f, &SiteEmbedding::all(1), 0).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn contrast_is_nonpositive() {
        for seed in 0..5 {
            let ps = generator(4, seed);
            let mut tape = Tape::new();
            let p = ps.bind(&mut tape);
            let f = feature(&mut tape, seed + 10, 2.0);
            let l = site_contrast_loss(&mut tape, &p, f, &SiteEmbedding::all(4), 1).unwrap();
            assert!(tape.value(l).item() <= 0.0);
        }
    }
}
