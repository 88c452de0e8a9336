//! Full per-site forward pass and training objective.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::hc::{self, HcSettings, HeadCollection, HeadParams};
use crate::losses::{dice_loss, joint_loss, LossBreakdown};
use crate::nn::{self, Bound, ModelProfile, ParamSet, CALIB_HEAD, COARSE_HEAD};
use crate::pcs::{self, SiteEmbedding};
use crate::tensor::{Real, Tensor};

/// Which calibration stages are active.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub pcs: bool,
    pub hc: bool,
    pub hc_settings: HcSettings,
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// Deepest encoder feature before channel selection.
    pub deep: Var,
    pub xi_hat: Option<Var>,
    /// Decoder output `f̂`.
    pub feature: Var,
    /// Coarse map `S`.
    pub coarse: Var,
    /// Calibrated map `S*`, present when head calibration is on.
    pub calibrated: Option<Var>,
}

impl Forward {
    /// The map that is evaluated: `S*` when present, otherwise `S`.
    pub fn prediction(&self) -> Var {
        self.calibrated.unwrap_or(self.coarse)
    }
}

/// Builds the profile a calibration setting needs.
pub fn profile_for(widths: &[usize], classes: usize, sites: usize, cal: &Calibration) -> ModelProfile {
    ModelProfile {
        in_channels: 1,
        widths: widths.to_vec(),
        classes,
        sites,
        pcs: cal.pcs,
        calibrated_head: cal.hc,
    }
}

/// Encoder, optional channel selection, decoder, coarse head, optional head
/// calibration and calibrated head.
///
/// `heads` holds the coarse heads relayed by the server; entry `site` is
/// replaced by the live local head. Foreign heads only enter through the
/// attention map, which is a constant on the tape.
#[allow(clippy::too_many_arguments)]
pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    stages: usize,
    site: usize,
    sites: usize,
    cal: &Calibration,
    heads: &HeadCollection<T>,
    x: Var,
) -> Result<Forward> {
    let (skips, deep) = nn::encode(tape, p, stages, x)?;
    let (mut bottom, mut xi_hat) = (deep, None);
    if cal.pcs {
        let xi = SiteEmbedding::one_hot(site, sites)?.to_var(tape);
        let gate = pcs::augment_embedding(tape, p, xi, deep)?;
        bottom = pcs::select_channels(tape, deep, gate)?;
        xi_hat = Some(gate);
    }
    let feature = nn::decode(tape, p, bottom, &skips)?;
    let logits = nn::per_pixel_linear(tape, p, COARSE_HEAD, feature)?;
    let coarse = tape.sigmoid(logits);
    let mut calibrated = None;
    if cal.hc {
        let attention = attention_for(tape, feature, coarse, site, heads, &cal.hc_settings)?;
        let f_star = hc::calibrate(tape, feature, &attention)?;
        let logits = nn::per_pixel_linear(tape, p, CALIB_HEAD, f_star)?;
        calibrated = Some(tape.sigmoid(logits));
    }
    Ok(Forward {
        deep,
        xi_hat,
        feature,
        coarse,
        calibrated,
    })
}

fn attention_for<T: Real>(
    tape: &Tape<T>,
    feature: Var,
    coarse: Var,
    site: usize,
    heads: &HeadCollection<T>,
    settings: &HcSettings,
) -> Result<Tensor<T>> {
    let local = tape.value(coarse).clone();
    if heads.len() < 2 {
        return Ok(Tensor::zeros(local.shape()));
    }
    if site >= heads.len() {
        return Err(Error::Invalid(format!("site {site} has no slot in a {}-head collection", heads.len())));
    }
    let f = tape.value(feature);
    let mut maps = Vec::with_capacity(heads.len());
    for (i, h) in heads.heads.iter().enumerate() {
        if i == site {
            maps.push(local.clone());
        } else {
            let one = HeadCollection::new(heads.round, vec![h.clone()])?;
            maps.push(hc::evaluate_heads(f, &one)?.remove(0));
        }
    }
    let u = hc::disagreement_map(&maps, site)?;
    hc::attention_map(&u, settings)
}

/// Coarse heads of every site, stamped with `round`.
pub fn collect_heads<T: Real>(params: &[ParamSet<T>], round: u64) -> Result<HeadCollection<T>> {
    HeadCollection::new(round, params.iter().map(HeadParams::from_params).collect::<Result<_>>()?)
}

/// Joint loss of one batch; the contrast term is the constant zero when
/// channel selection is off or there is a single site.
pub fn objective<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    fwd: &Forward,
    target: Var,
    site: usize,
    sites: usize,
    lambda: f64,
) -> Result<(Var, LossBreakdown)> {
    let coarse = dice_loss(tape, fwd.coarse, target)?;
    let calib = match fwd.calibrated {
        Some(s) => dice_loss(tape, s, target)?,
        None => tape.constant(Tensor::scalar(T::zero())),
    };
    let con = match fwd.xi_hat {
        Some(own) if sites > 1 => {
            let embeddings: Vec<Var> = SiteEmbedding::all(sites).iter().map(|e| e.to_var(tape)).collect();
            pcs::site_contrast_loss_with(tape, p, fwd.deep, &embeddings, site, Some(own))?
        }
        _ => tape.constant(Tensor::scalar(T::zero())),
    };
    joint_loss(tape, coarse, calib, con, lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cal: &Calibration, sites: usize) -> (ModelProfile, Vec<ParamSet<f64>>) {
        let prof = profile_for(&[2, 4, 4], 1, sites, cal);
        let ps = (0..sites)
            .map(|k| init_params(&prof, &mut ChaCha8Rng::seed_from_u64(k as u64)).unwrap())
            .collect();
        (prof, ps)
    }

    fn input(tape: &mut Tape<f64>) -> Var {
        let data: Vec<f64> = (0..2 * 16 * 16).map(|i| ((i * 37) % 17) as f64 / 17.0).collect();
        tape.constant(Tensor::new(&[2, 1, 16, 16], data).unwrap())
    }

    #[test]
    fn shapes_and_ranges() {
        let cal = Calibration {
            pcs: true,
            hc: true,
            hc_settings: HcSettings::default(),
        };
        let (prof, ps) = setup(&cal, 3);
        let heads = collect_heads(&ps, 0).unwrap();
        let mut tape = Tape::new();
        let p = ps[1].bind(&mut tape);
        let x = input(&mut tape);
        let f = forward(&mut tape, &p, prof.stages(), 1, 3, &cal, &heads, x).unwrap();
        let s = tape.value(f.prediction());
        assert_eq!(s.shape(), &[2, 1, 16, 16]);
        assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let g = tape.constant(Tensor::zeros(&[2, 1, 16, 16]));
        let (j, br) = objective(&mut tape, &p, &f, g, 1, 3, 0.1).unwrap();
        assert!(br.con <= 0.0);
        tape.backward(j).unwrap();
        for (name, v) in p.iter() {
            assert!(tape.grad(v).unwrap().all_finite(), "{name}");
        }
    }

    #[test]
    fn single_site_calibration_is_identity() {
        let cal = Calibration {
            pcs: true,
            hc: true,
            hc_settings: HcSettings::default(),
        };
        let (prof, ps) = setup(&cal, 1);
        let heads = collect_heads(&ps, 0).unwrap();
        let mut tape = Tape::new();
        let p = ps[0].bind(&mut tape);
        let x = input(&mut tape);
        let f = forward(&mut tape, &p, prof.stages(), 0, 1, &cal, &heads, x).unwrap();
        let g = tape.constant(Tensor::zeros(&[2, 1, 16, 16]));
        let (_, br) = objective(&mut tape, &p, &f, g, 0, 1, 0.1).unwrap();
        assert_eq!(br.con, 0.0);
        let w = ps[0].tensor(&format!("{CALIB_HEAD}.weight")).unwrap().clone();
        let b = ps[0].tensor(&format!("{CALIB_HEAD}.bias")).unwrap().clone();
        let direct = crate::tensor::per_pixel_linear(tape.value(f.feature), &w, &b)
            .unwrap()
            .map(crate::tensor::sigmoid);
        assert_eq!(tape.value(f.calibrated.unwrap()), &direct);
    }

    #[test]
    fn plain_profile_has_single_head() {
        let cal = Calibration {
            pcs: false,
            hc: false,
            hc_settings: HcSettings::default(),
        };
        let (prof, ps) = setup(&cal, 2);
        assert!(ps[0].get(&format!("{CALIB_HEAD}.weight")).is_none());
        assert!(ps[0].names().all(|n| !n.starts_with("pcs.")));
        let heads = collect_heads(&ps, 0).unwrap();
        let mut tape = Tape::new();
        let p = ps[0].bind(&mut tape);
        let x = input(&mut tape);
        let f = forward(&mut tape, &p, prof.stages(), 0, 2, &cal, &heads, x).unwrap();
        assert!(f.calibrated.is_none() && f.xi_hat.is_none());
    }
}
