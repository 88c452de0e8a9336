//! Dice segmentation loss and the joint objective.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DICE_EPS: f64 = 1e-5;
pub const DEFAULT_LAMBDA: f64 = 0.1;

/// `1 − (2|S⊗G| + ε)/(|S| + |G| + ε)` per sample and class, averaged.
/// `s` and `g` are `B×N×H×W`; `g` is taken as given (binary by contract).
pub fn dice_loss<T: Real>(tape: &mut Tape<T>, s: Var, g: Var) -> Result<Var> {
    if tape.value(s).shape() != tape.value(g).shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            tape.value(s).shape(),
            tape.value(g).shape()
        )));
    }
    tape.value(s).dims4()?;
    let eps = T::c(DICE_EPS);
    let prod = tape.mul(s, g)?;
    let inter = tape.spatial_sum(prod)?;
    let num = tape.scale(inter, T::c(2.0));
    let num = tape.offset(num, eps);
    let ss = tape.spatial_sum(s)?;
    let gs = tape.spatial_sum(g)?;
    let den = tape.add(ss, gs)?;
    let den = tape.offset(den, eps);
    let ratio = tape.div(num, den)?;
    let m = tape.mean(ratio);
    let neg = tape.scale(m, -T::one());
    Ok(tape.offset(neg, T::one()))
}

/// Plain-value Dice loss, same definition as [`dice_loss`].
pub fn dice_value<T: Real>(s: &Tensor<T>, g: &Tensor<T>) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(s.clone());
    let g = tape.constant(g.clone());
    let l = dice_loss(&mut tape, s, g)?;
    Ok(tape.value(l).item().f64())
}

/// Scalar terms of one joint loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub coarse: f64,
    pub calib: f64,
    pub con: f64,
    pub joint: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn zero(lambda: f64) -> Self {
        Self {
            coarse: 0.0,
            calib: 0.0,
            con: 0.0,
            joint: 0.0,
            lambda,
        }
    }

    /// Term-wise mean of several breakdowns sharing one `lambda`.
    pub fn mean(items: &[LossBreakdown], lambda: f64) -> Self {
        if items.is_empty() {
            return Self::zero(lambda);
        }
        let n = items.len() as f64;
        let mut out = Self::zero(lambda);
        for it in items {
            out.coarse += it.coarse;
            out.calib += it.calib;
            out.con += it.con;
            out.joint += it.joint;
        }
        out.coarse /= n;
        out.calib /= n;
        out.con /= n;
        out.joint /= n;
        out
    }
}

/// `coarse + calib + λ·con`. Fails before anything else if a term is not finite.
pub fn joint_loss<T: Real>(tape: &mut Tape<T>, coarse: Var, calib: Var, con: Var, lambda: f64) -> Result<(Var, LossBreakdown)> {
    let terms = [("coarse", coarse), ("calib", calib), ("con", con)];
    for (name, v) in terms {
        if tape.value(v).len() != 1 {
            return Err(Error::Shape(format!("{name} loss is not a scalar")));
        }
        if !tape.value(v).all_finite() {
            return Err(Error::NonFinite(format!("{name} loss")));
        }
    }
    if !lambda.is_finite() {
        return Err(Error::NonFinite("lambda".into()));
    }
    let seg = tape.add(coarse, calib)?;
    let reg = tape.scale(con, T::c(lambda));
    let joint = tape.add(seg, reg)?;
    if !tape.value(joint).all_finite() {
        return Err(Error::NonFinite("joint loss".into()));
    }
    let breakdown = LossBreakdown {
        coarse: tape.value(coarse).item().f64(),
        calib: tape.value(calib).item().f64(),
        con: tape.value(con).item().f64(),
        joint: tape.value(joint).item().f64(),
        lambda,
    };
    Ok((joint, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, v).unwrap()
    }

    #[test]
    fn dice_identity_and_disjoint() {
        let g = t(&[1, 1, 4, 8], (0..32).map(|i| if i < 16 { 1.0 } else { 0.0 }).collect());
        assert!(dice_value(&g, &g).unwrap().abs() < 1e-6);
        let s = g.map(|v| 1.0 - v);
        assert!((dice_value(&s, &g).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn dice_half_filled() {
        let g = t(&[1, 1, 4, 4], (0..16).map(|i| if i < 8 { 1.0 } else { 0.0 }).collect());
        let s = g.map(|v| 0.5 * v);
        let want = 1.0 - (8.0 + DICE_EPS) / (12.0 + DICE_EPS);
        assert!((dice_value(&s, &g).unwrap() - want).abs() < 1e-15);
        assert!((dice_value(&s, &g).unwrap() - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn dice_both_empty_is_zero() {
        let z = Tensor::<f64>::zeros(&[2, 1, 3, 3]);
        assert_eq!(dice_value(&z, &z).unwrap(), 0.0);
    }

    #[test]
    fn dice_shape_mismatch() {
        let a = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let b = Tensor::<f64>::zeros(&[1, 2, 2, 2]);
        assert!(dice_value(&a, &b).is_err());
    }

    #[test]
    fn joint_arithmetic() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::scalar(0.5));
        let b = tape.constant(Tensor::scalar(0.3));
        let c = tape.constant(Tensor::scalar(-0.2));
        let (j, br) = joint_loss(&mut tape, a, b, c, 0.1).unwrap();
        assert!((tape.value(j).item() - 0.78).abs() < 1e-15);
        assert_eq!(br.joint, tape.value(j).item());
        let (_, br0) = joint_loss(&mut tape, a, b, c, 0.0).unwrap();
        assert_eq!(br0.joint, 0.8);
        let nan = tape.constant(Tensor::scalar(f64::NAN));
        assert!(matches!(joint_loss(&mut tape, a, nan, c, 0.1), Err(Error::NonFinite(_))));
    }
}
