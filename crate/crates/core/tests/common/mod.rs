//! Shared helpers for the integration tests.
#![allow(dead_code)]

use lcfed_core::hc;
use lcfed_core::losses::dice_loss;
use lcfed_core::nn::{self, init_params, ModelProfile};
use lcfed_core::pcs::{self, SiteEmbedding};
use lcfed_core::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-5;
/// Below this magnitude the relative error is measured against the floor.
pub const FD_FLOOR: f64 = 1e-6;
pub const FD_POINTS: usize = 12;

pub type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Build,
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values with magnitude in `[0.1, 1)` and random sign.
pub fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Distinct values spaced at least 0.01 apart, shuffled.
pub fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.3).collect();
    data.shuffle(rng);
    Tensor::new(shape, data).unwrap()
}

/// Scalar `Σ w ⊙ op(inputs)` with fixed random weights, so every output
/// element contributes.
fn scalar_loss(tape: &mut Tape<f64>, case: &GradCase, vars: &[Var], weight_seed: u64) -> Result<Var> {
    let out = (case.build)(tape, vars)?;
    let shape = tape.value(out).shape().to_vec();
    let w = uniform(&mut rng(weight_seed), &shape, -1.0, 1.0);
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn eval(case: &GradCase, inputs: &[Tensor<f64>], weight_seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let l = scalar_loss(&mut tape, case, &vars, weight_seed).unwrap();
    tape.value(l).item()
}

pub struct GradReport {
    pub name: &'static str,
    pub points: usize,
    pub worst: f64,
}

/// Central differences at `FD_POINTS` random coordinates of every input
/// (all coordinates when an input is smaller).
pub fn check(case: &GradCase, seed: u64) -> GradReport {
    let weight_seed = seed ^ 0x5eed;
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.param(t.clone())).collect();
    let l = scalar_loss(&mut tape, case, &vars, weight_seed).unwrap();
    tape.backward(l).unwrap();
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(&case.inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut r = rng(seed);
    let (mut points, mut worst) = (0, 0.0f64);
    for (i, input) in case.inputs.iter().enumerate() {
        let coords: Vec<usize> = if input.len() <= FD_POINTS {
            (0..input.len()).collect()
        } else {
            rand::seq::index::sample(&mut r, input.len(), FD_POINTS).into_vec()
        };
        for j in coords {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(case, &plus, weight_seed) - eval(case, &minus, weight_seed)) / (2.0 * FD_STEP);
            let a = analytic[i].data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max(err);
            points += 1;
        }
    }
    GradReport {
        name: case.name,
        points,
        worst,
    }
}

fn case(name: &'static str, inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> GradCase {
    GradCase {
        name,
        inputs,
        build: Box::new(build),
    }
}

fn small_profile(sites: usize) -> ModelProfile {
    ModelProfile {
        in_channels: 1,
        widths: vec![2, 3],
        classes: 1,
        sites,
        pcs: true,
        calibrated_head: true,
    }
}

/// Every differentiable operation of the engine, the layers and the losses.
pub fn grad_cases() -> Vec<GradCase> {
    let mut g = rng(2024);
    let r = &mut g;
    let x4 = [2, 3, 4, 4];
    let mut cases = vec![
        case("add", vec![uniform(r, &x4, -1.0, 1.0), uniform(r, &x4, -1.0, 1.0)], |t, v| t.add(v[0], v[1])),
        case("sub", vec![uniform(r, &x4, -1.0, 1.0), uniform(r, &x4, -1.0, 1.0)], |t, v| t.sub(v[0], v[1])),
        case("mul", vec![uniform(r, &x4, -1.0, 1.0), uniform(r, &x4, -1.0, 1.0)], |t, v| t.mul(v[0], v[1])),
        case("div", vec![uniform(r, &x4, -1.0, 1.0), uniform(r, &x4, 0.5, 2.0)], |t, v| t.div(v[0], v[1])),
        case("add_channel_broadcast", vec![uniform(r, &x4, -1.0, 1.0), uniform(r, &[2, 3], -1.0, 1.0)], |t, v| {
            t.add(v[0], v[1])
        }),
        case("mul_channel_broadcast", vec![uniform(r, &x4, -1.0, 1.0), uniform(r, &[2, 3], -1.0, 1.0)], |t, v| {
            t.mul(v[0], v[1])
        }),
        case("mul_plane_broadcast", vec![uniform(r, &x4, -1.0, 1.0), uniform(r, &[2, 1, 4, 4], -1.0, 1.0)], |t, v| {
            t.mul(v[0], v[1])
        }),
        case("div_scalar_broadcast", vec![uniform(r, &x4, -1.0, 1.0), uniform(r, &[1], 0.5, 2.0)], |t, v| {
            t.div(v[0], v[1])
        }),
        case("sub_scalar_lhs", vec![uniform(r, &[1], -1.0, 1.0), uniform(r, &x4, -1.0, 1.0)], |t, v| t.sub(v[0], v[1])),
        case("scale", vec![uniform(r, &x4, -1.0, 1.0)], |t, v| Ok(t.scale(v[0], -1.7))),
        case("offset", vec![uniform(r, &x4, -1.0, 1.0)], |t, v| Ok(t.offset(v[0], 0.3))),
        case(
            "linear",
            vec![uniform(r, &[3, 5], -1.0, 1.0), uniform(r, &[5, 4], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)],
            |t, v| t.linear(v[0], v[1], Some(v[2])),
        ),
        case("linear_no_bias", vec![uniform(r, &[3, 5], -1.0, 1.0), uniform(r, &[5, 4], -1.0, 1.0)], |t, v| {
            t.linear(v[0], v[1], None)
        }),
        case(
            "conv2d_pad1",
            vec![uniform(r, &[2, 2, 5, 5], -1.0, 1.0), uniform(r, &[3, 2, 3, 3], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)],
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1),
        ),
        case(
            "conv2d_stride2",
            vec![uniform(r, &[1, 2, 6, 6], -1.0, 1.0), uniform(r, &[2, 2, 3, 3], -1.0, 1.0)],
            |t, v| t.conv2d(v[0], v[1], None, 2, 0),
        ),
        case(
            "per_pixel_linear",
            vec![uniform(r, &x4, -1.0, 1.0), uniform(r, &[3, 2], -1.0, 1.0), uniform(r, &[2], -1.0, 1.0)],
            |t, v| t.per_pixel_linear(v[0], v[1], v[2]),
        ),
        case("relu", vec![off_zero(r, &x4)], |t, v| Ok(t.relu(v[0]))),
        case("sigmoid", vec![uniform(r, &x4, -3.0, 3.0)], |t, v| Ok(t.sigmoid(v[0]))),
        case("sqrt", vec![uniform(r, &x4, 0.2, 2.0)], |t, v| Ok(t.sqrt(v[0]))),
        case("abs", vec![off_zero(r, &x4)], |t, v| Ok(t.abs(v[0]))),
        case("global_average_pool", vec![uniform(r, &x4, -1.0, 1.0)], |t, v| t.global_average_pool(v[0])),
        case("spatial_sum", vec![uniform(r, &x4, -1.0, 1.0)], |t, v| t.spatial_sum(v[0])),
        case("channel_mean", vec![uniform(r, &x4, -1.0, 1.0)], |t, v| t.channel_mean(v[0])),
        case(
            "concat",
            vec![uniform(r, &[2, 1, 3, 3], -1.0, 1.0), uniform(r, &[2, 2, 3, 3], -1.0, 1.0)],
            |t, v| t.concat(&[v[0], v[1]]),
        ),
        case("sum", vec![uniform(r, &x4, -1.0, 1.0)], |t, v| Ok(t.sum(v[0]))),
        case("mean", vec![uniform(r, &x4, -1.0, 1.0)], |t, v| Ok(t.mean(v[0]))),
        case(
            "instance_norm_spatial",
            vec![uniform(r, &x4, -1.0, 1.0), uniform(r, &[3], 0.5, 1.5), uniform(r, &[3], -0.5, 0.5)],
            |t, v| t.instance_norm(v[0], v[1], v[2], 1e-5),
        ),
        case(
            "instance_norm_vector",
            vec![uniform(r, &[1, 4], -1.0, 1.0), uniform(r, &[4], 0.5, 1.5), uniform(r, &[4], -0.5, 0.5)],
            |t, v| t.instance_norm(v[0], v[1], v[2], 1e-5),
        ),
        case("max_pool2", vec![distinct(r, &x4)], |t, v| t.max_pool2(v[0])),
        case("upsample2", vec![uniform(r, &[2, 3, 2, 2], -1.0, 1.0)], |t, v| t.upsample2(v[0])),
        case("reshape", vec![uniform(r, &x4, -1.0, 1.0)], |t, v| t.reshape(v[0], &[6, 16])),
        case("dice_loss", vec![uniform(r, &[2, 1, 4, 4], -2.0, 2.0)], |t, v| {
            let s = t.sigmoid(v[0]);
            let mut gr = rng(7);
            let g = Tensor::new(&[2, 1, 4, 4], (0..32).map(|_| f64::from(gr.gen_bool(0.5) as u8)).collect())?;
            let g = t.constant(g);
            dice_loss(t, s, g)
        }),
    ];

    let attention = uniform(r, &[2, 2, 4, 4], 0.0, 1.0);
    cases.push(case("calibrate", vec![uniform(r, &x4, -1.0, 1.0)], move |t, v| {
        hc::calibrate(t, v[0], &attention)
    }));
    cases.push(case("select_channels", vec![uniform(r, &x4, -1.0, 1.0), uniform(r, &[2, 3], 0.1, 0.9)], |t, v| {
        pcs::select_channels(t, v[0], v[1])
    }));

    let params = init_params::<f64, _>(&small_profile(3), &mut rng(11)).unwrap();
    let p = params.clone();
    cases.push(case("conv_block", vec![uniform(r, &[1, 2, 4, 4], -1.0, 1.0)], move |t, v| {
        let b = p.bind(t);
        nn::conv_block(t, &b, "enc1", v[0])
    }));
    let p = params.clone();
    cases.push(case("augment_embedding", vec![uniform(r, &[2, 3, 2, 2], -1.0, 1.0)], move |t, v| {
        let b = p.bind(t);
        let xi = SiteEmbedding::one_hot(1, 3)?.to_var(t);
        pcs::augment_embedding(t, &b, xi, v[0])
    }));
    let p = params;
    cases.push(case("segmentation_forward", vec![uniform(r, &[1, 1, 4, 4], 0.0, 1.0)], move |t, v| {
        let b = p.bind(t);
        let (skips, deep) = nn::encode(t, &b, 2, v[0])?;
        let f = nn::decode(t, &b, deep, &skips)?;
        let s = nn::per_pixel_linear(t, &b, nn::COARSE_HEAD, f)?;
        Ok(t.sigmoid(s))
    }));
    cases
}
