//! Finite-difference checks for every differentiable primitive.
//!
//! Each primitive is probed through a random linear functional
//! `sum(P * op(x))` so the full VJP surface is exercised, not just one
//! direction. The analytic gradient comes from the f32 engine under test;
//! the oracle evaluates the identical pipeline on the f64 engine, keeping
//! difference noise far below the 1e-6 gradient gate. Inputs are sampled
//! away from the non-smooth points of the kinked primitives (abs at 0,
//! clamp at the interval ends, pow at 0).

use disguise_core::diffcore::kernels::gaussian_taps;
use disguise_core::diffcore::{finite_difference_grad, max_rel_err, Graph, Graph64, GraphOps, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f32 = 1e-3;
const REL_TOL: f32 = 1e-3;
const GATE: f32 = 1e-6;

/// One primitive application with its fixed auxiliary inputs; `x` is the
/// differentiated input.
enum OpSpec {
    ConvX { k: Tensor, b: Tensor, stride: usize },
    ConvK { x: Tensor, b: Tensor, stride: usize },
    ConvB { x: Tensor, k: Tensor, stride: usize },
    Upsample2,
    DownsampleAvg2,
    HFlip,
    Blur { taps: Vec<f32>, valid: bool },
    Add { other: Tensor },
    SubLhs { other: Tensor },
    SubRhs { other: Tensor },
    Mul { other: Tensor },
    DivNum { den: Tensor },
    DivDen { num: Tensor },
    ScalarMul(f32),
    ScalarAdd(f32),
    Tanh,
    Sigmoid,
    Abs,
    Square,
    SqrtEps,
    Clamp01,
    PowWeight(f32),
    MeanReduce,
    SumReduce,
}

fn apply<G: GraphOps>(g: &mut G, spec: &OpSpec, x: G::Id) -> G::Id {
    match spec {
        OpSpec::ConvX { k, b, stride } => {
            let kn = g.constant(k.clone());
            let bn = g.constant(b.clone());
            g.conv2d(x, kn, bn, *stride).unwrap()
        }
        OpSpec::ConvK { x: img, b, stride } => {
            let xn = g.constant(img.clone());
            let bn = g.constant(b.clone());
            g.conv2d(xn, x, bn, *stride).unwrap()
        }
        OpSpec::ConvB { x: img, k, stride } => {
            let xn = g.constant(img.clone());
            let kn = g.constant(k.clone());
            g.conv2d(xn, kn, x, *stride).unwrap()
        }
        OpSpec::Upsample2 => g.upsample2(x).unwrap(),
        OpSpec::DownsampleAvg2 => g.downsample_avg2(x).unwrap(),
        OpSpec::HFlip => g.hflip(x).unwrap(),
        OpSpec::Blur { taps, valid } => g.gaussian_blur(x, taps, *valid).unwrap(),
        OpSpec::Add { other } => {
            let o = g.constant(other.clone());
            g.add(x, o).unwrap()
        }
        OpSpec::SubLhs { other } => {
            let o = g.constant(other.clone());
            g.sub(x, o).unwrap()
        }
        OpSpec::SubRhs { other } => {
            let o = g.constant(other.clone());
            g.sub(o, x).unwrap()
        }
        OpSpec::Mul { other } => {
            let o = g.constant(other.clone());
            g.mul(x, o).unwrap()
        }
        OpSpec::DivNum { den } => {
            let o = g.constant(den.clone());
            g.div(x, o).unwrap()
        }
        OpSpec::DivDen { num } => {
            let o = g.constant(num.clone());
            g.div(o, x).unwrap()
        }
        OpSpec::ScalarMul(c) => g.scalar_mul(x, *c),
        OpSpec::ScalarAdd(c) => g.scalar_add(x, *c),
        OpSpec::Tanh => g.tanh(x),
        OpSpec::Sigmoid => g.sigmoid(x),
        OpSpec::Abs => g.abs(x),
        OpSpec::Square => g.square(x),
        OpSpec::SqrtEps => g.sqrt_eps(x),
        OpSpec::Clamp01 => g.clamp01(x),
        OpSpec::PowWeight(w) => g.pow_weight(x, *w),
        OpSpec::MeanReduce => g.mean_reduce(x),
        OpSpec::SumReduce => g.sum_reduce(x),
    }
}

fn tensor(rng: &mut ChaCha8Rng, dims: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(dims, |_| lo + (hi - lo) * rng.random::<f32>())
}

/// Sample values in [lo, hi] but at least `guard` away from every point in
/// `kinks`, so the central difference never straddles a non-smooth point.
fn tensor_guarded(rng: &mut ChaCha8Rng, dims: &[usize], lo: f32, hi: f32, kinks: &[f32], guard: f32) -> Tensor {
    Tensor::from_fn(dims, |_| loop {
        let v = lo + (hi - lo) * rng.random::<f32>();
        if kinks.iter().all(|&k| (v - k).abs() >= guard) {
            return v;
        }
    })
}

fn check(name: &str, seed: u64, x: &Tensor, spec: &OpSpec) {
    let probe = {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let out = apply(&mut g, spec, xn);
        let dims = g.value(out).dims().to_vec();
        Tensor::from_fn(&dims, |_| rng.random::<f32>() * 2.0 - 1.0)
    };

    let analytic = {
        let mut g = Graph::new();
        let xn = g.leaf(x.clone());
        let out = apply(&mut g, spec, xn);
        let pn = g.constant(probe.clone());
        let weighted = g.mul(out, pn).unwrap();
        let s = g.sum_reduce(weighted);
        let grads = g.backward(s).unwrap();
        grads.wrt(xn).unwrap().clone()
    };

    let mut f = |t: &Tensor| -> disguise_core::Result<f64> {
        let mut g = Graph64::new();
        let xn = g.leaf(t.clone());
        let out = apply(&mut g, spec, xn);
        let pn = g.constant(probe.clone());
        let weighted = g.mul(out, pn)?;
        let s = g.sum_reduce(weighted);
        Ok(g.scalar_value(s))
    };
    let fd = finite_difference_grad(&mut f, x, STEP).unwrap();
    let rel = max_rel_err(&analytic, &fd, GATE);
    assert!(rel <= REL_TOL, "{name} seed {seed}: max rel err {rel}");
}

#[test]
fn conv2d_gradients() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = tensor(&mut rng, &[6, 7, 2], -1.0, 1.0);
        let k = tensor(&mut rng, &[3, 3, 2, 3], -0.5, 0.5);
        let b = tensor(&mut rng, &[3], -0.2, 0.2);
        let stride = 1 + (seed % 2) as usize;
        check("conv2d/x", seed, &x, &OpSpec::ConvX { k: k.clone(), b: b.clone(), stride });
        check("conv2d/k", seed, &k, &OpSpec::ConvK { x: x.clone(), b: b.clone(), stride });
        check("conv2d/b", seed, &b, &OpSpec::ConvB { x, k, stride });
    }
}

#[test]
fn resampling_gradients() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = tensor(&mut rng, &[4, 6, 3], -1.0, 1.0);
        check("upsample2", seed, &x, &OpSpec::Upsample2);
        check("downsample_avg2", seed, &x, &OpSpec::DownsampleAvg2);
        check("hflip", seed, &x, &OpSpec::HFlip);
    }
}

#[test]
fn blur_gradients() {
    let taps = gaussian_taps(1.5, 2);
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let x = tensor(&mut rng, &[8, 9, 2], -1.0, 1.0);
        check("gaussian_blur/valid", seed, &x, &OpSpec::Blur { taps: taps.clone(), valid: true });
        check("gaussian_blur/same", seed, &x, &OpSpec::Blur { taps: taps.clone(), valid: false });
    }
}

#[test]
fn elementwise_binary_gradients() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let a = tensor(&mut rng, &[5, 4], -1.0, 1.0);
        let b = tensor(&mut rng, &[5, 4], -1.0, 1.0);
        let denom = tensor(&mut rng, &[5, 4], 0.5, 2.0);
        check("add", seed, &a, &OpSpec::Add { other: b.clone() });
        check("sub/lhs", seed, &a, &OpSpec::SubLhs { other: b.clone() });
        check("sub/rhs", seed, &b, &OpSpec::SubRhs { other: a.clone() });
        check("mul", seed, &a, &OpSpec::Mul { other: b.clone() });
        check("div/num", seed, &a, &OpSpec::DivNum { den: denom.clone() });
        check("div/den", seed, &denom, &OpSpec::DivDen { num: a });
    }
}

#[test]
fn elementwise_unary_gradients() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let x = tensor(&mut rng, &[6, 5], -1.5, 1.5);
        check("tanh", seed, &x, &OpSpec::Tanh);
        check("sigmoid", seed, &x, &OpSpec::Sigmoid);
        check("square", seed, &x, &OpSpec::Square);
        check("scalar_mul", seed, &x, &OpSpec::ScalarMul(-2.5));
        check("scalar_add", seed, &x, &OpSpec::ScalarAdd(0.7));

        // Kink-aware sampling: abs at 0, clamp at {0,1}, pow at 0; sqrt_eps
        // needs inputs away from 0 to keep the curvature finite.
        let xa = tensor_guarded(&mut rng, &[6, 5], -1.0, 1.0, &[0.0], 0.02);
        check("abs", seed, &xa, &OpSpec::Abs);
        let xc = tensor_guarded(&mut rng, &[6, 5], -0.5, 1.5, &[0.0, 1.0], 0.02);
        check("clamp01", seed, &xc, &OpSpec::Clamp01);
        let xs = tensor(&mut rng, &[6, 5], 0.05, 2.0);
        check("sqrt_eps", seed, &xs, &OpSpec::SqrtEps);
        let xp = tensor(&mut rng, &[6, 5], 0.2, 2.0);
        check("pow_weight", seed, &xp, &OpSpec::PowWeight(0.4528));
    }
}

#[test]
fn reduction_gradients() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let x = tensor(&mut rng, &[7, 3], -1.0, 1.0);
        check("mean_reduce", seed, &x, &OpSpec::MeanReduce);
        check("sum_reduce", seed, &x, &OpSpec::SumReduce);
    }
}

#[test]
fn clamp01_range_and_subgradient() {
    let x = Tensor::new(vec![5], vec![-0.5, 0.0, 0.5, 1.0, 1.5]).unwrap();
    let mut g = Graph::new();
    let xn = g.leaf(x);
    let y = g.clamp01(xn);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.5, 1.0, 1.0]);
    let s = g.sum_reduce(y);
    let grads = g.backward(s).unwrap();
    // Zero outside the open interval (boundary included), identity inside.
    assert_eq!(grads.wrt(xn).unwrap().data(), &[0.0, 0.0, 1.0, 0.0, 0.0]);
}
