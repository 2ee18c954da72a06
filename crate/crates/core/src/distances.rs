//! The two distance measures the optimization and the audit share:
//! input-space `d1` = multi-scale structural similarity loss plus mean
//! absolute error, latent-space `d2` = element-RMS of the difference.
//! Both are differentiable through the graph engine.

use crate::diffcore::kernels::gaussian_taps;
use crate::diffcore::{Graph, GraphOps, Tensor};
use crate::error::{Error, Result};

/// Standard 5-scale weight vector; truncated and renormalized for fewer scales.
const BASE_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

pub const WINDOW_SIZE: usize = 11;
pub const WINDOW_SIGMA: f64 = 1.5;

/// Maximum scale count used anywhere in this crate; deeper pyramids need
/// images larger than the desk-scale fixtures provide.
pub const MAX_SCALES: usize = 3;

#[derive(Clone, Debug)]
pub struct MsSsimParams {
    pub scales: usize,
    /// Per-scale exponents, positive, summing to 1 within 1e-9.
    pub weights: Vec<f64>,
    /// 11-tap Gaussian window (sigma 1.5) for local statistics.
    pub window_taps: Vec<f32>,
    /// Small anti-alias blur applied before each 2x downsample.
    pub boundary_taps: Vec<f32>,
    pub c1: f32,
    pub c2: f32,
}

impl MsSsimParams {
    pub fn new(scales: usize) -> Result<Self> {
        if scales == 0 || scales > BASE_WEIGHTS.len() {
            return Err(Error::contract(format!("scales {} outside 1..=5", scales)));
        }
        let sum: f64 = BASE_WEIGHTS[..scales].iter().sum();
        let weights: Vec<f64> = BASE_WEIGHTS[..scales].iter().map(|w| w / sum).collect();
        Ok(MsSsimParams {
            scales,
            weights,
            window_taps: gaussian_taps(WINDOW_SIGMA, WINDOW_SIZE / 2),
            boundary_taps: gaussian_taps(1.0, 2),
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
        })
    }

    /// Default 3-scale configuration.
    pub fn standard() -> Self {
        Self::new(MAX_SCALES).expect("static scale count")
    }

    /// Smallest image side this configuration accepts.
    pub fn min_side_required(&self) -> usize {
        WINDOW_SIZE << (self.scales - 1)
    }

    /// Deepest pyramid (capped at 3 scales) that fits a `min_side` image.
    pub fn for_min_side(min_side: usize) -> Result<Self> {
        let mut scales = 0;
        while scales < MAX_SCALES && WINDOW_SIZE << scales <= min_side {
            scales += 1;
        }
        if scales == 0 {
            return Err(Error::contract(format!(
                "image min side {} below the {}-pixel window",
                min_side, WINDOW_SIZE
            )));
        }
        Self::new(scales)
    }

    fn validate_pair(&self, op: &'static str, x: &[usize], y: &[usize]) -> Result<()> {
        if x != y {
            return Err(Error::shape(op, format!("dims {:?} vs {:?}", x, y)));
        }
        if x.len() != 3 {
            return Err(Error::shape(op, format!("want rank 3, got {:?}", x)));
        }
        let min_side = x[0].min(x[1]);
        if min_side < self.min_side_required() {
            return Err(Error::contract(format!(
                "image min side {} too small for {} scales (needs >= {})",
                min_side,
                self.scales,
                self.min_side_required()
            )));
        }
        let wsum: f64 = self.weights.iter().sum();
        if (wsum - 1.0).abs() > 1e-9 || self.weights.iter().any(|&w| w <= 0.0) {
            return Err(Error::contract(format!("scale weights must be positive and sum to 1, got {:?}", self.weights)));
        }
        Ok(())
    }
}

/// Builds the multi-scale structural similarity score as a graph node.
///
/// Per scale, the contrast-structure map is averaged over pixels and
/// channels; the luminance term enters at the coarsest scale only. The
/// per-scale means are combined by weight exponents (single scale reduces to
/// the plain mean SSIM map). Negative per-scale means are floored at zero
/// before the fractional power.
pub fn ms_ssim_node<G: GraphOps>(g: &mut G, x: G::Id, y: G::Id, p: &MsSsimParams) -> Result<G::Id> {
    p.validate_pair("ms_ssim", &g.dims(x).to_vec(), &g.dims(y).to_vec())?;

    let mut scale_means: Vec<G::Id> = Vec::with_capacity(p.scales);
    let (mut xs, mut ys) = (x, y);
    for level in 0..p.scales {
        if level > 0 {
            let xb = g.gaussian_blur(xs, &p.boundary_taps, false)?;
            xs = g.downsample_avg2(xb)?;
            let yb = g.gaussian_blur(ys, &p.boundary_taps, false)?;
            ys = g.downsample_avg2(yb)?;
        }

        let mu_x = g.gaussian_blur(xs, &p.window_taps, true)?;
        let mu_y = g.gaussian_blur(ys, &p.window_taps, true)?;
        // Variance and covariance are shift-invariant; computing the local
        // statistics on values shifted by -1/2 sidesteps the cancellation
        // of blur(x^2) - mu^2 for [0,1]-ranged images (the difference is
        // ~50x smaller than the operands otherwise, which would cost two
        // decimal digits of gradient-check precision).
        let xs_c = g.scalar_add(xs, -0.5);
        let ys_c = g.scalar_add(ys, -0.5);
        let mu_xc = g.scalar_add(mu_x, -0.5);
        let mu_yc = g.scalar_add(mu_y, -0.5);
        let xx = g.square(xs_c);
        let yy = g.square(ys_c);
        let xy = g.mul(xs_c, ys_c)?;
        let exx = g.gaussian_blur(xx, &p.window_taps, true)?;
        let eyy = g.gaussian_blur(yy, &p.window_taps, true)?;
        let exy = g.gaussian_blur(xy, &p.window_taps, true)?;
        let mu_xx_c = g.square(mu_xc);
        let mu_yy_c = g.square(mu_yc);
        let mu_xy_c = g.mul(mu_xc, mu_yc)?;
        let var_x = g.sub(exx, mu_xx_c)?;
        let var_y = g.sub(eyy, mu_yy_c)?;
        let cov = g.sub(exy, mu_xy_c)?;
        let mu_xx = g.mul(mu_x, mu_x)?;
        let mu_yy = g.mul(mu_y, mu_y)?;
        let mu_xy = g.mul(mu_x, mu_y)?;

        let cov2 = g.scalar_mul(cov, 2.0);
        let cs_num = g.scalar_add(cov2, p.c2);
        let var_sum = g.add(var_x, var_y)?;
        let cs_den = g.scalar_add(var_sum, p.c2);
        let cs_map = g.div(cs_num, cs_den)?;

        if level + 1 == p.scales {
            let mu_xy2 = g.scalar_mul(mu_xy, 2.0);
            let l_num = g.scalar_add(mu_xy2, p.c1);
            let mu_sq_sum = g.add(mu_xx, mu_yy)?;
            let l_den = g.scalar_add(mu_sq_sum, p.c1);
            let l_map = g.div(l_num, l_den)?;
            let ssim_map = g.mul(l_map, cs_map)?;
            scale_means.push(g.mean_reduce(ssim_map));
        } else {
            scale_means.push(g.mean_reduce(cs_map));
        }
    }

    if p.scales == 1 {
        return Ok(scale_means[0]);
    }
    let mut acc = g.pow_weight(scale_means[0], p.weights[0] as f32);
    for level in 1..p.scales {
        let term = g.pow_weight(scale_means[level], p.weights[level] as f32);
        acc = g.mul(acc, term)?;
    }
    Ok(acc)
}

/// d1(a, b) = (1 - ms_ssim(a, b)) + mean|a - b|, in [0, 3].
pub fn d1_node<G: GraphOps>(g: &mut G, a: G::Id, b: G::Id, p: &MsSsimParams) -> Result<G::Id> {
    let ms = ms_ssim_node(g, a, b, p)?;
    let one = g.scalar_const(1.0);
    let ssim_loss = g.sub(one, ms)?;
    let diff = g.sub(a, b)?;
    let adiff = g.abs(diff);
    let mae = g.mean_reduce(adiff);
    g.add(ssim_loss, mae)
}

/// d2(za, zb) = sqrt(mean((za - zb)^2) + 1e-12): the L2 norm divided by the
/// square root of the element count, so thresholds carry across resolutions.
pub fn d2_node<G: GraphOps>(g: &mut G, za: G::Id, zb: G::Id) -> Result<G::Id> {
    if g.dims(za) != g.dims(zb) {
        return Err(Error::shape(
            "d2",
            format!("dims {:?} vs {:?}", g.dims(za), g.dims(zb)),
        ));
    }
    let diff = g.sub(za, zb)?;
    let sq = g.square(diff);
    let m = g.mean_reduce(sq);
    Ok(g.sqrt_eps(m))
}

pub fn ms_ssim(x: &Tensor, y: &Tensor, p: &MsSsimParams) -> Result<f64> {
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let yn = g.constant(y.clone());
    let out = ms_ssim_node(&mut g, xn, yn, p)?;
    Ok(g.scalar_value(out))
}

pub fn d1_with(a: &Tensor, b: &Tensor, p: &MsSsimParams) -> Result<f64> {
    let mut g = Graph::new();
    let an = g.constant(a.clone());
    let bn = g.constant(b.clone());
    let out = d1_node(&mut g, an, bn, p)?;
    Ok(g.scalar_value(out))
}

/// d1 with the deepest pyramid (up to 3 scales) the image size allows.
pub fn d1(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::shape("d1", format!("dims {:?} vs {:?}", a.dims(), b.dims())));
    }
    if a.rank() != 3 {
        return Err(Error::shape("d1", format!("want rank 3, got {:?}", a.dims())));
    }
    let p = MsSsimParams::for_min_side(a.h().min(a.w()))?;
    d1_with(a, b, &p)
}

pub fn d2(za: &Tensor, zb: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let an = g.constant(za.clone());
    let bn = g.constant(zb.clone());
    let out = d2_node(&mut g, an, bn)?;
    Ok(g.scalar_value(out))
}
