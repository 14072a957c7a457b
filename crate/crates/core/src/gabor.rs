//! 3D Gabor kernel generation from trainable parameters.
//!
//! Two forms are provided: the general two-part kernel (separate real and
//! imaginary parts, full rotation, anisotropic envelope) as a reference,
//! and the fused eight-parameter deep-learning form used inside
//! convolutional layers. The fused form is differentiable with respect to
//! all eight scalars, so a whole kernel bank can sit behind `conv3d` and
//! receive gradients through [`Graph::gabor_bank`].
//!
//! Coordinate convention: x maps to the D axis, y to H, z to W; kernels
//! are materialized row-major `[d, h, w]` with x slowest.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

/// Number of trainable scalars in the fused deep-learning kernel.
pub const GABOR_PARAMS: usize = 8;

/// Centered integer coordinate grid for a k³ kernel.
#[derive(Debug, Clone)]
pub struct CoordGrid<T> {
    k: usize,
    coords: Vec<[T; 3]>,
}

impl<T: Scalar> CoordGrid<T> {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn coords(&self) -> &[[T; 3]] {
        &self.coords
    }
}

/// Centered grid of k³ integer offsets, x slowest.
pub fn coordinate_grid<T: Scalar>(k: usize) -> Result<CoordGrid<T>> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::Invalid(format!(
            "kernel size must be odd and positive, got {}",
            k
        )));
    }
    let half = (k as isize - 1) / 2;
    let mut coords = Vec::with_capacity(k * k * k);
    for x in -half..=half {
        for y in -half..=half {
            for z in -half..=half {
                coords.push([
                    T::from_isize(x).unwrap(),
                    T::from_isize(y).unwrap(),
                    T::from_isize(z).unwrap(),
                ]);
            }
        }
    }
    Ok(CoordGrid { k, coords })
}

/// First row of R_y(θy)·R_z(θz) applied to each grid coordinate.
pub fn rotated_x<T: Scalar>(grid: &CoordGrid<T>, theta_y: T, theta_z: T) -> Vec<T> {
    let (cy, sy) = (theta_y.cos(), theta_y.sin());
    let (cz, sz) = (theta_z.cos(), theta_z.sin());
    grid.coords
        .iter()
        .map(|&[x, y, z]| cy * cz * x - cy * sz * y + sy * z)
        .collect()
}

/// Parameters of the general two-part 3D Gabor kernel.
#[derive(Debug, Clone)]
pub struct GaborFullParams<T> {
    pub amplitude: T,
    pub frequency: T,
    pub psi: T,
    /// Rotations about the x, y, z axes (radians).
    pub theta: [T; 3],
    /// Anisotropic Gaussian standard deviations (voxels).
    pub sigma: [T; 3],
}

/// Real and imaginary parts of the general Gabor kernel on a grid.
pub fn gabor_full<T: Scalar>(
    p: &GaborFullParams<T>,
    grid: &CoordGrid<T>,
) -> Result<(Vec<T>, Vec<T>)> {
    if p.sigma.iter().any(|&sg| sg <= T::zero()) {
        return Err(Error::Invalid("gabor sigma components must be positive".into()));
    }
    let [tx, ty, tz] = p.theta;
    let (cx, sx) = (tx.cos(), tx.sin());
    let (cy, sy) = (ty.cos(), ty.sin());
    let (cz, sz) = (tz.cos(), tz.sin());
    // R = R_x(θx)·R_y(θy)·R_z(θz), basic right-handed rotations
    let r = [
        [cy * cz, -cy * sz, sy],
        [cx * sz + sx * sy * cz, cx * cz - sx * sy * sz, -sx * cy],
        [sx * sz - cx * sy * cz, sx * cz + cx * sy * sz, cx * cy],
    ];
    let two_pi = s::<T>(std::f64::consts::TAU);
    let half = s::<T>(0.5);
    let mut re = Vec::with_capacity(grid.coords.len());
    let mut im = Vec::with_capacity(grid.coords.len());
    for &[x, y, z] in &grid.coords {
        let xp = r[0][0] * x + r[0][1] * y + r[0][2] * z;
        let yp = r[1][0] * x + r[1][1] * y + r[1][2] * z;
        let zp = r[2][0] * x + r[2][1] * y + r[2][2] * z;
        let q = (xp / p.sigma[0]) * (xp / p.sigma[0])
            + (yp / p.sigma[1]) * (yp / p.sigma[1])
            + (zp / p.sigma[2]) * (zp / p.sigma[2]);
        let env = (-half * q).exp();
        let phase = two_pi * p.frequency * xp + p.psi;
        re.push(p.amplitude * env * phase.cos());
        im.push(p.amplitude * env * phase.sin());
    }
    Ok((re, im))
}

/// The eight trainable scalars of the fused deep-learning Gabor kernel.
///
/// Sigma is stored through a softplus reparameterization so unconstrained
/// optimization cannot drive it non-positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaborDLParams<T> {
    raw_sigma: T,
    pub theta_y: T,
    pub theta_z: T,
    pub a_re: T,
    pub a_im: T,
    pub f_re: T,
    pub f_im: T,
    pub psi: T,
}

fn softplus<T: Scalar>(x: T) -> T {
    if x > s(30.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn inv_softplus<T: Scalar>(y: T) -> T {
    // ln(e^y - 1) = y + ln(1 - e^-y)
    y + (-(-y).exp()).ln_1p()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> GaborDLParams<T> {
    /// Build from an actual sigma value (must be positive).
    pub fn new(
        sigma: T,
        theta_y: T,
        theta_z: T,
        a_re: T,
        a_im: T,
        f_re: T,
        f_im: T,
        psi: T,
    ) -> Result<Self> {
        if sigma <= T::zero() {
            return Err(Error::Invalid(format!("gabor sigma must be positive, got {}", sigma)));
        }
        Ok(GaborDLParams {
            raw_sigma: inv_softplus(sigma),
            theta_y,
            theta_z,
            a_re,
            a_im,
            f_re,
            f_im,
            psi,
        })
    }

    pub fn sigma(&self) -> T {
        softplus(self.raw_sigma)
    }

    /// The unconstrained eight-vector actually exposed to the optimizer:
    /// `[raw_sigma, θy, θz, A_re, A_im, f_re, f_im, ψ]`.
    pub fn to_raw(&self) -> [T; GABOR_PARAMS] {
        [
            self.raw_sigma,
            self.theta_y,
            self.theta_z,
            self.a_re,
            self.a_im,
            self.f_re,
            self.f_im,
            self.psi,
        ]
    }

    pub fn from_raw(raw: [T; GABOR_PARAMS]) -> Self {
        GaborDLParams {
            raw_sigma: raw[0],
            theta_y: raw[1],
            theta_z: raw[2],
            a_re: raw[3],
            a_im: raw[4],
            f_re: raw[5],
            f_im: raw[6],
            psi: raw[7],
        }
    }
}

/// Fused Gabor kernel values on a grid.
pub fn gabor_dl<T: Scalar>(p: &GaborDLParams<T>, grid: &CoordGrid<T>) -> Result<Vec<T>> {
    if p.sigma() <= T::zero() {
        return Err(Error::Invalid("gabor sigma must be positive".into()));
    }
    Ok(gabor_dl_raw(&p.to_raw(), grid, None))
}

/// Kernel values from the raw parameter vector; when `partials` is given,
/// also writes d(kernel)/d(raw param) for each grid point, laid out
/// `[grid_point][param]`.
fn gabor_dl_raw<T: Scalar>(
    raw: &[T; GABOR_PARAMS],
    grid: &CoordGrid<T>,
    mut partials: Option<&mut Vec<[T; GABOR_PARAMS]>>,
) -> Vec<T> {
    let [raw_sigma, theta_y, theta_z, a_re, a_im, f_re, f_im, psi] = *raw;
    let sigma = softplus(raw_sigma);
    let dsigma_draw = sigmoid(raw_sigma);
    let (cy, sy) = (theta_y.cos(), theta_y.sin());
    let (cz, sz) = (theta_z.cos(), theta_z.sin());
    let two_pi = s::<T>(std::f64::consts::TAU);
    let half = s::<T>(0.5);
    let inv_s2 = (sigma * sigma).recip();
    let mut out = Vec::with_capacity(grid.coords.len());
    for &[x, y, z] in &grid.coords {
        let r2 = x * x + y * y + z * z;
        let env = (-half * r2 * inv_s2).exp();
        let xp = cy * cz * x - cy * sz * y + sy * z;
        let u = two_pi * f_re * xp + psi;
        let v = two_pi * f_im * xp + psi;
        let (cu, su) = (u.cos(), u.sin());
        let (cv, sv) = (v.cos(), v.sin());
        let sinusoid = a_re * cu + a_im * sv;
        out.push(env * sinusoid);
        if let Some(parts) = partials.as_deref_mut() {
            let denv_dsigma = env * r2 / (sigma * sigma * sigma);
            let ds_dxp = two_pi * (a_im * f_im * cv - a_re * f_re * su);
            let dxp_dty = -sy * cz * x + sy * sz * y + cy * z;
            let dxp_dtz = -cy * sz * x - cy * cz * y;
            parts.push([
                denv_dsigma * sinusoid * dsigma_draw,
                env * ds_dxp * dxp_dty,
                env * ds_dxp * dxp_dtz,
                env * cu,
                env * sv,
                -env * a_re * su * two_pi * xp,
                env * a_im * cv * two_pi * xp,
                env * (a_im * cv - a_re * su),
            ]);
        }
    }
    out
}

/// Kernel mode of a convolutional layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BankMode {
    Direct,
    Gabor,
}

/// Parameters behind one convolutional layer's weights: either direct
/// k³-per-connection weights or one Gabor parameter set per
/// (output-channel, input-channel) pair.
#[derive(Debug, Clone)]
pub struct KernelBank<T> {
    pub c_out: usize,
    pub c_in: usize,
    pub k: usize,
    pub params: BankParams<T>,
}

#[derive(Debug, Clone)]
pub enum BankParams<T> {
    /// Row-major `[c_out, c_in, k, k, k]` weights.
    Direct(Tensor<T>),
    /// `c_out * c_in` parameter sets, output channel slowest.
    Gabor(Vec<GaborDLParams<T>>),
}

impl<T: Scalar> KernelBank<T> {
    pub fn mode(&self) -> BankMode {
        match self.params {
            BankParams::Direct(_) => BankMode::Direct,
            BankParams::Gabor(_) => BankMode::Gabor,
        }
    }

    /// Trainable weight parameters (biases are accounted at layer level).
    pub fn trainable_count(&self) -> usize {
        match self.params {
            BankParams::Direct(_) => self.k * self.k * self.k * self.c_in * self.c_out,
            BankParams::Gabor(_) => GABOR_PARAMS * self.c_in * self.c_out,
        }
    }

    /// Raw parameter tensor `[c_out, c_in, 8]` of a gabor-mode bank.
    pub fn gabor_raw_tensor(&self) -> Result<Tensor<T>> {
        match &self.params {
            BankParams::Gabor(ps) => {
                let mut data = Vec::with_capacity(ps.len() * GABOR_PARAMS);
                for p in ps {
                    data.extend_from_slice(&p.to_raw());
                }
                Tensor::from_vec(&[self.c_out, self.c_in, GABOR_PARAMS], data)
            }
            BankParams::Direct(_) => Err(Error::Invalid(
                "direct-mode bank has no gabor parameters".into(),
            )),
        }
    }
}

/// Materialize a gabor-mode bank into a `[c_out, c_in, k, k, k]` tensor.
pub fn materialize_bank<T: Scalar>(bank: &KernelBank<T>, grid: &CoordGrid<T>) -> Result<Tensor<T>> {
    let ps = match &bank.params {
        BankParams::Gabor(ps) => ps,
        BankParams::Direct(_) => {
            return Err(Error::Invalid(
                "direct-mode banks are already tensors; materialize applies to gabor mode".into(),
            ))
        }
    };
    if grid.k != bank.k {
        return Err(Error::Shape(format!(
            "grid k={} does not match bank k={}",
            grid.k, bank.k
        )));
    }
    let kk = bank.k * bank.k * bank.k;
    let mut data = Vec::with_capacity(ps.len() * kk);
    for p in ps {
        data.extend(gabor_dl(p, grid)?);
    }
    Tensor::from_vec(&[bank.c_out, bank.c_in, bank.k, bank.k, bank.k], data)
}

/// Seeded initialization of a gabor-mode bank.
///
/// Sigma uniform in [1, k/2], angles and phase uniform in [-π, π],
/// amplitudes zero-mean normal scaled by 1/sqrt(c_in·k³), frequencies
/// uniform in [0, 0.5] cycles/voxel (Nyquist at init; unconstrained after).
pub fn init_gabor<T: Scalar>(c_in: usize, c_out: usize, k: usize, seed: u64) -> Result<KernelBank<T>> {
    if c_in == 0 || c_out == 0 {
        return Err(Error::Invalid("channel counts must be positive".into()));
    }
    if k == 0 || k % 2 == 0 {
        return Err(Error::Invalid(format!("kernel size must be odd, got {}", k)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma_hi = (k as f64 / 2.0).max(1.0 + 1e-9);
    let amp_scale = 1.0 / ((c_in * k * k * k) as f64).sqrt();
    let normal = Normal::new(0.0, amp_scale).unwrap();
    let pi = std::f64::consts::PI;
    let mut params = Vec::with_capacity(c_out * c_in);
    for _ in 0..c_out * c_in {
        let sigma = rng.gen_range(1.0..sigma_hi);
        let theta_y = rng.gen_range(-pi..pi);
        let theta_z = rng.gen_range(-pi..pi);
        let a_re = normal.sample(&mut rng);
        let a_im = normal.sample(&mut rng);
        let f_re = rng.gen_range(0.0..0.5);
        let f_im = rng.gen_range(0.0..0.5);
        let psi = rng.gen_range(-pi..pi);
        params.push(GaborDLParams::new(
            s(sigma),
            s(theta_y),
            s(theta_z),
            s(a_re),
            s(a_im),
            s(f_re),
            s(f_im),
            s(psi),
        )?);
    }
    Ok(KernelBank {
        c_out,
        c_in,
        k,
        params: BankParams::Gabor(params),
    })
}

impl<T: Scalar> Graph<T> {
    /// Materialize a `[c_out, c_in, 8]` raw Gabor parameter tensor into
    /// `[c_out, c_in, k, k, k]` convolution weights, differentiably.
    pub fn gabor_bank(&mut self, raw: Var, k: usize) -> Result<Var> {
        let v = self.value(raw);
        if v.shape().len() != 3 || v.shape()[2] != GABOR_PARAMS {
            return Err(Error::Shape(format!(
                "gabor raw params must be [c_out, c_in, 8], got {:?}",
                v.shape()
            )));
        }
        let (c_out, c_in) = (v.shape()[0], v.shape()[1]);
        let grid = coordinate_grid::<T>(k)?;
        let kk = k * k * k;
        let pairs = c_out * c_in;
        let mut data = Vec::with_capacity(pairs * kk);
        for pair in 0..pairs {
            let raw8: [T; GABOR_PARAMS] = v.data()[pair * GABOR_PARAMS..(pair + 1) * GABOR_PARAMS]
                .try_into()
                .unwrap();
            data.extend(gabor_dl_raw(&raw8, &grid, None));
        }
        let out = Tensor::from_vec(&[c_out, c_in, k, k, k], data)?;
        Ok(self.push_op(
            out,
            vec![raw],
            Box::new(move |ctx| {
                let rawd = ctx.inputs[0].data();
                let go = ctx.grad.data();
                let mut draw = Tensor::zeros(ctx.inputs[0].shape());
                let dd = draw.data_mut();
                let mut parts: Vec<[T; GABOR_PARAMS]> = Vec::with_capacity(kk);
                for pair in 0..pairs {
                    parts.clear();
                    let raw8: [T; GABOR_PARAMS] = rawd
                        [pair * GABOR_PARAMS..(pair + 1) * GABOR_PARAMS]
                        .try_into()
                        .unwrap();
                    gabor_dl_raw(&raw8, &grid, Some(&mut parts));
                    let gslice = &go[pair * kk..(pair + 1) * kk];
                    let dst = &mut dd[pair * GABOR_PARAMS..(pair + 1) * GABOR_PARAMS];
                    for (gp, &gv) in parts.iter().zip(gslice) {
                        for (d, &p) in dst.iter_mut().zip(gp.iter()) {
                            *d += gv * p;
                        }
                    }
                }
                vec![draw]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_grad, max_rel_error};
    use proptest::prelude::*;

    #[test]
    fn grid_shapes_and_center() {
        let g1 = coordinate_grid::<f64>(1).unwrap();
        assert_eq!(g1.coords(), &[[0.0, 0.0, 0.0]]);
        let g3 = coordinate_grid::<f64>(3).unwrap();
        assert_eq!(g3.coords().len(), 27);
        for axis in 0..3 {
            let mut vals: Vec<f64> = g3.coords().iter().map(|c| c[axis]).collect();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            assert_eq!(vals, vec![-1.0, 0.0, 1.0]);
        }
        assert_eq!(g3.coords()[13], [0.0, 0.0, 0.0]);
        let g7 = coordinate_grid::<f64>(7).unwrap();
        assert_eq!(g7.coords().len(), 343);
        assert_eq!(g7.coords()[0], [-3.0, -3.0, -3.0]);
        assert!(coordinate_grid::<f64>(4).is_err());
        assert!(coordinate_grid::<f64>(0).is_err());
    }

    #[test]
    fn rotated_x_basics() {
        let grid = coordinate_grid::<f64>(3).unwrap();
        let id = rotated_x(&grid, 0.0, 0.0);
        for (r, c) in id.iter().zip(grid.coords()) {
            assert_eq!(*r, c[0]);
        }
        // θz = π/2 sends (0,1,0) to x' = -1
        let g = CoordGrid {
            k: 1,
            coords: vec![[0.0, 1.0, 0.0]],
        };
        let r = rotated_x(&g, 0.0, std::f64::consts::FRAC_PI_2);
        assert!((r[0] + 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn rotated_x_bounded_by_norm(ty in -3.2f64..3.2, tz in -3.2f64..3.2) {
            let grid = coordinate_grid::<f64>(5).unwrap();
            let xs = rotated_x(&grid, ty, tz);
            for (xp, c) in xs.iter().zip(grid.coords()) {
                let norm = (c[0]*c[0] + c[1]*c[1] + c[2]*c[2]).sqrt();
                prop_assert!(xp.abs() <= norm + 1e-12);
            }
        }

        #[test]
        fn envelope_bounds_kernel(
            sigma in 0.5f64..4.0,
            ty in -3.0f64..3.0,
            tz in -3.0f64..3.0,
            a_re in -2.0f64..2.0,
            a_im in -2.0f64..2.0,
            f_re in 0.0f64..0.5,
            f_im in 0.0f64..0.5,
            psi in -3.0f64..3.0,
        ) {
            let grid = coordinate_grid::<f64>(5).unwrap();
            let p = GaborDLParams::new(sigma, ty, tz, a_re, a_im, f_re, f_im, psi).unwrap();
            let vals = gabor_dl(&p, &grid).unwrap();
            for v in vals {
                prop_assert!(v.abs() <= a_re.abs() + a_im.abs() + 1e-12);
            }
        }
    }

    #[test]
    fn pure_gaussian_cases() {
        let grid = coordinate_grid::<f64>(5).unwrap();
        let p = GaborDLParams::new(1.5, 0.3, -0.7, 1.0, 0.0, 0.0, 0.2, 0.0).unwrap();
        let vals = gabor_dl(&p, &grid).unwrap();
        // A_re=1, f_re=0, psi=0: pure spherical Gaussian with center 1
        assert!((vals[62] - 1.0).abs() < 1e-12);
        for (v, c) in vals.iter().zip(grid.coords()) {
            let r2 = c[0] * c[0] + c[1] * c[1] + c[2] * c[2];
            let want = (-0.5 * r2 / (1.5 * 1.5)).exp();
            assert!((v - want).abs() < 1e-12);
        }
        // A_im=1, f_im=0, psi=π/2: sin(π/2)=1, same Gaussian
        let p2 =
            GaborDLParams::new(1.5, 0.3, -0.7, 0.0, 1.0, 0.4, 0.0, std::f64::consts::FRAC_PI_2)
                .unwrap();
        let vals2 = gabor_dl(&p2, &grid).unwrap();
        for (a, b) in vals.iter().zip(&vals2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn center_value_formula() {
        let grid = coordinate_grid::<f64>(3).unwrap();
        let p = GaborDLParams::new(2.0, 0.5, 1.1, 0.7, -0.4, 0.31, 0.12, 0.9).unwrap();
        let vals = gabor_dl(&p, &grid).unwrap();
        let want = 0.7 * 0.9f64.cos() + (-0.4) * 0.9f64.sin();
        assert!((vals[13] - want).abs() < 1e-12);
    }

    #[test]
    fn full_form_reduces_to_dl_form() {
        let grid = coordinate_grid::<f64>(5).unwrap();
        let sigma = 1.7;
        let full = GaborFullParams {
            amplitude: 1.3,
            frequency: 0.27,
            psi: 0.4,
            theta: [0.9, 0.6, -1.1], // θx must be irrelevant under symmetric σ
            sigma: [sigma; 3],
        };
        let (re, _) = gabor_full(&full, &grid).unwrap();
        let dl = GaborDLParams::new(sigma, 0.6, -1.1, 1.3, 0.0, 0.27, 0.0, 0.4).unwrap();
        let dl_vals = gabor_dl(&dl, &grid).unwrap();
        for (a, b) in re.iter().zip(&dl_vals) {
            assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
        }
    }

    #[test]
    fn full_form_linearity_and_zero_frequency() {
        let grid = coordinate_grid::<f64>(3).unwrap();
        let base = GaborFullParams {
            amplitude: 1.0,
            frequency: 0.0,
            psi: 0.0,
            theta: [0.2, -0.4, 0.8],
            sigma: [1.0, 1.5, 2.0],
        };
        let (re1, im1) = gabor_full(&base, &grid).unwrap();
        for v in &im1 {
            assert!(v.abs() < 1e-12);
        }
        let doubled = GaborFullParams {
            amplitude: 2.0,
            ..base.clone()
        };
        let (re2, _) = gabor_full(&doubled, &grid).unwrap();
        for (a, b) in re1.iter().zip(&re2) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
        let bad = GaborFullParams {
            sigma: [1.0, -0.5, 1.0],
            ..base
        };
        assert!(gabor_full(&bad, &grid).is_err());
    }

    #[test]
    fn harmonic_addition_when_frequencies_match() {
        let grid = coordinate_grid::<f64>(5).unwrap();
        let (a_re, a_im, f, psi) = (0.8, -0.5, 0.21, 0.35);
        let p = GaborDLParams::new(1.4, 0.3, 0.7, a_re, a_im, f, f, psi).unwrap();
        let vals = gabor_dl(&p, &grid).unwrap();
        let amp = (a_re * a_re + a_im * a_im).sqrt();
        let phi = a_re.atan2(a_im);
        let xs = rotated_x(&grid, 0.3, 0.7);
        for ((v, xp), c) in vals.iter().zip(&xs).zip(grid.coords()) {
            let r2 = c[0] * c[0] + c[1] * c[1] + c[2] * c[2];
            let env = (-0.5 * r2 / (1.4f64 * 1.4)).exp();
            let want = env * amp * (std::f64::consts::TAU * f * xp + psi + phi).sin();
            assert!((v - want).abs() <= 1e-12, "{} vs {}", v, want);
        }
    }

    #[test]
    fn rotation_consistency_via_rotated_inputs() {
        // gabor_dl with angles equals the zero-angle sinusoid evaluated at
        // rotated x' (envelope is rotation invariant).
        let grid = coordinate_grid::<f64>(3).unwrap();
        let p = GaborDLParams::new(1.2, 0.5, -0.9, 0.6, 0.3, 0.18, 0.33, 0.1).unwrap();
        let vals = gabor_dl(&p, &grid).unwrap();
        let xs = rotated_x(&grid, 0.5, -0.9);
        for ((v, xp), c) in vals.iter().zip(&xs).zip(grid.coords()) {
            let r2 = c[0] * c[0] + c[1] * c[1] + c[2] * c[2];
            let env = (-0.5 * r2 / (1.2f64 * 1.2)).exp();
            let tau = std::f64::consts::TAU;
            let want =
                env * (0.6 * (tau * 0.18 * xp + 0.1).cos() + 0.3 * (tau * 0.33 * xp + 0.1).sin());
            assert!((v - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn invalid_sigma_rejected() {
        assert!(GaborDLParams::new(0.0, 0.0, 0.0, 1.0, 0.0, 0.1, 0.1, 0.0).is_err());
        assert!(GaborDLParams::new(-1.0, 0.0, 0.0, 1.0, 0.0, 0.1, 0.1, 0.0).is_err());
    }

    #[test]
    fn sigma_roundtrips_through_reparameterization() {
        for sigma in [0.3f64, 1.0, 2.5, 10.0] {
            let p = GaborDLParams::new(sigma, 0.0, 0.0, 1.0, 0.0, 0.1, 0.1, 0.0).unwrap();
            assert!((p.sigma() - sigma).abs() < 1e-10);
        }
    }

    #[test]
    fn init_is_deterministic_and_in_range() {
        let a = init_gabor::<f64>(4, 8, 7, 42).unwrap();
        let b = init_gabor::<f64>(4, 8, 7, 42).unwrap();
        let (pa, pb) = match (&a.params, &b.params) {
            (BankParams::Gabor(x), BankParams::Gabor(y)) => (x, y),
            _ => unreachable!(),
        };
        assert_eq!(pa, pb);
        assert_eq!(pa.len(), 32);
        let grid = coordinate_grid::<f64>(7).unwrap();
        for p in pa {
            assert!(p.f_re >= 0.0 && p.f_re <= 0.5);
            assert!(p.f_im >= 0.0 && p.f_im <= 0.5);
            assert!(p.sigma() >= 1.0 && p.sigma() <= 3.5);
            let bound = p.a_re.abs() + p.a_im.abs();
            for v in gabor_dl(p, &grid).unwrap() {
                assert!(v.is_finite() && v.abs() <= bound + 1e-12);
            }
        }
    }

    #[test]
    fn bank_parameter_counts() {
        let bank = init_gabor::<f64>(4, 8, 3, 0).unwrap();
        assert_eq!(bank.trainable_count(), 8 * 4 * 8);
        let bank7 = init_gabor::<f64>(4, 8, 7, 0).unwrap();
        assert_eq!(bank7.trainable_count(), bank.trainable_count());
        for k in [3usize, 5, 7, 9] {
            let b = init_gabor::<f64>(2, 3, k, 1).unwrap();
            assert_eq!(b.trainable_count(), 8 * 2 * 3);
        }
        let direct = KernelBank {
            c_out: 3,
            c_in: 2,
            k: 3,
            params: BankParams::Direct(Tensor::zeros(&[3, 2, 3, 3, 3])),
        };
        assert_eq!(direct.trainable_count(), 27 * 2 * 3);
        let grid = coordinate_grid::<f64>(3).unwrap();
        assert!(materialize_bank(&direct, &grid).is_err());
    }

    #[test]
    fn materialized_bank_matches_per_pair_kernels() {
        let bank = init_gabor::<f64>(2, 3, 5, 9).unwrap();
        let grid = coordinate_grid::<f64>(5).unwrap();
        let t = materialize_bank(&bank, &grid).unwrap();
        assert_eq!(t.shape(), &[3, 2, 5, 5, 5]);
        let ps = match &bank.params {
            BankParams::Gabor(ps) => ps,
            _ => unreachable!(),
        };
        for (i, p) in ps.iter().enumerate() {
            let vals = gabor_dl(p, &grid).unwrap();
            assert_eq!(&t.data()[i * 125..(i + 1) * 125], &vals[..]);
        }
    }

    #[test]
    fn gabor_bank_gradients_match_finite_differences() {
        let bank = init_gabor::<f64>(2, 2, 3, 5).unwrap();
        let raw0 = bank.gabor_raw_tensor().unwrap();
        // generic loss: weighted sum of kernel values
        let weights: Vec<f64> = (0..4 * 27).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3).collect();
        let wt = Tensor::from_vec(&[2, 2, 3, 3, 3], weights).unwrap();
        let run = |raw: &Tensor<f64>| {
            let mut g = Graph::<f64>::new();
            let rv = g.leaf(raw.clone());
            let bankv = g.gabor_bank(rv, 3).unwrap();
            let wv = g.constant(wt.clone());
            let p = g.mul(bankv, wv);
            let l = g.sum(p);
            (g, rv, l)
        };
        let (mut g, rv, l) = run(&raw0);
        g.backward(l).unwrap();
        let fd = finite_diff_grad(
            |t| {
                let (gr, _, l) = run(t);
                gr.value(l).item()
            },
            &raw0,
            1e-5,
        );
        assert!(max_rel_error(g.grad(rv).unwrap(), &fd) <= 1e-4);
        // no dead parameter paths
        for (i, &gv) in g.grad(rv).unwrap().data().iter().enumerate() {
            assert!(gv != 0.0, "raw parameter {} received zero gradient", i);
        }
    }
}
