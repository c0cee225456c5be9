//! Fourier pseudo-spectral solvers on periodic grids, integrating-factor RK4
//! in time (linear terms exact), 2/3-rule dealiasing of the quadratic flux.
//!
//! 1D: `u_t + alpha (u^2)_x - beta u_xx + gamma u_xxx = delta(t, x)`.
//! 2D: `u_t + div(u (x) u) = beta lap(u)` for the velocity pair (u, v).
//!
//! Output values are averages over each output cell (a box filter applied in
//! spectral space), so the output-grid mean equals the exact domain mean.
//!
//! A weak high-order spectral viscosity `-rate * (|m| / m_c)^16` acts on the
//! top of the retained band so inviscid shocks stay bounded.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;

use super::fft::{freq, Fft1, Fft2};
use super::{forcing_delta, uniform_times, Forcing1D, Init2D, PdeCoeffs, Trajectory, BLOWUP_THRESHOLD};
use crate::error::{MagnetError, Result};
use crate::mesh::periodic_grid;

const FILTER_ORDER: i32 = 16;
/// Filter rate at the cut-off, in units of the cut-off wavenumber per unit time.
const FILTER_STRENGTH: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SolverOptions {
    /// Internal points per axis at least this many.
    pub min_internal: Option<usize>,
    /// Extra spatial refinement factor of the internal grid.
    pub space_refine: usize,
    /// Extra time-step refinement factor.
    pub time_refine: usize,
    pub cfl: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            min_internal: None,
            space_refine: 1,
            time_refine: 1,
            cfl: 0.4,
        }
    }
}

/// Internal grid: `n * ceil(max(4n, min) / n)` points per axis, times the refinement.
fn internal_size(n: usize, min_default: usize, opts: &SolverOptions) -> usize {
    let min = opts.min_internal.unwrap_or(min_default);
    let target = (4 * n).max(min);
    n * target.div_ceil(n) * opts.space_refine.max(1)
}

fn check_common(n: usize, n_t: usize, t_end: f64) -> Result<()> {
    if n < 2 || n_t < 2 {
        return Err(MagnetError::Invalid(format!(
            "need at least 2 points and 2 frames, got {n} and {n_t}"
        )));
    }
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(MagnetError::Invalid(format!("t_end = {t_end}")));
    }
    Ok(())
}

fn filter_rate(m: f64, m_c: f64, dk: f64) -> f64 {
    FILTER_STRENGTH * m_c * dk * (m.abs() / m_c).powi(FILTER_ORDER)
}

fn blowup(time: f64, max_abs: f64, coeffs: &PdeCoeffs) -> MagnetError {
    MagnetError::SolverBlowup {
        time,
        max_abs,
        coefficients: coeffs.to_string(),
    }
}

/// Largest |re| (NaN if any entry is NaN).
fn max_abs(v: &[Complex64]) -> f64 {
    let mut m = 0.0f64;
    for c in v {
        if c.re.is_nan() {
            return f64::NAN;
        }
        m = m.max(c.re.abs());
    }
    m
}

/// `sin(pi m / n) / (pi m / n)`: the box-average factor of bin frequency `m`
/// for cells of width `L / n`.
fn box_factor(m: f64, n: usize) -> f64 {
    if m == 0.0 {
        return 1.0;
    }
    let a = PI * m / n as f64;
    a.sin() / a
}

fn steps_for(frame_dt: f64, dt_cfl: f64, opts: &SolverOptions) -> usize {
    let base = if dt_cfl.is_finite() && dt_cfl > 0.0 {
        (frame_dt / dt_cfl).ceil().max(1.0) as usize
    } else {
        1
    };
    base * opts.time_refine.max(1)
}

pub fn solve_1d(
    coeffs: &PdeCoeffs,
    forcing: &Forcing1D,
    n_x: usize,
    n_t: usize,
    t_end: f64,
) -> Result<Trajectory> {
    solve_1d_with(coeffs, forcing, n_x, n_t, t_end, &SolverOptions::default())
}

struct Spectral1d<'a> {
    n: usize,
    k: Vec<f64>,
    mask: Vec<bool>,
    alpha: f64,
    forcing: &'a Forcing1D,
    fft: Fft1,
    work: Vec<Complex64>,
}

impl Spectral1d<'_> {
    /// Nonlinear flux plus forcing, in spectral space.
    fn rhs(&mut self, uh: &[Complex64], t: f64, out: &mut [Complex64]) {
        self.work.copy_from_slice(uh);
        self.fft.inverse(&mut self.work);
        for w in self.work.iter_mut() {
            *w = Complex64::new(w.re * w.re, 0.0);
        }
        self.fft.forward(&mut self.work);
        for m in 0..self.n {
            out[m] = if self.mask[m] {
                Complex64::new(0.0, -self.alpha * self.k[m]) * self.work[m]
            } else {
                Complex64::new(0.0, 0.0)
            };
        }
        let n = self.n as f64;
        for term in &self.forcing.terms {
            let l = term.wavenumber as usize % self.n;
            if l == 0 {
                continue;
            }
            let e = Complex64::from_polar(n * term.amplitude / 2.0, term.omega * t + term.phase);
            // n A e^{i theta} / (2i) at bin l, its conjugate at bin n - l.
            let c = Complex64::new(e.im, -e.re);
            out[l] += c;
            out[self.n - l] += c.conj();
        }
    }
}

pub fn solve_1d_with(
    coeffs: &PdeCoeffs,
    forcing: &Forcing1D,
    n_x: usize,
    n_t: usize,
    t_end: f64,
    opts: &SolverOptions,
) -> Result<Trajectory> {
    check_common(n_x, n_t, t_end)?;
    if coeffs.tag.dim() != 1 {
        return Err(MagnetError::Invalid(format!("{} is not a 1D family", coeffs.tag)));
    }
    let length = forcing.length;
    let ni = internal_size(n_x, 256, opts);
    let stride = ni / n_x;
    let dx = length / ni as f64;
    let dk = 2.0 * PI / length;
    let m_c = ni as f64 / 3.0;
    let ms: Vec<f64> = (0..ni).map(|m| freq(m, ni)).collect();
    let lin: Vec<Complex64> = ms
        .iter()
        .map(|&m| {
            let k = dk * m;
            Complex64::new(
                -coeffs.beta * k * k - filter_rate(m, m_c, dk),
                coeffs.gamma * k * k * k,
            )
        })
        .collect();
    let mut sp = Spectral1d {
        n: ni,
        k: ms.iter().map(|&m| dk * m).collect(),
        mask: ms.iter().map(|&m| m.abs() < m_c).collect(),
        alpha: coeffs.alpha,
        forcing,
        fft: Fft1::new(ni),
        work: vec![Complex64::new(0.0, 0.0); ni],
    };

    let mut uh: Vec<Complex64> = (0..ni)
        .map(|j| Complex64::new(forcing_delta(forcing, 0.0, j as f64 * dx), 0.0))
        .collect();
    sp.fft.forward(&mut uh);
    for (v, &keep) in uh.iter_mut().zip(&sp.mask) {
        if !keep {
            *v = Complex64::new(0.0, 0.0);
        }
    }

    let times = uniform_times(n_t, t_end);
    let mut frames = Vec::with_capacity(n_t * n_x);
    let mut phys = vec![Complex64::new(0.0, 0.0); ni];
    let mut avg = vec![Complex64::new(0.0, 0.0); ni];
    let boxf: Vec<f64> = ms.iter().map(|&m| box_factor(m, n_x)).collect();
    let zero = Complex64::new(0.0, 0.0);
    let (mut k1, mut k2, mut k3, mut k4, mut stage) = (
        vec![zero; ni],
        vec![zero; ni],
        vec![zero; ni],
        vec![zero; ni],
        vec![zero; ni],
    );
    for (frame, &t_frame) in times.iter().enumerate() {
        if frame > 0 {
            let t0 = times[frame - 1];
            let frame_dt = t_frame - t0;
            let umax = max_abs(&phys);
            let speed = 2.0 * coeffs.alpha.abs() * umax;
            let steps = steps_for(frame_dt, opts.cfl * dx / speed, opts);
            let dt = frame_dt / steps as f64;
            let e1: Vec<Complex64> = lin.iter().map(|l| (l * (dt / 2.0)).exp()).collect();
            let e2: Vec<Complex64> = e1.iter().map(|e| e * e).collect();
            for s in 0..steps {
                let t = t0 + s as f64 * dt;
                sp.rhs(&uh, t, &mut k1);
                for m in 0..ni {
                    stage[m] = e1[m] * (uh[m] + k1[m] * (dt / 2.0));
                }
                sp.rhs(&stage, t + dt / 2.0, &mut k2);
                for m in 0..ni {
                    stage[m] = e1[m] * uh[m] + k2[m] * (dt / 2.0);
                }
                sp.rhs(&stage, t + dt / 2.0, &mut k3);
                for m in 0..ni {
                    stage[m] = e2[m] * uh[m] + e1[m] * k3[m] * dt;
                }
                sp.rhs(&stage, t + dt, &mut k4);
                for m in 0..ni {
                    uh[m] = e2[m] * uh[m]
                        + (e2[m] * k1[m] + e1[m] * (k2[m] + k3[m]) * 2.0 + k4[m]) * (dt / 6.0);
                }
            }
        }
        phys.copy_from_slice(&uh);
        sp.fft.inverse(&mut phys);
        let umax = max_abs(&phys);
        if !(umax <= BLOWUP_THRESHOLD) {
            return Err(blowup(t_frame, umax, coeffs));
        }
        for m in 0..ni {
            avg[m] = uh[m] * boxf[m];
        }
        sp.fft.inverse(&mut avg);
        frames.extend((0..n_x).map(|i| avg[i * stride].re as f32));
    }
    let mesh = periodic_grid(1, n_x, length)?;
    Trajectory::new(frames, times, mesh, 1)
}

pub fn solve_2d(
    coeffs: &PdeCoeffs,
    init_u: &Init2D,
    init_v: &Init2D,
    n_side: usize,
    n_t: usize,
    t_end: f64,
) -> Result<Trajectory> {
    solve_2d_with(coeffs, init_u, init_v, n_side, n_t, t_end, &SolverOptions::default())
}

struct Spectral2d {
    n: usize,
    kx: Vec<f64>,
    ky: Vec<f64>,
    mask: Vec<bool>,
    fft: Fft2,
    u: Vec<Complex64>,
    v: Vec<Complex64>,
    uu: Vec<Complex64>,
    uv: Vec<Complex64>,
}

impl Spectral2d {
    /// `-div(u (x) u)` for both components.
    fn rhs(&mut self, uh: &[Complex64], vh: &[Complex64], ou: &mut [Complex64], ov: &mut [Complex64]) {
        self.u.copy_from_slice(uh);
        self.v.copy_from_slice(vh);
        self.fft.inverse(&mut self.u);
        self.fft.inverse(&mut self.v);
        for i in 0..self.u.len() {
            let (a, b) = (self.u[i].re, self.v[i].re);
            self.uu[i] = Complex64::new(a * a, 0.0);
            self.uv[i] = Complex64::new(a * b, 0.0);
            // Reuse `v` for v*v.
            self.v[i] = Complex64::new(b * b, 0.0);
        }
        self.fft.forward(&mut self.uu);
        self.fft.forward(&mut self.uv);
        self.fft.forward(&mut self.v);
        let n = self.n;
        for my in 0..n {
            for mx in 0..n {
                let i = my * n + mx;
                if !self.mask[i] {
                    ou[i] = Complex64::new(0.0, 0.0);
                    ov[i] = Complex64::new(0.0, 0.0);
                    continue;
                }
                let ikx = Complex64::new(0.0, self.kx[mx]);
                let iky = Complex64::new(0.0, self.ky[my]);
                ou[i] = -(ikx * self.uu[i] + iky * self.uv[i]);
                ov[i] = -(ikx * self.uv[i] + iky * self.v[i]);
            }
        }
    }
}

pub fn solve_2d_with(
    coeffs: &PdeCoeffs,
    init_u: &Init2D,
    init_v: &Init2D,
    n_side: usize,
    n_t: usize,
    t_end: f64,
    opts: &SolverOptions,
) -> Result<Trajectory> {
    check_common(n_side, n_t, t_end)?;
    if coeffs.tag.dim() != 2 {
        return Err(MagnetError::Invalid(format!("{} is not a 2D family", coeffs.tag)));
    }
    let length = init_u.length;
    let ni = internal_size(n_side, 128, opts);
    let stride = ni / n_side;
    let dx = length / ni as f64;
    let dk = 2.0 * PI / length;
    let m_c = ni as f64 / 3.0;
    let ms: Vec<f64> = (0..ni).map(|m| freq(m, ni)).collect();
    let mut lin = vec![Complex64::new(0.0, 0.0); ni * ni];
    let mut mask = vec![false; ni * ni];
    for my in 0..ni {
        for mx in 0..ni {
            let (kx, ky) = (dk * ms[mx], dk * ms[my]);
            let i = my * ni + mx;
            lin[i] = Complex64::new(
                -coeffs.beta * (kx * kx + ky * ky)
                    - filter_rate(ms[mx], m_c, dk)
                    - filter_rate(ms[my], m_c, dk),
                0.0,
            );
            mask[i] = ms[mx].abs() < m_c && ms[my].abs() < m_c;
        }
    }
    let zero = Complex64::new(0.0, 0.0);
    let mut sp = Spectral2d {
        n: ni,
        kx: ms.iter().map(|&m| dk * m).collect(),
        ky: ms.iter().map(|&m| dk * m).collect(),
        mask,
        fft: Fft2::new(ni),
        u: vec![zero; ni * ni],
        v: vec![zero; ni * ni],
        uu: vec![zero; ni * ni],
        uv: vec![zero; ni * ni],
    };
    let init = |f: &Init2D| -> Vec<Complex64> {
        let mut out = Vec::with_capacity(ni * ni);
        for iy in 0..ni {
            for ix in 0..ni {
                out.push(Complex64::new(f.eval(ix as f64 * dx, iy as f64 * dx), 0.0));
            }
        }
        out
    };
    let mut uh = init(init_u);
    let mut vh = init(init_v);
    sp.fft.forward(&mut uh);
    sp.fft.forward(&mut vh);
    for i in 0..ni * ni {
        if !sp.mask[i] {
            uh[i] = zero;
            vh[i] = zero;
        }
    }

    let times = uniform_times(n_t, t_end);
    let npts = n_side * n_side;
    let mut frames = Vec::with_capacity(n_t * npts * 2);
    let mut pu = vec![zero; ni * ni];
    let mut pv = vec![zero; ni * ni];
    let mut au = vec![zero; ni * ni];
    let mut av = vec![zero; ni * ni];
    let boxf: Vec<f64> = ms.iter().map(|&m| box_factor(m, n_side)).collect();
    let size = ni * ni;
    let mut ku: Vec<Vec<Complex64>> = (0..4).map(|_| vec![zero; size]).collect();
    let mut kv: Vec<Vec<Complex64>> = (0..4).map(|_| vec![zero; size]).collect();
    let mut su = vec![zero; size];
    let mut sv = vec![zero; size];
    for (frame, &t_frame) in times.iter().enumerate() {
        if frame > 0 {
            let frame_dt = t_frame - times[frame - 1];
            let speed = 2.0 * (max_abs(&pu) + max_abs(&pv)) / dx;
            let steps = steps_for(frame_dt, opts.cfl / speed, opts);
            let dt = frame_dt / steps as f64;
            let e1: Vec<Complex64> = lin.iter().map(|l| (l * (dt / 2.0)).exp()).collect();
            let e2: Vec<Complex64> = e1.iter().map(|e| e * e).collect();
            for _ in 0..steps {
                let (a, rest) = ku.split_at_mut(1);
                let (b, rest) = rest.split_at_mut(1);
                let (c, d) = rest.split_at_mut(1);
                let (ka, kb, kc, kd) = (&mut a[0], &mut b[0], &mut c[0], &mut d[0]);
                let (a, rest) = kv.split_at_mut(1);
                let (b, rest) = rest.split_at_mut(1);
                let (c, d) = rest.split_at_mut(1);
                let (la, lb, lc, ld) = (&mut a[0], &mut b[0], &mut c[0], &mut d[0]);

                sp.rhs(&uh, &vh, ka, la);
                for i in 0..size {
                    su[i] = e1[i] * (uh[i] + ka[i] * (dt / 2.0));
                    sv[i] = e1[i] * (vh[i] + la[i] * (dt / 2.0));
                }
                sp.rhs(&su, &sv, kb, lb);
                for i in 0..size {
                    su[i] = e1[i] * uh[i] + kb[i] * (dt / 2.0);
                    sv[i] = e1[i] * vh[i] + lb[i] * (dt / 2.0);
                }
                sp.rhs(&su, &sv, kc, lc);
                for i in 0..size {
                    su[i] = e2[i] * uh[i] + e1[i] * kc[i] * dt;
                    sv[i] = e2[i] * vh[i] + e1[i] * lc[i] * dt;
                }
                sp.rhs(&su, &sv, kd, ld);
                for i in 0..size {
                    uh[i] = e2[i] * uh[i]
                        + (e2[i] * ka[i] + e1[i] * (kb[i] + kc[i]) * 2.0 + kd[i]) * (dt / 6.0);
                    vh[i] = e2[i] * vh[i]
                        + (e2[i] * la[i] + e1[i] * (lb[i] + lc[i]) * 2.0 + ld[i]) * (dt / 6.0);
                }
            }
        }
        pu.copy_from_slice(&uh);
        pv.copy_from_slice(&vh);
        sp.fft.inverse(&mut pu);
        sp.fft.inverse(&mut pv);
        let (mu, mv) = (max_abs(&pu), max_abs(&pv));
        let m = if mu.is_nan() || mv.is_nan() { f64::NAN } else { mu.max(mv) };
        if !(m <= BLOWUP_THRESHOLD) {
            return Err(blowup(t_frame, m, coeffs));
        }
        for my in 0..ni {
            for mx in 0..ni {
                let i = my * ni + mx;
                let b = boxf[mx] * boxf[my];
                au[i] = uh[i] * b;
                av[i] = vh[i] * b;
            }
        }
        sp.fft.inverse(&mut au);
        sp.fft.inverse(&mut av);
        for iy in 0..n_side {
            for ix in 0..n_side {
                let i = iy * stride * ni + ix * stride;
                frames.push(au[i].re as f32);
                frames.push(av[i].re as f32);
            }
        }
    }
    let mesh = periodic_grid(2, n_side, length)?;
    Trajectory::new(frames, times, mesh, 2)
}
