//! Ground-truth Burgers trajectories (1D forced family, 2D decaying family)
//! and the on-disk dataset container.

mod dataset;
mod fft;
mod solver;

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MagnetError, Result};
use crate::mesh::Coordinates;

pub use dataset::{
    generate_dataset, load_dataset, make_dataset, Dataset, DatasetManifest, DatasetSpec, SimulationRecord,
    DATASET_FORMAT,
};
pub use solver::{solve_1d, solve_1d_with, solve_2d, solve_2d_with, SolverOptions};

pub const NUM_TERMS: usize = 5;
pub const LENGTH_1D: f64 = 16.0;
pub const LENGTH_2D: f64 = 64.0;
/// Any |u| above this counts as a blow-up.
pub const BLOWUP_THRESHOLD: f64 = 1e3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DatasetTag {
    E1,
    E2,
    E3,
    B1,
    B2,
}

impl DatasetTag {
    pub fn dim(self) -> usize {
        match self {
            DatasetTag::E1 | DatasetTag::E2 | DatasetTag::E3 => 1,
            DatasetTag::B1 | DatasetTag::B2 => 2,
        }
    }

    pub fn channels(self) -> usize {
        self.dim()
    }

    pub fn domain_length(self) -> f64 {
        if self.dim() == 1 {
            LENGTH_1D
        } else {
            LENGTH_2D
        }
    }

    pub fn default_n_t(self) -> usize {
        if self.dim() == 1 {
            250
        } else {
            50
        }
    }

    pub fn default_t_end(self) -> f64 {
        if self.dim() == 1 {
            4.0
        } else {
            1.0
        }
    }

    /// Draws coefficients uniformly from the family's ranges.
    pub fn sample_coeffs<R: Rng>(self, rng: &mut R) -> PdeCoeffs {
        let (alpha, beta, gamma) = match self {
            DatasetTag::E1 => (1.0, 0.0, 0.0),
            DatasetTag::E2 => (1.0, rng.gen_range(0.0..=0.2), 0.0),
            DatasetTag::E3 => (
                rng.gen_range(0.0..=3.0),
                rng.gen_range(0.0..=0.4),
                rng.gen_range(0.0..=1.0),
            ),
            DatasetTag::B1 => (1.0, 0.0, 0.0),
            // (0, 0.2]: flip a draw from [0, 0.2).
            DatasetTag::B2 => (1.0, 0.2 - rng.gen_range(0.0..0.2), 0.0),
        };
        PdeCoeffs {
            tag: self,
            alpha,
            beta,
            gamma,
        }
    }
}

impl fmt::Display for DatasetTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for DatasetTag {
    type Err = MagnetError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "E1" => Ok(DatasetTag::E1),
            "E2" => Ok(DatasetTag::E2),
            "E3" => Ok(DatasetTag::E3),
            "B1" => Ok(DatasetTag::B1),
            "B2" => Ok(DatasetTag::B2),
            other => Err(MagnetError::Invalid(format!("unknown dataset tag {other:?}"))),
        }
    }
}

/// `alpha` scales the u^2 flux, `beta` the diffusion, `gamma` the dispersion.
/// The 2D family uses `beta` only (`alpha` is fixed at 1).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdeCoeffs {
    pub tag: DatasetTag,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl PdeCoeffs {
    pub fn new(tag: DatasetTag, alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let c = Self {
            tag,
            alpha,
            beta,
            gamma,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b, g) = (self.alpha, self.beta, self.gamma);
        let ok = match self.tag {
            DatasetTag::E1 | DatasetTag::B1 => a == 1.0 && b == 0.0 && g == 0.0,
            DatasetTag::E2 => a == 1.0 && (0.0..=0.2).contains(&b) && g == 0.0,
            DatasetTag::E3 => {
                (0.0..=3.0).contains(&a) && (0.0..=0.4).contains(&b) && (0.0..=1.0).contains(&g)
            }
            DatasetTag::B2 => a == 1.0 && b > 0.0 && b <= 0.2 && g == 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(MagnetError::Invalid(format!("coefficients out of range: {self}")))
        }
    }
}

impl fmt::Display for PdeCoeffs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (alpha={}, beta={}, gamma={})",
            self.tag, self.alpha, self.beta, self.gamma
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForcingTerm {
    pub amplitude: f64,
    pub omega: f64,
    pub wavenumber: u32,
    pub phase: f64,
}

/// `delta(t, x) = sum_j A_j sin(omega_j t + 2 pi l_j x / L + phi_j)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forcing1D {
    pub terms: Vec<ForcingTerm>,
    pub length: f64,
}

impl Forcing1D {
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        let terms = (0..NUM_TERMS)
            .map(|_| ForcingTerm {
                amplitude: rng.gen_range(-0.5..=0.5),
                omega: rng.gen_range(-0.4..=0.4),
                wavenumber: rng.gen_range(1..=3),
                phase: rng.gen_range(0.0..2.0 * PI),
            })
            .collect();
        Self {
            terms,
            length: LENGTH_1D,
        }
    }

    pub fn zero() -> Self {
        Self {
            terms: Vec::new(),
            length: LENGTH_1D,
        }
    }
}

pub fn forcing_delta(f: &Forcing1D, t: f64, x: f64) -> f64 {
    f.terms
        .iter()
        .map(|j| {
            j.amplitude * (j.omega * t + 2.0 * PI * j.wavenumber as f64 * x / f.length + j.phase).sin()
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitTerm {
    pub amplitude: f64,
    pub lx: u32,
    pub ly: u32,
    pub phase_x: f64,
    pub phase_y: f64,
}

/// `f(x, y) = sum_j A_j sin(2 pi lx_j x / L + phx_j) cos(2 pi ly_j y / L + phy_j)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Init2D {
    pub terms: Vec<InitTerm>,
    pub length: f64,
}

impl Init2D {
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        let terms = (0..NUM_TERMS)
            .map(|_| InitTerm {
                amplitude: rng.gen_range(-0.5..=0.5),
                lx: rng.gen_range(1..=3),
                ly: rng.gen_range(1..=3),
                phase_x: rng.gen_range(0.0..2.0 * PI),
                phase_y: rng.gen_range(0.0..2.0 * PI),
            })
            .collect();
        Self {
            terms,
            length: LENGTH_2D,
        }
    }

    pub fn zero() -> Self {
        Self {
            terms: Vec::new(),
            length: LENGTH_2D,
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        for t in &mut out.terms {
            t.amplitude *= s;
        }
        out
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let k = 2.0 * PI / self.length;
        self.terms
            .iter()
            .map(|j| {
                j.amplitude
                    * (k * j.lx as f64 * x + j.phase_x).sin()
                    * (k * j.ly as f64 * y + j.phase_y).cos()
            })
            .sum()
    }
}

/// Initial/forcing data for one simulation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SimulationInputs {
    Forced1d { forcing: Forcing1D },
    Initial2d { u: Init2D, v: Init2D },
}

/// `n_t` uniform snapshot times over `[0, t_end]`.
pub fn uniform_times(n_t: usize, t_end: f64) -> Vec<f64> {
    (0..n_t)
        .map(|k| k as f64 * t_end / (n_t.max(2) - 1) as f64)
        .collect()
}

/// Frames `[n_t][N][C]` on a fixed mesh at uniform times.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub frames: Vec<f32>,
    pub times: Vec<f64>,
    pub mesh: Coordinates,
    pub channels: usize,
}

impl Trajectory {
    pub fn new(frames: Vec<f32>, times: Vec<f64>, mesh: Coordinates, channels: usize) -> Result<Self> {
        let expected = times.len() * mesh.len() * channels;
        if frames.len() != expected {
            return Err(MagnetError::Shape(format!(
                "{} values for {} frames x {} points x {channels} channels",
                frames.len(),
                times.len(),
                mesh.len()
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(MagnetError::Invalid("non-finite trajectory value".into()));
        }
        Ok(Self {
            frames,
            times,
            mesh,
            channels,
        })
    }

    pub fn n_t(&self) -> usize {
        self.times.len()
    }

    pub fn num_points(&self) -> usize {
        self.mesh.len()
    }

    pub fn frame_len(&self) -> usize {
        self.num_points() * self.channels
    }

    pub fn frame(&self, k: usize) -> &[f32] {
        let n = self.frame_len();
        &self.frames[k * n..(k + 1) * n]
    }

    /// Frames `start..end` as one flat `[end - start][N][C]` slice.
    pub fn frames_range(&self, start: usize, end: usize) -> &[f32] {
        let n = self.frame_len();
        &self.frames[start * n..end * n]
    }

    pub fn value(&self, k: usize, i: usize, c: usize) -> f32 {
        self.frames[(k * self.num_points() + i) * self.channels + c]
    }

    /// Uniform frame spacing.
    pub fn dt(&self) -> f64 {
        if self.times.len() < 2 {
            0.0
        } else {
            self.times[1] - self.times[0]
        }
    }

    /// Per-channel spatial mean of frame `k`.
    pub fn channel_means(&self, k: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.channels];
        for p in self.frame(k).chunks(self.channels) {
            for (acc, &v) in m.iter_mut().zip(p) {
                *acc += v as f64;
            }
        }
        m.iter().map(|s| s / self.num_points() as f64).collect()
    }
}

/// Restricts every frame to the points `keep`, in that order.
pub fn subsample_trajectory(traj: &Trajectory, keep: &[usize]) -> Result<Trajectory> {
    let n = traj.num_points();
    if let Some(&bad) = keep.iter().find(|&&i| i >= n) {
        return Err(MagnetError::Invalid(format!(
            "index {bad} out of range for {n} points"
        )));
    }
    let c = traj.channels;
    let mut frames = Vec::with_capacity(traj.n_t() * keep.len() * c);
    for k in 0..traj.n_t() {
        let f = traj.frame(k);
        for &i in keep {
            frames.extend_from_slice(&f[i * c..(i + 1) * c]);
        }
    }
    Trajectory::new(frames, traj.times.clone(), traj.mesh.select(keep)?, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn single(a: f64, omega: f64, l: u32, phase: f64) -> Forcing1D {
        Forcing1D {
            terms: vec![ForcingTerm {
                amplitude: a,
                omega,
                wavenumber: l,
                phase,
            }],
            length: LENGTH_1D,
        }
    }

    #[test]
    fn forcing_examples() {
        let mut rng = seed::rng(3);
        let mut f = Forcing1D::sample(&mut rng);
        for t in &mut f.terms {
            t.amplitude = 0.0;
        }
        assert_eq!(forcing_delta(&f, 1.3, 7.1), 0.0);
        let s = single(1.0, 0.0, 1, 0.0);
        assert_eq!(forcing_delta(&s, 0.0, 0.0), 0.0);
        assert!((forcing_delta(&s, 0.0, LENGTH_1D / 4.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sampled_ranges() {
        let mut rng = seed::rng(11);
        for _ in 0..200 {
            let f = Forcing1D::sample(&mut rng);
            for t in &f.terms {
                assert!(t.amplitude.abs() <= 0.5 && t.omega.abs() <= 0.4);
                assert!((1..=3).contains(&t.wavenumber));
                assert!((0.0..2.0 * PI).contains(&t.phase));
            }
            for tag in [DatasetTag::E1, DatasetTag::E2, DatasetTag::E3, DatasetTag::B1, DatasetTag::B2] {
                tag.sample_coeffs(&mut rng).validate().unwrap();
            }
        }
    }

    #[test]
    fn tag_parsing() {
        assert_eq!("e3".parse::<DatasetTag>().unwrap(), DatasetTag::E3);
        assert!("E4".parse::<DatasetTag>().is_err());
        assert!(PdeCoeffs::new(DatasetTag::B2, 1.0, 0.0, 0.0).is_err());
    }
}
