//! Dataset container: `manifest.json`, `data.bin`, `mesh.bin`.
//!
//! `data.bin` holds little-endian f32 values laid out `[sim][n_t][N][C]`;
//! `mesh.bin` holds little-endian f32 normalized coordinates `[N][dim]`.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    solve_1d, solve_2d, subsample_trajectory, uniform_times, DatasetTag, Forcing1D, Init2D, PdeCoeffs,
    SimulationInputs, Trajectory,
};
use crate::error::{MagnetError, Result};
use crate::mesh::{periodic_grid, Coordinates};
use crate::seed;

pub const DATASET_FORMAT: &str = "magnet-dataset";
const MAX_ATTEMPTS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub tag: DatasetTag,
    pub count: usize,
    /// Points per axis.
    pub resolution: usize,
    pub n_t: usize,
    pub t_end: f64,
    pub seed: u64,
}

impl DatasetSpec {
    /// Spec with the family's default time extent.
    pub fn new(tag: DatasetTag, count: usize, resolution: usize, seed: u64) -> Self {
        Self {
            tag,
            count,
            resolution,
            n_t: tag.default_n_t(),
            t_end: tag.default_t_end(),
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationRecord {
    pub index: usize,
    pub seed: u64,
    /// Draws used; more than one means earlier draws blew up.
    pub attempts: usize,
    pub coeffs: PdeCoeffs,
    pub inputs: SimulationInputs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub tag: DatasetTag,
    pub dim: usize,
    pub count: usize,
    /// Points per axis of the generating grid.
    pub resolution: usize,
    pub num_points: usize,
    pub n_t: usize,
    pub channels: usize,
    pub t_end: f64,
    pub dt: f64,
    pub domain_length: f64,
    pub seed: u64,
    pub layout: String,
    pub data_file: String,
    pub mesh_file: String,
    /// Indices into the generating grid when the mesh is a subset of it.
    pub subset: Option<Vec<usize>>,
    pub simulations: Vec<SimulationRecord>,
}

/// Dataset held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub mesh: Coordinates,
    pub trajectories: Vec<Trajectory>,
}

fn simulate(spec: &DatasetSpec, index: usize) -> Result<(SimulationRecord, Trajectory)> {
    let sim_seed = seed::derive_seed(spec.seed, index as u64);
    let mut rng = seed::rng(sim_seed);
    let mut last_err = None;
    for attempt in 1..=MAX_ATTEMPTS {
        let coeffs = spec.tag.sample_coeffs(&mut rng);
        let (inputs, result) = if spec.tag.dim() == 1 {
            let forcing = Forcing1D::sample(&mut rng);
            let r = solve_1d(&coeffs, &forcing, spec.resolution, spec.n_t, spec.t_end);
            (SimulationInputs::Forced1d { forcing }, r)
        } else {
            let u = Init2D::sample(&mut rng);
            let v = Init2D::sample(&mut rng);
            let r = solve_2d(&coeffs, &u, &v, spec.resolution, spec.n_t, spec.t_end);
            (SimulationInputs::Initial2d { u, v }, r)
        };
        match result {
            Ok(traj) => {
                return Ok((
                    SimulationRecord {
                        index,
                        seed: sim_seed,
                        attempts: attempt,
                        coeffs,
                        inputs,
                    },
                    traj,
                ))
            }
            Err(e @ MagnetError::SolverBlowup { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.expect("at least one attempt"))
}

/// Runs every simulation (in parallel; output does not depend on scheduling).
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.count == 0 {
        return Err(MagnetError::Invalid("dataset count must be at least 1".into()));
    }
    let sims: Vec<(SimulationRecord, Trajectory)> = (0..spec.count)
        .into_par_iter()
        .map(|i| simulate(spec, i))
        .collect::<Result<_>>()?;
    let mesh = periodic_grid(spec.tag.dim(), spec.resolution, spec.tag.domain_length())?;
    let (records, trajectories): (Vec<_>, Vec<_>) = sims.into_iter().unzip();
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.to_string(),
        version: 1,
        tag: spec.tag,
        dim: spec.tag.dim(),
        count: spec.count,
        resolution: spec.resolution,
        num_points: mesh.len(),
        n_t: spec.n_t,
        channels: spec.tag.channels(),
        t_end: spec.t_end,
        dt: spec.t_end / (spec.n_t - 1) as f64,
        domain_length: spec.tag.domain_length(),
        seed: spec.seed,
        layout: "f32-le [sim][n_t][N][C]".to_string(),
        data_file: "data.bin".to_string(),
        mesh_file: "mesh.bin".to_string(),
        subset: None,
        simulations: records,
    };
    let mut ds = Dataset {
        manifest,
        mesh,
        trajectories,
    };
    // Round coordinates through f32 so in-memory and reloaded datasets agree.
    ds.mesh = f32_roundtrip(&ds.mesh)?;
    for t in &mut ds.trajectories {
        t.mesh = ds.mesh.clone();
    }
    Ok(ds)
}

fn f32_roundtrip(c: &Coordinates) -> Result<Coordinates> {
    Coordinates::new(c.dim(), c.data().iter().map(|&v| v as f32 as f64).collect())
}

/// Generates and writes a dataset to `dir`.
pub fn make_dataset(spec: &DatasetSpec, dir: &Path) -> Result<Dataset> {
    let ds = generate_dataset(spec)?;
    ds.save(dir)?;
    Ok(ds)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn tag(&self) -> DatasetTag {
        self.manifest.tag
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut data = Vec::with_capacity(
            self.trajectories.iter().map(|t| t.frames.len()).sum::<usize>() * 4,
        );
        for t in &self.trajectories {
            for v in &t.frames {
                data.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mesh: Vec<u8> = self
            .mesh
            .data()
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect();
        fs::write(dir.join(&self.manifest.data_file), data)?;
        fs::write(dir.join(&self.manifest.mesh_file), mesh)?;
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&self.manifest)?,
        )?;
        Ok(())
    }

    /// Same simulations restricted to mesh points `keep`.
    pub fn subsample(&self, keep: &[usize]) -> Result<Dataset> {
        let trajectories = self
            .trajectories
            .iter()
            .map(|t| subsample_trajectory(t, keep))
            .collect::<Result<Vec<_>>>()?;
        let mut manifest = self.manifest.clone();
        let base: Vec<usize> = match &self.manifest.subset {
            Some(prev) => keep.iter().map(|&i| prev[i]).collect(),
            None => keep.to_vec(),
        };
        manifest.num_points = keep.len();
        manifest.subset = Some(base);
        Ok(Dataset {
            manifest,
            mesh: self.mesh.select(keep)?,
            trajectories,
        })
    }

    /// First `n` simulations.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let mut manifest = self.manifest.clone();
        manifest.count = n;
        manifest.simulations.truncate(n);
        Dataset {
            manifest,
            mesh: self.mesh.clone(),
            trajectories: self.trajectories[..n].to_vec(),
        }
    }
}

fn read_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format != DATASET_FORMAT {
        return Err(MagnetError::Mismatch(format!(
            "{} is not a {DATASET_FORMAT} container",
            dir.display()
        )));
    }
    let mesh_raw = read_f32(&fs::read(dir.join(&manifest.mesh_file))?);
    if mesh_raw.len() != manifest.num_points * manifest.dim {
        return Err(MagnetError::Mismatch(format!(
            "mesh file holds {} values, manifest expects {}",
            mesh_raw.len(),
            manifest.num_points * manifest.dim
        )));
    }
    let mesh = Coordinates::new(manifest.dim, mesh_raw.iter().map(|&v| v as f64).collect())?;
    let data = read_f32(&fs::read(dir.join(&manifest.data_file))?);
    let per_sim = manifest.n_t * manifest.num_points * manifest.channels;
    if data.len() != per_sim * manifest.count || manifest.simulations.len() != manifest.count {
        return Err(MagnetError::Mismatch(format!(
            "data file holds {} values, manifest expects {} simulations of {per_sim}",
            data.len(),
            manifest.count
        )));
    }
    let times = uniform_times(manifest.n_t, manifest.t_end);
    let trajectories = data
        .chunks_exact(per_sim.max(1))
        .map(|c| Trajectory::new(c.to_vec(), times.clone(), mesh.clone(), manifest.channels))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        manifest,
        mesh,
        trajectories,
    })
}
