use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde_json::json;

use magnet::eval::{
    at_resolution, points_per_axis, superres_eval, EvalOptions, EvalReport, EvalRow, InterpMode, Predictor,
};
use magnet::experiment::{run_experiment, ExperimentConfig, RunConfig};
use magnet::mesh::MeshProtocol;
use magnet::model::{load_model, Variant};
use magnet::pdegen::{load_dataset, make_dataset, DatasetSpec, DatasetTag};
use magnet::training::{train_with, TrainConfig};
use magnet::{MagnetError, Result};

#[derive(Parser)]
#[command(name = "magnet", version, about = "Mesh-agnostic neural PDE surrogate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset of PDE trajectories.
    Generate {
        #[arg(long)]
        tag: DatasetTag,
        #[arg(long)]
        count: usize,
        /// Grid points per axis.
        #[arg(long)]
        nx: usize,
        /// Stored frames; the family default when omitted.
        #[arg(long)]
        nt: Option<usize>,
        #[arg(long)]
        t_end: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write the best checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "gnn")]
        variant: Variant,
        /// JSON file with partial `model` and `train` sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Zero-shot super-resolution evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Test points per axis; the dataset's own resolution when omitted.
        #[arg(long, value_delimiter = ',')]
        test_res: Vec<usize>,
        #[arg(long, default_value = "uniform")]
        mesh: MeshProtocol,
        /// learned, knn[:k], linear or cubic.
        #[arg(long, default_value = "learned")]
        interp: String,
        /// Parent mesh size; read from the checkpoint's training config when omitted.
        #[arg(long)]
        parents: Option<usize>,
        /// Seeds for the parent-mesh draw.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        horizon: Option<usize>,
        /// Skip the repeat-last-frame baseline.
        #[arg(long)]
        no_persistence: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a generate/train/eval grid from a JSON config.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let record = json!({"error": {"kind": "usage", "message": e.to_string().trim()}});
            eprintln!("{record}");
            return ExitCode::from(2);
        }
    };
    if let Err(e) = configure_threads() {
        return fail(&e);
    }
    match run(cli.command) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}

fn fail(e: &MagnetError) -> ExitCode {
    let record = json!({"error": {"kind": e.kind(), "message": e.to_string()}});
    eprintln!("{record}");
    ExitCode::FAILURE
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("MAGNET_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| MagnetError::Invalid(format!("MAGNET_THREADS={v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| MagnetError::Invalid(e.to_string()))
}

fn run(cmd: Command) -> Result<serde_json::Value> {
    match cmd {
        Command::Generate { tag, count, nx, nt, t_end, seed, out } => {
            let mut spec = DatasetSpec::new(tag, count, nx, seed);
            if let Some(n) = nt {
                spec.n_t = n;
            }
            if let Some(t) = t_end {
                spec.t_end = t;
            }
            let ds = make_dataset(&spec, &out)?;
            let retried = ds.manifest.simulations.iter().filter(|s| s.attempts > 1).count();
            Ok(json!({
                "out": out,
                "tag": tag.to_string(),
                "count": ds.len(),
                "num_points": ds.mesh.len(),
                "n_t": ds.manifest.n_t,
                "redrawn": retried,
            }))
        }
        Command::Train { data, variant, config, seed, out } => {
            let ds = load_dataset(&data)?;
            let rc = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            let (model, mut tc) = rc.resolve(variant, ds.manifest.dim, ds.manifest.channels)?;
            if let Some(s) = seed {
                tc.seed = s;
            }
            let outcome = train_with(&ds, &model, &tc, Some(&out), |r| {
                eprintln!(
                    "epoch {:4}  lr {:.2e}  interp {:.5}  forecast {:.5}  val {:.5}",
                    r.epoch, r.lr, r.loss_interp, r.loss_forecast, r.val_mae
                );
            })?;
            Ok(json!({
                "out": out,
                "best_epoch": outcome.best_epoch,
                "best_val_mae": outcome.best_val_mae,
                "epochs": outcome.log.len(),
                "stopped_early": outcome.stopped_early,
            }))
        }
        Command::Eval { ckpt, data, test_res, mesh, interp, parents, seeds, horizon, no_persistence, out } => {
            let report = evaluate(&ckpt, &data, &test_res, mesh, &interp, parents, &seeds, horizon, !no_persistence)?;
            report.write(&out, "report")?;
            let rows: Vec<_> = report
                .rows
                .iter()
                .map(|r| json!({"model": r.model, "test_res": r.test_res, "mae_mean": r.mae_mean, "mae_std": r.mae_std}))
                .collect();
            Ok(json!({"out": out, "rows": rows}))
        }
        Command::Experiment { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let o = run_experiment(&cfg, &out)?;
            Ok(json!({
                "out": out,
                "rows": o.report.rows.len(),
                "failures": o.failures,
                "trained": o.trained,
                "evaluated": o.evaluated,
            }))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    ckpt: &Path,
    data: &Path,
    test_res: &[usize],
    protocol: MeshProtocol,
    interp: &str,
    parents: Option<usize>,
    seeds: &[u64],
    horizon: Option<usize>,
    persistence: bool,
) -> Result<EvalReport> {
    let (cfg, params) = load_model(ckpt)?;
    let ds = load_dataset(data)?;
    let interp = InterpMode::parse(interp, cfg.dim)?;
    let parents = match parents {
        Some(n) => n,
        None => {
            let text = std::fs::read_to_string(ckpt.join("train.json")).map_err(|e| {
                MagnetError::Invalid(format!("no --parents given and no training config in checkpoint: {e}"))
            })?;
            serde_json::from_str::<TrainConfig>(&text)?.parents
        }
    };
    if seeds.is_empty() {
        return Err(MagnetError::Invalid("at least one evaluation seed is needed".into()));
    }
    let resolutions = if test_res.is_empty() { vec![ds.manifest.resolution] } else { test_res.to_vec() };
    let model = Predictor::Model { cfg: &cfg, params: &params, interp };
    let baseline = Predictor::Persistence { history: cfg.history };
    let mut predictors = vec![(model.label(), interp.to_string(), &model)];
    if persistence {
        predictors.push(("persistence".into(), "-".into(), &baseline));
    }
    let train_res = points_per_axis(parents, cfg.dim);
    let mut rows = Vec::new();
    for &res in &resolutions {
        let test = at_resolution(&ds, res)?;
        for (label, interp_label, pred) in &predictors {
            let results = seeds
                .iter()
                .map(|&seed| {
                    let opts = EvalOptions { parents, protocol, seed, horizon };
                    Ok((seed, superres_eval(pred, &test, &opts)?))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(EvalRow::aggregate(ds.tag(), label, interp_label, protocol, train_res, res, &results)?);
        }
    }
    Ok(EvalReport { rows })
}
