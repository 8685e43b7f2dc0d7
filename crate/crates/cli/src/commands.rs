//! Command implementations. Every command validates its full configuration
//! before creating any file.

use std::path::Path;

use brodyn::error::{Error, Result};
use brodyn::evaluation::{evaluate, zero_shot, EvalModel, Protocol, Target};
use brodyn::integrator::{
    extract_pairs, generate_ensemble, random_initial_condition, rollout, GroundTruthDynamics,
    TrajectoryEnsemble,
};
use brodyn::io;
use brodyn::models::{LearnedDynamics, ModelParams};
use brodyn::rng::{derive_seed, derive_seed_indexed, NoiseStream};
use brodyn::systems::SystemSpec;
use brodyn::tensor::Array;
use brodyn::training::fit;

use crate::config::{
    checkpoint_paths, dataset_paths, dataset_seed, load_checkpoint_spec, save_checkpoint_spec,
    ExperimentConfig,
};

/// Forward simulations from random initial conditions; writes the trajectory
/// CSV, its sidecar and the extracted pair dataset, then prints the dataset
/// digest.
pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let spec = cfg.spec()?;
    let seed = derive_seed(cfg.seed, "dataset");
    std::fs::create_dir_all(out)?;

    let ensemble = generate_ensemble(&spec, cfg.n_trajectories, cfg.points_per_trajectory, seed)?;
    let dataset = extract_pairs(&ensemble, seed);

    let traj_csv = out.join("trajectories.csv");
    io::write_ensemble_csv(&traj_csv, &ensemble)?;
    io::write_ensemble_meta(&out.join("trajectories.meta"), &ensemble, seed)?;
    let (pairs_csv, meta) = dataset_paths(out);
    io::write_pairs_csv(&pairs_csv, &dataset)?;
    io::write_dataset_meta(&meta, &dataset)?;

    let digest = io::file_digest(&pairs_csv)?;
    println!("dataset: {} pairs -> {}", dataset.len(), out.display());
    println!("digest: {digest}");
    Ok(())
}

/// Trains on a generated dataset; writes the best checkpoint, loss history,
/// and a manifest binding config, dataset digest and output hashes.
pub fn cmd_train(cfg: &ExperimentConfig, dataset_dir: &Path, out: &Path) -> Result<()> {
    cfg.validate()?;
    let (pairs_csv, meta) = dataset_paths(dataset_dir);
    if !pairs_csv.exists() {
        return Err(Error::Config(format!(
            "dataset not found: {}",
            pairs_csv.display()
        )));
    }
    let dataset = io::read_pairs(&pairs_csv, &meta)?;
    let spec = dataset.spec.clone();
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = derive_seed(cfg.seed, "train");

    let result = fit(cfg.family, &spec, &dataset, &train_cfg)?;

    std::fs::create_dir_all(out)?;
    let paths = checkpoint_paths(out);
    io::save_params(&paths.params, &result.best_params)?;
    io::save_opt_state(&paths.opt_state, &result.last.opt_state)?;
    io::write_history_csv(&paths.history, &result.history)?;
    save_checkpoint_spec(&paths.spec, &spec)?;

    let dataset_digest = io::file_digest(&pairs_csv)?;
    let mut manifest = cfg.render();
    manifest.push_str(&io::render_kv(&[(
        "manifest".to_string(),
        vec![
            ("dataset_digest".into(), dataset_digest),
            ("dataset_seed".into(), dataset_seed(&meta)?.to_string()),
            ("best_epoch".into(), result.best_epoch.to_string()),
            (
                "best_val_loss".into(),
                io::fmt_f64(result.best_val_loss),
            ),
            ("epochs_run".into(), result.history.len().to_string()),
            (
                "model_params_digest".into(),
                io::file_digest(&paths.params)?,
            ),
            (
                "optimizer_state_digest".into(),
                io::file_digest(&paths.opt_state)?,
            ),
            ("history_digest".into(), io::file_digest(&paths.history)?),
        ],
    )]));
    std::fs::write(&paths.manifest, manifest)?;

    println!(
        "trained {} for {} epochs (best epoch {}, val loss {:.6})",
        cfg.family.tag(),
        result.history.len(),
        result.best_epoch,
        result.best_val_loss
    );
    println!("checkpoint: {}", out.display());
    Ok(())
}

fn load_checkpoint(dir: &Path) -> Result<(ModelParams, SystemSpec)> {
    let paths = checkpoint_paths(dir);
    if !paths.params.exists() {
        return Err(Error::Config(format!(
            "checkpoint not found: {}",
            paths.params.display()
        )));
    }
    let params = io::load_params(&paths.params)?;
    let spec = load_checkpoint_spec(&paths.spec)?;
    Ok((params, spec))
}

/// Evaluates a checkpoint under the roll-out protocol; writes the per-step
/// report CSV and the summary.
pub fn cmd_evaluate(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    cfg.validate()?;
    let (params, mut spec) = load_checkpoint(checkpoint)?;
    if cfg.family != params.family {
        return Err(Error::Config(format!(
            "config family {} does not match checkpoint family {}",
            cfg.family.tag(),
            params.family.tag()
        )));
    }
    // The checkpoint's system, evaluated at the configured size and
    // temperature when they differ.
    if cfg.n != spec.n_particles {
        spec = spec.resized(cfg.n)?;
    }
    spec.kbt = cfg.kbt;
    let protocol = Protocol {
        n_init: cfg.n_init,
        seeds_per_init: cfg.seeds_per_init,
        steps: cfg.steps,
        seed: derive_seed(cfg.seed, "evaluate"),
    };
    let report = evaluate(&EvalModel::Learned(&params), &spec, &protocol)?;
    write_report(out, "report", &report)?;
    println!(
        "evaluated {} on {}: kl_gm={:.6} pe_gm={:.6} brownian={:.6}",
        report.model, report.spec_summary, report.kl_geometric_mean, report.pe_geometric_mean,
        report.brownian_error
    );
    Ok(())
}

fn write_report(
    out: &Path,
    stem: &str,
    report: &brodyn::evaluation::MetricReport,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    io::write_report_csv(&out.join(format!("{stem}.csv")), report)?;
    io::write_report_summary(&out.join(format!("{stem}.summary")), report)?;
    Ok(())
}

/// Dumps a predicted (or ground-truth) ensemble as a trajectory CSV.
pub fn cmd_rollout(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    out: &Path,
) -> Result<()> {
    cfg.validate()?;
    let (params, spec) = match checkpoint {
        Some(dir) => {
            let (params, mut spec) = load_checkpoint(dir)?;
            if cfg.n != spec.n_particles {
                spec = spec.resized(cfg.n)?;
            }
            spec.kbt = cfg.kbt;
            (Some(params), spec)
        }
        None => (None, cfg.spec()?),
    };
    let seed = derive_seed(cfg.seed, "rollout");
    let x0 = random_initial_condition(&spec, derive_seed(seed, "init"));
    let stream = NoiseStream::new(seed);
    let n_traj = cfg.seeds_per_init.max(1);
    let mut rows = Vec::with_capacity(n_traj);
    for t in 0..n_traj {
        let row = match &params {
            Some(p) => {
                let dynamics = LearnedDynamics::new(p, &spec)?;
                rollout(&spec, &x0, &dynamics, cfg.steps, &stream, t as u64)?
            }
            None => rollout(&spec, &x0, &GroundTruthDynamics, cfg.steps, &stream, t as u64)?,
        };
        rows.push(row);
    }
    let n = spec.n_particles;
    let mut data = Vec::with_capacity(n_traj * (cfg.steps + 1) * n * 3);
    for row in &rows {
        data.extend_from_slice(row.data());
    }
    let ensemble = TrajectoryEnsemble {
        spec,
        positions: Array::from_vec(vec![n_traj, cfg.steps + 1, n, 3], data)?,
        seeds: (0..n_traj as u64).collect(),
    };
    std::fs::create_dir_all(out)?;
    let csv = out.join("rollout.csv");
    io::write_ensemble_csv(&csv, &ensemble)?;
    io::write_ensemble_meta(&out.join("rollout.meta"), &ensemble, seed)?;
    println!("rollout: {} trajectories -> {}", n_traj, csv.display());
    Ok(())
}

/// Zero-shot transfer of a trained graph model to unseen sizes and
/// temperatures; one report per target.
pub fn cmd_generalize(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    out: &Path,
    sizes: &[usize],
    kbts: &[f64],
) -> Result<()> {
    cfg.validate()?;
    let (params, spec) = load_checkpoint(checkpoint)?;
    let protocol = Protocol {
        n_init: cfg.n_init,
        seeds_per_init: cfg.seeds_per_init,
        steps: cfg.steps,
        seed: derive_seed(cfg.seed, "generalize"),
    };
    let mut targets: Vec<(String, Target)> = Vec::new();
    for &n in sizes {
        targets.push((format!("n{n}"), Target::Size(n)));
    }
    for &kbt in kbts {
        targets.push((format!("kbt{kbt}"), Target::Temperature(kbt)));
    }
    if targets.is_empty() {
        return Err(Error::Config(
            "generalize needs at least one --n or --kbt target".to_string(),
        ));
    }
    for (tag, target) in &targets {
        let report = zero_shot(&params, &spec, *target, &protocol)?;
        write_report(out, tag, &report)?;
        println!(
            "target {tag}: kl_gm={:.6} pe_gm={:.6} brownian={:.6}",
            report.kl_geometric_mean, report.pe_geometric_mean, report.brownian_error
        );
    }
    Ok(())
}

/// Data-efficiency sweep: trains one model per dataset size with derived
/// seeds and writes geometric-mean metrics per size.
pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path, sizes: &[usize]) -> Result<()> {
    cfg.validate()?;
    if sizes.is_empty() {
        return Err(Error::Config("sweep needs at least one size".to_string()));
    }
    let spec = cfg.spec()?;
    std::fs::create_dir_all(out)?;
    let mut lines = vec!["dataset_size,kl_geometric_mean,position_error_geometric_mean,brownian_error".to_string()];
    for (i, &size) in sizes.iter().enumerate() {
        let points = cfg.points_per_trajectory.min(size);
        let n_traj = size.div_ceil(points);
        let data_seed = derive_seed_indexed(cfg.seed, "sweep-data", i as u64);
        let ensemble = generate_ensemble(&spec, n_traj, points, data_seed)?;
        let dataset = extract_pairs(&ensemble, data_seed);
        let mut train_cfg = cfg.train.clone();
        train_cfg.seed = derive_seed_indexed(cfg.seed, "sweep-train", i as u64);
        let result = fit(cfg.family, &spec, &dataset, &train_cfg)?;
        let protocol = Protocol {
            n_init: cfg.n_init,
            seeds_per_init: cfg.seeds_per_init,
            steps: cfg.steps,
            seed: derive_seed(cfg.seed, "sweep-eval"),
        };
        let report = evaluate(&EvalModel::Learned(&result.best_params), &spec, &protocol)?;
        println!(
            "size {size}: kl_gm={:.6} pe_gm={:.6} brownian={:.6}",
            report.kl_geometric_mean, report.pe_geometric_mean, report.brownian_error
        );
        lines.push(format!(
            "{size},{},{},{}",
            io::fmt_f64(report.kl_geometric_mean),
            io::fmt_f64(report.pe_geometric_mean),
            io::fmt_f64(report.brownian_error)
        ));
    }
    let csv = out.join("sweep.csv");
    std::fs::write(&csv, lines.join("\n") + "\n")?;
    println!("sweep results: {}", csv.display());
    Ok(())
}
