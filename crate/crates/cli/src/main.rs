use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use spheremap::autodiff::{gradcheck_suite, GRADCHECK_TOLERANCE};
use spheremap::config::RunConfig;
use spheremap::counting::{nms_baseline, CountResult};
use spheremap::evaluation::{export_report, MethodResults};
use spheremap::geometry::read_point_cloud;
use spheremap::projection::{export_png, normalize_input_channels, read_raster, write_raster, CH_RHO};
use spheremap::synthbench::{generate_dataset, write_dataset, SpecRanges};
use spheremap::targetmaps::{density_map, gaussian_map, read_annotation, GaussianMapConfig, SigmaMode};
use spheremap::training::{
    count_prediction, load_checkpoint, load_dataset, load_model, map_kind, predict, prepare_raster, save_checkpoint,
    split_indices, train, write_metrics_csv, Sample, TargetMode,
};
use spheremap::{Error, RasterGrid32};

#[derive(Parser)]
#[command(name = "spheremap", version, about = "Count surface features on spheroid-like point clouds")]
struct Cli {
    /// JSON run config; may name a preset to inherit from.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Preset: paper-delta-0.5, paper-delta-1.0 or desk.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Seed for initialisation, shuffling, splits and synthetic data.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (run directory for `train`).
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Centre, unwrap, fill and crop meshes into SMR1 rasters.
    Project {
        /// PLY or OBJ files.
        #[arg(required = true)]
        meshes: Vec<PathBuf>,
        /// Also write the radius channel as PNG.
        #[arg(long)]
        png: bool,
    },
    /// Render Gaussian (fixed and adaptive) and density targets for annotations.
    Maps {
        /// Keypoint annotation JSON files.
        #[arg(required = true)]
        annotations: Vec<PathBuf>,
    },
    /// Train on a dataset directory of NNN.ply / NNN.json pairs.
    Train {
        dataset: PathBuf,
        /// Target map to learn; defaults to the config's target mode.
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Continue from the last checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Predict and count with a trained run on meshes or SMR1 rasters.
    Predict {
        /// Run directory written by `train`.
        run: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Evaluate runs (and the NMS baseline) on a test set.
    Eval {
        /// Run directories; the method name follows each run's target mode.
        #[arg(long = "run")]
        runs: Vec<PathBuf>,
        /// Test dataset; defaults to the held-out split of the first run.
        #[arg(long)]
        test_dir: Option<PathBuf>,
        /// Include the non-maximum-suppression baseline.
        #[arg(long)]
        nms: bool,
    },
    /// Generate a synthetic spheroid dataset.
    Synth {
        /// Number of spheroids.
        n: usize,
        /// JSON file with spec ranges; defaults to the built-in ranges.
        #[arg(long)]
        ranges: Option<PathBuf>,
    },
    /// Finite-difference check of every autodiff op.
    Gradcheck {
        /// Random cases per op.
        #[arg(long, default_value_t = 20)]
        cases: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    GaussianFixed,
    GaussianAdaptive,
    Density,
}

impl From<Mode> for TargetMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::GaussianFixed => TargetMode::GaussianFixed,
            Mode::GaussianAdaptive => TargetMode::GaussianAdaptive,
            Mode::Density => TargetMode::Density,
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::InvalidConfig(_)) => 2,
        Some(Error::Diverged { .. }) => 4,
        Some(_) => 3,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = set_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn set_threads() -> Result<()> {
    let Ok(v) = std::env::var("SPHEREMAP_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| anyhow!("SPHEREMAP_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut doc = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
            serde_json::from_str::<Value>(&text)
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?
        }
        None => json!({}),
    };
    if let Some(p) = &cli.preset {
        doc["preset"] = json!(p);
    }
    if let Some(s) = cli.seed {
        doc["seed"] = json!(s);
    }
    Ok(RunConfig::from_json(&doc.to_string())?)
}

fn stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("output").to_string()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Project { meshes, png } => cmd_project(&cfg, meshes, *png, &cli.out)?,
        Command::Maps { annotations } => cmd_maps(&cfg, annotations, &cli.out)?,
        Command::Train { dataset, mode, resume } => cmd_train(&cfg, dataset, mode.map(Into::into), *resume, &cli.out)?,
        Command::Predict { run, inputs } => cmd_predict(run, inputs, &cli.out)?,
        Command::Eval { runs, test_dir, nms } => cmd_eval(&cfg, runs, test_dir.as_deref(), *nms, &cli.out)?,
        Command::Synth { n, ranges } => cmd_synth(&cfg, *n, ranges.as_deref(), &cli.out)?,
        Command::Gradcheck { cases } => return cmd_gradcheck(*cases, cfg.seed),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_project(cfg: &RunConfig, meshes: &[PathBuf], png: bool, out: &Path) -> Result<()> {
    if meshes.is_empty() {
        bail!(Error::EmptyInput("no mesh paths given"));
    }
    create_dir(out)?;
    for mesh in meshes {
        let cloud = read_point_cloud::<f32>(mesh)?;
        let grid = prepare_raster(&cloud, &cfg.projection)?;
        let dest = out.join(format!("{}.smr", stem(mesh)));
        write_raster(&dest, &grid)?;
        if png {
            export_png(&grid, CH_RHO, &out.join(format!("{}.rho.png", stem(mesh))))?;
        }
        println!("{} -> {} ({}x{})", mesh.display(), dest.display(), grid.height(), grid.width());
    }
    Ok(())
}

fn cmd_maps(cfg: &RunConfig, annotations: &[PathBuf], out: &Path) -> Result<()> {
    if annotations.is_empty() {
        bail!(Error::EmptyInput("no annotation paths given"));
    }
    create_dir(out)?;
    for path in annotations {
        let kps = read_annotation(path)?.keypoints()?;
        let name = stem(path);
        for (label, mode) in [("gaussian_fixed", SigmaMode::Fixed), ("gaussian_adaptive", SigmaMode::Adaptive)] {
            let g = GaussianMapConfig { mode, ..cfg.gaussian };
            let map = gaussian_map::<f32>(&kps, &g)?;
            write_raster(&out.join(format!("{name}.{label}.smr")), &map.to_raster())?;
        }
        let d = density_map::<f32>(&kps, &cfg.density)?;
        write_raster(&out.join(format!("{name}.density.smr")), &d.to_raster())?;
        println!("{}: {} keypoints, density sum {:.6}", path.display(), kps.len(), d.sum());
    }
    Ok(())
}

/// Train/validation/test names recorded in the run config.
fn split_names(names: &[String], frac: f64, val_frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let (trainval, test) = split_indices(names.len(), frac, seed);
    let n_val = ((trainval.len() as f64 * val_frac).round() as usize).clamp(1, trainval.len().saturating_sub(1).max(1));
    let (val_pos, train_pos) = split_indices(trainval.len(), n_val as f64 / trainval.len() as f64, seed ^ 0x5a17);
    let pick = |pos: &[usize]| pos.iter().map(|&i| trainval[i]).collect::<Vec<_>>();
    (pick(&train_pos), pick(&val_pos), test)
}

fn cmd_train(cfg: &RunConfig, dataset: &Path, mode: Option<TargetMode>, resume: bool, out: &Path) -> Result<()> {
    let mode = mode.unwrap_or(cfg.train.target_mode);
    let tcfg = cfg.train_config(mode);
    let data = load_dataset::<f32>(dataset, &cfg.projection, &cfg.map_settings())?;
    if data.len() < spheremap::training::MIN_DATASET {
        bail!(Error::DatasetTooSmall { got: data.len(), need: spheremap::training::MIN_DATASET });
    }
    let names: Vec<String> = data.iter().map(|(n, _)| n.clone()).collect();
    let (tr, va, te) = split_names(&names, tcfg.split_fraction, tcfg.val_fraction, tcfg.seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| data[i].1.clone()).collect::<Vec<Sample<f32>>>();
    let names_of = |idx: &[usize]| idx.iter().map(|&i| names[i].clone()).collect::<Vec<_>>();
    create_dir(out)?;
    let mut run_cfg = cfg.clone();
    run_cfg.train.target_mode = mode;
    run_cfg.paths.dataset = Some(dataset.to_path_buf());
    run_cfg.paths.run_dir = Some(out.to_path_buf());
    write_json(
        &out.join("config.json"),
        &json!({
            "run": run_cfg,
            "train": tcfg,
            "split": {"train": names_of(&tr), "val": names_of(&va), "test": names_of(&te)},
        }),
    )?;
    let resume_state = if resume { Some(load_checkpoint::<f32>(out, "last")?) } else { None };
    let mut model = spheremap::gnet::build_model::<f32>(cfg.model, cfg.seed)?;
    let outcome = train(&mut model, &pick(&tr), &pick(&va), &tcfg, resume_state, |r, _| {
        println!("epoch {:>4}  train {:.6}  val {:.6}", r.epoch, r.train_loss, r.val_loss);
    })?;
    write_metrics_csv(&out.join("metrics.csv"), outcome.history())?;
    save_checkpoint(out, "best", &outcome.best)?;
    save_checkpoint(out, "last", &outcome.last)?;
    println!(
        "best epoch {} (val {:.6}){}",
        outcome.best.best_epoch,
        outcome.best.best_val_loss,
        if outcome.stopped_early { ", stopped on plateau" } else { "" }
    );
    Ok(())
}

struct RunInfo {
    run: RunConfig,
    mode: TargetMode,
    test_names: Vec<String>,
}

fn read_run(dir: &Path) -> Result<RunInfo> {
    let path = dir.join("config.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    let run: RunConfig = serde_json::from_value(doc["run"].clone())
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    let test_names = doc["split"]["test"]
        .as_array()
        .map(|a| a.iter().filter_map(|v| v.as_str().map(String::from)).collect())
        .unwrap_or_default();
    Ok(RunInfo { mode: run.train.target_mode, run, test_names })
}

fn cmd_predict(run_dir: &Path, inputs: &[PathBuf], out: &Path) -> Result<()> {
    if inputs.is_empty() {
        bail!(Error::EmptyInput("no inputs given"));
    }
    let info = read_run(run_dir)?;
    let (mut model, _) = load_model::<f32>(run_dir, "best")?;
    create_dir(out)?;
    for input in inputs {
        let grid: RasterGrid32 = if input.extension().is_some_and(|e| e == "smr") {
            read_raster(input)?
        } else {
            prepare_raster(&read_point_cloud::<f32>(input)?, &info.run.projection)?
        };
        let pred = predict(&mut model, &normalize_input_channels(&grid)?, map_kind(info.mode))?;
        let res = count_prediction(&pred.map, info.mode, info.run.gaussian.p_t, info.run.projection.wrap_azimuth);
        let name = stem(input);
        write_raster(&out.join(format!("{name}.pred.smr")), &pred.map.to_raster())?;
        res.write_json(&out.join(format!("{name}.count.json")))?;
        write_json(
            &out.join(format!("{name}.pred.json")),
            &json!({"source": input, "run": run_dir, "method": res.method, "padding": pred.padding}),
        )?;
        println!("{}: {} {}", input.display(), res.method, res.count);
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, runs: &[PathBuf], test_dir: Option<&Path>, nms: bool, out: &Path) -> Result<()> {
    if runs.is_empty() && !nms {
        bail!(Error::InvalidConfig("nothing to evaluate: pass --run and/or --nms".into()));
    }
    let infos = runs.iter().map(|r| read_run(r)).collect::<Result<Vec<_>>>()?;
    let (dir, only): (PathBuf, Option<Vec<String>>) = match (test_dir, infos.first()) {
        (Some(d), _) => (d.to_path_buf(), None),
        (None, Some(first)) => (
            first
                .run
                .paths
                .dataset
                .clone()
                .ok_or_else(|| Error::InvalidConfig("run has no dataset path; pass --test-dir".into()))?,
            Some(first.test_names.clone()),
        ),
        (None, None) => bail!(Error::InvalidConfig("--nms alone needs --test-dir".into())),
    };
    let base = infos.first().map(|i| &i.run).unwrap_or(cfg);
    let files: Vec<(PathBuf, PathBuf)> = spheremap::synthbench::dataset_files(&dir)?
        .into_iter()
        .filter(|(m, _)| only.as_ref().is_none_or(|names| names.contains(&stem(m))))
        .collect();
    if files.is_empty() {
        bail!(Error::EmptyInput("no test samples"));
    }
    let mut results = Vec::new();
    for (run_dir, info) in runs.iter().zip(&infos) {
        let (mut model, _) = load_model::<f32>(run_dir, "best")?;
        let mut pairs = Vec::new();
        for (mesh, ann) in &files {
            let kps = spheremap::training::load_keypoints(ann, &info.run.projection)?;
            let grid = prepare_raster(&read_point_cloud::<f32>(mesh)?, &info.run.projection)?;
            let pred = predict(&mut model, &normalize_input_channels(&grid)?, map_kind(info.mode))?;
            let res = count_prediction(&pred.map, info.mode, info.run.gaussian.p_t, info.run.projection.wrap_azimuth);
            pairs.push((kps.len() as f64, res.count));
        }
        results.push(MethodResults { method: info.mode.method_name().into(), pairs });
    }
    if nms {
        let mut pairs = Vec::new();
        for (mesh, ann) in &files {
            let kps = spheremap::training::load_keypoints(ann, &base.projection)?;
            let grid = prepare_raster(&read_point_cloud::<f32>(mesh)?, &base.projection)?;
            let res: CountResult = nms_baseline(&grid, base.gaussian.beta, base.projection.wrap_azimuth)?;
            pairs.push((kps.len() as f64, res.count));
        }
        results.push(MethodResults { method: "nms".into(), pairs });
    }
    let reports = export_report(out, &results)?;
    println!("{:<10} {:>10} {:>10} {:>8} {:>8}", "method", "mae", "rmse", "fp%", "fn%");
    for r in reports {
        println!("{:<10} {:>10.3} {:>10.3} {:>8.2} {:>8.2}", r.method, r.mae, r.rmse, r.fp_pct, r.fn_pct);
    }
    Ok(())
}

fn cmd_synth(cfg: &RunConfig, n: usize, ranges: Option<&Path>, out: &Path) -> Result<()> {
    let ranges: SpecRanges = match ranges {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.to_path_buf(), source: e })?;
            serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?
        }
        None => SpecRanges::default(),
    };
    let (samples, manifest) = generate_dataset::<f64>(n, &ranges, &cfg.projection, cfg.seed)?;
    write_dataset(out, &samples, &manifest)?;
    println!(
        "wrote {n} spheroids to {} (mean {:.1} features)",
        out.display(),
        manifest.mean_features()
    );
    Ok(())
}

fn cmd_gradcheck(cases: usize, seed: u64) -> Result<ExitCode> {
    let report = gradcheck_suite(cases.max(1), seed)?;
    println!("{:<20} {:>6} {:>14}  status", "op", "cases", "max_rel_err");
    let mut ok = true;
    for r in &report {
        ok &= r.passed();
        println!(
            "{:<20} {:>6} {:>14.3e}  {}",
            r.op,
            r.cases,
            r.max_rel_error,
            if r.passed() { "PASS" } else { "FAIL" }
        );
    }
    println!("tolerance {GRADCHECK_TOLERANCE:e}");
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
