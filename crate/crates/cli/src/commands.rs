use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cls_core::bench::{aggregate, build_dataset, records_to_csv, run_plan, timings_to_csv, ExperimentPlan};
use cls_core::geometry::io::{read_cloud, write_cloud};
use cls_core::geometry::PointCloud;
use cls_core::grasp::{warp_grasp, GraspAnnotation};
use cls_core::inference::{
    complete_shape, infer, EnergyDirection, InferenceConfig, InferenceRecord, InferenceResult, LatentShapeModel,
};
use cls_core::shape_space::{train_category, CanonicalChoice, CategoryModel, TrainConfig, TrainingSet};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::args::{BenchArgs, CpdFlags, GenerateArgs, InferArgs, SynthArgs, TrainArgs, WarpArgs};
use crate::config::Layered;
use crate::error::{CliError, CliResult};

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn require_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => {
            Err(CliError::Usage(format!("output directory {} does not exist", p.display())))
        }
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}

fn pretty(v: &impl Serialize) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(v).map_err(CliError::other)?;
    s.push('\n');
    Ok(s)
}

fn load_model(path: &Path) -> CliResult<CategoryModel<f64>> {
    require_file(path, "model")?;
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    CategoryModel::from_json(&text).map_err(|e| CliError::Usage(format!("model {}: {e}", path.display())))
}

fn load_cloud(path: &Path) -> CliResult<PointCloud<f64>> {
    require_file(path, "cloud")?;
    read_cloud(path).map_err(CliError::usage)
}

fn apply_cpd_flags<T>(cfg: &mut Layered<T>, prefix: &str, flags: &CpdFlags, cpd: fn(&mut T) -> &mut cls_core::cpd::CpdConfig)
where
    T: Serialize + serde::de::DeserializeOwned + Default,
{
    cfg.flag(&format!("{prefix}beta"), flags.beta, |t, v| cpd(t).beta = v);
    cfg.flag(&format!("{prefix}lambda"), flags.lambda, |t, v| cpd(t).lambda = v);
    cfg.flag(&format!("{prefix}omega"), flags.omega, |t, v| cpd(t).omega = v);
}

fn parse_canonical(s: &str) -> CliResult<CanonicalChoice> {
    if s == "auto" {
        return Ok(CanonicalChoice::Auto);
    }
    s.parse()
        .map(CanonicalChoice::Index)
        .map_err(|_| CliError::Usage(format!("--canonical expects `auto` or an index, got `{s}`")))
}

/// Training clouds in file-name order with their stems as labels.
pub fn training_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && matches!(p.extension().and_then(|e| e.to_str()), Some("ply" | "csv")))
        .collect();
    files.sort();
    Ok(files)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn train(args: &TrainArgs) -> CliResult<()> {
    if !args.input.is_dir() {
        return Err(CliError::Usage(format!("training directory {} does not exist", args.input.display())));
    }
    require_parent(&args.output)?;
    let mut cfg = Layered::<TrainConfig>::load(args.config.as_deref())?;
    let canonical = args.canonical.as_deref().map(parse_canonical).transpose()?;
    cfg.flag("canonical", canonical, |c, v| c.canonical = v);
    cfg.flag("pca.seed", args.seed, |c, v| c.pca.seed = v);
    apply_cpd_flags(&mut cfg, "cpd.", &args.cpd, |c| &mut c.cpd);
    cfg.value.cpd.validate().map_err(CliError::usage)?;
    cfg.echo("train");

    let files = training_files(&args.input)?;
    if files.len() < 2 {
        return Err(CliError::Usage(format!(
            "{} holds {} cloud(s); training needs at least two",
            args.input.display(),
            files.len()
        )));
    }
    let clouds = files.iter().map(|f| load_cloud(f)).collect::<CliResult<Vec<_>>>()?;
    let labels: Vec<String> = files.iter().map(|f| stem(f)).collect();
    let set = TrainingSet::new(clouds, labels.clone()).map_err(CliError::usage)?;
    if let CanonicalChoice::Index(i) = cfg.value.canonical {
        if i >= set.len() {
            return Err(CliError::Usage(format!("canonical index {i} out of range for {} instances", set.len())));
        }
    }
    let outcome = train_category(&set, &cfg.value).map_err(|e| CliError::Training(e.to_string()))?;
    let mut model = outcome.model;
    model.provenance.extra.insert("cli".into(), cfg.provenance()?);
    model.provenance.extra.insert("inputs".into(), json!(labels));
    let text = model.to_json().map_err(CliError::other)?;
    write_text(&args.output, &text)?;

    println!("canonical: {}", model.canonical_label);
    println!("latent dimension: {}", model.latent_dim);
    println!("explained variance: {:.6}", model.explained_variance);
    for (label, r) in model.training_labels.iter().zip(&model.registration_residuals) {
        println!("residual {label}: {r:.6e}");
    }
    Ok(())
}

/// What `infer` writes next to the completed cloud.
#[derive(Debug, Serialize, Deserialize)]
pub struct InferOutput {
    pub result: InferenceRecord,
    pub provenance: Value,
}

pub fn infer_cmd(args: &InferArgs) -> CliResult<()> {
    let model = load_model(&args.model)?;
    let obs = load_cloud(&args.input)?;
    require_parent(&args.output)?;
    let mut cfg = Layered::<InferenceConfig>::load(args.config.as_deref())?;
    cfg.flag("sigma2", args.sigma2, |c, v| c.sigma2 = Some(v));
    cfg.switch("direction", args.literal_eq12, |c| c.direction = EnergyDirection::ModelAsData);
    cfg.value.validate().map_err(CliError::usage)?;
    cfg.echo("infer");
    if args.points == Some(0) {
        return Err(CliError::Usage("--points must be positive".into()));
    }

    let lsm = LatentShapeModel::new(model).map_err(CliError::usage)?;
    let started = Instant::now();
    let result = infer(&lsm, &obs, &cfg.value, None).map_err(|e| CliError::NotConverged(e.to_string()))?;
    let elapsed = started.elapsed().as_secs_f64();
    let count = args.points.unwrap_or(lsm.model().canonical.len());
    let completed = complete_shape(&result, count).map_err(CliError::other)?;

    let cloud_path = args.output.with_extension("ply");
    let json_path = args.output.with_extension("json");
    write_cloud(&cloud_path, &completed).map_err(CliError::usage)?;
    let mut provenance = cfg.provenance()?;
    provenance["model"] = json!(args.model.display().to_string());
    provenance["input"] = json!(args.input.display().to_string());
    let out = InferOutput {
        result: result.to_record(),
        provenance,
    };
    write_text(&json_path, &pretty(&out)?)?;

    let trace = &result.energy_trace;
    println!(
        "energy {:.6e} -> {:.6e} over {} iterations in {} stage(s)",
        trace.first().copied().unwrap_or(f64::NAN),
        trace.last().copied().unwrap_or(f64::NAN),
        result.iterations,
        result.stage_starts.len()
    );
    println!("converged: {}", result.converged);
    println!("wall time: {elapsed:.3} s");
    if !result.converged && !args.allow_nonconverged {
        return Err(CliError::NotConverged(format!(
            "stopped after {} iterations; outputs were written, rerun with --allow-nonconverged to accept",
            result.iterations
        )));
    }
    Ok(())
}

pub fn warp(args: &WarpArgs) -> CliResult<()> {
    let model = load_model(&args.model)?;
    require_file(&args.result, "inference result")?;
    require_file(&args.input, "annotation")?;
    require_parent(&args.output)?;
    let text = fs::read_to_string(&args.result).map_err(CliError::usage)?;
    let saved: InferOutput = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("inference result {}: {e}", args.result.display())))?;
    if !saved.result.converged && !args.allow_nonconverged {
        return Err(CliError::NotConverged(format!(
            "{} is not a converged fit; pass --allow-nonconverged to warp anyway",
            args.result.display()
        )));
    }
    let annotation_text = fs::read_to_string(&args.input).map_err(CliError::usage)?;
    let annotation = GraspAnnotation::<f64>::from_json(&annotation_text)
        .map_err(|e| CliError::Usage(format!("annotation {}: {e}", args.input.display())))?;
    let lsm = LatentShapeModel::new(model).map_err(CliError::usage)?;
    let result = InferenceResult::from_record(&lsm, &saved.result).map_err(CliError::usage)?;
    let warped = warp_grasp(&annotation, &result).map_err(CliError::other)?;
    for label in &warped.rigid_fallbacks {
        log::warn!("`{label}` used the rigid-only orientation");
    }
    let out = json!({
        "warped": warped.to_record(),
        "provenance": {
            "model": args.model.display().to_string(),
            "result": args.result.display().to_string(),
            "annotation": args.input.display().to_string(),
        },
    });
    write_text(&args.output, &pretty(&out)?)?;
    println!("warped {} pose(s)", warped.annotation.len());
    Ok(())
}

fn parse_latent(s: &str, q: usize) -> CliResult<DVector<f64>> {
    let values = s
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Usage(format!("--latent: {e}")))?;
    if values.len() != q {
        return Err(CliError::Usage(format!("--latent has {} values, the model has q = {q}", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CliError::Usage("--latent values must be finite".into()));
    }
    Ok(DVector::from_vec(values))
}

pub fn generate(args: &GenerateArgs) -> CliResult<()> {
    let model = load_model(&args.model)?;
    require_parent(&args.output)?;
    let q = model.latent_dim;
    let (x, source) = match (&args.latent, args.seed) {
        (Some(s), _) => (parse_latent(s, q)?, json!("latent")),
        (None, Some(seed)) => (model.sample_latent(seed), json!({ "seed": seed })),
        (None, None) => (DVector::zeros(q), json!("zero")),
    };
    let shape = model.deform(&x).map_err(CliError::other)?;
    write_cloud(&args.output, &shape).map_err(CliError::usage)?;
    let sidecar = json!({
        "x": x.iter().collect::<Vec<_>>(),
        "provenance": { "model": args.model.display().to_string(), "source": source },
    });
    write_text(&args.output.with_extension("json"), &pretty(&sidecar)?)?;
    println!("wrote {} points", shape.len());
    Ok(())
}

fn plan_config(config: Option<&Path>, seed: Option<u64>) -> CliResult<Layered<ExperimentPlan>> {
    let mut cfg = Layered::<ExperimentPlan>::load(config)?;
    cfg.flag("seed", seed, |p, v| p.seed = v);
    Ok(cfg)
}

fn make_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))
}

pub fn bench(args: &BenchArgs) -> CliResult<()> {
    let mut cfg = plan_config(args.config.as_deref(), args.seed)?;
    apply_cpd_flags(&mut cfg, "train.cpd.", &args.cpd, |p| &mut p.train.cpd);
    cfg.flag("inference.sigma2", args.sigma2, |p, v| p.inference.sigma2 = Some(v));
    cfg.switch("inference.direction", args.literal_eq12, |p| {
        p.inference.direction = EnergyDirection::ModelAsData
    });
    cfg.value.validate().map_err(CliError::usage)?;
    cfg.echo("bench");
    make_dir(&args.output)?;

    let outcome = run_plan::<f64>(&cfg.value).map_err(|e| CliError::Training(e.to_string()))?;
    let summary = aggregate(&outcome.records);
    let dir = &args.output;
    write_text(&dir.join("records.csv"), &records_to_csv(&outcome.records))?;
    write_text(&dir.join("summary.csv"), &summary.to_csv())?;
    write_text(&dir.join("summary.json"), &summary.to_json().map_err(CliError::other)?)?;
    write_text(&dir.join("timings.csv"), &timings_to_csv(&outcome.records, &outcome.context))?;
    write_text(&dir.join("model.json"), &outcome.model.to_json().map_err(CliError::other)?)?;
    let ctx = &outcome.context;
    let provenance = json!({
        "plan": cfg.provenance()?,
        "voxel_leaf": ctx.voxel_leaf,
        "canonical_points": ctx.canonical_points,
        "latent_dim": ctx.latent_dim,
        "explained_variance": ctx.explained_variance,
        "warnings": outcome.warnings,
    });
    write_text(&dir.join("provenance.json"), &pretty(&provenance)?)?;

    println!(
        "model: q = {}, explained variance {:.4}, M = {}, trained in {:.1} s",
        ctx.latent_dim, ctx.explained_variance, ctx.canonical_points, ctx.training_seconds
    );
    println!("{:<13} {:>6} {:>6} {:>7} {:>6} {:>12} {:>12} {:>3}", "axis", "noise", "trans", "angle", "method", "mean", "sd", "n");
    for row in &summary.rows {
        let c = &row.condition;
        println!(
            "{:<13} {:>6} {:>6} {:>7.4} {:>6} {:>12.6e} {:>12.6e} {:>3}",
            c.axis.name(),
            c.noise,
            c.translation,
            c.angle,
            row.method.name(),
            row.mean,
            row.sd,
            row.n
        );
    }
    let failed = outcome.records.iter().filter(|r| r.failed()).count();
    if failed > 0 {
        return Err(CliError::TrialErrors {
            failed,
            total: outcome.records.len(),
        });
    }
    Ok(())
}

pub fn synth(args: &SynthArgs) -> CliResult<()> {
    let cfg = plan_config(args.config.as_deref(), args.seed)?;
    cfg.value.validate().map_err(CliError::usage)?;
    cfg.echo("synth");
    let data = build_dataset::<f64>(&cfg.value).map_err(CliError::other)?;
    for (sub, clouds, labels) in [("train", &data.train, &data.train_labels), ("test", &data.test, &data.test_labels)] {
        let dir = args.output.join(sub);
        make_dir(&dir)?;
        for (cloud, label) in clouds.iter().zip(labels) {
            write_cloud(&dir.join(format!("{label}.ply")), cloud).map_err(CliError::usage)?;
        }
    }
    println!(
        "wrote {} training and {} held-out clouds at voxel leaf {:.6}",
        data.train.len(),
        data.test.len(),
        data.voxel_leaf
    );
    Ok(())
}
