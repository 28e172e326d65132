//! The pipeline stages behind the CLI subcommands. Each stage reads its
//! prerequisites from the run directory, writes its artifacts, and records
//! them in the manifest so a rerun skips finished work.
//!
//! Layout under the run directory:
//!   data/                    generated dataset with split tags
//!   models/classifier/       trained classifier checkpoint (+ loss CSV)
//!   models/vae/              trained VAE checkpoint (+ loss CSV)
//!   cf/                      per-sample counterfactuals and summary.csv
//!   attributions/            per-sample raw maps, one .cft per baseline
//!   eval/                    per-sample metric and curve CSVs
//!   reports/                 aggregate.csv and curves.csv
//!   render/                  on-demand PGM/PPM views (render subcommand)

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rand::RngCore;
use rayon::prelude::*;

use cfbase_core::attribution::{
    build_baseline, expected_gradients, integrated_gradients, AlphaMode, AttributionMap,
    BaselineContext, BaselineSpec, IgConfig,
};
use cfbase_core::counterfactual::{find_counterfactual, CfConfig, CounterfactualResult};
use cfbase_core::data::{
    generate_band_dataset, generate_blob_dataset, load_dataset, save_dataset, split_dataset,
    Dataset, Split, CLASS_NORMAL, CLASS_PATHOLOGICAL,
};
use cfbase_core::error::Error as CoreError;
use cfbase_core::io::{read_tensor, write_pgm, write_tensor};
use cfbase_core::metrics::{
    self, mass_center_ablation_curve, topk_ablation_curve, EvalRecord, ImputeContext, ImputeMethod,
};
use cfbase_core::models::{train_classifier, train_vae, write_loss_curve, Classifier, TrainConfig, Vae};
use cfbase_core::rng::sample_rng;
use cfbase_core::tensor::Tensor;

use crate::config::RunConfig;
use crate::manifest::{RunManifest, STAGES};
use crate::render::render_attribution;
use crate::report;
use crate::PipelineError;

/// Creates the run directory and loads (or initializes) its manifest,
/// refusing a directory whose manifest belongs to a different config.
pub fn open_run(cfg: &RunConfig) -> Result<RunManifest> {
    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    RunManifest::load_or_new(&cfg.out_dir, &cfg.result_hash())
}

fn prerequisites(stage: &str) -> &'static [&'static str] {
    match stage {
        "gen-data" => &[],
        "train-classifier" | "train-vae" => &["gen-data"],
        "attribute" => &["gen-data", "train-classifier", "train-vae"],
        "evaluate" => &["gen-data", "train-classifier", "attribute"],
        "report" => &["evaluate"],
        _ => &[],
    }
}

/// Runs one stage unless the manifest shows it already complete. Returns
/// whether work was done.
pub fn run_stage(cfg: &RunConfig, manifest: &mut RunManifest, stage: &str) -> Result<bool> {
    if !STAGES.contains(&stage) {
        return Err(PipelineError::Config(format!("unknown stage {stage:?}")).into());
    }
    if manifest.stage_done(&cfg.out_dir, stage) {
        eprintln!("[{stage}] up to date, skipping");
        return Ok(false);
    }
    for needed in prerequisites(stage) {
        manifest.require_done(&cfg.out_dir, stage, needed)?;
    }
    let start = Instant::now();
    let artifacts = match stage {
        "gen-data" => stage_gen_data(cfg)?,
        "train-classifier" => stage_train_classifier(cfg)?,
        "train-vae" => stage_train_vae(cfg)?,
        "attribute" => stage_attribute(cfg)?,
        "evaluate" => stage_evaluate(cfg)?,
        "report" => stage_report(cfg)?,
        _ => unreachable!("stage validated above"),
    };
    let wall = start.elapsed();
    manifest.record(&cfg.out_dir, stage, wall, artifacts)?;
    eprintln!("[{stage}] done in {:.1}s", wall.as_secs_f64());
    Ok(true)
}

/// Runs every pipeline stage in order.
pub fn run_all(cfg: &RunConfig, manifest: &mut RunManifest) -> Result<()> {
    for stage in STAGES {
        run_stage(cfg, manifest, stage)?;
    }
    Ok(())
}

// ---------------------------------------------------------------- gen-data

fn stage_gen_data(cfg: &RunConfig) -> Result<Vec<String>> {
    let d = &cfg.dataset;
    let ds = match d.family.as_str() {
        "band" => generate_band_dataset(d.n, d.geometry, d.noise, cfg.seed)?,
        "blob" => generate_blob_dataset(d.n, d.geometry, d.noise, cfg.seed)?,
        other => return Err(PipelineError::Config(format!("unknown family {other:?}")).into()),
    };
    let ds = split_dataset(ds, d.split, cfg.seed)?;
    save_dataset(&ds, &cfg.out_dir.join("data"))?;
    files_under(&cfg.out_dir, "data")
}

// ---------------------------------------------------------------- training

fn load_run_dataset(cfg: &RunConfig) -> Result<Dataset> {
    load_dataset(&cfg.out_dir.join("data")).context("loading generated dataset")
}

fn stage_train_classifier(cfg: &RunConfig) -> Result<Vec<String>> {
    let ds = load_run_dataset(cfg)?;
    let tc = TrainConfig {
        lr: cfg.classifier.lr,
        epochs: cfg.classifier.epochs,
        batch_size: cfg.classifier.batch_size,
        beta: 0.0,
        class_weighting: cfg.classifier.class_weighting,
        seed: cfg.seed,
    };
    let (model, curve) = train_classifier(&ds, &tc)?;
    model.save(&cfg.out_dir.join("models/classifier"))?;
    write_loss_curve(&cfg.out_dir.join("models/classifier_loss.csv"), &curve)?;
    let mut artifacts = files_under(&cfg.out_dir, "models/classifier")?;
    artifacts.push("models/classifier_loss.csv".into());
    artifacts.sort();
    Ok(artifacts)
}

fn stage_train_vae(cfg: &RunConfig) -> Result<Vec<String>> {
    let ds = load_run_dataset(cfg)?;
    let tc = TrainConfig {
        lr: cfg.vae.lr,
        epochs: cfg.vae.epochs,
        batch_size: cfg.vae.batch_size,
        beta: cfg.vae.beta,
        class_weighting: false,
        seed: cfg.seed,
    };
    let (model, curve) = train_vae(&ds, &tc)?;
    model.save(&cfg.out_dir.join("models/vae"))?;
    write_loss_curve(&cfg.out_dir.join("models/vae_loss.csv"), &curve)?;
    let mut artifacts = files_under(&cfg.out_dir, "models/vae")?;
    artifacts.push("models/vae_loss.csv".into());
    artifacts.sort();
    Ok(artifacts)
}

// --------------------------------------------------------------- attribute

/// Seed for one (stage tag, sample) pair, derived from the master seed so
/// runs are reproducible end to end but streams never collide.
fn derived_seed(master: u64, tag: &str, sample_id: usize) -> u64 {
    sample_rng(master, tag, sample_id as u64).next_u64()
}

fn baseline_spec(name: &str, cfg: &RunConfig, sample_id: usize) -> Result<BaselineSpec> {
    let at = &cfg.attribution;
    Ok(match name {
        "zeros" => BaselineSpec::Zeros,
        "ones" => BaselineSpec::Ones,
        "blurred" => BaselineSpec::Blurred { sigma: at.blur_sigma },
        "uniform" => BaselineSpec::Uniform {
            seed: derived_seed(cfg.seed, "uniform-baseline-seed", sample_id),
        },
        "eg" => BaselineSpec::Eg {
            n: at.eg_baselines,
            seed: derived_seed(cfg.seed, "eg-baseline-seed", sample_id),
        },
        "cf" => BaselineSpec::Cf,
        "egcf" => BaselineSpec::EgCf {
            n: at.egcf_baselines,
            sigma: at.egcf_sigma,
            seed: derived_seed(cfg.seed, "egcf-baseline-seed", sample_id),
        },
        other => return Err(PipelineError::Config(format!("unknown baseline {other:?}")).into()),
    })
}

fn alpha_seed(name: &str, cfg: &RunConfig, sample_id: usize) -> u64 {
    let tag = if name == "egcf" { "egcf-alpha-seed" } else { "eg-alpha-seed" };
    derived_seed(cfg.seed, tag, sample_id)
}

struct SampleAttribution {
    sample_id: usize,
    cf: CounterfactualResult,
    /// (baseline label, raw map) in configured baseline order.
    maps: Vec<(String, Tensor)>,
    warnings: Vec<String>,
}

fn attribute_sample(
    cfg: &RunConfig,
    sample_id: usize,
    x: &Tensor,
    clf: &Classifier,
    vae: &Vae,
    train_pool: &[&Tensor],
) -> Result<SampleAttribution> {
    let cf_cfg = CfConfig {
        lr: cfg.counterfactual.lr,
        max_iters: cfg.counterfactual.max_iters,
        threshold: cfg.counterfactual.threshold,
        normal_class: CLASS_NORMAL,
        snapshot_every: cfg.counterfactual.trajectories.then_some(10),
    };
    let cf = find_counterfactual(x, clf, vae, &cf_cfg)?;
    let ctx = BaselineContext { train_images: train_pool, vae: Some(vae), cf: Some(&cf) };

    let mut maps = Vec::with_capacity(cfg.baselines.len());
    let mut warnings = Vec::new();
    for name in &cfg.baselines {
        let spec = baseline_spec(name, cfg, sample_id)?;
        let set = build_baseline(&spec, x, &ctx)?;
        if let Some(w) = set.warning {
            warnings.push(w);
        }
        let raw = if spec.is_set_valued() {
            expected_gradients(
                x,
                &set.images,
                clf,
                CLASS_PATHOLOGICAL,
                cfg.attribution.draws_per_baseline,
                AlphaMode::Stratified { seed: alpha_seed(name, cfg, sample_id) },
            )?
        } else {
            integrated_gradients(
                x,
                &set.images[0],
                clf,
                CLASS_PATHOLOGICAL,
                &IgConfig { steps: cfg.attribution.ig_steps },
            )?
        };
        maps.push((name.clone(), raw));
    }
    Ok(SampleAttribution { sample_id, cf, maps, warnings })
}

/// Tiles single-channel images left to right into one `[H, W·m]` image.
fn horizontal_strip(images: &[&Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| CoreError::invalid("empty image strip"))?;
    let (h, w) = match first.shape() {
        [1, h, w] => (*h, *w),
        other => return Err(CoreError::invalid(format!("strip tiles must be [1,H,W], got {other:?}")).into()),
    };
    for img in images {
        if img.shape() != first.shape() {
            return Err(CoreError::invalid("strip tiles must share one shape").into());
        }
    }
    let m = images.len();
    Ok(Tensor::from_fn(&[h, w * m], |i| {
        let row = i / (w * m);
        let col = i % (w * m);
        images[col / w].data()[row * w + col % w]
    }))
}

fn stage_attribute(cfg: &RunConfig) -> Result<Vec<String>> {
    let ds = load_run_dataset(cfg)?;
    let clf = Classifier::load(&cfg.out_dir.join("models/classifier"))?;
    let vae = Vae::load(&cfg.out_dir.join("models/vae"))?;
    let train_idx = ds.indices(Split::Train);
    let train_pool: Vec<&Tensor> = train_idx.iter().map(|&i| &ds.samples[i].image).collect();

    // Cohort: test-split pathological samples the classifier gets right and
    // whose ground-truth mask is nonempty. Everything else is logged.
    let mut cohort = Vec::new();
    let mut skipped: Vec<String> = Vec::new();
    for id in ds.indices(Split::Test) {
        let sample = &ds.samples[id];
        if sample.label != CLASS_PATHOLOGICAL {
            continue;
        }
        let probs = clf.probabilities(&sample.image)?;
        if probs[CLASS_PATHOLOGICAL] <= probs[CLASS_NORMAL] {
            skipped.push(format!("{id},misclassified"));
            continue;
        }
        if !sample.mask.data().iter().any(|&v| v > 0.5) {
            skipped.push(format!("{id},empty_mask"));
            continue;
        }
        cohort.push(id);
    }

    let results: Vec<SampleAttribution> = cohort
        .par_iter()
        .map(|&id| attribute_sample(cfg, id, &ds.samples[id].image, &clf, &vae, &train_pool))
        .collect::<Result<_>>()?;

    let cf_dir = cfg.out_dir.join("cf");
    let attr_dir = cfg.out_dir.join("attributions");
    std::fs::create_dir_all(&cf_dir)?;
    std::fs::create_dir_all(&attr_dir)?;

    let mut summary_rows = Vec::with_capacity(results.len());
    let mut seen_warnings = std::collections::BTreeSet::new();
    for res in &results {
        let id = res.sample_id;
        write_tensor(&cf_dir.join(format!("s{id:04}_xstar.cft")), &res.cf.x_star)?;
        write_tensor(&cf_dir.join(format!("s{id:04}_zstar.cft")), &res.cf.z_star)?;
        if cfg.counterfactual.trajectories && !res.cf.trajectory.is_empty() {
            let rows: Vec<String> = res
                .cf
                .trajectory
                .iter()
                .map(|p| format!("{},{:.6},{:.6}", p.iteration, p.ce_loss, p.confidence))
                .collect();
            report::write_csv(
                &cf_dir.join(format!("s{id:04}_trajectory.csv")),
                "iteration,ce_loss,confidence",
                &rows,
            )?;
            let tiles: Vec<&Tensor> = res.cf.trajectory.iter().map(|p| &p.image).collect();
            write_pgm(&cf_dir.join(format!("s{id:04}_trajectory.pgm")), &horizontal_strip(&tiles)?)?;
        }
        for (name, raw) in &res.maps {
            write_tensor(&attr_dir.join(format!("s{id:04}_{name}.cft")), raw)?;
        }
        summary_rows.push(format!(
            "{id},{},{:.6},{}",
            res.cf.iterations_used, res.cf.final_confidence, res.cf.converged
        ));
        for w in &res.warnings {
            seen_warnings.insert(w.clone());
        }
    }
    for w in seen_warnings {
        eprintln!("[attribute] warning: {w}");
    }
    report::write_csv(
        &cf_dir.join("summary.csv"),
        "sample_id,iterations,final_confidence,converged",
        &summary_rows,
    )?;
    report::write_csv(&attr_dir.join("skipped.csv"), "sample_id,reason", &skipped)?;

    let mut artifacts = files_under(&cfg.out_dir, "cf")?;
    artifacts.extend(files_under(&cfg.out_dir, "attributions")?);
    artifacts.sort();
    Ok(artifacts)
}

// ---------------------------------------------------------------- evaluate

fn impute_method(label: &str, blur_sigma: f64) -> Result<ImputeMethod> {
    Ok(match label {
        "mean" => ImputeMethod::Mean,
        "blur" => ImputeMethod::Blur { sigma: blur_sigma },
        "cf" => ImputeMethod::Counterfactual,
        "blur_cf" => ImputeMethod::BlurredCounterfactual { sigma: blur_sigma },
        "mean_normal" => ImputeMethod::MeanNormal,
        other => return Err(PipelineError::Config(format!("unknown imputer {other:?}")).into()),
    })
}

fn pixelwise_mean(images: &[&Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| CoreError::invalid("mean of zero images"))?;
    let mut acc = vec![0.0f64; first.numel()];
    for img in images {
        if img.shape() != first.shape() {
            return Err(CoreError::invalid("pixelwise mean needs matching shapes").into());
        }
        for (a, &v) in acc.iter_mut().zip(img.data()) {
            *a += v as f64;
        }
    }
    let inv = 1.0 / images.len() as f64;
    let data: Vec<f32> = acc.iter().map(|&v| (v * inv) as f32).collect();
    Ok(Tensor::from_vec(first.shape().to_vec(), data)?)
}

/// Sample ids from a counterfactual summary CSV, in file order.
fn read_summary_ids(path: &Path) -> Result<Vec<usize>> {
    let (header, rows) = report::read_csv(path)?;
    if header.first().map(String::as_str) != Some("sample_id") {
        bail!("{} does not look like a counterfactual summary", path.display());
    }
    rows.iter()
        .map(|r| r[0].parse::<usize>().with_context(|| format!("bad sample id {:?}", r[0])))
        .collect()
}

struct SampleEval {
    records: Vec<EvalRecord>,
    /// `sample_id,baseline,reason` rows for degenerate maps.
    skipped: Vec<String>,
}

fn evaluate_sample(
    cfg: &RunConfig,
    ds: &Dataset,
    clf: &Classifier,
    normal_mean: &Tensor,
    sample_id: usize,
) -> Result<SampleEval> {
    let sample = &ds.samples[sample_id];
    let x = &sample.image;
    let x_star = read_tensor(&cfg.out_dir.join(format!("cf/s{sample_id:04}_xstar.cft")))?;
    let ctx = ImputeContext { cf_image: Some(&x_star), normal_mean: Some(normal_mean) };

    let mut records = Vec::with_capacity(cfg.baselines.len());
    let mut skipped = Vec::new();
    'baselines: for name in &cfg.baselines {
        let raw =
            read_tensor(&cfg.out_dir.join(format!("attributions/s{sample_id:04}_{name}.cft")))?;
        let map = AttributionMap::new(raw, CLASS_PATHOLOGICAL, name)?;

        // A degenerate map (all-constant, or single-class mask) has no
        // defined localization score; exclude the pair rather than invent 0.
        let mut undefined = |what: &str, msg: String| {
            skipped.push(format!("{sample_id},{name},{what}: {msg}"));
        };
        let roc_auc = match metrics::roc_auc(&map.normalized, &sample.mask) {
            Ok(v) => v,
            Err(CoreError::Undefined(m)) => {
                undefined("roc_auc", m);
                continue 'baselines;
            }
            Err(e) => return Err(e.into()),
        };
        let fpar = match metrics::fpar(&map.normalized, &sample.mask) {
            Ok(v) => v,
            Err(CoreError::Undefined(m)) => {
                undefined("fpar", m);
                continue 'baselines;
            }
            Err(e) => return Err(e.into()),
        };
        let spread = match metrics::spatial_spread(&map.normalized) {
            Ok(v) => v,
            Err(CoreError::Undefined(m)) => {
                undefined("spread", m);
                continue 'baselines;
            }
            Err(e) => return Err(e.into()),
        };

        let mut curves = Vec::with_capacity(2 * cfg.metrics.imputers.len());
        for imp in &cfg.metrics.imputers {
            let method = impute_method(imp, cfg.metrics.impute_blur_sigma)?;
            curves.push(topk_ablation_curve(
                x,
                &map.normalized,
                clf,
                CLASS_PATHOLOGICAL,
                method,
                &ctx,
                &cfg.metrics.topk_fractions,
            )?);
        }
        for imp in &cfg.metrics.imputers {
            let method = impute_method(imp, cfg.metrics.impute_blur_sigma)?;
            curves.push(mass_center_ablation_curve(
                x,
                &map.normalized,
                clf,
                CLASS_PATHOLOGICAL,
                method,
                &ctx,
                &cfg.metrics.masscenter_sizes,
            )?);
        }
        records.push(EvalRecord {
            sample_id,
            baseline: name.clone(),
            roc_auc,
            fpar,
            spread,
            curves,
        });
    }
    Ok(SampleEval { records, skipped })
}

fn stage_evaluate(cfg: &RunConfig) -> Result<Vec<String>> {
    let ds = load_run_dataset(cfg)?;
    let clf = Classifier::load(&cfg.out_dir.join("models/classifier"))?;
    let cohort = read_summary_ids(&cfg.out_dir.join("cf/summary.csv"))?;

    let train_idx = ds.indices(Split::Train);
    let normals: Vec<&Tensor> = train_idx
        .iter()
        .filter(|&&i| ds.samples[i].label == CLASS_NORMAL)
        .map(|&i| &ds.samples[i].image)
        .collect();
    let normal_mean = pixelwise_mean(&normals)?;

    let evals: Vec<SampleEval> = cohort
        .par_iter()
        .map(|&id| evaluate_sample(cfg, &ds, &clf, &normal_mean, id))
        .collect::<Result<_>>()?;

    let header = report::per_sample_header(&cfg.metrics.imputers);
    let expected_keys: Vec<&str> = header.split(',').skip(2).collect();
    let mut metric_rows = Vec::new();
    let mut curve_rows = Vec::new();
    let mut skipped = Vec::new();
    for eval in &evals {
        for rec in &eval.records {
            let row = rec.to_row();
            let keys: Vec<&str> = row.values.iter().map(|(k, _)| k.as_str()).collect();
            if keys != expected_keys {
                bail!(
                    "metric columns {keys:?} do not match the report header {expected_keys:?}"
                );
            }
            let mut fields = vec![row.sample_id.to_string(), row.baseline.clone()];
            fields.extend(row.values.iter().map(|(_, v)| report::fmt_value(*v)));
            metric_rows.push(fields.join(","));
            for curve in &rec.curves {
                for (x, c) in curve.xs.iter().zip(&curve.confidences) {
                    curve_rows.push(format!(
                        "{},{},{},{},{},{}",
                        rec.sample_id,
                        rec.baseline,
                        curve.protocol.label(),
                        curve.imputer,
                        report::fmt_value(*x),
                        report::fmt_value(*c as f64),
                    ));
                }
            }
        }
        skipped.extend(eval.skipped.iter().cloned());
    }

    let eval_dir = cfg.out_dir.join("eval");
    std::fs::create_dir_all(&eval_dir)?;
    report::write_csv(&eval_dir.join("per_sample.csv"), &header, &metric_rows)?;
    report::write_csv(
        &eval_dir.join("curves_per_sample.csv"),
        "sample_id,baseline,protocol,imputer,x,confidence",
        &curve_rows,
    )?;
    report::write_csv(&eval_dir.join("skipped.csv"), "sample_id,baseline,reason", &skipped)?;
    files_under(&cfg.out_dir, "eval")
}

// ------------------------------------------------------------------ report

fn stage_report(cfg: &RunConfig) -> Result<Vec<String>> {
    let rows = report::rows_from_per_sample(&cfg.out_dir.join("eval/per_sample.csv"))?;
    let cells = metrics::aggregate_rows(&rows)?;
    let dir = cfg.out_dir.join("reports");
    std::fs::create_dir_all(&dir)?;
    report::write_aggregate_csv(&dir.join("aggregate.csv"), &cells)?;
    report::write_mean_curves(
        &cfg.out_dir.join("eval/curves_per_sample.csv"),
        &dir.join("curves.csv"),
    )?;
    files_under(&cfg.out_dir, "reports")
}

// ------------------------------------------------------------------ render

/// Renders every stored attribution (diverging raw + gray normalized), the
/// input, and the counterfactual for each cohort sample. Not part of the
/// numeric pipeline; recorded in the manifest under "render".
pub fn render_run(cfg: &RunConfig, manifest: &mut RunManifest) -> Result<()> {
    for needed in ["gen-data", "attribute"] {
        manifest.require_done(&cfg.out_dir, "render", needed)?;
    }
    let start = Instant::now();
    let ds = load_run_dataset(cfg)?;
    let render_dir = cfg.out_dir.join("render");
    std::fs::create_dir_all(&render_dir)?;
    let cohort = read_summary_ids(&cfg.out_dir.join("cf/summary.csv"))?;

    for &id in &cohort {
        write_pgm(&render_dir.join(format!("s{id:04}_input.pgm")), &ds.samples[id].image)?;
        let x_star = read_tensor(&cfg.out_dir.join(format!("cf/s{id:04}_xstar.cft")))?;
        write_pgm(&render_dir.join(format!("s{id:04}_cf.pgm")), &x_star)?;
        for name in &cfg.baselines {
            let src = cfg.out_dir.join(format!("attributions/s{id:04}_{name}.cft"));
            render_attribution(&src, &render_dir, &format!("s{id:04}_attr_{name}"))?;
        }
    }
    let artifacts = files_under(&cfg.out_dir, "render")?;
    let wall = start.elapsed();
    manifest.record(&cfg.out_dir, "render", wall, artifacts)?;
    eprintln!("[render] done in {:.1}s", wall.as_secs_f64());
    Ok(())
}

// ------------------------------------------------------------------ helpers

/// All regular files under `out_dir/rel`, as sorted run-relative paths.
fn files_under(out_dir: &Path, rel: &str) -> Result<Vec<String>> {
    fn walk(dir: &Path, acc: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(&path, acc)?;
            } else {
                acc.push(path);
            }
        }
        Ok(())
    }
    let root = out_dir.join(rel);
    let mut paths = Vec::new();
    walk(&root, &mut paths).with_context(|| format!("listing {}", root.display()))?;
    let mut out: Vec<String> = paths
        .iter()
        .map(|p| {
            p.strip_prefix(out_dir)
                .expect("walked paths live under the run directory")
                .to_string_lossy()
                .into_owned()
        })
        .collect();
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn horizontal_strip_tiles_left_to_right() {
        let a = Tensor::from_fn(&[1, 2, 2], |i| i as f32);
        let b = Tensor::from_fn(&[1, 2, 2], |i| 10.0 + i as f32);
        let strip = horizontal_strip(&[&a, &b]).unwrap();
        assert_eq!(strip.shape(), &[2, 4]);
        assert_eq!(strip.data(), &[0.0, 1.0, 10.0, 11.0, 2.0, 3.0, 12.0, 13.0]);
    }

    #[test]
    fn derived_seeds_differ_across_tags_and_samples() {
        let a = derived_seed(42, "uniform-baseline-seed", 0);
        let b = derived_seed(42, "uniform-baseline-seed", 1);
        let c = derived_seed(42, "eg-baseline-seed", 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derived_seed(42, "uniform-baseline-seed", 0));
    }

    #[test]
    fn files_under_lists_recursively_and_relative() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("data/sub")).unwrap();
        std::fs::write(dir.path().join("data/a.txt"), "x").unwrap();
        std::fs::write(dir.path().join("data/sub/b.txt"), "y").unwrap();
        let files = files_under(dir.path(), "data").unwrap();
        assert_eq!(files, vec!["data/a.txt".to_string(), "data/sub/b.txt".to_string()]);
    }
}
