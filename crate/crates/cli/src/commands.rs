//! The six pipeline commands.

use std::fs;
use std::path::{Path, PathBuf};

use fundus_dqa::backbones::{load_checkpoint, save_checkpoint};
use fundus_dqa::data::{
    load_dataset, load_manifest, synthesize, PreprocessConfig, Sample, Split,
};
use fundus_dqa::error::{Error, Result};
use fundus_dqa::explain::{
    explain_prediction, render_heatmap, render_transparency, saliency_to_image,
};
use fundus_dqa::hierarchy::{
    build_flat_baseline, evaluate_flat, evaluate_hierarchy, prediction_csv_row, sweep_thresholds,
    train_flat, train_hierarchy, ComparisonReport, HierarchicalClassifier, Prediction, StageModel,
    StageRole, SweepPoint, PREDICTION_CSV_HEADER,
};
use fundus_dqa::imgio::{read_image, write_ppm, RgbImage};
use fundus_dqa::metrics::{normalize_rows, scenario_select, MetricsReport};
use fundus_dqa::tensor::Tensor;

use crate::config::RunConfig;

fn write_run_info(out: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    let info = format!(
        "command: {command}\nseed: {}\nresolution: {}\nbackbones: {} {} {} (flat {})\nthresholds: {} {} {}\n",
        cfg.seed,
        cfg.resolution,
        backbone_name(cfg, 0),
        backbone_name(cfg, 1),
        backbone_name(cfg, 2),
        flat_name(cfg),
        cfg.thresholds[0],
        cfg.thresholds[1],
        cfg.thresholds[2],
    );
    fs::write(out.join("run_info.txt"), info)?;
    Ok(())
}

fn backbone_name(cfg: &RunConfig, i: usize) -> &'static str {
    match cfg.backbones[i] {
        crate::config::BackboneKind::Dense => "dense",
        crate::config::BackboneKind::Eff => "eff",
    }
}

fn flat_name(cfg: &RunConfig) -> &'static str {
    match cfg.flat_backbone {
        crate::config::BackboneKind::Dense => "dense",
        crate::config::BackboneKind::Eff => "eff",
    }
}

fn preprocess_config(cfg: &RunConfig) -> PreprocessConfig {
    PreprocessConfig { resolution: cfg.resolution, ..Default::default() }
}

fn load_split(cfg: &RunConfig, split: Split) -> Result<Vec<Sample>> {
    let dir = cfg.require_data_dir()?;
    let manifest = load_manifest(dir.join("manifest.csv"), split)?;
    let samples = load_dataset(&manifest, dir, split, &preprocess_config(cfg))?;
    if samples.is_empty() {
        return Err(Error::data(format!("no {split} records in {}", dir.display())));
    }
    Ok(samples)
}

fn checkpoint_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.ckpt"))
}

fn load_hierarchy(cfg: &RunConfig) -> Result<HierarchicalClassifier> {
    let dir = cfg.require_model_dir()?;
    let load = |role: StageRole, threshold: f64| -> Result<StageModel> {
        let net = load_checkpoint(checkpoint_path(dir, role.model_name()))?;
        StageModel::new(role, net, threshold)
    };
    HierarchicalClassifier::new(
        load(StageRole::HighVsLow, cfg.thresholds[0])?,
        load(StageRole::GoodVsUsable, cfg.thresholds[1])?,
        load(StageRole::UsableVsUnusable, cfg.thresholds[2])?,
    )
}

fn load_image_tensor(cfg: &RunConfig, path: &Path) -> Result<(RgbImage, Tensor)> {
    let raw = read_image(path)?;
    let resized = fundus_dqa::data::resize_bilinear(&raw, cfg.resolution);
    let tensor = fundus_dqa::data::preprocess(&raw, &preprocess_config(cfg));
    Ok((resized, tensor))
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let manifest = synthesize(&cfg.synthetic_config(), out)?;
    write_run_info(out, "synth", cfg)?;
    let train = manifest.class_counts(Split::Train);
    let test = manifest.class_counts(Split::Test);
    println!(
        "synthesized {} images under {} (train {}/{}/{}, test {}/{}/{})",
        manifest.records.len(),
        out.display(),
        train[0],
        train[1],
        train[2],
        test[0],
        test[1],
        test[2],
    );
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let samples = load_split(cfg, Split::Train)?;

    let config = cfg.hierarchy_train_config();
    let (hc, report) = train_hierarchy(&samples, &config, cfg.seed)?;
    for role in StageRole::ALL {
        save_checkpoint(hc.stage(role).network(), checkpoint_path(out, role.model_name()))?;
    }

    let flat = build_flat_baseline(&cfg.flat_backbone.arch(cfg.resolution), cfg.seed.wrapping_add(50))?;
    let (flat, flat_history) = train_flat(flat, &samples, &config.hyperparams, cfg.seed.wrapping_add(150))?;
    save_checkpoint(&flat, checkpoint_path(out, "flat"))?;

    let mut log = String::from("model,epoch,mean_loss\n");
    for stage in &report.stages {
        for (e, loss) in stage.loss_history.iter().enumerate() {
            log.push_str(&format!("{},{},{:.6}\n", stage.role.model_name(), e + 1, loss));
        }
    }
    for (e, loss) in flat_history.iter().enumerate() {
        log.push_str(&format!("flat,{},{:.6}\n", e + 1, loss));
    }
    fs::write(out.join("loss_log.csv"), log)?;

    let mut summary = String::new();
    for stage in &report.stages {
        summary.push_str(&format!(
            "{} ({}): {} training images, final loss {:.4}\n",
            stage.role.model_name(),
            stage.backbone,
            stage.train_size,
            stage.loss_history.last().copied().unwrap_or(f64::NAN),
        ));
    }
    summary.push_str(&format!(
        "flat ({}): {} training images, final loss {:.4}\n",
        flat_name(cfg),
        samples.len(),
        flat_history.last().copied().unwrap_or(f64::NAN),
    ));
    fs::write(out.join("training_report.txt"), &summary)?;
    write_run_info(out, "train", cfg)?;
    print!("{summary}");
    println!("checkpoints written to {}", out.display());
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let samples = load_split(cfg, Split::Test)?;
    let hc = load_hierarchy(cfg)?;
    let flat = load_checkpoint(checkpoint_path(cfg.require_model_dir()?, "flat"))?;

    let hier_matrix = evaluate_hierarchy(&hc, &samples)?;
    let flat_matrix = evaluate_flat(&flat, &samples)?;
    fs::write(out.join("confusion_hierarchical.csv"), hier_matrix.to_csv())?;
    fs::write(out.join("confusion_flat.csv"), flat_matrix.to_csv())?;

    let report = ComparisonReport {
        hierarchical: MetricsReport::from_matrix(&hier_matrix),
        flat: MetricsReport::from_matrix(&flat_matrix),
    };
    write_metrics(out, "hierarchical", &report.hierarchical)?;
    write_metrics(out, "flat", &report.flat)?;
    fs::write(out.join("comparison.txt"), report.to_text())?;
    write_run_info(out, "eval", cfg)?;
    println!(
        "hierarchical accuracy {:.4} | flat accuracy {:.4} ({} test images)",
        report.hierarchical.accuracy,
        report.flat.accuracy,
        samples.len()
    );
    Ok(())
}

fn write_metrics(out: &Path, name: &str, report: &MetricsReport) -> Result<()> {
    fs::write(out.join(format!("metrics_{name}.txt")), report.to_text())?;
    fs::write(out.join(format!("metrics_{name}.csv")), report.to_csv())?;
    Ok(())
}

pub fn cmd_predict(cfg: &RunConfig, out: &Path, image_path: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let hc = load_hierarchy(cfg)?;
    let (_, tensor) = load_image_tensor(cfg, image_path)?;
    let prediction = hc.predict(&tensor)?;
    let id = image_path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let row = prediction_csv_row(id, &prediction, None);
    fs::write(out.join("prediction.csv"), format!("{PREDICTION_CSV_HEADER}\n{row}\n"))?;
    write_run_info(out, "predict", cfg)?;
    println!("{PREDICTION_CSV_HEADER}");
    println!("{row}");
    Ok(())
}

pub fn cmd_explain(cfg: &RunConfig, out: &Path, image_path: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let hc = load_hierarchy(cfg)?;
    let (display_image, tensor) = load_image_tensor(cfg, image_path)?;
    let prediction = hc.predict(&tensor)?;
    let saliency = explain_prediction(&hc, &tensor, &prediction)?;

    write_ppm(out.join("saliency.ppm"), &saliency_to_image(&saliency))?;
    let heat = render_heatmap(&display_image, &saliency, cfg.explain_alpha)?;
    write_ppm(out.join("heatmap.ppm"), &heat.pixels)?;
    let transparency = render_transparency(&display_image, &saliency, cfg.explain_floor)?;
    write_ppm(out.join("transparency.ppm"), &transparency.pixels)?;

    let info = explain_info(&prediction);
    fs::write(out.join("explain_info.txt"), &info)?;
    write_run_info(out, "explain", cfg)?;
    print!("{info}");
    Ok(())
}

fn explain_info(prediction: &Prediction) -> String {
    format!(
        "predicted: {} (code {})\nexplained_by: {}\npath: {} p={:.4} -> {} p={:.4}\n",
        prediction.label,
        prediction.label.code(),
        prediction.explainer_role.model_name(),
        prediction.stage1().role.model_name(),
        prediction.stage1().probability,
        prediction.stage2().role.model_name(),
        prediction.stage2().probability,
    )
}

pub fn cmd_scenario(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let samples = load_split(cfg, Split::Test)?;
    let hc = load_hierarchy(cfg)?;
    let points = sweep_thresholds(&hc, &samples, &cfg.scenario_grid)?;

    let mut sweep_csv = String::from("t1,t2,t3,accuracy,good_cc,usable_cc,unusable_cc\n");
    for p in &points {
        let n = normalize_rows(&p.matrix);
        sweep_csv.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
            p.thresholds.0,
            p.thresholds.1,
            p.thresholds.2,
            p.matrix.accuracy(),
            n.rows[0][0],
            n.rows[1][1],
            n.rows[2][2],
        ));
    }
    fs::write(out.join("sweep.csv"), sweep_csv)?;

    let matrices: Vec<_> = points.iter().map(|p| p.matrix.clone()).collect();
    let selected = scenario_select(&matrices, cfg.scenario_target, cfg.scenario_band)?;
    let report = scenario_report(cfg, &points, selected);
    fs::write(out.join("scenario_report.txt"), &report)?;
    write_run_info(out, "scenario", cfg)?;
    print!("{report}");
    Ok(())
}

fn scenario_report(cfg: &RunConfig, points: &[SweepPoint], selected: usize) -> String {
    let p = &points[selected];
    let n = normalize_rows(&p.matrix);
    let mut out = String::new();
    out.push_str(&format!(
        "scenario target: maximize class-conditional accuracy of {}\n",
        cfg.scenario_target
    ));
    out.push_str(&format!(
        "accuracy band: [{}, {}]; {} threshold triples evaluated\n",
        cfg.scenario_band.0,
        cfg.scenario_band.1,
        points.len()
    ));
    out.push_str(&format!(
        "selected thresholds: model1 {} model2 {} model3 {}\n",
        p.thresholds.0, p.thresholds.1, p.thresholds.2
    ));
    out.push_str(&format!("accuracy: {:.4}\n", p.matrix.accuracy()));
    out.push_str("normalized confusion matrix (% of true class):\n");
    for row in &n.rows {
        out.push_str(&format!(
            "  {:6.2} {:6.2} {:6.2}\n",
            row[0] * 100.0,
            row[1] * 100.0,
            row[2] * 100.0
        ));
    }
    out
}
