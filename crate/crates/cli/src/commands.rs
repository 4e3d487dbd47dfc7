use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use candle_core::Device;
use uqdepth::datasets::{
    generate_toy_colon, load_all, save_dataset, tensor_to_fields, write_depth_png, DatasetLayout,
    DatasetMeta, D_FAR,
};
use uqdepth::fusion::{write_sigma_grid, DepthModel, ModelConfig};
use uqdepth::geometry::{backproject, write_ply, CameraIntrinsics};
use uqdepth::local_branch::BranchConfig;
use uqdepth::metrics::{median_scale, summarize, MetricReport};
use uqdepth::trainer::{self, Checkpoint, TrainConfig, TrainConfigFile};
use uqdepth::uncertainty_eval::{
    average_curves, default_fractions, oracle_curve, sparsification_curve, sparsification_error,
};
use uqdepth::{DepthMap, Sample};

use crate::render;
use crate::{DataArgs, EvalArgs, GenToyArgs, PredictArgs, ReconstructArgs, SigmaSource, SparsifyArgs, TrainArgs};

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn load_samples(args: &DataArgs, size: usize, require_depth: bool) -> Result<(Vec<Sample>, Option<DatasetMeta>)> {
    let layout = DatasetLayout {
        resolution: Some(size),
        require_depth,
        crop_black_border: args.crop_black_border,
    };
    let (samples, meta) =
        load_all(&args.data, &layout).with_context(|| format!("loading {}", args.data.display()))?;
    if samples.is_empty() {
        bail!("{} contains no images", args.data.display());
    }
    Ok((samples, meta))
}

fn load_model(path: &Path) -> Result<DepthModel> {
    let ck = Checkpoint::load(path, &Device::Cpu)?;
    let model = DepthModel::new(&ck.model_config, 0, &Device::Cpu)?;
    ck.apply(&model)?;
    Ok(model)
}

pub fn gen_toy(a: GenToyArgs) -> Result<()> {
    let samples = generate_toy_colon(a.count, a.size, a.seed)?;
    save_dataset(&a.out, &samples, &DatasetMeta::for_range(D_FAR as f64))?;
    log::info!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => TrainConfig::from_toml_file(p)?,
        None => TrainConfig::default(),
    };
    config.apply(&TrainConfigFile {
        epochs: a.epochs,
        pretrain_epochs: a.pretrain_epochs,
        batch_size: Some(a.data.batch_size),
        learning_rate: a.lr,
        lr_decay_gamma: a.gamma,
        seed: a.seed,
        fusion_mode: a.mode.clone(),
        without_map: a.without_map.then_some(true),
        augment: a.no_augment.then_some(false),
        ..Default::default()
    })?;

    let (samples, meta) = load_samples(&a.data, a.size, true)?;
    let d_max = meta.map(|m| m.d_max).unwrap_or(D_FAR as f64);
    let mut model_config = ModelConfig::desk(a.size, d_max, config.fusion_mode);
    if a.full_scale {
        model_config.local = BranchConfig::full(a.size, d_max);
    }
    let model = DepthModel::new(&model_config, config.seed, &Device::Cpu)?;
    log::info!(
        "training {} ({} parameters) on {} samples",
        config.fusion_mode,
        model.store().num_trainable(),
        samples.len()
    );
    let report = trainer::train(&model, samples, &config)?;

    create_dir(&a.out)?;
    report.checkpoint.save(&a.out.join("checkpoint.safetensors"))?;
    for h in report.pretrain.iter().chain([&report.finetune]) {
        h.write_loss_csv(&a.out.join(format!("losses_{}.csv", h.phase.label())))?;
    }
    let mut w = csv::Writer::from_path(a.out.join("epochs.csv"))?;
    w.write_record(["phase", "epoch", "learning_rate", "mean_loss", "val_delta1", "val_rmse"])?;
    for h in report.pretrain.iter().chain([&report.finetune]) {
        for e in &h.epochs {
            let (d1, rmse) = e
                .validation
                .map(|v| (v.mean.delta1.to_string(), v.mean.rmse.to_string()))
                .unwrap_or_default();
            w.write_record([
                h.phase.label(),
                e.epoch.to_string(),
                e.learning_rate.to_string(),
                e.mean_loss.to_string(),
                d1,
                rmse,
            ])?;
        }
    }
    w.flush()?;
    fs::write(a.out.join("train_config.json"), serde_json::to_string_pretty(&config)?)?;
    if !report.validation.is_empty() {
        let s = summarize(&report.validation)?;
        fs::write(a.out.join("validation.json"), serde_json::to_string_pretty(&s)?)?;
        log::info!("held-out delta1 {:.4} rmse {:.4}", s.mean.delta1, s.mean.rmse);
    }
    Ok(())
}

fn write_metrics(out: &Path, ids: &[&str], reports: &[MetricReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(out.join("metrics.csv"))?;
    let mut header = vec!["source_id"];
    header.extend(MetricReport::NAMES);
    header.push("n_pixels");
    w.write_record(&header)?;
    for (id, r) in ids.iter().zip(reports) {
        let mut row = vec![id.to_string()];
        row.extend(r.values().iter().map(|v| v.to_string()));
        row.push(r.n_pixels.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;

    let s = summarize(reports)?;
    let mut w = csv::Writer::from_path(out.join("summary.csv"))?;
    w.write_record(["metric", "mean", "std", "mean_pm_std"])?;
    for ((name, m), sd) in MetricReport::NAMES.iter().zip(s.mean.values()).zip(s.std.values()) {
        w.write_record([
            name.to_string(),
            m.to_string(),
            sd.to_string(),
            format!("{m:.4}±{sd:.4}"),
        ])?;
    }
    w.flush()?;
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&s)?)?;
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let c = &a.common;
    let model = load_model(&c.ckpt)?;
    let (samples, _) = load_samples(&c.data, model.config().input_size(), true)?;
    let reports = trainer::evaluate(&model, &samples, c.data.batch_size, a.median_scale)?;
    create_dir(&c.out)?;
    let ids: Vec<&str> = samples.iter().map(|s| s.source_id.as_str()).collect();
    write_metrics(&c.out, &ids, &reports)?;
    let s = summarize(&reports)?;
    println!("metric,mean,std");
    for ((name, m), sd) in MetricReport::NAMES.iter().zip(s.mean.values()).zip(s.std.values()) {
        println!("{name},{m:.6},{sd:.6}");
    }
    Ok(())
}

/// Per-image outputs of one evaluation pass, flattened to row-major buffers.
struct ImageOutput {
    depth: DepthMap,
    sigma_local: Option<Vec<f32>>,
    sigma_global: Option<Vec<f32>>,
    weight_local: Option<Vec<f32>>,
    weight_global: Option<Vec<f32>>,
}

fn run_model(model: &DepthModel, samples: &[Sample], batch_size: usize) -> Result<Vec<ImageOutput>> {
    let d_max = model.config().d_max() as f32;
    let size = model.config().input_size();
    let mut out = Vec::with_capacity(samples.len());
    for o in trainer::predict(model, samples, batch_size)? {
        let split = |t: &Option<candle_core::Tensor>| -> Result<Option<Vec<Vec<f32>>>> {
            Ok(match t {
                Some(t) => Some(tensor_to_fields(t)?),
                None => None,
            })
        };
        let depth = tensor_to_fields(&o.depth_fused)?;
        let (sl, sg, wl, wg) = (
            split(&o.sigma_local)?,
            split(&o.sigma_global)?,
            split(&o.weight_local)?,
            split(&o.weight_global)?,
        );
        for (i, d) in depth.into_iter().enumerate() {
            let pick = |v: &Option<Vec<Vec<f32>>>| v.as_ref().map(|v| v[i].clone());
            out.push(ImageOutput {
                depth: DepthMap::new(size, size, d, d_max)?,
                sigma_local: pick(&sl),
                sigma_global: pick(&sg),
                weight_local: pick(&wl),
                weight_global: pick(&wg),
            });
        }
    }
    Ok(out)
}

pub fn predict(a: PredictArgs) -> Result<()> {
    let c = &a.common;
    let model = load_model(&c.ckpt)?;
    let size = model.config().input_size();
    let d_max = model.config().d_max();
    let (samples, _) = load_samples(&c.data, size, false)?;
    let outputs = run_model(&model, &samples, c.data.batch_size)?;
    for sub in ["depth", "preview"] {
        create_dir(&c.out.join(sub))?;
    }
    for (s, o) in samples.iter().zip(&outputs) {
        let id = &s.source_id;
        write_depth_png(&c.out.join("depth").join(format!("{id}.png")), &o.depth, d_max / 65535.0)?;
        for (name, sigma) in [("sigma_local", &o.sigma_local), ("sigma_global", &o.sigma_global)] {
            if let Some(sigma) = sigma {
                let dir = c.out.join(name);
                create_dir(&dir)?;
                write_sigma_grid(&dir.join(format!("{id}.uqdp")), size, size, sigma)?;
            }
        }
        let fused_sigma = fused_sigma(o);
        render::side_by_side(
            &c.out.join("preview").join(format!("{id}.png")),
            &s.image,
            &o.depth,
            fused_sigma.as_deref(),
        )?;
    }
    log::info!("wrote predictions for {} images to {}", samples.len(), c.out.display());
    Ok(())
}

/// `w_local σ_local + w_global σ_global` when both are available.
fn fused_sigma(o: &ImageOutput) -> Option<Vec<f32>> {
    let (sl, sg, wl, wg) = (
        o.sigma_local.as_ref()?,
        o.sigma_global.as_ref()?,
        o.weight_local.as_ref()?,
        o.weight_global.as_ref()?,
    );
    Some(
        (0..sl.len())
            .map(|i| wl[i] * sl[i] + wg[i] * sg[i])
            .collect(),
    )
}

pub fn sparsify(a: SparsifyArgs) -> Result<()> {
    let c = &a.common;
    let model = load_model(&c.ckpt)?;
    if !model.mode().uses_uncertainty() {
        bail!("mode {} predicts no uncertainty to rank by", model.mode());
    }
    let (samples, _) = load_samples(&c.data, model.config().input_size(), true)?;
    let outputs = run_model(&model, &samples, c.data.batch_size)?;
    let fractions = default_fractions();
    let (mut curves, mut oracles) = (Vec::new(), Vec::new());
    for (s, o) in samples.iter().zip(&outputs) {
        let gt = s.depth.as_ref().expect("loaded with depth");
        let (scaled, _) = median_scale(&o.depth, gt)?;
        let errors: Vec<f64> = scaled
            .data()
            .iter()
            .zip(gt.data())
            .map(|(p, g)| (*p as f64 - *g as f64).abs())
            .collect();
        let sigma = match a.sigma {
            SigmaSource::Fused => fused_sigma(o),
            SigmaSource::Local => o.sigma_local.clone(),
            SigmaSource::Global => o.sigma_global.clone(),
        }
        .expect("uncertainty modes produce both sigmas");
        let ranking: Vec<f64> = sigma.iter().map(|&v| v as f64).collect();
        curves.push(sparsification_curve(&errors, &ranking, &fractions)?);
        oracles.push(oracle_curve(&errors, &fractions)?);
    }
    let curve = average_curves(&curves)?;
    let oracle = average_curves(&oracles)?;
    let (diff, area) = sparsification_error(&curve, &oracle)?;

    create_dir(&c.out)?;
    let mut w = csv::Writer::from_path(c.out.join("sparsification.csv"))?;
    w.write_record(["fraction", "rmse_sparsification", "rmse_oracle", "difference"])?;
    for i in 0..fractions.len() {
        w.write_record([
            fractions[i].to_string(),
            curve.rmse_values[i].to_string(),
            oracle.rmse_values[i].to_string(),
            diff[i].to_string(),
        ])?;
    }
    w.flush()?;
    fs::write(
        c.out.join("sparsification_summary.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "images": samples.len(),
            "sigma": format!("{:?}", a.sigma).to_lowercase(),
            "area": area,
        }))?,
    )?;
    if a.plot {
        render::plot_curves(
            &c.out.join("sparsification.png"),
            &fractions,
            &[(&curve.rmse_values, [220, 60, 40]), (&oracle.rmse_values, [40, 90, 220])],
        )?;
    }
    println!("sparsification error area: {area:.6}");
    Ok(())
}

pub fn reconstruct(a: ReconstructArgs) -> Result<()> {
    let c = &a.common;
    let model = load_model(&c.ckpt)?;
    let size = model.config().input_size();
    let (samples, meta) = load_samples(&c.data, size, false)?;
    let base = CameraIntrinsics::default_for(size, size);
    let from_meta = |f: fn(&DatasetMeta) -> Option<f64>| meta.as_ref().and_then(f);
    let k = CameraIntrinsics::new(
        a.fx.or(from_meta(|m| m.fx)).unwrap_or(base.fx),
        a.fy.or(from_meta(|m| m.fy)).unwrap_or(base.fy),
        a.cx.or(from_meta(|m| m.cx)).unwrap_or(base.cx),
        a.cy.or(from_meta(|m| m.cy)).unwrap_or(base.cy),
    )?;
    let outputs = run_model(&model, &samples, c.data.batch_size)?;
    let dir = c.out.join("ply");
    create_dir(&dir)?;
    for (s, o) in samples.iter().zip(&outputs) {
        let cloud = backproject(&o.depth, &s.image, &k)?;
        write_ply(&cloud, &dir.join(format!("{}.ply", s.source_id)))?;
    }
    log::info!("wrote {} point clouds to {}", samples.len(), dir.display());
    Ok(())
}
