//! Command-line front end: dataset synthesis, the two training stages,
//! evaluation, relighting, and loss-curve plots.
//!
//! Every command prints one JSON summary line on success, echoes its resolved
//! configuration into the output directory, and is deterministic for a fixed
//! seed. Exit codes: 0 success, 2 validation, 3 runtime failure or divergence.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;
use serde_json::json;

use crate::dataset::{load_dataset, synth_dataset, CameraPlacement, Dataset, ScheduleParams};
use crate::error::{Error, Result};
use crate::features::{oracle_features, topk_variance_select, GeometryFeatureMap, GEO_CHANNELS};
use crate::field::FieldView;
use crate::neural::{NeuralScene, NeuralSceneConfig};
use crate::renderer::{CameraIntrinsics, RenderConfig};
use crate::rig::RigAxes;
use crate::scene::{AnalyticScene, SceneSpec};
use crate::train::{train_stage1, train_stage2, write_loss_csv, LossWeights, TrainConfig};

#[derive(Parser, Debug)]
#[command(
    name = "rotmvps",
    version,
    about = "Inverse rendering for turntable photometric stereo under rotated environment light"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic capture dataset from an analytic scene preset.
    Synth(SynthArgs),
    /// Optimize shape, reflectance, and light against a dataset.
    Train(TrainArgs),
    /// Extract a mesh and compute chamfer / PSNR / SSIM against a dataset.
    Eval(EvalArgs),
    /// Re-render a checkpoint under a different environment light.
    Relight(RelightArgs),
    /// Turn a loss CSV into one line-plot PNG per loss column.
    Plot(PlotArgs),
}

#[derive(Args, Debug, serde::Serialize)]
pub struct SynthArgs {
    /// Scene preset: sphere_lambert, sphere_lambert_tilted, sphere_specular,
    /// two_spheres, two_spheres_flat, box_lambert.
    #[arg(long)]
    pub scene: String,
    /// Capture schedule as rig x turntable steps, e.g. 4x25.
    #[arg(long, default_value = "4x25")]
    pub schedule: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Square image resolution in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 30.0)]
    pub fov: f64,
    #[arg(long, default_value_t = 64)]
    pub samples_per_ray: usize,
    /// Hemisphere samples per shading point.
    #[arg(long, default_value_t = 128)]
    pub light_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, serde::Serialize)]
pub struct TrainArgs {
    /// Dataset directory or manifest path.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    /// Run the reflectance refinement stage after stage 1.
    #[arg(long)]
    pub stage2: bool,
    #[arg(long, default_value_t = 500)]
    pub stage2_iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.1)]
    pub lambda_eik: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_occ: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_geo: f64,
    /// Disable the geometry feature prior (same as --lambda-geo 0).
    #[arg(long)]
    pub no_geo_prior: bool,
    /// Ablation: train as if the environment light never rotated.
    #[arg(long)]
    pub no_rotation: bool,
    #[arg(long, default_value_t = 512)]
    pub batch_rays: usize,
    #[arg(long, default_value_t = 24)]
    pub samples_per_ray: usize,
    /// Maximum spherical-harmonic band of the recovered environment.
    #[arg(long, default_value_t = 2)]
    pub l_max: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 500)]
    pub checkpoint_every: usize,
    #[arg(long, default_value_t = 512)]
    pub eik_points: usize,
    #[arg(long, default_value_t = 16)]
    pub occ_rays: usize,
    #[arg(long, default_value_t = 128)]
    pub mc_dirs: usize,
    #[arg(long, default_value_t = 0.5)]
    pub near: f64,
    #[arg(long, default_value_t = 4.5)]
    pub far: f64,
}

#[derive(Args, Debug, serde::Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Marching-cubes grid resolution.
    #[arg(long, default_value_t = 96)]
    pub resolution: usize,
    /// Surface samples per mesh for the chamfer distance.
    #[arg(long, default_value_t = 30000)]
    pub mesh_samples: usize,
    /// Number of views to re-render (0 = all).
    #[arg(long, default_value_t = 0)]
    pub views: usize,
    #[arg(long, default_value_t = 24)]
    pub samples_per_ray: usize,
    #[arg(long, default_value_t = 0.5)]
    pub near: f64,
    #[arg(long, default_value_t = 4.5)]
    pub far: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, serde::Serialize)]
pub struct RelightArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// JSON file holding the spherical-harmonic environment to light with.
    #[arg(long)]
    pub env: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of views to render (0 = all).
    #[arg(long, default_value_t = 0)]
    pub views: usize,
    #[arg(long, default_value_t = 24)]
    pub samples_per_ray: usize,
    #[arg(long, default_value_t = 0.5)]
    pub near: f64,
    #[arg(long, default_value_t = 4.5)]
    pub far: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, serde::Serialize)]
pub struct PlotArgs {
    #[arg(long)]
    pub csv: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses, runs, and maps errors to exit codes. The JSON summary goes to
/// standard output; errors go to standard error.
pub fn main_entry() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Validation(_) => 2,
                _ => 3,
            }
        }
    }
}

pub fn run(command: Command) -> Result<serde_json::Value> {
    match command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Relight(a) => cmd_relight(a),
        Command::Plot(a) => cmd_plot(a),
    }
}

fn parse_schedule(text: &str) -> Result<(usize, usize)> {
    let (m, n) = text
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::validation("schedule must look like 4x25"))?;
    let m: usize = m
        .parse()
        .map_err(|_| Error::validation("bad rig step count in schedule"))?;
    let n: usize = n
        .parse()
        .map_err(|_| Error::validation("bad turntable step count in schedule"))?;
    if m == 0 || n == 0 {
        return Err(Error::validation("schedule steps must be positive"));
    }
    Ok((m, n))
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.json")
    } else {
        data.to_path_buf()
    }
}

fn echo_config<T: serde::Serialize>(out: &Path, args: &T) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let path = out.join("config.json");
    let text = serde_json::to_string_pretty(args).map_err(Error::from)?;
    std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn cmd_synth(args: SynthArgs) -> Result<serde_json::Value> {
    let (rig_steps, turntable_steps) = parse_schedule(&args.schedule)?;
    let spec = SceneSpec::preset(&args.scene)?;
    let schedule = ScheduleParams {
        rig_steps,
        turntable_steps,
        rig_step_deg: 360.0 / rig_steps as f64,
        turntable_step_deg: 360.0 / turntable_steps as f64,
        axes: RigAxes::default(),
    };
    let intrinsics = CameraIntrinsics::from_fov(args.size, args.fov);
    let config = RenderConfig {
        samples_per_ray: args.samples_per_ray,
        light_samples: args.light_samples,
        seed: args.seed,
        background: spec.background_rgb(),
        ..Default::default()
    };
    echo_config(&args.out, &args)?;
    let manifest = synth_dataset(
        &spec,
        &schedule,
        &intrinsics,
        &CameraPlacement::default(),
        &config,
        &args.out,
    )?;
    Ok(json!({
        "command": "synth",
        "scene": args.scene,
        "frames": manifest.frames.len(),
        "out": args.out,
    }))
}

/// Per-view geometry features from the dataset's ground-truth normal maps,
/// already reduced to the supervised channel count.
pub fn oracle_geometry_maps(dataset: &Dataset) -> Result<Vec<GeometryFeatureMap>> {
    let w = dataset.manifest.intrinsics.width;
    let h = dataset.manifest.intrinsics.height;
    let center = dataset
        .cam_pose
        .pixel_ray(&dataset.manifest.intrinsics, w / 2, h / 2)?;
    dataset
        .frames
        .iter()
        .enumerate()
        .map(|(i, frame)| {
            let normals = frame.normal.as_ref().ok_or_else(|| {
                Error::validation(format!(
                    "frame {i} has no normal map; synth datasets are required for the geometry prior"
                ))
            })?;
            let raw = oracle_features(normals, &frame.mask, w, h, i)?;
            let (data, _) = topk_variance_select(&raw, GEO_CHANNELS)?;
            let eq = crate::rig::equivalent_ray(&center, &frame.pose.r_b);
            Ok(GeometryFeatureMap {
                view: i,
                data,
                view_dir: -eq.direction,
            })
        })
        .collect()
}

fn build_scene(args_l_max: usize, samples_per_ray: usize, near: f64, far: f64) -> Result<NeuralScene> {
    NeuralScene::new(NeuralSceneConfig {
        l_max: args_l_max,
        samples_per_ray,
        near,
        far,
        ..Default::default()
    })
}

pub fn cmd_train(args: TrainArgs) -> Result<serde_json::Value> {
    let mut dataset = load_dataset(&manifest_path(&args.data))?;
    if args.no_rotation {
        // pretend the environment never rotates: cancel the light rotation
        // while keeping the camera geometry intact
        for frame in &mut dataset.frames {
            frame.pose.r_a = frame.pose.r_b.transpose();
        }
    }
    let lambda_geo = if args.no_geo_prior { 0.0 } else { args.lambda_geo };
    let cfg = TrainConfig {
        iters: args.iters,
        batch_rays: args.batch_rays,
        eik_points: args.eik_points,
        occ_rays: args.occ_rays,
        seed: args.seed,
        weights: LossWeights {
            lambda_eik: args.lambda_eik,
            lambda_occ: args.lambda_occ,
            lambda_geo,
        },
        adam: crate::train::AdamConfig {
            lr: args.lr,
            ..Default::default()
        },
        checkpoint_every: args.checkpoint_every,
        mc_dirs: args.mc_dirs,
    };
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::io(args.out.display().to_string(), e))?;
    let mut echoed = serde_json::to_value(&args).map_err(Error::from)?;
    echoed["lambda_geo"] = json!(lambda_geo);
    let cfg_path = args.out.join("config.json");
    std::fs::write(
        &cfg_path,
        serde_json::to_string_pretty(&echoed).map_err(Error::from)?,
    )
    .map_err(|e| Error::io(cfg_path.display().to_string(), e))?;

    let scene = build_scene(args.l_max, args.samples_per_ray, args.near, args.far)?;
    let mut store = crate::autodiff::ParamStore::new();
    scene.init_params(&mut store, args.seed);
    crate::checkpoint::save_params(&store, &args.out.join("ckpt_init.bin"))?;

    let features = if lambda_geo != 0.0 {
        Some(oracle_geometry_maps(&dataset)?)
    } else {
        None
    };
    let out1 = train_stage1(
        &scene,
        &mut store,
        &dataset,
        features.as_deref(),
        &cfg,
        Some(&args.out),
    )?;
    write_loss_csv(&out1.log, &args.out.join("loss_stage1.csv"))?;

    let mut stage2_final = None;
    if args.stage2 {
        let cfg2 = TrainConfig {
            iters: args.stage2_iters,
            ..cfg.clone()
        };
        let out2 = train_stage2(&scene, &mut store, &dataset, &cfg2, Some(&args.out))?;
        write_loss_csv(&out2.log, &args.out.join("loss_stage2.csv"))?;
        stage2_final = out2.log.last().map(|r| r.total);
    }
    let final_path = args.out.join("ckpt_final.bin");
    crate::checkpoint::save_params(&store, &final_path)?;
    Ok(json!({
        "command": "train",
        "iters": args.iters,
        "stage2": args.stage2,
        "final_loss": out1.log.last().map(|r| r.total),
        "stage2_final_loss": stage2_final,
        "skipped_steps": out1.skipped_steps,
        "checkpoint": final_path,
        "param_hash": format!("{:016x}", crate::checkpoint::param_hash(&store)),
    }))
}

fn infer_l_max(store: &crate::autodiff::ParamStore) -> Result<usize> {
    let nb = store.get(crate::neural::ENV_COEFFS).nrows();
    let l = (nb as f64).sqrt() as usize;
    if l == 0 || l * l != nb {
        return Err(Error::validation("checkpoint has a malformed environment block"));
    }
    Ok(l - 1)
}

fn render_views(
    scene: &NeuralScene,
    store: &crate::autodiff::ParamStore,
    dataset: &Dataset,
    count: usize,
    seed: u64,
) -> Result<Vec<(usize, crate::renderer::RenderedImage)>> {
    let n = if count == 0 {
        dataset.frames.len()
    } else {
        count.min(dataset.frames.len())
    };
    (0..n)
        .map(|i| {
            let img = scene.render_image(
                store,
                &dataset.frames[i].pose,
                &dataset.manifest.intrinsics,
                &dataset.cam_pose,
                seed.wrapping_add(i as u64),
            )?;
            Ok((i, img))
        })
        .collect()
}

pub fn cmd_eval(args: EvalArgs) -> Result<serde_json::Value> {
    let dataset = load_dataset(&manifest_path(&args.data))?;
    let store = crate::checkpoint::load_params(&args.ckpt)?;
    let scene = build_scene(infer_l_max(&store)?, args.samples_per_ray, args.near, args.far)?;
    echo_config(&args.out, &args)?;
    let bounds = (
        Vector3::from_element(-1.1),
        Vector3::from_element(1.1),
    );
    let view = FieldView {
        net: &scene.sdf,
        store: &store,
    };
    let extracted = crate::mesh::marching_cubes(&view, args.resolution, bounds)?;
    if extracted.empty_level_set {
        return Err(Error::validation("checkpoint field has no zero level set"));
    }
    crate::mesh::write_obj(&args.out.join("mesh.obj"), &extracted.mesh)?;
    let pred_pts = extracted.mesh.sample_surface(args.mesh_samples, args.seed)?;

    let chamfer_mm = match &dataset.manifest.ground_truth {
        Some(spec) => {
            let gt_scene = AnalyticScene::from_spec(spec)?;
            let gt_mesh = crate::mesh::marching_cubes(&gt_scene, args.resolution, bounds)?;
            let gt_pts = gt_mesh
                .mesh
                .sample_surface(args.mesh_samples, args.seed.wrapping_add(1))?;
            Some(crate::metrics::chamfer(
                &pred_pts,
                &gt_pts,
                dataset.manifest.mm_per_unit,
            )?)
        }
        None => None,
    };

    let renders = render_views(&scene, &store, &dataset, args.views, args.seed)?;
    let w = dataset.manifest.intrinsics.width;
    let h = dataset.manifest.intrinsics.height;
    let mut psnr_acc = 0.0;
    let mut ssim_acc = 0.0;
    for (i, img) in &renders {
        let gt = &dataset.frames[*i].rgb;
        psnr_acc += crate::metrics::psnr(&img.rgb, gt, 1.0)?;
        ssim_acc += crate::metrics::ssim(&img.rgb, gt, w, h, 1.0)?;
        let rec = &dataset.manifest.frames[*i];
        crate::imgio::write_png_rgb(
            &args.out.join(format!("render_{:03}_{:03}.png", rec.m, rec.n)),
            w,
            h,
            &img.rgb,
        )?;
        let err: Vec<crate::envlight::Rgb> = img
            .rgb
            .iter()
            .zip(gt)
            .map(|(a, b)| (a - b).abs())
            .collect();
        crate::imgio::write_png_rgb(
            &args.out.join(format!("error_{:03}_{:03}.png", rec.m, rec.n)),
            w,
            h,
            &err,
        )?;
    }
    let nv = renders.len().max(1) as f64;
    let psnr_db = psnr_acc / nv;
    let ssim = ssim_acc / nv;
    let report = crate::metrics::MetricReport {
        rows: vec![crate::metrics::MetricRow {
            name: "eval".into(),
            chamfer_mm: chamfer_mm.unwrap_or(f64::NAN),
            psnr_db,
            ssim,
        }],
    };
    report.write_csv(&args.out.join("metrics.csv"))?;
    Ok(json!({
        "command": "eval",
        "chamfer_mm": chamfer_mm,
        "psnr_db": psnr_db,
        "ssim": ssim,
        "views": renders.len(),
        "vertices": extracted.mesh.vertices.len(),
        "out": args.out,
    }))
}

pub fn cmd_relight(args: RelightArgs) -> Result<serde_json::Value> {
    let dataset = load_dataset(&manifest_path(&args.data))?;
    let mut store = crate::checkpoint::load_params(&args.ckpt)?;
    let text = std::fs::read_to_string(&args.env)
        .map_err(|e| Error::io(args.env.display().to_string(), e))?;
    let env: crate::envlight::ShEnvironment = serde_json::from_str(&text).map_err(Error::from)?;
    let nb = env.coeffs[0].len();
    if env.coeffs.iter().any(|c| c.len() != nb) || nb == 0 {
        return Err(Error::validation("environment file channels disagree"));
    }
    let l = (nb as f64).sqrt() as usize;
    if l * l != nb {
        return Err(Error::validation(
            "environment coefficient count is not a full band structure",
        ));
    }
    let coeffs = ndarray::Array2::from_shape_fn((nb, 3), |(k, c)| env.coeffs[c][k]);
    let l_max = (nb as f64).sqrt() as usize - 1;
    // swap the trained environment for the supplied one
    *store.get_mut(crate::neural::ENV_COEFFS) = coeffs;
    let scene = build_scene(l_max, args.samples_per_ray, args.near, args.far)?;
    echo_config(&args.out, &args)?;
    let renders = render_views(&scene, &store, &dataset, args.views, args.seed)?;
    let w = dataset.manifest.intrinsics.width;
    let h = dataset.manifest.intrinsics.height;
    let mut psnr_acc = 0.0;
    for (i, img) in &renders {
        let rec = &dataset.manifest.frames[*i];
        crate::imgio::write_png_rgb(
            &args.out.join(format!("relight_{:03}_{:03}.png", rec.m, rec.n)),
            w,
            h,
            &img.rgb,
        )?;
        crate::imgio::write_pfm_rgb(
            &args.out.join(format!("relight_{:03}_{:03}.pfm", rec.m, rec.n)),
            w,
            h,
            &img.rgb.iter().map(|c| Vector3::new(c.x, c.y, c.z)).collect::<Vec<_>>(),
        )?;
        psnr_acc += crate::metrics::psnr(&img.rgb, &dataset.frames[*i].rgb, 1.0)?;
    }
    Ok(json!({
        "command": "relight",
        "views": renders.len(),
        "psnr_vs_dataset_db": psnr_acc / renders.len().max(1) as f64,
        "out": args.out,
    }))
}

fn draw_line_plot(values: &[f64], title: &str, path: &Path) -> Result<()> {
    let w = 640usize;
    let h = 360usize;
    let margin = 20usize;
    let mut img = image::RgbImage::from_pixel(w as u32, h as u32, image::Rgb([255, 255, 255]));
    for x in margin..w - margin {
        img.put_pixel(x as u32, (h - margin) as u32, image::Rgb([0, 0, 0]));
    }
    for y in margin..h - margin {
        img.put_pixel(margin as u32, y as u32, image::Rgb([0, 0, 0]));
    }
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if !finite.is_empty() {
        let lo = finite.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-12);
        let plot_w = (w - 2 * margin) as f64;
        let plot_h = (h - 2 * margin) as f64;
        let mut last: Option<(i64, i64)> = None;
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                last = None;
                continue;
            }
            let x = margin as f64 + plot_w * i as f64 / (values.len().max(2) - 1) as f64;
            let y = (h - margin) as f64 - plot_h * (v - lo) / span;
            let (xi, yi) = (x as i64, y as i64);
            if let Some((px, py)) = last {
                // integer line walk between consecutive samples
                let steps = (xi - px).abs().max((yi - py).abs()).max(1);
                for s in 0..=steps {
                    let sx = px + (xi - px) * s / steps;
                    let sy = py + (yi - py) * s / steps;
                    if sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h {
                        img.put_pixel(sx as u32, sy as u32, image::Rgb([30, 60, 200]));
                    }
                }
            }
            last = Some((xi, yi));
        }
    }
    let _ = title;
    img.save(path).map_err(Error::from)
}

pub fn cmd_plot(args: PlotArgs) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(&args.csv)
        .map_err(|e| Error::io(args.csv.display().to_string(), e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::validation("empty loss CSV"))?;
    let columns: Vec<&str> = header.split(',').collect();
    let mut table: Vec<Vec<f64>> = vec![Vec::new(); columns.len()];
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != columns.len() {
            return Err(Error::validation(format!(
                "ragged CSV row: {line}"
            )));
        }
        for (c, cell) in cells.iter().enumerate() {
            table[c].push(cell.parse::<f64>().map_err(|_| {
                Error::validation(format!("non-numeric CSV cell {cell:?}"))
            })?);
        }
    }
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::io(args.out.display().to_string(), e))?;
    let mut written = Vec::new();
    for (c, name) in columns.iter().enumerate() {
        if *name == "iter" || *name == "wall_ms" {
            continue;
        }
        let path = args.out.join(format!("loss_{name}.png"));
        draw_line_plot(&table[c], name, &path)?;
        written.push(path);
    }
    Ok(json!({
        "command": "plot",
        "plots": written,
        "rows": table.first().map(|c| c.len()).unwrap_or(0),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_parsing() {
        assert_eq!(parse_schedule("4x25").unwrap(), (4, 25));
        assert_eq!(parse_schedule("1X1").unwrap(), (1, 1));
        assert!(parse_schedule("4").is_err());
        assert!(parse_schedule("0x5").is_err());
        assert!(parse_schedule("axb").is_err());
    }

    #[test]
    fn cli_parses_train_flags() {
        let cli = Cli::try_parse_from([
            "rotmvps", "train", "--data", "d", "--out", "o", "--no-geo-prior", "--stage2",
            "--seed", "7",
        ])
        .unwrap();
        match cli.command {
            Command::Train(a) => {
                assert!(a.no_geo_prior);
                assert!(a.stage2);
                assert_eq!(a.seed, 7);
                assert_eq!(a.lambda_geo, 1.0);
            }
            _ => panic!("wrong subcommand"),
        }
    }

    #[test]
    fn missing_required_flag_is_a_usage_error() {
        assert!(Cli::try_parse_from(["rotmvps", "synth", "--out", "x"]).is_err());
    }

    #[test]
    fn plot_emits_one_png_per_loss_column() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("loss.csv");
        let mut text = String::from("iter,rendering,eikonal,occlusion,geometry,total,wall_ms\n");
        for i in 0..500 {
            let v = 1.0 / (i + 1) as f64;
            text.push_str(&format!("{i},{v},{v},{v},{v},{v},{}\n", i * 10));
        }
        std::fs::write(&csv, text).unwrap();
        let out = dir.path().join("plots");
        let summary = cmd_plot(PlotArgs {
            csv,
            out: out.clone(),
        })
        .unwrap();
        for name in ["rendering", "eikonal", "occlusion", "geometry", "total"] {
            assert!(out.join(format!("loss_{name}.png")).exists(), "{name}");
        }
        assert!(!out.join("loss_iter.png").exists());
        assert!(!out.join("loss_wall_ms.png").exists());
        assert_eq!(summary["rows"], 500);
    }

    #[test]
    fn plot_rejects_ragged_csv() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("bad.csv");
        std::fs::write(&csv, "iter,a\n1,2\n3\n").unwrap();
        assert!(cmd_plot(PlotArgs {
            csv,
            out: dir.path().join("o"),
        })
        .is_err());
    }
}
