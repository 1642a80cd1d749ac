//! Optimization: Adam, the four-term loss, and the two training stages.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::Vector3;
use ndarray::{Array2, ArrayView2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Grads, ParamStore, Tape};
use crate::dataset::{Dataset, RaySample};
use crate::error::{Error, Result};
use crate::features::GeometryFeatureMap;
use crate::field::FieldView;
use crate::neural::{FrameRays, FrameSurface, NeuralScene};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Parameter blocks without a gradient entry
/// (or listed as frozen) are left untouched and their moments unchanged.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: HashMap<String, Array2<f64>>,
    v: HashMap<String, Array2<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Returns false (and changes nothing) when any
    /// gradient entry is non-finite; the caller decides whether to log.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, frozen: &[&str]) -> bool {
        if !grads.is_finite() {
            return false;
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        let names: Vec<String> = store.names().map(str::to_owned).collect();
        for name in names {
            if frozen.iter().any(|f| name.starts_with(f)) {
                continue;
            }
            let Some(g) = grads.get(&name) else { continue };
            let g = g.clone();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            *m = &*m * self.cfg.beta1 + &g * (1.0 - self.cfg.beta1);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            *v = &*v * self.cfg.beta2 + &(&g * &g) * (1.0 - self.cfg.beta2);
            let mhat = &*m / bc1;
            let vhat = &*v / bc2;
            let upd = mhat / (vhat.mapv(f64::sqrt) + self.cfg.eps) * self.cfg.lr;
            let p = store.get_mut(&name);
            *p -= &upd;
        }
        true
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda_eik: f64,
    pub lambda_occ: f64,
    pub lambda_geo: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_eik: 0.1,
            lambda_occ: 1.0,
            lambda_geo: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, serde::Serialize)]
pub struct LossParts {
    pub rendering: f64,
    pub eikonal: f64,
    pub occlusion: f64,
    pub geometry: f64,
}

impl LossParts {
    pub fn total(&self, w: &LossWeights) -> f64 {
        self.rendering
            + w.lambda_eik * self.eikonal
            + w.lambda_occ * self.occlusion
            + w.lambda_geo * self.geometry
    }
}

/// Color loss: sqrt of the summed squared error over the whole batch,
/// not reduced per pixel.
pub fn loss_rendering(pred: ArrayView2<f64>, gt: ArrayView2<f64>) -> f64 {
    let d = &pred - &gt;
    d.mapv(|v| v * v).sum().sqrt()
}

/// Sum of (|grad| - 1)^2 over the gradient batch.
pub fn loss_eikonal(grads: ArrayView2<f64>) -> f64 {
    grads
        .outer_iter()
        .map(|g| {
            let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            (n - 1.0).powi(2)
        })
        .sum()
}

/// Mean absolute error between predicted and marched occlusion values.
/// Empty batches contribute zero.
pub fn loss_occlusion(pred: &[f64], target: &[f64]) -> f64 {
    assert_eq!(pred.len(), target.len());
    if pred.is_empty() {
        return 0.0;
    }
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t).abs())
        .sum();
    s / pred.len() as f64
}

/// Mean squared Euclidean distance between feature rows.
pub fn loss_geometry(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> f64 {
    assert_eq!(pred.dim(), target.dim());
    if pred.nrows() == 0 {
        return 0.0;
    }
    let d = &pred - &target;
    d.mapv(|v| v * v).sum() / pred.nrows() as f64
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub iters: usize,
    pub batch_rays: usize,
    /// Extra uniform box points added to the eikonal term each step.
    pub eik_points: usize,
    /// How many foreground rays receive marched occlusion supervision.
    pub occ_rays: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    /// Checkpoint interval in iterations; 0 disables intermediate saves.
    pub checkpoint_every: usize,
    /// Sphere-rule size for the reflectance refinement stage.
    pub mc_dirs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iters: 2000,
            batch_rays: 512,
            eik_points: 512,
            occ_rays: 32,
            seed: 0,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            checkpoint_every: 500,
            mc_dirs: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct IterRecord {
    pub iter: usize,
    pub parts: LossParts,
    pub total: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Default)]
pub struct TrainOutcome {
    pub log: Vec<IterRecord>,
    /// Steps skipped because a gradient came back non-finite.
    pub skipped_steps: usize,
}

/// Loss curve CSV: one row per logged iteration.
pub fn write_loss_csv(log: &[IterRecord], path: &Path) -> Result<()> {
    let mut s = String::from("iter,rendering,eikonal,occlusion,geometry,total,wall_ms\n");
    for r in log {
        s.push_str(&format!(
            "{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.1}\n",
            r.iter, r.parts.rendering, r.parts.eikonal, r.parts.occlusion, r.parts.geometry,
            r.total, r.wall_ms
        ));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path.display().to_string(), e))
}

fn group_by_frame(dataset: &Dataset, samples: &[RaySample]) -> Vec<FrameRays> {
    let mut frames: Vec<FrameRays> = Vec::new();
    for s in samples {
        match frames.last_mut() {
            Some(f) if f.pose.rig_step_index == dataset.frames[s.frame].pose.rig_step_index
                && f.pose.turntable_step_index
                    == dataset.frames[s.frame].pose.turntable_step_index =>
            {
                f.rays.push(s.ray.clone());
            }
            _ => frames.push(FrameRays {
                pose: dataset.frames[s.frame].pose.clone(),
                rays: vec![s.ray.clone()],
            }),
        }
    }
    frames
}

fn uniform_box_points(count: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((count, 3), |_| rng.random_range(-1.1..1.1))
}

/// Fits the lift map to the current latent field before joint training.
/// The raw feature targets start far outside the range of the softplus
/// latent, so without this warm-up the geometry term initially dominates the
/// total loss and drags the shared SDF trunk toward unreachable values.
/// Only lift parameters move; fully deterministic for a fixed seed.
pub fn pretrain_lift(
    scene: &NeuralScene,
    store: &mut ParamStore,
    dataset: &Dataset,
    features: &[GeometryFeatureMap],
    iters: usize,
    seed: u64,
) -> Result<()> {
    let w = dataset.manifest.intrinsics.width;
    let h = dataset.manifest.intrinsics.height;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut feat_rows: Vec<Vec<f64>> = Vec::new();
    let mut dir_rows: Vec<Vector3<f64>> = Vec::new();
    let mut pts: Vec<Vector3<f64>> = Vec::new();
    {
        let view = FieldView {
            net: &scene.sdf,
            store,
        };
        for (fi, frame) in dataset.frames.iter().enumerate() {
            let Some(map) = features.get(fi) else { continue };
            let mut candidates: Vec<(usize, usize)> = (0..h)
                .flat_map(|y| (0..w).map(move |x| (x, y)))
                .filter(|(x, y)| {
                    frame.mask[y * w + x]
                        && map
                            .data
                            .slice(ndarray::s![*y, *x, ..])
                            .iter()
                            .any(|v| *v != 0.0)
                })
                .collect();
            candidates.shuffle(&mut rng);
            candidates.truncate(64);
            for (x, y) in candidates {
                let Ok(ray) = dataset.cam_pose.pixel_ray(&dataset.manifest.intrinsics, x, y)
                else {
                    continue;
                };
                let eq = crate::rig::equivalent_ray(&ray, &frame.pose.r_b);
                let Some(p) =
                    crate::dataset::trace_surface(&view, &eq, scene.cfg.near, scene.cfg.far)
                else {
                    continue;
                };
                feat_rows.push(map.data.slice(ndarray::s![y, x, ..]).to_vec());
                dir_rows.push(map.view_dir);
                pts.push(p);
            }
        }
    }
    if feat_rows.is_empty() {
        return Ok(());
    }
    let m = feat_rows.len();
    let mat = Array2::from_shape_fn((m, 3), |(r, c)| pts[r][c]);
    let (_, _, latent) = scene.sdf.eval_batch(store, &mat);
    let sel = Array2::from_shape_fn((m, crate::features::GEO_CHANNELS), |(r, c)| feat_rows[r][c]);
    let vd = Array2::from_shape_fn((m, 3), |(r, c)| dir_rows[r][c]);
    let mut adam = Adam::new(AdamConfig {
        lr: 1e-3,
        ..Default::default()
    });
    for _ in 0..iters {
        let mut tape = Tape::new();
        // the graph touches only lift parameters, so the whole trunk is
        // untouched by construction
        let lifted = crate::features::lift_graph(&mut tape, store, &sel, &vd);
        let t = tape.constant(latent.clone());
        let d = tape.sub(lifted, t);
        let sq = tape.mul(d, d);
        let s = tape.sum_all(sq);
        let loss = tape.mul_scalar(s, 1.0 / m as f64);
        let grads = tape.backward(loss)?;
        adam.step(store, &grads, &[]);
    }
    Ok(())
}

/// Joint shape, reflectance, and light optimization through the volume
/// renderer. Writes periodic checkpoints into `out_dir` when given.
pub fn train_stage1(
    scene: &NeuralScene,
    store: &mut ParamStore,
    dataset: &Dataset,
    features: Option<&[GeometryFeatureMap]>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if let Some(maps) = features {
        if cfg.weights.lambda_geo != 0.0 {
            pretrain_lift(scene, store, dataset, maps, 500, cfg.seed ^ 0x11f7)?;
        }
    }
    let mut adam = Adam::new(cfg.adam);
    let mut out = TrainOutcome::default();
    let started = std::time::Instant::now();
    for iter in 0..cfg.iters {
        let iter_seed = cfg
            .seed
            .wrapping_add((iter as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let (mut tape, total, parts) = stage1_loss(scene, store, dataset, features, cfg, iter_seed)?;
        let total_v = tape.scalar(total);
        if !total_v.is_finite() || total_v > 1e8 {
            return Err(Error::Diverged {
                iter,
                detail: format!("stage-1 loss reached {total_v:.3e}"),
            });
        }
        match tape.backward(total) {
            Ok(grads) => {
                if !adam.step(store, &grads, &[]) {
                    out.skipped_steps += 1;
                }
            }
            Err(_) => out.skipped_steps += 1,
        }
        out.log.push(IterRecord {
            iter,
            parts,
            total: total_v,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 {
                crate::checkpoint::save_params(store, &dir.join(format!("ckpt_{:06}.bin", iter + 1)))?;
            }
        }
    }
    Ok(out)
}

/// Builds the full stage-1 loss graph for one deterministic batch. Exposed
/// separately so gradient checks can rebuild the identical graph while
/// perturbing parameters.
pub fn stage1_loss(
    scene: &NeuralScene,
    store: &ParamStore,
    dataset: &Dataset,
    features: Option<&[GeometryFeatureMap]>,
    cfg: &TrainConfig,
    iter_seed: u64,
) -> Result<(Tape, crate::autodiff::NodeId, LossParts)> {
    let samples = crate::dataset::sample_rays(dataset, cfg.batch_rays, iter_seed)?;
    let frames = group_by_frame(dataset, &samples);
    let eik = uniform_box_points(cfg.eik_points, iter_seed ^ 0x5555_5555);
    let mut tape = Tape::new();
    let render = scene.render_graph(&mut tape, store, &frames, Some(&eik), iter_seed ^ 0xaaaa)?;
    let gt = Array2::from_shape_fn((samples.len(), 3), |(i, c)| samples[i].gt[c]);
    let (total, parts) = assemble_stage1_loss(
        &mut tape, scene, store, &render, &samples, dataset, &gt, features, cfg,
    )?;
    Ok((tape, total, parts))
}

#[allow(clippy::too_many_arguments)]
fn assemble_stage1_loss(
    tape: &mut Tape,
    scene: &NeuralScene,
    store: &ParamStore,
    render: &crate::neural::GraphRender,
    samples: &[RaySample],
    dataset: &Dataset,
    gt: &Array2<f64>,
    features: Option<&[GeometryFeatureMap]>,
    cfg: &TrainConfig,
) -> Result<(crate::autodiff::NodeId, LossParts)> {
    // color term
    let gt_node = tape.constant(gt.clone());
    let diff = tape.sub(render.color, gt_node);
    let sq = tape.mul(diff, diff);
    let ssum = tape.sum_all(sq);
    let ssum_eps = tape.add_scalar(ssum, 1e-12);
    let l_rend = tape.sqrt(ssum_eps);

    // eikonal term over ray samples and box points
    let g2 = tape.mul(render.gradients, render.gradients);
    let g2s = tape.sum_axis1(g2);
    let g2e = tape.add_scalar(g2s, 1e-12);
    let gnorm = tape.sqrt(g2e);
    let gdev = tape.add_scalar(gnorm, -1.0);
    let gdev2 = tape.powi(gdev, 2);
    let l_eik = tape.sum_all(gdev2);

    // occlusion term: marched targets at the expected surface points
    let view = FieldView {
        net: &scene.sdf,
        store,
    };
    let mut occ_idx = Vec::new();
    let mut occ_targets = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if occ_idx.len() >= cfg.occ_rays {
            break;
        }
        if !s.in_mask || render.opacity_values[i] < 0.5 {
            continue;
        }
        let p = Vector3::new(
            render.exp_point_values[[i, 0]],
            render.exp_point_values[[i, 1]],
            render.exp_point_values[[i, 2]],
        );
        let d = Vector3::new(
            render.exp_reflection_values[[i, 0]],
            render.exp_reflection_values[[i, 1]],
            render.exp_reflection_values[[i, 2]],
        );
        let Some(dir) = d.try_normalize(1e-6) else { continue };
        if let Ok(m) = crate::renderer::march_occlusion(&view, &p, &dir, 0.01, 3.0) {
            occ_idx.push(i);
            occ_targets.push(m.hard);
        }
    }
    let l_occ = if occ_idx.is_empty() {
        tape.constant_scalar(0.0)
    } else {
        let pred = tape.select_rows(render.occ_pred, &occ_idx);
        let tgt = tape.constant(Array2::from_shape_vec((occ_targets.len(), 1), occ_targets).unwrap());
        let d = tape.sub(pred, tgt);
        let a = tape.abs(d);
        tape.mean_all(a)
    };

    // geometry prior: lifted measured features against the field latent
    let mut l_geo = tape.constant_scalar(0.0);
    if let Some(maps) = features {
        if cfg.weights.lambda_geo != 0.0 {
            let mut idx = Vec::new();
            let mut rows = Vec::new();
            let mut dirs = Vec::new();
            for (i, s) in samples.iter().enumerate() {
                if !s.in_mask || render.opacity_values[i] < 0.5 {
                    continue;
                }
                let Some(map) = maps.get(s.frame) else { continue };
                let v = map.data.slice(ndarray::s![s.y, s.x, ..]);
                if v.iter().all(|x| *x == 0.0) {
                    continue;
                }
                idx.push(i);
                rows.push(v.to_vec());
                dirs.push(map.view_dir);
            }
            if !idx.is_empty() {
                let m = idx.len();
                let sel = Array2::from_shape_fn((m, crate::features::GEO_CHANNELS), |(r, c)| {
                    rows[r][c]
                });
                let vd = Array2::from_shape_fn((m, 3), |(r, c)| dirs[r][c]);
                let lifted = crate::features::lift_graph(tape, store, &sel, &vd);
                let pred = tape.select_rows(render.latent, &idx);
                let d = tape.sub(pred, lifted);
                let sq = tape.mul(d, d);
                let s = tape.sum_all(sq);
                l_geo = tape.mul_scalar(s, 1.0 / m as f64);
            }
        }
    }
    let _ = dataset;

    let parts = LossParts {
        rendering: tape.scalar(l_rend),
        eikonal: tape.scalar(l_eik),
        occlusion: tape.scalar(l_occ),
        geometry: tape.scalar(l_geo),
    };
    let we = tape.mul_scalar(l_eik, cfg.weights.lambda_eik);
    let wo = tape.mul_scalar(l_occ, cfg.weights.lambda_occ);
    let wg = tape.mul_scalar(l_geo, cfg.weights.lambda_geo);
    let t0 = tape.add(l_rend, we);
    let t1 = tape.add(t0, wo);
    let total = tape.add(t1, wg);
    Ok((total, parts))
}

/// One fixed surface sample with its supervision color.
struct SurfacePixel {
    frame: usize,
    point: Vector3<f64>,
    normal: Vector3<f64>,
    view_dir: Vector3<f64>,
    gt: crate::envlight::Rgb,
}

fn collect_surface_pixels(
    scene: &NeuralScene,
    store: &ParamStore,
    dataset: &Dataset,
    per_frame_cap: usize,
    seed: u64,
) -> Vec<SurfacePixel> {
    let view = FieldView {
        net: &scene.sdf,
        store,
    };
    let w = dataset.manifest.intrinsics.width;
    let h = dataset.manifest.intrinsics.height;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (fi, frame) in dataset.frames.iter().enumerate() {
        let mut candidates: Vec<(usize, usize)> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .filter(|(x, y)| frame.mask[y * w + x])
            .collect();
        candidates.shuffle(&mut rng);
        candidates.truncate(per_frame_cap);
        let mut pts = Vec::new();
        let mut keep = Vec::new();
        for (x, y) in candidates {
            let Ok(ray) = dataset.cam_pose.pixel_ray(&dataset.manifest.intrinsics, x, y) else {
                continue;
            };
            let eq = crate::rig::equivalent_ray(&ray, &frame.pose.r_b);
            if let Some(p) = crate::dataset::trace_surface(&view, &eq, 0.5, 4.5) {
                pts.push(p);
                keep.push(((x, y), -eq.direction));
            }
        }
        if pts.is_empty() {
            continue;
        }
        let mat = Array2::from_shape_fn((pts.len(), 3), |(r, c)| pts[r][c]);
        let (_, grad, _) = scene.sdf.eval_batch(store, &mat);
        for (r, ((x, y), vd)) in keep.iter().enumerate() {
            let g = Vector3::new(grad[[r, 0]], grad[[r, 1]], grad[[r, 2]]);
            let Some(n) = g.try_normalize(1e-9) else { continue };
            out.push(SurfacePixel {
                frame: fi,
                point: pts[r],
                normal: n,
                view_dir: *vd,
                gt: dataset.frames[*&(fi)].rgb[y * w + x],
            });
        }
    }
    out
}

/// Reflectance and light refinement with the shape frozen: the volume
/// renderer is replaced by Monte-Carlo shading at fixed surface points.
pub fn train_stage2(
    scene: &NeuralScene,
    store: &mut ParamStore,
    dataset: &Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let pixels = collect_surface_pixels(scene, store, dataset, 512, cfg.seed ^ 0x0ff1_ce);
    if pixels.is_empty() {
        return Err(Error::validation(
            "no surface points found for reflectance refinement",
        ));
    }
    let frozen = [crate::field::SDF_PREFIX];
    let mut adam = Adam::new(cfg.adam);
    let mut out = TrainOutcome::default();
    let started = std::time::Instant::now();
    for iter in 0..cfg.iters {
        let iter_seed = cfg
            .seed
            .wrapping_add((iter as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
        let mut rng = ChaCha8Rng::seed_from_u64(iter_seed);
        let mut chosen: Vec<usize> = (0..cfg.batch_rays.min(pixels.len()))
            .map(|_| rng.random_range(0..pixels.len()))
            .collect();
        chosen.sort_by_key(|i| pixels[*i].frame);

        let mut frames: Vec<FrameSurface> = Vec::new();
        let mut gt_rows: Vec<crate::envlight::Rgb> = Vec::new();
        let mut current: Option<(usize, Vec<usize>)> = None;
        let flush = |frames: &mut Vec<FrameSurface>, fi: usize, rows: &[usize]| {
            let n = rows.len();
            frames.push(FrameSurface {
                pose: dataset.frames[fi].pose.clone(),
                points: Array2::from_shape_fn((n, 3), |(r, c)| pixels[rows[r]].point[c]),
                normals: Array2::from_shape_fn((n, 3), |(r, c)| pixels[rows[r]].normal[c]),
                view_dirs: Array2::from_shape_fn((n, 3), |(r, c)| pixels[rows[r]].view_dir[c]),
            });
        };
        for i in chosen {
            gt_rows.push(pixels[i].gt);
            match &mut current {
                Some((fi, rows)) if *fi == pixels[i].frame => rows.push(i),
                _ => {
                    if let Some((fi, rows)) = current.take() {
                        flush(&mut frames, fi, &rows);
                    }
                    current = Some((pixels[i].frame, vec![i]));
                }
            }
        }
        if let Some((fi, rows)) = current.take() {
            flush(&mut frames, fi, &rows);
        }

        let mut tape = Tape::new();
        let color = scene.shade_surface_graph(&mut tape, store, &frames, cfg.mc_dirs)?;
        let gt = tape.constant(Array2::from_shape_fn((gt_rows.len(), 3), |(r, c)| gt_rows[r][c]));
        let diff = tape.sub(color, gt);
        let sq = tape.mul(diff, diff);
        let ssum = tape.sum_all(sq);
        let ssum_eps = tape.add_scalar(ssum, 1e-12);
        let total = tape.sqrt(ssum_eps);
        let total_v = tape.scalar(total);
        if !total_v.is_finite() || total_v > 1e8 {
            return Err(Error::Diverged {
                iter,
                detail: format!("stage-2 loss reached {total_v:.3e}"),
            });
        }
        match tape.backward(total) {
            Ok(grads) => {
                if !adam.step(store, &grads, &frozen) {
                    out.skipped_steps += 1;
                }
            }
            Err(_) => out.skipped_steps += 1,
        }
        out.log.push(IterRecord {
            iter,
            parts: LossParts {
                rendering: total_v,
                ..Default::default()
            },
            total: total_v,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 {
                crate::checkpoint::save_params(store, &dir.join(format!("ckpt_s2_{:06}.bin", iter + 1)))?;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn total_combines_parts_with_default_weights() {
        let parts = LossParts {
            rendering: 1.0,
            eikonal: 1.0,
            occlusion: 1.0,
            geometry: 1.0,
        };
        let t = parts.total(&LossWeights::default());
        assert!((t - 3.1).abs() < 1e-12, "total: {t}");
    }

    #[test]
    fn rendering_loss_is_root_of_summed_squares() {
        let pred = arr2(&[[0.5, 0.5, 0.5], [0.2, 0.2, 0.2]]);
        let gt = arr2(&[[0.4, 0.4, 0.4], [0.3, 0.3, 0.3]]);
        let l = loss_rendering(pred.view(), gt.view());
        assert!((l - (6.0f64 * 0.01).sqrt()).abs() < 1e-12, "loss: {l}");
    }

    #[test]
    fn rendering_loss_zero_on_match() {
        let x = arr2(&[[0.1, 0.9, 0.3]]);
        assert_eq!(loss_rendering(x.view(), x.view()), 0.0);
    }

    #[test]
    fn eikonal_unit_gradients_cost_nothing() {
        let g = arr2(&[[1.0, 0.0, 0.0], [0.0, -1.0, 0.0]]);
        assert_eq!(loss_eikonal(g.view()), 0.0);
    }

    #[test]
    fn eikonal_norm_two_costs_one() {
        let g = arr2(&[[2.0, 0.0, 0.0]]);
        assert!((loss_eikonal(g.view()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn occlusion_loss_is_mean_absolute() {
        let l = loss_occlusion(&[0.2, 0.9], &[0.0, 1.0]);
        assert!((l - 0.15).abs() < 1e-12);
        assert_eq!(loss_occlusion(&[], &[]), 0.0);
    }

    #[test]
    fn geometry_loss_is_mean_squared_distance() {
        let pred = arr2(&[[1.0, 0.0], [0.0, 0.0]]);
        let tgt = arr2(&[[0.0, 0.0], [0.0, 0.0]]);
        let l = loss_geometry(pred.view(), tgt.view());
        assert!((l - 0.5).abs() < 1e-12);
    }

    fn micro_dataset(dir: &std::path::Path) -> Dataset {
        use crate::dataset::{synth_dataset, CameraPlacement, ScheduleParams};
        use crate::renderer::{CameraIntrinsics, RenderConfig};
        use crate::rig::RigAxes;
        let spec = crate::scene::SceneSpec::preset("sphere_lambert").unwrap();
        let schedule = ScheduleParams {
            rig_steps: 2,
            turntable_steps: 2,
            rig_step_deg: 90.0,
            turntable_step_deg: 45.0,
            axes: RigAxes::default(),
        };
        let intrinsics = CameraIntrinsics::from_fov(8, 30.0);
        let config = RenderConfig {
            samples_per_ray: 24,
            near: 1.8,
            far: 3.2,
            light_samples: 16,
            ..Default::default()
        };
        synth_dataset(
            &spec,
            &schedule,
            &intrinsics,
            &CameraPlacement::default(),
            &config,
            dir,
        )
        .unwrap();
        crate::dataset::load_dataset(&dir.join("manifest.json")).unwrap()
    }

    fn micro_scene() -> (NeuralScene, ParamStore) {
        let cfg = crate::neural::NeuralSceneConfig {
            l_max: 1,
            samples_per_ray: 8,
            near: 1.8,
            far: 3.2,
            diffuse_dirs: 16,
            specular_dirs: 16,
            brdf_dirs: 8,
            ..Default::default()
        };
        let scene = NeuralScene::new(cfg).unwrap();
        let mut store = ParamStore::new();
        scene.init_params(&mut store, 11);
        (scene, store)
    }

    #[test]
    fn stage1_runs_and_logs() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = micro_dataset(dir.path());
        let (scene, mut store) = micro_scene();
        let cfg = TrainConfig {
            iters: 4,
            batch_rays: 32,
            eik_points: 32,
            occ_rays: 4,
            checkpoint_every: 2,
            ..Default::default()
        };
        let ck = dir.path().join("ckpts");
        std::fs::create_dir_all(&ck).unwrap();
        let out = train_stage1(&scene, &mut store, &dataset, None, &cfg, Some(&ck)).unwrap();
        assert_eq!(out.log.len(), 4);
        assert!(out.log.iter().all(|r| r.total.is_finite()));
        assert!(ck.join("ckpt_000002.bin").exists());
        assert!(ck.join("ckpt_000004.bin").exists());
        let csv = dir.path().join("loss.csv");
        write_loss_csv(&out.log, &csv).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        assert!(text.starts_with("iter,rendering,eikonal,occlusion,geometry,total,wall_ms\n"));
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn stage1_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = micro_dataset(dir.path());
        let cfg = TrainConfig {
            iters: 3,
            batch_rays: 16,
            eik_points: 16,
            occ_rays: 2,
            checkpoint_every: 0,
            ..Default::default()
        };
        let mut hashes = Vec::new();
        for _ in 0..2 {
            let (scene, mut store) = micro_scene();
            train_stage1(&scene, &mut store, &dataset, None, &cfg, None).unwrap();
            hashes.push(crate::checkpoint::param_hash(&store));
        }
        assert_eq!(hashes[0], hashes[1]);
    }

    #[test]
    fn stage2_freezes_shape_and_updates_reflectance() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = micro_dataset(dir.path());
        let (scene, mut store) = micro_scene();
        let sdf_before: Vec<Array2<f64>> = store
            .names()
            .filter(|n| n.starts_with("sdf"))
            .map(|n| store.get(n).clone())
            .collect();
        let brdf_before = store.get("brdf.w0").clone();
        let env_before = store.get(crate::neural::ENV_COEFFS).clone();
        let cfg = TrainConfig {
            iters: 3,
            batch_rays: 32,
            mc_dirs: 16,
            checkpoint_every: 0,
            ..Default::default()
        };
        let out = train_stage2(&scene, &mut store, &dataset, &cfg, None).unwrap();
        assert_eq!(out.log.len(), 3);
        let sdf_after: Vec<Array2<f64>> = store
            .names()
            .filter(|n| n.starts_with("sdf"))
            .map(|n| store.get(n).clone())
            .collect();
        assert_eq!(sdf_before, sdf_after, "frozen shape must stay bitwise equal");
        assert_ne!(&brdf_before, store.get("brdf.w0"));
        assert_ne!(&env_before, store.get(crate::neural::ENV_COEFFS));
    }

    #[test]
    fn fd_gradients_match_analytic_on_micro_scene() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = micro_dataset(dir.path());
        let (scene, mut store) = micro_scene();
        let cfg = TrainConfig {
            batch_rays: 16,
            eik_points: 8,
            occ_rays: 2,
            ..Default::default()
        };
        let seed = 77u64;
        let (mut tape, total, _) = stage1_loss(&scene, &store, &dataset, None, &cfg, seed).unwrap();
        let grads = tape.backward(total).unwrap();
        let n = store.num_scalars();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-4;
        let mut ok = 0;
        let coords: Vec<usize> = (0..40).map(|_| rng.random_range(0..n)).collect();
        for &c in &coords {
            let a = grads.flat_get(&store, c);
            store.flat_add(c, h);
            let (tp, tl, _) = stage1_loss(&scene, &store, &dataset, None, &cfg, seed).unwrap();
            let up = tp.scalar(tl);
            store.flat_add(c, -2.0 * h);
            let (tm, tl2, _) = stage1_loss(&scene, &store, &dataset, None, &cfg, seed).unwrap();
            let dn = tm.scalar(tl2);
            store.flat_add(c, h);
            let fd = (up - dn) / (2.0 * h);
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            if rel < 1e-2 {
                ok += 1;
            }
        }
        assert!(
            ok * 100 >= coords.len() * 90,
            "only {ok}/{} coordinates matched",
            coords.len()
        );
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut store = ParamStore::new();
        store.add("x", arr2(&[[5.0]]));
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        for _ in 0..500 {
            let mut tape = crate::autodiff::Tape::new();
            let x = tape.param(&store, "x");
            let y = tape.powi(x, 2);
            let loss = tape.sum_all(y);
            let grads = tape.backward(loss).unwrap();
            assert!(adam.step(&mut store, &grads, &[]));
        }
        assert!(store.get("x")[[0, 0]].abs() < 1e-2);
    }

    #[test]
    fn adam_skips_non_finite_gradients_and_frozen_blocks() {
        let mut store = ParamStore::new();
        store.add("x", arr2(&[[1.0]]));
        store.add("y", arr2(&[[1.0]]));
        let mut adam = Adam::new(AdamConfig::default());

        let mut tape = crate::autodiff::Tape::new();
        let x = tape.param(&store, "x");
        let y = tape.param(&store, "y");
        let s = tape.add(x, y);
        let loss = tape.sum_all(s);
        let grads = tape.backward(loss).unwrap();

        let before_y = store.get("y").clone();
        assert!(adam.step(&mut store, &grads, &["y"]));
        assert_ne!(store.get("x")[[0, 0]], 1.0);
        assert_eq!(store.get("y"), &before_y);

        let mut bad = crate::autodiff::Tape::new();
        let x = bad.param(&store, "x");
        let lg = bad.powi(x, -1);
        let z = bad.mul_scalar(x, 0.0);
        let d = bad.div(lg, z);
        let loss = bad.sum_all(d);
        if let Ok(grads) = bad.backward(loss) {
            let snapshot = store.get("x").clone();
            if !grads.is_finite() {
                assert!(!adam.step(&mut store, &grads, &[]));
                assert_eq!(store.get("x"), &snapshot);
            }
        }
    }
}
