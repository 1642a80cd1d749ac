//! On-disk dataset format: JSON manifest plus PNG/PFM payloads, synthetic
//! dataset generation by forward rendering, and deterministic ray sampling
//! for training.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envlight::Rgb;
use crate::error::{Error, Result};
use crate::imgio;
use crate::renderer::{render_image, CameraIntrinsics, CameraPose, RenderConfig};
use crate::rig::{build_schedule, Ray, RigAxes, RigPose, Rotation};
use crate::scene::{AnalyticScene, SceneSpec};
use crate::sdf::SdfEval;

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_MM_PER_UNIT: f64 = 100.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub rig_steps: usize,
    pub turntable_steps: usize,
    pub rig_step_deg: f64,
    pub turntable_step_deg: f64,
    #[serde(default)]
    pub axes: RigAxes,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraPlacement {
    pub eye: [f64; 3],
    pub target: [f64; 3],
    pub up: [f64; 3],
}

impl CameraPlacement {
    pub fn pose(&self) -> Result<CameraPose> {
        CameraPose::look_at(
            Vector3::from_row_slice(&self.eye),
            Vector3::from_row_slice(&self.target),
            Vector3::from_row_slice(&self.up),
        )
    }
}

impl Default for CameraPlacement {
    fn default() -> Self {
        CameraPlacement {
            eye: [0.0, -2.5, 0.0],
            target: [0.0; 3],
            up: [0.0, 0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameRecord {
    pub m: usize,
    pub n: usize,
    pub image: String,
    pub mask: String,
    #[serde(default)]
    pub normal: Option<String>,
    pub r_a: [f64; 9],
    pub r_b: [f64; 9],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub schedule: ScheduleParams,
    pub intrinsics: CameraIntrinsics,
    pub camera: CameraPlacement,
    /// Millimeters per world unit for metric reporting.
    pub mm_per_unit: f64,
    pub frames: Vec<FrameRecord>,
    #[serde(default)]
    pub ground_truth: Option<SceneSpec>,
}

/// Renders every pose of the schedule and writes images, masks, ground-truth
/// normal maps, and the manifest. Re-running with the same inputs reproduces
/// every file byte for byte.
pub fn synth_dataset(
    spec: &SceneSpec,
    schedule: &ScheduleParams,
    intrinsics: &CameraIntrinsics,
    camera: &CameraPlacement,
    config: &RenderConfig,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    spec.validate()?;
    intrinsics.validate()?;
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let scene = AnalyticScene::from_spec(spec)?;
    let poses = build_schedule(
        schedule.rig_steps,
        schedule.turntable_steps,
        schedule.rig_step_deg,
        schedule.turntable_step_deg,
        &schedule.axes,
    )?;
    let cam_pose = camera.pose()?;
    let mut frames = Vec::new();
    for pose in &poses.poses {
        let img = render_image(pose, intrinsics, &cam_pose, &scene, config)?;
        let mask: Vec<bool> = img.opacity.iter().map(|o| *o > 0.5).collect();
        let normals = normal_map(&scene, pose, intrinsics, &cam_pose, config, &mask);
        let stem = format!("frame_{:03}_{:03}", pose.rig_step_index, pose.turntable_step_index);
        let image_name = format!("{stem}.png");
        let mask_name = format!("{stem}_mask.png");
        let normal_name = format!("{stem}_normal.pfm");
        imgio::write_png_rgb(&out_dir.join(&image_name), img.width, img.height, &img.rgb)?;
        imgio::write_png_mask(&out_dir.join(&mask_name), img.width, img.height, &mask)?;
        imgio::write_pfm_rgb(&out_dir.join(&normal_name), img.width, img.height, &normals)?;
        frames.push(FrameRecord {
            m: pose.rig_step_index,
            n: pose.turntable_step_index,
            image: image_name,
            mask: mask_name,
            normal: Some(normal_name),
            r_a: pose.r_a.to_row_major(),
            r_b: pose.r_b.to_row_major(),
        });
    }
    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        schedule: schedule.clone(),
        intrinsics: *intrinsics,
        camera: camera.clone(),
        mm_per_unit: DEFAULT_MM_PER_UNIT,
        frames,
        ground_truth: Some(spec.clone()),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(out_dir.join("manifest.json"), json)
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    Ok(manifest)
}

/// Object-frame surface normals along each pixel's equivalent ray; zero
/// outside the mask.
fn normal_map(
    scene: &AnalyticScene,
    pose: &RigPose,
    intrinsics: &CameraIntrinsics,
    cam_pose: &CameraPose,
    config: &RenderConfig,
    mask: &[bool],
) -> Vec<Vector3<f64>> {
    let mut out = vec![Vector3::zeros(); mask.len()];
    for (idx, inside) in mask.iter().enumerate() {
        if !inside {
            continue;
        }
        let x = idx % intrinsics.width;
        let y = idx / intrinsics.width;
        let Ok(ray) = cam_pose.pixel_ray(intrinsics, x, y) else { continue };
        let eq = crate::rig::equivalent_ray(&ray, &pose.r_b);
        if let Some(p) = trace_surface(scene, &eq, config.near, config.far) {
            out[idx] = scene.sample(&p).normal;
        }
    }
    out
}

/// Simple sphere trace to the first surface along a ray.
pub fn trace_surface<F: SdfEval + ?Sized>(
    field: &F,
    ray: &Ray,
    near: f64,
    far: f64,
) -> Option<Vector3<f64>> {
    let mut t = near;
    for _ in 0..256 {
        let p = ray.at(t);
        let d = field.sdf(&p);
        if d < 1e-5 {
            return Some(p);
        }
        t += d.max(1e-4);
        if t > far {
            return None;
        }
    }
    None
}

/// A dataset loaded into memory: decoded poses and pixel data per frame.
#[derive(Debug)]
pub struct LoadedFrame {
    pub pose: RigPose,
    pub rgb: Vec<Rgb>,
    pub mask: Vec<bool>,
    pub normal: Option<Vec<Vector3<f64>>>,
}

#[derive(Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
    pub frames: Vec<LoadedFrame>,
    pub cam_pose: CameraPose,
}

/// Loads and validates a dataset from its manifest path.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::validation(format!(
            "unsupported schema version {}",
            manifest.schema_version
        )));
    }
    let expected = manifest.schedule.rig_steps * manifest.schedule.turntable_steps;
    if manifest.frames.len() != expected {
        return Err(Error::validation(format!(
            "manifest has {} frames, schedule implies {expected}",
            manifest.frames.len()
        )));
    }
    manifest.intrinsics.validate()?;
    let root = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));

    let regenerated = build_schedule(
        manifest.schedule.rig_steps,
        manifest.schedule.turntable_steps,
        manifest.schedule.rig_step_deg,
        manifest.schedule.turntable_step_deg,
        &manifest.schedule.axes,
    )?;

    let mut frames = Vec::new();
    for (i, rec) in manifest.frames.iter().enumerate() {
        let r_a = Rotation::from_row_major(&rec.r_a)
            .map_err(|e| Error::validation(format!("frame {i} r_a: {e}")))?;
        let r_b = Rotation::from_row_major(&rec.r_b)
            .map_err(|e| Error::validation(format!("frame {i} r_b: {e}")))?;
        let gen = &regenerated.poses[i];
        let da = (gen.r_a.matrix() - r_a.matrix()).abs().max();
        let db = (gen.r_b.matrix() - r_b.matrix()).abs().max();
        if da > 1e-9 || db > 1e-9 {
            return Err(Error::validation(format!(
                "frame {i} rotations disagree with the schedule (max diff {})",
                da.max(db)
            )));
        }
        let image_path = root.join(&rec.image);
        if !image_path.exists() {
            return Err(Error::validation(format!(
                "missing image file: {}",
                image_path.display()
            )));
        }
        let mask_path = root.join(&rec.mask);
        if !mask_path.exists() {
            return Err(Error::validation(format!(
                "missing mask file: {}",
                mask_path.display()
            )));
        }
        let (w, h, rgb) = imgio::read_png_rgb(&image_path)?;
        if (w, h) != (manifest.intrinsics.width, manifest.intrinsics.height) {
            return Err(Error::validation(format!(
                "frame {i} image size {w}x{h} does not match intrinsics"
            )));
        }
        let (_, _, mask) = imgio::read_png_mask(&mask_path)?;
        let normal = match &rec.normal {
            Some(name) => {
                let p = root.join(name);
                if !p.exists() {
                    return Err(Error::validation(format!(
                        "missing normal map: {}",
                        p.display()
                    )));
                }
                Some(imgio::read_pfm_rgb(&p)?.2)
            }
            None => None,
        };
        frames.push(LoadedFrame {
            pose: RigPose {
                rig_step_index: rec.m,
                turntable_step_index: rec.n,
                r_a,
                r_b,
                ..gen.clone()
            },
            rgb,
            mask,
            normal,
        });
    }
    let cam_pose = manifest.camera.pose()?;
    Ok(Dataset {
        manifest,
        root,
        frames,
        cam_pose,
    })
}

/// One training ray with its ground truth.
#[derive(Debug, Clone)]
pub struct RaySample {
    pub frame: usize,
    pub x: usize,
    pub y: usize,
    pub ray: Ray,
    pub gt: Rgb,
    pub in_mask: bool,
}

/// Deterministic ray batch: at least half the rays hit the object mask, the
/// rest are uniform over the image. Sorted by frame so per-pose work can be
/// grouped.
pub fn sample_rays(dataset: &Dataset, batch: usize, seed: u64) -> Result<Vec<RaySample>> {
    if dataset.frames.is_empty() {
        return Err(Error::validation("dataset has no frames"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = dataset.manifest.intrinsics.width;
    let h = dataset.manifest.intrinsics.height;
    let mut out = Vec::with_capacity(batch);
    for k in 0..batch {
        let f = rng.random_range(0..dataset.frames.len());
        let frame = &dataset.frames[f];
        let want_mask = k % 2 == 0;
        let (x, y) = if want_mask {
            let inside: Vec<usize> = frame
                .mask
                .iter()
                .enumerate()
                .filter_map(|(i, m)| m.then_some(i))
                .collect();
            if inside.is_empty() {
                (rng.random_range(0..w), rng.random_range(0..h))
            } else {
                let idx = inside[rng.random_range(0..inside.len())];
                (idx % w, idx / w)
            }
        } else {
            (rng.random_range(0..w), rng.random_range(0..h))
        };
        let ray = dataset.cam_pose.pixel_ray(&dataset.manifest.intrinsics, x, y)?;
        out.push(RaySample {
            frame: f,
            x,
            y,
            ray,
            gt: frame.rgb[y * w + x],
            in_mask: frame.mask[y * w + x],
        });
    }
    out.sort_by_key(|s| s.frame);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn toy_inputs() -> (SceneSpec, ScheduleParams, CameraIntrinsics, CameraPlacement, RenderConfig) {
        (
            SceneSpec::preset("sphere_lambert").unwrap(),
            ScheduleParams {
                rig_steps: 2,
                turntable_steps: 2,
                rig_step_deg: 90.0,
                turntable_step_deg: 14.4,
                axes: RigAxes::default(),
            },
            CameraIntrinsics::from_fov(24, 30.0),
            CameraPlacement::default(),
            RenderConfig {
                near: 1.5,
                far: 3.5,
                samples_per_ray: 24,
                light_samples: 16,
                ..Default::default()
            },
        )
    }

    #[test]
    fn synth_then_load_round_trips() {
        let (spec, schedule, intr, cam, cfg) = toy_inputs();
        let dir = tempdir().unwrap();
        let manifest = synth_dataset(&spec, &schedule, &intr, &cam, &cfg, dir.path()).unwrap();
        assert_eq!(manifest.frames.len(), 4);
        let ds = load_dataset(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(ds.frames.len(), 4);
        for (rec, frame) in manifest.frames.iter().zip(&ds.frames) {
            let ra = Rotation::from_row_major(&rec.r_a).unwrap();
            let diff = (ra.matrix() - frame.pose.r_a.matrix()).abs().max();
            assert!(diff < 1e-12);
        }
        // images survive a re-encode bit-exactly
        let p0 = dir.path().join(&manifest.frames[0].image);
        let again = dir.path().join("again.png");
        imgio::write_png_rgb(&again, intr.width, intr.height, &ds.frames[0].rgb).unwrap();
        assert_eq!(std::fs::read(&p0).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let (spec, schedule, intr, cam, cfg) = toy_inputs();
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        synth_dataset(&spec, &schedule, &intr, &cam, &cfg, d1.path()).unwrap();
        synth_dataset(&spec, &schedule, &intr, &cam, &cfg, d2.path()).unwrap();
        for entry in std::fs::read_dir(d1.path()).unwrap() {
            let entry = entry.unwrap();
            let name = entry.file_name();
            let a = std::fs::read(entry.path()).unwrap();
            let b = std::fs::read(d2.path().join(&name)).unwrap();
            assert_eq!(a, b, "file {name:?} differs between runs");
        }
    }

    #[test]
    fn single_frame_schedule() {
        let (spec, mut schedule, intr, cam, cfg) = toy_inputs();
        schedule.rig_steps = 1;
        schedule.turntable_steps = 1;
        let dir = tempdir().unwrap();
        let manifest = synth_dataset(&spec, &schedule, &intr, &cam, &cfg, dir.path()).unwrap();
        assert_eq!(manifest.frames.len(), 1);
    }

    #[test]
    fn missing_image_named_in_error() {
        let (spec, schedule, intr, cam, cfg) = toy_inputs();
        let dir = tempdir().unwrap();
        let manifest = synth_dataset(&spec, &schedule, &intr, &cam, &cfg, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join(&manifest.frames[2].image)).unwrap();
        let err = load_dataset(&dir.path().join("manifest.json")).unwrap_err();
        assert!(err.to_string().contains(&manifest.frames[2].image));
    }

    #[test]
    fn tampered_rotation_rejected() {
        let (spec, schedule, intr, cam, cfg) = toy_inputs();
        let dir = tempdir().unwrap();
        synth_dataset(&spec, &schedule, &intr, &cam, &cfg, dir.path()).unwrap();
        let mpath = dir.path().join("manifest.json");
        let mut manifest: DatasetManifest =
            serde_json::from_str(&std::fs::read_to_string(&mpath).unwrap()).unwrap();
        // flip one axis: determinant becomes -1
        for v in manifest.frames[0].r_a.iter_mut().take(3) {
            *v = -*v;
        }
        std::fs::write(&mpath, serde_json::to_string(&manifest).unwrap()).unwrap();
        assert!(load_dataset(&mpath).is_err());
    }

    #[test]
    fn frame_count_mismatch_rejected() {
        let (spec, schedule, intr, cam, cfg) = toy_inputs();
        let dir = tempdir().unwrap();
        synth_dataset(&spec, &schedule, &intr, &cam, &cfg, dir.path()).unwrap();
        let mpath = dir.path().join("manifest.json");
        let mut manifest: DatasetManifest =
            serde_json::from_str(&std::fs::read_to_string(&mpath).unwrap()).unwrap();
        manifest.frames.pop();
        std::fs::write(&mpath, serde_json::to_string(&manifest).unwrap()).unwrap();
        let err = load_dataset(&mpath).unwrap_err();
        assert!(err.to_string().contains("frames"));
    }

    #[test]
    fn ray_sampling_is_deterministic_and_mask_weighted() {
        let (spec, schedule, intr, cam, cfg) = toy_inputs();
        let dir = tempdir().unwrap();
        synth_dataset(&spec, &schedule, &intr, &cam, &cfg, dir.path()).unwrap();
        let ds = load_dataset(&dir.path().join("manifest.json")).unwrap();
        let a = sample_rays(&ds, 64, 5).unwrap();
        let b = sample_rays(&ds, 64, 5).unwrap();
        assert_eq!(a.len(), 64);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!((x.frame, x.x, x.y), (y.frame, y.x, y.y));
        }
        let inside = a.iter().filter(|s| s.in_mask).count();
        assert!(inside * 2 >= a.len(), "only {inside}/64 rays in mask");
        for w in a.windows(2) {
            assert!(w[0].frame <= w[1].frame);
        }
    }

    #[test]
    fn gt_normals_match_the_analytic_sphere() {
        let (spec, mut schedule, intr, cam, cfg) = toy_inputs();
        schedule.rig_steps = 1;
        schedule.turntable_steps = 1;
        let dir = tempdir().unwrap();
        synth_dataset(&spec, &schedule, &intr, &cam, &cfg, dir.path()).unwrap();
        let ds = load_dataset(&dir.path().join("manifest.json")).unwrap();
        let normals = ds.frames[0].normal.as_ref().unwrap();
        let mut checked = 0;
        for (i, inside) in ds.frames[0].mask.iter().enumerate() {
            if !inside {
                continue;
            }
            let n = normals[i];
            if n.norm() < 0.5 {
                continue;
            }
            // on a centered sphere the normal is the surface point normalized;
            // verify against the traced ray independently
            let x = i % intr.width;
            let y = i / intr.width;
            let ray = ds.cam_pose.pixel_ray(&intr, x, y).unwrap();
            let scene = AnalyticScene::from_spec(&spec).unwrap();
            if let Some(p) = trace_surface(&scene, &ray, cfg.near, cfg.far) {
                let expect = p.normalize();
                // f32 storage in the PFM file limits the precision here
                assert!((n - expect).norm() < 1e-5, "pixel {i}: {n:?} vs {expect:?}");
                checked += 1;
            }
        }
        assert!(checked > 20);
    }
}
