//! Python bindings: capture schedule and pose algebra, the neural model,
//! environment lights, and the pipeline commands (synth/train/eval/relight).

use std::path::PathBuf;

use nalgebra::Vector3;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::IntoPyObjectExt;
use pyo3::types::{PyDict, PyList};

use rotmvps::autodiff::ParamStore;
use rotmvps::error::Error;
use rotmvps::neural::{NeuralScene, NeuralSceneConfig};
use rotmvps::rig::{build_schedule, Ray, RigAxes, RigPose};

fn err_py(e: Error) -> PyErr {
    match e {
        Error::Validation(msg) => PyValueError::new_err(msg),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn json_to_py(py: Python<'_>, v: &serde_json::Value) -> PyResult<Py<PyAny>> {
    match v {
        serde_json::Value::Null => Ok(py.None()),
        serde_json::Value::Bool(b) => b.into_py_any(py),
        serde_json::Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.into_py_any(py)
            } else {
                n.as_f64().unwrap_or(f64::NAN).into_py_any(py)
            }
        }
        serde_json::Value::String(s) => s.into_py_any(py),
        serde_json::Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_py_any(py)
        }
        serde_json::Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, val) in map {
                dict.set_item(k, json_to_py(py, val)?)?;
            }
            dict.into_py_any(py)
        }
    }
}

fn mat3_to_rows(m: &nalgebra::Matrix3<f64>) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = m[(r, c)];
        }
    }
    out
}

/// One capture pose: rig step, turntable step, and the two rotations.
#[pyclass(name = "Pose", from_py_object)]
#[derive(Clone)]
struct PyPose {
    inner: RigPose,
}

#[pymethods]
impl PyPose {
    #[getter]
    fn rig_step(&self) -> usize {
        self.inner.rig_step_index
    }

    #[getter]
    fn turntable_step(&self) -> usize {
        self.inner.turntable_step_index
    }

    #[getter]
    fn rig_angle_deg(&self) -> f64 {
        self.inner.rig_angle_deg
    }

    #[getter]
    fn turntable_angle_deg(&self) -> f64 {
        self.inner.turntable_angle_deg
    }

    /// Rig rotation matrix (row-major 3x3).
    #[getter]
    fn rotation_a(&self) -> [[f64; 3]; 3] {
        mat3_to_rows(self.inner.r_a.matrix())
    }

    /// Turntable rotation matrix (row-major 3x3).
    #[getter]
    fn rotation_b(&self) -> [[f64; 3]; 3] {
        mat3_to_rows(self.inner.r_b.matrix())
    }

    /// Combined rotation applied to the environment light.
    #[getter]
    fn light_rotation(&self) -> [[f64; 3]; 3] {
        mat3_to_rows(self.inner.light_rotation().matrix())
    }

    /// Re-expresses a camera ray in the object frame.
    fn equivalent_ray(
        &self,
        origin: [f64; 3],
        direction: [f64; 3],
    ) -> PyResult<([f64; 3], [f64; 3])> {
        let ray = Ray::new(
            Vector3::from_row_slice(&origin),
            Vector3::from_row_slice(&direction),
        )
        .map_err(err_py)?;
        let eq = rotmvps::rig::equivalent_ray(&ray, &self.inner.r_b);
        Ok((eq.origin.into(), eq.direction.into()))
    }

    fn __repr__(&self) -> String {
        format!(
            "Pose(rig_step={}, turntable_step={})",
            self.inner.rig_step_index, self.inner.turntable_step_index
        )
    }
}

/// The full two-axis capture schedule.
#[pyclass(name = "Schedule")]
struct PySchedule {
    poses: Vec<RigPose>,
}

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (rig_steps, turntable_steps, rig_step_deg=None, turntable_step_deg=None))]
    fn new(
        rig_steps: usize,
        turntable_steps: usize,
        rig_step_deg: Option<f64>,
        turntable_step_deg: Option<f64>,
    ) -> PyResult<Self> {
        let rig_deg = rig_step_deg.unwrap_or(360.0 / rig_steps.max(1) as f64);
        let tt_deg = turntable_step_deg.unwrap_or(360.0 / turntable_steps.max(1) as f64);
        let schedule = build_schedule(rig_steps, turntable_steps, rig_deg, tt_deg, &RigAxes::default())
            .map_err(err_py)?;
        Ok(PySchedule {
            poses: schedule.poses,
        })
    }

    fn __len__(&self) -> usize {
        self.poses.len()
    }

    fn __getitem__(&self, idx: usize) -> PyResult<PyPose> {
        self.poses
            .get(idx)
            .map(|p| PyPose { inner: p.clone() })
            .ok_or_else(|| PyValueError::new_err("pose index out of range"))
    }
}

/// Spherical-harmonic environment light.
#[pyclass(name = "Environment")]
struct PyEnvironment {
    inner: rotmvps::envlight::ShEnvironment,
}

#[pymethods]
impl PyEnvironment {
    /// Builds from per-channel coefficient lists ([[r...],[g...],[b...]]).
    #[new]
    fn new(coeffs: [Vec<f64>; 3]) -> PyResult<Self> {
        let nb = coeffs[0].len();
        if coeffs.iter().any(|c| c.len() != nb) || nb == 0 {
            return Err(PyValueError::new_err("channel coefficient counts differ"));
        }
        let l = (nb as f64).sqrt() as usize;
        if l * l != nb {
            return Err(PyValueError::new_err(
                "coefficient count must be a square (full bands)",
            ));
        }
        let mut env = rotmvps::envlight::ShEnvironment::zeros(l - 1);
        for c in 0..3 {
            env.coeffs[c].copy_from_slice(&coeffs[c]);
        }
        Ok(PyEnvironment { inner: env })
    }

    #[staticmethod]
    fn constant(l_max: usize, radiance: f64) -> Self {
        PyEnvironment {
            inner: rotmvps::envlight::ShEnvironment::constant(
                l_max,
                rotmvps::envlight::Rgb::from_element(radiance),
            ),
        }
    }

    #[getter]
    fn l_max(&self) -> usize {
        self.inner.l_max
    }

    /// Radiance toward a direction.
    fn eval(&self, direction: [f64; 3]) -> PyResult<[f64; 3]> {
        let d = Vector3::from_row_slice(&direction);
        let n = d.norm();
        if n < 1e-12 {
            return Err(PyValueError::new_err("zero direction"));
        }
        let v = rotmvps::envlight::eval_sh(&self.inner, &(d / n));
        Ok([v.x, v.y, v.z])
    }

    /// Writes the JSON form accepted by the relight command.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        let text = serde_json::to_string_pretty(&self.inner)
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }
}

/// The trainable scene: SDF, reflectance, environment, and renderer state.
#[pyclass(name = "Model")]
struct PyModel {
    scene: NeuralScene,
    store: ParamStore,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (l_max=1, samples_per_ray=16, near=0.5, far=4.5, seed=0))]
    fn new(l_max: usize, samples_per_ray: usize, near: f64, far: f64, seed: u64) -> PyResult<Self> {
        let scene = NeuralScene::new(NeuralSceneConfig {
            l_max,
            samples_per_ray,
            near,
            far,
            ..Default::default()
        })
        .map_err(err_py)?;
        let mut store = ParamStore::new();
        scene.init_params(&mut store, seed);
        Ok(PyModel { scene, store })
    }

    /// Loads parameters from a checkpoint written by training.
    #[staticmethod]
    #[pyo3(signature = (path, samples_per_ray=16, near=0.5, far=4.5))]
    fn load(path: PathBuf, samples_per_ray: usize, near: f64, far: f64) -> PyResult<Self> {
        let store = rotmvps::checkpoint::load_params(&path).map_err(err_py)?;
        let nb = store.get(rotmvps::neural::ENV_COEFFS).nrows();
        let l_max = (nb as f64).sqrt() as usize - 1;
        let scene = NeuralScene::new(NeuralSceneConfig {
            l_max,
            samples_per_ray,
            near,
            far,
            ..Default::default()
        })
        .map_err(err_py)?;
        Ok(PyModel { scene, store })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        rotmvps::checkpoint::save_params(&self.store, &path).map_err(err_py)
    }

    /// Hex content hash of all parameters (determinism checks).
    fn param_hash(&self) -> String {
        format!("{:016x}", rotmvps::checkpoint::param_hash(&self.store))
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Signed distance at each query point.
    fn sdf(&self, points: Vec<[f64; 3]>) -> Vec<f64> {
        let mat = ndarray::Array2::from_shape_fn((points.len(), 3), |(r, c)| points[r][c]);
        self.scene.sdf.sdf_batch(&self.store, &mat).to_vec()
    }

    /// Renders one view; returns (width, height, flat row-major RGB floats).
    #[pyo3(signature = (pose, size=32, fov_deg=30.0, eye=[0.0, -2.5, 0.0], seed=0))]
    fn render(
        &self,
        pose: PyPose,
        size: usize,
        fov_deg: f64,
        eye: [f64; 3],
        seed: u64,
    ) -> PyResult<(usize, usize, Vec<f64>)> {
        let cam = rotmvps::renderer::CameraIntrinsics::from_fov(size, fov_deg);
        let cam_pose = rotmvps::renderer::CameraPose::look_at(
            Vector3::from_row_slice(&eye),
            Vector3::zeros(),
            Vector3::z(),
        )
        .map_err(err_py)?;
        let img = self
            .scene
            .render_image(&self.store, &pose.inner, &cam, &cam_pose, seed)
            .map_err(err_py)?;
        let flat: Vec<f64> = img.rgb.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        Ok((img.width, img.height, flat))
    }

    /// Extracts the zero level set as (vertices, triangles).
    #[pyo3(signature = (resolution=64))]
    fn extract_mesh(&self, resolution: usize) -> PyResult<(Vec<[f64; 3]>, Vec<[usize; 3]>)> {
        let view = rotmvps::field::FieldView {
            net: &self.scene.sdf,
            store: &self.store,
        };
        let out = rotmvps::mesh::marching_cubes(
            &view,
            resolution,
            (Vector3::from_element(-1.1), Vector3::from_element(1.1)),
        )
        .map_err(err_py)?;
        let verts = out.mesh.vertices.iter().map(|v| [v.x, v.y, v.z]).collect();
        let tris = out.mesh.triangles.clone();
        Ok((verts, tris))
    }
}

/// Renders a synthetic capture dataset from a scene preset.
#[pyfunction]
#[pyo3(signature = (scene, out, schedule="4x25", size=64, fov=30.0, samples_per_ray=64, light_samples=128, seed=0))]
#[allow(clippy::too_many_arguments)]
fn synth(
    py: Python<'_>,
    scene: String,
    out: PathBuf,
    schedule: &str,
    size: usize,
    fov: f64,
    samples_per_ray: usize,
    light_samples: usize,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let summary = rotmvps::cli::cmd_synth(rotmvps::cli::SynthArgs {
        scene,
        schedule: schedule.to_string(),
        out,
        size,
        fov,
        samples_per_ray,
        light_samples,
        seed,
    })
    .map_err(err_py)?;
    json_to_py(py, &summary)
}

/// Runs stage-1 (and optionally stage-2) training on a dataset directory.
#[pyfunction]
#[pyo3(signature = (data, out, iters=2000, stage2=false, stage2_iters=500, seed=0,
    lambda_eik=0.1, lambda_occ=1.0, lambda_geo=1.0, no_geo_prior=false, no_rotation=false,
    batch_rays=512, samples_per_ray=24, l_max=2, lr=1e-4, checkpoint_every=500,
    eik_points=512, occ_rays=16, mc_dirs=128, near=0.5, far=4.5))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    data: PathBuf,
    out: PathBuf,
    iters: usize,
    stage2: bool,
    stage2_iters: usize,
    seed: u64,
    lambda_eik: f64,
    lambda_occ: f64,
    lambda_geo: f64,
    no_geo_prior: bool,
    no_rotation: bool,
    batch_rays: usize,
    samples_per_ray: usize,
    l_max: usize,
    lr: f64,
    checkpoint_every: usize,
    eik_points: usize,
    occ_rays: usize,
    mc_dirs: usize,
    near: f64,
    far: f64,
) -> PyResult<Py<PyAny>> {
    let summary = rotmvps::cli::cmd_train(rotmvps::cli::TrainArgs {
        data,
        out,
        iters,
        stage2,
        stage2_iters,
        seed,
        lambda_eik,
        lambda_occ,
        lambda_geo,
        no_geo_prior,
        no_rotation,
        batch_rays,
        samples_per_ray,
        l_max,
        lr,
        checkpoint_every,
        eik_points,
        occ_rays,
        mc_dirs,
        near,
        far,
    })
    .map_err(err_py)?;
    json_to_py(py, &summary)
}

/// Mesh extraction plus chamfer / PSNR / SSIM against a dataset.
#[pyfunction]
#[pyo3(signature = (data, ckpt, out, resolution=96, mesh_samples=30000, views=0,
    samples_per_ray=24, near=0.5, far=4.5, seed=0))]
#[allow(clippy::too_many_arguments)]
fn evaluate(
    py: Python<'_>,
    data: PathBuf,
    ckpt: PathBuf,
    out: PathBuf,
    resolution: usize,
    mesh_samples: usize,
    views: usize,
    samples_per_ray: usize,
    near: f64,
    far: f64,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let summary = rotmvps::cli::cmd_eval(rotmvps::cli::EvalArgs {
        data,
        ckpt,
        out,
        resolution,
        mesh_samples,
        views,
        samples_per_ray,
        near,
        far,
        seed,
    })
    .map_err(err_py)?;
    json_to_py(py, &summary)
}

/// Renders a checkpoint under a different environment light.
#[pyfunction]
#[pyo3(signature = (data, ckpt, env, out, views=0, samples_per_ray=24, near=0.5, far=4.5, seed=0))]
#[allow(clippy::too_many_arguments)]
fn relight(
    py: Python<'_>,
    data: PathBuf,
    ckpt: PathBuf,
    env: PathBuf,
    out: PathBuf,
    views: usize,
    samples_per_ray: usize,
    near: f64,
    far: f64,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let summary = rotmvps::cli::cmd_relight(rotmvps::cli::RelightArgs {
        data,
        ckpt,
        env,
        out,
        views,
        samples_per_ray,
        near,
        far,
        seed,
    })
    .map_err(err_py)?;
    json_to_py(py, &summary)
}

/// Symmetric chamfer distance between two point sets, in millimeters.
#[pyfunction]
#[pyo3(signature = (a, b, mm_per_unit=100.0))]
fn chamfer(a: Vec<[f64; 3]>, b: Vec<[f64; 3]>, mm_per_unit: f64) -> PyResult<f64> {
    let va: Vec<Vector3<f64>> = a.iter().map(|p| Vector3::from_row_slice(p)).collect();
    let vb: Vec<Vector3<f64>> = b.iter().map(|p| Vector3::from_row_slice(p)).collect();
    rotmvps::metrics::chamfer(&va, &vb, mm_per_unit).map_err(err_py)
}

#[pymodule]
fn rotmvps_py(m: &Bound<PyModule>) -> PyResult<()> {
    m.add_class::<PyPose>()?;
    m.add_class::<PySchedule>()?;
    m.add_class::<PyEnvironment>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(relight, m)?)?;
    m.add_function(wrap_pyfunction!(chamfer, m)?)?;
    Ok(())
}
