//! Per-view geometry feature maps that supervise the latent branch of the
//! SDF: channel selection by variance, a learned lift into world space, an
//! oracle provider built from ground-truth normals, and a binary file format
//! for externally computed maps.

use std::path::Path;

use nalgebra::Vector3;
use ndarray::{Array2, Array3, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::nets::{InitScheme, Mlp};

pub const RAW_CHANNELS: usize = 384;
pub const GEO_CHANNELS: usize = 32;
pub const FEATURE_MAGIC: u32 = 0x524D_4631;

/// Encoder output for one view: (height, width, 384), channel-last.
#[derive(Debug, Clone)]
pub struct RawFeatureMap {
    pub view: usize,
    pub data: Array3<f64>,
}

impl RawFeatureMap {
    pub fn validate(&self) -> Result<()> {
        if self.data.dim().2 != RAW_CHANNELS {
            return Err(Error::validation(format!(
                "raw feature map needs {RAW_CHANNELS} channels, got {}",
                self.data.dim().2
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("raw feature map entries".into()));
        }
        Ok(())
    }
}

/// World-space geometry features for one view: (height, width, 32).
#[derive(Debug, Clone)]
pub struct GeometryFeatureMap {
    pub view: usize,
    pub data: Array3<f64>,
    pub view_dir: Vector3<f64>,
}

/// Population variance per channel over all pixels; retains the `k` channels
/// with the largest variance in descending order, ties broken by lower index.
pub fn topk_variance_select(map: &RawFeatureMap, k: usize) -> Result<(Array3<f64>, Vec<usize>)> {
    let (h, w, c) = map.data.dim();
    if k > c {
        return Err(Error::validation(format!(
            "cannot select {k} channels out of {c}"
        )));
    }
    let pixels = (h * w) as f64;
    let mut variances = Vec::with_capacity(c);
    for ch in 0..c {
        let lane = map.data.index_axis(Axis(2), ch);
        let mean = lane.sum() / pixels;
        let var = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / pixels;
        variances.push((ch, var));
    }
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|a, b| {
        variances[*b]
            .1
            .partial_cmp(&variances[*a].1)
            .unwrap()
            .then(a.cmp(b))
    });
    let selected: Vec<usize> = order.into_iter().take(k).collect();
    let mut out = Array3::zeros((h, w, k));
    for (slot, ch) in selected.iter().enumerate() {
        out.index_axis_mut(Axis(2), slot)
            .assign(&map.data.index_axis(Axis(2), *ch));
    }
    Ok((out, selected))
}

pub const LIFT_PREFIX: &str = "lift";

/// The learned map from selected features plus view direction to world-space
/// features. Residual with a zeroed final layer, so it starts as identity.
pub fn lift_mlp() -> Mlp {
    Mlp::new(LIFT_PREFIX, GEO_CHANNELS + 3, &[64, 64], GEO_CHANNELS, 100.0)
}

pub fn init_lift_params(store: &mut ParamStore, seed: u64) {
    lift_mlp().init(store, &InitScheme::ZeroFinal, seed);
}

fn lift_input(selected: &Array2<f64>, view_dir: &Vector3<f64>) -> Array2<f64> {
    let p = selected.nrows();
    let mut x = Array2::zeros((p, GEO_CHANNELS + 3));
    x.slice_mut(ndarray::s![.., 0..GEO_CHANNELS]).assign(selected);
    for i in 0..p {
        x[[i, GEO_CHANNELS]] = view_dir.x;
        x[[i, GEO_CHANNELS + 1]] = view_dir.y;
        x[[i, GEO_CHANNELS + 2]] = view_dir.z;
    }
    x
}

/// Applies the lift map per pixel: output = input + mlp([input, v]).
pub fn to_world_features(
    selected: &Array3<f64>,
    view: usize,
    view_dir: &Vector3<f64>,
    store: &ParamStore,
) -> Result<GeometryFeatureMap> {
    let (h, w, c) = selected.dim();
    if c != GEO_CHANNELS {
        return Err(Error::validation(format!(
            "lift map expects {GEO_CHANNELS} channels, got {c}"
        )));
    }
    if (view_dir.norm() - 1.0).abs() > 1e-6 {
        return Err(Error::validation("view direction must be unit length"));
    }
    let flat = selected
        .to_shape((h * w, c))
        .map_err(|_| Error::validation("feature map is not contiguous"))?
        .to_owned();
    let x = lift_input(&flat, view_dir);
    let (delta, _) = lift_mlp().forward_plain(store, &x);
    let out_flat = &flat + &delta;
    let data = out_flat
        .into_shape_with_order((h, w, c))
        .expect("shape preserved");
    Ok(GeometryFeatureMap {
        view,
        data,
        view_dir: *view_dir,
    })
}

/// Graph version for training: rows of selected features (constant) lifted
/// through the live lift-map parameters.
pub fn lift_graph(
    tape: &mut Tape,
    store: &ParamStore,
    selected_rows: &Array2<f64>,
    view_dirs: &Array2<f64>,
) -> NodeId {
    let p = selected_rows.nrows();
    let mut x = Array2::zeros((p, GEO_CHANNELS + 3));
    x.slice_mut(ndarray::s![.., 0..GEO_CHANNELS]).assign(selected_rows);
    x.slice_mut(ndarray::s![.., GEO_CHANNELS..]).assign(view_dirs);
    let xc = tape.constant(x);
    let (delta, _) = lift_mlp().forward_graph(tape, store, xc, None);
    let base = tape.constant(selected_rows.clone());
    tape.add(base, delta)
}

/// Deterministic 384-channel embedding of a ground-truth normal map: a fixed
/// random projection of the normal and its sinusoidal encodings. Stands in
/// for the external pretrained encoder. Masked pixels are zero.
pub fn oracle_features(
    normals: &[Vector3<f64>],
    mask: &[bool],
    width: usize,
    height: usize,
    view: usize,
) -> Result<RawFeatureMap> {
    if normals.len() != width * height || mask.len() != width * height {
        return Err(Error::validation("normal/mask size mismatch"));
    }
    let freq = 4;
    let in_dim = 3 + 3 * 2 * freq;
    let projection = oracle_projection(in_dim);
    let mut data = Array3::zeros((height, width, RAW_CHANNELS));
    for (idx, inside) in mask.iter().enumerate() {
        if !inside {
            continue;
        }
        let n = normals[idx];
        let mut v = Vec::with_capacity(in_dim);
        v.extend_from_slice(&[n.x, n.y, n.z]);
        for axis in [n.x, n.y, n.z] {
            for k in 0..freq {
                let arg = axis * std::f64::consts::PI * (1 << k) as f64;
                v.push(arg.sin());
                v.push(arg.cos());
            }
        }
        let y = idx / width;
        let x = idx % width;
        for ch in 0..RAW_CHANNELS {
            let mut acc = 0.0;
            for (j, vj) in v.iter().enumerate() {
                acc += projection[[ch, j]] * vj;
            }
            data[[y, x, ch]] = acc;
        }
    }
    Ok(RawFeatureMap { view, data })
}

fn oracle_projection(in_dim: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0fea_7042);
    let scale = 1.0 / (in_dim as f64).sqrt();
    Array2::from_shape_fn((RAW_CHANNELS, in_dim), |_| {
        rng.sample::<f64, _>(rand_distr::StandardNormal) * scale
    })
}

/// Writes one view's raw feature map in the binary exchange format:
/// u32 LE magic, height, width, channels; then f32 LE values in row-major
/// pixel order, channel-last.
pub fn save_feature_map(path: &Path, map: &RawFeatureMap) -> Result<()> {
    map.validate()?;
    let (h, w, c) = map.data.dim();
    let mut bytes = Vec::with_capacity(16 + h * w * c * 4);
    for v in [FEATURE_MAGIC, h as u32, w as u32, c as u32] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for v in map.data.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Loads all `features_*.bin` files in a directory, keyed by the view index
/// embedded in the file name, and checks dimensions against the manifest.
pub fn load_feature_maps(
    dir: &Path,
    expected_height: usize,
    expected_width: usize,
) -> Result<Vec<RawFeatureMap>> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("features_") && n.ends_with(".bin"))
        })
        .collect();
    paths.sort();
    for path in paths {
        let name = path.file_name().unwrap().to_str().unwrap().to_string();
        let view: usize = name
            .trim_start_matches("features_")
            .trim_end_matches(".bin")
            .parse()
            .map_err(|_| Error::validation(format!("bad feature file name: {name}")))?;
        let bytes = std::fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        if bytes.len() < 16 {
            return Err(Error::validation(format!("{name}: truncated header")));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap());
        if word(0) != FEATURE_MAGIC {
            return Err(Error::validation(format!("{name}: bad magic")));
        }
        let (h, w, c) = (word(1) as usize, word(2) as usize, word(3) as usize);
        if h != expected_height || w != expected_width {
            return Err(Error::validation(format!(
                "{name}: {h}x{w} does not match manifest {expected_height}x{expected_width}"
            )));
        }
        if c != RAW_CHANNELS {
            return Err(Error::validation(format!("{name}: {c} channels")));
        }
        let expected_bytes = 16 + h * w * c * 4;
        if bytes.len() != expected_bytes {
            return Err(Error::validation(format!(
                "{name}: {} bytes, expected {expected_bytes}",
                bytes.len()
            )));
        }
        let mut data = Array3::zeros((h, w, c));
        for (i, v) in data.iter_mut().enumerate() {
            let off = 16 + i * 4;
            *v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64;
        }
        let map = RawFeatureMap { view, data };
        map.validate()?;
        out.push(map);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_map(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> RawFeatureMap {
        RawFeatureMap {
            view: 0,
            data: Array3::from_shape_fn((h, w, RAW_CHANNELS), |(y, x, c)| f(y, x, c)),
        }
    }

    #[test]
    fn constant_map_selects_first_channels_by_index() {
        let map = tiny_map(2, 2, |_, _, c| c as f64);
        let (_, idx) = topk_variance_select(&map, 5).unwrap();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn highest_variance_channel_selected_first() {
        // channel 2 takes values {0, 1, 2, 3} over four pixels:
        // mean 1.5, population variance (2.25+0.25+0.25+2.25)/4 = 1.25
        let map = tiny_map(2, 2, |y, x, c| if c == 2 { (2 * y + x) as f64 } else { 0.0 });
        let (sel, idx) = topk_variance_select(&map, 4).unwrap();
        assert_eq!(idx[0], 2);
        assert_eq!(sel[[1, 1, 0]], 3.0);
        let lane = map.data.index_axis(Axis(2), 2);
        let mean = lane.sum() / 4.0;
        let var = lane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!((var - 1.25).abs() < 1e-12);
    }

    #[test]
    fn selection_ignores_per_channel_offsets() {
        // distinct per-channel variances so ranking has no exact ties
        let base = tiny_map(3, 3, |y, x, c| ((y * 3 + x) as f64).sin() * (c + 1) as f64 * 0.01);
        let shifted = RawFeatureMap {
            view: 0,
            data: &base.data + &Array3::from_shape_fn(base.data.dim(), |(_, _, c)| c as f64 * 2.0),
        };
        let (_, a) = topk_variance_select(&base, 8).unwrap();
        let (_, b) = topk_variance_select(&shifted, 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn variance_sequence_is_non_increasing_subset() {
        let map = tiny_map(4, 4, |y, x, c| ((y + 2 * x) as f64 * (c as f64 + 0.3)).cos());
        let (_, idx) = topk_variance_select(&map, 32).unwrap();
        assert_eq!(idx.len(), 32);
        let var_of = |ch: usize| {
            let lane = map.data.index_axis(Axis(2), ch);
            let mean = lane.sum() / 16.0;
            lane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0
        };
        for pair in idx.windows(2) {
            assert!(var_of(pair[0]) >= var_of(pair[1]) - 1e-15);
        }
        assert!(idx.iter().all(|c| *c < RAW_CHANNELS));
        assert!(topk_variance_select(&map, RAW_CHANNELS + 1).is_err());
    }

    #[test]
    fn identity_initialized_lift_is_identity() {
        let mut store = ParamStore::new();
        init_lift_params(&mut store, 3);
        let sel = Array3::from_shape_fn((2, 3, GEO_CHANNELS), |(y, x, c)| {
            (y + x + c) as f64 * 0.1 - 0.5
        });
        let v = Vector3::new(0.0, -1.0, 0.0);
        let out = to_world_features(&sel, 0, &v, &store).unwrap();
        let diff = (&out.data - &sel).mapv(f64::abs).sum();
        assert!(diff < 1e-6, "identity deviation: {diff}");
    }

    #[test]
    fn view_direction_matters_once_weights_are_random() {
        let mlp = lift_mlp();
        let mut store = ParamStore::new();
        mlp.init(&mut store, &InitScheme::He, 9);
        let sel = Array3::from_shape_fn((1, 2, GEO_CHANNELS), |(_, x, c)| (x + c) as f64 * 0.05);
        let a = to_world_features(&sel, 0, &Vector3::z(), &store).unwrap();
        let b = to_world_features(&sel, 0, &Vector3::x(), &store).unwrap();
        let diff = (&a.data - &b.data).mapv(f64::abs).sum();
        assert!(diff > 1e-6, "view direction had no effect");
    }

    #[test]
    fn lift_graph_matches_plain_path() {
        let mut store = ParamStore::new();
        let mlp = lift_mlp();
        mlp.init(&mut store, &InitScheme::He, 21);
        let sel = Array2::from_shape_fn((5, GEO_CHANNELS), |(i, j)| ((i * 7 + j) as f64).sin());
        let vd = Array2::from_shape_fn((5, 3), |(_, j)| if j == 2 { 1.0 } else { 0.0 });
        let mut tape = Tape::new();
        let node = lift_graph(&mut tape, &store, &sel, &vd);
        let sel3 = sel
            .clone()
            .into_shape_with_order((1, 5, GEO_CHANNELS))
            .unwrap();
        let plain = to_world_features(&sel3, 0, &Vector3::z(), &store).unwrap();
        let flat = plain.data.to_shape((5, GEO_CHANNELS)).unwrap().to_owned();
        let diff = (tape.value(node) - &flat).mapv(f64::abs).sum();
        assert!(diff < 1e-12);
    }

    fn toy_normals(w: usize, h: usize) -> (Vec<Vector3<f64>>, Vec<bool>) {
        let normals: Vec<Vector3<f64>> = (0..w * h)
            .map(|i| {
                Vector3::new((i as f64 * 0.3).sin(), (i as f64 * 0.7).cos(), 1.0).normalize()
            })
            .collect();
        let mask: Vec<bool> = (0..w * h).map(|i| i % 5 != 0).collect();
        (normals, mask)
    }

    #[test]
    fn oracle_is_deterministic_masked_and_local() {
        let (normals, mask) = toy_normals(4, 3);
        let a = oracle_features(&normals, &mask, 4, 3, 0).unwrap();
        let b = oracle_features(&normals, &mask, 4, 3, 0).unwrap();
        assert_eq!(a.data, b.data);
        // masked pixel 0 must be all zeros
        assert!(a.data.index_axis(Axis(0), 0).index_axis(Axis(0), 0).iter().all(|v| *v == 0.0));
        // flipping one normal changes only that pixel
        let mut normals2 = normals.clone();
        normals2[7] = Vector3::new(0.0, 0.0, -1.0);
        let c = oracle_features(&normals2, &mask, 4, 3, 0).unwrap();
        for idx in 0..12 {
            let (y, x) = (idx / 4, idx % 4);
            let da = a.data.index_axis(Axis(0), y);
            let la = da.index_axis(Axis(0), x);
            let dc = c.data.index_axis(Axis(0), y);
            let lc = dc.index_axis(Axis(0), x);
            let diff: f64 = la.iter().zip(lc.iter()).map(|(p, q)| (p - q).abs()).sum();
            if idx == 7 {
                assert!(diff > 1e-9);
            } else {
                assert_eq!(diff, 0.0);
            }
        }
    }

    #[test]
    fn feature_files_round_trip_and_validate() {
        let dir = tempdir().unwrap();
        let (normals, mask) = toy_normals(5, 4);
        let map = oracle_features(&normals, &mask, 5, 4, 3).unwrap();
        save_feature_map(&dir.path().join("features_003.bin"), &map).unwrap();
        let loaded = load_feature_maps(dir.path(), 4, 5).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].view, 3);
        // f32 storage quantizes
        let diff = (&loaded[0].data - &map.data).mapv(f64::abs).iter().fold(0.0f64, |a, b| a.max(*b));
        assert!(diff < 1e-6);
        // dimension mismatch against the manifest is named
        let err = load_feature_maps(dir.path(), 7, 5).unwrap_err();
        assert!(err.to_string().contains("features_003.bin"));
    }
}
