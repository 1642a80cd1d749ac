//! The trainable scene: neural SDF, per-point reflectance head, environment
//! coefficients, occlusion network, and specular correction maps, together
//! with the differentiable batch renderer that drives training.

use nalgebra::Vector3;
use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, ParamStore, Tape};
use crate::brdf::RHO_MIN;
use crate::envlight::ShEnvironment;
use crate::error::{Error, Result};
use crate::field::{NeuralSdf, SdfFieldSpec};
use crate::nets::{posenc, InitScheme, Mlp};
use crate::rig::{equivalent_ray, Ray, RigPose};
use crate::sh::{basis_count, eval_basis};

pub const ENV_COEFFS: &str = "env.coeffs";
pub const GDIR_SCALE: &str = "gdir.scale";
pub const GDIR_BIAS: &str = "gdir.bias";
pub const LN_S_INV: &str = "render.ln_s_inv";
pub const BACKGROUND: &str = "render.bg";
pub const BRDF_PREFIX: &str = "brdf";
pub const OCC_PREFIX: &str = "occ";
pub const GIND_PREFIX: &str = "gind";

#[derive(Debug, Clone)]
pub struct NeuralSceneConfig {
    pub field: SdfFieldSpec,
    /// Maximum spherical-harmonic band of the environment.
    pub l_max: usize,
    pub samples_per_ray: usize,
    pub near: f64,
    pub far: f64,
    /// Quadrature sizes for the in-graph light integrals.
    pub diffuse_dirs: usize,
    pub specular_dirs: usize,
    pub brdf_dirs: usize,
    /// Frequencies of the positional encodings feeding the reflectance and
    /// occlusion heads.
    pub head_freqs: usize,
}

impl Default for NeuralSceneConfig {
    fn default() -> Self {
        NeuralSceneConfig {
            field: SdfFieldSpec::default(),
            l_max: 3,
            samples_per_ray: 64,
            near: 0.5,
            far: 4.5,
            diffuse_dirs: 64,
            specular_dirs: 64,
            brdf_dirs: 32,
            head_freqs: 4,
        }
    }
}

impl NeuralSceneConfig {
    pub fn validate(&self) -> Result<()> {
        self.field.validate()?;
        if self.samples_per_ray < 2 {
            return Err(Error::validation("need at least 2 samples per ray"));
        }
        if self.near >= self.far {
            return Err(Error::validation("near must be less than far"));
        }
        Ok(())
    }

    fn head_in_dim(&self) -> usize {
        3 + 3 * 2 * self.head_freqs
    }
}

pub struct NeuralScene {
    pub cfg: NeuralSceneConfig,
    pub sdf: NeuralSdf,
    pub brdf_mlp: Mlp,
    pub occ_mlp: Mlp,
    pub gind_mlp: Mlp,
}

impl NeuralScene {
    pub fn new(cfg: NeuralSceneConfig) -> Result<Self> {
        cfg.validate()?;
        let sdf = NeuralSdf::new(cfg.field.clone())?;
        let head_in = cfg.head_in_dim();
        let brdf_mlp = Mlp::new(BRDF_PREFIX, head_in, &[64, 64], 5, 100.0);
        let occ_mlp = Mlp::new(OCC_PREFIX, head_in + 3, &[64, 64], 1, 100.0);
        let gind_mlp = Mlp::new(GIND_PREFIX, head_in + 3, &[64], 3, 100.0);
        Ok(NeuralScene {
            cfg,
            sdf,
            brdf_mlp,
            occ_mlp,
            gind_mlp,
        })
    }

    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        self.sdf.init_params(store, seed);
        self.brdf_mlp.init(store, &InitScheme::He, seed.wrapping_add(1));
        self.occ_mlp.init(store, &InitScheme::He, seed.wrapping_add(2));
        self.gind_mlp
            .init(store, &InitScheme::ZeroFinal, seed.wrapping_add(3));
        crate::features::init_lift_params(store, seed.wrapping_add(4));
        let nb = basis_count(self.cfg.l_max);
        let mut env = Array2::zeros((nb, 3));
        // constant gray environment at init
        for c in 0..3 {
            env[[0, c]] = 0.5 / 0.282_094_791_773_878_14;
        }
        store.add(ENV_COEFFS, env);
        store.add(GDIR_SCALE, Array2::ones((1, 3)));
        store.add(GDIR_BIAS, Array2::zeros((1, 3)));
        store.add(LN_S_INV, Array2::from_elem((1, 1), 64.0f64.ln()));
        // sigmoid(-8) is close enough to black
        store.add(BACKGROUND, Array2::from_elem((1, 3), -8.0));
    }

    pub fn env_from_store(&self, store: &ParamStore) -> ShEnvironment {
        let coeffs = store.get(ENV_COEFFS);
        let mut env = ShEnvironment::zeros(self.cfg.l_max);
        for k in 0..coeffs.nrows() {
            for c in 0..3 {
                env.coeffs[c][k] = coeffs[[k, c]];
            }
        }
        env
    }

    pub fn s_inv(&self, store: &ParamStore) -> f64 {
        store.get(LN_S_INV)[[0, 0]].exp()
    }

    /// Names of the SDF parameter blocks (the stage-2 freeze set).
    pub fn sdf_param_prefix(&self) -> &'static str {
        crate::field::SDF_PREFIX
    }

    fn head_features(&self, points: &Array2<f64>) -> Array2<f64> {
        let pe = posenc(points, self.cfg.head_freqs);
        ndarray::concatenate(ndarray::Axis(1), &[points.view(), pe.view()]).unwrap()
    }
}

/// Rays of one frame (all share a capture pose), already grouped.
pub struct FrameRays {
    pub pose: RigPose,
    pub rays: Vec<Ray>,
}

/// Graph handles produced by one differentiable render pass.
pub struct GraphRender {
    /// (B, 3) composited linear color.
    pub color: NodeId,
    /// (B, 1) accumulated opacity.
    pub opacity: NodeId,
    /// (P, 3) spatial gradients at every ray sample and extra eikonal point.
    pub gradients: NodeId,
    /// (B, 3) expected surface point per ray.
    pub exp_point: NodeId,
    /// (B, 3) opacity-weighted mean reflection direction (normalized).
    pub exp_reflection: NodeId,
    /// (B, 1) occlusion probability predicted at the expected surface point.
    pub occ_pred: NodeId,
    /// (B, 32) latent feature of the field at the expected surface point.
    pub latent: NodeId,
    /// Plain values for supervision targets (detached from the graph).
    pub exp_point_values: Array2<f64>,
    pub exp_reflection_values: Array2<f64>,
    pub opacity_values: Vec<f64>,
}

struct QuadTables {
    dirs: Array2<f64>,
    /// per-frame SH basis at the rotated directions
    frame_basis: Vec<Array2<f64>>,
    identity_basis: Array2<f64>,
}

fn quad_tables(l_max: usize, count: usize, rotations: &[crate::rig::Rotation]) -> QuadTables {
    let rule = crate::quad::fibonacci_sphere(count);
    let mut dirs = Array2::zeros((count, 3));
    for (i, d) in rule.dirs.iter().enumerate() {
        dirs[[i, 0]] = d.x;
        dirs[[i, 1]] = d.y;
        dirs[[i, 2]] = d.z;
    }
    let nb = basis_count(l_max);
    let basis_for = |rot: Option<&crate::rig::Rotation>| -> Array2<f64> {
        let mut b = Array2::zeros((count, nb));
        for (i, d) in rule.dirs.iter().enumerate() {
            let q = match rot {
                Some(r) => r.apply(d),
                None => *d,
            };
            for (k, v) in eval_basis(l_max, &q).iter().enumerate() {
                b[[i, k]] = *v;
            }
        }
        b
    };
    QuadTables {
        dirs,
        frame_basis: rotations.iter().map(|r| basis_for(Some(r))).collect(),
        identity_basis: basis_for(None),
    }
}

impl NeuralScene {
    /// Differentiable render of a grouped ray batch. `extra_eik_points`
    /// are appended to the gradient output for the eikonal term.
    pub fn render_graph(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        frames: &[FrameRays],
        extra_eik_points: Option<&Array2<f64>>,
        jitter_seed: u64,
    ) -> Result<GraphRender> {
        let k = self.cfg.samples_per_ray;
        let b: usize = frames.iter().map(|f| f.rays.len()).sum();
        if b == 0 {
            return Err(Error::validation("empty ray batch"));
        }
        let kf = k - 1;

        // stratified sample positions for every ray, in the object frame
        let mut rng = ChaCha8Rng::seed_from_u64(jitter_seed);
        let span = (self.cfg.far - self.cfg.near) / k as f64;
        let mut points = Array2::zeros((b * k, 3));
        let mut view_dirs = Array2::zeros((b * kf, 3));
        let mut front_rows = Vec::with_capacity(b * kf);
        let mut frame_front_ranges = Vec::with_capacity(frames.len());
        let mut ray_idx = 0usize;
        for frame in frames {
            let start = ray_idx * kf;
            for ray in &frame.rays {
                let eq = equivalent_ray(ray, &frame.pose.r_b);
                for i in 0..k {
                    let t = self.cfg.near + span * (i as f64 + rng.random_range(0.0..1.0));
                    let p = eq.at(t);
                    let row = ray_idx * k + i;
                    points[[row, 0]] = p.x;
                    points[[row, 1]] = p.y;
                    points[[row, 2]] = p.z;
                    if i < kf {
                        front_rows.push(row);
                        let fr = ray_idx * kf + i;
                        view_dirs[[fr, 0]] = -eq.direction.x;
                        view_dirs[[fr, 1]] = -eq.direction.y;
                        view_dirs[[fr, 2]] = -eq.direction.z;
                    }
                }
                ray_idx += 1;
            }
            frame_front_ranges.push(start..ray_idx * kf);
        }

        // one field forward over ray samples plus eikonal extras
        let all_points = match extra_eik_points {
            Some(extra) => {
                ndarray::concatenate(ndarray::Axis(0), &[points.view(), extra.view()]).unwrap()
            }
            None => points.clone(),
        };
        let (sdf_all, grad_all, _) = self.sdf.forward_graph_jet(tape, store, &all_points);
        let sdf_rays = tape.select_rows(sdf_all, &(0..b * k).collect::<Vec<_>>());

        // compositing weights
        let ln_s = tape.param(store, LN_S_INV);
        let s_inv = tape.exp(ln_s);
        let sdf_bk = tape.reshape(sdf_rays, b, k);
        let scaled = tape.mul_scalar_t(sdf_bk, s_inv);
        let phi = tape.sigmoid(scaled);
        let phi_front = tape.slice_cols(phi, 0, kf);
        let phi_back = tape.slice_cols(phi, 1, k);
        let num = tape.sub(phi_front, phi_back);
        let den = tape.add_scalar(phi_front, 1e-7);
        let ratio = tape.div(num, den);
        let alpha = tape.relu(ratio);
        let neg_alpha = tape.neg(alpha);
        let one_minus = tape.add_scalar(neg_alpha, 1.0);
        let trans = tape.excl_cumprod(one_minus);
        let w = tape.mul(trans, alpha);
        let opacity = tape.sum_axis1(w);

        // shading geometry at the front samples
        let grad_front = tape.select_rows(grad_all, &front_rows);
        let g2 = tape.mul(grad_front, grad_front);
        let g2s = tape.sum_axis1(g2);
        let g2e = tape.add_scalar(g2s, 1e-12);
        let gnorm = tape.sqrt(g2e);
        let normal = tape.div_col(grad_front, gnorm);
        let wo = tape.constant(view_dirs.clone());
        let n_dot_o_terms = tape.mul(normal, wo);
        let dot_o = tape.sum_axis1(n_dot_o_terms);
        let two_dot = tape.mul_scalar(dot_o, 2.0);
        let n_scaled = tape.mul_col(normal, two_dot);
        let refl = tape.sub(n_scaled, wo);

        // reflectance head
        let front_points = points.select(ndarray::Axis(0), &front_rows);
        let head_in = tape.constant(self.head_features(&front_points));
        let (brdf_out, _) = self.brdf_mlp.forward_graph(tape, store, head_in, None);
        let albedo_raw = tape.slice_cols(brdf_out, 0, 3);
        let albedo = tape.sigmoid(albedo_raw);
        let metal_raw = tape.slice_cols(brdf_out, 3, 4);
        let metallic = tape.sigmoid(metal_raw);
        let rho_raw = tape.slice_cols(brdf_out, 4, 5);
        let rho_sig = tape.sigmoid(rho_raw);
        let rho_scaled = tape.mul_scalar(rho_sig, 1.0 - RHO_MIN);
        let rho = tape.add_scalar(rho_scaled, RHO_MIN);
        let alpha_g = tape.powi(rho, 2);
        let alpha2 = tape.powi(rho, 4);

        // light tables
        let p_front = b * kf;
        let rotations: Vec<_> = frames.iter().map(|f| f.pose.light_rotation()).collect();
        let diffuse = quad_tables(self.cfg.l_max, self.cfg.diffuse_dirs, &rotations);
        let specular = quad_tables(self.cfg.l_max, self.cfg.specular_dirs, &rotations);
        let env = tape.param(store, ENV_COEFFS);

        // diffuse irradiance
        let dirs_d = tape.constant(diffuse.dirs.t().to_owned());
        let cos_d_raw = tape.matmul(normal, dirs_d);
        let cos_d = tape.relu(cos_d_raw);
        let mut irr_parts = Vec::new();
        for (fi, range) in frame_front_ranges.iter().enumerate() {
            let rows: Vec<usize> = range.clone().collect();
            let cos_f = tape.select_rows(cos_d, &rows);
            let basis = tape.constant(diffuse.frame_basis[fi].clone());
            let table_raw = tape.matmul(basis, env);
            let table = tape.relu(table_raw);
            irr_parts.push(tape.matmul(cos_f, table));
        }
        let irr_raw = tape.concat_rows(&irr_parts);
        let irr = tape.mul_scalar(
            irr_raw,
            4.0 * std::f64::consts::PI / self.cfg.diffuse_dirs as f64,
        );
        let neg_m = tape.neg(metallic);
        let one_minus_m = tape.add_scalar(neg_m, 1.0);
        let diff_scale = tape.mul_scalar(one_minus_m, 1.0 / std::f64::consts::PI);
        let alb_irr = tape.mul(albedo, irr);
        let c_diff = tape.mul_col(alb_irr, diff_scale);

        // specular lobe: self-normalized GGX-weighted average of the light
        let dirs_s = tape.constant(specular.dirs.t().to_owned());
        let cos_s_raw = tape.matmul(refl, dirs_s);
        let cos_s = tape.relu(cos_s_raw);
        let ggx = |t: &mut Tape, cosm: NodeId, a2: NodeId| -> NodeId {
            let c2 = t.powi(cosm, 2);
            let a2m1 = t.add_scalar(a2, -1.0);
            let scaled = t.mul_col(c2, a2m1);
            let denom = t.add_scalar(scaled, 1.0);
            let denom2 = t.powi(denom, -2);
            let d = t.mul_col(denom2, a2);
            t.mul_scalar(d, 1.0 / std::f64::consts::PI)
        };
        let d_s = ggx(tape, cos_s, alpha2);
        let lw = tape.mul(d_s, cos_s);
        let lw_sum = tape.sum_axis1(lw);
        let lw_norm = tape.add_scalar(lw_sum, 1e-9);
        let mut direct_parts = Vec::new();
        let mut indirect_parts = Vec::new();
        let id_basis = tape.constant(specular.identity_basis.clone());
        let id_table_raw = tape.matmul(id_basis, env);
        let id_table = tape.relu(id_table_raw);
        for (fi, range) in frame_front_ranges.iter().enumerate() {
            let rows: Vec<usize> = range.clone().collect();
            let lw_f = tape.select_rows(lw, &rows);
            let norm_f = tape.select_rows(lw_norm, &rows);
            let basis = tape.constant(specular.frame_basis[fi].clone());
            let table_raw = tape.matmul(basis, env);
            let table = tape.relu(table_raw);
            let acc = tape.matmul(lw_f, table);
            direct_parts.push(tape.div_col(acc, norm_f));
            let acc_i = tape.matmul(lw_f, id_table);
            indirect_parts.push(tape.div_col(acc_i, norm_f));
        }
        let l_direct = tape.concat_rows(&direct_parts);
        let l_indirect_base = tape.concat_rows(&indirect_parts);

        // learned correction maps and occlusion blending
        let gdir_scale = tape.param(store, GDIR_SCALE);
        let gdir_bias = tape.param(store, GDIR_BIAS);
        let scaled_dir = tape.mul_row(l_direct, gdir_scale);
        let l_dir_mapped = tape.add_row(scaled_dir, gdir_bias);
        let gi_in = tape.concat_cols(&[l_indirect_base, head_in]);
        let (gi_delta, _) = self.gind_mlp.forward_graph(tape, store, gi_in, None);
        let l_ind_mapped = tape.add(l_indirect_base, gi_delta);
        let occ_in = tape.concat_cols(&[head_in, refl]);
        let (occ_raw, _) = self.occ_mlp.forward_graph(tape, store, occ_in, None);
        let s_occ = tape.sigmoid(occ_raw);
        let neg_s = tape.neg(s_occ);
        let one_minus_s = tape.add_scalar(neg_s, 1.0);
        let dir_part = tape.mul_col(l_dir_mapped, one_minus_s);
        let ind_part = tape.mul_col(l_ind_mapped, s_occ);
        let l_spec_light = tape.add(dir_part, ind_part);

        // split-sum reflectance factor over a fixed sphere rule
        let brule = crate::quad::fibonacci_sphere(self.cfg.brdf_dirs);
        let sb = brule.dirs.len();
        let mut h_mat = [
            Array2::zeros((p_front, sb)),
            Array2::zeros((p_front, sb)),
            Array2::zeros((p_front, sb)),
        ];
        let mut k5_mat = Array2::zeros((p_front, sb));
        for r in 0..p_front {
            let wo_v = Vector3::new(view_dirs[[r, 0]], view_dirs[[r, 1]], view_dirs[[r, 2]]);
            for (j, wj) in brule.dirs.iter().enumerate() {
                let h = (wj + wo_v).try_normalize(1e-12).unwrap_or(wo_v);
                h_mat[0][[r, j]] = h.x;
                h_mat[1][[r, j]] = h.y;
                h_mat[2][[r, j]] = h.z;
                let c = wo_v.dot(&h).clamp(0.0, 1.0);
                k5_mat[[r, j]] = (1.0 - c).powi(5);
            }
        }
        let mut dirs_b = Array2::zeros((3, sb));
        for (j, d) in brule.dirs.iter().enumerate() {
            dirs_b[[0, j]] = d.x;
            dirs_b[[1, j]] = d.y;
            dirs_b[[2, j]] = d.z;
        }
        let nx = tape.slice_cols(normal, 0, 1);
        let ny = tape.slice_cols(normal, 1, 2);
        let nz = tape.slice_cols(normal, 2, 3);
        let hx = tape.constant(h_mat[0].clone());
        let hy = tape.constant(h_mat[1].clone());
        let hz = tape.constant(h_mat[2].clone());
        let nh_x = tape.mul_col(hx, nx);
        let nh_y = tape.mul_col(hy, ny);
        let nh_z = tape.mul_col(hz, nz);
        let nh_xy = tape.add(nh_x, nh_y);
        let nh_raw = tape.add(nh_xy, nh_z);
        let nh = tape.relu(nh_raw);
        let d_h = ggx(tape, nh, alpha2);
        let dirs_b_node = tape.constant(dirs_b);
        let mu_i_raw = tape.matmul(normal, dirs_b_node);
        let mu_i = tape.relu(mu_i_raw);
        let mu_o_raw = tape.relu(dot_o);
        let mu_o = tape.add_scalar(mu_o_raw, 1e-6);
        let g1 = |t: &mut Tape, mu_col: NodeId, a2: NodeId| -> NodeId {
            // mu is (P,1): broadcast-free path
            let mu2 = t.powi(mu_col, 2);
            let neg_a2 = t.neg(a2);
            let one_m_a2 = t.add_scalar(neg_a2, 1.0);
            let term = t.mul(one_m_a2, mu2);
            let sum = t.add(a2, term);
            let root = t.sqrt(sum);
            let denom = t.add(mu_col, root);
            let num = t.mul_scalar(mu_col, 2.0);
            t.div(num, denom)
        };
        let g1_mat = |t: &mut Tape, mu_mat: NodeId, a2: NodeId| -> NodeId {
            let mu2 = t.powi(mu_mat, 2);
            let neg_a2 = t.neg(a2);
            let one_m_a2 = t.add_scalar(neg_a2, 1.0);
            let term = t.mul_col(mu2, one_m_a2);
            // a2 broadcast over columns
            let zeros = t.mul_scalar(mu2, 0.0);
            let ones = t.add_scalar(zeros, 1.0);
            let a2_full = t.mul_col(ones, a2);
            let sum = t.add(a2_full, term);
            let root = t.sqrt(sum);
            let denom = t.add(mu_mat, root);
            let num = t.mul_scalar(mu_mat, 2.0);
            t.div(num, denom)
        };
        let a_g2 = alpha_g_sq(tape, alpha_g);
        let g1_i = g1_mat(tape, mu_i, a_g2);
        let g1_o = g1(tape, mu_o, a_g2);
        let g_all = tape.mul_col(g1_i, g1_o);
        let dg_masked = tape.mul(d_h, g_all);
        let inv_mu_o = tape.powi(mu_o, -1);
        let quarter = tape.mul_scalar(inv_mu_o, 0.25 * 4.0 * std::f64::consts::PI / sb as f64);
        let common = tape.mul_col(dg_masked, quarter);
        let f0_metal = tape.mul_col(albedo, metallic);
        let f0_diel_scaled = tape.mul_scalar(one_minus_m, 0.04);
        let mut factor_parts = Vec::new();
        let k5 = tape.constant(k5_mat);
        for ch in 0..3 {
            let f0_m_c = tape.slice_cols(f0_metal, ch, ch + 1);
            let f0_c = tape.add(f0_m_c, f0_diel_scaled);
            let neg_f0 = tape.neg(f0_c);
            let one_m_f0 = tape.add_scalar(neg_f0, 1.0);
            let k5_scaled = tape.mul_col(k5, one_m_f0);
            let zeros = tape.mul_scalar(k5, 0.0);
            let ones = tape.add_scalar(zeros, 1.0);
            let f0_full = tape.mul_col(ones, f0_c);
            let fresnel = tape.add(k5_scaled, f0_full);
            let weighted = tape.mul(common, fresnel);
            factor_parts.push(tape.sum_axis1(weighted));
        }
        let factor = tape.concat_cols(&factor_parts);
        let c_spec = tape.mul(l_spec_light, factor);
        let radiance = tape.add(c_diff, c_spec);

        // composite per channel
        let mut color_parts = Vec::new();
        for ch in 0..3 {
            let c_ch = tape.slice_cols(radiance, ch, ch + 1);
            let c_bk = tape.reshape(c_ch, b, kf);
            let weighted = tape.mul(w, c_bk);
            color_parts.push(tape.sum_axis1(weighted));
        }
        let fg_color = tape.concat_cols(&color_parts);
        let bg_raw = tape.param(store, BACKGROUND);
        let bg = tape.sigmoid(bg_raw);
        let neg_op = tape.neg(opacity);
        let resid = tape.add_scalar(neg_op, 1.0);
        let ones_b3 = {
            let z = tape.mul_scalar(fg_color, 0.0);
            tape.add_scalar(z, 1.0)
        };
        let bg_full = tape.mul_row(ones_b3, bg);
        let bg_part = tape.mul_col(bg_full, resid);
        let color = tape.add(fg_color, bg_part);

        // expected surface point and mean reflection direction per ray
        let op_eps = tape.add_scalar(opacity, 1e-8);
        let mut exp_parts = Vec::new();
        for axis in 0..3 {
            let mut pax = Array2::zeros((b, kf));
            for (fr, row) in front_rows.iter().enumerate() {
                pax[[fr / kf, fr % kf]] = points[[*row, axis]];
            }
            let pax_node = tape.constant(pax);
            let weighted = tape.mul(w, pax_node);
            exp_parts.push(tape.sum_axis1(weighted));
        }
        let exp_num = tape.concat_cols(&exp_parts);
        let exp_point = tape.div_col(exp_num, op_eps);
        let mut refl_parts = Vec::new();
        for axis in 0..3 {
            let r_ch = tape.slice_cols(refl, axis, axis + 1);
            let r_bk = tape.reshape(r_ch, b, kf);
            let weighted = tape.mul(w, r_bk);
            refl_parts.push(tape.sum_axis1(weighted));
        }
        let refl_num = tape.concat_cols(&refl_parts);
        let refl_mean = tape.div_col(refl_num, op_eps);
        let r2 = tape.mul(refl_mean, refl_mean);
        let r2s = tape.sum_axis1(r2);
        let r2e = tape.add_scalar(r2s, 1e-9);
        let rlen = tape.sqrt(r2e);
        let exp_reflection = tape.div_col(refl_mean, rlen);

        // occlusion prediction and latent feature at the expected point
        let exp_pe = crate::nets::posenc_graph(tape, exp_point, self.cfg.head_freqs);
        let exp_head = tape.concat_cols(&[exp_point, exp_pe, exp_reflection]);
        let (occ_exp_raw, _) = self.occ_mlp.forward_graph(tape, store, exp_head, None);
        let occ_pred = tape.sigmoid(occ_exp_raw);
        let (_, latent) = self.sdf.forward_graph_points(tape, store, exp_point);

        let exp_point_values = tape.value(exp_point).clone();
        let exp_reflection_values = tape.value(exp_reflection).clone();
        let opacity_values = tape.value(opacity).column(0).to_vec();

        Ok(GraphRender {
            color,
            opacity,
            gradients: grad_all,
            exp_point,
            exp_reflection,
            occ_pred,
            latent,
            exp_point_values,
            exp_reflection_values,
            opacity_values,
        })
    }

    /// Forward-only neural render of a full image (used by checkpoint
    /// evaluation and relighting). Chunks rays through the graph renderer and
    /// reads the values.
    pub fn render_image(
        &self,
        store: &ParamStore,
        pose: &RigPose,
        cam: &crate::renderer::CameraIntrinsics,
        cam_pose: &crate::renderer::CameraPose,
        seed: u64,
    ) -> Result<crate::renderer::RenderedImage> {
        let mut rgb = Vec::with_capacity(cam.width * cam.height);
        let mut opacity = Vec::with_capacity(cam.width * cam.height);
        let chunk = 1024;
        let mut rays = Vec::with_capacity(chunk);
        let flush = |rays: &mut Vec<Ray>,
                         rgb: &mut Vec<crate::envlight::Rgb>,
                         opacity: &mut Vec<f64>,
                         chunk_index: u64|
         -> Result<()> {
            if rays.is_empty() {
                return Ok(());
            }
            let frame = FrameRays {
                pose: pose.clone(),
                rays: std::mem::take(rays),
            };
            let mut tape = Tape::new();
            let out = self.render_graph(
                &mut tape,
                store,
                std::slice::from_ref(&frame),
                None,
                seed.wrapping_add(chunk_index),
            )?;
            let colors = tape.value(out.color);
            for r in 0..colors.nrows() {
                rgb.push(crate::envlight::Rgb::new(
                    colors[[r, 0]],
                    colors[[r, 1]],
                    colors[[r, 2]],
                ));
            }
            opacity.extend(out.opacity_values.iter().copied());
            Ok(())
        };
        let mut chunk_index = 0;
        for y in 0..cam.height {
            for x in 0..cam.width {
                rays.push(cam_pose.pixel_ray(cam, x, y)?);
                if rays.len() == chunk {
                    flush(&mut rays, &mut rgb, &mut opacity, chunk_index)?;
                    chunk_index += 1;
                }
            }
        }
        flush(&mut rays, &mut rgb, &mut opacity, chunk_index)?;
        Ok(crate::renderer::RenderedImage {
            width: cam.width,
            height: cam.height,
            rgb,
            opacity,
        })
    }
}

fn alpha_g_sq(tape: &mut Tape, alpha_g: NodeId) -> NodeId {
    tape.powi(alpha_g, 2)
}

/// Fixed surface points of one frame, used by the reflectance refinement
/// stage after the shape is frozen.
pub struct FrameSurface {
    pub pose: RigPose,
    /// (B, 3) surface points in the object frame.
    pub points: Array2<f64>,
    /// (B, 3) unit surface normals.
    pub normals: Array2<f64>,
    /// (B, 3) unit directions toward the camera, object frame.
    pub view_dirs: Array2<f64>,
}

impl NeuralScene {
    /// Monte-Carlo shading of fixed surface points: the rendering integral is
    /// evaluated with a uniform sphere rule instead of the split-sum
    /// factorization, keeping reflectance and environment in the graph.
    /// Returns the (B, 3) shaded color.
    pub fn shade_surface_graph(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        frames: &[FrameSurface],
        mc_dirs: usize,
    ) -> Result<NodeId> {
        let b: usize = frames.iter().map(|f| f.points.nrows()).sum();
        if b == 0 {
            return Err(Error::validation("empty surface batch"));
        }
        let mut points = Array2::zeros((b, 3));
        let mut normals = Array2::zeros((b, 3));
        let mut view_dirs = Array2::zeros((b, 3));
        let mut ranges = Vec::with_capacity(frames.len());
        let mut row = 0usize;
        for f in frames {
            let n = f.points.nrows();
            if f.normals.nrows() != n || f.view_dirs.nrows() != n {
                return Err(Error::validation("surface frame arrays disagree"));
            }
            points
                .slice_mut(ndarray::s![row..row + n, ..])
                .assign(&f.points);
            normals
                .slice_mut(ndarray::s![row..row + n, ..])
                .assign(&f.normals);
            view_dirs
                .slice_mut(ndarray::s![row..row + n, ..])
                .assign(&f.view_dirs);
            ranges.push(row..row + n);
            row += n;
        }

        let head_in = tape.constant(self.head_features(&points));
        let (brdf_out, _) = self.brdf_mlp.forward_graph(tape, store, head_in, None);
        let albedo_raw = tape.slice_cols(brdf_out, 0, 3);
        let albedo = tape.sigmoid(albedo_raw);
        let metal_raw = tape.slice_cols(brdf_out, 3, 4);
        let metallic = tape.sigmoid(metal_raw);
        let rho_raw = tape.slice_cols(brdf_out, 4, 5);
        let rho_sig = tape.sigmoid(rho_raw);
        let rho_scaled = tape.mul_scalar(rho_sig, 1.0 - RHO_MIN);
        let rho = tape.add_scalar(rho_scaled, RHO_MIN);
        let alpha2 = tape.powi(rho, 4);

        let rule = crate::quad::fibonacci_sphere(mc_dirs);
        let s = rule.dirs.len();
        // constant per-(point, direction) geometry
        let mut cos_i_m = Array2::zeros((b, s));
        let mut nh_m = Array2::zeros((b, s));
        let mut k5_m = Array2::zeros((b, s));
        let mut mu_o_m = Array2::zeros((b, 1));
        for r in 0..b {
            let n = Vector3::new(normals[[r, 0]], normals[[r, 1]], normals[[r, 2]]);
            let wo = Vector3::new(view_dirs[[r, 0]], view_dirs[[r, 1]], view_dirs[[r, 2]]);
            mu_o_m[[r, 0]] = n.dot(&wo).max(0.0) + 1e-6;
            for (j, wj) in rule.dirs.iter().enumerate() {
                cos_i_m[[r, j]] = n.dot(wj).max(0.0);
                let h = (wj + wo).try_normalize(1e-9).unwrap_or(n);
                nh_m[[r, j]] = n.dot(&h).max(0.0);
                k5_m[[r, j]] = (1.0 - wo.dot(&h).clamp(0.0, 1.0)).powi(5);
            }
        }
        let cos_i = tape.constant(cos_i_m.clone());
        let nh = tape.constant(nh_m);
        let k5 = tape.constant(k5_m);
        let mu_o = tape.constant(mu_o_m);

        // GGX density at the half vectors
        let nh2 = tape.powi(nh, 2);
        let a2m1 = tape.add_scalar(alpha2, -1.0);
        let scaled = tape.mul_col(nh2, a2m1);
        let denom = tape.add_scalar(scaled, 1.0);
        let denom2 = tape.powi(denom, -2);
        let d_h_raw = tape.mul_col(denom2, alpha2);
        let d_h = tape.mul_scalar(d_h_raw, 1.0 / std::f64::consts::PI);
        // Smith visibility, one-directional terms multiplied
        let g_term = |t: &mut Tape, mu: NodeId, a2: NodeId| -> NodeId {
            let mu2 = t.powi(mu, 2);
            let neg_a2 = t.neg(a2);
            let one_m_a2 = t.add_scalar(neg_a2, 1.0);
            let term = t.mul_col(mu2, one_m_a2);
            let zeros = t.mul_scalar(mu2, 0.0);
            let ones = t.add_scalar(zeros, 1.0);
            let a2_full = t.mul_col(ones, a2);
            let sum = t.add(a2_full, term);
            let root = t.sqrt(sum);
            let denom = t.add(mu, root);
            let num = t.mul_scalar(mu, 2.0);
            t.div(num, denom)
        };
        let g1_i = g_term(tape, cos_i, alpha2);
        let mu_o_full = {
            let zeros = tape.mul_scalar(cos_i, 0.0);
            let ones = tape.add_scalar(zeros, 1.0);
            tape.mul_col(ones, mu_o)
        };
        let g1_o = g_term(tape, mu_o_full, alpha2);
        let g_all = tape.mul(g1_i, g1_o);
        let dg = tape.mul(d_h, g_all);
        let inv_mu_o = tape.powi(mu_o, -1);
        let quarter = tape.mul_scalar(inv_mu_o, 0.25);
        // specular throughput with the incident cosine already cancelled
        let common = tape.mul_col(dg, quarter);

        let neg_m = tape.neg(metallic);
        let one_minus_m = tape.add_scalar(neg_m, 1.0);
        let diff_scale = tape.mul_scalar(one_minus_m, 1.0 / std::f64::consts::PI);
        let alb_scaled = tape.mul_col(albedo, diff_scale);
        let f0_metal = tape.mul_col(albedo, metallic);
        let f0_diel = tape.mul_scalar(one_minus_m, crate::brdf::F0_DIELECTRIC);

        let rotations: Vec<_> = frames.iter().map(|f| f.pose.light_rotation()).collect();
        let tables = quad_tables(self.cfg.l_max, mc_dirs, &rotations);
        let env = tape.param(store, ENV_COEFFS);
        let mut out_parts = Vec::with_capacity(frames.len());
        for (fi, range) in ranges.iter().enumerate() {
            let rows: Vec<usize> = range.clone().collect();
            let basis = tape.constant(tables.frame_basis[fi].clone());
            let table_raw = tape.matmul(basis, env);
            let table = tape.relu(table_raw);
            let cos_f = tape.select_rows(cos_i, &rows);
            let common_f = tape.select_rows(common, &rows);
            let k5_f = tape.select_rows(k5, &rows);
            let alb_f = tape.select_rows(alb_scaled, &rows);
            let mut chan = Vec::with_capacity(3);
            for c in 0..3 {
                let l_c = tape.slice_cols(table, c, c + 1);
                let diff_acc = tape.matmul(cos_f, l_c);
                let alb_c = tape.slice_cols(alb_f, c, c + 1);
                let diffuse = tape.mul(diff_acc, alb_c);
                let f0_m_c = tape.slice_cols(f0_metal, c, c + 1);
                let f0_c = tape.add(f0_m_c, f0_diel);
                let f0_f = tape.select_rows(f0_c, &rows);
                let neg_f0 = tape.neg(f0_f);
                let one_m_f0 = tape.add_scalar(neg_f0, 1.0);
                let k5_scaled = tape.mul_col(k5_f, one_m_f0);
                let zeros = tape.mul_scalar(k5_f, 0.0);
                let ones = tape.add_scalar(zeros, 1.0);
                let f0_full = tape.mul_col(ones, f0_f);
                let fresnel = tape.add(k5_scaled, f0_full);
                let spec_w = tape.mul(common_f, fresnel);
                let spec_acc = tape.matmul(spec_w, l_c);
                let sum = tape.add(diffuse, spec_acc);
                chan.push(sum);
            }
            let rgb = tape.concat_cols(&chan);
            out_parts.push(rgb);
        }
        let total = tape.concat_rows(&out_parts);
        Ok(tape.mul_scalar(total, 4.0 * std::f64::consts::PI / s as f64))
    }
}
