//! Small MLPs over the autodiff tape: initialization schemes, plain forward
//! passes, and forward passes carrying spatial-derivative jets.

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{sigmoid, NodeId, ParamStore, Tape};

/// Weight initialization recipe for one network.
#[derive(Debug, Clone)]
pub enum InitScheme {
    /// He-style N(0, sqrt(2/fan_in)), zero bias.
    He,
    /// SDF geometric initialization toward a sphere of the given radius.
    /// `pe_cols` marks input columns holding positional-encoding features,
    /// which are zeroed in the first layer.
    Geometric { radius: f64, pe_cols: (usize, usize) },
    /// He for hidden layers, zeros for the final layer (zero output at init).
    ZeroFinal,
}

/// Fully connected network; parameters live in a `ParamStore` under
/// `{prefix}.w{i}` / `{prefix}.b{i}`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub prefix: String,
    pub dims: Vec<usize>, // in, hidden..., out
    pub beta: f64,        // softplus sharpness
}

impl Mlp {
    pub fn new(prefix: &str, in_dim: usize, hidden: &[usize], out_dim: usize, beta: f64) -> Self {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(in_dim);
        dims.extend_from_slice(hidden);
        dims.push(out_dim);
        Mlp {
            prefix: prefix.to_string(),
            dims,
            beta,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    fn w_name(&self, i: usize) -> String {
        format!("{}.w{}", self.prefix, i)
    }

    fn b_name(&self, i: usize) -> String {
        format!("{}.b{}", self.prefix, i)
    }

    pub fn init(&self, store: &mut ParamStore, scheme: &InitScheme, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = self.num_layers();
        for i in 0..layers {
            let (fan_in, fan_out) = (self.dims[i], self.dims[i + 1]);
            let last = i == layers - 1;
            let (mut w, mut b) = match scheme {
                InitScheme::He => (
                    gaussian(&mut rng, fan_in, fan_out, 0.0, (2.0 / fan_in as f64).sqrt()),
                    Array2::zeros((1, fan_out)),
                ),
                InitScheme::ZeroFinal => {
                    if last {
                        (Array2::zeros((fan_in, fan_out)), Array2::zeros((1, fan_out)))
                    } else {
                        (
                            gaussian(&mut rng, fan_in, fan_out, 0.0, (2.0 / fan_in as f64).sqrt()),
                            Array2::zeros((1, fan_out)),
                        )
                    }
                }
                InitScheme::Geometric { radius, pe_cols } => {
                    if last {
                        let mean = (std::f64::consts::PI / fan_in as f64).sqrt();
                        let w = gaussian(&mut rng, fan_in, fan_out, mean, 1e-4);
                        let b = Array2::from_elem((1, fan_out), -radius);
                        (w, b)
                    } else {
                        let mut w = gaussian(
                            &mut rng,
                            fan_in,
                            fan_out,
                            0.0,
                            (2.0 / fan_out as f64).sqrt(),
                        );
                        if i == 0 {
                            // positional-encoding inputs start switched off so
                            // the init stays a clean sphere
                            for r in pe_cols.0..pe_cols.1 {
                                w.row_mut(r).fill(0.0);
                            }
                        }
                        (w, Array2::zeros((1, fan_out)))
                    }
                }
            };
            // keep shapes even for degenerate dims
            if w.is_empty() {
                w = Array2::zeros((fan_in, fan_out));
            }
            if b.is_empty() {
                b = Array2::zeros((1, fan_out));
            }
            store.add(&self.w_name(i), w);
            store.add(&self.b_name(i), b);
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.num_layers())
            .flat_map(|i| [self.w_name(i), self.b_name(i)])
            .collect()
    }

    /// Plain forward; returns the output and every hidden activation.
    pub fn forward_plain(&self, store: &ParamStore, x: &Array2<f64>) -> (Array2<f64>, Vec<Array2<f64>>) {
        let mut h = x.clone();
        let mut acts = Vec::new();
        let layers = self.num_layers();
        for i in 0..layers {
            let w = store.get(&self.w_name(i));
            let b = store.get(&self.b_name(i));
            let mut z = h.dot(w);
            z += &b.broadcast(z.dim()).unwrap().to_owned();
            if i < layers - 1 {
                h = z.mapv(|v| softplus_beta(v, self.beta));
                acts.push(h.clone());
            } else {
                h = z;
            }
        }
        (h, acts)
    }

    /// Plain forward propagating spatial jets: `jac[k]` holds the derivative of
    /// every activation with respect to input column group k.
    pub fn forward_plain_jet(
        &self,
        store: &ParamStore,
        x: &Array2<f64>,
        jac_in: &[Array2<f64>],
    ) -> (Array2<f64>, Vec<Array2<f64>>, Vec<Array2<f64>>) {
        let mut h = x.clone();
        let mut jac: Vec<Array2<f64>> = jac_in.to_vec();
        let mut acts = Vec::new();
        let layers = self.num_layers();
        for i in 0..layers {
            let w = store.get(&self.w_name(i));
            let b = store.get(&self.b_name(i));
            let mut z = h.dot(w);
            z += &b.broadcast(z.dim()).unwrap().to_owned();
            for j in jac.iter_mut() {
                *j = j.dot(w);
            }
            if i < layers - 1 {
                let dact = z.mapv(|v| sigmoid(self.beta * v));
                h = z.mapv(|v| softplus_beta(v, self.beta));
                for j in jac.iter_mut() {
                    *j = &*j * &dact;
                }
                acts.push(h.clone());
            } else {
                h = z;
            }
        }
        (h, jac, acts)
    }

    /// Graph forward; optionally exposes the activation of hidden layer
    /// `tap_layer` (1-based).
    pub fn forward_graph(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        tap_layer: Option<usize>,
    ) -> (NodeId, Option<NodeId>) {
        let mut h = x;
        let mut tap = None;
        let layers = self.num_layers();
        for i in 0..layers {
            let w = tape.param(store, &self.w_name(i));
            let b = tape.param(store, &self.b_name(i));
            let z = tape.matmul(h, w);
            let z = tape.add_row(z, b);
            if i < layers - 1 {
                h = tape.softplus_beta(z, self.beta);
                if tap_layer == Some(i + 1) {
                    tap = Some(h);
                }
            } else {
                h = z;
            }
        }
        (h, tap)
    }

    /// Graph forward carrying three spatial-derivative channels, so parameter
    /// gradients flow through quantities built from the spatial gradient
    /// (normals, eikonal residuals).
    pub fn forward_graph_jet(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        jac_in: [NodeId; 3],
        tap_layer: Option<usize>,
    ) -> (NodeId, [NodeId; 3], Option<NodeId>) {
        let mut h = x;
        let mut jac = jac_in;
        let mut tap = None;
        let layers = self.num_layers();
        for i in 0..layers {
            let w = tape.param(store, &self.w_name(i));
            let b = tape.param(store, &self.b_name(i));
            let z = tape.matmul(h, w);
            let z = tape.add_row(z, b);
            for j in jac.iter_mut() {
                *j = tape.matmul(*j, w);
            }
            if i < layers - 1 {
                h = tape.softplus_beta(z, self.beta);
                let zb = tape.mul_scalar(z, self.beta);
                let dact = tape.sigmoid(zb);
                for j in jac.iter_mut() {
                    *j = tape.mul(*j, dact);
                }
                if tap_layer == Some(i + 1) {
                    tap = Some(h);
                }
            } else {
                h = z;
            }
        }
        (h, jac, tap)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, mean: f64, std: f64) -> Array2<f64> {
    let dist = Normal::new(mean, std.max(1e-12)).unwrap();
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

pub fn softplus_beta(x: f64, beta: f64) -> f64 {
    let bx = beta * x;
    if bx > 30.0 {
        x
    } else {
        bx.exp().ln_1p() / beta
    }
}

/// Frequency positional encoding: for each input column and k < freqs,
/// appends sin(2^k pi x) and cos(2^k pi x).
pub fn posenc_dim(in_dim: usize, freqs: usize) -> usize {
    in_dim * 2 * freqs
}

pub fn posenc(x: &Array2<f64>, freqs: usize) -> Array2<f64> {
    let (p, d) = x.dim();
    let mut out = Array2::zeros((p, posenc_dim(d, freqs)));
    for i in 0..p {
        let mut c = 0;
        for j in 0..d {
            for k in 0..freqs {
                let f = (1 << k) as f64 * std::f64::consts::PI;
                out[[i, c]] = (f * x[[i, j]]).sin();
                out[[i, c + 1]] = (f * x[[i, j]]).cos();
                c += 2;
            }
        }
    }
    out
}

/// Jet of the positional encoding with respect to input column `axis`.
pub fn posenc_jet(x: &Array2<f64>, freqs: usize, axis: usize) -> Array2<f64> {
    let (p, d) = x.dim();
    let mut out = Array2::zeros((p, posenc_dim(d, freqs)));
    for i in 0..p {
        let mut c = 0;
        for j in 0..d {
            for k in 0..freqs {
                let f = (1 << k) as f64 * std::f64::consts::PI;
                if j == axis {
                    out[[i, c]] = f * (f * x[[i, j]]).cos();
                    out[[i, c + 1]] = -f * (f * x[[i, j]]).sin();
                }
                c += 2;
            }
        }
    }
    out
}

/// Graph-side positional encoding for tensor inputs (points that carry
/// gradient, e.g. expected surface points).
pub fn posenc_graph(tape: &mut Tape, x: NodeId, freqs: usize) -> NodeId {
    let d = tape.value(x).ncols();
    let mut parts = Vec::with_capacity(d * 2 * freqs);
    for j in 0..d {
        let col = tape.slice_cols(x, j, j + 1);
        for k in 0..freqs {
            let f = (1 << k) as f64 * std::f64::consts::PI;
            let fx = tape.mul_scalar(col, f);
            let s = tape.sin(fx);
            let c = tape.cos(fx);
            parts.push(s);
            parts.push(c);
        }
    }
    tape.concat_cols(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn plain_and_graph_forward_agree() {
        let mlp = Mlp::new("t", 5, &[16, 8], 2, 10.0);
        let mut store = ParamStore::new();
        mlp.init(&mut store, &InitScheme::He, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Array2<f64> = Array::from_shape_fn((7, 5), |_| rng.random_range(-1.0..1.0));

        let (plain, _) = mlp.forward_plain(&store, &x);
        let mut tape = Tape::new();
        let xid = tape.constant(x);
        let (out, _) = mlp.forward_graph(&mut tape, &store, xid, None);
        let diff = (&plain - tape.value(out)).mapv(f64::abs).sum();
        assert!(diff < 1e-12);
    }

    #[test]
    fn jet_matches_finite_differences() {
        let mlp = Mlp::new("t", 3, &[16, 16], 1, 10.0);
        let mut store = ParamStore::new();
        mlp.init(&mut store, &InitScheme::He, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Array2<f64> = Array::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let jac_in = [
            jet_basis(4, 3, 0),
            jet_basis(4, 3, 1),
            jet_basis(4, 3, 2),
        ];
        let (_, jac, _) = mlp.forward_plain_jet(&store, &x, &jac_in);
        let h = 1e-6;
        for axis in 0..3 {
            for row in 0..4 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[[row, axis]] += h;
                xm[[row, axis]] -= h;
                let (fp, _) = mlp.forward_plain(&store, &xp);
                let (fm, _) = mlp.forward_plain(&store, &xm);
                let fd = (fp[[row, 0]] - fm[[row, 0]]) / (2.0 * h);
                let an = jac[axis][[row, 0]];
                assert!((fd - an).abs() < 1e-6 * fd.abs().max(1.0), "{fd} vs {an}");
            }
        }
    }

    fn jet_basis(p: usize, d: usize, axis: usize) -> Array2<f64> {
        let mut j = Array2::zeros((p, d));
        for i in 0..p {
            j[[i, axis]] = 1.0;
        }
        j
    }

    #[test]
    fn zero_final_outputs_zero() {
        let mlp = Mlp::new("z", 4, &[8], 3, 10.0);
        let mut store = ParamStore::new();
        mlp.init(&mut store, &InitScheme::ZeroFinal, 1);
        let x = Array2::from_elem((2, 4), 0.7);
        let (out, _) = mlp.forward_plain(&store, &x);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn posenc_jet_matches_fd() {
        let x = ndarray::arr2(&[[0.3, -0.2, 0.6]]);
        let freqs = 4;
        let j = posenc_jet(&x, freqs, 1);
        let h = 1e-7;
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[[0, 1]] += h;
        xm[[0, 1]] -= h;
        let fd = (&posenc(&xp, freqs) - &posenc(&xm, freqs)) / (2.0 * h);
        let err = (&fd - &j).mapv(f64::abs).sum();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn posenc_graph_matches_plain() {
        let x = ndarray::arr2(&[[0.1, 0.9], [-0.4, 0.2]]);
        let plain = posenc(&x, 3);
        let mut tape = Tape::new();
        let xid = tape.constant(x);
        let g = posenc_graph(&mut tape, xid, 3);
        let diff = (&plain - tape.value(g)).mapv(f64::abs).sum();
        assert!(diff < 1e-12);
    }
}
