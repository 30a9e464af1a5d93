//! Two bidirectional LSTM layers followed by two dense layers.
//!
//! Batches are time-major matrices: row `t·B + b` holds timestep `t` of
//! sequence `b`. Gate order inside the `4H` gate block is input, forget,
//! candidate, output.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::LocalizeError;

pub const N_TENSORS: usize = 16;
const LEAKY_SLOPE: f64 = 0.01;
const D1_W: usize = 12;
const D1_B: usize = 13;
const D2_W: usize = 14;
const D2_B: usize = 15;

#[derive(Debug, Clone, PartialEq)]
pub struct BilstmModel {
    pub f_input: usize,
    /// Hidden width per direction, `7·f_input`.
    pub hidden: usize,
    pub rng_seed: u64,
    /// See [`tensor_names`] for the order; biases are `1 × n`.
    pub tensors: Vec<Array2<f64>>,
}

fn lstm_index(layer: usize, backward: bool) -> usize {
    (layer * 2 + backward as usize) * 3
}

pub fn tensor_names() -> Vec<String> {
    let mut out = Vec::with_capacity(N_TENSORS);
    for layer in 1..=2 {
        for dir in ["fwd", "bwd"] {
            for t in ["w_x", "w_h", "b"] {
                out.push(format!("l{layer}.{dir}.{t}"));
            }
        }
    }
    for t in ["dense1.w", "dense1.b", "dense2.w", "dense2.b"] {
        out.push(t.to_string());
    }
    out
}

/// Expected tensor shapes for a given input width.
pub fn tensor_shapes(f_input: usize) -> Vec<(usize, usize)> {
    let h = 7 * f_input;
    let mut out = Vec::with_capacity(N_TENSORS);
    for layer in 0..2 {
        let input = if layer == 0 { f_input } else { 2 * h };
        for _ in 0..2 {
            out.extend([(input, 4 * h), (h, 4 * h), (1, 4 * h)]);
        }
    }
    out.extend([(2 * h, 14 * f_input), (1, 14 * f_input), (14 * f_input, 2), (1, 2)]);
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

struct DirCache {
    /// Activated gates, `TB × 4H`.
    gates: Array2<f64>,
    tanh_c: Array2<f64>,
    h: Array2<f64>,
    h_prev: Array2<f64>,
    c_prev: Array2<f64>,
}

struct LayerCache {
    input: Array2<f64>,
    fwd: DirCache,
    bwd: DirCache,
}

struct Cache {
    layers: Vec<LayerCache>,
    l2_out: Array2<f64>,
    a1: Array2<f64>,
    y1: Array2<f64>,
    out: Array2<f64>,
}

fn step_order(t_len: usize, reverse: bool) -> impl DoubleEndedIterator<Item = usize> {
    (0..t_len).map(move |s| if reverse { t_len - 1 - s } else { s })
}

fn dir_forward(
    x: &Array2<f64>,
    w_x: &Array2<f64>,
    w_h: &Array2<f64>,
    bias: &Array2<f64>,
    t_len: usize,
    batch: usize,
    reverse: bool,
) -> DirCache {
    let h = w_h.nrows();
    let rows = t_len * batch;
    let mut z = x.dot(w_x);
    z += &bias.row(0);
    let mut cache = DirCache {
        gates: Array2::zeros((rows, 4 * h)),
        tanh_c: Array2::zeros((rows, h)),
        h: Array2::zeros((rows, h)),
        h_prev: Array2::zeros((rows, h)),
        c_prev: Array2::zeros((rows, h)),
    };
    let mut h_prev = Array2::<f64>::zeros((batch, h));
    let mut c_prev = Array2::<f64>::zeros((batch, h));
    for t in step_order(t_len, reverse) {
        let r0 = t * batch;
        let mut zt = z.slice(s![r0..r0 + batch, ..]).to_owned();
        general_mat_mul(1.0, &h_prev, w_h, 1.0, &mut zt);
        cache.h_prev.slice_mut(s![r0..r0 + batch, ..]).assign(&h_prev);
        cache.c_prev.slice_mut(s![r0..r0 + batch, ..]).assign(&c_prev);
        for b in 0..batch {
            let r = r0 + b;
            for j in 0..h {
                let i = sigmoid(zt[[b, j]]);
                let f = sigmoid(zt[[b, h + j]]);
                let g = zt[[b, 2 * h + j]].tanh();
                let o = sigmoid(zt[[b, 3 * h + j]]);
                let c = f * c_prev[[b, j]] + i * g;
                let tc = c.tanh();
                cache.gates[[r, j]] = i;
                cache.gates[[r, h + j]] = f;
                cache.gates[[r, 2 * h + j]] = g;
                cache.gates[[r, 3 * h + j]] = o;
                cache.tanh_c[[r, j]] = tc;
                cache.h[[r, j]] = o * tc;
                c_prev[[b, j]] = c;
                h_prev[[b, j]] = o * tc;
            }
        }
    }
    cache
}

struct DirGrad {
    w_x: Array2<f64>,
    w_h: Array2<f64>,
    b: Array2<f64>,
    d_input: Array2<f64>,
}

#[allow(clippy::too_many_arguments)]
fn dir_backward(
    x: &Array2<f64>,
    cache: &DirCache,
    w_x: &Array2<f64>,
    w_h: &Array2<f64>,
    d_out: ndarray::ArrayView2<f64>,
    t_len: usize,
    batch: usize,
    reverse: bool,
) -> DirGrad {
    let h = w_h.nrows();
    let mut dz = Array2::<f64>::zeros((t_len * batch, 4 * h));
    let mut dh_next = Array2::<f64>::zeros((batch, h));
    let mut dc_next = Array2::<f64>::zeros((batch, h));
    let w_h_t = w_h.t();
    for t in step_order(t_len, reverse).rev() {
        let r0 = t * batch;
        for b in 0..batch {
            let r = r0 + b;
            for j in 0..h {
                let dh = d_out[[r, j]] + dh_next[[b, j]];
                let i = cache.gates[[r, j]];
                let f = cache.gates[[r, h + j]];
                let g = cache.gates[[r, 2 * h + j]];
                let o = cache.gates[[r, 3 * h + j]];
                let tc = cache.tanh_c[[r, j]];
                let dc = dh * o * (1.0 - tc * tc) + dc_next[[b, j]];
                dc_next[[b, j]] = dc * f;
                dz[[r, j]] = dc * g * i * (1.0 - i);
                dz[[r, h + j]] = dc * cache.c_prev[[r, j]] * f * (1.0 - f);
                dz[[r, 2 * h + j]] = dc * i * (1.0 - g * g);
                dz[[r, 3 * h + j]] = dh * tc * o * (1.0 - o);
            }
        }
        general_mat_mul(1.0, &dz.slice(s![r0..r0 + batch, ..]), &w_h_t, 0.0, &mut dh_next);
    }
    DirGrad {
        w_x: x.t().dot(&dz),
        w_h: cache.h_prev.t().dot(&dz),
        b: dz.sum_axis(Axis(0)).insert_axis(Axis(0)),
        d_input: dz.dot(&w_x.t()),
    }
}

/// Loss, per-sequence losses and parameter gradients of one batch.
pub struct BatchGrad {
    pub loss: f64,
    pub per_sequence: Vec<f64>,
    pub grads: Vec<Array2<f64>>,
}

impl BilstmModel {
    pub fn new(f_input: usize, rng_seed: u64) -> Self {
        assert!(f_input > 0, "f_input must be positive");
        let h = 7 * f_input;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let shapes = tensor_shapes(f_input);
        let mut tensors = Vec::with_capacity(N_TENSORS);
        for (k, &(r, c)) in shapes.iter().enumerate() {
            let bound = if k < D1_W {
                1.0 / (h as f64).sqrt()
            } else if k == D1_W || k == D1_B {
                1.0 / (2.0 * h as f64).sqrt()
            } else {
                1.0 / (14.0 * f_input as f64).sqrt()
            };
            let mut t = Array2::from_shape_fn((r, c), |_| rng.random_range(-bound..bound));
            if k < D1_W && k % 3 == 2 {
                // Forget-gate bias starts at +1.
                t.slice_mut(s![.., h..2 * h]).mapv_inplace(|v| v + 1.0);
            }
            tensors.push(t);
        }
        BilstmModel {
            f_input,
            hidden: h,
            rng_seed,
            tensors,
        }
    }

    pub fn zeros(f_input: usize) -> Self {
        let tensors = tensor_shapes(f_input).into_iter().map(Array2::zeros).collect();
        BilstmModel {
            f_input,
            hidden: 7 * f_input,
            rng_seed: 0,
            tensors,
        }
    }

    /// Rebuilds a model from tensors, checking every shape.
    pub fn from_tensors(f_input: usize, rng_seed: u64, tensors: Vec<Array2<f64>>) -> Result<Self, LocalizeError> {
        let shapes = tensor_shapes(f_input);
        if tensors.len() != shapes.len() {
            return Err(LocalizeError::Checkpoint(format!(
                "expected {} tensors, found {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (k, (t, s)) in tensors.iter().zip(&shapes).enumerate() {
            if t.dim() != *s {
                return Err(LocalizeError::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    tensor_names()[k],
                    t.dim(),
                    s
                )));
            }
        }
        Ok(BilstmModel {
            f_input,
            hidden: 7 * f_input,
            rng_seed,
            tensors,
        })
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    fn forward_cached(&self, x: &Array2<f64>, t_len: usize, batch: usize) -> Cache {
        let h = self.hidden;
        let mut input = x.clone();
        let mut layers = Vec::with_capacity(2);
        for layer in 0..2 {
            let p = |bwd| {
                let k = lstm_index(layer, bwd);
                (&self.tensors[k], &self.tensors[k + 1], &self.tensors[k + 2])
            };
            let (wx, wh, b) = p(false);
            let fwd = dir_forward(&input, wx, wh, b, t_len, batch, false);
            let (wx, wh, b) = p(true);
            let bwd = dir_forward(&input, wx, wh, b, t_len, batch, true);
            let mut out = Array2::zeros((t_len * batch, 2 * h));
            out.slice_mut(s![.., ..h]).assign(&fwd.h);
            out.slice_mut(s![.., h..]).assign(&bwd.h);
            layers.push(LayerCache { input, fwd, bwd });
            input = out;
        }
        let l2_out = input;
        let mut a1 = l2_out.dot(&self.tensors[D1_W]);
        a1 += &self.tensors[D1_B].row(0);
        let y1 = a1.mapv(leaky);
        let mut out = y1.dot(&self.tensors[D2_W]);
        out += &self.tensors[D2_B].row(0);
        Cache {
            layers,
            l2_out,
            a1,
            y1,
            out,
        }
    }

    /// Batched forward pass over a time-major `(t_len·batch) × f_input` matrix.
    pub fn forward_batch(&self, x: &Array2<f64>, t_len: usize, batch: usize) -> Result<Array2<f64>, LocalizeError> {
        self.check_input(x, t_len, batch)?;
        Ok(self.forward_cached(x, t_len, batch).out)
    }

    /// Forward pass over one sequence of frames.
    pub fn forward(&self, frames: &[Vec<f64>]) -> Result<Vec<(f64, f64)>, LocalizeError> {
        if frames.is_empty() {
            return Ok(Vec::new());
        }
        let mut x = Array2::zeros((frames.len(), self.f_input));
        for (t, f) in frames.iter().enumerate() {
            if f.len() != self.f_input {
                return Err(LocalizeError::Dimension {
                    expected: self.f_input,
                    got: f.len(),
                });
            }
            x.row_mut(t).assign(&ndarray::ArrayView1::from(f.as_slice()));
        }
        let out = self.forward_batch(&x, frames.len(), 1)?;
        Ok(out.rows().into_iter().map(|r| (r[0], r[1])).collect())
    }

    fn check_input(&self, x: &Array2<f64>, t_len: usize, batch: usize) -> Result<(), LocalizeError> {
        if x.ncols() != self.f_input {
            return Err(LocalizeError::Dimension {
                expected: self.f_input,
                got: x.ncols(),
            });
        }
        if x.nrows() != t_len * batch {
            return Err(LocalizeError::Dimension {
                expected: t_len * batch,
                got: x.nrows(),
            });
        }
        Ok(())
    }

    /// Mean squared error over every output coordinate, with gradients.
    pub fn loss_and_grad(
        &self,
        x: &Array2<f64>,
        y: &Array2<f64>,
        t_len: usize,
        batch: usize,
    ) -> Result<BatchGrad, LocalizeError> {
        self.check_input(x, t_len, batch)?;
        if y.dim() != (t_len * batch, 2) {
            return Err(LocalizeError::Dimension {
                expected: t_len * batch,
                got: y.nrows(),
            });
        }
        let h = self.hidden;
        let cache = self.forward_cached(x, t_len, batch);
        let diff = &cache.out - y;
        let n = (t_len * batch * 2) as f64;
        let mut per_sequence = vec![0.0; batch];
        for t in 0..t_len {
            for (b, acc) in per_sequence.iter_mut().enumerate() {
                let r = t * batch + b;
                *acc += diff[[r, 0]] * diff[[r, 0]] + diff[[r, 1]] * diff[[r, 1]];
            }
        }
        for v in per_sequence.iter_mut() {
            *v /= (2 * t_len) as f64;
        }
        let loss = per_sequence.iter().sum::<f64>() / batch as f64;

        let mut grads: Vec<Array2<f64>> = self.tensors.iter().map(|t| Array2::zeros(t.dim())).collect();
        let d_out = diff.mapv(|v| 2.0 * v / n);
        grads[D2_W] = cache.y1.t().dot(&d_out);
        grads[D2_B] = d_out.sum_axis(Axis(0)).insert_axis(Axis(0));
        let mut d_a1 = d_out.dot(&self.tensors[D2_W].t());
        ndarray::Zip::from(&mut d_a1).and(&cache.a1).for_each(|d, &a| {
            if a <= 0.0 {
                *d *= LEAKY_SLOPE;
            }
        });
        grads[D1_W] = cache.l2_out.t().dot(&d_a1);
        grads[D1_B] = d_a1.sum_axis(Axis(0)).insert_axis(Axis(0));
        let mut d_layer_out = d_a1.dot(&self.tensors[D1_W].t());

        for layer in (0..2).rev() {
            let lc = &cache.layers[layer];
            let mut d_input = Array2::zeros(lc.input.dim());
            for (bwd, dc) in [(false, &lc.fwd), (true, &lc.bwd)] {
                let k = lstm_index(layer, bwd);
                let cols = if bwd { h..2 * h } else { 0..h };
                let g = dir_backward(
                    &lc.input,
                    dc,
                    &self.tensors[k],
                    &self.tensors[k + 1],
                    d_layer_out.slice(s![.., cols]),
                    t_len,
                    batch,
                    bwd,
                );
                grads[k] = g.w_x;
                grads[k + 1] = g.w_h;
                grads[k + 2] = g.b;
                d_input += &g.d_input;
            }
            d_layer_out = d_input;
        }
        Ok(BatchGrad {
            loss,
            per_sequence,
            grads,
        })
    }
}

/// Adam optimizer state.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(model: &BilstmModel, lr: f64) -> Self {
        let zeros: Vec<Array2<f64>> = model.tensors.iter().map(|t| Array2::zeros(t.dim())).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, model: &mut BilstmModel, grads: &[Array2<f64>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for ((w, g), (m, v)) in model
            .tensors
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(w).and(g).and(m).and(v).for_each(|w, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_batch(f: usize, t_len: usize, batch: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((t_len * batch, f), |_| rng.random_range(0.0..1.0));
        let y = Array2::from_shape_fn((t_len * batch, 2), |_| rng.random_range(-1.0..1.0));
        (x, y)
    }

    #[test]
    fn shapes_follow_input_width() {
        let m = BilstmModel::new(4, 1);
        assert_eq!(m.hidden, 28);
        assert_eq!(m.tensors[lstm_index(1, false)].dim(), (56, 112));
        assert_eq!(m.tensors[D1_W].dim(), (56, 56));
        assert_eq!(m.tensors[D2_W].dim(), (56, 2));
        assert_eq!(tensor_names().len(), N_TENSORS);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let m = BilstmModel::zeros(3);
        let out = m.forward(&vec![vec![0.3, -1.0, 2.0]; 5]).unwrap();
        assert_eq!(out, vec![(0.0, 0.0); 5]);
    }

    #[test]
    fn output_length_matches_input() {
        let m = BilstmModel::new(3, 2);
        for len in [1, 5, 20] {
            assert_eq!(m.forward(&vec![vec![0.5; 3]; len]).unwrap().len(), len);
        }
        assert!(matches!(
            m.forward(&[vec![0.5; 4]]),
            Err(LocalizeError::Dimension { expected: 3, got: 4 })
        ));
    }

    #[test]
    fn batched_forward_matches_single_sequences() {
        let m = BilstmModel::new(2, 3);
        let (x, _) = toy_batch(2, 4, 3, 7);
        let out = m.forward_batch(&x, 4, 3).unwrap();
        for b in 0..3 {
            let seq: Vec<Vec<f64>> = (0..4).map(|t| x.row(t * 3 + b).to_vec()).collect();
            let single = m.forward(&seq).unwrap();
            for (t, (px, py)) in single.iter().enumerate() {
                assert!((out[[t * 3 + b, 0]] - px).abs() < 1e-12);
                assert!((out[[t * 3 + b, 1]] - py).abs() < 1e-12);
            }
        }
    }

    /// Central differences on every parameter of a 3-step, 4-feature model.
    #[test]
    fn gradients_match_finite_differences() {
        let (t_len, batch, f) = (3, 2, 4);
        let mut m = BilstmModel::new(f, 11);
        let (x, y) = toy_batch(f, t_len, batch, 5);
        let analytic = m.loss_and_grad(&x, &y, t_len, batch).unwrap().grads;
        let eps = 1e-4;
        let names = tensor_names();
        for k in 0..N_TENSORS {
            let mut worst: f64 = 0.0;
            for idx in 0..m.tensors[k].len() {
                let (r, c) = (idx / m.tensors[k].ncols(), idx % m.tensors[k].ncols());
                let orig = m.tensors[k][[r, c]];
                m.tensors[k][[r, c]] = orig + eps;
                let lp = m.loss_and_grad(&x, &y, t_len, batch).unwrap().loss;
                m.tensors[k][[r, c]] = orig - eps;
                let lm = m.loss_and_grad(&x, &y, t_len, batch).unwrap().loss;
                m.tensors[k][[r, c]] = orig;
                let numeric = (lp - lm) / (2.0 * eps);
                let a = analytic[k][[r, c]];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
            }
            assert!(worst < 1e-4, "{}: max relative error {worst:e}", names[k]);
        }
    }

    #[test]
    fn direction_swap_symmetry() {
        // Make fwd and bwd identical and the downstream weights symmetric
        // in the two halves, so reversing the input reverses the output.
        let mut m = BilstmModel::new(2, 4);
        let h = m.hidden;
        for layer in 0..2 {
            let (f, b) = (lstm_index(layer, false), lstm_index(layer, true));
            for k in 0..3 {
                m.tensors[b + k] = m.tensors[f + k].clone();
            }
        }
        for k in [lstm_index(1, false), lstm_index(1, true), D1_W] {
            let top = m.tensors[k].slice(s![..h, ..]).to_owned();
            m.tensors[k].slice_mut(s![h.., ..]).assign(&top);
        }
        let seq: Vec<Vec<f64>> = (0..6).map(|t| vec![t as f64 * 0.1, (t * t) as f64 * 0.05]).collect();
        let rev: Vec<Vec<f64>> = seq.iter().rev().cloned().collect();
        let a = m.forward(&seq).unwrap();
        let mut b = m.forward(&rev).unwrap();
        b.reverse();
        for (p, q) in a.iter().zip(&b) {
            assert!((p.0 - q.0).abs() < 1e-12 && (p.1 - q.1).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let mut m = BilstmModel::new(2, 9);
        let before = m.clone();
        let (x, y) = toy_batch(2, 3, 2, 1);
        let g = m.loss_and_grad(&x, &y, 3, 2).unwrap();
        let mut adam = Adam::new(&m, 0.0);
        adam.update(&mut m, &g.grads);
        assert_eq!(m, before);
    }
}
