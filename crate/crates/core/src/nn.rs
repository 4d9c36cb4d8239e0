//! Parameter storage, the layer building blocks shared by the generator and
//! the discriminators, and the Adam optimizer.
//!
//! Parameter values are kept exactly representable in `f32`: initial values
//! and every optimizer update are rounded through `f32`. Arithmetic still runs
//! in `f64`, while checkpoints (which store little-endian `f32`) round-trip
//! bit for bit.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Mat, Var};

/// Round to the nearest `f32`.
#[inline]
pub fn f32_round(x: f64) -> f64 {
    x as f32 as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Ordered collection of named parameter matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    pub blocks: Vec<ParamBlock>,
}

/// Index of a block inside a [`Params`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, data: Vec<f64>) -> ParamId {
        assert_eq!(data.len(), rows * cols);
        self.blocks.push(ParamBlock {
            name: name.into(),
            rows,
            cols,
            data: data.into_iter().map(f32_round).collect(),
        });
        ParamId(self.blocks.len() - 1)
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, rows, cols, data)
    }

    pub fn add_const(&mut self, name: impl Into<String>, rows: usize, cols: usize, value: f64) -> ParamId {
        self.add(name, rows, cols, vec![value; rows * cols])
    }

    pub fn get(&self, id: ParamId) -> &ParamBlock {
        &self.blocks[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamBlock {
        &mut self.blocks[id.0]
    }

    pub fn mat(&self, id: ParamId) -> Mat {
        let b = self.get(id);
        Mat::from_vec(b.rows, b.cols, b.data.clone())
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn n_values(&self) -> usize {
        self.blocks.iter().map(|b| b.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.data.iter().all(|x| x.is_finite()))
    }

    /// SHA-256 over names, shapes and the exact bits of every value.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for b in &self.blocks {
            h.update(b.name.as_bytes());
            h.update((b.rows as u64).to_le_bytes());
            h.update((b.cols as u64).to_le_bytes());
            for v in &b.data {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Load every block of `params` into `g`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .blocks
            .iter()
            .map(|b| {
                let m = Mat::from_vec(b.rows, b.cols, b.data.clone());
                if trainable {
                    g.variable(m)
                } else {
                    g.constant(m)
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn zeros_like(&self) -> Vec<Vec<f64>> {
        self.blocks.iter().map(|b| vec![0.0; b.data.len()]).collect()
    }
}

/// Graph handles of a bound [`Params`].
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Per-block gradients after a backward pass (zeros where none arrived).
    pub fn grads(&self, g: &Graph) -> Vec<Vec<f64>> {
        self.vars.iter().map(|v| g.grad_or_zeros(*v).data).collect()
    }
}

/// Element-wise `acc += scale * other`.
pub fn accumulate(acc: &mut [Vec<f64>], other: &[Vec<f64>], scale: f64) {
    for (a, o) in acc.iter_mut().zip(other) {
        for (x, y) in a.iter_mut().zip(o) {
            *x += scale * y;
        }
    }
}

/// Affine map `x W + b`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(p: &mut Params, name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        let w = p.add_uniform(format!("{name}.weight"), input, output, input, rng);
        let b = p.add_uniform(format!("{name}.bias"), 1, output, input, rng);
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Var {
        let y = g.matmul(x, bound.var(self.w));
        g.add_row(y, bound.var(self.b))
    }
}

/// Long short-term memory cell with gate order (input, forget, cell, output).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LstmCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

/// Recurrent state `(h, c)`.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmCell {
    pub fn new<R: Rng>(p: &mut Params, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let w_input = p.add_uniform(format!("{name}.w_input"), input, 4 * hidden, hidden, rng);
        let w_hidden = p.add_uniform(format!("{name}.w_hidden"), hidden, 4 * hidden, hidden, rng);
        let bias = p.add_uniform(format!("{name}.bias"), 1, 4 * hidden, hidden, rng);
        LstmCell {
            w_input,
            w_hidden,
            bias,
            hidden,
        }
    }

    pub fn zero_state(&self, g: &mut Graph, batch: usize) -> LstmState {
        let h = g.constant(Mat::zeros(batch, self.hidden));
        let c = g.constant(Mat::zeros(batch, self.hidden));
        LstmState { h, c }
    }

    pub fn step(&self, g: &mut Graph, bound: &Bound, state: LstmState, x: Var) -> LstmState {
        let hd = self.hidden;
        let a = g.matmul(x, bound.var(self.w_input));
        let b = g.matmul(state.h, bound.var(self.w_hidden));
        let s = g.add(a, b);
        let gates = g.add_row(s, bound.var(self.bias));
        let i = g.slice_cols(gates, 0, hd);
        let f = g.slice_cols(gates, hd, hd);
        let c_hat = g.slice_cols(gates, 2 * hd, hd);
        let o = g.slice_cols(gates, 3 * hd, hd);
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let c_hat = g.tanh(c_hat);
        let o = g.sigmoid(o);
        let keep = g.mul(f, state.c);
        let write = g.mul(i, c_hat);
        let c = g.add(keep, write);
        let tc = g.tanh(c);
        let h = g.mul(o, tc);
        LstmState { h, c }
    }
}

/// Adam hyperparameters beyond the learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment estimates for one [`Params`]. Moments are rounded through
/// `f32` like the parameters so optimizer state checkpoints exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &Params, cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn update(&mut self, params: &mut Params, grads: &[Vec<f64>], lr: f64) {
        assert_eq!(grads.len(), params.blocks.len());
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (bi, block) in params.blocks.iter_mut().enumerate() {
            let (m, v, gr) = (&mut self.m[bi], &mut self.v[bi], &grads[bi]);
            for j in 0..block.data.len() {
                let gj = gr[j];
                m[j] = f32_round(beta1 * m[j] + (1.0 - beta1) * gj);
                v[j] = f32_round(beta2 * v[j] + (1.0 - beta2) * gj * gj);
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                block.data[j] = f32_round(block.data[j] - lr * mh / (vh.sqrt() + eps));
            }
        }
    }
}
