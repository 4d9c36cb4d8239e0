//! Discriminators over the primary pedestrian's full (observed + future)
//! sequence of interaction embeddings: a transformer encoder (default) and a
//! recurrent variant for the ablation. Both score the representation at the
//! final time index with a small MLP.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Mat, Var};
use crate::nn::{Bound, Linear, LstmCell, ParamId, Params};
use crate::scene::{HorizonSpec, Point};
use crate::sim::{AgentContext, Sim, SimConfig, SimError};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum DiscError {
    #[error("invalid discriminator config: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("trajectory has {got} positions, expected {expected}")]
    Length { expected: usize, got: usize },
    #[error("non-finite discriminator output")]
    NonFinite,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscVariant {
    Transformer,
    Recurrent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub n_layers: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub sim: SimConfig,
    pub variant: DiscVariant,
    pub score_head_dims: Vec<usize>,
    pub horizon: HorizonSpec,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            n_layers: 4,
            model_dim: 64,
            ffn_dim: 64,
            sim: SimConfig::default(),
            variant: DiscVariant::Transformer,
            score_head_dims: vec![64],
            horizon: HorizonSpec::default(),
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<(), DiscError> {
        if self.n_layers == 0 || self.model_dim == 0 || self.ffn_dim == 0 || self.score_head_dims.contains(&0) {
            return Err(DiscError::Config("dims and n_layers must be > 0".into()));
        }
        self.sim.validate()?;
        self.horizon.validate().map_err(|e| DiscError::Config(e.to_string()))?;
        Ok(())
    }

    /// Length of the embedded sequence: one entry per velocity.
    pub fn seq_len(&self) -> usize {
        self.horizon.total() - 1
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub ln1_scale: ParamId,
    pub ln1_shift: ParamId,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub ln2_scale: ParamId,
    pub ln2_shift: ParamId,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    pub params: Params,
    pub sim: Sim,
    pub input_proj: Option<Linear>,
    pub pos_emb: Option<ParamId>,
    pub layers: Vec<EncoderLayer>,
    pub lstm: Option<LstmCell>,
    pub head: Vec<Linear>,
}

/// `softmax(Q K^T / sqrt(d_k)) V` for one sequence.
pub fn attention(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let mut g = Graph::new();
    let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let seq = g.value(q).rows;
    let out = g.block_attention(q, k, v, 1, seq);
    g.value(out).clone()
}

impl Discriminator {
    pub fn new<R: Rng>(cfg: DiscriminatorConfig, rng: &mut R) -> Result<Self, DiscError> {
        cfg.validate()?;
        let mut params = Params::new();
        let sim = Sim::new(&mut params, "disc.sim", cfg.sim.clone(), rng);
        let d = cfg.model_dim;
        let s = cfg.sim.output_dim();
        let mut layers = Vec::new();
        let mut lstm = None;
        let mut input_proj = None;
        let mut pos_emb = None;
        match cfg.variant {
            DiscVariant::Transformer => {
                input_proj = Some(Linear::new(&mut params, "disc.input", s, d, rng));
                pos_emb = Some(params.add_uniform("disc.pos_emb", cfg.seq_len(), d, d, rng));
                for l in 0..cfg.n_layers {
                    let n = format!("disc.layer{l}");
                    layers.push(EncoderLayer {
                        wq: params.add_uniform(format!("{n}.wq"), d, d, d, rng),
                        wk: params.add_uniform(format!("{n}.wk"), d, d, d, rng),
                        wv: params.add_uniform(format!("{n}.wv"), d, d, d, rng),
                        ln1_scale: params.add_const(format!("{n}.ln1.scale"), 1, d, 1.0),
                        ln1_shift: params.add_const(format!("{n}.ln1.shift"), 1, d, 0.0),
                        ffn1: Linear::new(&mut params, &format!("{n}.ffn1"), d, cfg.ffn_dim, rng),
                        ffn2: Linear::new(&mut params, &format!("{n}.ffn2"), cfg.ffn_dim, d, rng),
                        ln2_scale: params.add_const(format!("{n}.ln2.scale"), 1, d, 1.0),
                        ln2_shift: params.add_const(format!("{n}.ln2.shift"), 1, d, 0.0),
                    });
                }
            }
            DiscVariant::Recurrent => {
                lstm = Some(LstmCell::new(&mut params, "disc.lstm", s, d, rng));
            }
        }
        let mut head = Vec::new();
        let mut fan_in = d;
        for (i, h) in cfg.score_head_dims.iter().chain(std::iter::once(&1)).enumerate() {
            head.push(Linear::new(&mut params, &format!("disc.head{i}"), fan_in, *h, rng));
            fan_in = *h;
        }
        Ok(Discriminator {
            cfg,
            params,
            sim,
            input_proj,
            pos_emb,
            layers,
            lstm,
            head,
        })
    }

    /// One embedding per velocity step (`seq_len` entries of `b x sim_dim`)
    /// from per-step primary position nodes (`total` entries of `b x 2`).
    pub fn stack_sequence(&self, g: &mut Graph, bound: &Bound, rows: &[&AgentContext], positions: &[Var]) -> Vec<Var> {
        let dt = rows[0].dt;
        let goals: Vec<Option<Point>> = rows.iter().map(|c| c.goal).collect();
        (1..positions.len())
            .map(|t| {
                let d = g.sub(positions[t], positions[t - 1]);
                let vel = g.scale(d, 1.0 / dt);
                let nb = AgentContext::neighbor_batch(g, rows, t);
                self.sim.forward(g, bound, positions[t], vel, &nb, &goals)
            })
            .collect()
    }

    /// Time-major token matrix (`seq * b x model_dim`, row `t * b + i`) with
    /// positional embeddings added.
    pub fn tokens(&self, g: &mut Graph, bound: &Bound, seq: &[Var]) -> Var {
        let pe = bound.var(self.pos_emb.expect("transformer variant"));
        let proj = self.input_proj.expect("transformer variant");
        let parts: Vec<Var> = seq
            .iter()
            .enumerate()
            .map(|(t, s)| {
                let x = proj.forward(g, bound, *s);
                let row = g.slice_rows(pe, t, 1);
                g.add_row(x, row)
            })
            .collect();
        g.concat_rows(&parts)
    }

    fn norm(g: &mut Graph, bound: &Bound, x: Var, scale: ParamId, shift: ParamId) -> Var {
        let n = g.layer_norm(x, LN_EPS);
        let n = g.mul_row(n, bound.var(scale));
        g.add_row(n, bound.var(shift))
    }

    /// Attention, add & normalize, feedforward, add & normalize.
    pub fn encoder_layer(&self, g: &mut Graph, bound: &Bound, layer: usize, x: Var, batch: usize, seq: usize) -> Var {
        let l = &self.layers[layer];
        let q = g.matmul(x, bound.var(l.wq));
        let k = g.matmul(x, bound.var(l.wk));
        let v = g.matmul(x, bound.var(l.wv));
        let a = g.block_attention(q, k, v, batch, seq);
        let r = g.add(x, a);
        let x1 = Self::norm(g, bound, r, l.ln1_scale, l.ln1_shift);
        let h = l.ffn1.forward(g, bound, x1);
        let h = g.relu(h);
        let f = l.ffn2.forward(g, bound, h);
        let r = g.add(x1, f);
        Self::norm(g, bound, r, l.ln2_scale, l.ln2_shift)
    }

    fn head(&self, g: &mut Graph, bound: &Bound, mut x: Var) -> Var {
        let n = self.head.len();
        for (i, lin) in self.head.iter().enumerate() {
            x = lin.forward(g, bound, x);
            if i + 1 < n {
                x = g.relu(x);
            }
        }
        x
    }

    /// Transformer score from an embedded sequence.
    pub fn score_transformer(&self, g: &mut Graph, bound: &Bound, seq: &[Var]) -> Var {
        let b = g.value(seq[0]).rows;
        let mut x = self.tokens(g, bound, seq);
        for l in 0..self.layers.len() {
            x = self.encoder_layer(g, bound, l, x, b, seq.len());
        }
        let last = g.slice_rows(x, (seq.len() - 1) * b, b);
        self.head(g, bound, last)
    }

    /// Recurrent score from an embedded sequence.
    pub fn score_recurrent(&self, g: &mut Graph, bound: &Bound, seq: &[Var]) -> Var {
        let lstm = self.lstm.expect("recurrent variant");
        let b = g.value(seq[0]).rows;
        let mut state = lstm.zero_state(g, b);
        for s in seq {
            state = lstm.step(g, bound, state, *s);
        }
        self.head(g, bound, state.h)
    }

    /// Batched scores (`b x 1`) of full primary trajectories.
    pub fn score_batch(&self, g: &mut Graph, bound: &Bound, rows: &[&AgentContext], positions: &[Var]) -> Var {
        let seq = self.stack_sequence(g, bound, rows, positions);
        match self.cfg.variant {
            DiscVariant::Transformer => self.score_transformer(g, bound, &seq),
            DiscVariant::Recurrent => self.score_recurrent(g, bound, &seq),
        }
    }

    /// Score of one full trajectory (observed + future positions of the
    /// primary described by `ctx`).
    pub fn score(&self, ctx: &AgentContext, trajectory: &[Point]) -> Result<f64, DiscError> {
        Ok(self.score_and_grad(ctx, trajectory, false)?.0)
    }

    /// Score and its gradient with respect to every position of `trajectory`.
    pub fn score_and_grad(&self, ctx: &AgentContext, trajectory: &[Point], grad: bool) -> Result<(f64, Vec<Point>), DiscError> {
        let expected = self.cfg.horizon.total();
        if trajectory.len() != expected {
            return Err(DiscError::Length {
                expected,
                got: trajectory.len(),
            });
        }
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let pos: Vec<Var> = trajectory.iter().map(|p| g.variable(Mat::from_vec(1, 2, p.to_vec()))).collect();
        let s = self.score_batch(&mut g, &bound, &[ctx], &pos);
        let value = g.value(s).scalar();
        if !value.is_finite() {
            return Err(DiscError::NonFinite);
        }
        let mut grads = Vec::new();
        if grad {
            g.backward(s);
            grads = pos.iter().map(|v| {
                let m = g.grad_or_zeros(*v);
                [m.data[0], m.data[1]]
            }).collect();
        }
        Ok((value, grads))
    }
}
