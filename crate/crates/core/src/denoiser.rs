//! Attention-based clean-token predictor.
//!
//! Every sample is laid out as `[condition | visible clean | noisy]` rows.
//! Clean and noisy tokens at the same sequence position share a positional
//! row and differ by a region embedding; only noisy tokens receive the
//! timestep signal. The network is a stack of pre-norm residual blocks
//! (masked multi-head attention, then a SiLU feedforward) followed by a final
//! norm and a head that reads the noisy rows.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::causal_mask::AttnMask;
use crate::diffusion::ConditionSequence;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Scalar, Tape, Var};
use crate::rng::rng_from_seed;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    /// Feedforward hidden width.
    pub d_ff: usize,
    pub d_token: usize,
    /// Latent tokens per sample.
    pub l: usize,
    /// Condition tokens per sample.
    pub cl: usize,
    pub timesteps: usize,
    /// Typical per-entry scale of clean tokens. Sets how noisy inputs are
    /// rescaled and how much of them is passed straight to the output.
    #[serde(default = "unit")]
    pub data_std: f64,
}

fn unit() -> f64 {
    1.0
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_blocks: 8,
            n_heads: 4,
            d_ff: 512,
            d_token: 16,
            l: 8,
            cl: 2,
            timesteps: 100,
            data_std: 1.0,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_model", self.d_model),
            ("n_blocks", self.n_blocks),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("d_token", self.d_token),
            ("l", self.l),
            ("cl", self.cl),
            ("timesteps", self.timesteps),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be at least 1")));
        }
        if !(self.data_std > 0.0 && self.data_std.is_finite()) {
            return Err(Error::Config(format!(
                "model.data_std must be positive, got {}",
                self.data_std
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear<M> {
    pub w: M,
    pub b: M,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Norm<M> {
    pub gain: M,
    pub bias: M,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block<M> {
    pub norm1: Norm<M>,
    pub wq: M,
    pub wk: M,
    pub wv: M,
    pub out: Linear<M>,
    pub norm2: Norm<M>,
    pub ff_in: Linear<M>,
    pub ff_out: Linear<M>,
}

/// All learnable tensors, generic over what is stored per tensor: matrices
/// for parameters and gradients, [`Var`]s when bound to a tape, shapes for
/// the layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights<M> {
    pub cond_in: Linear<M>,
    pub clean_in: Linear<M>,
    pub noisy_in: Linear<M>,
    /// Learned stand-in for the condition tokens, already in model space.
    pub null_cond: M,
    /// Positions `0..cl` for condition tokens, `cl..cl+l` for latent tokens.
    pub pos: M,
    /// Row 0 tags clean tokens, row 1 tags noisy tokens.
    pub region: M,
    pub time_proj: Linear<M>,
    pub blocks: Vec<Block<M>>,
    pub final_norm: Norm<M>,
    pub head: Linear<M>,
}

type MapFn<'s, 'f, M, N, E> = dyn FnMut(&str, &'s M) -> std::result::Result<N, E> + 'f;

impl<M> Linear<M> {
    fn try_map<'s, N, E>(&'s self, p: &str, f: &mut MapFn<'s, '_, M, N, E>) -> std::result::Result<Linear<N>, E> {
        Ok(Linear {
            w: f(&format!("{p}.w"), &self.w)?,
            b: f(&format!("{p}.b"), &self.b)?,
        })
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut M)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

impl<M> Norm<M> {
    fn try_map<'s, N, E>(&'s self, p: &str, f: &mut MapFn<'s, '_, M, N, E>) -> std::result::Result<Norm<N>, E> {
        Ok(Norm {
            gain: f(&format!("{p}.gain"), &self.gain)?,
            bias: f(&format!("{p}.bias"), &self.bias)?,
        })
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut M)) {
        f(&mut self.gain);
        f(&mut self.bias);
    }
}

impl<M> Block<M> {
    fn try_map<'s, N, E>(&'s self, p: &str, f: &mut MapFn<'s, '_, M, N, E>) -> std::result::Result<Block<N>, E> {
        Ok(Block {
            norm1: self.norm1.try_map(&format!("{p}.norm1"), f)?,
            wq: f(&format!("{p}.attn.wq"), &self.wq)?,
            wk: f(&format!("{p}.attn.wk"), &self.wk)?,
            wv: f(&format!("{p}.attn.wv"), &self.wv)?,
            out: self.out.try_map(&format!("{p}.attn.out"), f)?,
            norm2: self.norm2.try_map(&format!("{p}.norm2"), f)?,
            ff_in: self.ff_in.try_map(&format!("{p}.ff_in"), f)?,
            ff_out: self.ff_out.try_map(&format!("{p}.ff_out"), f)?,
        })
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut M)) {
        self.norm1.visit_mut(f);
        f(&mut self.wq);
        f(&mut self.wk);
        f(&mut self.wv);
        self.out.visit_mut(f);
        self.norm2.visit_mut(f);
        self.ff_in.visit_mut(f);
        self.ff_out.visit_mut(f);
    }
}

impl<M> Weights<M> {
    /// Maps every tensor in manifest order, passing its dotted name.
    pub fn try_map<'s, N, E>(
        &'s self,
        f: &mut MapFn<'s, '_, M, N, E>,
    ) -> std::result::Result<Weights<N>, E> {
        Ok(Weights {
            cond_in: self.cond_in.try_map("cond_in", f)?,
            clean_in: self.clean_in.try_map("clean_in", f)?,
            noisy_in: self.noisy_in.try_map("noisy_in", f)?,
            null_cond: f("null_cond", &self.null_cond)?,
            pos: f("pos", &self.pos)?,
            region: f("region", &self.region)?,
            time_proj: self.time_proj.try_map("time_proj", f)?,
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.try_map(&format!("blocks.{i}"), f))
                .collect::<std::result::Result<_, _>>()?,
            final_norm: self.final_norm.try_map("final_norm", f)?,
            head: self.head.try_map("head", f)?,
        })
    }

    pub fn map<'s, N>(&'s self, mut f: impl FnMut(&str, &'s M) -> N) -> Weights<N> {
        self.try_map(&mut |n, m| Ok::<_, std::convert::Infallible>(f(n, m)))
            .unwrap_or_else(|e| match e {})
    }

    /// Tensors in manifest order.
    pub fn tensors(&self) -> Vec<&M> {
        let mut out = Vec::new();
        let _ = self.try_map(&mut |_, m| {
            out.push(m);
            Ok::<_, std::convert::Infallible>(())
        });
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        let _ = self.try_map(&mut |n, _| {
            out.push(n.to_string());
            Ok::<_, std::convert::Infallible>(())
        });
        out
    }

    /// Visits every tensor mutably, in manifest order.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut M)) {
        self.cond_in.visit_mut(f);
        self.clean_in.visit_mut(f);
        self.noisy_in.visit_mut(f);
        f(&mut self.null_cond);
        f(&mut self.pos);
        f(&mut self.region);
        self.time_proj.visit_mut(f);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        self.final_norm.visit_mut(f);
        self.head.visit_mut(f);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    Normal,
    Ones,
    Zeros,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorSpec {
    pub rows: usize,
    pub cols: usize,
    pub init: InitKind,
}

/// Shapes and initializers of every tensor for `config`.
pub fn layout(config: &DenoiserConfig) -> Weights<TensorSpec> {
    let spec = |rows, cols, init| TensorSpec { rows, cols, init };
    let linear = |i, o| Linear {
        w: spec(i, o, InitKind::Normal),
        b: spec(1, o, InitKind::Zeros),
    };
    let norm = |d| Norm {
        gain: spec(1, d, InitKind::Ones),
        bias: spec(1, d, InitKind::Zeros),
    };
    let d = config.d_model;
    Weights {
        cond_in: linear(config.d_token, d),
        clean_in: linear(config.d_token, d),
        noisy_in: linear(config.d_token, d),
        null_cond: spec(config.cl, d, InitKind::Normal),
        pos: spec(config.cl + config.l, d, InitKind::Normal),
        region: spec(2, d, InitKind::Normal),
        time_proj: linear(d, d),
        blocks: (0..config.n_blocks)
            .map(|_| Block {
                norm1: norm(d),
                wq: spec(d, d, InitKind::Normal),
                wk: spec(d, d, InitKind::Normal),
                wv: spec(d, d, InitKind::Normal),
                out: linear(d, d),
                norm2: norm(d),
                ff_in: linear(d, config.d_ff),
                ff_out: linear(config.d_ff, d),
            })
            .collect(),
        final_norm: norm(d),
        head: linear(d, config.d_token),
    }
}

pub fn param_count(config: &DenoiserConfig) -> usize {
    layout(config)
        .tensors()
        .iter()
        .map(|s| s.rows * s.cols)
        .sum()
}

/// Sinusoidal timestep encoding: entry `2i` is `sin(t·ω_i)` and entry
/// `2i+1` is `cos(t·ω_i)`, with `ω_i = 10000^(-2i/d)`.
pub fn timestep_encoding(t: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let i = (j / 2) as f64;
            let omega = 10000f64.powf(-2.0 * i / d as f64);
            let phase = t as f64 * omega;
            if j % 2 == 0 {
                phase.sin()
            } else {
                phase.cos()
            }
        })
        .collect()
}

/// Input, skip, and output coefficients for a noisy row at signal level
/// `alpha_bar`. The prediction is `c_skip·x_t + c_out·net(c_in·x_t)`, which
/// keeps the network's input and target at unit scale at every noise level
/// and reduces to the identity on clean rows.
pub fn preconditioning(alpha_bar: f64, data_std: f64) -> (f64, f64, f64) {
    let a2 = alpha_bar;
    let b2 = 1.0 - alpha_bar;
    let s2 = data_std * data_std;
    let den = b2 + a2 * s2;
    let c_in = 1.0 / den.sqrt();
    let c_skip = s2 * a2.sqrt() / den;
    let c_out = b2.sqrt() * data_std / den.sqrt();
    (c_in, c_skip, c_out)
}

/// One sample's inputs to the denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserInput<T: Scalar> {
    pub cond: ConditionSequence<T>,
    /// Leading clean tokens visible to the model (`mask.v()` rows).
    pub clean_visible: Matrix<T>,
    /// Noisy tokens (`mask.l()` rows).
    pub noisy: Matrix<T>,
    /// Diffusion timestep of each noisy row.
    pub timesteps: Vec<usize>,
    /// Cumulative signal level `ᾱ` of each noisy row.
    pub alpha_bar: Vec<f64>,
    pub mask: AttnMask,
}

/// Tape handles produced by [`DenoiserParams::forward_on_tape`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Predicted clean tokens per sample, `noisy rows x d_token`.
    pub outputs: Vec<Var>,
    /// Stacked hidden states after the embedding and after each block.
    pub hidden: Vec<Var>,
    /// First row of each sample in the stacked hidden states.
    pub offsets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams<T: Scalar = f32> {
    pub config: DenoiserConfig,
    pub weights: Weights<Matrix<T>>,
}

/// Draws fresh parameters: `N(0, 0.02²)` weights, unit norm gains, zero biases.
pub fn init_params<T: Scalar>(config: &DenoiserConfig, seed: u64) -> Result<DenoiserParams<T>> {
    init_params_with_std(config, seed, INIT_STD)
}

pub fn init_params_with_std<T: Scalar>(
    config: &DenoiserConfig,
    seed: u64,
    std: f64,
) -> Result<DenoiserParams<T>> {
    config.validate()?;
    let mut rng = rng_from_seed(seed);
    let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
    let weights = layout(config).map(|_, s| match s.init {
        InitKind::Normal => Matrix::from_fn(s.rows, s.cols, |_, _| {
            T::from_f64_lossy(normal.sample(&mut rng))
        }),
        InitKind::Ones => Matrix::filled(s.rows, s.cols, T::one()),
        InitKind::Zeros => Matrix::zeros(s.rows, s.cols),
    });
    Ok(DenoiserParams {
        config: *config,
        weights,
    })
}

impl<T: Scalar> DenoiserParams<T> {
    pub fn cast<U: Scalar>(&self) -> DenoiserParams<U> {
        DenoiserParams {
            config: self.config,
            weights: self.weights.map(|_, m| m.cast()),
        }
    }

    /// Adds an independent draw to every entry. Used to move away from the
    /// near-symmetric initial point in checks.
    pub fn perturb<R: Rng>(&mut self, rng: &mut R, std: f64) {
        let normal = Normal::new(0.0, std).expect("valid std");
        self.weights.visit_mut(&mut |m| {
            for v in m.as_mut_slice() {
                *v += T::from_f64_lossy(normal.sample(rng));
            }
        });
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>) -> Weights<Var> {
        self.weights.map(|_, m| tape.leaf(m))
    }

    fn check_input(&self, input: &DenoiserInput<T>) -> Result<()> {
        let c = &self.config;
        let m = &input.mask;
        let fail = |msg: String| Err(Error::Contract(msg));
        if m.cl() != c.cl || input.cond.tokens.rows() != c.cl {
            return fail(format!(
                "condition rows {} / mask cl {} vs model cl {}",
                input.cond.tokens.rows(),
                m.cl(),
                c.cl
            ));
        }
        if input.clean_visible.rows() != m.v() {
            return fail(format!(
                "{} clean rows vs mask v {}",
                input.clean_visible.rows(),
                m.v()
            ));
        }
        if input.noisy.rows() != m.l()
            || input.timesteps.len() != m.l()
            || input.alpha_bar.len() != m.l()
        {
            return fail(format!(
                "{} noisy rows / {} timesteps / {} signal levels vs mask l {}",
                input.noisy.rows(),
                input.timesteps.len(),
                input.alpha_bar.len(),
                m.l()
            ));
        }
        if let Some(a) = input.alpha_bar.iter().find(|&&a| !(a > 0.0 && a <= 1.0)) {
            return fail(format!("signal level {a} outside (0, 1]"));
        }
        if m.l() == 0 || m.l() > c.l || m.v() > c.l {
            return fail(format!(
                "layout v={} l={} does not fit model length {}",
                m.v(),
                m.l(),
                c.l
            ));
        }
        for (name, mat) in [
            ("condition", &input.cond.tokens),
            ("clean", &input.clean_visible),
            ("noisy", &input.noisy),
        ] {
            if mat.rows() > 0 && mat.cols() != c.d_token {
                return fail(format!(
                    "{name} tokens have width {}, model expects {}",
                    mat.cols(),
                    c.d_token
                ));
            }
        }
        if let Some(&t) = input.timesteps.iter().find(|&&t| t > c.timesteps) {
            return fail(format!("timestep {t} exceeds {}", c.timesteps));
        }
        Ok(())
    }

    fn embed<'a>(
        &self,
        tape: &mut Tape<'a, T>,
        w: &Weights<Var>,
        input: &DenoiserInput<T>,
    ) -> Result<Var> {
        let c = &self.config;
        let (v, n) = (input.mask.v(), input.mask.l());

        let cond_pos = tape.gather_rows(w.pos, (0..c.cl).collect())?;
        let cond = if input.cond.is_null {
            w.null_cond
        } else {
            let x = tape.constant(input.cond.tokens.clone());
            tape.linear(x, w.cond_in.w, w.cond_in.b)?
        };
        let cond = tape.add(cond, cond_pos)?;
        let mut parts = vec![cond];

        if v > 0 {
            let x = tape.constant(input.clean_visible.clone());
            let h = tape.linear(x, w.clean_in.w, w.clean_in.b)?;
            let pos = tape.gather_rows(w.pos, (c.cl..c.cl + v).collect())?;
            let tag = tape.gather_rows(w.region, vec![0; v])?;
            let h = tape.add(h, pos)?;
            parts.push(tape.add(h, tag)?);
        }

        let mut scaled = input.noisy.clone();
        for (r, &ab) in input.alpha_bar.iter().enumerate() {
            let c_in = T::from_f64_lossy(preconditioning(ab, c.data_std).0);
            scaled.row_mut(r).iter_mut().for_each(|v| *v *= c_in);
        }
        let x = tape.constant(scaled);
        let h = tape.linear(x, w.noisy_in.w, w.noisy_in.b)?;
        let pos = tape.gather_rows(w.pos, (c.cl..c.cl + n).collect())?;
        let tag = tape.gather_rows(w.region, vec![1; n])?;
        let enc: Vec<T> = input
            .timesteps
            .iter()
            .flat_map(|&t| timestep_encoding(t, c.d_model))
            .map(T::from_f64_lossy)
            .collect();
        let enc = tape.constant(Matrix::from_vec(n, c.d_model, enc)?);
        let temb = tape.linear(enc, w.time_proj.w, w.time_proj.b)?;
        let h = tape.add(h, pos)?;
        let h = tape.add(h, tag)?;
        parts.push(tape.add(h, temb)?);

        tape.concat_rows(&parts)
    }

    /// Records the forward pass for a batch of samples on `tape`.
    pub fn forward_on_tape<'a>(
        &self,
        tape: &mut Tape<'a, T>,
        w: &Weights<Var>,
        inputs: &[&DenoiserInput<T>],
    ) -> Result<ForwardTrace> {
        let c = &self.config;
        let mut offsets = Vec::with_capacity(inputs.len());
        let mut embedded = Vec::with_capacity(inputs.len());
        let mut rows = 0;
        for input in inputs {
            self.check_input(input)?;
            offsets.push(rows);
            rows += input.mask.seq();
            embedded.push(self.embed(tape, w, input)?);
        }
        let mut x = tape.concat_rows(&embedded)?;
        let mut hidden = vec![x];

        let dh = c.head_dim();
        let inv_sqrt = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
        for blk in &w.blocks {
            let h = tape.layer_norm(x, blk.norm1.gain, blk.norm1.bias)?;
            let q = tape.matmul(h, blk.wq)?;
            let k = tape.matmul(h, blk.wk)?;
            let v = tape.matmul(h, blk.wv)?;
            let mut per_sample = Vec::with_capacity(inputs.len());
            for (input, &off) in inputs.iter().zip(&offsets) {
                let seq = input.mask.seq();
                let mut heads = Vec::with_capacity(c.n_heads);
                for hd in 0..c.n_heads {
                    let qh = tape.block(q, off, hd * dh, seq, dh)?;
                    let kh = tape.block(k, off, hd * dh, seq, dh)?;
                    let vh = tape.block(v, off, hd * dh, seq, dh)?;
                    let s = tape.matmul_nt(qh, kh)?;
                    let s = tape.scale(s, inv_sqrt);
                    let p = tape.softmax_masked(s, input.mask.shared_grid())?;
                    heads.push(tape.matmul(p, vh)?);
                }
                per_sample.push(tape.concat_cols(&heads)?);
            }
            let attn = tape.concat_rows(&per_sample)?;
            let attn = tape.linear(attn, blk.out.w, blk.out.b)?;
            x = tape.add(x, attn)?;

            let h = tape.layer_norm(x, blk.norm2.gain, blk.norm2.bias)?;
            let h = tape.linear(h, blk.ff_in.w, blk.ff_in.b)?;
            let h = tape.silu(h);
            let h = tape.linear(h, blk.ff_out.w, blk.ff_out.b)?;
            x = tape.add(x, h)?;
            hidden.push(x);
        }

        let x = tape.layer_norm(x, w.final_norm.gain, w.final_norm.bias)?;
        let noisy_rows: Vec<usize> = inputs
            .iter()
            .zip(&offsets)
            .flat_map(|(input, &off)| {
                let start = off + input.mask.ctx();
                start..start + input.mask.l()
            })
            .collect();
        let noisy_len = noisy_rows.len();
        let x = tape.gather_rows(x, noisy_rows)?;
        let y = tape.linear(x, w.head.w, w.head.b)?;
        let mut out_scale = Vec::with_capacity(noisy_len);
        let mut skips = Vec::with_capacity(inputs.len());
        for input in inputs {
            let mut skip = input.noisy.clone();
            for (r, &ab) in input.alpha_bar.iter().enumerate() {
                let (_, c_skip, c_out) = preconditioning(ab, c.data_std);
                out_scale.push(T::from_f64_lossy(c_out));
                let k = T::from_f64_lossy(c_skip);
                skip.row_mut(r).iter_mut().for_each(|v| *v *= k);
            }
            skips.push(skip);
        }
        let y = tape.scale_rows(y, out_scale)?;
        let skip = tape.constant(Matrix::concat_rows(&skips.iter().collect::<Vec<_>>())?);
        let y = tape.add(y, skip)?;
        let mut outputs = Vec::with_capacity(inputs.len());
        let mut start = 0;
        for input in inputs {
            outputs.push(tape.slice_rows(y, start, input.mask.l())?);
            start += input.mask.l();
        }
        Ok(ForwardTrace {
            outputs,
            hidden,
            offsets,
        })
    }

    /// Predicted clean tokens for each input.
    pub fn forward_batch(&self, inputs: &[&DenoiserInput<T>]) -> Result<Vec<Matrix<T>>> {
        let mut tape = Tape::new();
        let w = self.bind(&mut tape);
        let trace = self.forward_on_tape(&mut tape, &w, inputs)?;
        Ok(trace
            .outputs
            .iter()
            .map(|&o| tape.value(o).clone())
            .collect())
    }

    pub fn forward(&self, input: &DenoiserInput<T>) -> Result<Matrix<T>> {
        Ok(self.forward_batch(&[input])?.pop().unwrap())
    }

    /// Hidden states of a single sample after the embedding and each block.
    pub fn hidden_states(&self, input: &DenoiserInput<T>) -> Result<Vec<Matrix<T>>> {
        let mut tape = Tape::new();
        let w = self.bind(&mut tape);
        let trace = self.forward_on_tape(&mut tape, &w, &[input])?;
        Ok(trace.hidden.iter().map(|&h| tape.value(h).clone()).collect())
    }
}
