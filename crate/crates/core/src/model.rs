//! A small pre-norm transformer whose attention layers are primal or
//! canonical, evaluated on a [`Tape`] so that every forward pass can be
//! differentiated.
//!
//! Each block is `h ← h + Attn(std(h))`, `h ← h + FFN(std(h))` where `std`
//! standardizes every token and the FFN is `relu(z W₁ᵀ + b₁) W₂ᵀ + b₂` with a
//! `2 d_model` hidden layer. The sequence is pooled by its mean (by its last
//! token in causal models) and mapped to logits or regression outputs.
//!
//! The loss is `L + η Σ_l J_l²` where `J_l` is the KSVD objective of primal
//! layer `l` averaged over its heads and over the batch.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{softmax_attention_matrix, weight_rows, HeadParams, OutputMap, ProjectionMode};
use crate::autodiff::{Tape, Var};
use crate::dual::build_kernel;
use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureMapConfig, FeatureMapSpec, ProjectionSet};
use crate::linalg::Matrix;
use crate::objective::KsvdLossReport;
use crate::task::{Example, Input, InputSpec, Target, TaskHead, TaskSpec};
use crate::{math, rng};

/// Floor added to the variance in per-token standardization.
pub const STANDARDIZE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AttentionKind {
    Primal,
    Canonical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(
    feature = "serde",
    serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)
)]
pub enum ModeConfig {
    DataIndependent,
    DataDependent { rank_multi: usize },
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    /// Per-head query/key width `d_q = d_k`.
    pub head_dim: usize,
    pub s: usize,
    pub d_v: usize,
    /// One entry per layer, or a single entry applied to every layer.
    pub kinds: Vec<AttentionKind>,
    pub feature_map: FeatureMapConfig,
    pub mode: ModeConfig,
    pub causal: bool,
    pub eta: f64,
    /// Seeds parameter initialization and the `F_X` subsamples.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 1,
            heads: 1,
            d_model: 16,
            head_dim: 16,
            s: 8,
            d_v: 16,
            kinds: vec![AttentionKind::Primal],
            feature_map: FeatureMapConfig::default(),
            mode: ModeConfig::DataDependent { rank_multi: 10 },
            causal: false,
            eta: 0.1,
            seed: 0,
        }
    }
}

/// Sizes a model takes from its task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub input: InputSpec,
    pub head: TaskHead,
    pub seq_len: usize,
}

impl ModelShape {
    pub fn for_task(task: &TaskSpec) -> Self {
        ModelShape {
            input: task.input_spec(),
            head: task.head(),
            seq_len: task.seq_len,
        }
    }

    pub fn outputs(&self) -> usize {
        match self.head {
            TaskHead::Classification { classes } => classes,
            TaskHead::Regression { dim } => dim,
        }
    }
}

impl ModelConfig {
    pub fn kind(&self, layer: usize) -> AttentionKind {
        if self.kinds.len() == 1 {
            self.kinds[0]
        } else {
            self.kinds[layer]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("head_dim", self.head_dim),
            ("s", self.s),
            ("d_v", self.d_v),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.kinds.len() != 1 && self.kinds.len() != self.layers {
            return Err(Error::Config(format!(
                "{} attention kinds for {} layers",
                self.kinds.len(),
                self.layers
            )));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!(
                "eta must be finite and nonnegative, got {}",
                self.eta
            )));
        }
        let fmap = FeatureMapSpec::from_config(&self.feature_map, self.head_dim)?;
        let any_primal = (0..self.layers).any(|l| self.kind(l) == AttentionKind::Primal);
        if let ModeConfig::DataDependent { rank_multi } = self.mode {
            if rank_multi == 0 {
                return Err(Error::Config("rank_multi must be positive".into()));
            }
            if any_primal && fmap.output_dim() != self.d_model {
                return Err(Error::Config(format!(
                    "data-dependent primal heads need feature width p == d_model ({} != {})",
                    fmap.output_dim(),
                    self.d_model
                )));
            }
        }
        Ok(())
    }

    pub fn projection_mode(&self, layer: usize, head: usize) -> ProjectionMode {
        match self.mode {
            ModeConfig::DataIndependent => ProjectionMode::DataIndependent,
            ModeConfig::DataDependent { rank_multi } => ProjectionMode::DataDependent {
                rank_multi,
                subsample_seed: rng::derive_seed(self.seed, 0x5ab5_0000 + (layer * self.heads + head) as u64),
            },
        }
    }
}

pub fn head_prefix(layer: usize, head: usize) -> String {
    format!("layer{layer}.head{head}")
}

/// Parameters and configuration of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub shape: ModelShape,
    pub params: BTreeMap<String, Matrix>,
    fmap: FeatureMapSpec,
}

/// Result of one differentiable forward pass over a batch.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub tape: Tape,
    pub loss: Var,
    pub task_loss: f64,
    pub total: f64,
    pub report: KsvdLossReport,
    /// One row of logits or predictions per example.
    pub outputs: Matrix,
}

struct SeqGraph {
    pooled: Var,
    tokens: Var,
    inputs: Vec<Var>,
    /// `j[l][h]` for primal layers, in layer order.
    j: Vec<Vec<Var>>,
}

fn with_layer<T>(r: Result<T>, layer: usize) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite(what) => Error::NonFinite(format!("layer {layer}: {what}")),
        other => other,
    })
}

impl Model {
    /// Initializes every tensor from `config.seed`: projection, output and
    /// feed-forward weights uniform in `±1/√fan_in`, embeddings standard
    /// normal (positional ones scaled by 0.1), biases zero and `Λ = I`.
    pub fn new(config: ModelConfig, shape: ModelShape) -> Result<Self> {
        config.validate()?;
        if shape.seq_len == 0 || shape.outputs() == 0 {
            return Err(Error::Config(
                "the task must have positive length and output width".into(),
            ));
        }
        let fmap = FeatureMapSpec::from_config(&config.feature_map, config.head_dim)?;
        let mut g = rng::seeded(config.seed);
        let d = config.d_model;
        let mut params = BTreeMap::new();
        let mut put = |name: String, m: Matrix| {
            params.insert(name, m);
        };
        let fan = |n: usize| 1.0 / math::sqrt(n as f64);
        match shape.input {
            InputSpec::Tokens { vocab } => put("embed.token".into(), rng::normal_matrix(&mut g, vocab, d)),
            InputSpec::Continuous { dim } => put("embed.input".into(), rng::uniform_matrix(&mut g, d, dim, fan(dim))),
        }
        put(
            "embed.pos".into(),
            rng::normal_matrix(&mut g, shape.seq_len, d).scale(0.1)?,
        );
        for l in 0..config.layers {
            for h in 0..config.heads {
                let pre = head_prefix(l, h);
                put(
                    format!("{pre}.w_q"),
                    rng::uniform_matrix(&mut g, config.head_dim, d, fan(d)),
                );
                put(
                    format!("{pre}.w_k"),
                    rng::uniform_matrix(&mut g, config.head_dim, d, fan(d)),
                );
                match config.kind(l) {
                    AttentionKind::Primal => {
                        let mode = config.projection_mode(l, h);
                        let rows = weight_rows(mode, config.causal, fmap.output_dim(), config.s, shape.seq_len);
                        put(
                            format!("{pre}.w_e"),
                            rng::uniform_matrix(&mut g, rows, config.s, fan(rows)),
                        );
                        put(
                            format!("{pre}.w_r"),
                            rng::uniform_matrix(&mut g, rows, config.s, fan(rows)),
                        );
                        put(format!("{pre}.lambda_raw"), Matrix::zeros(1, config.s));
                        put(
                            format!("{pre}.w_o"),
                            rng::uniform_matrix(&mut g, config.d_v, 2 * config.s, fan(2 * config.s)),
                        );
                    }
                    AttentionKind::Canonical => {
                        put(format!("{pre}.w_v"), rng::uniform_matrix(&mut g, config.d_v, d, fan(d)));
                    }
                }
            }
            let hv = config.heads * config.d_v;
            put(format!("layer{l}.mixer"), rng::uniform_matrix(&mut g, d, hv, fan(hv)));
            put(
                format!("layer{l}.ffn.w1"),
                rng::uniform_matrix(&mut g, 2 * d, d, fan(d)),
            );
            put(format!("layer{l}.ffn.b1"), Matrix::zeros(1, 2 * d));
            put(
                format!("layer{l}.ffn.w2"),
                rng::uniform_matrix(&mut g, d, 2 * d, fan(2 * d)),
            );
            put(format!("layer{l}.ffn.b2"), Matrix::zeros(1, d));
        }
        let out = shape.outputs();
        put("out.w".into(), rng::uniform_matrix(&mut g, out, d, fan(d)));
        put("out.b".into(), Matrix::zeros(1, out));
        Ok(Model {
            config,
            shape,
            params,
            fmap,
        })
    }

    pub fn fmap(&self) -> &FeatureMapSpec {
        &self.fmap
    }

    pub fn param(&self, name: &str) -> Result<&Matrix> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("model has no tensor named {name}")))
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set_param(&mut self, name: &str, value: Matrix) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("model has no tensor named {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "set_param",
                format!("{name}: {:?} vs {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    /// Zeroes the output layer so every prediction is the same.
    pub fn zero_output_head(&mut self) {
        for name in ["out.w", "out.b"] {
            let m = &self.params[name];
            let z = Matrix::zeros(m.rows(), m.cols());
            self.params.insert(name.into(), z);
        }
    }

    /// Fails with `NonFinite` if a parameter is not finite or some Λ entry
    /// over- or underflows.
    pub fn check_params(&self) -> Result<()> {
        for (name, m) in &self.params {
            if let Some(v) = m.as_slice().iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("{name} holds {v}")));
            }
            if name.ends_with(".lambda_raw") {
                if let Some(v) = m.as_slice().iter().find(|&&v| !math::exp(v).is_normal()) {
                    return Err(Error::NonFinite(format!("{name} = {v} puts Λ out of range")));
                }
            }
        }
        Ok(())
    }

    pub fn primal_layers(&self) -> Vec<usize> {
        (0..self.config.layers)
            .filter(|&l| self.config.kind(l) == AttentionKind::Primal)
            .collect()
    }

    /// The parameters of a primal head in attention-core form.
    pub fn head_params(&self, layer: usize, head: usize) -> Result<HeadParams> {
        let pre = head_prefix(layer, head);
        if self.config.kind(layer) != AttentionKind::Primal {
            return Err(Error::Config(format!("layer {layer} is not a primal layer")));
        }
        HeadParams::new(
            ProjectionSet::new(
                self.param(&format!("{pre}.w_q"))?.clone(),
                self.param(&format!("{pre}.w_k"))?.clone(),
                None,
            )?,
            self.param(&format!("{pre}.w_e"))?.clone(),
            self.param(&format!("{pre}.w_r"))?.clone(),
            self.param(&format!("{pre}.lambda_raw"))?.as_slice().to_vec(),
            self.config.projection_mode(layer, head),
            self.config.causal,
        )
    }

    pub fn head_out_map(&self, layer: usize, head: usize) -> Result<OutputMap> {
        Ok(OutputMap {
            w_o: self.param(&format!("{}.w_o", head_prefix(layer, head)))?.clone(),
        })
    }

    fn leaves(&self, tape: &mut Tape) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), tape.param(k, v.clone())))
            .collect()
    }

    fn check_input(&self, input: &Input) -> Result<()> {
        let n = input.len();
        if n == 0 || n > self.shape.seq_len {
            return Err(Error::shape(
                "model input",
                format!("length {n} outside 1..={}", self.shape.seq_len),
            ));
        }
        match (input, self.shape.input) {
            (Input::Tokens(t), InputSpec::Tokens { vocab }) => {
                if let Some(bad) = t.iter().find(|&&v| v >= vocab) {
                    return Err(Error::shape(
                        "model input",
                        format!("token {bad} outside a vocabulary of {vocab}"),
                    ));
                }
            }
            (Input::Features(m), InputSpec::Continuous { dim }) => {
                if m.cols() != dim {
                    return Err(Error::shape(
                        "model input",
                        format!("{} features, expected {dim}", m.cols()),
                    ));
                }
            }
            _ => return Err(Error::shape("model input", "input kind does not match the task")),
        }
        Ok(())
    }

    fn embed(&self, tape: &mut Tape, p: &BTreeMap<String, Var>, input: &Input) -> Result<Var> {
        let n = input.len();
        let base = match input {
            Input::Tokens(t) => tape.select_rows(p["embed.token"], t)?,
            Input::Features(m) => {
                let x = tape.constant(m.clone());
                tape.matmul_nt(x, p["embed.input"])?
            }
        };
        let pos = if n == self.shape.seq_len {
            p["embed.pos"]
        } else {
            tape.select_rows(p["embed.pos"], &(0..n).collect::<Vec<_>>())?
        };
        tape.add(base, pos)
    }

    fn feature(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        match self.fmap.kind() {
            FeatureKind::Identity => Ok(z),
            FeatureKind::Cosine => tape.row_normalize(z, self.fmap.epsilon()),
            FeatureKind::RandomExponential => {
                let dirs = tape.constant(self.fmap.directions().expect("random map carries directions").clone());
                let proj = tape.matmul_nt(z, dirs)?;
                let sq = tape.row_sq_norm(z)?;
                let half = tape.scale(sq, -0.5)?;
                let arg = tape.add_col(proj, half)?;
                tape.exp(arg)
            }
        }
    }

    // Returns the head output (N × d_v) and its J.
    fn primal_head(
        &self,
        tape: &mut Tape,
        p: &BTreeMap<String, Var>,
        x: Var,
        layer: usize,
        head: usize,
    ) -> Result<(Var, Var)> {
        let pre = head_prefix(layer, head);
        let v = |name: &str| p[&format!("{pre}.{name}")];
        let n = tape.value(x).rows();
        let q = tape.matmul_nt(x, v("w_q"))?;
        let k = tape.matmul_nt(x, v("w_k"))?;
        let phi_q = self.feature(tape, q)?;
        let phi_k = self.feature(tape, k)?;
        let causal = self.config.causal;
        let (mut e, mut r) = match self.config.projection_mode(layer, head) {
            ProjectionMode::DataIndependent => (tape.matmul(phi_q, v("w_e"))?, tape.matmul(phi_k, v("w_r"))?),
            ProjectionMode::DataDependent { .. } if causal => {
                let rows: Vec<usize> = (0..n).collect();
                let mut side = |phi: Var, w: Var| -> Result<Var> {
                    let mix = tape.matmul_nt(phi, x)?;
                    let mix = tape.mask_lower(mix)?;
                    let w = tape.select_rows(w, &rows)?;
                    tape.matmul(mix, w)
                };
                (side(phi_q, v("w_e"))?, side(phi_k, v("w_r"))?)
            }
            mode @ ProjectionMode::DataDependent { .. } => {
                let head_params = HeadParams {
                    mode,
                    ..self.head_params(layer, head)?
                };
                let sample = crate::attention::build_fx(tape.value(x), &head_params)?;
                if sample.indices.len() != tape.value(v("w_e")).rows() {
                    return Err(Error::shape(
                        "primal head",
                        format!(
                            "F_X has {} rows, W_e {}",
                            sample.indices.len(),
                            tape.value(v("w_e")).rows()
                        ),
                    ));
                }
                let fx = tape.select_rows(x, &sample.indices)?;
                let we_x = tape.matmul_tn(fx, v("w_e"))?;
                let wr_x = tape.matmul_tn(fx, v("w_r"))?;
                (tape.matmul(phi_q, we_x)?, tape.matmul(phi_k, wr_x)?)
            }
        };
        if self.fmap.needs_normalizer() {
            let d = if causal {
                let run = tape.cumsum_rows(phi_k)?;
                let prod = tape.mul(phi_q, run)?;
                tape.row_sum(prod)?
            } else {
                let ks = tape.col_sum(phi_k)?;
                tape.matmul_nt(phi_q, ks)?
            };
            let inv = tape.powf(d, -0.5)?;
            e = tape.mul_col(e, inv)?;
            r = tape.mul_col(r, inv)?;
        }
        let cat = tape.concat_cols(&[e, r])?;
        let out = tape.matmul_nt(cat, v("w_o"))?;

        let lambda = tape.exp(v("lambda_raw"))?;
        let mut quad = |s: Var| -> Result<Var> {
            let sq = tape.mul(s, s)?;
            let w = tape.mul_row(sq, lambda)?;
            tape.sum(w)
        };
        let qe = quad(e)?;
        let qr = quad(r)?;
        let both = tape.add(qe, qr)?;
        let half = tape.scale(both, 0.5)?;
        let prod = tape.mul(v("w_e"), v("w_r"))?;
        let tr = tape.sum(prod)?;
        let j = tape.sub(half, tr)?;
        Ok((out, j))
    }

    fn canonical_head(
        &self,
        tape: &mut Tape,
        p: &BTreeMap<String, Var>,
        x: Var,
        layer: usize,
        head: usize,
    ) -> Result<Var> {
        let pre = head_prefix(layer, head);
        let q = tape.matmul_nt(x, p[&format!("{pre}.w_q")])?;
        let k = tape.matmul_nt(x, p[&format!("{pre}.w_k")])?;
        let v = tape.matmul_nt(x, p[&format!("{pre}.w_v")])?;
        let logits = tape.matmul_nt(q, k)?;
        let logits = tape.scale(logits, 1.0 / math::sqrt(self.config.head_dim as f64))?;
        let a = tape.row_softmax(logits, self.config.causal)?;
        tape.matmul(a, v)
    }

    // One residual block. Returns the new stream, the attention input and
    // the J of every primal head.
    fn block(&self, tape: &mut Tape, p: &BTreeMap<String, Var>, h: Var, l: usize) -> Result<(Var, Var, Vec<Var>)> {
        let x = tape.standardize(h, STANDARDIZE_EPS)?;
        let mut outs = Vec::with_capacity(self.config.heads);
        let mut js = Vec::new();
        for hd in 0..self.config.heads {
            match self.config.kind(l) {
                AttentionKind::Primal => {
                    let (o, j) = self.primal_head(tape, p, x, l, hd)?;
                    outs.push(o);
                    js.push(j);
                }
                AttentionKind::Canonical => outs.push(self.canonical_head(tape, p, x, l, hd)?),
            }
        }
        let cat = tape.concat_cols(&outs)?;
        let mixed = tape.matmul_nt(cat, p[&format!("layer{l}.mixer")])?;
        let h = tape.add(h, mixed)?;
        let z = tape.standardize(h, STANDARDIZE_EPS)?;
        let a = tape.matmul_nt(z, p[&format!("layer{l}.ffn.w1")])?;
        let a = tape.add_row(a, p[&format!("layer{l}.ffn.b1")])?;
        let a = tape.relu(a)?;
        let b = tape.matmul_nt(a, p[&format!("layer{l}.ffn.w2")])?;
        let b = tape.add_row(b, p[&format!("layer{l}.ffn.b2")])?;
        let h = tape.add(h, b)?;
        for v in [x, h] {
            tape.value(v).check_finite("residual stream")?;
        }
        Ok((h, x, js))
    }

    fn sequence(&self, tape: &mut Tape, p: &BTreeMap<String, Var>, input: &Input) -> Result<SeqGraph> {
        self.check_input(input)?;
        let mut h = self.embed(tape, p, input)?;
        let mut j = Vec::new();
        let mut inputs = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            let (next, x, js) = with_layer(self.block(tape, p, h, l), l)?;
            h = next;
            inputs.push(x);
            if !js.is_empty() {
                j.push(js);
            }
        }
        let fin = tape.standardize(h, STANDARDIZE_EPS)?;
        let pooled = if self.config.causal {
            let n = tape.value(fin).rows();
            tape.select_rows(fin, &[n - 1])?
        } else {
            tape.mean_rows(fin)?
        };
        let tokens = tape.matmul_nt(fin, p["out.w"])?;
        let tokens = tape.add_row(tokens, p["out.b"])?;
        let pooled = tape.matmul_nt(pooled, p["out.w"])?;
        let pooled = tape.add_row(pooled, p["out.b"])?;
        Ok(SeqGraph {
            pooled,
            tokens,
            inputs,
            j,
        })
    }

    /// Loss `L + η Σ_l J_l²` over a batch, recorded on a fresh tape.
    pub fn forward_loss(&self, batch: &[&Example]) -> Result<ForwardPass> {
        if batch.is_empty() {
            return Err(Error::shape("forward_loss", "empty batch"));
        }
        let mut tape = Tape::new();
        let p = self.leaves(&mut tape);
        let mut pooled = Vec::with_capacity(batch.len());
        let mut js: Vec<Vec<Vec<Var>>> = Vec::new();
        for ex in batch {
            let g = self.sequence(&mut tape, &p, &ex.input)?;
            pooled.push(g.pooled);
            js.push(g.j);
        }
        let outputs = tape.concat_rows(&pooled)?;
        let task = match self.shape.head {
            TaskHead::Classification { classes } => {
                let labels = batch
                    .iter()
                    .map(|ex| match ex.target {
                        Target::Class(c) if c < classes => Ok(c),
                        _ => Err(Error::shape(
                            "forward_loss",
                            "target does not match a classification head",
                        )),
                    })
                    .collect::<Result<Vec<_>>>()?;
                tape.cross_entropy(outputs, &labels)?
            }
            TaskHead::Regression { dim } => {
                let mut data = Vec::with_capacity(batch.len() * dim);
                for ex in batch {
                    match &ex.target {
                        Target::Values(v) if v.len() == dim => data.extend_from_slice(v),
                        _ => return Err(Error::shape("forward_loss", "target does not match a regression head")),
                    }
                }
                let t = tape.constant(Matrix::new(batch.len(), dim, data)?);
                tape.mse(outputs, t)?
            }
        };

        let n_primal = js.first().map_or(0, |j| j.len());
        let mut per_head = vec![Vec::new(); n_primal];
        let mut layer_j = Vec::with_capacity(n_primal);
        for li in 0..n_primal {
            let heads = js[0][li].len();
            let all: Vec<Var> = js.iter().flat_map(|j| j[li].iter().copied()).collect();
            let stacked = tape.concat_rows(&all)?;
            let total = tape.sum(stacked)?;
            layer_j.push(tape.scale(total, 1.0 / all.len() as f64)?);
            for h in 0..heads {
                let mean = js.iter().map(|j| tape.scalar(j[li][h])).sum::<f64>() / batch.len() as f64;
                per_head[li].push(mean);
            }
        }
        let loss = if layer_j.is_empty() {
            task
        } else {
            let stacked = tape.concat_rows(&layer_j)?;
            let sq = tape.mul(stacked, stacked)?;
            let s = tape.sum(sq)?;
            let pen = tape.scale(s, self.config.eta)?;
            tape.add(task, pen)?
        };
        let mut report = KsvdLossReport::new(per_head, self.config.eta)?;
        report.per_layer_j = layer_j.iter().map(|&v| tape.scalar(v)).collect();
        report.penalty = crate::objective::penalty(&report.per_layer_j, self.config.eta);
        let task_loss = tape.scalar(task);
        let total = tape.scalar(loss);
        if !total.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let outputs = tape.value(outputs).clone();
        Ok(ForwardPass {
            tape,
            loss,
            task_loss,
            total,
            report,
            outputs,
        })
    }

    /// Pooled logits (classification) or predictions (regression).
    pub fn predict(&self, input: &Input) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.leaves(&mut tape);
        let g = self.sequence(&mut tape, &p, input)?;
        Ok(tape.value(g.pooled).as_slice().to_vec())
    }

    /// Output head applied to every position (`N × outputs`).
    pub fn token_outputs(&self, input: &Input) -> Result<Matrix> {
        let mut tape = Tape::new();
        let p = self.leaves(&mut tape);
        let g = self.sequence(&mut tape, &p, input)?;
        Ok(tape.value(g.tokens).clone())
    }

    /// Inputs of every attention layer (the standardized residual stream).
    pub fn layer_inputs(&self, input: &Input) -> Result<Vec<Matrix>> {
        let mut tape = Tape::new();
        let p = self.leaves(&mut tape);
        let g = self.sequence(&mut tape, &p, input)?;
        Ok(g.inputs.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// The matrix analyzed for head `head` of layer `layer`: the induced
    /// asymmetric kernel for a primal layer, the softmax attention matrix
    /// for a canonical one.
    pub fn attention_matrix(&self, input: &Input, layer: usize, head: usize) -> Result<Matrix> {
        if layer >= self.config.layers || head >= self.config.heads {
            return Err(Error::Config(format!("no head {head} in layer {layer}")));
        }
        let x = self.layer_inputs(input)?.swap_remove(layer);
        match self.config.kind(layer) {
            AttentionKind::Primal => {
                let mut hp = self.head_params(layer, head)?;
                // The kernel is defined without the causal restriction.
                hp.causal = false;
                if let (ProjectionMode::DataDependent { subsample_seed, .. }, true) = (hp.mode, self.config.causal) {
                    // Full-sequence F_X, as the causal head uses.
                    hp.mode = ProjectionMode::DataDependent {
                        rank_multi: x.rows().div_ceil(hp.s()),
                        subsample_seed,
                    };
                }
                build_kernel(&x, &hp, &self.fmap)
            }
            AttentionKind::Canonical => {
                let pre = head_prefix(layer, head);
                let q = x.matmul_nt(self.param(&format!("{pre}.w_q"))?)?;
                let k = x.matmul_nt(self.param(&format!("{pre}.w_k"))?)?;
                softmax_attention_matrix(&q, &k, self.config.causal)
            }
        }
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.params.values().map(|m| m.rows() * m.cols()).sum()
    }
}

/// Settings of [`gradient_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates certified per tensor (every coordinate of smaller tensors).
    pub coords_per_tensor: usize,
    pub tolerance: f64,
    /// Lower bound on the denominator of the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            coords_per_tensor: 64,
            tolerance: 1e-4,
            floor: 1e-7,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a ReLU or normalization kink.
    pub skipped: usize,
    pub max_rel_error: f64,
    /// `(flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, f64, f64)>,
}

impl TensorCheck {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// Compares reverse-mode gradients of [`Model::forward_loss`] against
/// central finite differences, tensor by tensor.
pub fn gradient_check(model: &Model, batch: &[&Example], opts: &GradCheckOptions) -> Result<Vec<TensorCheck>> {
    let base = model.forward_loss(batch)?;
    let grads = base.tape.backward(base.loss)?;
    let pattern = base.tape.branch_pattern();
    let mut g = rng::seeded(opts.seed);
    let mut probe = model.clone();
    let mut out = Vec::new();
    for (name, value) in &model.params {
        let analytic = grads
            .get(name)
            .ok_or_else(|| Error::TapeIntegrity(format!("no gradient for {name}")))?;
        let size = value.rows() * value.cols();
        // Coordinates are visited in random order until enough of them lie
        // away from a kink.
        let order = rng::permutation(&mut g, size);
        let mut check = TensorCheck {
            name: name.clone(),
            checked: 0,
            skipped: 0,
            max_rel_error: 0.0,
            worst: None,
        };
        for idx in order {
            if check.checked == opts.coords_per_tensor {
                break;
            }
            let mut eval = |delta: f64| -> Result<(f64, Vec<bool>)> {
                let mut m = value.clone();
                m.as_mut_slice()[idx] += delta;
                probe.params.insert(name.clone(), m);
                let pass = probe.forward_loss(batch)?;
                Ok((pass.total, pass.tape.branch_pattern()))
            };
            let (plus, pp) = eval(opts.step)?;
            let (minus, pm) = eval(-opts.step)?;
            probe.params.insert(name.clone(), value.clone());
            if pp != pattern || pm != pattern {
                check.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.as_slice()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            check.checked += 1;
            if rel > check.max_rel_error || check.worst.is_none() {
                check.max_rel_error = check.max_rel_error.max(rel);
                check.worst = Some((idx, a, numeric));
            }
        }
        out.push(check);
    }
    Ok(out)
}
