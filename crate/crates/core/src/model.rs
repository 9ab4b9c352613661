//! The micro U-Net denoiser with a control branch and two
//! separate-and-gather adapters.
//!
//! Layout of one forward pass:
//!
//! ```text
//! example pair ─ SGA-E ─┐
//!                       + ─ upsample ─┐
//! query ──────── SGA-Q ─┘             + ─ control encoder ─ zero 1x1 ─┐
//! x_t ─ conv_in_c ────────────────────┘                               │
//! x_t ─ conv_in ─ encoder ─ mid ─────────── decoder (skips + control) ┴─ eps
//! ```
//!
//! Time enters through a sinusoidal embedding plus a learned per-task
//! vector, added as a channel bias inside every residual block.

use std::collections::HashMap;

use crate::data::ContextBatch;
use crate::diffusion::GraphDenoiser;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Float, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub num_tasks: usize,
    pub time_embed_dim: usize,
    pub task_embed_dim: usize,
    /// Per-task adapter branches; when false a single branch serves all tasks.
    pub sga: bool,
    pub sga_channels: usize,
    /// Convolutions per adapter branch; the first `depth - 1` use stride 2.
    pub sga_convs: usize,
}

impl ModelConfig {
    /// 32x32 RGB, 32 base channels, three levels.
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            base_channels: 32,
            depth: 3,
            num_tasks: 6,
            time_embed_dim: 64,
            task_embed_dim: 128,
            sga: true,
            sga_channels: 32,
            sga_convs: 3,
        }
    }

    /// 8x8, 8 base channels: small enough for exhaustive gradient checks.
    pub fn micro() -> Self {
        Self {
            image_size: 8,
            base_channels: 8,
            depth: 3,
            num_tasks: 6,
            time_embed_dim: 8,
            task_embed_dim: 16,
            sga: true,
            sga_channels: 8,
            sga_convs: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("base_channels", self.base_channels),
            ("depth", self.depth),
            ("num_tasks", self.num_tasks),
            ("time_embed_dim", self.time_embed_dim),
            ("task_embed_dim", self.task_embed_dim),
            ("sga_channels", self.sga_channels),
            ("sga_convs", self.sga_convs),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("model.{name} must be positive")));
        }
        let factor = 1usize << (self.depth - 1);
        if !self.image_size.is_multiple_of(factor) {
            return Err(Error::invalid(format!(
                "image_size {} is not divisible by 2^(depth-1) = {factor}",
                self.image_size
            )));
        }
        if !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::invalid("time_embed_dim must be even"));
        }
        if self.sga_convs < self.depth - 1 {
            return Err(Error::invalid("sga_convs must be at least depth - 1"));
        }
        Ok(())
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * if level == 0 { 1 } else { 2 }
    }

    /// Spatial size of the adapter output.
    pub fn control_resolution(&self) -> usize {
        self.image_size >> (self.depth - 1)
    }

    pub fn sga_branches(&self) -> usize {
        if self.sga {
            self.num_tasks
        } else {
            1
        }
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug)]
pub struct ParamStore<F: Float> {
    names: Vec<String>,
    values: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Float> Default for ParamStore<F> {
    fn default() -> Self {
        Self { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }
}

impl<F: Float> ParamStore<F> {
    fn add(&mut self, name: String, t: Tensor<F>) -> usize {
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(t);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<F>] {
        &self.values
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.id(name).map(|i| &self.values[i])
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.values
    }

    pub fn value(&self, id: usize) -> &Tensor<F> {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Tensor<F> {
        &mut self.values[id]
    }

    /// Replaces a tensor; the shape must not change.
    pub fn set(&mut self, name: &str, t: Tensor<F>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        if self.values[id].shape() != t.shape() {
            return Err(Error::shape(
                "ParamStore::set",
                format!("{name}: {:?} vs {:?}", self.values[id].shape(), t.shape()),
            ));
        }
        self.values[id] = t;
        Ok(())
    }

    /// Ids of every parameter whose name starts with `prefix`.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.names[i].starts_with(prefix)).collect()
    }

    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore { names: self.names.clone(), values: self.values.iter().map(Tensor::cast).collect(), index: self.index.clone() }
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: usize,
    beta: usize,
    groups: usize,
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    emb: Dense,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

#[derive(Clone, Debug)]
struct Encoder {
    conv_in: Conv,
    levels: Vec<ResBlock>,
    mid: ResBlock,
}

/// Adapter with per-task branches and a shared gather module.
#[derive(Clone, Debug)]
pub struct SgaAdapter {
    /// `"E"` or `"Q"`.
    pub variant: &'static str,
    pub in_channels: usize,
    branches: Vec<Vec<Conv>>,
    shared: Conv,
    prefix: String,
}

impl SgaAdapter {
    pub fn num_branches(&self) -> usize {
        self.branches.len()
    }

    /// Parameter-name prefix of branch `j`.
    pub fn branch_prefix(&self, j: usize) -> String {
        format!("{}.branch{j}.", self.prefix)
    }

    pub fn shared_prefix(&self) -> String {
        format!("{}.shared.", self.prefix)
    }
}

/// Groups for a channel count: 4, or `c` when `c < 4`.
pub fn norm_groups(c: usize) -> usize {
    if c < 4 {
        c
    } else {
        4
    }
}

/// Sinusoidal embedding `[sin(f0 t), cos(f0 t), sin(f1 t), ...]` with
/// frequencies geometrically spaced from 1 down to 1e-4.
pub fn time_embed<F: Float>(t: usize, dim: usize) -> Result<Tensor<F>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::invalid(format!("time_embed dim must be even and positive, got {dim}")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = if half == 1 { 1.0 } else { 10_000f64.powf(-(i as f64) / (half - 1) as f64) };
        let a = t as f64 * freq;
        out.push(F::of(a.sin()));
        out.push(F::of(a.cos()));
    }
    Tensor::from_vec(&[dim], out)
}

/// Elementwise sum of the two adapter outputs.
pub fn control_input<F: Float>(g: &mut Graph<F>, f_e: Var, f_q: Var) -> Result<Var> {
    g.add(f_e, f_q)
}

struct Builder<'a, F: Float> {
    store: ParamStore<F>,
    rng: &'a mut Rng,
}

impl<F: Float> Builder<'_, F> {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> usize {
        let t = self.rng.normal_tensor::<F>(shape).map(|v| v * F::of(std));
        self.store.add(name, t)
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> usize {
        self.store.add(name, Tensor::zeros(shape))
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Conv {
        let fan_in = (c_in * k * k) as f64;
        let w = self.normal(format!("{name}.w"), &[c_out, c_in, k, k], fan_in.sqrt().recip());
        let b = self.zeros(format!("{name}.b"), &[c_out]);
        Conv { w, b, stride, pad: k / 2 }
    }

    fn zero_conv(&mut self, name: &str, c: usize) -> Conv {
        let w = self.zeros(format!("{name}.w"), &[c, c, 1, 1]);
        let b = self.zeros(format!("{name}.b"), &[c]);
        Conv { w, b, stride: 1, pad: 0 }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        let gamma = self.store.add(format!("{name}.gamma"), Tensor::full(&[c], F::one()));
        let beta = self.zeros(format!("{name}.beta"), &[c]);
        Norm { gamma, beta, groups: norm_groups(c) }
    }

    fn dense(&mut self, name: &str, d_in: usize, d_out: usize) -> Dense {
        let w = self.normal(format!("{name}.w"), &[d_out, d_in], (d_in as f64).sqrt().recip());
        let b = self.zeros(format!("{name}.b"), &[d_out]);
        Dense { w, b }
    }

    fn res_block(&mut self, name: &str, c_in: usize, c_out: usize, emb_dim: usize) -> ResBlock {
        ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), c_in),
            conv1: self.conv(&format!("{name}.conv1"), c_in, c_out, 3, 1),
            emb: self.dense(&format!("{name}.emb"), emb_dim, c_out),
            norm2: self.norm(&format!("{name}.norm2"), c_out),
            conv2: self.conv(&format!("{name}.conv2"), c_out, c_out, 3, 1),
            skip: (c_in != c_out).then(|| self.conv(&format!("{name}.skip"), c_in, c_out, 1, 1)),
        }
    }

    fn encoder(&mut self, name: &str, cfg: &ModelConfig) -> Encoder {
        let e = cfg.task_embed_dim;
        let conv_in = self.conv(&format!("{name}.conv_in"), 3, cfg.base_channels, 3, 1);
        let mut c_prev = cfg.base_channels;
        let levels = (0..cfg.depth)
            .map(|l| {
                let c = cfg.level_channels(l);
                let b = self.res_block(&format!("{name}.level{l}"), c_prev, c, e);
                c_prev = c;
                b
            })
            .collect();
        let mid = self.res_block(&format!("{name}.mid"), c_prev, c_prev, e);
        Encoder { conv_in, levels, mid }
    }

    fn adapter(&mut self, variant: &'static str, in_channels: usize, cfg: &ModelConfig) -> SgaAdapter {
        let prefix = format!("sga_{}", variant.to_lowercase());
        let cs = cfg.sga_channels;
        let branches = (0..cfg.sga_branches())
            .map(|j| {
                (0..cfg.sga_convs)
                    .map(|i| {
                        let c_in = if i == 0 { in_channels } else { cs };
                        let stride = if i < cfg.depth - 1 { 2 } else { 1 };
                        self.conv(&format!("{prefix}.branch{j}.conv{i}"), c_in, cs, 3, stride)
                    })
                    .collect()
            })
            .collect();
        let shared = self.conv(&format!("{prefix}.shared.conv"), cs, cfg.base_channels, 3, 1);
        SgaAdapter { variant, in_channels, branches, shared, prefix }
    }
}

/// The conditional noise predictor.
#[derive(Clone, Debug)]
pub struct DenoiserModel<F: Float> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    time_mlp: (Dense, Dense),
    task_table: usize,
    unet: Encoder,
    decoder: Vec<ResBlock>,
    out_norm: Norm,
    conv_out: Conv,
    control: Encoder,
    control_proj: Vec<Conv>,
    control_proj_mid: Conv,
    pub sga_e: SgaAdapter,
    pub sga_q: SgaAdapter,
}

impl<F: Float> DenoiserModel<F> {
    /// Deterministic initialisation from `rng`. The control encoder starts
    /// as a copy of the U-Net encoder; every control projection is zero.
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut b = Builder { store: ParamStore::default(), rng };
        let e = config.task_embed_dim;
        let time_mlp = (b.dense("time.fc1", config.time_embed_dim, e), b.dense("time.fc2", e, e));
        let task_table = b.normal("task_table".into(), &[config.num_tasks, e], 1.0);
        let unet = b.encoder("unet", &config);
        let mut decoder = Vec::with_capacity(config.depth);
        let mut c_h = config.level_channels(config.depth - 1);
        for l in (0..config.depth).rev() {
            let c = config.level_channels(l);
            decoder.push(b.res_block(&format!("unet.dec{l}"), c_h + c, c, e));
            c_h = c;
        }
        let out_norm = b.norm("unet.out_norm", config.base_channels);
        let conv_out = b.conv("unet.conv_out", config.base_channels, 3, 3, 1);

        let control = b.encoder("control", &config);
        for (src, dst) in b.store.ids_with_prefix("unet.").into_iter().zip(b.store.ids_with_prefix("control.")) {
            debug_assert_eq!(&b.store.names[src][5..], &b.store.names[dst][8..]);
            b.store.values[dst] = b.store.values[src].clone();
        }
        let control_proj = (0..config.depth)
            .map(|l| b.zero_conv(&format!("control.proj{l}"), config.level_channels(l)))
            .collect();
        let control_proj_mid = b.zero_conv("control.proj_mid", config.level_channels(config.depth - 1));

        let sga_e = b.adapter("E", 6, &config);
        let sga_q = b.adapter("Q", 3, &config);
        let params = b.store;
        Ok(Self {
            config,
            params,
            time_mlp,
            task_table,
            unet,
            decoder,
            out_norm,
            conv_out,
            control,
            control_proj,
            control_proj_mid,
            sga_e,
            sga_q,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Ids of the zero-initialised control projections.
    pub fn projection_ids(&self) -> Vec<usize> {
        self.params.ids_with_prefix("control.proj")
    }

    /// Same architecture with parameters converted to `G`.
    pub fn cast<G: Float>(&self) -> DenoiserModel<G> {
        DenoiserModel {
            config: self.config.clone(),
            params: self.params.cast(),
            time_mlp: self.time_mlp,
            task_table: self.task_table,
            unet: self.unet.clone(),
            decoder: self.decoder.clone(),
            out_norm: self.out_norm,
            conv_out: self.conv_out,
            control: self.control.clone(),
            control_proj: self.control_proj.clone(),
            control_proj_mid: self.control_proj_mid,
            sga_e: self.sga_e.clone(),
            sga_q: self.sga_q.clone(),
        }
    }

    /// Records every parameter on `g`, as trainable leaves or constants.
    pub fn bind<'m>(&'m self, g: &mut Graph<F>, trainable: bool) -> Bound<'m, F> {
        let vars = self.params.values().iter().map(|t| g.leaf(t.clone(), trainable)).collect();
        Bound { model: self, vars, inject_control: true }
    }

    /// Noise prediction outside any caller graph, with one time step for
    /// the whole batch.
    pub fn predict(&self, x_t: &Tensor<F>, t: usize, batch: &ContextBatch<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(x_t.clone());
        let steps = vec![t; x_t.shape()[0]];
        let y = bound.eps_graph(&mut g, x, &steps, batch)?;
        Ok(g.value(y).clone())
    }
}

/// A model whose parameters are recorded on a graph.
pub struct Bound<'m, F: Float> {
    pub model: &'m DenoiserModel<F>,
    pub vars: Vec<Var>,
    /// When false the control features are computed but not added.
    pub inject_control: bool,
}

impl<F: Float> Bound<'_, F> {
    fn p(&self, id: usize) -> Var {
        self.vars[id]
    }

    /// Gradients of every parameter after `g.backward`.
    pub fn grads(&self, g: &Graph<F>) -> Vec<Tensor<F>> {
        self.vars
            .iter()
            .zip(self.model.params.values())
            .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    fn conv(&self, g: &mut Graph<F>, c: Conv, x: Var) -> Result<Var> {
        g.conv2d(x, self.p(c.w), Some(self.p(c.b)), c.stride, c.pad)
    }

    fn norm(&self, g: &mut Graph<F>, n: Norm, x: Var) -> Result<Var> {
        g.group_norm(x, n.groups, self.p(n.gamma), self.p(n.beta), F::of(1e-5))
    }

    fn dense(&self, g: &mut Graph<F>, d: Dense, x: Var) -> Result<Var> {
        g.linear(x, self.p(d.w), self.p(d.b))
    }

    fn res_block(&self, g: &mut Graph<F>, b: &ResBlock, x: Var, emb_act: Var) -> Result<Var> {
        let h = self.norm(g, b.norm1, x)?;
        let h = g.silu(h)?;
        let h = self.conv(g, b.conv1, h)?;
        let bias = self.dense(g, b.emb, emb_act)?;
        let h = g.add_channel(h, bias)?;
        let h = self.norm(g, b.norm2, h)?;
        let h = g.silu(h)?;
        let h = self.conv(g, b.conv2, h)?;
        let skip = match b.skip {
            Some(c) => self.conv(g, c, x)?,
            None => x,
        };
        g.add(h, skip)
    }

    /// Runs `stem` (the result of `conv_in`) through the encoder levels,
    /// returning per-level features and the mid feature.
    fn encode(&self, g: &mut Graph<F>, enc: &Encoder, stem: Var, emb_act: Var) -> Result<(Vec<Var>, Var)> {
        let mut h = stem;
        let mut feats = Vec::with_capacity(enc.levels.len());
        for (l, block) in enc.levels.iter().enumerate() {
            h = self.res_block(g, block, h, emb_act)?;
            feats.push(h);
            if l + 1 < enc.levels.len() {
                h = g.avg_pool2x(h)?;
            }
        }
        let mid = self.res_block(g, &enc.mid, h, emb_act)?;
        Ok((feats, mid))
    }

    /// Conditioning vector `silu(mlp(time) + task)`, `[N, E]`.
    pub fn embedding(&self, g: &mut Graph<F>, steps: &[usize], task_id: usize) -> Result<Var> {
        let m = self.model;
        if task_id >= m.config.num_tasks {
            return Err(Error::UnknownTask { id: task_id, count: m.config.num_tasks });
        }
        let dim = m.config.time_embed_dim;
        let mut rows = Vec::with_capacity(steps.len() * dim);
        for &t in steps {
            rows.extend_from_slice(time_embed::<F>(t, dim)?.data());
        }
        let te = g.constant(Tensor::from_vec(&[steps.len(), dim], rows)?);
        let h = self.dense(g, m.time_mlp.0, te)?;
        let h = g.silu(h)?;
        let h = self.dense(g, m.time_mlp.1, h)?;
        let task = g.select_rows(self.p(m.task_table), &vec![task_id; steps.len()])?;
        let e = g.add(h, task)?;
        g.silu(e)
    }

    /// Routes `input` through branch `task_id` only, then the shared module.
    pub fn sga_forward(&self, g: &mut Graph<F>, a: &SgaAdapter, input: Var, task_id: usize) -> Result<Var> {
        if task_id >= self.model.config.num_tasks {
            return Err(Error::UnknownTask { id: task_id, count: self.model.config.num_tasks });
        }
        let c = g.shape(input)[1];
        if c != a.in_channels {
            return Err(Error::shape("sga_forward", format!("SGA-{} expects {} channels, got {c}", a.variant, a.in_channels)));
        }
        let branch = if a.branches.len() == 1 { &a.branches[0] } else { &a.branches[task_id] };
        let mut h = input;
        for (i, conv) in branch.iter().enumerate() {
            if i > 0 {
                h = g.silu(h)?;
            }
            h = self.conv(g, *conv, h)?;
        }
        let h = g.silu(h)?;
        self.conv(g, a.shared, h)
    }

    /// Summed adapter signal at the control resolution, `[N, base, H', W']`.
    pub fn control_signal(&self, g: &mut Graph<F>, batch: &ContextBatch<F>, task_id: usize) -> Result<Var> {
        let pair = g.constant(batch.example_pair()?);
        let query = g.constant(batch.query.clone());
        let f_e = self.sga_forward(g, &self.model.sga_e, pair, task_id)?;
        let f_q = self.sga_forward(g, &self.model.sga_q, query, task_id)?;
        control_input(g, f_e, f_q)
    }

    /// Full forward pass; `steps` holds one time step per item.
    pub fn forward(&self, g: &mut Graph<F>, x_t: Var, steps: &[usize], batch: &ContextBatch<F>) -> Result<Var> {
        let m = self.model;
        let cfg = &m.config;
        let shape = g.shape(x_t).to_vec();
        let expect = [batch.len(), 3, cfg.image_size, cfg.image_size];
        if shape != expect {
            return Err(Error::shape("denoiser_forward", format!("x_t {shape:?}, expected {expect:?}")));
        }
        if steps.len() != batch.len() || batch.query.shape() != expect.as_slice() {
            return Err(Error::shape("denoiser_forward", "batch and steps must match x_t".to_string()));
        }
        let task_id = batch.task.route_id();
        let emb = self.embedding(g, steps, task_id)?;

        let signal = self.control_signal(g, batch, task_id)?;
        let mut up = signal;
        for _ in 1..cfg.depth {
            up = g.upsample2x(up)?;
        }
        let stem_c = self.conv(g, m.control.conv_in, x_t)?;
        let stem_c = g.add(stem_c, up)?;
        let (ctrl_feats, ctrl_mid) = self.encode(g, &m.control, stem_c, emb)?;

        let stem = self.conv(g, m.unet.conv_in, x_t)?;
        let (mut skips, mut h) = self.encode(g, &m.unet, stem, emb)?;
        if self.inject_control {
            let p = self.conv(g, m.control_proj_mid, ctrl_mid)?;
            h = g.add(h, p)?;
            for (l, skip) in skips.iter_mut().enumerate() {
                let p = self.conv(g, m.control_proj[l], ctrl_feats[l])?;
                *skip = g.add(*skip, p)?;
            }
        }
        for (i, block) in m.decoder.iter().enumerate() {
            let l = cfg.depth - 1 - i;
            let cat = g.concat_channels(&[h, skips[l]])?;
            h = self.res_block(g, block, cat, emb)?;
            if l > 0 {
                h = g.upsample2x(h)?;
            }
        }
        let h = self.norm(g, m.out_norm, h)?;
        let h = g.silu(h)?;
        self.conv(g, m.conv_out, h)
    }
}

impl<F: Float> GraphDenoiser<F> for Bound<'_, F> {
    fn eps_graph(&self, g: &mut Graph<F>, x_t: Var, steps: &[usize], batch: &ContextBatch<F>) -> Result<Var> {
        self.forward(g, x_t, steps, batch)
    }
}
