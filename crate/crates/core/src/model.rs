//! The conditional noise predictor and its low-rank adapters.
//!
//! The denoiser is a fully-connected residual network over flattened images:
//! `concat[x_t, time_proj(sinusoidal t), cond] -> input_proj -> blocks ->
//! output_proj`, where each block is `h + second(relu(first(h)))`. Blocks are
//! partitioned into an input half and an output half; the output half (plus
//! `output_proj`) is the analog of a U-Net's upsampling side for adapter
//! scoping. Every affine layer except the time projection can carry a
//! rank-r additive adapter `w * x @ down @ up`.
//!
//! Forwards run on a [`Graph`], with parameters bound either as leaves
//! (trainable) or constants (frozen); pure prediction wraps a throwaway
//! graph so there is exactly one forward implementation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{HgError, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
    pub cond_table_dim: usize,
    pub num_prompts: usize,
    pub lora_rank: usize,
    pub cond_lora_rank: usize,
}

impl ModelConfig {
    pub fn image_dim(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("channels", self.channels),
            ("height", self.height),
            ("width", self.width),
            ("hidden", self.hidden),
            ("blocks", self.blocks),
            ("time_dim", self.time_dim),
            ("cond_dim", self.cond_dim),
            ("cond_table_dim", self.cond_table_dim),
            ("num_prompts", self.num_prompts),
            ("lora_rank", self.lora_rank),
            ("cond_lora_rank", self.cond_lora_rank),
        ] {
            if v == 0 {
                return Err(HgError::validation(format!("model.{name} must be positive")));
            }
        }
        if self.time_dim % 2 != 0 {
            return Err(HgError::validation("model.time_dim must be even"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Affine {
    pub w: Tensor,
    pub b: Tensor,
}

impl Affine {
    fn init(inp: usize, out: usize, std: f64, rng: &mut RngStream) -> Self {
        Affine {
            w: rng.normal_tensor(vec![inp, out]).scale(std),
            b: Tensor::zeros(vec![out]),
        }
    }
}

/// One low-rank delta: effective weight is `W + weight * down @ up`.
#[derive(Clone, Debug)]
pub struct LowRankAdapter {
    pub down: Tensor,
    pub up: Tensor,
}

impl LowRankAdapter {
    pub fn init(inp: usize, out: usize, rank: usize, rng: &mut RngStream) -> Self {
        // down is random, up starts at zero so the delta starts at zero.
        LowRankAdapter {
            down: rng
                .normal_tensor(vec![inp, rank])
                .scale(1.0 / (inp as f64).sqrt()),
            up: Tensor::zeros(vec![rank, out]),
        }
    }

    pub fn delta(&self) -> Result<Tensor> {
        self.down.matmul(&self.up)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterScope {
    All,
    OutputHalf,
}

/// The persistent adapter set trained across curriculum stages.
#[derive(Clone, Debug)]
pub struct AdapterSet {
    pub rank: usize,
    /// Application weight for the deltas; 1.0 during training, the
    /// configured merge weight at inference.
    pub weight: f64,
    /// Which layers the deltas apply to at forward time.
    pub active_blocks: AdapterScope,
    /// Active timestep window [lo, hi); None means always active.
    pub t_range: Option<(usize, usize)>,
    pub layers: BTreeMap<String, LowRankAdapter>,
}

impl AdapterSet {
    pub fn init(model: &Denoiser, rank: usize, rng: &mut RngStream) -> Self {
        let mut layers = BTreeMap::new();
        for (name, inp, out) in model.adapted_layer_dims() {
            layers.insert(name, LowRankAdapter::init(inp, out, rank, rng));
        }
        AdapterSet {
            rank,
            weight: 1.0,
            active_blocks: AdapterScope::All,
            t_range: None,
            layers,
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (name, a) in &self.layers {
            out.push((format!("lora.{name}.down"), &a.down));
            out.push((format!("lora.{name}.up"), &a.up));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (name, a) in &mut self.layers {
            out.push((format!("lora.{name}.down"), &mut a.down));
            out.push((format!("lora.{name}.up"), &mut a.up));
        }
        out
    }
}

/// Which parameters a training stage binds as differentiable leaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainScope {
    /// Full denoiser + conditioner table/projection (supervised stage).
    DenoiserAndConditioner,
    /// Denoiser adapter set, all layers.
    AdaptersAll,
    /// Denoiser adapter set, output-half layers only.
    AdaptersOutputHalf,
    /// Conditioner adapter only.
    ConditionerAdapter,
    /// Nothing trainable (pure evaluation graph).
    Frozen,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub cfg: ModelConfig,
    pub time_proj: Affine,
    pub input_proj: Affine,
    pub blocks: Vec<(Affine, Affine)>,
    pub output_proj: Affine,
}

impl Denoiser {
    pub fn init(cfg: &ModelConfig, rng: &mut RngStream) -> Self {
        let d = cfg.image_dim();
        let inp = d + cfg.time_dim + cfg.cond_dim;
        let he = |n: usize| (2.0 / n as f64).sqrt();
        let time_proj = Affine::init(cfg.time_dim, cfg.time_dim, 1.0 / (cfg.time_dim as f64).sqrt(), rng);
        let input_proj = Affine::init(inp, cfg.hidden, he(inp), rng);
        let blocks = (0..cfg.blocks)
            .map(|_| {
                (
                    Affine::init(cfg.hidden, cfg.hidden, he(cfg.hidden), rng),
                    Affine::init(cfg.hidden, cfg.hidden, he(cfg.hidden), rng),
                )
            })
            .collect();
        // Small output init keeps the initial prediction near zero without
        // cutting gradient flow to earlier layers.
        let output_proj = Affine::init(cfg.hidden, d, 0.01, rng);
        Denoiser {
            cfg: cfg.clone(),
            time_proj,
            input_proj,
            blocks,
            output_proj,
        }
    }

    /// Layers that can carry adapters, with (name, in_dim, out_dim).
    pub fn adapted_layer_dims(&self) -> Vec<(String, usize, usize)> {
        let d = self.cfg.image_dim();
        let inp = d + self.cfg.time_dim + self.cfg.cond_dim;
        let h = self.cfg.hidden;
        let mut out = vec![("input_proj".to_string(), inp, h)];
        for i in 0..self.cfg.blocks {
            out.push((format!("blk{i}.first"), h, h));
            out.push((format!("blk{i}.second"), h, h));
        }
        out.push(("output_proj".to_string(), h, d));
        out
    }

    /// Output-half membership: the last blocks/2 blocks plus output_proj.
    pub fn in_output_half(&self, layer: &str) -> bool {
        if layer == "output_proj" {
            return true;
        }
        if layer == "input_proj" {
            return false;
        }
        if let Some(rest) = layer.strip_prefix("blk") {
            if let Some(idx) = rest.split('.').next().and_then(|s| s.parse::<usize>().ok()) {
                return idx >= self.cfg.blocks / 2;
            }
        }
        false
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("time_proj.w".to_string(), &self.time_proj.w),
            ("time_proj.b".to_string(), &self.time_proj.b),
            ("input_proj.w".to_string(), &self.input_proj.w),
            ("input_proj.b".to_string(), &self.input_proj.b),
        ];
        for (i, (first, second)) in self.blocks.iter().enumerate() {
            out.push((format!("blk{i}.first.w"), &first.w));
            out.push((format!("blk{i}.first.b"), &first.b));
            out.push((format!("blk{i}.second.w"), &second.w));
            out.push((format!("blk{i}.second.b"), &second.b));
        }
        out.push(("output_proj.w".to_string(), &self.output_proj.w));
        out.push(("output_proj.b".to_string(), &self.output_proj.b));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("time_proj.w".to_string(), &mut self.time_proj.w),
            ("time_proj.b".to_string(), &mut self.time_proj.b),
            ("input_proj.w".to_string(), &mut self.input_proj.w),
            ("input_proj.b".to_string(), &mut self.input_proj.b),
        ];
        for (i, (first, second)) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blk{i}.first.w"), &mut first.w));
            out.push((format!("blk{i}.first.b"), &mut first.b));
            out.push((format!("blk{i}.second.w"), &mut second.w));
            out.push((format!("blk{i}.second.b"), &mut second.b));
        }
        out.push(("output_proj.w".to_string(), &mut self.output_proj.w));
        out.push(("output_proj.b".to_string(), &mut self.output_proj.b));
        out
    }

    /// Bake `weight * down @ up` into every layer the set applies to.
    /// Timestep gating is dropped: the merged model behaves like the gated
    /// forward only where the gate was open.
    pub fn merge_adapters(&self, set: &AdapterSet, weight: f64) -> Result<Denoiser> {
        let mut merged = self.clone();
        for (name, adapter) in &set.layers {
            if set.active_blocks == AdapterScope::OutputHalf && !self.in_output_half(name) {
                continue;
            }
            let delta = adapter.delta()?.scale(weight);
            let target = match name.as_str() {
                "input_proj" => &mut merged.input_proj.w,
                "output_proj" => &mut merged.output_proj.w,
                other => {
                    let rest = other.strip_prefix("blk").ok_or_else(|| {
                        HgError::validation(format!("unknown adapter layer {other}"))
                    })?;
                    let (idx, which) = rest.split_once('.').ok_or_else(|| {
                        HgError::validation(format!("unknown adapter layer {other}"))
                    })?;
                    let idx: usize = idx
                        .parse()
                        .map_err(|_| HgError::validation(format!("unknown adapter layer {other}")))?;
                    match which {
                        "first" => &mut merged.blocks[idx].0.w,
                        "second" => &mut merged.blocks[idx].1.w,
                        _ => {
                            return Err(HgError::validation(format!(
                                "unknown adapter layer {other}"
                            )))
                        }
                    }
                }
            };
            if target.shape() != delta.shape() {
                return Err(HgError::ShapeMismatch {
                    op: "merge_adapters",
                    lhs: target.shape().to_vec(),
                    rhs: delta.shape().to_vec(),
                });
            }
            *target = target.add(&delta)?;
        }
        Ok(merged)
    }
}

/// Sinusoidal features of an integer timestep.
pub fn time_features(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    out
}

pub fn time_feature_rows(ts: &[usize], dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(time_features(t, dim));
    }
    Tensor::new(vec![ts.len(), dim], data).expect("shape by construction")
}

#[derive(Clone, Copy)]
pub struct BoundAffine {
    pub w: NodeId,
    pub b: NodeId,
}

pub struct BoundModel {
    time_proj: BoundAffine,
    input_proj: BoundAffine,
    blocks: Vec<(BoundAffine, BoundAffine)>,
    output_proj: BoundAffine,
    adapters: Option<BoundAdapters>,
    cfg: ModelConfig,
    output_half_from: usize,
    /// Trainable leaves by parameter name, for gradient collection.
    pub trainable: Vec<(String, NodeId)>,
}

struct BoundAdapters {
    weight: f64,
    scope: AdapterScope,
    t_range: Option<(usize, usize)>,
    layers: BTreeMap<String, (NodeId, NodeId)>,
}

impl Denoiser {
    /// Bind parameters into a graph. `scope` picks which tensors become
    /// differentiable leaves; everything else enters as constants.
    pub fn bind(
        &self,
        g: &mut Graph,
        adapters: Option<&AdapterSet>,
        scope: TrainScope,
    ) -> BoundModel {
        let mut trainable = Vec::new();
        let full = scope == TrainScope::DenoiserAndConditioner;
        let bind_affine = |g: &mut Graph, name: &str, a: &Affine, tr: &mut Vec<(String, NodeId)>| {
            if full {
                let w = g.leaf(a.w.clone());
                let b = g.leaf(a.b.clone());
                tr.push((format!("{name}.w"), w));
                tr.push((format!("{name}.b"), b));
                BoundAffine { w, b }
            } else {
                BoundAffine {
                    w: g.constant(a.w.clone()),
                    b: g.constant(a.b.clone()),
                }
            }
        };
        let time_proj = bind_affine(g, "time_proj", &self.time_proj, &mut trainable);
        let input_proj = bind_affine(g, "input_proj", &self.input_proj, &mut trainable);
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, (first, second))| {
                (
                    bind_affine(g, &format!("blk{i}.first"), first, &mut trainable),
                    bind_affine(g, &format!("blk{i}.second"), second, &mut trainable),
                )
            })
            .collect();
        let output_proj = bind_affine(g, "output_proj", &self.output_proj, &mut trainable);

        let adapters = adapters.map(|set| {
            let mut layers = BTreeMap::new();
            for (name, a) in &set.layers {
                let train = match scope {
                    TrainScope::AdaptersAll => true,
                    TrainScope::AdaptersOutputHalf => self.in_output_half(name),
                    _ => false,
                };
                let (down, up) = if train {
                    let d = g.leaf(a.down.clone());
                    let u = g.leaf(a.up.clone());
                    trainable.push((format!("lora.{name}.down"), d));
                    trainable.push((format!("lora.{name}.up"), u));
                    (d, u)
                } else {
                    (g.constant(a.down.clone()), g.constant(a.up.clone()))
                };
                layers.insert(name.clone(), (down, up));
            }
            BoundAdapters {
                weight: set.weight,
                scope: set.active_blocks,
                t_range: set.t_range,
                layers,
            }
        });

        BoundModel {
            time_proj,
            input_proj,
            blocks,
            output_proj,
            adapters,
            cfg: self.cfg.clone(),
            output_half_from: self.cfg.blocks / 2,
            trainable,
        }
    }
}

impl BoundModel {
    fn layer_in_output_half(&self, name: &str) -> bool {
        if name == "output_proj" {
            return true;
        }
        if name == "input_proj" {
            return false;
        }
        name.strip_prefix("blk")
            .and_then(|r| r.split('.').next())
            .and_then(|s| s.parse::<usize>().ok())
            .map(|i| i >= self.output_half_from)
            .unwrap_or(false)
    }

    fn affine(
        &self,
        g: &mut Graph,
        layer: BoundAffine,
        name: &str,
        x: NodeId,
        ts: &[usize],
    ) -> Result<NodeId> {
        let mut out = g.matmul(x, layer.w)?;
        if let Some(ad) = &self.adapters {
            let scoped = match ad.scope {
                AdapterScope::All => true,
                AdapterScope::OutputHalf => self.layer_in_output_half(name),
            };
            let gated = match ad.t_range {
                None => true,
                Some((lo, hi)) => {
                    let hits = ts.iter().filter(|&&t| t >= lo && t < hi).count();
                    if hits != 0 && hits != ts.len() {
                        return Err(HgError::validation(
                            "adapter timestep gate straddles a mixed-timestep batch",
                        ));
                    }
                    hits == ts.len()
                }
            };
            if scoped && gated {
                if let Some(&(down, up)) = ad.layers.get(name) {
                    let low = g.matmul(x, down)?;
                    let delta = g.matmul(low, up)?;
                    let scaled = g.scalar_mul(delta, ad.weight);
                    out = g.add(out, scaled)?;
                }
            }
        }
        g.add_bias(out, layer.b)
    }

    /// Predicted noise for a batch of flattened images.
    ///
    /// `x` is [B, image_dim], `cond` is [B, cond_dim]; `ts` holds one
    /// timestep per row and also drives adapter gating.
    pub fn forward(&self, g: &mut Graph, x: NodeId, ts: &[usize], cond: NodeId) -> Result<NodeId> {
        let rows = g.value(x).shape()[0];
        if ts.len() != rows {
            return Err(HgError::validation(format!(
                "forward: {} timesteps for {} rows",
                ts.len(),
                rows
            )));
        }
        let tf = g.constant(time_feature_rows(ts, self.cfg.time_dim));
        let temb = self.affine(g, self.time_proj, "time_proj", tf, ts)?;
        let inp = g.concat_cols(&[x, temb, cond])?;
        let mut h = self.affine(g, self.input_proj, "input_proj", inp, ts)?;
        h = g.relu(h);
        for (i, (first, second)) in self.blocks.iter().enumerate() {
            let u = self.affine(g, *first, &format!("blk{i}.first"), h, ts)?;
            let u = g.relu(u);
            let v = self.affine(g, *second, &format!("blk{i}.second"), u, ts)?;
            h = g.add(h, v)?;
        }
        self.affine(g, self.output_proj, "output_proj", h, ts)
    }

    /// Like `forward` but also returns the hidden state after every block,
    /// for tests that compare activation prefixes.
    pub fn forward_trace(
        &self,
        g: &mut Graph,
        x: NodeId,
        ts: &[usize],
        cond: NodeId,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let tf = g.constant(time_feature_rows(ts, self.cfg.time_dim));
        let temb = self.affine(g, self.time_proj, "time_proj", tf, ts)?;
        let inp = g.concat_cols(&[x, temb, cond])?;
        let mut h = self.affine(g, self.input_proj, "input_proj", inp, ts)?;
        h = g.relu(h);
        let mut trace = vec![h];
        for (i, (first, second)) in self.blocks.iter().enumerate() {
            let u = self.affine(g, *first, &format!("blk{i}.first"), h, ts)?;
            let u = g.relu(u);
            let v = self.affine(g, *second, &format!("blk{i}.second"), u, ts)?;
            h = g.add(h, v)?;
            trace.push(h);
        }
        let out = self.affine(g, self.output_proj, "output_proj", h, ts)?;
        Ok((out, trace))
    }
}

impl Denoiser {
    /// Pure prediction: one temporary graph, parameters as constants.
    pub fn predict(
        &self,
        x: &Tensor,
        ts: &[usize],
        cond: &Tensor,
        adapters: Option<&AdapterSet>,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, adapters, TrainScope::Frozen);
        let xn = g.constant(x.clone());
        let cn = g.constant(cond.clone());
        let out = bound.forward(&mut g, xn, ts, cn)?;
        Ok(g.value(out).clone())
    }
}

/// Discrete-prompt stand-in for a text encoder: an embedding table plus a
/// projection layer that can carry the rank-64 adapter. Row `num_prompts`
/// of the table is the reserved null embedding for classifier-free guidance.
#[derive(Clone, Debug)]
pub struct Conditioner {
    pub cfg: ModelConfig,
    pub table: Tensor,
    pub proj: Affine,
    pub adapter: Option<LowRankAdapter>,
}

#[derive(Clone, Debug)]
pub struct ConditionEmbedding {
    pub vector: Tensor,
    pub prompt_id: Option<u32>,
}

pub struct BoundConditioner {
    table: NodeId,
    proj: BoundAffine,
    adapter: Option<(NodeId, NodeId)>,
    adapter_weight: f64,
    cfg: ModelConfig,
    pub trainable: Vec<(String, NodeId)>,
}

impl Conditioner {
    pub fn init(cfg: &ModelConfig, rng: &mut RngStream) -> Self {
        let rows = cfg.num_prompts + 1;
        Conditioner {
            cfg: cfg.clone(),
            table: rng.normal_tensor(vec![rows, cfg.cond_table_dim]),
            proj: Affine::init(
                cfg.cond_table_dim,
                cfg.cond_dim,
                1.0 / (cfg.cond_table_dim as f64).sqrt(),
                rng,
            ),
            adapter: None,
        }
    }

    pub fn ensure_adapter(&mut self, rng: &mut RngStream) {
        if self.adapter.is_none() {
            self.adapter = Some(LowRankAdapter::init(
                self.cfg.cond_table_dim,
                self.cfg.cond_dim,
                self.cfg.cond_lora_rank,
                rng,
            ));
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("cond.table".to_string(), &self.table),
            ("cond.proj.w".to_string(), &self.proj.w),
            ("cond.proj.b".to_string(), &self.proj.b),
        ];
        if let Some(a) = &self.adapter {
            out.push(("cond.lora.down".to_string(), &a.down));
            out.push(("cond.lora.up".to_string(), &a.up));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("cond.table".to_string(), &mut self.table),
            ("cond.proj.w".to_string(), &mut self.proj.w),
            ("cond.proj.b".to_string(), &mut self.proj.b),
        ];
        if let Some(a) = &mut self.adapter {
            out.push(("cond.lora.down".to_string(), &mut a.down));
            out.push(("cond.lora.up".to_string(), &mut a.up));
        }
        out
    }

    pub fn bind(&self, g: &mut Graph, scope: TrainScope, adapter_weight: f64) -> BoundConditioner {
        let mut trainable = Vec::new();
        let full = scope == TrainScope::DenoiserAndConditioner;
        let table = if full {
            let id = g.leaf(self.table.clone());
            trainable.push(("cond.table".to_string(), id));
            id
        } else {
            g.constant(self.table.clone())
        };
        let proj = if full {
            let w = g.leaf(self.proj.w.clone());
            let b = g.leaf(self.proj.b.clone());
            trainable.push(("cond.proj.w".to_string(), w));
            trainable.push(("cond.proj.b".to_string(), b));
            BoundAffine { w, b }
        } else {
            BoundAffine {
                w: g.constant(self.proj.w.clone()),
                b: g.constant(self.proj.b.clone()),
            }
        };
        let adapter = self.adapter.as_ref().map(|a| {
            if scope == TrainScope::ConditionerAdapter {
                let d = g.leaf(a.down.clone());
                let u = g.leaf(a.up.clone());
                trainable.push(("cond.lora.down".to_string(), d));
                trainable.push(("cond.lora.up".to_string(), u));
                (d, u)
            } else {
                (g.constant(a.down.clone()), g.constant(a.up.clone()))
            }
        });
        BoundConditioner {
            table,
            proj,
            adapter,
            adapter_weight,
            cfg: self.cfg.clone(),
            trainable,
        }
    }

    /// Pure embedding of one prompt (None = null row). `adapter_weight`
    /// applies the adapter delta when Some.
    pub fn embedding(&self, prompt: Option<u32>, adapter_weight: Option<f64>) -> Result<ConditionEmbedding> {
        let rows = self.embed_rows(&[prompt], adapter_weight)?;
        Ok(ConditionEmbedding {
            vector: rows.row(0)?.reshape(vec![self.cfg.cond_dim])?,
            prompt_id: prompt,
        })
    }

    pub fn embed_rows(&self, prompts: &[Option<u32>], adapter_weight: Option<f64>) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, TrainScope::Frozen, adapter_weight.unwrap_or(0.0));
        let out = bound.embed(&mut g, prompts, adapter_weight.is_some())?;
        Ok(g.value(out).clone())
    }
}

impl BoundConditioner {
    pub fn embed(&self, g: &mut Graph, prompts: &[Option<u32>], use_adapter: bool) -> Result<NodeId> {
        let onehot = g.constant(prompt_one_hot(&self.cfg, prompts)?);
        let rows = g.matmul(onehot, self.table)?;
        let mut out = g.matmul(rows, self.proj.w)?;
        if use_adapter {
            if let Some((down, up)) = self.adapter {
                let low = g.matmul(rows, down)?;
                let delta = g.matmul(low, up)?;
                let scaled = g.scalar_mul(delta, self.adapter_weight);
                out = g.add(out, scaled)?;
            }
        }
        g.add_bias(out, self.proj.b)
    }
}

/// One-hot prompt rows over the table; `None` selects the null row.
fn prompt_one_hot(cfg: &ModelConfig, prompts: &[Option<u32>]) -> Result<Tensor> {
    let rows = cfg.num_prompts + 1;
    let mut data = vec![0.0; prompts.len() * rows];
    for (i, p) in prompts.iter().enumerate() {
        let idx = match p {
            Some(id) => {
                let id = *id as usize;
                if id >= cfg.num_prompts {
                    return Err(HgError::validation(format!(
                        "prompt id {id} out of range [0, {})",
                        cfg.num_prompts
                    )));
                }
                id
            }
            None => cfg.num_prompts,
        };
        data[i * rows + idx] = 1.0;
    }
    Tensor::new(vec![prompts.len(), rows], data)
}
