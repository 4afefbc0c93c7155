//! The exemplar-conditioned denoiser.
//!
//! Three parameter groups share one [`NetworkWeights`] store:
//!
//! - `encoder.*`: the global encoder. Non-overlapping patches go through a
//!   two-layer MLP, are mean-pooled and projected to a single style token.
//! - `denoiser.*`: the denoising backbone. The input embedding reads each
//!   pixel's `k × k` neighbourhood; after it every block is
//!   `layernorm → channel mix + time → cross-attention to the token →
//!   exemplar attention → SiLU`, with a residual around the block.
//! - `exemplar_net.*`: a siamese copy of the backbone blocks without
//!   exemplar attention and without the output head. It runs at the reference
//!   timestep and exposes the per-block features at the exemplar-attention site.
//!
//! Exemplar attention concatenates exemplar and denoising features along the
//! width axis, runs multi-head self-attention over all `2·H·W` positions with
//! `1/√d_head` scaling, adds the result back through `W^l` plus a residual, and
//! keeps the denoising half. `W^l` starts at zero, so inserting the module
//! leaves the network output unchanged.
//!
//! Internally feature maps are channels-last (`[H·W, width]`); public tensors
//! use `[C, H, W]`.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::sampler::EpsModel;
use crate::tensor::{read_bkt, write_bkt_to, Gradients, Graph, Tensor, Var, BKT_MAGIC};

pub const BACKBONE: &str = "denoiser";
pub const EXEMPLAR_NET: &str = "exemplar_net";
pub const ENCODER: &str = "encoder";
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Hidden channel count of every block.
    pub hidden: usize,
    pub blocks: usize,
    pub heads: usize,
    pub token_dim: usize,
    pub time_dim: usize,
    /// Hidden size of the global encoder's patch MLP.
    pub enc_dim: usize,
    pub patch: usize,
    /// Side of the zero-padded neighbourhood read by the input embedding;
    /// 1 makes the whole backbone pointwise.
    pub stem_kernel: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            height: 8,
            width: 8,
            channels: 3,
            hidden: 16,
            blocks: 2,
            heads: 2,
            token_dim: 16,
            time_dim: 16,
            enc_dim: 32,
            patch: 2,
            stem_kernel: 3,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if [
            self.height,
            self.width,
            self.channels,
            self.hidden,
            self.heads,
            self.token_dim,
            self.enc_dim,
            self.patch,
        ]
        .contains(&0)
        {
            return fail("network dimensions must be positive".into());
        }
        if self.blocks < 1 {
            return fail("blocks must be >= 1".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return fail(format!(
                "hidden width {} not divisible by heads {}",
                self.hidden, self.heads
            ));
        }
        if self.stem_kernel.is_multiple_of(2) {
            return fail(format!("stem_kernel must be odd, got {}", self.stem_kernel));
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return fail(format!(
                "time_dim must be even and >= 2, got {}",
                self.time_dim
            ));
        }
        if !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return fail(format!(
                "grid {}x{} not divisible by patch {}",
                self.height, self.width, self.patch
            ));
        }
        Ok(())
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape() {
            return Err(Error::shape(
                "network input",
                &self.input_shape(),
                x.shape(),
            ));
        }
        Ok(())
    }
}

/// Parameter groups used by the two training stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Encoder,
    Backbone,
    ExemplarAttention,
    ExemplarNet,
}

pub fn group_of(name: &str) -> ParamGroup {
    if name.starts_with("encoder.") {
        ParamGroup::Encoder
    } else if name.starts_with("exemplar_net.") {
        ParamGroup::ExemplarNet
    } else if name.contains(".ea.") {
        ParamGroup::ExemplarAttention
    } else {
        ParamGroup::Backbone
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalToken {
    pub vec: Tensor,
}

/// Per-block exemplar features, each `[H, W, hidden]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarFeatures {
    pub per_block: Vec<Tensor>,
}

/// Named flat parameter store, ordered by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NetworkWeights {
    params: BTreeMap<String, Tensor>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    blob: String,
    tensors: Vec<ManifestEntry>,
}

impl NetworkWeights {
    pub fn init(cfg: &DenoiserConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let mut w = Self::default();
        let (c, d, p) = (cfg.channels, cfg.hidden, cfg.positions());
        let mut dense = |w: &mut Self, name: &str, fan_in: usize, fan_out: usize, bias: bool| {
            let std = 1.0 / (fan_in as f64).sqrt();
            let t = Tensor::randn(&[fan_in, fan_out], rng).map(|v| v * std);
            w.params.insert(format!("{name}.w"), t);
            if bias {
                w.params
                    .insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
            }
        };

        let patch_in = cfg.patch * cfg.patch * c;
        dense(&mut w, "encoder.patch", patch_in, cfg.enc_dim, true);
        dense(&mut w, "encoder.hidden", cfg.enc_dim, cfg.enc_dim, true);
        dense(&mut w, "encoder.out", cfg.enc_dim, cfg.token_dim, true);

        for prefix in [BACKBONE, EXEMPLAR_NET] {
            let stem_in = c * cfg.stem_kernel * cfg.stem_kernel;
            dense(&mut w, &format!("{prefix}.input"), stem_in, d, true);
            dense(&mut w, &format!("{prefix}.time.fc1"), cfg.time_dim, d, true);
            dense(&mut w, &format!("{prefix}.time.fc2"), d, d, true);
            for l in 0..cfg.blocks {
                let b = format!("{prefix}.blocks.{l}");
                w.params
                    .insert(format!("{b}.norm.gain"), Tensor::full(&[d], 1.0));
                w.params
                    .insert(format!("{b}.norm.bias"), Tensor::zeros(&[d]));
                dense(&mut w, &format!("{b}.mix"), d, d, true);
                dense(&mut w, &format!("{b}.time"), d, d, true);
                dense(&mut w, &format!("{b}.xattn.q"), d, d, false);
                dense(&mut w, &format!("{b}.xattn.k"), cfg.token_dim, d, false);
                dense(&mut w, &format!("{b}.xattn.v"), cfg.token_dim, d, false);
                dense(&mut w, &format!("{b}.xattn.o"), d, d, true);
                if prefix == BACKBONE {
                    for proj in ["q", "k", "v"] {
                        dense(&mut w, &format!("{b}.ea.{proj}"), d, d, true);
                    }
                    w.params
                        .insert(format!("{b}.ea.out.w"), Tensor::zeros(&[d, d]));
                }
            }
        }
        for prefix in [BACKBONE, EXEMPLAR_NET] {
            let pos = Tensor::randn(&[p, d], rng).map(|v| 0.1 * v);
            w.params.insert(format!("{prefix}.pos"), pos);
        }
        w.params
            .insert("denoiser.head.norm.gain".into(), Tensor::full(&[d], 1.0));
        w.params
            .insert("denoiser.head.norm.bias".into(), Tensor::zeros(&[d]));
        w.params
            .insert("denoiser.head.w".into(), Tensor::zeros(&[d, c]));
        w.params
            .insert("denoiser.head.b".into(), Tensor::zeros(&[c]));
        Ok(w)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Scalar count over parameters whose name satisfies `pred`.
    pub fn count(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| pred(n))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Overwrites the siamese exemplar network with the backbone's values.
    pub fn copy_backbone_into_exemplar_net(&mut self) {
        let copies: Vec<(String, Tensor)> = self
            .params
            .iter()
            .filter_map(|(n, t)| {
                let rest = n.strip_prefix("exemplar_net.")?;
                let src = self.params.get(&format!("{BACKBONE}.{rest}"))?;
                (src.shape() == t.shape()).then(|| (n.clone(), src.clone()))
            })
            .collect();
        self.params.extend(copies);
    }

    /// Writes `<stem>.json` (name, shape, byte offset) and `<stem>.bkt`
    /// (one rank-1 BKT1 tensor holding every parameter, in manifest order).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let blob_name = format!("{stem}.bkt");
        let header = (4 + 4 + 4) as u64;
        let mut offset = header;
        let mut entries = Vec::with_capacity(self.params.len());
        let mut flat = Vec::new();
        for (name, t) in &self.params {
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 4 * t.numel() as u64;
            flat.extend_from_slice(t.data());
        }
        if !flat.is_empty() {
            let blob = Tensor::new(vec![flat.len()], flat)?;
            let mut out = BufWriter::new(File::create(dir.join(&blob_name))?);
            write_bkt_to(&blob, &mut out)?;
            out.flush()?;
        }
        let manifest = Manifest {
            blob: blob_name,
            tensors: entries,
        };
        std::fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let manifest_path = dir.join(format!("{stem}.json"));
        let mut text = String::new();
        File::open(&manifest_path)?.read_to_string(&mut text)?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let blob_path = dir.join(&manifest.blob);
        if manifest.tensors.is_empty() {
            return Ok(Self::default());
        }
        let blob = read_bkt(&blob_path)?;
        let header = (BKT_MAGIC.len() + 8) as u64;
        let mut params = BTreeMap::new();
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let start = e
                .offset
                .checked_sub(header)
                .filter(|s| s % 4 == 0)
                .ok_or_else(|| Error::Format {
                    path: manifest_path.clone(),
                    reason: format!("bad offset for {}", e.name),
                })? as usize
                / 4;
            let data = blob
                .data()
                .get(start..start + n)
                .ok_or_else(|| Error::Format {
                    path: blob_path.clone(),
                    reason: format!("{} runs past the blob", e.name),
                })?;
            params.insert(e.name, Tensor::new(e.shape, data.to_vec())?);
        }
        Ok(Self { params })
    }
}

fn sinusoidal(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
    Tensor::new(vec![dim], out).expect("embedding shape")
}

/// One forward pass on a graph with parameters bound lazily by name.
pub struct Forward<'w> {
    pub graph: Graph,
    weights: &'w NetworkWeights,
    cfg: DenoiserConfig,
    bound: HashMap<String, Var>,
    trainable: Box<dyn Fn(&str) -> bool + 'w>,
}

impl<'w> Forward<'w> {
    /// Tracked pass; parameters selected by `trainable` receive gradients,
    /// the rest are bound as constants.
    pub fn new(
        weights: &'w NetworkWeights,
        cfg: &DenoiserConfig,
        trainable: impl Fn(&str) -> bool + 'w,
    ) -> Self {
        Self {
            graph: Graph::new(),
            weights,
            cfg: *cfg,
            bound: HashMap::new(),
            trainable: Box::new(trainable),
        }
    }

    pub fn inference(weights: &'w NetworkWeights, cfg: &DenoiserConfig) -> Self {
        Self {
            graph: Graph::no_grad(),
            weights,
            cfg: *cfg,
            bound: HashMap::new(),
            trainable: Box::new(|_| false),
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.weights.get(name)?.clone();
        let v = if (self.trainable)(name) {
            self.graph.param(value)
        } else {
            self.graph.constant(value)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every bound trainable parameter.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter_map(|(n, &v)| grads.get(v).map(|g| (n.clone(), g.clone())))
            .collect()
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let y = self.graph.matmul(x, w)?;
        match self.weights.get(&format!("{prefix}.b")) {
            Ok(_) => {
                let b = self.param(&format!("{prefix}.b"))?;
                self.graph.add(y, b)
            }
            Err(_) => Ok(y),
        }
    }

    fn layernorm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gain = self.param(&format!("{prefix}.gain"))?;
        let bias = self.param(&format!("{prefix}.bias"))?;
        self.graph.layernorm(x, gain, bias, 1, LN_EPS)
    }

    /// `[C, H, W]` → `[H·W, C]`.
    fn channels_last(&mut self, x: Var) -> Result<Var> {
        let xp = self.graph.permute(x, &[1, 2, 0])?;
        self.graph
            .reshape(xp, &[self.cfg.positions(), self.cfg.channels])
    }

    /// Multi-head scaled dot-product attention; `q: [Nq, D]`, `k, v: [Nk, D]`.
    fn attend(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let heads = self.cfg.heads;
        let dh = self.cfg.hidden / heads;
        let (nq, nk) = (self.graph.shape(q)[0], self.graph.shape(k)[0]);
        let g = &mut self.graph;
        let q = g.reshape(q, &[nq, heads, dh])?;
        let q = g.permute(q, &[1, 0, 2])?;
        let k = g.reshape(k, &[nk, heads, dh])?;
        let kt = g.permute(k, &[1, 2, 0])?;
        let v = g.reshape(v, &[nk, heads, dh])?;
        let v = g.permute(v, &[1, 0, 2])?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax(scores, 2)?;
        let out = g.matmul(attn, v)?;
        let out = g.permute(out, &[1, 0, 2])?;
        g.reshape(out, &[nq, heads * dh])
    }

    fn cross_attention(&mut self, prefix: &str, x: Var, token: Var) -> Result<Var> {
        let tok = self.graph.reshape(token, &[1, self.cfg.token_dim])?;
        let q = self.linear(x, &format!("{prefix}.q"))?;
        let k = self.linear(tok, &format!("{prefix}.k"))?;
        let v = self.linear(tok, &format!("{prefix}.v"))?;
        let out = self.attend(q, k, v)?;
        self.linear(out, &format!("{prefix}.o"))
    }

    /// Exemplar attention for block `l` on channels-last `[H·W, hidden]` features.
    pub fn exemplar_attention(&mut self, l: usize, f1: Var, f2: Var) -> Result<Var> {
        if self.graph.shape(f1) != self.graph.shape(f2) {
            return Err(Error::shape(
                "exemplar_attention",
                self.graph.shape(f1),
                self.graph.shape(f2),
            ));
        }
        let (h, w, d) = (self.cfg.height, self.cfg.width, self.cfg.hidden);
        let prefix = format!("{BACKBONE}.blocks.{l}.ea");
        let g = &mut self.graph;
        let a = g.reshape(f1, &[h, w, d])?;
        let b = g.reshape(f2, &[h, w, d])?;
        let f_in = g.concat(&[a, b], 1)?;
        let tokens = g.reshape(f_in, &[2 * h * w, d])?;
        let q = self.linear(tokens, &format!("{prefix}.q"))?;
        let k = self.linear(tokens, &format!("{prefix}.k"))?;
        let v = self.linear(tokens, &format!("{prefix}.v"))?;
        let att = self.attend(q, k, v)?;
        let mixed = self.linear(att, &format!("{prefix}.out"))?;
        let g = &mut self.graph;
        let f_ea = g.add(mixed, tokens)?;
        let f_ea = g.reshape(f_ea, &[h, 2 * w, d])?;
        let halves = g.chunk(f_ea, 2, 1)?;
        g.reshape(halves[1], &[h * w, d])
    }

    fn time_embedding(&mut self, prefix: &str, t: f64) -> Result<Var> {
        let emb = sinusoidal(t, self.cfg.time_dim);
        let e = self.graph.constant(emb.reshape(&[1, self.cfg.time_dim])?);
        let e = self.linear(e, &format!("{prefix}.time.fc1"))?;
        let e = self.graph.silu(e);
        let e = self.linear(e, &format!("{prefix}.time.fc2"))?;
        Ok(self.graph.silu(e))
    }

    /// Returns `(block output, features at the exemplar-attention site)`.
    fn block(
        &mut self,
        prefix: &str,
        l: usize,
        h: Var,
        temb: Var,
        token: Var,
        exemplar: Option<Var>,
    ) -> Result<(Var, Var)> {
        let b = format!("{prefix}.blocks.{l}");
        let n = self.layernorm(h, &format!("{b}.norm"))?;
        let mix = self.linear(n, &format!("{b}.mix"))?;
        let tb = self.linear(temb, &format!("{b}.time"))?;
        let tb = self.graph.reshape(tb, &[self.cfg.hidden])?;
        let a = self.graph.add(mix, tb)?;
        let ca = self.cross_attention(&format!("{b}.xattn"), a, token)?;
        let site = self.graph.add(a, ca)?;
        let a = match exemplar {
            Some(f1) => self.exemplar_attention(l, f1, site)?,
            None => site,
        };
        let act = self.graph.silu(a);
        Ok((self.graph.add(h, act)?, site))
    }

    /// `[H·W, C]` → `[H·W, k²·C]`: each position gathers its zero-padded
    /// `k × k` neighbourhood, offsets in row-major order.
    fn neighbourhood(&mut self, xp: Var) -> Result<Var> {
        let k = self.cfg.stem_kernel;
        if k == 1 {
            return Ok(xp);
        }
        let (h, w) = (self.cfg.height as isize, self.cfg.width as isize);
        let p = self.cfg.positions();
        let r = (k / 2) as isize;
        let mut parts = Vec::with_capacity(k * k);
        for di in -r..=r {
            for dj in -r..=r {
                let mut shift = Tensor::zeros(&[p, p]);
                for i in 0..h {
                    for j in 0..w {
                        let (si, sj) = (i + di, j + dj);
                        if (0..h).contains(&si) && (0..w).contains(&sj) {
                            shift.data_mut()[((i * w + j) * p as isize + si * w + sj) as usize] =
                                1.0;
                        }
                    }
                }
                let s = self.graph.constant(shift);
                parts.push(self.graph.matmul(s, xp)?);
            }
        }
        self.graph.concat(&parts, 1)
    }

    fn stem(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let xp = self.channels_last(x)?;
        let xp = self.neighbourhood(xp)?;
        let h = self.linear(xp, &format!("{prefix}.input"))?;
        let pos = self.param(&format!("{prefix}.pos"))?;
        self.graph.add(h, pos)
    }

    /// Global style token `[token_dim]` from an exemplar `[C, H, W]`.
    pub fn global_encode(&mut self, exemplar: Var) -> Result<Var> {
        let cfg = self.cfg;
        let p = cfg.patch;
        let (hp, wp) = (cfg.height / p, cfg.width / p);
        let g = &mut self.graph;
        let x = g.permute(exemplar, &[1, 2, 0])?;
        let x = g.reshape(x, &[hp, p, wp, p, cfg.channels])?;
        let x = g.permute(x, &[0, 2, 1, 3, 4])?;
        let patches = g.reshape(x, &[hp * wp, p * p * cfg.channels])?;
        let e = self.linear(patches, "encoder.patch")?;
        let e = self.graph.silu(e);
        let e = self.linear(e, "encoder.hidden")?;
        let e = self.graph.silu(e);
        let pooled = self.graph.mean(e, 0)?;
        let pooled = self.graph.reshape(pooled, &[1, cfg.enc_dim])?;
        let tok = self.linear(pooled, "encoder.out")?;
        self.graph.reshape(tok, &[cfg.token_dim])
    }

    /// Siamese exemplar branch; one `[H·W, hidden]` feature per block.
    pub fn exemplar_net(&mut self, z: Var, t_ref: usize, token: Var) -> Result<Vec<Var>> {
        let mut h = self.stem(EXEMPLAR_NET, z)?;
        let temb = self.time_embedding(EXEMPLAR_NET, t_ref as f64)?;
        let mut feats = Vec::with_capacity(self.cfg.blocks);
        for l in 0..self.cfg.blocks {
            let (next, site) = self.block(EXEMPLAR_NET, l, h, temb, token, None)?;
            feats.push(site);
            h = next;
        }
        Ok(feats)
    }

    /// Denoiser output `[C, H, W]`; `exemplar = None` bypasses exemplar attention.
    pub fn denoise(
        &mut self,
        x_t: Var,
        t: usize,
        token: Var,
        exemplar: Option<&[Var]>,
    ) -> Result<Var> {
        if let Some(f) = exemplar {
            if f.len() != self.cfg.blocks {
                return Err(Error::InvalidArgument(format!(
                    "expected {} exemplar feature maps, got {}",
                    self.cfg.blocks,
                    f.len()
                )));
            }
        }
        let mut h = self.stem(BACKBONE, x_t)?;
        let temb = self.time_embedding(BACKBONE, t as f64)?;
        for l in 0..self.cfg.blocks {
            let f1 = exemplar.map(|f| f[l]);
            h = self.block(BACKBONE, l, h, temb, token, f1)?.0;
        }
        let n = self.layernorm(h, "denoiser.head.norm")?;
        let out = self.linear(n, "denoiser.head")?;
        let cfg = self.cfg;
        let out = self
            .graph
            .reshape(out, &[cfg.height, cfg.width, cfg.channels])?;
        self.graph.permute(out, &[2, 0, 1])
    }
}

pub fn global_encode(
    weights: &NetworkWeights,
    cfg: &DenoiserConfig,
    exemplar: &Tensor,
) -> Result<GlobalToken> {
    cfg.check_input(exemplar)?;
    let mut f = Forward::inference(weights, cfg);
    let x = f.graph.constant(exemplar.clone());
    let tok = f.global_encode(x)?;
    Ok(GlobalToken {
        vec: f.graph.value(tok).clone(),
    })
}

pub fn exemplar_forward(
    weights: &NetworkWeights,
    cfg: &DenoiserConfig,
    z: &Tensor,
    t_ref: usize,
    token: &GlobalToken,
) -> Result<ExemplarFeatures> {
    cfg.check_input(z)?;
    let mut f = Forward::inference(weights, cfg);
    let x = f.graph.constant(z.clone());
    let tok = f.graph.constant(token.vec.clone());
    let feats = f.exemplar_net(x, t_ref, tok)?;
    let per_block = feats
        .into_iter()
        .map(|v| {
            f.graph
                .value(v)
                .reshape(&[cfg.height, cfg.width, cfg.hidden])
        })
        .collect::<Result<_>>()?;
    Ok(ExemplarFeatures { per_block })
}

/// Exemplar attention on `[C', H, W]` feature maps (exemplar branch `f1`,
/// denoising branch `f2`); returns the denoising-aligned half.
pub fn exemplar_attention(
    weights: &NetworkWeights,
    cfg: &DenoiserConfig,
    l: usize,
    f1: &Tensor,
    f2: &Tensor,
) -> Result<Tensor> {
    if f1.shape() != f2.shape() {
        return Err(Error::shape("exemplar_attention", f1.shape(), f2.shape()));
    }
    let want = [cfg.hidden, cfg.height, cfg.width];
    if f1.shape() != want {
        return Err(Error::shape("exemplar_attention", &want, f1.shape()));
    }
    let mut f = Forward::inference(weights, cfg);
    let to_pc = |t: &Tensor| {
        t.permute(&[1, 2, 0])?
            .reshape(&[cfg.positions(), cfg.hidden])
    };
    let a = f.graph.constant(to_pc(f1)?);
    let b = f.graph.constant(to_pc(f2)?);
    let out = f.exemplar_attention(l, a, b)?;
    f.graph
        .value(out)
        .reshape(&[cfg.height, cfg.width, cfg.hidden])?
        .permute(&[2, 0, 1])
}

pub fn denoise(
    weights: &NetworkWeights,
    cfg: &DenoiserConfig,
    x_t: &Tensor,
    t: usize,
    token: &GlobalToken,
    exemplar: Option<&ExemplarFeatures>,
) -> Result<Tensor> {
    cfg.check_input(x_t)?;
    let mut f = Forward::inference(weights, cfg);
    let x = f.graph.constant(x_t.clone());
    let tok = f.graph.constant(token.vec.clone());
    let feats: Option<Vec<Var>> = exemplar.map(|e| {
        e.per_block
            .iter()
            .map(|t| {
                let flat = t
                    .reshape(&[cfg.positions(), cfg.hidden])
                    .expect("feature shape");
                f.graph.constant(flat)
            })
            .collect()
    });
    let out = f.denoise(x, t, tok, feats.as_deref())?;
    Ok(f.graph.value(out).clone())
}

/// Denoiser with the exemplar context (token and features) computed once.
#[derive(Debug, Clone)]
pub struct ConditionedDenoiser<'w> {
    weights: &'w NetworkWeights,
    cfg: DenoiserConfig,
    pub token: GlobalToken,
    pub features: Option<ExemplarFeatures>,
}

impl<'w> ConditionedDenoiser<'w> {
    /// `use_exemplar_net = false` reproduces the Stage-1 model (exemplar
    /// attention bypassed).
    pub fn new(
        weights: &'w NetworkWeights,
        cfg: &DenoiserConfig,
        exemplar: &Tensor,
        use_exemplar_net: bool,
    ) -> Result<Self> {
        let token = global_encode(weights, cfg, exemplar)?;
        let features = if use_exemplar_net {
            Some(exemplar_forward(weights, cfg, exemplar, 0, &token)?)
        } else {
            None
        };
        Ok(Self {
            weights,
            cfg: *cfg,
            token,
            features,
        })
    }
}

impl EpsModel for ConditionedDenoiser<'_> {
    fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        denoise(
            self.weights,
            &self.cfg,
            x_t,
            t,
            &self.token,
            self.features.as_ref(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DenoiserConfig {
        DenoiserConfig {
            height: 4,
            width: 4,
            channels: 3,
            hidden: 8,
            blocks: 2,
            heads: 2,
            token_dim: 4,
            time_dim: 6,
            enc_dim: 8,
            patch: 2,
            stem_kernel: 3,
        }
    }

    fn randomized(cfg: &DenoiserConfig, seed: u64) -> NetworkWeights {
        let mut rng = RngStream::new(seed);
        let mut w = NetworkWeights::init(cfg, &mut rng).unwrap();
        for (_, t) in w.iter_mut() {
            for v in t.data_mut() {
                *v += 0.3 * rng.normal();
            }
        }
        w
    }

    #[test]
    fn config_validation() {
        assert!(small().validate().is_ok());
        assert!(DenoiserConfig {
            heads: 3,
            ..small()
        }
        .validate()
        .is_err());
        assert!(DenoiserConfig {
            blocks: 0,
            ..small()
        }
        .validate()
        .is_err());
        assert!(DenoiserConfig {
            patch: 3,
            ..small()
        }
        .validate()
        .is_err());
        assert!(DenoiserConfig {
            time_dim: 5,
            ..small()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn parameter_names_are_grouped() {
        let w = NetworkWeights::init(&small(), &mut RngStream::new(0)).unwrap();
        assert_eq!(group_of("encoder.out.w"), ParamGroup::Encoder);
        assert_eq!(
            group_of("denoiser.blocks.1.ea.q.w"),
            ParamGroup::ExemplarAttention
        );
        assert_eq!(
            group_of("exemplar_net.blocks.0.mix.w"),
            ParamGroup::ExemplarNet
        );
        assert_eq!(group_of("denoiser.head.w"), ParamGroup::Backbone);
        assert!(w
            .names()
            .any(|n| group_of(n) == ParamGroup::ExemplarAttention));
        assert!(!w
            .names()
            .any(|n| n.starts_with("exemplar_net") && n.contains(".ea.")));
    }

    #[test]
    fn exemplar_net_is_smaller_than_denoiser() {
        let w = NetworkWeights::init(&DenoiserConfig::default(), &mut RngStream::new(0)).unwrap();
        let psi = w.count(|n| group_of(n) == ParamGroup::ExemplarNet);
        let eps = w.count(|n| {
            matches!(
                group_of(n),
                ParamGroup::Backbone | ParamGroup::ExemplarAttention
            )
        });
        assert!(psi < eps, "{psi} vs {eps}");
    }

    #[test]
    fn zero_exemplar_gives_zero_token_with_zero_bias() {
        let cfg = small();
        let w = randomized(&cfg, 1);
        let mut w = w;
        for (n, t) in w.iter_mut() {
            if n.starts_with("encoder.") && n.ends_with(".b") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let tok = global_encode(&w, &cfg, &Tensor::zeros(&cfg.input_shape())).unwrap();
        assert!(tok.vec.data().iter().all(|&v| v == 0.0));
        assert_eq!(tok.vec.shape(), &[cfg.token_dim]);
    }

    #[test]
    fn identical_exemplars_identical_tokens() {
        let cfg = small();
        let w = randomized(&cfg, 2);
        let x = Tensor::randn(&cfg.input_shape(), &mut RngStream::new(3));
        assert_eq!(
            global_encode(&w, &cfg, &x).unwrap(),
            global_encode(&w, &cfg, &x).unwrap()
        );
    }

    #[test]
    fn exemplar_features_shape_contract() {
        let cfg = small();
        let w = randomized(&cfg, 4);
        let x = Tensor::randn(&cfg.input_shape(), &mut RngStream::new(5));
        let tok = global_encode(&w, &cfg, &x).unwrap();
        let f = exemplar_forward(&w, &cfg, &x, 0, &tok).unwrap();
        assert_eq!(f.per_block.len(), cfg.blocks);
        for t in &f.per_block {
            assert_eq!(t.shape(), &[cfg.height, cfg.width, cfg.hidden]);
        }
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let cfg = small();
        let mut w = NetworkWeights::init(&cfg, &mut RngStream::new(0)).unwrap();
        for (_, t) in w.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::randn(&cfg.input_shape(), &mut RngStream::new(1));
        let tok = global_encode(&w, &cfg, &x).unwrap();
        let f = exemplar_forward(&w, &cfg, &x, 0, &tok).unwrap();
        assert!(f
            .per_block
            .iter()
            .all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn token_changes_exemplar_features() {
        let cfg = small();
        let w = randomized(&cfg, 6);
        let x = Tensor::randn(&cfg.input_shape(), &mut RngStream::new(7));
        let tok = global_encode(&w, &cfg, &x).unwrap();
        let other = GlobalToken {
            vec: tok.vec.map(|v| v + 1.0),
        };
        let a = exemplar_forward(&w, &cfg, &x, 0, &tok).unwrap();
        let b = exemplar_forward(&w, &cfg, &x, 0, &other).unwrap();
        assert!(a.per_block[0].max_abs_diff(&b.per_block[0]).unwrap() > 1e-6);
    }

    #[test]
    fn stem_reads_a_zero_padded_neighbourhood() {
        let cfg = DenoiserConfig {
            height: 4,
            width: 6,
            ..small()
        };
        let w = NetworkWeights::init(&cfg, &mut RngStream::new(21)).unwrap();
        let x = Tensor::randn(&cfg.input_shape(), &mut RngStream::new(22));
        let mut f = Forward::inference(&w, &cfg);
        let xv = f.graph.constant(x.clone());
        let h = f.stem(BACKBONE, xv).unwrap();
        let got = f.graph.value(h).clone();

        let (c, d, k) = (cfg.channels, cfg.hidden, cfg.stem_kernel);
        let (wi, bi, pos) = (
            w.get("denoiser.input.w").unwrap().data(),
            w.get("denoiser.input.b").unwrap().data(),
            w.get("denoiser.pos").unwrap().data(),
        );
        assert_eq!(w.get("denoiser.input.w").unwrap().shape(), &[k * k * c, d]);
        let (hh, ww) = (cfg.height as isize, cfg.width as isize);
        for i in 0..hh {
            for j in 0..ww {
                let p = (i * ww + j) as usize;
                for o in 0..d {
                    let mut want = bi[o] + pos[p * d + o];
                    for (slot, (di, dj)) in (-1..=1)
                        .flat_map(|a| (-1..=1).map(move |b| (a, b)))
                        .enumerate()
                    {
                        let (si, sj) = (i + di, j + dj);
                        if !(0..hh).contains(&si) || !(0..ww).contains(&sj) {
                            continue;
                        }
                        for ch in 0..c {
                            let v =
                                x.data()[(ch * cfg.height + si as usize) * cfg.width + sj as usize];
                            want += v * wi[(slot * c + ch) * d + o];
                        }
                    }
                    assert!((got.data()[p * d + o] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn unit_stem_kernel_is_pointwise() {
        let cfg = DenoiserConfig {
            stem_kernel: 1,
            ..small()
        };
        let w = NetworkWeights::init(&cfg, &mut RngStream::new(23)).unwrap();
        assert_eq!(
            w.get("denoiser.input.w").unwrap().shape(),
            &[cfg.channels, cfg.hidden]
        );
        assert!(DenoiserConfig {
            stem_kernel: 2,
            ..small()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn zeroed_exemplar_attention_is_identity_on_denoising_branch() {
        let cfg = small();
        let mut w = randomized(&cfg, 8);
        for (n, t) in w.iter_mut() {
            if n.contains(".ea.") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut rng = RngStream::new(9);
        let shape = [cfg.hidden, cfg.height, cfg.width];
        let f1 = Tensor::randn(&shape, &mut rng);
        let f2 = Tensor::randn(&shape, &mut rng);
        for l in 0..cfg.blocks {
            assert_eq!(exemplar_attention(&w, &cfg, l, &f1, &f2).unwrap(), f2);
        }
    }

    #[test]
    fn graph_and_tensor_paths_agree() {
        let cfg = small();
        let w = randomized(&cfg, 10);
        let mut rng = RngStream::new(11);
        let shape = [cfg.hidden, cfg.height, cfg.width];
        let (f1, f2) = (
            Tensor::randn(&shape, &mut rng),
            Tensor::randn(&shape, &mut rng),
        );
        let flat = |t: &Tensor| {
            t.permute(&[1, 2, 0])
                .unwrap()
                .reshape(&[cfg.positions(), cfg.hidden])
                .unwrap()
        };
        let mut fwd = Forward::inference(&w, &cfg);
        let a = fwd.graph.constant(flat(&f1));
        let b = fwd.graph.constant(flat(&f2));
        let out = fwd.exemplar_attention(1, a, b).unwrap();
        let via_tensor = exemplar_attention(&w, &cfg, 1, &f1, &f2).unwrap();
        assert!(
            fwd.graph
                .value(out)
                .max_abs_diff(&flat(&via_tensor))
                .unwrap()
                < 1e-14
        );
        assert!(via_tensor.max_abs_diff(&f2).unwrap() > 1e-6);
    }

    #[test]
    fn exemplar_attention_rejects_mismatched_branches() {
        let cfg = small();
        let w = randomized(&cfg, 12);
        let a = Tensor::zeros(&[cfg.hidden, cfg.height, cfg.width]);
        let b = Tensor::zeros(&[cfg.hidden, cfg.height, cfg.width + 1]);
        assert!(exemplar_attention(&w, &cfg, 0, &a, &b).is_err());
    }

    #[test]
    fn output_shape_matches_input() {
        for cfg in [
            small(),
            DenoiserConfig::default(),
            DenoiserConfig {
                blocks: 3,
                heads: 4,
                ..small()
            },
        ] {
            let w = randomized(&cfg, 13);
            let x = Tensor::randn(&cfg.input_shape(), &mut RngStream::new(14));
            let tok = global_encode(&w, &cfg, &x).unwrap();
            let f = exemplar_forward(&w, &cfg, &x, 0, &tok).unwrap();
            let out = denoise(&w, &cfg, &x, 3, &tok, Some(&f)).unwrap();
            assert_eq!(out.shape(), x.shape());
            let bypass = denoise(&w, &cfg, &x, 3, &tok, None).unwrap();
            assert_eq!(bypass.shape(), x.shape());
        }
    }

    #[test]
    fn time_conditioning_changes_output() {
        let cfg = small();
        let w = randomized(&cfg, 15);
        let x = Tensor::randn(&cfg.input_shape(), &mut RngStream::new(16));
        let tok = global_encode(&w, &cfg, &x).unwrap();
        let a = denoise(&w, &cfg, &x, 1, &tok, None).unwrap();
        let b = denoise(&w, &cfg, &x, 200, &tok, None).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() > 1e-6);
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let cfg = small();
        let w = randomized(&cfg, 17);
        assert!(global_encode(&w, &cfg, &Tensor::zeros(&[3, 4, 5])).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = small();
        let w = randomized(&cfg, 18);
        let dir = tempfile::tempdir().unwrap();
        w.save(dir.path(), "weights").unwrap();
        let back = NetworkWeights::load(dir.path(), "weights").unwrap();
        assert_eq!(back.len(), w.len());
        for (n, t) in w.iter() {
            let b = back.get(n).unwrap();
            assert_eq!(b.shape(), t.shape());
            assert!(b.max_abs_diff(t).unwrap() < 1e-6);
        }
    }

    #[test]
    fn empty_store_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        NetworkWeights::default().save(dir.path(), "none").unwrap();
        assert!(NetworkWeights::load(dir.path(), "none").unwrap().is_empty());
    }

    #[test]
    fn siamese_copy_matches_backbone() {
        let cfg = small();
        let mut w = randomized(&cfg, 19);
        w.copy_backbone_into_exemplar_net();
        assert_eq!(
            w.get("exemplar_net.blocks.1.mix.w").unwrap(),
            w.get("denoiser.blocks.1.mix.w").unwrap()
        );
        assert_eq!(
            w.get("exemplar_net.pos").unwrap(),
            w.get("denoiser.pos").unwrap()
        );
    }
}
