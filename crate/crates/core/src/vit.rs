//! Minimal vision transformer encoder mapping a square image to a
//! fixed-size embedding.
//!
//! The backbone is frozen after (random) initialization; adaptation
//! happens only through optional low-rank adapters on the Q and V
//! projections. Pre-norm blocks, learned positional embeddings, CLS-token
//! pooling.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Node, Tensor};
use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, ParamRegistry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    ClsToken,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub mlp_ratio: f64,
    pub pooling: Pooling,
}

impl Default for ViTConfig {
    /// Desk-scale default: every mechanism of a large ViT at ~10^5
    /// parameters, so experiments finish in minutes on a CPU.
    fn default() -> Self {
        ViTConfig {
            image_size: 32,
            patch_size: 8,
            channels: 1,
            embed_dim: 64,
            num_heads: 4,
            num_layers: 4,
            mlp_ratio: 4.0,
            pooling: Pooling::ClsToken,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 {
            return Err(Error::Config("image/patch size must be positive".into()));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.channels == 0 || self.num_layers == 0 {
            return Err(Error::Config("channels and layers must be positive".into()));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Patch count plus the CLS token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }
}

/// One transformer block's weights. Q and V are `Arc`-shared so adapters
/// can hold the same frozen base.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub q_w: Arc<Tensor>,
    pub q_b: Tensor,
    pub k_w: Tensor,
    pub k_b: Tensor,
    pub v_w: Arc<Tensor>,
    pub v_b: Tensor,
    pub o_w: Tensor,
    pub o_b: Tensor,
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

/// Frozen encoder weights. Immutable after construction; `encode` is a
/// pure function and safe to call concurrently on shared weights.
#[derive(Debug, Clone)]
pub struct EncoderWeights {
    pub config: ViTConfig,
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub pos_emb: Tensor,
    pub cls_token: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

fn randn(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape, data).expect("gaussian init is finite")
}

impl EncoderWeights {
    /// Random-initialized backbone, then treated as frozen. Stands in for
    /// pretrained weights; real checkpoints can be imported through
    /// [`crate::checkpoint`].
    pub fn random(config: ViTConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let pd = config.patch_dim();
        let md = config.mlp_dim();
        let proj_std = 1.0 / (d as f64).sqrt();
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                q_w: Arc::new(randn(vec![d, d], proj_std, rng)),
                q_b: Tensor::zeros(vec![d]),
                k_w: randn(vec![d, d], proj_std, rng),
                k_b: Tensor::zeros(vec![d]),
                v_w: Arc::new(randn(vec![d, d], proj_std, rng)),
                v_b: Tensor::zeros(vec![d]),
                o_w: randn(vec![d, d], proj_std, rng),
                o_b: Tensor::zeros(vec![d]),
                fc1_w: randn(vec![md, d], proj_std, rng),
                fc1_b: Tensor::zeros(vec![md]),
                fc2_w: randn(vec![d, md], 1.0 / (md as f64).sqrt(), rng),
                fc2_b: Tensor::zeros(vec![d]),
                ln1_gain: Tensor::full(vec![d], 1.0),
                ln1_bias: Tensor::zeros(vec![d]),
                ln2_gain: Tensor::full(vec![d], 1.0),
                ln2_bias: Tensor::zeros(vec![d]),
            })
            .collect();
        Ok(EncoderWeights {
            patch_w: randn(vec![d, pd], 1.0 / (pd as f64).sqrt(), rng),
            patch_b: Tensor::zeros(vec![d]),
            pos_emb: randn(vec![config.num_tokens(), d], 0.02, rng),
            cls_token: randn(vec![1, d], 0.02, rng),
            layers,
            final_gain: Tensor::full(vec![d], 1.0),
            final_bias: Tensor::zeros(vec![d]),
            config,
        })
    }

    /// Adds every backbone weight to the registry as frozen.
    pub fn register(&self, reg: &mut ParamRegistry, prefix: &str) {
        let mut add = |name: String, t: &Tensor| reg.add(name, t.numel(), false);
        add(format!("{prefix}.patch_w"), &self.patch_w);
        add(format!("{prefix}.patch_b"), &self.patch_b);
        add(format!("{prefix}.pos_emb"), &self.pos_emb);
        add(format!("{prefix}.cls_token"), &self.cls_token);
        for (i, l) in self.layers.iter().enumerate() {
            add(format!("{prefix}.layer{i}.q_w"), &l.q_w);
            add(format!("{prefix}.layer{i}.q_b"), &l.q_b);
            add(format!("{prefix}.layer{i}.k_w"), &l.k_w);
            add(format!("{prefix}.layer{i}.k_b"), &l.k_b);
            add(format!("{prefix}.layer{i}.v_w"), &l.v_w);
            add(format!("{prefix}.layer{i}.v_b"), &l.v_b);
            add(format!("{prefix}.layer{i}.o_w"), &l.o_w);
            add(format!("{prefix}.layer{i}.o_b"), &l.o_b);
            add(format!("{prefix}.layer{i}.fc1_w"), &l.fc1_w);
            add(format!("{prefix}.layer{i}.fc1_b"), &l.fc1_b);
            add(format!("{prefix}.layer{i}.fc2_w"), &l.fc2_w);
            add(format!("{prefix}.layer{i}.fc2_b"), &l.fc2_b);
            add(format!("{prefix}.layer{i}.ln1_gain"), &l.ln1_gain);
            add(format!("{prefix}.layer{i}.ln1_bias"), &l.ln1_bias);
            add(format!("{prefix}.layer{i}.ln2_gain"), &l.ln2_gain);
            add(format!("{prefix}.layer{i}.ln2_bias"), &l.ln2_bias);
        }
        add(format!("{prefix}.final_gain"), &self.final_gain);
        add(format!("{prefix}.final_bias"), &self.final_bias);
    }
}

/// Per-layer adapters for one encoder branch. Entries are `None` for
/// non-target sites; K and O are never adapted.
#[derive(Debug, Clone)]
pub struct LayerAdapters {
    pub q: Option<LoraAdapter>,
    pub v: Option<LoraAdapter>,
}

#[derive(Debug, Clone, Default)]
pub struct AdapterSet {
    pub layers: Vec<LayerAdapters>,
}

impl AdapterSet {
    /// Fresh adapters on the configured target projections of every layer,
    /// sharing the frozen bases with `weights`.
    pub fn fresh(
        weights: &EncoderWeights,
        cfg: &crate::lora::LoraConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let layers = weights
            .layers
            .iter()
            .map(|l| {
                Ok(LayerAdapters {
                    q: if cfg.targets.q {
                        Some(LoraAdapter::new(l.q_w.clone(), cfg.clone(), rng)?)
                    } else {
                        None
                    },
                    v: if cfg.targets.v {
                        Some(LoraAdapter::new(l.v_w.clone(), cfg.clone(), rng)?)
                    } else {
                        None
                    },
                })
            })
            .collect::<Result<_>>()?;
        Ok(AdapterSet { layers })
    }

    pub fn register(&self, reg: &mut ParamRegistry, prefix: &str) {
        for (i, l) in self.layers.iter().enumerate() {
            for (site, ad) in [("q", &l.q), ("v", &l.v)] {
                if let Some(ad) = ad {
                    reg.add(format!("{prefix}.layer{i}.{site}.a"), ad.a.numel(), true);
                    reg.add(format!("{prefix}.layer{i}.{site}.b"), ad.b.numel(), true);
                }
            }
        }
    }
}

// ── graph binding ────────────────────────────────────────────────────

struct BoundLayer {
    q_w: Node,
    q_b: Node,
    k_w: Node,
    k_b: Node,
    v_w: Node,
    v_b: Node,
    o_w: Node,
    o_b: Node,
    fc1_w: Node,
    fc1_b: Node,
    fc2_w: Node,
    fc2_b: Node,
    ln1_gain: Node,
    ln1_bias: Node,
    ln2_gain: Node,
    ln2_bias: Node,
    q_adapter: Option<BoundAdapter>,
    v_adapter: Option<BoundAdapter>,
}

struct BoundAdapter {
    a: Node,
    b: Node,
    cfg_index: (usize, AdapterSite),
}

#[derive(Clone, Copy)]
enum AdapterSite {
    Q,
    V,
}

/// Encoder weights (and optional adapters) inserted into one graph.
/// Parameter nodes are shared across every `encode` call on the same
/// graph, so gradients accumulate over batch samples.
pub struct BoundEncoder<'w> {
    weights: &'w EncoderWeights,
    adapters: Option<&'w AdapterSet>,
    patch_w: Node,
    patch_b: Node,
    pos_emb: Node,
    cls_token: Node,
    layers: Vec<BoundLayer>,
    final_gain: Node,
    final_bias: Node,
}

/// Iterator order of an adapter set's trainable tensors: layer-major,
/// Q before V, A before B. Binding, optimizers and checkpoints all rely
/// on this single ordering.
pub fn adapter_tensors(set: &AdapterSet) -> Vec<&Tensor> {
    let mut out = Vec::new();
    for l in &set.layers {
        for ad in [&l.q, &l.v].into_iter().flatten() {
            out.push(&ad.a);
            out.push(&ad.b);
        }
    }
    out
}

pub fn adapter_tensors_mut(set: &mut AdapterSet) -> Vec<&mut Tensor> {
    let mut out = Vec::new();
    for l in &mut set.layers {
        for ad in [&mut l.q, &mut l.v].into_iter().flatten() {
            out.push(&mut ad.a);
            out.push(&mut ad.b);
        }
    }
    out
}

impl<'w> BoundEncoder<'w> {
    /// Binds weights as constants and adapter factors from the supplied
    /// leaf nodes (consumed in [`adapter_tensors`] order).
    pub fn bind_with_nodes(
        g: &mut Graph,
        weights: &'w EncoderWeights,
        adapters: Option<&'w AdapterSet>,
        adapter_nodes: &mut std::slice::Iter<'_, Node>,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(weights.layers.len());
        for (i, l) in weights.layers.iter().enumerate() {
            let mut bound = BoundLayer {
                q_w: g.constant(&l.q_w),
                q_b: g.constant(&l.q_b),
                k_w: g.constant(&l.k_w),
                k_b: g.constant(&l.k_b),
                v_w: g.constant(&l.v_w),
                v_b: g.constant(&l.v_b),
                o_w: g.constant(&l.o_w),
                o_b: g.constant(&l.o_b),
                fc1_w: g.constant(&l.fc1_w),
                fc1_b: g.constant(&l.fc1_b),
                fc2_w: g.constant(&l.fc2_w),
                fc2_b: g.constant(&l.fc2_b),
                ln1_gain: g.constant(&l.ln1_gain),
                ln1_bias: g.constant(&l.ln1_bias),
                ln2_gain: g.constant(&l.ln2_gain),
                ln2_bias: g.constant(&l.ln2_bias),
                q_adapter: None,
                v_adapter: None,
            };
            if let Some(set) = adapters {
                let la = set.layers.get(i).ok_or_else(|| {
                    Error::Config(format!("adapter set shorter than encoder ({i} layers)"))
                })?;
                if let Some(ad) = &la.q {
                    check_adapter_dims(ad, weights.config.embed_dim)?;
                    let a = *adapter_nodes.next().ok_or_else(missing_node)?;
                    let b = *adapter_nodes.next().ok_or_else(missing_node)?;
                    bound.q_adapter = Some(BoundAdapter {
                        a,
                        b,
                        cfg_index: (i, AdapterSite::Q),
                    });
                }
                if let Some(ad) = &la.v {
                    check_adapter_dims(ad, weights.config.embed_dim)?;
                    let a = *adapter_nodes.next().ok_or_else(missing_node)?;
                    let b = *adapter_nodes.next().ok_or_else(missing_node)?;
                    bound.v_adapter = Some(BoundAdapter {
                        a,
                        b,
                        cfg_index: (i, AdapterSite::V),
                    });
                }
            }
            layers.push(bound);
        }
        Ok(BoundEncoder {
            weights,
            adapters,
            patch_w: g.constant(&weights.patch_w),
            patch_b: g.constant(&weights.patch_b),
            pos_emb: g.constant(&weights.pos_emb),
            cls_token: g.constant(&weights.cls_token),
            layers,
            final_gain: g.constant(&weights.final_gain),
            final_bias: g.constant(&weights.final_bias),
        })
    }

    /// Convenience binding that inserts adapter leaves itself.
    pub fn bind(
        g: &mut Graph,
        weights: &'w EncoderWeights,
        adapters: Option<&'w AdapterSet>,
    ) -> Result<Self> {
        let nodes: Vec<Node> = match adapters {
            Some(set) => adapter_tensors(set).into_iter().map(|t| g.leaf(t)).collect(),
            None => Vec::new(),
        };
        Self::bind_with_nodes(g, weights, adapters, &mut nodes.iter())
    }

    /// Tokenization: linear patch projection, prepended CLS token,
    /// positional embeddings.
    pub fn patchify(&self, g: &mut Graph, image: &Tensor) -> Result<Node> {
        let cfg = &self.weights.config;
        let patches = extract_patches(image, cfg)?;
        let p = g.constant(&patches);
        let w_t = g.transpose(self.patch_w)?;
        let projected = g.matmul(p, w_t)?;
        let projected = g.add(projected, self.patch_b)?;
        let tokens = g.concat_rows(&[self.cls_token, projected])?;
        g.add(tokens, self.pos_emb)
    }

    /// Multi-head self-attention with optional low-rank updates on the Q
    /// and V projections; K and O always run the frozen path.
    pub fn attention(
        &self,
        g: &mut Graph,
        tokens: Node,
        layer: usize,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<Node> {
        let cfg = &self.weights.config;
        let l = &self.layers[layer];
        let q = self.project(g, tokens, l.q_w, l.q_b, l.q_adapter.as_ref(), training, rng)?;
        let k = linear(g, tokens, l.k_w, l.k_b)?;
        let v = self.project(g, tokens, l.v_w, l.v_b, l.v_adapter.as_ref(), training, rng)?;

        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(cfg.num_heads);
        for h in 0..cfg.num_heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, lo, hi)?;
            let kh = g.slice_cols(k, lo, hi)?;
            let vh = g.slice_cols(v, lo, hi)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale)?;
            let attn = g.softmax(scores, 1)?;
            heads.push(g.matmul(attn, vh)?);
        }
        let merged = g.concat_cols(&heads)?;
        linear(g, merged, l.o_w, l.o_b)
    }

    fn project(
        &self,
        g: &mut Graph,
        x: Node,
        w: Node,
        b: Node,
        adapter: Option<&BoundAdapter>,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<Node> {
        let frozen = linear(g, x, w, b)?;
        let Some(bound) = adapter else {
            return Ok(frozen);
        };
        let set = self.adapters.expect("bound adapter implies adapter set");
        let (layer, site) = bound.cfg_index;
        let ad = match site {
            AdapterSite::Q => set.layers[layer].q.as_ref(),
            AdapterSite::V => set.layers[layer].v.as_ref(),
        }
        .expect("bound adapter exists in set");

        let low_in = if training && ad.config.dropout > 0.0 {
            g.dropout(x, ad.config.dropout, rng)?
        } else {
            x
        };
        let a_t = g.transpose(bound.a)?;
        let b_t = g.transpose(bound.b)?;
        let xa = g.matmul(low_in, a_t)?;
        let xab = g.matmul(xa, b_t)?;
        let delta = g.scale(xab, ad.config.scale())?;
        g.add(frozen, delta)
    }

    /// Full forward pass; returns the CLS-token representation after the
    /// final norm as a 1-D embedding node.
    pub fn encode(
        &self,
        g: &mut Graph,
        image: &Tensor,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<Node> {
        let cfg = &self.weights.config;
        let mut x = self.patchify(g, image)?;
        for layer in 0..self.layers.len() {
            let l = &self.layers[layer];
            let normed = g.layer_norm(x, l.ln1_gain, l.ln1_bias, LAYER_NORM_EPS)?;
            let attn = self.attention(g, normed, layer, training, rng)?;
            x = g.add(x, attn)?;
            let l = &self.layers[layer];
            let normed = g.layer_norm(x, l.ln2_gain, l.ln2_bias, LAYER_NORM_EPS)?;
            let h = linear(g, normed, l.fc1_w, l.fc1_b)?;
            let h = g.gelu(h)?;
            let h = linear(g, h, l.fc2_w, l.fc2_b)?;
            x = g.add(x, h)?;
        }
        let x = g.layer_norm(x, self.final_gain, self.final_bias, LAYER_NORM_EPS)?;
        let cls = g.slice_rows(x, 0, 1)?;
        g.reshape(cls, vec![cfg.embed_dim])
    }
}

fn check_adapter_dims(ad: &LoraAdapter, embed_dim: usize) -> Result<()> {
    if ad.in_dim() != embed_dim || ad.out_dim() != embed_dim {
        return Err(Error::Config(format!(
            "adapter base {:?} incompatible with embed_dim {embed_dim}",
            ad.base().shape()
        )));
    }
    Ok(())
}

fn missing_node() -> Error {
    Error::Contract("fewer adapter nodes than adapter tensors".into())
}

/// `x [T×in] · wᵀ [in×out] + b`, the row-major linear layer.
pub fn linear(g: &mut Graph, x: Node, w: Node, b: Node) -> Result<Node> {
    let w_t = g.transpose(w)?;
    let y = g.matmul(x, w_t)?;
    g.add(y, b)
}

/// Reorders a `[C,H,W]` image into a `[num_patches, C·ps·ps]` matrix;
/// patches scan the grid row-major, features are (channel, py, px).
pub fn extract_patches(image: &Tensor, cfg: &ViTConfig) -> Result<Tensor> {
    let expect = [cfg.channels, cfg.image_size, cfg.image_size];
    if image.shape() != expect {
        return Err(Error::ShapeMismatch {
            op: "patchify",
            lhs: expect.to_vec(),
            rhs: image.shape().to_vec(),
        });
    }
    let (c, hw, ps, grid) = (cfg.channels, cfg.image_size, cfg.patch_size, cfg.grid());
    let src = image.data();
    let mut out = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    for gy in 0..grid {
        for gx in 0..grid {
            for ch in 0..c {
                for py in 0..ps {
                    for px in 0..ps {
                        let y = gy * ps + py;
                        let x = gx * ps + px;
                        out.push(src[ch * hw * hw + y * hw + x]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![cfg.num_patches(), cfg.patch_dim()], out)
}

/// Convenience one-shot encode on a private graph (inference path).
pub fn encode(
    weights: &EncoderWeights,
    adapters: Option<&AdapterSet>,
    image: &Tensor,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = BoundEncoder::bind(&mut g, weights, adapters)?;
    let mut rng = crate::rng::stream(0, &[]);
    let node = bound.encode(&mut g, image, false, &mut rng)?;
    Ok(g.value(node).clone())
}
