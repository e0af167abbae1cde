//! Dual-stream detector: two independently adapted encoder branches over
//! one shared frozen backbone, a differential embedding, and a linear
//! classification head. A single-image variant scores the suspected
//! image alone.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Node, Tensor};
use crate::error::{Error, Result};
use crate::lora::{LoraConfig, ParamRegistry};
use crate::metrics::Label;
use crate::rng;
use crate::vit::{adapter_tensors, adapter_tensors_mut, AdapterSet, BoundEncoder, EncoderWeights, ViTConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorMode {
    /// Score the pair through the differential embedding (live − suspected).
    Differential,
    /// Score the suspected image alone; the live image is never read.
    SingleImage,
}

/// A (suspected, live) image pair with ground truth. Access to the live
/// image goes through [`PairSample::live`], which records the read so
/// single-image runs can prove they never touched it.
#[derive(Debug)]
pub struct PairSample {
    pub pair_id: String,
    suspected: Tensor,
    live: Tensor,
    pub label: Label,
    pub tool_tag: String,
    live_accessed: AtomicBool,
}

impl Clone for PairSample {
    fn clone(&self) -> Self {
        PairSample {
            pair_id: self.pair_id.clone(),
            suspected: self.suspected.clone(),
            live: self.live.clone(),
            label: self.label,
            tool_tag: self.tool_tag.clone(),
            live_accessed: AtomicBool::new(self.live_accessed.load(Ordering::Relaxed)),
        }
    }
}

impl PairSample {
    pub fn new(
        pair_id: impl Into<String>,
        suspected: Tensor,
        live: Tensor,
        label: Label,
        tool_tag: impl Into<String>,
    ) -> Self {
        PairSample {
            pair_id: pair_id.into(),
            suspected,
            live,
            label,
            tool_tag: tool_tag.into(),
            live_accessed: AtomicBool::new(false),
        }
    }

    pub fn suspected(&self) -> &Tensor {
        &self.suspected
    }

    /// The trusted live capture; reading it trips the access probe.
    pub fn live(&self) -> &Tensor {
        self.live_accessed.store(true, Ordering::Relaxed);
        &self.live
    }

    pub fn live_was_accessed(&self) -> bool {
        self.live_accessed.load(Ordering::Relaxed)
    }

    /// Replaces both images (augmentation); preserves the probe state.
    pub fn with_images(&self, suspected: Tensor, live: Tensor) -> Self {
        PairSample {
            pair_id: self.pair_id.clone(),
            suspected,
            live,
            label: self.label,
            tool_tag: self.tool_tag.clone(),
            live_accessed: AtomicBool::new(self.live_accessed.load(Ordering::Relaxed)),
        }
    }

    /// Replaces only the suspected image (single-image augmentation).
    pub fn with_suspected(&self, suspected: Tensor) -> Self {
        PairSample {
            pair_id: self.pair_id.clone(),
            suspected,
            live: self.live.clone(),
            label: self.label,
            tool_tag: self.tool_tag.clone(),
            live_accessed: AtomicBool::new(self.live_accessed.load(Ordering::Relaxed)),
        }
    }

    pub fn gamma(&self) -> f64 {
        self.label.gamma()
    }
}

/// Linear classification head `embed_dim → 1` followed by a sigmoid.
#[derive(Debug, Clone)]
pub struct Head {
    pub w: Tensor,
    pub b: Tensor,
}

impl Head {
    /// Zero-initialized: every score starts at exactly 0.5.
    pub fn zeros(embed_dim: usize) -> Self {
        let mut w = Tensor::zeros(vec![1, embed_dim]);
        w.set_requires_grad(true);
        let mut b = Tensor::zeros(vec![1]);
        b.set_requires_grad(true);
        Head { w, b }
    }
}

/// The full detector. Both branches share `backbone` physically (frozen,
/// read-only); adapter parameters are per-branch and never tied.
#[derive(Debug, Clone)]
pub struct Detector {
    pub backbone: Arc<EncoderWeights>,
    pub branch_m: AdapterSet,
    pub branch_l: AdapterSet,
    pub head: Head,
    pub mode: DetectorMode,
    /// Ablation switch: compute suspected − live instead of live − suspected.
    pub flip_difference: bool,
    pub lora_config: LoraConfig,
}

impl Detector {
    /// Builds a detector with a seeded random frozen backbone, fresh
    /// independent adapters on both branches, and a zero head.
    pub fn build(
        vit: ViTConfig,
        lora: LoraConfig,
        mode: DetectorMode,
        seed: u64,
    ) -> Result<Self> {
        vit.validate()?;
        lora.validate()?;
        let mut backbone_rng = rng::stream(seed, &[0x0b]);
        let backbone = Arc::new(EncoderWeights::random(vit, &mut backbone_rng)?);
        let mut m_rng = rng::stream(seed, &[0x0a, 0]);
        let mut l_rng = rng::stream(seed, &[0x0a, 1]);
        let branch_m = AdapterSet::fresh(&backbone, &lora, &mut m_rng)?;
        let branch_l = AdapterSet::fresh(&backbone, &lora, &mut l_rng)?;
        let head = Head::zeros(backbone.config.embed_dim);
        Ok(Detector {
            backbone,
            branch_m,
            branch_l,
            head,
            mode,
            flip_difference: false,
            lora_config: lora,
        })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.backbone.config
    }

    /// Registry of every weight: shared backbone once (frozen), both
    /// adapter sets and the head (trainable).
    pub fn registry(&self) -> ParamRegistry {
        let mut reg = ParamRegistry::new();
        self.backbone.register(&mut reg, "backbone");
        self.branch_m.register(&mut reg, "branch_m");
        self.branch_l.register(&mut reg, "branch_l");
        reg.add("head.w", self.head.w.numel(), true);
        reg.add("head.b", self.head.b.numel(), true);
        reg
    }

    /// Trainable tensors in binding order: branch_m adapters, then (in
    /// differential mode) branch_l adapters, then head weight and bias.
    /// Single-image mode trains only the suspected branch and head.
    pub fn trainable_tensors(&self) -> Vec<&Tensor> {
        let mut out = adapter_tensors(&self.branch_m);
        if self.mode == DetectorMode::Differential {
            out.extend(adapter_tensors(&self.branch_l));
        }
        out.push(&self.head.w);
        out.push(&self.head.b);
        out
    }

    pub fn trainable_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = adapter_tensors_mut(&mut self.branch_m);
        if self.mode == DetectorMode::Differential {
            out.extend(adapter_tensors_mut(&mut self.branch_l));
        }
        out.push(&mut self.head.w);
        out.push(&mut self.head.b);
        out
    }

    /// Inserts all parameters into `g` and returns the bound model. One
    /// bind per graph; reuse it across the samples of a batch.
    pub fn bind<'m>(&'m self, g: &mut Graph) -> Result<BoundDetector<'m>> {
        let nodes: Vec<Node> = self.trainable_tensors().into_iter().map(|t| g.leaf(t)).collect();
        self.bind_with_nodes(g, &nodes)
    }

    /// Binding against externally created leaves (finite-difference
    /// checks); `nodes` must follow [`Detector::trainable_tensors`] order.
    pub fn bind_with_nodes<'m>(&'m self, g: &mut Graph, nodes: &[Node]) -> Result<BoundDetector<'m>> {
        let expected = self.trainable_tensors().len();
        if nodes.len() != expected {
            return Err(Error::Contract(format!(
                "expected {expected} trainable nodes, got {}",
                nodes.len()
            )));
        }
        let mut it = nodes.iter();
        let enc_m = BoundEncoder::bind_with_nodes(g, &self.backbone, Some(&self.branch_m), &mut it)?;
        let enc_l = match self.mode {
            DetectorMode::Differential => Some(BoundEncoder::bind_with_nodes(
                g,
                &self.backbone,
                Some(&self.branch_l),
                &mut it,
            )?),
            DetectorMode::SingleImage => None,
        };
        let head_w = *it.next().ok_or_else(short)?;
        let head_b = *it.next().ok_or_else(short)?;
        Ok(BoundDetector {
            model: self,
            enc_m,
            enc_l,
            head_w,
            head_b,
            trainable_nodes: nodes.to_vec(),
        })
    }

    /// Detection score in [0, 1]; higher means more morph-like. Pure
    /// inference on a private graph, dropout disabled.
    pub fn score(&self, pair: &PairSample) -> Result<f64> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g)?;
        let mut rng = rng::stream(0, &[]);
        let logit = bound.logit(&mut g, pair, false, &mut rng)?;
        let s = g.sigmoid(logit)?;
        g.value(s).item()
    }
}

fn short() -> Error {
    Error::Contract("trainable node list too short".into())
}

/// Detector bound into one graph.
pub struct BoundDetector<'m> {
    model: &'m Detector,
    enc_m: BoundEncoder<'m>,
    enc_l: Option<BoundEncoder<'m>>,
    head_w: Node,
    head_b: Node,
    trainable_nodes: Vec<Node>,
}

impl<'m> BoundDetector<'m> {
    /// Leaf nodes of the trainable parameters, in
    /// [`Detector::trainable_tensors`] order; read gradients here after
    /// backward.
    pub fn trainable_nodes(&self) -> &[Node] {
        &self.trainable_nodes
    }

    /// Differential embedding `e_l − e_m` (live minus suspected, unless
    /// flipped for ablation). Only valid in differential mode.
    pub fn differential_embedding(
        &self,
        g: &mut Graph,
        pair: &PairSample,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<Node> {
        let enc_l = self.enc_l.as_ref().ok_or_else(|| {
            Error::Contract("differential_embedding called in single_image mode".into())
        })?;
        let e_m = self.enc_m.encode(g, pair.suspected(), training, rng)?;
        let e_l = enc_l.encode(g, pair.live(), training, rng)?;
        if self.model.flip_difference {
            g.sub(e_m, e_l)
        } else {
            g.sub(e_l, e_m)
        }
    }

    /// Pre-sigmoid score of one pair.
    pub fn logit(
        &self,
        g: &mut Graph,
        pair: &PairSample,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<Node> {
        let features = match self.model.mode {
            DetectorMode::Differential => self.differential_embedding(g, pair, training, rng)?,
            DetectorMode::SingleImage => {
                self.enc_m.encode(g, pair.suspected(), training, rng)?
            }
        };
        let d = self.model.backbone.config.embed_dim;
        let col = g.reshape(features, vec![d, 1])?;
        let z = g.matmul(self.head_w, col)?;
        let z = g.reshape(z, vec![1])?;
        let z = g.add(z, self.head_b)?;
        g.reshape(z, vec![])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::Pooling;

    fn tiny_vit() -> ViTConfig {
        ViTConfig {
            image_size: 16,
            patch_size: 8,
            channels: 1,
            embed_dim: 8,
            num_heads: 2,
            num_layers: 2,
            mlp_ratio: 2.0,
            pooling: Pooling::ClsToken,
        }
    }

    fn tiny_lora() -> LoraConfig {
        LoraConfig {
            rank: 2,
            alpha: 4.0,
            dropout: 0.2,
            ..LoraConfig::default()
        }
    }

    fn image(seed: u64) -> Tensor {
        let mut r = rng::stream(seed, &[99]);
        let data = (0..256).map(|_| r.gen::<f64>()).collect();
        Tensor::new(vec![1, 16, 16], data).unwrap()
    }

    fn pair(a: Tensor, b: Tensor, label: Label) -> PairSample {
        PairSample::new("p0", a, b, label, "t")
    }

    #[test]
    fn initial_score_is_exactly_half() {
        let m = Detector::build(tiny_vit(), tiny_lora(), DetectorMode::Differential, 11).unwrap();
        let p = pair(image(1), image(1), Label::BonaFide);
        assert_eq!(m.score(&p).unwrap(), 0.5);
        let p2 = pair(image(2), image(3), Label::Morph);
        assert_eq!(m.score(&p2).unwrap(), 0.5);
    }

    #[test]
    fn identical_inputs_give_zero_differential() {
        let m = Detector::build(tiny_vit(), tiny_lora(), DetectorMode::Differential, 12).unwrap();
        let p = pair(image(4), image(4), Label::BonaFide);
        let mut g = Graph::new();
        let bound = m.bind(&mut g).unwrap();
        let mut r = rng::stream(0, &[]);
        let delta = bound.differential_embedding(&mut g, &p, false, &mut r).unwrap();
        // fresh adapters are zero updates, so both branches compute the
        // same function and the self-difference vanishes exactly
        assert!(g.value(delta).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn swap_negates_differential_with_tied_branches() {
        let mut m = Detector::build(tiny_vit(), tiny_lora(), DetectorMode::Differential, 13).unwrap();
        m.branch_l = m.branch_m.clone(); // forcibly tie parameters
        let (xa, xb) = (image(5), image(6));
        let mut g = Graph::new();
        let bound = m.bind(&mut g).unwrap();
        let mut r = rng::stream(0, &[]);
        let fwd = pair(xa.clone(), xb.clone(), Label::Morph);
        let rev = pair(xb, xa, Label::Morph);
        let d1 = bound.differential_embedding(&mut g, &fwd, false, &mut r).unwrap();
        let d2 = bound.differential_embedding(&mut g, &rev, false, &mut r).unwrap();
        for (a, b) in g.value(d1).data().iter().zip(g.value(d2).data()) {
            assert!((a + b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_image_mode_never_reads_live() {
        let m = Detector::build(tiny_vit(), tiny_lora(), DetectorMode::SingleImage, 14).unwrap();
        let p = pair(image(7), image(8), Label::Morph);
        let _ = m.score(&p).unwrap();
        assert!(!p.live_was_accessed());

        let d = Detector::build(tiny_vit(), tiny_lora(), DetectorMode::Differential, 14).unwrap();
        let p2 = pair(image(7), image(8), Label::Morph);
        let _ = d.score(&p2).unwrap();
        assert!(p2.live_was_accessed());
    }

    #[test]
    fn differential_embedding_rejected_in_single_image_mode() {
        let m = Detector::build(tiny_vit(), tiny_lora(), DetectorMode::SingleImage, 15).unwrap();
        let p = pair(image(1), image(2), Label::Morph);
        let mut g = Graph::new();
        let bound = m.bind(&mut g).unwrap();
        let mut r = rng::stream(0, &[]);
        assert!(matches!(
            bound.differential_embedding(&mut g, &p, false, &mut r),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn registry_shape() {
        let m = Detector::build(tiny_vit(), tiny_lora(), DetectorMode::Differential, 16).unwrap();
        let reg = m.registry();
        let backbone_frozen = reg
            .entries()
            .iter()
            .filter(|e| e.name.starts_with("backbone") && !e.trainable)
            .count();
        let backbone_total = reg.entries().iter().filter(|e| e.name.starts_with("backbone")).count();
        assert_eq!(backbone_frozen, backbone_total);
        for prefix in ["branch_m", "branch_l", "head"] {
            assert!(reg
                .entries()
                .iter()
                .filter(|e| e.name.starts_with(prefix))
                .all(|e| e.trainable));
        }
        // per layer 2 adapters × 2 tensors × 2 layers per branch
        let m_count = reg.entries().iter().filter(|e| e.name.starts_with("branch_m")).count();
        assert_eq!(m_count, 8);
    }

    #[test]
    fn branches_share_backbone_storage() {
        let m = Detector::build(tiny_vit(), tiny_lora(), DetectorMode::Differential, 17).unwrap();
        for (l, w) in m.branch_m.layers.iter().zip(m.backbone.layers.iter()) {
            assert!(Arc::ptr_eq(l.q.as_ref().unwrap().base(), &w.q_w));
            assert!(Arc::ptr_eq(l.v.as_ref().unwrap().base(), &w.v_w));
        }
        for (l, w) in m.branch_l.layers.iter().zip(m.backbone.layers.iter()) {
            assert!(Arc::ptr_eq(l.q.as_ref().unwrap().base(), &w.q_w));
        }
    }

    #[test]
    fn flip_difference_negates() {
        let mut m = Detector::build(tiny_vit(), tiny_lora(), DetectorMode::Differential, 18).unwrap();
        let p = pair(image(9), image(10), Label::Morph);
        let mut g = Graph::new();
        let bound = m.bind(&mut g).unwrap();
        let mut r = rng::stream(0, &[]);
        let d1 = bound.differential_embedding(&mut g, &p, false, &mut r).unwrap();
        let d1 = g.value(d1).clone();

        m.flip_difference = true;
        let mut g2 = Graph::new();
        let bound2 = m.bind(&mut g2).unwrap();
        let d2 = bound2.differential_embedding(&mut g2, &p, false, &mut r).unwrap();
        for (a, b) in d1.data().iter().zip(g2.value(d2).data()) {
            assert!((a + b).abs() < 1e-15);
        }
    }
}
