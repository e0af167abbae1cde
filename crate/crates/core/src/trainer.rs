//! Focal-loss optimization of adapter and head parameters: class-balanced
//! batch sampling, light augmentation, Adam with decoupled weight decay.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Node, Tensor};
use crate::error::{Error, Result};
use crate::metrics::Label;
use crate::model::{Detector, DetectorMode, PairSample};
use crate::rng;

/// Clamp floor for p_t before the log; keeps perfectly-confident wrong
/// predictions finite. Documented saturation, below test tolerances.
pub const P_T_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FocalLossConfig {
    /// Weight of the positive (morph) class; the negative class gets 1−α.
    pub alpha_t: f64,
    /// Focusing exponent η; 0 recovers (weighted) cross-entropy.
    pub eta: f64,
}

impl Default for FocalLossConfig {
    fn default() -> Self {
        FocalLossConfig {
            alpha_t: 0.25,
            eta: 2.0,
        }
    }
}

impl FocalLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha_t) {
            return Err(Error::Config(format!("alpha_t {} outside [0,1]", self.alpha_t)));
        }
        if self.eta < 0.0 {
            return Err(Error::Config(format!("eta {} must be >= 0", self.eta)));
        }
        Ok(())
    }
}

/// Focal loss of one sample from its pre-sigmoid logit:
/// `−α_eff · (1 − p_t)^η · log(p_t)` with `p_t = σ(z)` for morphs and
/// `1 − σ(z)` for bona fides; `α_eff` is `α_t` or `1 − α_t` respectively.
pub fn focal_loss(
    g: &mut Graph,
    logit: Node,
    label: Label,
    cfg: &FocalLossConfig,
) -> Result<Node> {
    cfg.validate()?;
    if !g.value(logit).is_scalar() {
        return Err(Error::Contract(format!(
            "focal loss expects a scalar logit, got {:?}",
            g.value(logit).shape()
        )));
    }
    let p = g.sigmoid(logit)?;
    let p_t = match label {
        Label::Morph => p,
        Label::BonaFide => g.affine(p, -1.0, 1.0)?,
    };
    let p_t = g.clamp(p_t, P_T_EPS, 1.0 - P_T_EPS)?;
    let one_minus = g.affine(p_t, -1.0, 1.0)?;
    let focus = g.pow_scalar(one_minus, cfg.eta)?;
    let log_p = g.log(p_t)?;
    let prod = g.mul(focus, log_p)?;
    let alpha_eff = match label {
        Label::Morph => cfg.alpha_t,
        Label::BonaFide => 1.0 - cfg.alpha_t,
    };
    g.scale(prod, -alpha_eff)
}

// ── batch sampling ───────────────────────────────────────────────────

/// Class-balanced batches: ⌈b/2⌉ bona fide and ⌊b/2⌋ morph indices per
/// batch. The majority class is covered by a shuffled pass per epoch;
/// the minority class is resampled with replacement. Deterministic under
/// the rng.
pub fn balanced_batches(
    dataset: &[PairSample],
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Config("balanced batches need batch_size >= 2".into()));
    }
    let bona: Vec<usize> = dataset
        .iter()
        .enumerate()
        .filter(|(_, s)| s.label == Label::BonaFide)
        .map(|(i, _)| i)
        .collect();
    let morph: Vec<usize> = dataset
        .iter()
        .enumerate()
        .filter(|(_, s)| s.label == Label::Morph)
        .map(|(i, _)| i)
        .collect();
    if bona.is_empty() || morph.is_empty() {
        return Err(Error::Protocol(
            "balanced sampling requires both classes present".into(),
        ));
    }

    let bs_slot = batch_size.div_ceil(2);
    let ma_slot = batch_size / 2;
    let (major, major_slot, minor, minor_slot, bs_is_major) = if bona.len() >= morph.len() {
        (&bona, bs_slot, &morph, ma_slot, true)
    } else {
        (&morph, ma_slot, &bona, bs_slot, false)
    };

    let num_batches = major.len().div_ceil(major_slot);
    let mut major_order = major.clone();
    major_order.shuffle(rng);
    // wrap-around for the final partial batch
    let mut extra = major.clone();
    extra.shuffle(rng);
    major_order.extend(extra);

    let mut batches = Vec::with_capacity(num_batches);
    for b in 0..num_batches {
        let major_part = &major_order[b * major_slot..(b + 1) * major_slot];
        let minor_part: Vec<usize> = (0..minor_slot)
            .map(|_| minor[rng.gen_range(0..minor.len())])
            .collect();
        let (bs_part, ma_part): (&[usize], &[usize]) = if bs_is_major {
            (major_part, &minor_part)
        } else {
            (&minor_part, major_part)
        };
        let mut batch = Vec::with_capacity(batch_size);
        batch.extend_from_slice(bs_part);
        batch.extend_from_slice(ma_part);
        batches.push(batch);
    }
    Ok(batches)
}

// ── augmentation ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AugmentFlags {
    pub random_crop: bool,
    pub horizontal_flip: bool,
    pub photometric: bool,
}

impl Default for AugmentFlags {
    fn default() -> Self {
        AugmentFlags {
            random_crop: true,
            horizontal_flip: true,
            photometric: true,
        }
    }
}

impl AugmentFlags {
    pub const NONE: AugmentFlags = AugmentFlags {
        random_crop: false,
        horizontal_flip: false,
        photometric: false,
    };
}

/// Training-time augmentation on a `[C,H,W]` image: pad-and-crop shift of
/// up to ±10% of the side, horizontal flip with p = 0.5, and
/// brightness/contrast scales drawn from [0.8, 1.2]. Output shape always
/// equals input shape; pixel values stay clamped to [0,1].
pub fn augment(image: &Tensor, flags: &AugmentFlags, rng: &mut impl Rng) -> Result<Tensor> {
    let shape = image.shape().to_vec();
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(Error::Contract(format!(
            "augment expects a square [C,H,W] image, got {shape:?}"
        )));
    }
    let (c, side) = (shape[0], shape[1]);
    let mut data = image.data().to_vec();

    if flags.random_crop {
        let pad = ((side as f64) * 0.1).round() as i64;
        if pad > 0 {
            let dy = rng.gen_range(-pad..=pad);
            let dx = rng.gen_range(-pad..=pad);
            data = shift_edge_replicate(&data, c, side, dy, dx);
        }
    }
    if flags.horizontal_flip && rng.gen::<f64>() < 0.5 {
        data = flip_horizontal(&data, c, side);
    }
    if flags.photometric {
        let contrast = rng.gen_range(0.8..1.2);
        let brightness = rng.gen_range(0.8..1.2);
        for v in data.iter_mut() {
            let centered = (*v - 0.5) * contrast + 0.5;
            *v = (centered * brightness).clamp(0.0, 1.0);
        }
    }
    Tensor::new(shape, data)
}

/// Horizontal mirror of a `[C,H,W]` image.
pub fn flip_horizontal(data: &[f64], c: usize, side: usize) -> Vec<f64> {
    let mut out = data.to_vec();
    for ch in 0..c {
        for y in 0..side {
            let row = ch * side * side + y * side;
            out[row..row + side].reverse();
        }
    }
    out
}

fn shift_edge_replicate(data: &[f64], c: usize, side: usize, dy: i64, dx: i64) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for ch in 0..c {
        for y in 0..side {
            for x in 0..side {
                let sy = (y as i64 + dy).clamp(0, side as i64 - 1) as usize;
                let sx = (x as i64 + dx).clamp(0, side as i64 - 1) as usize;
                out[ch * side * side + y * side + x] = data[ch * side * side + sy * side + sx];
            }
        }
    }
    out
}

// ── optimizer ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay subtracts `lr·wd·w` from the weights directly;
    /// disabled, decay is added to the gradient instead.
    pub decoupled_decay: bool,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            learning_rate: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decoupled_decay: true,
        }
    }
}

/// First/second moment state, aligned with the trainable tensor order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        AdamState {
            t: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
        }
    }
}

/// One bias-corrected Adam update over the trainable parameters only;
/// frozen weights are never touched by construction.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    hp: &AdamParams,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam sizes disagree: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads.iter()) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.data_mut();
        for i in 0..pd.len() {
            let grad = if hp.decoupled_decay {
                g.data()[i]
            } else {
                g.data()[i] + hp.weight_decay * pd[i]
            };
            let mi = hp.beta1 * m.data()[i] + (1.0 - hp.beta1) * grad;
            let vi = hp.beta2 * v.data()[i] + (1.0 - hp.beta2) * grad * grad;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            let mut step = hp.learning_rate * m_hat / (v_hat.sqrt() + hp.eps);
            if hp.decoupled_decay {
                step += hp.learning_rate * hp.weight_decay * pd[i];
            }
            pd[i] -= step;
        }
        if !pd.iter().all(|x| x.is_finite()) {
            return Err(Error::non_finite("adam_step"));
        }
    }
    Ok(())
}

// ── training loop ────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub augmentation: AugmentFlags,
    pub balanced_sampling: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            seed: 42,
            augmentation: AugmentFlags::default(),
            balanced_sampling: true,
        }
    }
}

/// Per-epoch mean losses; one row per epoch.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
}

/// Fixed-epoch training of the detector's adapters and head. Deterministic
/// given the seed; frozen backbone weights are untouched throughout.
pub fn train(
    model: &mut Detector,
    dataset: &[PairSample],
    cfg: &TrainConfig,
    loss_cfg: &FocalLossConfig,
) -> Result<TrainReport> {
    train_with_hook(model, dataset, cfg, loss_cfg, |_, _, _| Ok(()))
}

/// [`train`] with a per-epoch observer `(epoch, model, mean_loss)`,
/// e.g. for periodic checkpointing.
pub fn train_with_hook(
    model: &mut Detector,
    dataset: &[PairSample],
    cfg: &TrainConfig,
    loss_cfg: &FocalLossConfig,
    mut on_epoch: impl FnMut(usize, &Detector, f64) -> Result<()>,
) -> Result<TrainReport> {
    loss_cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Protocol("training dataset is empty".into()));
    }
    if cfg.epochs == 0 {
        return Err(Error::Config("training needs at least one epoch".into()));
    }
    let hp = AdamParams {
        learning_rate: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        ..AdamParams::default()
    };
    let mut state = AdamState::new(&model.trainable_tensors());
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut batch_rng = rng::stream(cfg.seed, &[0x0b, epoch as u64]);
        let batches = if cfg.balanced_sampling {
            balanced_batches(dataset, cfg.batch_size, &mut batch_rng)?
        } else {
            sequential_batches(dataset.len(), cfg.batch_size, &mut batch_rng)
        };
        let mut aug_rng = rng::stream(cfg.seed, &[0x0c, epoch as u64]);
        let mut drop_rng = rng::stream(cfg.seed, &[0x0d, epoch as u64]);

        let mut epoch_loss = 0.0;
        for (batch_id, batch) in batches.iter().enumerate() {
            let samples: Vec<PairSample> = batch
                .iter()
                .map(|&i| augment_pair(&dataset[i], model.mode, &cfg.augmentation, &mut aug_rng))
                .collect::<Result<_>>()?;

            let (loss_val, grads) = {
                let mut g = Graph::new();
                let bound = model.bind(&mut g)?;
                let mut losses = Vec::with_capacity(samples.len());
                for s in &samples {
                    let logit = bound.logit(&mut g, s, true, &mut drop_rng)?;
                    losses.push(focal_loss(&mut g, logit, s.label, loss_cfg)?);
                }
                let total = g.add_n(&losses)?;
                let loss = g.scale(total, 1.0 / losses.len() as f64)?;
                let loss_val = g.value(loss).item()?;
                if !loss_val.is_finite() {
                    return Err(diverged(model, epoch, batch_id));
                }
                g.backward(loss)
                    .map_err(|e| wrap_diverged(e, model, epoch, batch_id))?;
                let grads: Vec<Tensor> = bound
                    .trainable_nodes()
                    .iter()
                    .zip(model.trainable_tensors().iter())
                    .map(|(n, p)| match g.grad(*n) {
                        Some(t) => t.clone(),
                        None => Tensor::zeros(p.shape().to_vec()),
                    })
                    .collect();
                (loss_val, grads)
            };
            let mut params = model.trainable_tensors_mut();
            adam_step(&mut params, &grads, &mut state, &hp)?;
            epoch_loss += loss_val;
        }
        let mean = epoch_loss / batches.len() as f64;
        epoch_losses.push(mean);
        on_epoch(epoch, model, mean)?;
    }
    Ok(TrainReport { epoch_losses })
}

fn sequential_batches(n: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

fn augment_pair(
    sample: &PairSample,
    mode: DetectorMode,
    flags: &AugmentFlags,
    rng: &mut impl Rng,
) -> Result<PairSample> {
    if !flags.random_crop && !flags.horizontal_flip && !flags.photometric {
        return Ok(sample.clone());
    }
    let suspected = augment(sample.suspected(), flags, rng)?;
    match mode {
        // augmentation parameters are drawn independently per image
        DetectorMode::Differential => {
            let live = augment(sample.live(), flags, rng)?;
            Ok(sample.with_images(suspected, live))
        }
        DetectorMode::SingleImage => Ok(sample.with_suspected(suspected)),
    }
}

fn diverged(model: &Detector, epoch: usize, batch_id: usize) -> Error {
    let norms: Vec<String> = model
        .trainable_tensors()
        .iter()
        .enumerate()
        .map(|(i, t)| format!("p{i}={:.3e}", t.l2_norm()))
        .collect();
    Error::NonFinite {
        op: "train",
        detail: format!(
            " (epoch {epoch}, batch {batch_id}; parameter norms: {})",
            norms.join(", ")
        ),
    }
}

fn wrap_diverged(e: Error, model: &Detector, epoch: usize, batch_id: usize) -> Error {
    match e {
        Error::NonFinite { .. } => diverged(model, epoch, batch_id),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::LoraConfig;
    use crate::vit::{Pooling, ViTConfig};

    fn eval_focal(logit: f64, label: Label, cfg: &FocalLossConfig) -> f64 {
        let mut g = Graph::new();
        let z = g.leaf(&Tensor::scalar(logit));
        let l = focal_loss(&mut g, z, label, cfg).unwrap();
        g.value(l).item().unwrap()
    }

    #[test]
    fn worked_value_at_zero_logit() {
        // p_t = 0.5 → L = 0.25 · 0.25 · ln 2
        let cfg = FocalLossConfig::default();
        let expected = 0.25 * 0.25 * std::f64::consts::LN_2;
        assert!((eval_focal(0.0, Label::Morph, &cfg) - expected).abs() < 1e-12);
    }

    #[test]
    fn eta_zero_symmetric_alpha_is_half_bce() {
        let cfg = FocalLossConfig {
            alpha_t: 0.5,
            eta: 0.0,
        };
        for (z, label) in [
            (0.7, Label::Morph),
            (-1.3, Label::Morph),
            (2.1, Label::BonaFide),
            (-0.4, Label::BonaFide),
        ] {
            let sig = 1.0 / (1.0 + (-z as f64).exp());
            let bce = match label {
                Label::Morph => -sig.ln(),
                Label::BonaFide => -(1.0 - sig).ln(),
            };
            assert!((eval_focal(z, label, &cfg) - 0.5 * bce).abs() < 1e-12);
        }
    }

    #[test]
    fn perfectly_classified_contributes_nothing() {
        let cfg = FocalLossConfig::default();
        assert!(eval_focal(40.0, Label::Morph, &cfg) < 1e-20);
        assert!(eval_focal(-40.0, Label::BonaFide, &cfg) < 1e-20);
    }

    #[test]
    fn monotonicity_in_logit() {
        let cfg = FocalLossConfig::default();
        let grid: Vec<f64> = (-50..50).map(|i| i as f64 / 10.0).collect();
        for w in grid.windows(2) {
            assert!(eval_focal(w[1], Label::Morph, &cfg) < eval_focal(w[0], Label::Morph, &cfg));
            assert!(
                eval_focal(w[1], Label::BonaFide, &cfg) > eval_focal(w[0], Label::BonaFide, &cfg)
            );
        }
    }

    fn dataset(n_bs: usize, n_ma: usize) -> Vec<PairSample> {
        let img = |v: f64| Tensor::full(vec![1, 8, 8], v.clamp(0.0, 1.0));
        let mut out = Vec::new();
        for i in 0..n_bs {
            out.push(PairSample::new(
                format!("bs{i}"),
                img(0.2 + 0.001 * i as f64),
                img(0.21),
                Label::BonaFide,
                "bonafide",
            ));
        }
        for i in 0..n_ma {
            out.push(PairSample::new(
                format!("ma{i}"),
                img(0.8 - 0.001 * i as f64),
                img(0.3),
                Label::Morph,
                "tool",
            ));
        }
        out
    }

    #[test]
    fn balanced_batches_have_exact_composition() {
        let ds = dataset(10, 90);
        let mut r = rng::stream(5, &[]);
        let batches = balanced_batches(&ds, 10, &mut r).unwrap();
        assert_eq!(batches.len(), 18); // 90 morphs / 5 per batch
        for b in &batches {
            let bs = b.iter().filter(|&&i| ds[i].label == Label::BonaFide).count();
            assert_eq!(bs, 5);
            assert_eq!(b.len(), 10);
        }
    }

    #[test]
    fn balanced_batches_deterministic() {
        let ds = dataset(7, 13);
        let b1 = balanced_batches(&ds, 6, &mut rng::stream(9, &[])).unwrap();
        let b2 = balanced_batches(&ds, 6, &mut rng::stream(9, &[])).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn balanced_batches_require_both_classes() {
        let ds = dataset(5, 0);
        assert!(matches!(
            balanced_batches(&ds, 4, &mut rng::stream(1, &[])),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn epoch_draws_are_roughly_balanced() {
        let ds = dataset(10, 90);
        let mut r = rng::stream(11, &[]);
        let batches = balanced_batches(&ds, 10, &mut r).unwrap();
        let (mut bs, mut ma) = (0, 0);
        for b in &batches {
            for &i in b {
                match ds[i].label {
                    Label::BonaFide => bs += 1,
                    Label::Morph => ma += 1,
                }
            }
        }
        assert_eq!(bs, ma);
    }

    #[test]
    fn augment_identity_when_disabled() {
        let img = Tensor::new(vec![1, 8, 8], (0..64).map(|i| i as f64 / 64.0).collect()).unwrap();
        let out = augment(&img, &AugmentFlags::NONE, &mut rng::stream(3, &[])).unwrap();
        assert!(out.bits_eq(&img));
    }

    #[test]
    fn flip_is_involution_and_shape_preserved() {
        let img: Vec<f64> = (0..64).map(|i| i as f64 / 64.0).collect();
        let once = flip_horizontal(&img, 1, 8);
        let twice = flip_horizontal(&once, 1, 8);
        assert_eq!(twice, img);

        let t = Tensor::new(vec![1, 8, 8], img).unwrap();
        let out = augment(&t, &AugmentFlags::default(), &mut rng::stream(4, &[])).unwrap();
        assert_eq!(out.shape(), t.shape());
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn adam_zero_grad_keeps_params() {
        let mut p = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let g = Tensor::zeros(vec![2]);
        let mut st = AdamState::new(&[&p]);
        let hp = AdamParams {
            weight_decay: 0.0,
            ..AdamParams::default()
        };
        adam_step(&mut [&mut p], &[g], &mut st, &hp).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_is_learning_rate() {
        // bias correction makes the first step ≈ lr for unit gradient
        let mut p = Tensor::scalar(0.0);
        let g = Tensor::scalar(1.0);
        let mut st = AdamState::new(&[&p]);
        let hp = AdamParams {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..AdamParams::default()
        };
        adam_step(&mut [&mut p], &[g], &mut st, &hp).unwrap();
        assert!((p.item().unwrap() + 0.1).abs() < 1e-8);
    }

    #[test]
    fn adam_shape_mismatch_is_contract_error() {
        let mut p = Tensor::zeros(vec![2]);
        let g = Tensor::zeros(vec![3]);
        let mut st = AdamState::new(&[&p]);
        assert!(adam_step(&mut [&mut p], &[g], &mut st, &AdamParams::default()).is_err());
    }

    fn tiny_model(mode: DetectorMode, seed: u64) -> Detector {
        let vit = ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            embed_dim: 8,
            num_heads: 2,
            num_layers: 1,
            mlp_ratio: 2.0,
            pooling: Pooling::ClsToken,
        };
        let lora = LoraConfig {
            rank: 2,
            alpha: 4.0,
            dropout: 0.2,
            ..LoraConfig::default()
        };
        Detector::build(vit, lora, mode, seed).unwrap()
    }

    #[test]
    fn one_epoch_trace_is_finite() {
        let mut m = tiny_model(DetectorMode::Differential, 21);
        let ds = dataset(2, 2);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let report = train(&mut m, &ds, &cfg, &FocalLossConfig::default()).unwrap();
        assert_eq!(report.epoch_losses.len(), 1);
        assert!(report.epoch_losses[0].is_finite());
    }

    #[test]
    fn training_is_seed_deterministic_and_freezes_backbone() {
        let ds = dataset(4, 4);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            seed: 77,
            ..TrainConfig::default()
        };

        let mut m1 = tiny_model(DetectorMode::Differential, 22);
        let backbone_before = m1.backbone.patch_w.clone();
        let r1 = train(&mut m1, &ds, &cfg, &FocalLossConfig::default()).unwrap();

        let mut m2 = tiny_model(DetectorMode::Differential, 22);
        let r2 = train(&mut m2, &ds, &cfg, &FocalLossConfig::default()).unwrap();

        assert_eq!(r1.epoch_losses, r2.epoch_losses);
        for (a, b) in m1.trainable_tensors().iter().zip(m2.trainable_tensors().iter()) {
            assert!(a.bits_eq(b));
        }
        assert!(m1.backbone.patch_w.bits_eq(&backbone_before));
    }

    #[test]
    fn branches_receive_distinct_gradients_on_asymmetric_batches() {
        let mut m = tiny_model(DetectorMode::Differential, 23);
        let ds = dataset(3, 3);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        train(&mut m, &ds, &cfg, &FocalLossConfig::default()).unwrap();
        let m_b = &m.branch_m.layers[0].q.as_ref().unwrap().b;
        let l_b = &m.branch_l.layers[0].q.as_ref().unwrap().b;
        assert!(!m_b.bits_eq(l_b));
    }
}
