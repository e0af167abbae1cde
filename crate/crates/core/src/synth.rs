//! Procedural generator of desk-scale image pairs with controllable
//! identity structure and morphing artefacts.
//!
//! Identities are smooth low-frequency cosine patterns; captures add
//! seeded per-capture jitter and pixel noise. Morphs blend two identity
//! patterns and then inject either localized ghosting (duplicated shifted
//! edges, `landmark_like`) or only a smooth low-frequency deviation
//! (`diffusion_like`). Everything derives deterministically from the
//! config seed.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::metrics::Label;
use crate::model::PairSample;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtefactModel {
    /// Ghosting: duplicated shifted edges in localized blobs.
    LandmarkLike,
    /// Smooth blending only; artefacts largely suppressed.
    DiffusionLike,
}

impl ArtefactModel {
    pub fn as_str(&self) -> &'static str {
        match self {
            ArtefactModel::LandmarkLike => "landmark_like",
            ArtefactModel::DiffusionLike => "diffusion_like",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "landmark_like" => Ok(ArtefactModel::LandmarkLike),
            "diffusion_like" => Ok(ArtefactModel::DiffusionLike),
            other => Err(Error::Config(format!("unknown artefact model {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub image_size: usize,
    pub num_identities: usize,
    pub captures_per_identity: usize,
    /// Morph blend factor; 0.5 is the equal-contribution convention.
    pub blend_beta: f64,
    pub artefact: ArtefactModel,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 32,
            num_identities: 48,
            captures_per_identity: 6,
            blend_beta: 0.5,
            artefact: ArtefactModel::LandmarkLike,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::Config("image_size must be >= 8".into()));
        }
        if self.captures_per_identity < 2 {
            return Err(Error::Config(
                "captures_per_identity must be >= 2 (bona fide pairs need two captures)".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.blend_beta) {
            return Err(Error::Config(format!(
                "blend_beta {} outside [0,1]",
                self.blend_beta
            )));
        }
        Ok(())
    }
}

// Generator tuning; amplitudes chosen so a plain pixel-MSE classifier
// lands mid-range (detectable but clearly beatable by a trained model).
const PATTERN_COMPONENTS: usize = 6;
const CAPTURE_PHASE_JITTER: f64 = 0.15;
const CAPTURE_AMP_JITTER: f64 = 0.06;
const CAPTURE_BRIGHTNESS_JITTER: f64 = 0.03;
const CAPTURE_PIXEL_NOISE: f64 = 0.015;
const GHOST_AMPLITUDE: f64 = 0.9;
const GHOST_BLOBS: usize = 3;
const SMOOTH_AMPLITUDE: f64 = 0.06;

/// One synthetic subject: a seeded low-frequency pattern basis.
#[derive(Debug, Clone)]
pub struct Identity {
    pub id: usize,
    components: Vec<Component>,
}

#[derive(Debug, Clone, Copy)]
struct Component {
    amp: f64,
    fx: f64,
    fy: f64,
    phase: f64,
}

impl Identity {
    pub fn generate(cfg: &SynthConfig, id: usize) -> Self {
        let mut r = rng::stream(cfg.seed, &[0x1d, id as u64]);
        let components = (0..PATTERN_COMPONENTS)
            .map(|_| {
                let fx = r.gen_range(0..=3) as f64;
                let fy = if fx == 0.0 {
                    r.gen_range(1..=3) as f64
                } else {
                    r.gen_range(0..=3) as f64
                };
                Component {
                    amp: r.gen_range(0.4..1.0) / (1.0 + fx + fy),
                    fx,
                    fy,
                    phase: r.gen_range(0.0..std::f64::consts::TAU),
                }
            })
            .collect();
        Identity { id, components }
    }

    /// The identity's noiseless base pattern in [0,1], 1×H×W.
    pub fn pattern(&self, size: usize) -> Vec<f64> {
        self.render(size, None)
    }

    fn render(&self, size: usize, perturb: Option<&[(f64, f64)]>) -> Vec<f64> {
        let norm: f64 = self.components.iter().map(|c| c.amp.abs()).sum();
        let mut out = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let mut v = 0.0;
                for (i, c) in self.components.iter().enumerate() {
                    let (dphase, damp) = perturb.map_or((0.0, 0.0), |p| p[i]);
                    let arg = std::f64::consts::TAU
                        * (c.fx * x as f64 / size as f64 + c.fy * y as f64 / size as f64)
                        + c.phase
                        + dphase;
                    v += (c.amp + damp) * arg.cos();
                }
                out.push(0.5 + 0.35 * v / norm);
            }
        }
        out
    }
}

fn add_capture_noise(pixels: &mut [f64], r: &mut impl Rng) {
    let brightness: f64 = CAPTURE_BRIGHTNESS_JITTER * r.sample::<f64, _>(StandardNormal);
    for v in pixels.iter_mut() {
        let noise: f64 = CAPTURE_PIXEL_NOISE * r.sample::<f64, _>(StandardNormal);
        *v = (*v + brightness + noise).clamp(0.0, 1.0);
    }
}

fn to_image(size: usize, pixels: Vec<f64>) -> Tensor {
    Tensor::new(vec![1, size, size], pixels).expect("generator output is finite")
}

/// Deterministic capture of an identity: basis pattern with per-capture
/// phase/amplitude jitter, brightness shift and pixel noise. The same
/// (seed, identity, capture index) always yields the same image.
pub fn capture(cfg: &SynthConfig, identity: &Identity, capture_idx: usize) -> Tensor {
    let mut r = rng::stream(cfg.seed, &[0x2c, identity.id as u64, capture_idx as u64]);
    let perturb: Vec<(f64, f64)> = (0..PATTERN_COMPONENTS)
        .map(|_| {
            (
                CAPTURE_PHASE_JITTER * r.sample::<f64, _>(StandardNormal),
                CAPTURE_AMP_JITTER * r.sample::<f64, _>(StandardNormal),
            )
        })
        .collect();
    let mut pixels = identity.render(cfg.image_size, Some(&perturb));
    add_capture_noise(&mut pixels, &mut r);
    to_image(cfg.image_size, pixels)
}

/// Bona fide pair: suspected and live are two different captures of the
/// same identity.
pub fn make_bona_fide_pair(
    cfg: &SynthConfig,
    identity: &Identity,
    rng: &mut impl Rng,
) -> Result<PairSample> {
    if cfg.captures_per_identity < 2 {
        return Err(Error::Generation(format!(
            "identity {} has fewer than 2 captures",
            identity.id
        )));
    }
    let i = rng.gen_range(0..cfg.captures_per_identity);
    let mut j = rng.gen_range(0..cfg.captures_per_identity - 1);
    if j >= i {
        j += 1;
    }
    let suspected = capture(cfg, identity, i);
    let live = capture(cfg, identity, j);
    Ok(PairSample::new(
        format!("bf-{}-{i}-{j}", identity.id),
        suspected,
        live,
        Label::BonaFide,
        "bonafide",
    ))
}

/// Morph pair: suspected blends the two identity patterns (β to identity
/// a, the accomplice) plus the configured artefact signal; live is a
/// genuine capture of identity a.
pub fn make_morph_pair(
    cfg: &SynthConfig,
    id_a: &Identity,
    id_b: &Identity,
    rng: &mut impl Rng,
) -> Result<PairSample> {
    if id_a.id == id_b.id {
        return Err(Error::Contract(format!(
            "morph requires two distinct identities, got {} twice",
            id_a.id
        )));
    }
    let size = cfg.image_size;
    let pa = id_a.pattern(size);
    let pb = id_b.pattern(size);
    let mut pixels: Vec<f64> = pa
        .iter()
        .zip(pb.iter())
        .map(|(a, b)| cfg.blend_beta * a + (1.0 - cfg.blend_beta) * b)
        .collect();

    match cfg.artefact {
        ArtefactModel::LandmarkLike => add_ghosting(&mut pixels, size, rng),
        ArtefactModel::DiffusionLike => add_smooth_deviation(&mut pixels, size, rng),
    }
    add_capture_noise(&mut pixels, rng);
    for v in pixels.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }

    let live_idx = rng.gen_range(0..cfg.captures_per_identity);
    let live = capture(cfg, id_a, live_idx);
    Ok(PairSample::new(
        format!("ma-{}-{}-{}", id_a.id, id_b.id, cfg.artefact.as_str()),
        to_image(size, pixels),
        live,
        Label::Morph,
        cfg.artefact.as_str(),
    ))
}

/// Duplicated shifted edges inside a few smooth blobs: the high-frequency
/// signature of landmark-style morphing.
fn add_ghosting(pixels: &mut [f64], size: usize, rng: &mut impl Rng) {
    let edges = edge_magnitude(pixels, size);
    let dy = rng.gen_range(2..=4) as i64 * if rng.gen::<bool>() { 1 } else { -1 };
    let dx = rng.gen_range(2..=4) as i64 * if rng.gen::<bool>() { 1 } else { -1 };
    let blobs: Vec<(f64, f64, f64)> = (0..GHOST_BLOBS)
        .map(|_| {
            (
                rng.gen_range(0.2..0.8) * size as f64,
                rng.gen_range(0.2..0.8) * size as f64,
                rng.gen_range(0.15..0.3) * size as f64,
            )
        })
        .collect();
    for y in 0..size {
        for x in 0..size {
            let sy = (y as i64 + dy).rem_euclid(size as i64) as usize;
            let sx = (x as i64 + dx).rem_euclid(size as i64) as usize;
            let mask: f64 = blobs
                .iter()
                .map(|&(cy, cx, s)| {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    (-d2 / (2.0 * s * s)).exp()
                })
                .fold(0.0, f64::max);
            // checkerboard sign keeps ghosting high-frequency
            let sign = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
            pixels[y * size + x] += GHOST_AMPLITUDE * mask * sign * edges[sy * size + sx];
        }
    }
}

/// Very low-frequency additive field; visually smooth, spectrally quiet.
fn add_smooth_deviation(pixels: &mut [f64], size: usize, rng: &mut impl Rng) {
    let (fx, fy) = (rng.gen_range(1..=2) as f64, rng.gen_range(1..=2) as f64);
    let (px, py) = (
        rng.gen_range(0.0..std::f64::consts::TAU),
        rng.gen_range(0.0..std::f64::consts::TAU),
    );
    for y in 0..size {
        for x in 0..size {
            let v = (std::f64::consts::TAU * fx * x as f64 / size as f64 + px).cos()
                * (std::f64::consts::TAU * fy * y as f64 / size as f64 + py).cos();
            pixels[y * size + x] += SMOOTH_AMPLITUDE * v;
        }
    }
}

/// Central-difference gradient magnitude.
fn edge_magnitude(pixels: &[f64], size: usize) -> Vec<f64> {
    let mut out = vec![0.0; pixels.len()];
    for y in 1..size - 1 {
        for x in 1..size - 1 {
            let gx = pixels[y * size + x + 1] - pixels[y * size + x - 1];
            let gy = pixels[(y + 1) * size + x] - pixels[(y - 1) * size + x];
            out[y * size + x] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

// ── protocols ────────────────────────────────────────────────────────

/// How identities and artefact tools are split between train and test.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Fraction of identities assigned to the training split.
    pub train_fraction: f64,
    /// Morph tools used in the training split.
    pub train_tools: Vec<ArtefactModel>,
    /// Morph tools used in the test split.
    pub test_tools: Vec<ArtefactModel>,
}

impl SplitSpec {
    pub fn matched(tool: ArtefactModel) -> Self {
        SplitSpec {
            train_fraction: 0.75,
            train_tools: vec![tool],
            test_tools: vec![tool],
        }
    }

    /// Unknown-attack split: train on `train_tools`, test on the held-out
    /// tool.
    pub fn tool_disjoint(train_tools: Vec<ArtefactModel>, held_out: ArtefactModel) -> Self {
        SplitSpec {
            train_fraction: 0.75,
            train_tools,
            test_tools: vec![held_out],
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProtocolSplit {
    pub train: Vec<PairSample>,
    pub test: Vec<PairSample>,
    pub train_identities: Vec<usize>,
    pub test_identities: Vec<usize>,
}

/// Builds an identity-disjoint train/test split. Per identity:
/// `captures/2` bona fide pairs; morph pairs link each identity to its
/// two successors within the same split (so morph and bona fide counts
/// stay balanced), once per configured tool.
pub fn build_protocol(cfg: &SynthConfig, split: &SplitSpec) -> Result<ProtocolSplit> {
    cfg.validate()?;
    if cfg.num_identities < 4 {
        return Err(Error::Protocol(format!(
            "need at least 4 identities, got {}",
            cfg.num_identities
        )));
    }
    if !(0.0 < split.train_fraction && split.train_fraction < 1.0) {
        return Err(Error::Protocol(format!(
            "train_fraction {} outside (0,1)",
            split.train_fraction
        )));
    }
    if split.train_tools.is_empty() || split.test_tools.is_empty() {
        return Err(Error::Protocol("each split needs at least one morph tool".into()));
    }

    let identities: Vec<Identity> = (0..cfg.num_identities)
        .map(|id| Identity::generate(cfg, id))
        .collect();
    let n_train = ((cfg.num_identities as f64) * split.train_fraction).round() as usize;
    let n_train = n_train.clamp(2, cfg.num_identities - 2);
    let (train_ids, test_ids) = identities.split_at(n_train);

    let train = build_split(cfg, train_ids, &split.train_tools, 0x51)?;
    let test = build_split(cfg, test_ids, &split.test_tools, 0x52)?;
    Ok(ProtocolSplit {
        train,
        test,
        train_identities: train_ids.iter().map(|i| i.id).collect(),
        test_identities: test_ids.iter().map(|i| i.id).collect(),
    })
}

fn build_split(
    cfg: &SynthConfig,
    identities: &[Identity],
    tools: &[ArtefactModel],
    tag: u64,
) -> Result<Vec<PairSample>> {
    let mut out = Vec::new();
    let n = identities.len();
    let bona_per_identity = cfg.captures_per_identity / 2;
    for (k, identity) in identities.iter().enumerate() {
        let mut r = rng::stream(cfg.seed, &[tag, 0xbf, identity.id as u64]);
        for _ in 0..bona_per_identity {
            out.push(make_bona_fide_pair(cfg, identity, &mut r)?);
        }
        for (t, tool) in tools.iter().enumerate() {
            let tool_cfg = SynthConfig {
                artefact: *tool,
                ..cfg.clone()
            };
            // successors at offset 1 and 2 keep pair counts balanced
            for offset in 1..=bona_per_identity.min(n - 1) {
                let other = &identities[(k + offset) % n];
                let mut mr = rng::stream(
                    cfg.seed,
                    &[tag, 0x3a, identity.id as u64, other.id as u64, t as u64],
                );
                let mut pair = make_morph_pair(&tool_cfg, identity, other, &mut mr)?;
                pair.pair_id = format!("{}-{}", pair.pair_id, out.len());
                out.push(pair);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SynthConfig {
        SynthConfig {
            num_identities: 8,
            ..SynthConfig::default()
        }
    }

    fn mse(a: &Tensor, b: &Tensor) -> f64 {
        a.data()
            .iter()
            .zip(b.data().iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / a.numel() as f64
    }

    #[test]
    fn captures_are_deterministic_and_clamped() {
        let c = cfg();
        let id = Identity::generate(&c, 3);
        let a = capture(&c, &id, 1);
        let b = capture(&c, &id, 1);
        assert!(a.bits_eq(&b));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let other = capture(&c, &id, 2);
        assert!(!a.bits_eq(&other));
    }

    #[test]
    fn same_identity_closer_than_cross_identity() {
        let c = cfg();
        let mut hits = 0;
        let trials = 200;
        for t in 0..trials {
            let ia = Identity::generate(&c, (t * 2) % 64);
            let ib = Identity::generate(&c, (t * 2 + 1) % 64);
            let a1 = capture(&c, &ia, 0);
            let a2 = capture(&c, &ia, 1);
            let b1 = capture(&c, &ib, 0);
            if mse(&a1, &a2) < mse(&a1, &b1) {
                hits += 1;
            }
        }
        assert!(
            hits as f64 >= 0.9 * trials as f64,
            "same-identity closer in only {hits}/{trials} trials"
        );
    }

    #[test]
    fn bona_fide_pair_contract() {
        let c = cfg();
        let id = Identity::generate(&c, 0);
        let mut r = rng::stream(1, &[]);
        let p = make_bona_fide_pair(&c, &id, &mut r).unwrap();
        assert_eq!(p.label, Label::BonaFide);
        assert_eq!(p.tool_tag, "bonafide");
        assert!(!p.suspected().bits_eq(p.live()));
    }

    #[test]
    fn morph_pair_contract_and_self_morph_rejected() {
        let c = cfg();
        let a = Identity::generate(&c, 0);
        let b = Identity::generate(&c, 1);
        let mut r = rng::stream(2, &[]);
        let p = make_morph_pair(&c, &a, &b, &mut r).unwrap();
        assert_eq!(p.label, Label::Morph);
        assert_eq!(p.tool_tag, "landmark_like");
        assert!(matches!(
            make_morph_pair(&c, &a, &a, &mut r),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn degenerate_blend_is_capture_like() {
        // β = 1 with smooth artefacts off-path: suspected ≈ identity a
        let c = SynthConfig {
            blend_beta: 1.0,
            artefact: ArtefactModel::DiffusionLike,
            ..cfg()
        };
        let a = Identity::generate(&c, 0);
        let b = Identity::generate(&c, 1);
        let mut r = rng::stream(3, &[]);
        let p = make_morph_pair(&c, &a, &b, &mut r).unwrap();
        let cap = capture(&c, &a, 0);
        let to_a = mse(p.suspected(), &cap);
        let to_b = mse(p.suspected(), &capture(&c, &b, 0));
        assert!(to_a < to_b);
    }

    #[test]
    fn landmark_has_more_high_frequency_energy_than_diffusion() {
        let mut wins = 0;
        let trials = 60;
        for t in 0..trials {
            let base = SynthConfig {
                seed: 1000 + t,
                num_identities: 8,
                ..SynthConfig::default()
            };
            let a = Identity::generate(&base, 0);
            let b = Identity::generate(&base, 1);
            let lm_cfg = SynthConfig {
                artefact: ArtefactModel::LandmarkLike,
                ..base.clone()
            };
            let df_cfg = SynthConfig {
                artefact: ArtefactModel::DiffusionLike,
                ..base
            };
            let mut r1 = rng::stream(t, &[1]);
            let mut r2 = rng::stream(t, &[1]);
            let lm = make_morph_pair(&lm_cfg, &a, &b, &mut r1).unwrap();
            let df = make_morph_pair(&df_cfg, &a, &b, &mut r2).unwrap();
            if high_band_energy(lm.suspected()) > high_band_energy(df.suspected()) {
                wins += 1;
            }
        }
        assert!(wins as f64 >= 0.95 * trials as f64, "{wins}/{trials}");
    }

    /// 2-D DFT energy above a radial frequency cut, via separable naive
    /// DFT; independent of the generator internals.
    fn high_band_energy(img: &Tensor) -> f64 {
        let n = img.shape()[1];
        let px = img.data();
        let mut energy = 0.0;
        let cut = n as f64 / 6.0;
        for ky in 0..n {
            for kx in 0..n {
                let fy = ky.min(n - ky) as f64;
                let fx = kx.min(n - kx) as f64;
                if (fx * fx + fy * fy).sqrt() <= cut {
                    continue;
                }
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..n {
                    for x in 0..n {
                        let arg = -std::f64::consts::TAU
                            * ((kx * x) as f64 + (ky * y) as f64)
                            / n as f64;
                        re += px[y * n + x] * arg.cos();
                        im += px[y * n + x] * arg.sin();
                    }
                }
                energy += re * re + im * im;
            }
        }
        energy
    }

    #[test]
    fn protocol_is_identity_disjoint_and_deterministic() {
        let c = cfg();
        let split = SplitSpec::matched(ArtefactModel::LandmarkLike);
        let p1 = build_protocol(&c, &split).unwrap();
        let p2 = build_protocol(&c, &split).unwrap();
        assert!(p1
            .train_identities
            .iter()
            .all(|i| !p1.test_identities.contains(i)));
        assert!(!p1.train.is_empty() && !p1.test.is_empty());
        for (a, b) in p1.train.iter().zip(p2.train.iter()) {
            assert_eq!(a.pair_id, b.pair_id);
            assert!(a.suspected().bits_eq(b.suspected()));
            assert!(a.live().bits_eq(b.live()));
        }
    }

    #[test]
    fn protocol_rejects_too_few_identities() {
        let c = SynthConfig {
            num_identities: 3,
            ..cfg()
        };
        assert!(matches!(
            build_protocol(&c, &SplitSpec::matched(ArtefactModel::LandmarkLike)),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn tool_disjoint_split_separates_tools() {
        let c = cfg();
        let split = SplitSpec::tool_disjoint(
            vec![ArtefactModel::LandmarkLike],
            ArtefactModel::DiffusionLike,
        );
        let p = build_protocol(&c, &split).unwrap();
        for s in &p.train {
            assert_ne!(s.tool_tag, "diffusion_like");
        }
        for s in p.test.iter().filter(|s| s.label == Label::Morph) {
            assert_eq!(s.tool_tag, "diffusion_like");
        }
    }

    #[test]
    fn split_class_counts_match_request() {
        let c = cfg();
        let p = build_protocol(&c, &SplitSpec::matched(ArtefactModel::LandmarkLike)).unwrap();
        let n_train_ids = p.train_identities.len();
        let bona = p.train.iter().filter(|s| s.label == Label::BonaFide).count();
        let morph = p.train.iter().filter(|s| s.label == Label::Morph).count();
        // captures/2 bona fide pairs and the same number of morphs per identity
        assert_eq!(bona, n_train_ids * (c.captures_per_identity / 2));
        assert_eq!(morph, bona);
    }
}
