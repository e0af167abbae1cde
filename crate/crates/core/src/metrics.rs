//! Morphing-attack detection error metrics: MACER, BSCER, D-EER, BSCER at
//! fixed MACER operating points, and DET curves.
//!
//! Decision convention: `score >= threshold` classifies a pair as a morph
//! (higher score = more morph-like). All rates are percentages. Every
//! metric is a pure rank statistic of the score set: strictly increasing
//! score transforms change thresholds, never rates.
//!
//! Threshold sweeps run over the sorted distinct observed scores plus one
//! sentinel above the maximum (the all-bona-fide endpoint). D-EER picks
//! the sweep point minimizing |MACER − BSCER|, reporting the midpoint and
//! breaking ties toward the lower threshold; no interpolation, so results
//! are exactly reproducible against a counting oracle.

use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    BonaFide,
    Morph,
}

impl Label {
    /// CSV spelling: `bonafide` or `morph`.
    pub fn as_str(&self) -> &'static str {
        match self {
            Label::BonaFide => "bonafide",
            Label::Morph => "morph",
        }
    }

    pub fn parse(s: &str) -> Result<Label> {
        match s {
            "bonafide" => Ok(Label::BonaFide),
            "morph" => Ok(Label::Morph),
            other => Err(Error::Parse {
                path: "<label>".into(),
                detail: format!("unknown label {other:?} (expected bonafide|morph)"),
            }),
        }
    }

    /// Focal-loss target: 0 = bona fide, 1 = morph.
    pub fn gamma(&self) -> f64 {
        match self {
            Label::BonaFide => 0.0,
            Label::Morph => 1.0,
        }
    }
}

/// One scored pair: detector output plus ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub pair_id: String,
    pub label: Label,
    pub score: f64,
    pub tool_tag: String,
}

impl ScoreRecord {
    pub fn new(pair_id: impl Into<String>, label: Label, score: f64, tool_tag: impl Into<String>) -> Result<Self> {
        if !score.is_finite() {
            return Err(Error::non_finite("score record"));
        }
        Ok(ScoreRecord {
            pair_id: pair_id.into(),
            label,
            score,
            tool_tag: tool_tag.into(),
        })
    }
}

/// One DET operating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub macer: f64,
    pub bscer: f64,
    pub threshold: f64,
}

/// BSCER pinned at a MACER budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BscerAtMacer {
    pub macer_target: f64,
    pub bscer: f64,
    pub threshold: f64,
    pub macer_achieved: f64,
    /// False when no threshold met the budget and the strictest achievable
    /// MACER was reported instead.
    pub target_met: bool,
}

/// Everything the evaluation engine reports for one score set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub d_eer: f64,
    pub d_eer_threshold: f64,
    /// At MACER targets 10%, 5%, 1% (in that order).
    pub bscer_at: Vec<BscerAtMacer>,
    pub det_curve: Vec<DetPoint>,
    pub num_bonafide: usize,
    pub num_morph: usize,
    /// Set when every score is identical; the DET curve is degenerate.
    pub flat_scores: bool,
}

/// The standard strict-security MACER operating points, in percent.
pub const MACER_TARGETS: [f64; 3] = [10.0, 5.0, 1.0];

fn split_counts(records: &[ScoreRecord]) -> (usize, usize) {
    let n_morph = records.iter().filter(|r| r.label == Label::Morph).count();
    (records.len() - n_morph, n_morph)
}

fn require_morphs(records: &[ScoreRecord]) -> Result<()> {
    if !records.iter().any(|r| r.label == Label::Morph) {
        return Err(Error::Protocol("no morph records present".into()));
    }
    Ok(())
}

fn require_bonafide(records: &[ScoreRecord]) -> Result<()> {
    if !records.iter().any(|r| r.label == Label::BonaFide) {
        return Err(Error::Protocol("no bona fide records present".into()));
    }
    Ok(())
}

/// Morphing Attack Classification Error Rate: percentage of morphs
/// classified as bona fide at threshold `tau`.
pub fn macer(records: &[ScoreRecord], tau: f64) -> Result<f64> {
    require_morphs(records)?;
    let (mut wrong, mut total) = (0usize, 0usize);
    for r in records.iter().filter(|r| r.label == Label::Morph) {
        total += 1;
        if r.score < tau {
            wrong += 1;
        }
    }
    Ok(100.0 * wrong as f64 / total as f64)
}

/// Bona fide Sample Classification Error Rate: percentage of bona fide
/// samples classified as morphs at threshold `tau`.
pub fn bscer(records: &[ScoreRecord], tau: f64) -> Result<f64> {
    require_bonafide(records)?;
    let (mut wrong, mut total) = (0usize, 0usize);
    for r in records.iter().filter(|r| r.label == Label::BonaFide) {
        total += 1;
        if r.score >= tau {
            wrong += 1;
        }
    }
    Ok(100.0 * wrong as f64 / total as f64)
}

/// Sweep grid: sorted distinct scores plus one sentinel past the maximum.
fn candidate_thresholds(records: &[ScoreRecord]) -> Vec<f64> {
    let mut scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    scores.sort_by(|a, b| a.partial_cmp(b).expect("scores are finite"));
    scores.dedup();
    let sentinel = scores.last().copied().unwrap_or(0.0) + 1.0;
    scores.push(sentinel);
    scores
}

/// Detection Equal Error Rate and its threshold.
pub fn d_eer(records: &[ScoreRecord]) -> Result<(f64, f64)> {
    require_morphs(records)?;
    require_bonafide(records)?;
    let mut best = (f64::INFINITY, 0.0, 0.0); // (gap, rate, tau)
    for tau in candidate_thresholds(records) {
        let m = macer(records, tau)?;
        let b = bscer(records, tau)?;
        let gap = (m - b).abs();
        if gap < best.0 {
            best = (gap, (m + b) / 2.0, tau);
        }
    }
    Ok((best.1, best.2))
}

/// Secondary D-EER estimate that linearly interpolates between the two
/// adjacent sweep points where MACER − BSCER changes sign. The primary
/// [`d_eer`] stays on observed thresholds so it is oracle-checkable.
pub fn d_eer_interpolated(records: &[ScoreRecord]) -> Result<f64> {
    require_morphs(records)?;
    require_bonafide(records)?;
    let mut prev: Option<(f64, f64)> = None; // (macer, bscer)
    for tau in candidate_thresholds(records) {
        let m = macer(records, tau)?;
        let b = bscer(records, tau)?;
        if m >= b {
            // MACER is non-decreasing and BSCER non-increasing in tau, so
            // the first crossing brackets the equal-error operating point
            return Ok(match prev {
                Some((pm, pb)) => {
                    let denom = (m - b) - (pm - pb);
                    if denom == 0.0 {
                        (m + b) / 2.0
                    } else {
                        let t = (0.0 - (pm - pb)) / denom;
                        let eer_m = pm + t * (m - pm);
                        let eer_b = pb + t * (b - pb);
                        (eer_m + eer_b) / 2.0
                    }
                }
                None => (m + b) / 2.0,
            });
        }
        prev = Some((m, b));
    }
    // never crosses: equal error sits at the final (all-bona-fide) point
    let tau = *candidate_thresholds(records).last().expect("non-empty");
    Ok((macer(records, tau)? + bscer(records, tau)?) / 2.0)
}

/// BSCER at the highest threshold whose MACER stays within `target`
/// percent. Falls back (flagged) to the strictest achievable MACER when
/// the budget cannot be met.
pub fn bscer_at_macer(records: &[ScoreRecord], target: f64) -> Result<BscerAtMacer> {
    require_morphs(records)?;
    require_bonafide(records)?;
    let mut feasible: Option<(f64, f64, f64)> = None; // (tau, macer, bscer)
    let mut strictest: Option<(f64, f64, f64)> = None;
    for tau in candidate_thresholds(records) {
        let m = macer(records, tau)?;
        let b = bscer(records, tau)?;
        if m <= target {
            match feasible {
                Some((t, _, _)) if tau <= t => {}
                _ => feasible = Some((tau, m, b)),
            }
        }
        match strictest {
            Some((_, sm, _)) if m >= sm => {}
            _ => strictest = Some((tau, m, b)),
        }
    }
    let (tau, m, b, met) = match (feasible, strictest) {
        (Some((t, m, b)), _) => (t, m, b, true),
        (None, Some((t, m, b))) => (t, m, b, false),
        (None, None) => unreachable!("candidate set is never empty"),
    };
    Ok(BscerAtMacer {
        macer_target: target,
        bscer: b,
        threshold: tau,
        macer_achieved: m,
        target_met: met,
    })
}

/// Empirical step-function DET curve ordered by threshold, deduplicated
/// on (MACER, BSCER). `resolution` caps the point count (first and last
/// points always kept); `None` keeps every distinct operating point.
pub fn det_curve(records: &[ScoreRecord], resolution: Option<usize>) -> Result<Vec<DetPoint>> {
    require_morphs(records)?;
    require_bonafide(records)?;
    let mut points: Vec<DetPoint> = Vec::new();
    for tau in candidate_thresholds(records) {
        let m = macer(records, tau)?;
        let b = bscer(records, tau)?;
        let duplicate = points
            .last()
            .is_some_and(|p| p.macer == m && p.bscer == b);
        if !duplicate {
            points.push(DetPoint {
                macer: m,
                bscer: b,
                threshold: tau,
            });
        }
    }
    if let Some(cap) = resolution {
        if cap >= 2 && points.len() > cap {
            let last = points.len() - 1;
            let mut kept = Vec::with_capacity(cap);
            for i in 0..cap {
                let idx = i * last / (cap - 1);
                kept.push(points[idx]);
            }
            kept.dedup_by(|a, b| a.threshold == b.threshold);
            points = kept;
        }
    }
    Ok(points)
}

/// Full evaluation of a score set.
pub fn evaluate(records: &[ScoreRecord]) -> Result<MetricsReport> {
    let (n_bs, n_ma) = split_counts(records);
    let (eer, tau) = d_eer(records)?;
    let bscer_at = MACER_TARGETS
        .iter()
        .map(|&t| bscer_at_macer(records, t))
        .collect::<Result<Vec<_>>>()?;
    let det = det_curve(records, None)?;
    let first = records[0].score;
    let flat = records.iter().all(|r| r.score == first);
    Ok(MetricsReport {
        d_eer: eer,
        d_eer_threshold: tau,
        bscer_at,
        det_curve: det,
        num_bonafide: n_bs,
        num_morph: n_ma,
        flat_scores: flat,
    })
}

// ── file formats ─────────────────────────────────────────────────────

/// Writes the score CSV (`pair_id,label,score,tool_tag`).
pub fn write_score_csv(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["pair_id", "label", "score", "tool_tag"])
        .map_err(csv_io)?;
    for r in records {
        w.write_record([
            r.pair_id.as_str(),
            r.label.as_str(),
            &r.score.to_string(),
            r.tool_tag.as_str(),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a score CSV, validating labels and the [0,1] score range.
pub fn read_score_csv(path: &Path) -> Result<Vec<ScoreRecord>> {
    let display = path.display().to_string();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        path: display.clone(),
        detail: e.to_string(),
    })?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            path: display.clone(),
            detail: e.to_string(),
        })?
        .clone();
    let expected = ["pair_id", "label", "score", "tool_tag"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Parse {
            path: display,
            detail: format!("expected header {expected:?}, got {headers:?}"),
        });
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            path: display.clone(),
            detail: e.to_string(),
        })?;
        let parse_err = |detail: String| Error::Parse {
            path: display.clone(),
            detail: format!("row {}: {detail}", i + 2),
        };
        let label = Label::parse(&row[1]).map_err(|e| parse_err(e.to_string()))?;
        let score: f64 = row[2]
            .parse()
            .map_err(|e| parse_err(format!("bad score: {e}")))?;
        if !(0.0..=1.0).contains(&score) {
            return Err(parse_err(format!("score {score} outside [0,1]")));
        }
        out.push(ScoreRecord::new(&row[0], label, score, &row[3])?);
    }
    Ok(out)
}

/// Writes the DET CSV (`macer,bscer,threshold`).
pub fn write_det_csv(path: &Path, points: &[DetPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["macer", "bscer", "threshold"]).map_err(csv_io)?;
    for p in points {
        w.write_record([
            p.macer.to_string(),
            p.bscer.to_string(),
            p.threshold.to_string(),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

/// Key-value report text, stable field order.
pub fn render_report(report: &MetricsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "d_eer_percent={}", report.d_eer);
    let _ = writeln!(s, "d_eer_threshold={}", report.d_eer_threshold);
    for b in &report.bscer_at {
        let t = b.macer_target as u32;
        let _ = writeln!(s, "bscer_at_macer_{t}_percent={}", b.bscer);
        let _ = writeln!(s, "bscer_at_macer_{t}_threshold={}", b.threshold);
        let _ = writeln!(s, "bscer_at_macer_{t}_target_met={}", b.target_met);
    }
    let _ = writeln!(s, "num_bonafide={}", report.num_bonafide);
    let _ = writeln!(s, "num_morph={}", report.num_morph);
    let _ = writeln!(s, "flat_scores_warning={}", report.flat_scores);
    s
}

/// Parses a report rendered by [`render_report`] into key-value pairs.
pub fn parse_report(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

pub fn read_to_string(path: &Path) -> Result<String> {
    let mut s = String::new();
    std::fs::File::open(path)?.read_to_string(&mut s)?;
    Ok(s)
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(label: Label, score: f64) -> ScoreRecord {
        ScoreRecord::new(format!("p{score}"), label, score, "t").unwrap()
    }

    #[test]
    fn macer_definition() {
        let rs = vec![rec(Label::Morph, 1.0), rec(Label::Morph, 1.0)];
        assert_eq!(macer(&rs, 0.5).unwrap(), 0.0);
        let rs = vec![rec(Label::Morph, 0.2), rec(Label::Morph, 0.8)];
        assert_eq!(macer(&rs, 0.5).unwrap(), 50.0);
    }

    #[test]
    fn bscer_definition_and_boundary() {
        let rs = vec![rec(Label::BonaFide, 0.0), rec(Label::BonaFide, 0.0)];
        assert_eq!(bscer(&rs, 0.5).unwrap(), 0.0);
        // every score >= 0, so tau = 0 flags all bona fides
        assert_eq!(bscer(&rs, 0.0).unwrap(), 100.0);
    }

    #[test]
    fn missing_class_is_protocol_error() {
        let rs = vec![rec(Label::BonaFide, 0.1)];
        assert!(matches!(macer(&rs, 0.5), Err(Error::Protocol(_))));
        let rs = vec![rec(Label::Morph, 0.9)];
        assert!(matches!(bscer(&rs, 0.5), Err(Error::Protocol(_))));
    }

    #[test]
    fn perfect_separation_gives_zero_eer() {
        let mut rs: Vec<ScoreRecord> = (0..10).map(|i| rec(Label::BonaFide, 0.01 * i as f64)).collect();
        rs.extend((0..10).map(|i| rec(Label::Morph, 0.9 + 0.005 * i as f64)));
        let (eer, tau) = d_eer(&rs).unwrap();
        assert_eq!(eer, 0.0);
        assert!(tau > 0.09 && tau <= 0.9);
        for t in MACER_TARGETS {
            let b = bscer_at_macer(&rs, t).unwrap();
            assert_eq!(b.bscer, 0.0);
            assert!(b.target_met);
        }
    }

    #[test]
    fn two_sample_det_has_extreme_endpoints() {
        let rs = vec![rec(Label::BonaFide, 0.3), rec(Label::Morph, 0.7)];
        let det = det_curve(&rs, None).unwrap();
        assert!(det.iter().any(|p| p.macer == 0.0 && p.bscer == 100.0));
        assert!(det.iter().any(|p| p.macer == 100.0 && p.bscer == 0.0));
    }

    #[test]
    fn det_passes_through_eer_point() {
        let rs: Vec<ScoreRecord> = (0..40)
            .map(|i| {
                let label = if i % 2 == 0 { Label::BonaFide } else { Label::Morph };
                let base = if label == Label::Morph { 0.5 } else { 0.0 };
                rec(label, base + (i as f64) / 100.0)
            })
            .collect();
        let (_, tau) = d_eer(&rs).unwrap();
        let det = det_curve(&rs, None).unwrap();
        assert!(det.iter().any(|p| p.threshold == tau));
    }

    #[test]
    fn bscer_at_macer_monotone_in_target() {
        let rs: Vec<ScoreRecord> = (0..50)
            .map(|i| rec(Label::BonaFide, (i as f64) / 60.0))
            .chain((0..50).map(|i| rec(Label::Morph, 0.2 + (i as f64) / 60.0)))
            .collect();
        let b10 = bscer_at_macer(&rs, 10.0).unwrap().bscer;
        let b5 = bscer_at_macer(&rs, 5.0).unwrap().bscer;
        let b1 = bscer_at_macer(&rs, 1.0).unwrap().bscer;
        assert!(b10 <= b5 && b5 <= b1);
    }

    #[test]
    fn interpolated_eer_tracks_step_eer() {
        let mut rs: Vec<ScoreRecord> = (0..30).map(|i| rec(Label::BonaFide, 0.01 * i as f64)).collect();
        rs.extend((0..30).map(|i| rec(Label::Morph, 0.9 + 0.003 * i as f64)));
        assert_eq!(d_eer_interpolated(&rs).unwrap(), 0.0);

        let mixed: Vec<ScoreRecord> = (0..40)
            .map(|i| {
                let label = if i % 2 == 0 { Label::BonaFide } else { Label::Morph };
                let base = if label == Label::Morph { 0.3 } else { 0.0 };
                rec(label, base + (i as f64) / 60.0)
            })
            .collect();
        let (step, _) = d_eer(&mixed).unwrap();
        let interp = d_eer_interpolated(&mixed).unwrap();
        let granularity = 100.0 / 20.0;
        assert!((step - interp).abs() <= granularity, "step {step} vs interp {interp}");
    }

    #[test]
    fn all_same_scores_report_flat_warning() {
        let rs = vec![
            rec(Label::BonaFide, 0.5),
            rec(Label::Morph, 0.5),
            rec(Label::Morph, 0.5),
        ];
        let rep = evaluate(&rs).unwrap();
        assert!(rep.flat_scores);
        assert_eq!(rep.d_eer, 50.0);
    }

    #[test]
    fn score_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        let rs = vec![rec(Label::BonaFide, 0.125), rec(Label::Morph, 0.875)];
        write_score_csv(&path, &rs).unwrap();
        let back = read_score_csv(&path).unwrap();
        assert_eq!(back, rs);
    }

    #[test]
    fn score_csv_rejects_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "pair_id,label,score,tool_tag\np,morph,1.5,t\n").unwrap();
        assert!(matches!(read_score_csv(&path), Err(Error::Parse { .. })));
    }
}
