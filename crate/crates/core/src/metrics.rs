//! Evaluation metrics: frame-level DER with collar and median filtering,
//! SI-SNR and unfiltered SDR, permutation-optimal token error rate, RTTM
//! I/O and the JSON/CSV report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize, Serializer};
use ume_tensor::Tensor;

use crate::error::{invalid, Result, UmeError};
use crate::perm::{best_assignment, check_speakers};
use crate::sep::{si_sdr_db, SI_SDR_EPS};

/// Binary median filter over one track with edge replication.
pub fn median_filter(x: &[bool], width: usize) -> Result<Vec<bool>> {
    if width == 0 || width % 2 == 0 {
        return Err(invalid(format!("median filter width must be odd, got {width}")));
    }
    let half = width / 2;
    let n = x.len();
    Ok((0..n)
        .map(|i| {
            let ones = (0..width)
                .filter(|&k| {
                    let j = (i + k).saturating_sub(half).min(n - 1);
                    x[j]
                })
                .count();
            2 * ones > width
        })
        .collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DerBreakdown {
    pub miss_s: f64,
    pub false_alarm_s: f64,
    pub confusion_s: f64,
    /// Reference speech over all frames, collar regions included.
    pub total_speech_s: f64,
    pub der: f64,
}

impl DerBreakdown {
    fn finish(mut self) -> Self {
        self.der = if self.total_speech_s > 0.0 {
            (self.miss_s + self.false_alarm_s + self.confusion_s) / self.total_speech_s
        } else if self.false_alarm_s > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        self
    }

    /// Sums component durations of several breakdowns and recomputes the rate.
    pub fn combine(items: &[DerBreakdown]) -> DerBreakdown {
        items
            .iter()
            .fold(DerBreakdown::default(), |a, b| DerBreakdown {
                miss_s: a.miss_s + b.miss_s,
                false_alarm_s: a.false_alarm_s + b.false_alarm_s,
                confusion_s: a.confusion_s + b.confusion_s,
                total_speech_s: a.total_speech_s + b.total_speech_s,
                der: 0.0,
            })
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerConfig {
    pub collar_s: f64,
    pub median_frames: usize,
    pub threshold: f64,
    pub frame_s: f64,
}

/// Per-frame error counts `(miss, fa, confusion, n_ref)` of system tracks
/// mapped onto reference tracks by `perm` (`sys[c]` ↔ `ref[perm[c]]`).
fn frame_errors(sys: &[Vec<bool>], reference: &[Vec<bool>], perm: &[usize], f: usize) -> (usize, usize, usize, usize) {
    let n_ref = reference.iter().filter(|r| r[f]).count();
    let n_sys = sys.iter().filter(|s| s[f]).count();
    let correct = perm
        .iter()
        .enumerate()
        .filter(|&(c, &r)| sys[c][f] && reference[r][f])
        .count();
    (
        n_ref.saturating_sub(n_sys),
        n_sys.saturating_sub(n_ref),
        n_ref.min(n_sys) - correct,
        n_ref,
    )
}

/// Frames whose midpoint lies strictly within `collar_s` of a reference
/// segment boundary.
fn collar_mask(reference: &[Vec<bool>], frames: usize, collar_s: f64, frame_s: f64) -> Vec<bool> {
    let mut excluded = vec![false; frames];
    if collar_s <= 0.0 {
        return excluded;
    }
    let mut boundaries = Vec::new();
    for track in reference {
        for f in 0..frames {
            let prev = f > 0 && track[f - 1];
            if track[f] != prev {
                boundaries.push(f);
            }
        }
        if frames > 0 && track[frames - 1] {
            boundaries.push(frames);
        }
    }
    for (f, e) in excluded.iter_mut().enumerate() {
        let mid = (f as f64 + 0.5) * frame_s;
        *e = boundaries.iter().any(|&b| (mid - b as f64 * frame_s).abs() < collar_s);
    }
    excluded
}

fn to_tracks(m: &Tensor) -> Vec<Vec<bool>> {
    (0..m.cols())
        .map(|c| (0..m.rows()).map(|f| m.row(f)[c] > 0.5).collect())
        .collect()
}

/// DER of probabilities `[T, C]` against a binary frame reference `[T, C]`:
/// threshold, median filter, best speaker mapping over all frames, then
/// error accumulation outside the collar. The denominator is the full
/// reference speech so that a wider collar can only lower the rate.
pub fn der(pred_probs: &Tensor, reference: &Tensor, cfg: &DerConfig) -> Result<DerBreakdown> {
    if !(cfg.frame_s > 0.0) {
        return Err(invalid(format!("frame duration must be positive, got {}", cfg.frame_s)));
    }
    if pred_probs.ndim() != 2 || reference.ndim() != 2 || pred_probs.rows() != reference.rows() {
        return Err(invalid(format!(
            "der: prediction {:?} and reference {:?} must share the frame axis",
            pred_probs.shape(),
            reference.shape()
        )));
    }
    let (frames, c) = (pred_probs.rows(), pred_probs.cols());
    if reference.cols() != c {
        return Err(invalid(format!(
            "der: {c} predicted speakers vs {} reference speakers",
            reference.cols()
        )));
    }
    check_speakers(c)?;
    let sys: Vec<Vec<bool>> = (0..c)
        .map(|k| {
            let raw: Vec<bool> = (0..frames).map(|f| pred_probs.row(f)[k] > cfg.threshold).collect();
            median_filter(&raw, cfg.median_frames)
        })
        .collect::<Result<_>>()?;
    let refs = to_tracks(reference);

    let mut cost = vec![vec![0.0; c]; c];
    // a mapping's total error decomposes into per-pair disagreement counts
    // plus a mapping-independent term, so pairwise costs select it exactly
    for (o, row) in cost.iter_mut().enumerate() {
        for (r, v) in row.iter_mut().enumerate() {
            *v = -((0..frames).filter(|&f| sys[o][f] && refs[r][f]).count() as f64);
        }
    }
    let (perm, _) = best_assignment(&cost).expect("finite costs");

    let excluded = collar_mask(&refs, frames, cfg.collar_s, cfg.frame_s);
    let mut out = DerBreakdown::default();
    for f in 0..frames {
        let (miss, fa, conf, n_ref) = frame_errors(&sys, &refs, &perm, f);
        out.total_speech_s += n_ref as f64 * cfg.frame_s;
        if excluded[f] {
            continue;
        }
        out.miss_s += miss as f64 * cfg.frame_s;
        out.false_alarm_s += fa as f64 * cfg.frame_s;
        out.confusion_s += conf as f64 * cfg.frame_s;
    }
    Ok(out.finish())
}

/// Scale-invariant SNR in dB (zero-mean projection form shared with the loss).
pub fn si_snr_metric(est: &[f64], reference: &[f64]) -> Result<f64> {
    si_sdr_db(est, reference)
}

/// Unfiltered energy-ratio SDR: `10·log10((‖s‖² + ε) / (‖ŝ − s‖² + ε))`.
pub fn sdr_metric(est: &[f64], reference: &[f64]) -> Result<f64> {
    if est.len() != reference.len() || est.is_empty() {
        return Err(invalid(format!(
            "sdr: lengths {} and {} must match and be non-empty",
            est.len(),
            reference.len()
        )));
    }
    let ss: f64 = reference.iter().map(|v| v * v).sum();
    if ss == 0.0 {
        return Err(invalid("sdr: reference is all zeros"));
    }
    let err: f64 = est.iter().zip(reference).map(|(e, s)| (e - s).powi(2)).sum();
    Ok(10.0 * ((ss + SI_SDR_EPS) / (err + SI_SDR_EPS)).log10())
}

/// True when the estimate reproduces the reference (up to scale for the
/// scale-invariant form) to within the ε guard, i.e. the value sits at its
/// numerical ceiling.
pub fn at_si_ceiling(est: &[f64], reference: &[f64]) -> bool {
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len().max(1) as f64;
    let (me, ms) = (mean(est), mean(reference));
    let s: Vec<f64> = reference.iter().map(|v| v - ms).collect();
    let e: Vec<f64> = est.iter().map(|v| v - me).collect();
    let ss: f64 = s.iter().map(|v| v * v).sum();
    if ss == 0.0 {
        return false;
    }
    let alpha = e.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>() / ss;
    e.iter().zip(&s).map(|(e, s)| (e - alpha * s).powi(2)).sum::<f64>() <= SI_SDR_EPS
}

pub fn at_sdr_ceiling(est: &[f64], reference: &[f64]) -> bool {
    est.iter().zip(reference).map(|(e, s)| (e - s).powi(2)).sum::<f64>() <= SI_SDR_EPS
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// Unit-cost Levenshtein alignment of `hyp` against `reference`.
pub fn edit_counts(reference: &[usize], hyp: &[usize]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    // (total, S, D, I) per cell; ties prefer match/substitution, then deletion
    let mut prev: Vec<(usize, EditCounts)> = (0..=m)
        .map(|j| {
            (
                j,
                EditCounts {
                    insertions: j,
                    ..Default::default()
                },
            )
        })
        .collect();
    for i in 1..=n {
        let mut cur = Vec::with_capacity(m + 1);
        cur.push((
            i,
            EditCounts {
                deletions: i,
                ..Default::default()
            },
        ));
        for j in 1..=m {
            let sub = reference[i - 1] != hyp[j - 1];
            let (dt, mut dc) = prev[j - 1];
            let mut best = (dt + sub as usize, {
                dc.substitutions += sub as usize;
                dc
            });
            let (ut, mut uc) = prev[j];
            if ut + 1 < best.0 {
                uc.deletions += 1;
                best = (ut + 1, uc);
            }
            let (lt, mut lc) = cur[j - 1];
            if lt + 1 < best.0 {
                lc.insertions += 1;
                best = (lt + 1, lc);
            }
            cur.push(best);
        }
        prev = cur;
    }
    prev[m].1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_tokens: usize,
    pub wer: f64,
    /// `assignment[r]` is the hypothesis scored against reference `r`.
    pub assignment: Vec<usize>,
}

/// Token error rate under the reference↔hypothesis bijection with the
/// fewest total edits (lexicographically first on ties).
pub fn wer_optimal_perm(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<WerBreakdown> {
    if hyps.len() != refs.len() {
        return Err(invalid(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    check_speakers(refs.len())?;
    let n: usize = refs.iter().map(Vec::len).sum();
    if n == 0 {
        return Err(invalid("WER undefined: every reference is empty"));
    }
    let counts: Vec<Vec<EditCounts>> = refs
        .iter()
        .map(|r| hyps.iter().map(|h| edit_counts(r, h)).collect())
        .collect();
    let cost: Vec<Vec<f64>> = counts
        .iter()
        .map(|row| row.iter().map(|c| c.total() as f64).collect())
        .collect();
    let (assignment, _) = best_assignment(&cost).expect("finite costs");
    let mut total = EditCounts::default();
    for (r, &h) in assignment.iter().enumerate() {
        let c = counts[r][h];
        total.substitutions += c.substitutions;
        total.deletions += c.deletions;
        total.insertions += c.insertions;
    }
    Ok(WerBreakdown {
        substitutions: total.substitutions,
        deletions: total.deletions,
        insertions: total.insertions,
        reference_tokens: n,
        wer: total.total() as f64 / n as f64,
        assignment,
    })
}

/// One RTTM `SPEAKER` segment.
#[derive(Debug, Clone, PartialEq)]
pub struct RttmSegment {
    pub file: String,
    pub onset_s: f64,
    pub duration_s: f64,
    pub speaker: String,
}

/// Segments from binary tracks `[T, C]`; speaker labels are `spk1..spkC`.
pub fn segments_from_frames(file: &str, tracks: &Tensor, frame_s: f64) -> Vec<RttmSegment> {
    let mut out = Vec::new();
    let frames = tracks.rows();
    for c in 0..tracks.cols() {
        let mut f = 0;
        while f < frames {
            if tracks.row(f)[c] > 0.5 {
                let start = f;
                while f < frames && tracks.row(f)[c] > 0.5 {
                    f += 1;
                }
                out.push(RttmSegment {
                    file: file.to_string(),
                    onset_s: start as f64 * frame_s,
                    duration_s: (f - start) as f64 * frame_s,
                    speaker: format!("spk{}", c + 1),
                });
            } else {
                f += 1;
            }
        }
    }
    out
}

pub fn format_rttm(segments: &[RttmSegment]) -> String {
    let mut s = String::new();
    for seg in segments {
        writeln!(
            s,
            "SPEAKER {} 1 {:.3} {:.3} <NA> <NA> {} <NA> <NA>",
            seg.file, seg.onset_s, seg.duration_s, seg.speaker
        )
        .expect("writing to a String cannot fail");
    }
    s
}

pub fn parse_rttm(text: &str) -> Result<Vec<RttmSegment>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: &str| invalid(format!("rttm line {}: {msg}", i + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() < 8 {
            return Err(bad("expected at least 8 fields"));
        }
        if f[0] != "SPEAKER" {
            continue;
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("bad number `{s}`")));
        let (onset_s, duration_s) = (num(f[3])?, num(f[4])?);
        if onset_s < 0.0 || duration_s < 0.0 {
            return Err(bad("negative onset or duration"));
        }
        out.push(RttmSegment {
            file: f[1].to_string(),
            onset_s,
            duration_s,
            speaker: f[7].to_string(),
        });
    }
    Ok(out)
}

/// Frame reference `[frames, C]` from RTTM segments of one file. Speakers
/// are ordered by label; a frame is active when its midpoint lies inside a
/// segment.
pub fn frames_from_segments(segments: &[RttmSegment], speakers: usize, frames: usize, frame_s: f64) -> Result<Tensor> {
    let mut labels: Vec<&str> = segments.iter().map(|s| s.speaker.as_str()).collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() > speakers {
        return Err(invalid(format!(
            "{} RTTM speakers exceed the {speakers} tracks",
            labels.len()
        )));
    }
    let mut data = vec![0.0; frames * speakers];
    for seg in segments {
        let c = labels.binary_search(&seg.speaker.as_str()).expect("collected above");
        for f in 0..frames {
            let mid = (f as f64 + 0.5) * frame_s;
            if mid >= seg.onset_s && mid < seg.onset_s + seg.duration_s {
                data[f * speakers + c] = 1.0;
            }
        }
    }
    Ok(Tensor::new(vec![frames, speakers], data)?)
}

/// A dB value that serializes as the string `"+inf"` when it sits at the
/// numerical ceiling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Db(pub f64);

impl Serialize for Db {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0 == f64::INFINITY {
            s.serialize_str("+inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Db {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Db(v)),
            Raw::Str(s) if s == "+inf" => Ok(Db(f64::INFINITY)),
            Raw::Str(s) => Err(serde::de::Error::custom(format!(
                "expected a number or \"+inf\", got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationScores {
    /// Per reference speaker, under the SI-SNR-optimal mapping.
    pub si_snr: Vec<Db>,
    /// Improvement over scoring the mixture itself as every estimate.
    pub si_snri: Vec<f64>,
    /// Unfiltered energy-ratio SDR (not BSS-eval).
    pub sdr: Vec<Db>,
    pub assignment: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemReport {
    pub id: String,
    /// DER per collar, keyed by the collar in seconds.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub der: Option<BTreeMap<String, DerBreakdown>>,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    pub separation: Option<SeparationScores>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wer: Option<WerBreakdown>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub der: Option<BTreeMap<String, DerBreakdown>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub si_snri: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub si_snr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sdr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wer: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_item: Vec<ItemReport>,
    pub aggregate: Aggregate,
    /// Caveats on metric definitions.
    pub notes: Vec<String>,
}

pub fn collar_key(collar_s: f64) -> String {
    format!("{collar_s:.2}")
}

/// Ceiling-capped dB values for averaging.
fn finite_mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Scores one item's separation estimates against its gated references.
pub fn score_separation(
    estimates: &[Vec<f64>],
    references: &[Vec<f64>],
    mixture: &[f64],
) -> Result<(SeparationScores, Vec<f64>, Vec<f64>)> {
    let c = references.len();
    if estimates.len() != c {
        return Err(invalid(format!("{} estimates for {c} references", estimates.len())));
    }
    check_speakers(c)?;
    // cost[r][e] = −SI-SNR of estimate e against reference r
    let mut raw = vec![vec![0.0; c]; c];
    for r in 0..c {
        for e in 0..c {
            raw[r][e] = si_snr_metric(&estimates[e], &references[r])?;
        }
    }
    let cost: Vec<Vec<f64>> = raw.iter().map(|row| row.iter().map(|v| -v).collect()).collect();
    let (assignment, _) = best_assignment(&cost).expect("finite costs");
    let mut si_snr = Vec::with_capacity(c);
    let mut si_snri = Vec::with_capacity(c);
    let mut sdr = Vec::with_capacity(c);
    let mut capped_si = Vec::with_capacity(c);
    let mut capped_sdr = Vec::with_capacity(c);
    for (r, &e) in assignment.iter().enumerate() {
        let (est, reference) = (&estimates[e], &references[r]);
        let v = raw[r][e];
        let base = si_snr_metric(mixture, reference)?;
        si_snri.push(v - base);
        capped_si.push(v);
        si_snr.push(Db(if at_si_ceiling(est, reference) {
            f64::INFINITY
        } else {
            v
        }));
        let d = sdr_metric(est, reference)?;
        capped_sdr.push(d);
        sdr.push(Db(if at_sdr_ceiling(est, reference) {
            f64::INFINITY
        } else {
            d
        }));
    }
    Ok((
        SeparationScores {
            si_snr,
            si_snri,
            sdr,
            assignment,
        },
        capped_si,
        capped_sdr,
    ))
}

/// Accumulates per-item results into a report.
#[derive(Default)]
pub struct ReportBuilder {
    items: Vec<ItemReport>,
    der: BTreeMap<String, Vec<DerBreakdown>>,
    si_snri: Vec<f64>,
    si_snr: Vec<f64>,
    sdr: Vec<f64>,
    wer_edits: usize,
    wer_tokens: usize,
    has_wer: bool,
}

impl ReportBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, item: ItemReport, capped_si: &[f64], capped_sdr: &[f64]) {
        if let Some(d) = &item.der {
            for (k, v) in d {
                self.der.entry(k.clone()).or_default().push(*v);
            }
        }
        if let Some(s) = &item.separation {
            self.si_snri.extend_from_slice(&s.si_snri);
            self.si_snr.extend_from_slice(capped_si);
            self.sdr.extend_from_slice(capped_sdr);
        }
        if let Some(w) = &item.wer {
            self.has_wer = true;
            self.wer_edits += w.substitutions + w.deletions + w.insertions;
            self.wer_tokens += w.reference_tokens;
        }
        self.items.push(item);
    }

    pub fn finish(self) -> MetricsReport {
        let der = (!self.der.is_empty()).then(|| {
            self.der
                .iter()
                .map(|(k, v)| (k.clone(), DerBreakdown::combine(v)))
                .collect()
        });
        MetricsReport {
            per_item: self.items,
            aggregate: Aggregate {
                der,
                si_snri: finite_mean(self.si_snri.into_iter()),
                si_snr: finite_mean(self.si_snr.into_iter()),
                sdr: finite_mean(self.sdr.into_iter()),
                wer: (self.has_wer && self.wer_tokens > 0).then(|| self.wer_edits as f64 / self.wer_tokens as f64),
            },
            notes: vec![
                "sdr is the unfiltered energy ratio 10*log10(|s|^2/|s_hat - s|^2), not BSS-eval".into(),
                "\"+inf\" marks estimates at the epsilon ceiling; aggregates use the capped finite value".into(),
                "der denominators count reference speech on all frames, collar regions included".into(),
            ],
        }
    }
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One CSV row per item with per-speaker values averaged.
    pub fn to_csv(&self) -> Result<String> {
        let mut collars: Vec<String> = self
            .per_item
            .iter()
            .filter_map(|i| i.der.as_ref())
            .flat_map(|d| d.keys().cloned())
            .collect();
        collars.sort();
        collars.dedup();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["id".to_string()];
        header.extend(collars.iter().map(|c| format!("der@{c}")));
        header.extend(["si_snr", "si_snri", "sdr", "wer"].map(String::from));
        w.write_record(&header).map_err(csv_err)?;
        let mean_db = |v: &[Db]| {
            let s: f64 = v.iter().map(|d| d.0).sum();
            fmt_num(s / v.len() as f64)
        };
        for item in &self.per_item {
            let mut row = vec![item.id.clone()];
            for c in &collars {
                row.push(
                    item.der
                        .as_ref()
                        .and_then(|d| d.get(c))
                        .map_or(String::new(), |d| fmt_num(d.der)),
                );
            }
            match &item.separation {
                Some(s) => {
                    row.push(mean_db(&s.si_snr));
                    row.push(fmt_num(s.si_snri.iter().sum::<f64>() / s.si_snri.len() as f64));
                    row.push(mean_db(&s.sdr));
                }
                None => row.extend([String::new(), String::new(), String::new()]),
            }
            row.push(item.wer.as_ref().map_or(String::new(), |w| fmt_num(w.wer)));
            w.write_record(&row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn write(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        std::fs::write(json_path, self.to_json()).map_err(|e| UmeError::io(json_path, e))?;
        std::fs::write(csv_path, self.to_csv()?).map_err(|e| UmeError::io(csv_path, e))?;
        Ok(())
    }
}

fn fmt_num(v: f64) -> String {
    if v == f64::INFINITY {
        "+inf".into()
    } else {
        format!("{v}")
    }
}

fn csv_err(e: csv::Error) -> UmeError {
    invalid(format!("csv: {e}"))
}
