//! Synthetic conversation mixtures: tone-sequence "utterances" gated by
//! binary activity and summed with optional white noise,
//! `X = Σ_c Y^c ⊙ S^c + N`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use ume_tensor::rng::{seeded, UmeRng};

use crate::error::{invalid, Result, UmeError};

/// Half-open sample range `[start, end)`; serialized as `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of samples shared with `[lo, hi)`.
    pub fn overlap(&self, lo: usize, hi: usize) -> usize {
        self.end.min(hi).saturating_sub(self.start.max(lo))
    }
}

impl From<[usize; 2]> for Span {
    fn from([start, end]: [usize; 2]) -> Self {
        Self { start, end }
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

/// Sample-level activity sequence of length `len` from spans.
pub fn activity_mask(spans: &[Span], len: usize) -> Vec<f64> {
    let mut y = vec![0.0; len];
    for s in spans {
        y[s.start.min(len)..s.end.min(len)].fill(1.0);
    }
    y
}

/// Rejects spans outside `[0, len)`, empty spans, and overlapping spans of
/// one speaker.
pub fn validate_spans(spans: &[Span], len: usize) -> std::result::Result<(), String> {
    let mut sorted = spans.to_vec();
    sorted.sort();
    for s in &sorted {
        if s.start >= s.end || s.end > len {
            return Err(format!("span [{}, {}] outside [0, {len})", s.start, s.end));
        }
    }
    for w in sorted.windows(2) {
        if w[1].start < w[0].end {
            return Err(format!(
                "overlapping spans [{}, {}] and [{}, {}]",
                w[0].start, w[0].end, w[1].start, w[1].end
            ));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum OverlapMode {
    Full,
    Partial { min_overlap_seconds: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum NoiseMode {
    MixClean,
    MixBoth { snr_db: [f64; 2] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub num_items: usize,
    pub speakers: usize,
    pub sample_rate: u32,
    pub token_duration: f64,
    /// Inclusive range of tokens per utterance.
    pub tokens_per_utterance: [usize; 2],
    pub vocab_size: usize,
    pub overlap: OverlapMode,
    pub noise: NoiseMode,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_items: 100,
            speakers: 2,
            sample_rate: 2000,
            token_duration: 0.1,
            tokens_per_utterance: [5, 10],
            vocab_size: 5,
            overlap: OverlapMode::Full,
            noise: NoiseMode::MixClean,
            seed: 0,
        }
    }
}

pub fn token_frequency(token: usize) -> f64 {
    150.0 + 60.0 * token as f64
}

impl DatasetConfig {
    /// Checks every field; errors carry the JSON path below `prefix`.
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let p = |f: &str| format!("{prefix}.{f}");
        if !(2..=3).contains(&self.speakers) {
            return Err(UmeError::config(
                p("speakers"),
                format!("must be 2 or 3, got {}", self.speakers),
            ));
        }
        if self.sample_rate == 0 {
            return Err(UmeError::config(p("sample_rate"), "must be positive"));
        }
        if !(self.token_duration > 0.0) {
            return Err(UmeError::config(p("token_duration"), "must be positive"));
        }
        let unit = (self.token_duration * self.sample_rate as f64).round() as usize;
        if unit < 2 * fade_len(self.sample_rate) {
            return Err(UmeError::config(
                p("token_duration"),
                "shorter than the two 5 ms edge fades",
            ));
        }
        let [lo, hi] = self.tokens_per_utterance;
        if lo == 0 || lo > hi {
            return Err(UmeError::config(
                p("tokens_per_utterance"),
                format!("invalid range [{lo}, {hi}]"),
            ));
        }
        if self.vocab_size == 0 {
            return Err(UmeError::config(p("vocab_size"), "must be positive"));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if 2.0 * token_frequency(self.vocab_size) >= nyquist {
            return Err(UmeError::config(
                p("vocab_size"),
                format!(
                    "token {} has second harmonic {} Hz at or above Nyquist {nyquist} Hz",
                    self.vocab_size,
                    2.0 * token_frequency(self.vocab_size)
                ),
            ));
        }
        if let OverlapMode::Partial { min_overlap_seconds } = self.overlap {
            let shortest = lo as f64 * self.token_duration;
            if !(min_overlap_seconds >= 0.0 && min_overlap_seconds < shortest) {
                return Err(UmeError::config(
                    p("overlap.min_overlap_seconds"),
                    format!("must be in [0, {shortest}) (shortest utterance), got {min_overlap_seconds}"),
                ));
            }
        }
        if let NoiseMode::MixBoth { snr_db: [a, b] } = self.noise {
            if !(a.is_finite() && b.is_finite() && a <= b) {
                return Err(UmeError::config(p("noise.snr_db"), format!("invalid range [{a}, {b}]")));
            }
        }
        Ok(())
    }

    pub fn unit_samples(&self) -> usize {
        (self.token_duration * self.sample_rate as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceSpec {
    /// 0-based speaker index.
    pub speaker: usize,
    pub tokens: Vec<usize>,
    pub base_gain: f64,
    /// Second-harmonic amplitude ratio in [0, 0.9].
    pub timbre: f64,
    pub tremolo_rate: f64,
    pub onset: usize,
}

fn fade_len(sample_rate: u32) -> usize {
    (0.005 * sample_rate as f64).round() as usize
}

/// Renders one utterance: per-token tone units with 5 ms raised-cosine
/// edges, peak-normalized to 0.7 and then scaled by `base_gain`.
pub fn synth_utterance(
    spec: &UtteranceSpec,
    sample_rate: u32,
    token_duration: f64,
    rng: &mut UmeRng,
) -> Result<Vec<f64>> {
    if spec.tokens.is_empty() {
        return Err(invalid("utterance has no tokens"));
    }
    if !(0.0..=0.9).contains(&spec.timbre) {
        return Err(invalid(format!("timbre {} outside [0, 0.9]", spec.timbre)));
    }
    let sr = sample_rate as f64;
    let nyquist = sr / 2.0;
    let unit = (token_duration * sr).round() as usize;
    let fade = fade_len(sample_rate).min(unit / 2);
    let phase: f64 = rng.gen_range(0.0..2.0 * PI);
    let mut out = Vec::with_capacity(unit * spec.tokens.len());
    for (u, &tok) in spec.tokens.iter().enumerate() {
        if tok == 0 {
            return Err(invalid("token id 0 is reserved for the CTC blank"));
        }
        let f = token_frequency(tok);
        if f >= nyquist || 2.0 * f >= nyquist {
            return Err(invalid(format!(
                "token {tok}: {f} Hz or its harmonic {} Hz is at or above Nyquist {nyquist} Hz",
                2.0 * f
            )));
        }
        for i in 0..unit {
            let t_local = i as f64 / sr;
            let t_global = (u * unit + i) as f64 / sr;
            let arg = 2.0 * PI * f * t_local + phase;
            let tremolo = 1.0 + 0.3 * (2.0 * PI * spec.tremolo_rate * t_global).sin();
            let mut v = arg.sin() * tremolo + spec.timbre * (2.0 * arg).sin();
            let edge = i.min(unit - 1 - i);
            if edge < fade {
                v *= 0.5 * (1.0 - (PI * edge as f64 / fade as f64).cos());
            }
            out.push(v);
        }
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let k = 0.7 / peak * spec.base_gain;
        out.iter_mut().for_each(|v| *v *= k);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSample {
    pub id: String,
    pub sample_rate: u32,
    pub mixture: Vec<f64>,
    /// Per-speaker clean sources, each the mixture's length.
    pub sources: Vec<Vec<f64>>,
    pub activity: Vec<Vec<Span>>,
    pub transcripts: Vec<Vec<usize>>,
    pub noise_snr_db: Option<f64>,
    /// The additive noise term; kept in memory only.
    pub noise: Option<Vec<f64>>,
}

impl MixtureSample {
    pub fn len(&self) -> usize {
        self.mixture.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mixture.is_empty()
    }

    pub fn speakers(&self) -> usize {
        self.sources.len()
    }

    /// `Y^c ⊙ S^c`, the contribution of speaker `c` to the mixture.
    pub fn gated_source(&self, c: usize) -> Vec<f64> {
        let y = activity_mask(&self.activity[c], self.len());
        self.sources[c].iter().zip(y).map(|(s, y)| s * y).collect()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }
}

/// Eq. (1) composition: `X_t = Σ_c Y^c_t·S^c_t + N_t`.
pub fn compose(sources: &[Vec<f64>], activity: &[Vec<Span>], noise: Option<&[f64]>) -> Vec<f64> {
    let len = sources.iter().map(Vec::len).max().unwrap_or(0);
    let mut x = vec![0.0; len];
    for (s, spans) in sources.iter().zip(activity) {
        let y = activity_mask(spans, len);
        for t in 0..s.len() {
            x[t] += y[t] * s[t];
        }
    }
    if let Some(n) = noise {
        x.iter_mut().zip(n).for_each(|(v, n)| *v += n);
    }
    x
}

/// A rendered utterance ready for mixing.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub spec: UtteranceSpec,
    pub wave: Vec<f64>,
}

const PEAK_LIMIT: f64 = 0.95;
const ONSET_ATTEMPTS: usize = 100;

fn choose_onsets(lengths: &[usize], cfg: &DatasetConfig, rng: &mut UmeRng) -> Result<Vec<usize>> {
    match cfg.overlap {
        OverlapMode::Full => Ok(vec![0; lengths.len()]),
        OverlapMode::Partial { min_overlap_seconds } => {
            let need = (min_overlap_seconds * cfg.sample_rate as f64).ceil() as usize;
            let longest = lengths.iter().copied().max().unwrap_or(0);
            let range = longest.saturating_sub(need);
            for _ in 0..ONSET_ATTEMPTS {
                let mut onsets: Vec<usize> = lengths.iter().map(|_| rng.gen_range(0..=range)).collect();
                let first = *onsets.iter().min().expect("at least one speaker");
                onsets.iter_mut().for_each(|o| *o -= first);
                let ok = (0..lengths.len()).all(|a| {
                    (a + 1..lengths.len()).all(|b| {
                        Span::new(onsets[a], onsets[a] + lengths[a]).overlap(onsets[b], onsets[b] + lengths[b]) >= need
                    })
                });
                if ok {
                    return Ok(onsets);
                }
            }
            Err(UmeError::Overlap(ONSET_ATTEMPTS))
        }
    }
}

/// Places one utterance per speaker on a shared timeline and forms the mixture.
pub fn mix(id: &str, mut utterances: Vec<Utterance>, cfg: &DatasetConfig, rng: &mut UmeRng) -> Result<MixtureSample> {
    let lengths: Vec<usize> = utterances.iter().map(|u| u.wave.len()).collect();
    let onsets = choose_onsets(&lengths, cfg, rng)?;
    let len = onsets.iter().zip(&lengths).map(|(o, l)| o + l).max().unwrap_or(0);
    let mut sources = Vec::with_capacity(utterances.len());
    let mut activity = Vec::with_capacity(utterances.len());
    for (u, &onset) in utterances.iter_mut().zip(&onsets) {
        u.spec.onset = onset;
        let mut s = vec![0.0; len];
        s[onset..onset + u.wave.len()].copy_from_slice(&u.wave);
        sources.push(s);
        activity.push(vec![Span::new(onset, onset + u.wave.len())]);
    }

    let (mut noise, snr) = match cfg.noise {
        NoiseMode::MixClean => (None, None),
        NoiseMode::MixBoth { snr_db: [lo, hi] } => {
            let snr = if lo < hi { rng.gen_range(lo..hi) } else { lo };
            let clean = compose(&sources, &activity, None);
            let active: Vec<usize> = (0..len)
                .filter(|&t| activity.iter().any(|sp| sp.iter().any(|s| s.start <= t && t < s.end)))
                .collect();
            let white: Vec<f64> = (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let p_sig = active.iter().map(|&t| clean[t] * clean[t]).sum::<f64>() / active.len().max(1) as f64;
            let p_white = active.iter().map(|&t| white[t] * white[t]).sum::<f64>() / active.len().max(1) as f64;
            let gain = (p_sig / (p_white * 10f64.powf(snr / 10.0))).sqrt();
            (
                Some(white.into_iter().map(|v| v * gain).collect::<Vec<f64>>()),
                Some(snr),
            )
        }
    };

    let mut mixture = compose(&sources, &activity, noise.as_deref());
    let peak = mixture.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > PEAK_LIMIT {
        let k = PEAK_LIMIT / peak;
        sources.iter_mut().flatten().for_each(|v| *v *= k);
        if let Some(n) = noise.as_mut() {
            n.iter_mut().for_each(|v| *v *= k);
        }
        mixture = compose(&sources, &activity, noise.as_deref());
    }

    Ok(MixtureSample {
        id: id.to_string(),
        sample_rate: cfg.sample_rate,
        mixture,
        sources,
        activity,
        transcripts: utterances.into_iter().map(|u| u.spec.tokens).collect(),
        noise_snr_db: snr,
        noise,
    })
}

pub fn item_id(index: usize) -> String {
    format!("mix{index:05}")
}

/// Item `index` of the dataset described by `cfg`; a pure function of both.
pub fn generate_item(cfg: &DatasetConfig, index: usize) -> Result<MixtureSample> {
    let mut rng = seeded(cfg.seed, index as u64);
    let [lo, hi] = cfg.tokens_per_utterance;
    let mut utterances = Vec::with_capacity(cfg.speakers);
    for c in 0..cfg.speakers {
        let n = rng.gen_range(lo..=hi);
        let spec = UtteranceSpec {
            speaker: c,
            tokens: (0..n).map(|_| rng.gen_range(1..=cfg.vocab_size)).collect(),
            base_gain: rng.gen_range(0.5..1.0),
            timbre: rng.gen_range(0.0..0.9),
            tremolo_rate: rng.gen_range(2.0..8.0),
            onset: 0,
        };
        let wave = synth_utterance(&spec, cfg.sample_rate, cfg.token_duration, &mut rng)?;
        utterances.push(Utterance { spec, wave });
    }
    mix(&item_id(index), utterances, cfg, &mut rng)
}

pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Vec<MixtureSample>> {
    cfg.validate("data")?;
    (0..cfg.num_items).map(|i| generate_item(cfg, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(tokens: Vec<usize>, timbre: f64, tremolo: f64) -> UtteranceSpec {
        UtteranceSpec {
            speaker: 0,
            tokens,
            base_gain: 1.0,
            timbre,
            tremolo_rate: tremolo,
            onset: 0,
        }
    }

    /// Magnitude of the DFT of `x` at frequency `f`.
    fn dft_mag(x: &[f64], f: f64, sr: f64) -> f64 {
        let (mut re, mut im) = (0.0, 0.0);
        for (n, v) in x.iter().enumerate() {
            let w = 2.0 * PI * f * n as f64 / sr;
            re += v * w.cos();
            im -= v * w.sin();
        }
        (re * re + im * im).sqrt()
    }

    fn peak_frequency(x: &[f64], sr: f64) -> f64 {
        (100..=1000)
            .map(|f| f as f64)
            .max_by(|a, b| dft_mag(x, *a, sr).total_cmp(&dft_mag(x, *b, sr)))
            .unwrap()
    }

    #[test]
    fn single_token_is_a_210_hz_tone() {
        let w = synth_utterance(&spec(vec![1], 0.0, 0.0), 2000, 0.1, &mut seeded(1, 0)).unwrap();
        assert_eq!(w.len(), 200);
        let peak = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - 0.7).abs() < 1e-12);
        assert_eq!(peak_frequency(&w, 2000.0), 210.0);
        // away from the fades a pure sinusoid obeys x[n+1] + x[n-1] = 2cos(ω)·x[n]
        let c = 2.0 * (2.0 * PI * 210.0 / 2000.0).cos();
        for n in 11..189 {
            assert!((w[n + 1] + w[n - 1] - c * w[n]).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_waveform() {
        let s = spec(vec![3, 1, 4], 0.4, 5.0);
        let a = synth_utterance(&s, 2000, 0.1, &mut seeded(9, 1)).unwrap();
        let b = synth_utterance(&s, 2000, 0.1, &mut seeded(9, 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn two_tokens_have_two_pitches() {
        let w = synth_utterance(&spec(vec![1, 2], 0.3, 4.0), 2000, 0.1, &mut seeded(2, 0)).unwrap();
        let (a, b) = w.split_at(200);
        assert!((peak_frequency(a, 2000.0) - 210.0).abs() <= 10.0);
        assert!((peak_frequency(b, 2000.0) - 270.0).abs() <= 10.0);
    }

    #[test]
    fn harmonic_above_nyquist_is_rejected() {
        let err = synth_utterance(&spec(vec![6], 0.0, 0.0), 2000, 0.1, &mut seeded(0, 0)).unwrap_err();
        assert!(err.to_string().contains("Nyquist"), "{err}");
    }

    #[test]
    fn full_overlap_clean_mixture_is_the_sum() {
        let cfg = DatasetConfig::default();
        let item = generate_item(&cfg, 3).unwrap();
        assert!(item.noise.is_none() && item.noise_snr_db.is_none());
        for t in 0..item.len() {
            let both = item.activity.iter().all(|a| a[0].start <= t && t < a[0].end);
            if both {
                assert_eq!(item.mixture[t], item.sources[0][t] + item.sources[1][t]);
            }
        }
    }

    #[test]
    fn silent_speaker_is_annihilated() {
        let s1: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
        let s2: Vec<f64> = (0..50).map(|i| (i as f64 * 0.7).cos()).collect();
        let x = compose(&[s1.clone(), s2], &[vec![Span::new(0, 50)], vec![]], None);
        assert_eq!(x, s1);
    }

    #[test]
    fn mixboth_hits_the_drawn_snr() {
        let cfg = DatasetConfig {
            noise: NoiseMode::MixBoth { snr_db: [10.0, 10.0] },
            ..Default::default()
        };
        let item = generate_item(&cfg, 0).unwrap();
        assert_eq!(item.noise_snr_db, Some(10.0));
        let clean = compose(&item.sources, &item.activity, None);
        let active: Vec<usize> = (0..item.len())
            .filter(|&t| {
                activity_mask(&item.activity[0], item.len())[t] > 0.0
                    || activity_mask(&item.activity[1], item.len())[t] > 0.0
            })
            .collect();
        let ps: f64 = active.iter().map(|&t| clean[t].powi(2)).sum();
        let pn: f64 = active.iter().map(|&t| (item.mixture[t] - clean[t]).powi(2)).sum();
        let snr = 10.0 * (ps / pn).log10();
        assert!((snr - 10.0).abs() < 0.1, "{snr}");
    }

    #[test]
    fn partial_overlap_meets_minimum() {
        let cfg = DatasetConfig {
            overlap: OverlapMode::Partial {
                min_overlap_seconds: 0.3,
            },
            speakers: 3,
            ..Default::default()
        };
        let need = 600;
        for i in 0..30 {
            let item = generate_item(&cfg, i).unwrap();
            for a in 0..3 {
                for b in a + 1..3 {
                    let (sa, sb) = (item.activity[a][0], item.activity[b][0]);
                    assert!(sa.overlap(sb.start, sb.end) >= need);
                }
            }
        }
    }

    #[test]
    fn config_validation_names_fields() {
        let bad = DatasetConfig {
            speakers: 5,
            ..Default::default()
        };
        let err = bad.validate("data").unwrap_err();
        assert!(err.to_string().contains("data.speakers"), "{err}");
        let bad = DatasetConfig {
            vocab_size: 8,
            ..Default::default()
        };
        assert!(bad
            .validate("data")
            .unwrap_err()
            .to_string()
            .contains("data.vocab_size"));
        let bad = DatasetConfig {
            overlap: OverlapMode::Partial {
                min_overlap_seconds: 0.5,
            },
            ..Default::default()
        };
        assert!(bad.validate("data").is_err());
    }

    #[test]
    fn span_validation() {
        assert!(validate_spans(&[Span::new(0, 10), Span::new(10, 20)], 20).is_ok());
        assert!(validate_spans(&[Span::new(0, 10), Span::new(5, 15)], 20)
            .unwrap_err()
            .contains("overlapping"));
        assert!(validate_spans(&[Span::new(5, 25)], 20).is_err());
    }
}
