//! Dataset persistence: PCM16 mono WAV files plus a JSON-lines manifest.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, UmeError};
use crate::sim::{validate_spans, MixtureSample, Span};

pub const MANIFEST_NAME: &str = "manifest.jsonl";
const PCM_SCALE: f64 = 32767.0;

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub sample_rate: u32,
    pub mixture: String,
    pub sources: Vec<String>,
    pub activity: Vec<Vec<Span>>,
    pub transcripts: Vec<Vec<usize>>,
    pub noise_snr_db: Option<f64>,
}

pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |e: hound::Error| UmeError::Wav {
        path: path.display().to_string(),
        msg: e.to_string(),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &v in samples {
        let q = (v.clamp(-1.0, 1.0) * PCM_SCALE).round() as i16;
        w.write_sample(q).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}

/// Reads a PCM16 mono WAV; returns samples in [-1, 1] and the sample rate.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let wav_err = |msg: String| UmeError::Wav {
        path: path.display().to_string(),
        msg,
    };
    if !path.exists() {
        return Err(wav_err("file not found".into()));
    }
    let r = hound::WavReader::open(path).map_err(|e| wav_err(e.to_string()))?;
    let spec = r.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(wav_err(format!(
            "expected PCM16 mono, got {} channel(s) at {} bits",
            spec.channels, spec.bits_per_sample
        )));
    }
    let samples = r
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / PCM_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_err(e.to_string()))?;
    Ok((samples, spec.sample_rate))
}

pub fn mixture_file(id: &str) -> String {
    format!("{id}_mix.wav")
}

pub fn source_file(id: &str, c: usize) -> String {
    format!("{id}_s{}.wav", c + 1)
}

/// Writes every item's WAVs into `dir` and the manifest last; returns the
/// manifest path.
pub fn write_dataset(samples: &[MixtureSample], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| UmeError::io(dir, e))?;
    let mut lines = Vec::with_capacity(samples.len());
    for s in samples {
        let mixture = mixture_file(&s.id);
        write_wav(&dir.join(&mixture), &s.mixture, s.sample_rate)?;
        let mut sources = Vec::with_capacity(s.speakers());
        for (c, src) in s.sources.iter().enumerate() {
            let name = source_file(&s.id, c);
            write_wav(&dir.join(&name), src, s.sample_rate)?;
            sources.push(name);
        }
        let entry = ManifestEntry {
            id: s.id.clone(),
            sample_rate: s.sample_rate,
            mixture,
            sources,
            activity: s.activity.clone(),
            transcripts: s.transcripts.clone(),
            noise_snr_db: s.noise_snr_db,
        };
        lines.push(serde_json::to_string(&entry).expect("manifest entries serialize"));
    }
    let path = dir.join(MANIFEST_NAME);
    let tmp = dir.join(format!("{MANIFEST_NAME}.tmp"));
    {
        let f = fs::File::create(&tmp).map_err(|e| UmeError::io(&tmp, e))?;
        let mut w = BufWriter::new(f);
        for l in &lines {
            writeln!(w, "{l}").map_err(|e| UmeError::io(&tmp, e))?;
        }
        w.flush().map_err(|e| UmeError::io(&tmp, e))?;
    }
    fs::rename(&tmp, &path).map_err(|e| UmeError::io(&path, e))?;
    Ok(path)
}

/// Parses and validates a manifest without touching the audio.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = fs::File::open(path).map_err(|e| UmeError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| UmeError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| UmeError::Manifest {
            path: path.display().to_string(),
            line: i + 1,
            msg,
        };
        let e: ManifestEntry = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if e.sources.len() != e.activity.len() || e.sources.len() != e.transcripts.len() {
            return Err(bad(format!(
                "{} sources, {} activity lists and {} transcripts disagree",
                e.sources.len(),
                e.activity.len(),
                e.transcripts.len()
            )));
        }
        out.push(e);
    }
    Ok(out)
}

/// Loads every item of a manifest, checking spans against the audio length.
pub fn read_dataset(path: &Path) -> Result<Vec<MixtureSample>> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let entries = read_manifest(path)?;
    let mut out = Vec::with_capacity(entries.len());
    for (i, e) in entries.into_iter().enumerate() {
        let bad = |msg: String| UmeError::Manifest {
            path: path.display().to_string(),
            line: i + 1,
            msg,
        };
        let load = |name: &str| -> Result<Vec<f64>> {
            let (x, sr) = read_wav(&dir.join(name))?;
            if sr != e.sample_rate {
                return Err(bad(format!(
                    "{name}: sample rate {sr} Hz, manifest says {}",
                    e.sample_rate
                )));
            }
            Ok(x)
        };
        let mixture = load(&e.mixture)?;
        let sources = e.sources.iter().map(|n| load(n)).collect::<Result<Vec<_>>>()?;
        let len = mixture.len();
        if let Some(s) = sources.iter().find(|s| s.len() != len) {
            return Err(bad(format!(
                "source length {} differs from mixture length {len}",
                s.len()
            )));
        }
        for (c, spans) in e.activity.iter().enumerate() {
            validate_spans(spans, len).map_err(|m| bad(format!("speaker {}: {m}", c + 1)))?;
        }
        out.push(MixtureSample {
            id: e.id,
            sample_rate: e.sample_rate,
            mixture,
            sources,
            activity: e.activity,
            transcripts: e.transcripts,
            noise_snr_db: e.noise_snr_db,
            noise: None,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{activity_mask, generate_item, DatasetConfig, NoiseMode};

    fn items() -> Vec<MixtureSample> {
        let cfg = DatasetConfig {
            noise: NoiseMode::MixBoth { snr_db: [5.0, 15.0] },
            ..Default::default()
        };
        (0..3).map(|i| generate_item(&cfg, i).unwrap()).collect()
    }

    #[test]
    fn round_trip_within_one_lsb() {
        let dir = tempfile::tempdir().unwrap();
        let src = items();
        let m = write_dataset(&src, dir.path()).unwrap();
        let back = read_dataset(&m).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in src.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.activity, b.activity);
            assert_eq!(a.transcripts, b.transcripts);
            assert_eq!(a.noise_snr_db, b.noise_snr_db);
            let err = a
                .mixture
                .iter()
                .zip(&b.mixture)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(err <= 1.0 / 32768.0, "{err}");
            for c in 0..a.speakers() {
                assert_eq!(
                    activity_mask(&a.activity[c], a.len()),
                    activity_mask(&b.activity[c], b.len())
                );
            }
        }
        // rewriting the read-back dataset yields the identical manifest
        let dir2 = tempfile::tempdir().unwrap();
        let m2 = write_dataset(&back, dir2.path()).unwrap();
        assert_eq!(fs::read(&m).unwrap(), fs::read(&m2).unwrap());
    }

    #[test]
    fn overlapping_spans_rejected_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(&items(), dir.path()).unwrap();
        let text = fs::read_to_string(&m).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut e: ManifestEntry = serde_json::from_str(&lines[1]).unwrap();
        e.activity[0] = vec![Span::new(0, 100), Span::new(50, 150)];
        lines[1] = serde_json::to_string(&e).unwrap();
        fs::write(&m, lines.join("\n")).unwrap();
        let err = read_dataset(&m).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("overlapping"), "{err}");
    }

    #[test]
    fn malformed_line_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(&items(), dir.path()).unwrap();
        let mut text = fs::read_to_string(&m).unwrap();
        text.push_str("{not json\n");
        fs::write(&m, &text).unwrap();
        let err = read_manifest(&m).unwrap_err().to_string();
        assert!(err.contains("line 4"), "{err}");

        let m = write_dataset(&items(), dir.path()).unwrap();
        fs::remove_file(dir.path().join(source_file("mix00001", 1))).unwrap();
        let err = read_dataset(&m).unwrap_err().to_string();
        assert!(err.contains("not found"), "{err}");
    }

    #[test]
    fn span_past_end_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(&items()[..1], dir.path()).unwrap();
        let mut e: ManifestEntry = serde_json::from_str(fs::read_to_string(&m).unwrap().trim()).unwrap();
        e.activity[1] = vec![Span::new(0, 1_000_000)];
        fs::write(&m, serde_json::to_string(&e).unwrap()).unwrap();
        assert!(read_dataset(&m).unwrap_err().to_string().contains("outside"));
    }
}
