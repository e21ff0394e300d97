//! Static MFCC front-end and the AWEF feature archive.
//!
//! Pipeline per frame: per-frame pre-emphasis, Hamming window, power
//! spectrum, triangular mel filterbank, log with a floor, orthonormal DCT-II.
//! Optional per-utterance cepstral mean and variance normalization is applied
//! over the whole utterance afterwards.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{io_err, AweError, Result};

pub const SUPPORTED_SAMPLE_RATES: [u32; 5] = [8000, 16000, 22050, 44100, 48000];

const ARCHIVE_MAGIC: &[u8; 4] = b"AWEF";
const ARCHIVE_VERSION: u32 = 1;
const CMVN_VAR_FLOOR: f64 = 1e-8;

/// Mono audio normalized to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(AweError::InvalidInput("empty waveform".into()));
        }
        if !SUPPORTED_SAMPLE_RATES.contains(&sample_rate) {
            return Err(AweError::UnsupportedSampleRate(sample_rate));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// Reads a 16-bit PCM mono RIFF file.
    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(AweError::InvalidInput(format!(
                "{}: expected mono audio, found {} channels",
                path.display(),
                spec.channels
            )));
        }
        if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
            return Err(AweError::InvalidInput(format!(
                "{}: expected 16-bit PCM",
                path.display()
            )));
        }
        let samples = reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Self::new(samples, spec.sample_rate)
    }

    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
        }
        w.finalize()?;
        Ok(())
    }

    pub fn duration_ms(&self) -> f64 {
        self.samples.len() as f64 * 1000.0 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfccConfig {
    pub window_ms: f64,
    pub shift_ms: f64,
    pub n_mels: usize,
    pub n_ceps: usize,
    pub preemphasis: f64,
    pub log_floor: f64,
    pub cmvn: bool,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            window_ms: 25.0,
            shift_ms: 10.0,
            n_mels: 26,
            n_ceps: 13,
            preemphasis: 0.97,
            log_floor: 1e-10,
            cmvn: true,
        }
    }
}

impl MfccConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AweError::InvalidConfig(m.to_string()));
        if self.n_ceps == 0 || self.n_mels == 0 {
            return bad("n_mels and n_ceps must be positive");
        }
        if self.n_ceps > self.n_mels {
            return bad("n_ceps must not exceed n_mels");
        }
        if !(0.0..1.0).contains(&self.preemphasis) {
            return bad("preemphasis must lie in [0, 1)");
        }
        if !(self.shift_ms > 0.0) || self.window_ms < self.shift_ms {
            return bad("need window_ms >= shift_ms > 0");
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive");
        }
        Ok(())
    }

    fn samples(ms: f64, sample_rate: u32) -> usize {
        (ms * sample_rate as f64 / 1000.0).round() as usize
    }
}

/// `T x D` matrix of per-frame features, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub utterance_id: String,
    pub frame_shift_ms: f32,
    n_frames: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureSequence {
    pub fn new(
        utterance_id: impl Into<String>,
        n_frames: usize,
        dim: usize,
        data: Vec<f32>,
        frame_shift_ms: f32,
    ) -> Result<Self> {
        if n_frames == 0 || dim == 0 {
            return Err(AweError::InvalidInput(
                "feature sequence needs at least one frame and one dimension".into(),
            ));
        }
        if data.len() != n_frames * dim {
            return Err(AweError::DimensionMismatch {
                expected: n_frames * dim,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AweError::InvalidInput("non-finite feature value".into()));
        }
        Ok(Self {
            utterance_id: utterance_id.into(),
            frame_shift_ms,
            n_frames,
            dim,
            data,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    /// Rows `start..end` as a flat slice.
    pub fn frames(&self, start: usize, end: usize) -> &[f32] {
        &self.data[start * self.dim..end * self.dim]
    }
}

/// Triangular filters evaluated at FFT bin centre frequencies.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// Filter edges in Hz, `n_mels + 2` points equally spaced on the mel scale.
    pub edges_hz: Vec<f64>,
    /// Sparse weights per filter: (first bin, weights).
    filters: Vec<(usize, Vec<f64>)>,
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32) -> Self {
        let nyquist = sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges_hz: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
            .collect();
        let n_bins = n_fft / 2 + 1;
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let filters = (0..n_mels)
            .map(|m| {
                let (lo, mid, hi) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
                let mut first = None;
                let mut weights = Vec::new();
                for k in 0..n_bins {
                    let f = k as f64 * bin_hz;
                    let w = if f > lo && f <= mid {
                        (f - lo) / (mid - lo)
                    } else if f > mid && f < hi {
                        (hi - f) / (hi - mid)
                    } else {
                        0.0
                    };
                    if w > 0.0 {
                        first.get_or_insert(k);
                        weights.push(w);
                    } else if first.is_some() {
                        break;
                    }
                }
                (first.unwrap_or(0), weights)
            })
            .collect();
        Self { edges_hz, filters }
    }

    pub fn n_filters(&self) -> usize {
        self.filters.len()
    }

    fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (o, (first, w)) in out.iter_mut().zip(&self.filters) {
            *o = w.iter().zip(&power[*first..]).map(|(a, b)| a * b).sum();
        }
    }
}

/// Reusable MFCC extractor for one sample rate and configuration.
pub struct MfccExtractor {
    cfg: MfccConfig,
    sample_rate: u32,
    window_len: usize,
    shift_len: usize,
    n_fft: usize,
    hamming: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    bank: MelFilterbank,
    dct: Vec<f64>,
}

impl MfccExtractor {
    pub fn new(cfg: &MfccConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate()?;
        if !SUPPORTED_SAMPLE_RATES.contains(&sample_rate) {
            return Err(AweError::UnsupportedSampleRate(sample_rate));
        }
        let window_len = MfccConfig::samples(cfg.window_ms, sample_rate);
        let shift_len = MfccConfig::samples(cfg.shift_ms, sample_rate).max(1);
        let n_fft = window_len.next_power_of_two();
        let hamming = (0..window_len)
            .map(|n| {
                if window_len == 1 {
                    1.0
                } else {
                    0.54 - 0.46
                        * (2.0 * std::f64::consts::PI * n as f64 / (window_len - 1) as f64).cos()
                }
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        let bank = MelFilterbank::new(cfg.n_mels, n_fft, sample_rate);
        let n = cfg.n_mels as f64;
        let mut dct = Vec::with_capacity(cfg.n_ceps * cfg.n_mels);
        for k in 0..cfg.n_ceps {
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            for i in 0..cfg.n_mels {
                dct.push(
                    scale
                        * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2.0 * n)).cos(),
                );
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            sample_rate,
            window_len,
            shift_len,
            n_fft,
            hamming,
            fft,
            bank,
            dct,
        })
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.bank
    }

    pub fn n_frames(&self, n_samples: usize) -> Option<usize> {
        (n_samples >= self.window_len).then(|| 1 + (n_samples - self.window_len) / self.shift_len)
    }

    fn check(&self, wave: &Waveform) -> Result<usize> {
        if wave.sample_rate != self.sample_rate {
            return Err(AweError::InvalidInput(format!(
                "extractor built for {} Hz, waveform is {} Hz",
                self.sample_rate, wave.sample_rate
            )));
        }
        self.n_frames(wave.samples.len())
            .ok_or(AweError::UtteranceTooShort {
                samples: wave.samples.len(),
                window: self.window_len,
            })
    }

    /// Mel filterbank energies before the log, `T x n_mels`.
    pub fn mel_energies(&self, wave: &Waveform) -> Result<Vec<Vec<f64>>> {
        let n_frames = self.check(wave)?;
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; self.n_fft / 2 + 1];
        let a = self.cfg.preemphasis;
        let mut out = Vec::with_capacity(n_frames);
        for t in 0..n_frames {
            let frame = &wave.samples[t * self.shift_len..t * self.shift_len + self.window_len];
            for (n, slot) in buf.iter_mut().enumerate() {
                *slot = if n < self.window_len {
                    let x = frame[n] as f64;
                    let prev = if n == 0 { x } else { frame[n - 1] as f64 };
                    Complex::new((x - a * prev) * self.hamming[n], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            let mut e = vec![0.0; self.bank.n_filters()];
            self.bank.apply(&power, &mut e);
            out.push(e);
        }
        Ok(out)
    }

    pub fn compute(&self, wave: &Waveform, utterance_id: &str) -> Result<FeatureSequence> {
        let energies = self.mel_energies(wave)?;
        let n_frames = energies.len();
        let (n_mels, n_ceps) = (self.cfg.n_mels, self.cfg.n_ceps);
        let mut ceps = vec![0.0f64; n_frames * n_ceps];
        let mut logmel = vec![0.0; n_mels];
        for (t, e) in energies.iter().enumerate() {
            for (l, &v) in logmel.iter_mut().zip(e) {
                *l = v.max(self.cfg.log_floor).ln();
            }
            for k in 0..n_ceps {
                let basis = &self.dct[k * n_mels..(k + 1) * n_mels];
                ceps[t * n_ceps + k] = basis.iter().zip(&logmel).map(|(a, b)| a * b).sum();
            }
        }
        if self.cfg.cmvn {
            cmvn(&mut ceps, n_frames, n_ceps);
        }
        let data = ceps.into_iter().map(|v| v as f32).collect();
        FeatureSequence::new(utterance_id, n_frames, n_ceps, data, self.cfg.shift_ms as f32)
    }
}

fn cmvn(data: &mut [f64], n_frames: usize, dim: usize) {
    for d in 0..dim {
        let mean = (0..n_frames).map(|t| data[t * dim + d]).sum::<f64>() / n_frames as f64;
        let var = (0..n_frames)
            .map(|t| (data[t * dim + d] - mean).powi(2))
            .sum::<f64>()
            / n_frames as f64;
        let inv = 1.0 / var.max(CMVN_VAR_FLOOR).sqrt();
        for t in 0..n_frames {
            data[t * dim + d] = (data[t * dim + d] - mean) * inv;
        }
    }
}

/// One-shot MFCC computation; see [`MfccExtractor`] to reuse plans.
pub fn compute_mfcc(wave: &Waveform, cfg: &MfccConfig) -> Result<FeatureSequence> {
    MfccExtractor::new(cfg, wave.sample_rate)?.compute(wave, "")
}

/// Featurizes every `*.wav` in `dir` (sorted by file name); ids are file stems.
pub fn featurize_dir(dir: impl AsRef<Path>, cfg: &MfccConfig) -> Result<Vec<FeatureSequence>> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
        })
        .collect();
    paths.sort();
    let mut extractors: Vec<(u32, MfccExtractor)> = Vec::new();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let wave = Waveform::read_wav(&p)?;
        let id = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let idx = match extractors.iter().position(|(sr, _)| *sr == wave.sample_rate) {
            Some(i) => i,
            None => {
                extractors.push((wave.sample_rate, MfccExtractor::new(cfg, wave.sample_rate)?));
                extractors.len() - 1
            }
        };
        out.push(extractors[idx].1.compute(&wave, &id)?);
    }
    Ok(out)
}

pub fn encode_feature_archive(feats: &[FeatureSequence]) -> Result<Vec<u8>> {
    let mut seen = HashSet::with_capacity(feats.len());
    for f in feats {
        if !seen.insert(f.utterance_id.as_str()) {
            return Err(AweError::DuplicateId(f.utterance_id.clone()));
        }
    }
    let mut w = ByteWriter::new();
    w.bytes(ARCHIVE_MAGIC);
    w.u32(ARCHIVE_VERSION);
    w.len_u32(feats.len(), "AWEF")?;
    for f in feats {
        w.str(&f.utterance_id, "AWEF")?;
        w.len_u32(f.n_frames, "AWEF")?;
        w.len_u32(f.dim, "AWEF")?;
        w.f32s(&f.data);
    }
    Ok(w.buf)
}

pub fn decode_feature_archive(bytes: &[u8]) -> Result<Vec<FeatureSequence>> {
    let mut r = ByteReader::new(bytes, "AWEF");
    r.magic(ARCHIVE_MAGIC)?;
    r.version(ARCHIVE_VERSION)?;
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let id = r.str()?;
        let t = r.u32()? as usize;
        let d = r.u32()? as usize;
        let len = t
            .checked_mul(d)
            .ok_or_else(|| r.err("frame count overflows"))?;
        let data = r.f32s(len)?;
        // Stored verbatim; bypasses the finiteness check so round-trips stay exact.
        if t == 0 || d == 0 {
            return Err(r.err(format!("entry {id:?} has an empty matrix")));
        }
        out.push(FeatureSequence {
            utterance_id: id,
            frame_shift_ms: 10.0,
            n_frames: t,
            dim: d,
            data,
        });
    }
    r.finish()?;
    Ok(out)
}

/// Writes the AWEF archive. Duplicate utterance ids are rejected.
pub fn write_feature_archive(feats: &[FeatureSequence], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_feature_archive(feats)?;
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_feature_archive(path: impl AsRef<Path>) -> Result<Vec<FeatureSequence>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_feature_archive(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-0.5f32..0.5)).collect()
    }

    fn no_cmvn() -> MfccConfig {
        MfccConfig {
            cmvn: false,
            ..MfccConfig::default()
        }
    }

    #[test]
    fn silence_gives_constant_frames() {
        let wave = Waveform::new(vec![0.0; 16000], 16000).unwrap();
        let f = compute_mfcc(&wave, &no_cmvn()).unwrap();
        assert_eq!(f.n_frames(), 98);
        assert_eq!(f.dim(), 13);
        for t in 1..f.n_frames() {
            assert_eq!(f.row(t), f.row(0));
        }
        // ln(floor) * sqrt(n_mels) on c0, zero elsewhere
        let c0 = (1e-10f64).ln() * 26f64.sqrt();
        assert!((f.row(0)[0] as f64 - c0).abs() < 1e-3);
        assert!(f.row(0)[1..].iter().all(|v| v.abs() < 1e-4));
    }

    #[test]
    fn gain_only_moves_c0() {
        let samples = noise(8000, 1);
        let half: Vec<f32> = samples.iter().map(|v| v * 0.5).collect();
        let a = compute_mfcc(&Waveform::new(samples, 16000).unwrap(), &no_cmvn()).unwrap();
        let b = compute_mfcc(&Waveform::new(half, 16000).unwrap(), &no_cmvn()).unwrap();
        let expected_shift = 26f64.sqrt() * 0.25f64.ln();
        for t in 0..a.n_frames() {
            let (ra, rb) = (a.row(t), b.row(t));
            for k in 1..13 {
                assert!((ra[k] - rb[k]).abs() < 1e-6, "frame {t} coef {k}");
            }
            assert!(((rb[0] - ra[0]) as f64 - expected_shift).abs() < 1e-4);
        }
    }

    #[test]
    fn too_short_and_bad_rate_are_errors() {
        let wave = Waveform::new(vec![0.1; 399], 16000).unwrap();
        assert!(matches!(
            compute_mfcc(&wave, &MfccConfig::default()),
            Err(AweError::UtteranceTooShort { .. })
        ));
        assert!(matches!(
            Waveform::new(vec![0.0; 10], 11025),
            Err(AweError::UnsupportedSampleRate(11025))
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = MfccConfig::default();
        c.n_ceps = 30;
        assert!(c.validate().is_err());
        let mut c = MfccConfig::default();
        c.preemphasis = 1.0;
        assert!(c.validate().is_err());
        let mut c = MfccConfig::default();
        c.window_ms = 5.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn cmvn_normalizes_each_coefficient() {
        let wave = Waveform::new(noise(16000, 3), 16000).unwrap();
        let f = compute_mfcc(&wave, &MfccConfig::default()).unwrap();
        let n = f.n_frames() as f64;
        for d in 0..13 {
            let col: Vec<f64> = (0..f.n_frames()).map(|t| f.row(t)[d] as f64).collect();
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn archive_rejects_duplicates_and_garbage() {
        let f = FeatureSequence::new("a", 1, 2, vec![1.0, 2.0], 10.0).unwrap();
        assert!(matches!(
            encode_feature_archive(&[f.clone(), f.clone()]),
            Err(AweError::DuplicateId(_))
        ));
        let bytes = encode_feature_archive(&[f]).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_feature_archive(&bad).is_err());
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(decode_feature_archive(&bad_version).is_err());
        assert!(decode_feature_archive(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn empty_archive_round_trips() {
        let bytes = encode_feature_archive(&[]).unwrap();
        assert_eq!(bytes.len(), 12);
        assert!(decode_feature_archive(&bytes).unwrap().is_empty());
    }
}
