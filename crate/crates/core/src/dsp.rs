//! Time/frequency conversion and multichannel WAV I/O.
//!
//! Analysis uses a periodic Hann window and a one-sided DFT. Synthesis is
//! weighted overlap-add with the same window, normalized by the summed squared
//! window so that `istft(stft(x)) == x` up to round-off.
//!
//! The signal is padded with `frame_len - hop` zeros in front and enough
//! zeros at the tail that every input sample is covered by exactly
//! `frame_len / hop` frames. The padding and the original length are kept in
//! the [`Spectrogram`] so that synthesis returns a clip aligned with the input.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use realfft::RealFftPlanner;
use thiserror::Error;

use crate::linalg::{CVec, C64, MAX_CHANNELS};

/// Canonical sample rate of the pipeline.
pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
/// 64 ms at 16 kHz.
pub const DEFAULT_FRAME_LEN: usize = 1024;
/// 25 % of the frame length.
pub const DEFAULT_HOP: usize = 256;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("audio clip has no samples")]
    EmptyClip,
    #[error("audio clip needs at least one channel")]
    NoChannels,
    #[error("sample rate must be positive")]
    BadSampleRate,
    #[error("non-finite sample at channel {channel}, index {index}")]
    NonFinite { channel: usize, index: usize },
    #[error("invalid framing: frame_len {frame_len}, hop {hop} ({reason})")]
    BadFraming { frame_len: usize, hop: usize, reason: &'static str },
    #[error("spectrogram shape {got:?} is inconsistent with frame_len {frame_len}")]
    BadShape { got: [usize; 3], frame_len: usize },
    #[error("wav: missing or truncated `{chunk}` chunk")]
    MissingChunk { chunk: &'static str },
    #[error("wav: malformed header ({0})")]
    MalformedHeader(&'static str),
    #[error("wav: unsupported encoding (format tag {format_tag}, {bits} bits)")]
    UnsupportedEncoding { format_tag: u16, bits: u16 },
    #[error("wav: io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Multichannel time-domain signal, `channels x samples`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Array2<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Array2<f64>, sample_rate: u32) -> Result<Self, DspError> {
        if samples.nrows() == 0 {
            return Err(DspError::NoChannels);
        }
        if sample_rate == 0 {
            return Err(DspError::BadSampleRate);
        }
        for ((channel, index), v) in samples.indexed_iter() {
            if !v.is_finite() {
                return Err(DspError::NonFinite { channel, index });
            }
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn zeros(channels: usize, len: usize, sample_rate: u32) -> Self {
        Self::new(Array2::zeros((channels, len)), sample_rate).expect("zero clip is valid")
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self, DspError> {
        let n = samples.len();
        Self::new(Array2::from_shape_vec((1, n), samples).expect("shape"), sample_rate)
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    pub fn into_samples(self) -> Array2<f64> {
        self.samples
    }

    pub fn channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channel(&self, m: usize) -> Vec<f64> {
        self.samples.row(m).to_vec()
    }

    /// Mean power over all channels and samples.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|x| x * x).sum::<f64>() / self.samples.len() as f64
    }

    pub fn scaled(&self, gain: f64) -> AudioClip {
        AudioClip { samples: &self.samples * gain, sample_rate: self.sample_rate }
    }
}

/// Complex STFT tensor, `channels x bins x frames`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    coeffs: Array3<C64>,
    frame_len: usize,
    hop: usize,
    sample_rate: u32,
    offset: usize,
    signal_len: Option<usize>,
}

impl Spectrogram {
    /// Wraps raw coefficients. `offset` is the count of leading padding
    /// samples to drop on synthesis; `signal_len` truncates the output.
    pub fn from_parts(
        coeffs: Array3<C64>,
        frame_len: usize,
        hop: usize,
        sample_rate: u32,
        offset: usize,
        signal_len: Option<usize>,
    ) -> Result<Self, DspError> {
        check_framing(frame_len, hop)?;
        let (m, f, _t) = coeffs.dim();
        if m == 0 || f != frame_len / 2 + 1 {
            return Err(DspError::BadShape { got: shape3(&coeffs), frame_len });
        }
        if coeffs.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(DspError::NonFinite { channel: 0, index: 0 });
        }
        Ok(Self { coeffs, frame_len, hop, sample_rate, offset, signal_len })
    }

    /// Same framing metadata, new coefficients.
    pub fn with_coeffs(&self, coeffs: Array3<C64>) -> Result<Self, DspError> {
        Self::from_parts(coeffs, self.frame_len, self.hop, self.sample_rate, self.offset, self.signal_len)
    }

    pub fn coeffs(&self) -> &Array3<C64> {
        &self.coeffs
    }

    pub fn channels(&self) -> usize {
        self.coeffs.dim().0
    }

    pub fn bins(&self) -> usize {
        self.coeffs.dim().1
    }

    pub fn frames(&self) -> usize {
        self.coeffs.dim().2
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn signal_len(&self) -> Option<usize> {
        self.signal_len
    }

    /// `|X_{m,f,t}|^2` of one channel as a `frames x bins` matrix.
    pub fn power_frames(&self, channel: usize) -> Array2<f64> {
        let (_, f, t) = self.coeffs.dim();
        Array2::from_shape_fn((t, f), |(ti, fi)| self.coeffs[(channel, fi, ti)].norm_sqr())
    }

    /// Channel vectors `X_ft`, bin-major: entry `f * frames + t`.
    ///
    /// Panics if the spectrogram has more than [`MAX_CHANNELS`] channels.
    pub fn bin_vectors(&self) -> Vec<CVec> {
        let (m, f, t) = self.coeffs.dim();
        assert!(m <= MAX_CHANNELS, "at most {MAX_CHANNELS} channels supported");
        let mut out = Vec::with_capacity(f * t);
        for fi in 0..f {
            for ti in 0..t {
                out.push(CVec::from_fn(m, |c| self.coeffs[(c, fi, ti)]));
            }
        }
        out
    }

    /// Center frequency of bin `f` in Hz.
    pub fn bin_hz(&self, f: usize) -> f64 {
        f as f64 * self.sample_rate as f64 / self.frame_len as f64
    }
}

fn shape3(a: &Array3<C64>) -> [usize; 3] {
    let (m, f, t) = a.dim();
    [m, f, t]
}

fn check_framing(frame_len: usize, hop: usize) -> Result<(), DspError> {
    let bad = |reason| Err(DspError::BadFraming { frame_len, hop, reason });
    if hop == 0 || frame_len == 0 {
        return bad("zero length");
    }
    if hop > frame_len {
        return bad("hop exceeds frame length");
    }
    if frame_len % 2 != 0 {
        return bad("frame length must be even");
    }
    if frame_len % hop != 0 {
        return bad("frame length must be a multiple of hop");
    }
    Ok(())
}

/// Periodic Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Number of frames produced by [`stft`] for a signal of `len` samples.
pub fn frame_count(len: usize, frame_len: usize, hop: usize) -> usize {
    let offset = frame_len - hop;
    (offset + len - 1) / hop + 1
}

/// Hann-windowed one-sided STFT of every channel.
pub fn stft(clip: &AudioClip, frame_len: usize, hop: usize) -> Result<Spectrogram, DspError> {
    check_framing(frame_len, hop)?;
    if clip.is_empty() {
        return Err(DspError::EmptyClip);
    }
    let len = clip.len();
    let offset = frame_len - hop;
    let frames = frame_count(len, frame_len, hop);
    let bins = frame_len / 2 + 1;
    let window = hann(frame_len);
    let mut planner = RealFftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(frame_len);
    let mut input = fft.make_input_vec();
    let mut output = fft.make_output_vec();
    let mut scratch = fft.make_scratch_vec();
    let mut coeffs = Array3::<C64>::zeros((clip.channels(), bins, frames));
    for (m, row) in clip.samples().rows().into_iter().enumerate() {
        for t in 0..frames {
            let start = t * hop;
            for (i, slot) in input.iter_mut().enumerate() {
                let padded = start + i;
                *slot = if padded >= offset && padded - offset < len {
                    row[padded - offset] * window[i]
                } else {
                    0.0
                };
            }
            fft.process_with_scratch(&mut input, &mut output, &mut scratch)
                .expect("fft buffer sizes are fixed by the plan");
            for (f, c) in output.iter().enumerate() {
                coeffs[(m, f, t)] = *c;
            }
        }
    }
    Ok(Spectrogram {
        coeffs,
        frame_len,
        hop,
        sample_rate: clip.sample_rate(),
        offset,
        signal_len: Some(len),
    })
}

/// Weighted overlap-add synthesis.
pub fn istft(spec: &Spectrogram) -> Result<AudioClip, DspError> {
    let frame_len = spec.frame_len;
    let hop = spec.hop;
    check_framing(frame_len, hop)?;
    let (channels, bins, frames) = spec.coeffs.dim();
    if bins != frame_len / 2 + 1 {
        return Err(DspError::BadShape { got: shape3(&spec.coeffs), frame_len });
    }
    let full_len = if frames == 0 { 0 } else { (frames - 1) * hop + frame_len };
    if spec.offset > full_len {
        return Err(DspError::BadFraming { frame_len, hop, reason: "offset exceeds signal" });
    }
    let window = hann(frame_len);
    let mut norm = vec![0.0; full_len];
    for t in 0..frames {
        for (i, w) in window.iter().enumerate() {
            norm[t * hop + i] += w * w;
        }
    }
    let mut planner = RealFftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(frame_len);
    let mut input = ifft.make_input_vec();
    let mut output = ifft.make_output_vec();
    let mut scratch = ifft.make_scratch_vec();
    let scale = 1.0 / frame_len as f64;
    let mut out = Array2::<f64>::zeros((channels, full_len));
    for m in 0..channels {
        for t in 0..frames {
            for (f, slot) in input.iter_mut().enumerate() {
                *slot = spec.coeffs[(m, f, t)];
            }
            // DC and Nyquist bins of a real signal are real.
            input[0].im = 0.0;
            input[bins - 1].im = 0.0;
            ifft.process_with_scratch(&mut input, &mut output, &mut scratch)
                .expect("fft buffer sizes are fixed by the plan");
            let start = t * hop;
            for (i, v) in output.iter().enumerate() {
                out[(m, start + i)] += v * scale * window[i];
            }
        }
        for (n, w) in norm.iter().enumerate() {
            out[(m, n)] = if *w > 1e-10 { out[(m, n)] / w } else { 0.0 };
        }
    }
    let end = match spec.signal_len {
        Some(len) => (spec.offset + len).min(full_len),
        None => full_len,
    };
    let trimmed = out.slice(ndarray::s![.., spec.offset..end]).to_owned();
    if trimmed.ncols() == 0 {
        return Err(DspError::EmptyClip);
    }
    AudioClip::new(trimmed, spec.sample_rate)
}

/// On-disk sample encoding for [`write_wav`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

/// Reads a RIFF/WAVE file with 16-bit PCM or 32-bit float samples.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip, DspError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    parse_wav(&bytes)
}

/// Parses an in-memory RIFF/WAVE image.
pub fn parse_wav(bytes: &[u8]) -> Result<AudioClip, DspError> {
    if bytes.len() < 12 {
        return Err(DspError::MissingChunk { chunk: "RIFF" });
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(DspError::MalformedHeader("no RIFF tag"));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(DspError::MalformedHeader("no WAVE tag"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        let body_end = body_start.checked_add(size).ok_or(DspError::MalformedHeader("chunk size overflow"))?;
        match id {
            b"fmt " => {
                if body_end > bytes.len() || size < 16 {
                    return Err(DspError::MissingChunk { chunk: "fmt " });
                }
                let b = &bytes[body_start..body_end];
                let mut tag = u16::from_le_bytes([b[0], b[1]]);
                let channels = u16::from_le_bytes([b[2], b[3]]);
                let rate = u32::from_le_bytes([b[4], b[5], b[6], b[7]]);
                let bits = u16::from_le_bytes([b[14], b[15]]);
                if tag == FORMAT_EXTENSIBLE {
                    if size < 40 {
                        return Err(DspError::MalformedHeader("short WAVE_FORMAT_EXTENSIBLE"));
                    }
                    tag = u16::from_le_bytes([b[24], b[25]]);
                }
                if channels == 0 {
                    return Err(DspError::MalformedHeader("zero channels"));
                }
                fmt = Some((tag, channels, rate, bits));
            }
            b"data" => {
                let (tag, channels, rate, bits) = fmt.ok_or(DspError::MissingChunk { chunk: "fmt " })?;
                if body_end > bytes.len() {
                    return Err(DspError::MissingChunk { chunk: "data" });
                }
                return decode_samples(&bytes[body_start..body_end], tag, channels, rate, bits);
            }
            _ => {}
        }
        // Chunks are word aligned.
        pos = body_end + (size & 1);
    }
    if fmt.is_none() {
        Err(DspError::MissingChunk { chunk: "fmt " })
    } else {
        Err(DspError::MissingChunk { chunk: "data" })
    }
}

fn decode_samples(data: &[u8], tag: u16, channels: u16, rate: u32, bits: u16) -> Result<AudioClip, DspError> {
    let channels = channels as usize;
    let width = match (tag, bits) {
        (FORMAT_PCM, 16) => 2,
        (FORMAT_FLOAT, 32) => 4,
        _ => return Err(DspError::UnsupportedEncoding { format_tag: tag, bits }),
    };
    let frame = width * channels;
    if data.len() % frame != 0 {
        return Err(DspError::MissingChunk { chunk: "data" });
    }
    let n = data.len() / frame;
    let mut samples = Array2::<f64>::zeros((channels, n));
    for i in 0..n {
        for m in 0..channels {
            let at = i * frame + m * width;
            samples[(m, i)] = if width == 2 {
                i16::from_le_bytes([data[at], data[at + 1]]) as f64 / 32768.0
            } else {
                f32::from_le_bytes(data[at..at + 4].try_into().unwrap()) as f64
            };
        }
    }
    if rate == 0 {
        return Err(DspError::MalformedHeader("zero sample rate"));
    }
    AudioClip::new(samples, rate)
}

/// Writes a clip as interleaved RIFF/WAVE.
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip, encoding: WavEncoding) -> Result<(), DspError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_wav(clip, encoding))?;
    w.flush()?;
    Ok(())
}

/// Serializes a clip to an in-memory RIFF/WAVE image.
pub fn encode_wav(clip: &AudioClip, encoding: WavEncoding) -> Vec<u8> {
    let channels = clip.channels() as u16;
    let (tag, bits) = match encoding {
        WavEncoding::Pcm16 => (FORMAT_PCM, 16u16),
        WavEncoding::Float32 => (FORMAT_FLOAT, 32u16),
    };
    let width = (bits / 8) as usize;
    let data_len = clip.len() * clip.channels() * width;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&channels.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate().to_le_bytes());
    let block_align = channels as u32 * width as u32;
    out.extend_from_slice(&(clip.sample_rate() * block_align).to_le_bytes());
    out.extend_from_slice(&(block_align as u16).to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    let s = clip.samples();
    for i in 0..clip.len() {
        for m in 0..clip.channels() {
            let v = s[(m, i)];
            match encoding {
                WavEncoding::Pcm16 => {
                    let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    out.extend_from_slice(&q.to_le_bytes());
                }
                WavEncoding::Float32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    if data_len % 2 == 1 {
        out.push(0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn noise_clip(channels: usize, len: usize, seed: u64) -> AudioClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array2::from_shape_fn((channels, len), |_| StandardNormal.sample(&mut rng));
        AudioClip::new(data, DEFAULT_SAMPLE_RATE).unwrap()
    }

    #[test]
    fn bin_centered_sinusoid_concentrates_energy() {
        let f0 = 40usize;
        let n = 4096;
        let x: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * f0 as f64 * i as f64 / DEFAULT_FRAME_LEN as f64).cos())
            .collect();
        let spec = stft(&AudioClip::mono(x, DEFAULT_SAMPLE_RATE).unwrap(), DEFAULT_FRAME_LEN, DEFAULT_HOP).unwrap();
        // an interior frame sees the full window
        let t = spec.frames() / 2;
        let peak = spec.coeffs()[(0, f0, t)].norm_sqr();
        for f in 0..spec.bins() {
            if f.abs_diff(f0) > 1 {
                let side = spec.coeffs()[(0, f, t)].norm_sqr();
                assert!(10.0 * (side / peak).log10() < -60.0, "bin {f}");
            }
        }
        let argmax = (0..spec.bins())
            .max_by(|&a, &b| spec.coeffs()[(0, a, t)].norm().total_cmp(&spec.coeffs()[(0, b, t)].norm()))
            .unwrap();
        assert_eq!(argmax, f0);
    }

    #[test]
    fn zero_clip_gives_zero_spectrogram() {
        let spec = stft(&AudioClip::zeros(2, 3000, DEFAULT_SAMPLE_RATE), 1024, 256).unwrap();
        assert!(spec.coeffs().iter().all(|c| c.norm() == 0.0));
        let back = istft(&spec).unwrap();
        assert_eq!(back.len(), 3000);
        assert!(back.samples().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn round_trip_is_identity() {
        let clip = noise_clip(3, 16_000, 1);
        let back = istft(&stft(&clip, 1024, 256).unwrap()).unwrap();
        assert_eq!(back.samples().dim(), clip.samples().dim());
        let err: f64 = (back.samples() - clip.samples()).iter().map(|e| e * e).sum();
        let energy: f64 = clip.samples().iter().map(|e| e * e).sum();
        assert!((err / energy).sqrt() < 1e-6);
        assert!(10.0 * (err / energy).log10() < -80.0);
    }

    #[test]
    fn single_frame_synthesizes_frame_len_samples() {
        let coeffs = Array3::<C64>::zeros((1, 513, 1));
        let spec = Spectrogram::from_parts(coeffs, 1024, 256, DEFAULT_SAMPLE_RATE, 0, None).unwrap();
        assert_eq!(istft(&spec).unwrap().len(), 1024);
    }

    #[test]
    fn framing_errors() {
        let clip = noise_clip(1, 100, 2);
        assert!(matches!(stft(&clip, 256, 512), Err(DspError::BadFraming { .. })));
        assert!(matches!(stft(&clip, 256, 0), Err(DspError::BadFraming { .. })));
        assert!(matches!(stft(&clip, 256, 96), Err(DspError::BadFraming { .. })));
        let empty = AudioClip::zeros(1, 0, DEFAULT_SAMPLE_RATE);
        assert!(matches!(stft(&empty, 256, 64), Err(DspError::EmptyClip)));
        let bad = Array3::<C64>::zeros((1, 10, 2));
        assert!(Spectrogram::from_parts(bad, 256, 64, 16000, 0, None).is_err());
    }

    #[test]
    fn linearity() {
        let x = noise_clip(2, 5000, 3);
        let y = noise_clip(2, 5000, 4);
        let (a, b) = (0.7, -2.5);
        let combo = AudioClip::new(x.samples() * a + y.samples() * b, DEFAULT_SAMPLE_RATE).unwrap();
        let sx = stft(&x, 512, 128).unwrap();
        let sy = stft(&y, 512, 128).unwrap();
        let sc = stft(&combo, 512, 128).unwrap();
        for ((cx, cy), cc) in sx.coeffs().iter().zip(sy.coeffs().iter()).zip(sc.coeffs().iter()) {
            assert!((*cx * a + *cy * b - *cc).norm() < 1e-10);
        }
    }

    #[test]
    fn parseval_per_frame() {
        let clip = noise_clip(1, 4000, 5);
        let n = 512;
        let spec = stft(&clip, n, 128).unwrap();
        let w = hann(n);
        let offset = spec.offset();
        let x = clip.channel(0);
        for t in 0..spec.frames() {
            let mut time_energy = 0.0;
            for i in 0..n {
                let p = t * 128 + i;
                if p >= offset && p - offset < x.len() {
                    time_energy += (x[p - offset] * w[i]).powi(2);
                }
            }
            let c = spec.coeffs();
            let mut freq_energy = c[(0, 0, t)].norm_sqr() + c[(0, n / 2, t)].norm_sqr();
            for f in 1..n / 2 {
                freq_energy += 2.0 * c[(0, f, t)].norm_sqr();
            }
            freq_energy /= n as f64;
            assert!((time_energy - freq_energy).abs() <= 1e-8 * time_energy.max(1e-300));
        }
    }

    #[test]
    fn float_wav_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data = Array2::from_shape_fn((4, 777), |_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            (v * 0.3) as f32 as f64
        });
        let clip = AudioClip::new(data, 16_000).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        write_wav(&path, &clip, WavEncoding::Float32).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back, clip);
    }

    #[test]
    fn pcm16_round_trip_within_one_lsb() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let data = Array2::from_shape_fn((1, 500), |_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            (v * 0.2).clamp(-0.99, 0.99)
        });
        let clip = AudioClip::new(data, 16_000).unwrap();
        let back = parse_wav(&encode_wav(&clip, WavEncoding::Pcm16)).unwrap();
        assert_eq!(back.channels(), 1);
        for (a, b) in clip.samples().iter().zip(back.samples().iter()) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
            assert!((-1.0..1.0).contains(b));
        }
    }

    #[test]
    fn truncated_wav_names_missing_chunk() {
        let clip = AudioClip::zeros(2, 100, 16_000);
        let bytes = encode_wav(&clip, WavEncoding::Pcm16);
        match parse_wav(&bytes[..30]) {
            Err(DspError::MissingChunk { chunk }) => assert_eq!(chunk, "fmt "),
            other => panic!("unexpected {other:?}"),
        }
        match parse_wav(&bytes[..36]) {
            Err(DspError::MissingChunk { chunk }) => assert_eq!(chunk, "data"),
            other => panic!("unexpected {other:?}"),
        }
        match parse_wav(&bytes[..bytes.len() - 10]) {
            Err(DspError::MissingChunk { chunk }) => assert_eq!(chunk, "data"),
            other => panic!("unexpected {other:?}"),
        }
        let msg = parse_wav(&bytes[..36]).unwrap_err().to_string();
        assert!(msg.contains("data"));
    }

    #[test]
    fn unsupported_encoding_is_rejected() {
        let clip = AudioClip::zeros(1, 10, 16_000);
        let mut bytes = encode_wav(&clip, WavEncoding::Pcm16);
        bytes[34] = 24; // bits per sample
        assert!(matches!(parse_wav(&bytes), Err(DspError::UnsupportedEncoding { .. })));
    }
}
