//! Signal-processing primitives shared by every other module: streaming FIR
//! filters, direct linear convolution, windowed-sinc band-pass design and
//! seeded noise sources.
//!
//! All arithmetic is `f64`. Convolution is direct (no FFT) so that the
//! streaming and batch forms agree sample for sample.
//!
//! Noise comes from ChaCha8 (`rand_chacha`), seeded with `seed_from_u64` and
//! split into independent substreams with `set_stream`. Gaussian samples use
//! the ziggurat transform of `rand_distr::StandardNormal`. Both are portable,
//! so a seed reproduces the same samples on every platform.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Inner product with four independent accumulators.
///
/// Every filter in the crate goes through this kernel, so two code paths that
/// present the same operands in the same order produce bit-identical results.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut rem = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        rem += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + rem
}

/// `y += alpha * x`, elementwise.
#[inline]
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Sliding window over the most recent `len` samples, newest first.
///
/// Backed by a doubled buffer so the window is always one contiguous slice.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayLine {
    buf: Vec<f64>,
    pos: usize,
    len: usize,
}

impl DelayLine {
    pub fn new(len: usize) -> Self {
        let len = len.max(1);
        Self {
            buf: vec![0.0; 2 * len],
            pos: 0,
            len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn push(&mut self, x: f64) {
        self.pos = if self.pos == 0 { self.len - 1 } else { self.pos - 1 };
        self.buf[self.pos] = x;
        self.buf[self.pos + self.len] = x;
    }

    /// `[x(n), x(n-1), ..., x(n-len+1)]`
    #[inline]
    pub fn window(&self) -> &[f64] {
        &self.buf[self.pos..self.pos + self.len]
    }

    pub fn reset(&mut self) {
        self.buf.iter_mut().for_each(|v| *v = 0.0);
        self.pos = 0;
    }
}

/// A finite impulse response filter together with the input history of the
/// one stream it is attached to.
#[derive(Debug, Clone, PartialEq)]
pub struct FirFilter {
    coeffs: Vec<f64>,
    line: DelayLine,
}

impl FirFilter {
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::arg("FIR filter needs at least one coefficient"));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::arg("FIR coefficients must be finite"));
        }
        let line = DelayLine::new(coeffs.len());
        Ok(Self { coeffs, line })
    }

    /// Unit impulse padded with `len - 1` trailing zeros.
    pub fn identity(len: usize) -> Self {
        let mut c = vec![0.0; len.max(1)];
        c[0] = 1.0;
        Self::new(c).expect("identity filter is valid")
    }

    pub fn zeros(len: usize) -> Self {
        Self::new(vec![0.0; len.max(1)]).expect("zero filter is valid")
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    /// Mutable taps for in-place adaptation. The input history is untouched.
    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    /// Swap in new taps of the same length, keeping the input history.
    pub fn set_coeffs(&mut self, coeffs: &[f64]) -> Result<()> {
        if coeffs.len() != self.coeffs.len() {
            return Err(Error::arg(format!(
                "coefficient length {} does not match filter length {}",
                coeffs.len(),
                self.coeffs.len()
            )));
        }
        self.coeffs.copy_from_slice(coeffs);
        Ok(())
    }

    /// Past inputs `[x(n-1), ..., x(n-L+1)]`, length `len() - 1`.
    pub fn state(&self) -> &[f64] {
        &self.line.window()[..self.coeffs.len() - 1]
    }

    /// Input window including the latest sample, newest first.
    pub fn history(&self) -> &[f64] {
        self.line.window()
    }

    pub fn reset(&mut self) {
        self.line.reset();
    }

    #[inline]
    pub fn process_sample(&mut self, x: f64) -> f64 {
        self.line.push(x);
        dot(&self.coeffs, self.line.window())
    }

    pub fn process(&mut self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|&v| self.process_sample(v)).collect()
    }

    pub fn process_signal(&mut self, x: &Signal) -> Signal {
        Signal {
            samples: self.process(&x.samples),
            sample_rate: x.sample_rate,
        }
    }

    /// Copy of the filter with the taps zero-padded (or truncated) to `len`
    /// and fresh state.
    pub fn resized(&self, len: usize) -> Self {
        let mut c = self.coeffs.clone();
        c.resize(len.max(1), 0.0);
        Self::new(c).expect("resized filter is valid")
    }

    /// Text form: `taps=<count>` then one coefficient per line.
    pub fn to_text(&self) -> String {
        coeffs_to_text(&self.coeffs)
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, String> {
        let coeffs = coeffs_from_text(text)?;
        Self::new(coeffs).map_err(|e| e.to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            message,
        })
    }
}

pub fn coeffs_to_text(coeffs: &[f64]) -> String {
    let mut out = String::with_capacity(26 * (coeffs.len() + 1));
    let _ = writeln!(out, "taps={}", coeffs.len());
    for c in coeffs {
        // 17 significant digits round-trip every f64.
        let _ = writeln!(out, "{c:.16e}");
    }
    out
}

pub fn coeffs_from_text(text: &str) -> std::result::Result<Vec<f64>, String> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let header = lines.next().ok_or("empty coefficient file")?;
    let count: usize = header
        .strip_prefix("taps=")
        .ok_or_else(|| format!("expected `taps=<count>` header, found `{header}`"))?
        .parse()
        .map_err(|e| format!("bad tap count: {e}"))?;
    let coeffs = lines
        .map(|l| l.parse::<f64>().map_err(|e| format!("bad coefficient `{l}`: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if coeffs.len() != count {
        return Err(format!("header says {count} taps, found {}", coeffs.len()));
    }
    Ok(coeffs)
}

/// A sampled real signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    pub samples: Vec<f64>,
    pub sample_rate: f64,
}

impl Signal {
    pub fn new(samples: Vec<f64>, sample_rate: f64) -> Result<Self> {
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(Error::arg(format!("sample rate must be positive, got {sample_rate}")));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::arg(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            energy(&self.samples) / self.samples.len() as f64
        }
    }
}

/// Full linear convolution, `len(a) + len(b) - 1` samples.
///
/// Computed by streaming `b` (then zeros) through a filter with taps `a`, so
/// it matches [`FirFilter::process`] exactly on the overlapping prefix.
pub fn convolve(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::arg("convolution operands must be non-empty"));
    }
    let mut f = FirFilter::new(a.to_vec())?;
    let n = a.len() + b.len() - 1;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        out.push(f.process_sample(b.get(i).copied().unwrap_or(0.0)));
    }
    Ok(out)
}

/// `a - b` with the shorter operand zero-padded.
pub fn sub_padded(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| a.get(i).copied().unwrap_or(0.0) - b.get(i).copied().unwrap_or(0.0))
        .collect()
}

fn hamming(n: usize, len: usize) -> f64 {
    if len == 1 {
        return 1.0;
    }
    0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (len - 1) as f64).cos()
}

/// Hamming-windowed sinc lowpass scaled to unit DC gain.
fn lowpass_unit_dc(num_taps: usize, cutoff: f64, fs: f64) -> Vec<f64> {
    let fc = cutoff / fs;
    let alpha = (num_taps - 1) as f64 / 2.0;
    let mut h: Vec<f64> = (0..num_taps)
        .map(|n| {
            let t = n as f64 - alpha;
            let sinc = if t == 0.0 {
                2.0 * fc
            } else {
                (2.0 * std::f64::consts::PI * fc * t).sin() / (std::f64::consts::PI * t)
            };
            sinc * hamming(n, num_taps)
        })
        .collect();
    let dc: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= dc);
    h
}

/// Approximate transition width of the Hamming design, in Hz.
pub fn bandpass_transition_width(num_taps: usize, fs: f64) -> f64 {
    3.3 * fs / num_taps as f64
}

/// Linear-phase band-pass FIR, built as the difference of two unit-DC
/// Hamming-windowed sinc lowpass filters (so the DC gain is exactly zero).
///
/// Passband gain is 0 dB within about 0.1 dB between `f_low + Δ` and
/// `f_high - Δ`, where `Δ = bandpass_transition_width(num_taps, fs)`.
pub fn design_bandpass(num_taps: usize, f_low: f64, f_high: f64, fs: f64) -> Result<FirFilter> {
    validate_band(num_taps, f_low, f_high, fs)?;
    let hi = lowpass_unit_dc(num_taps, f_high, fs);
    let lo = lowpass_unit_dc(num_taps, f_low, fs);
    FirFilter::new(hi.iter().zip(&lo).map(|(h, l)| h - l).collect())
}

fn validate_band(num_taps: usize, f_low: f64, f_high: f64, fs: f64) -> Result<()> {
    if num_taps < 3 {
        return Err(Error::arg(format!("band-pass needs at least 3 taps, got {num_taps}")));
    }
    if !(fs > 0.0) {
        return Err(Error::arg(format!("sample rate must be positive, got {fs}")));
    }
    if !(f_low > 0.0 && f_low < f_high && f_high < fs / 2.0) {
        return Err(Error::arg(format!(
            "band must satisfy 0 < f_low < f_high < fs/2, got {f_low}..{f_high} Hz at fs={fs}"
        )));
    }
    Ok(())
}

/// Deterministic generator for `(seed, stream)`. Distinct streams of the same
/// seed are independent.
pub fn noise_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, std_dev: f64) -> Vec<f64> {
    (0..n)
        .map(|_| std_dev * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Zero-mean white Gaussian noise on stream 0 of `seed`, at normalized rate 1.
pub fn white_noise(seed: u64, n: usize, variance: f64) -> Result<Signal> {
    Signal::new(white_noise_stream(seed, 0, n, variance)?, 1.0)
}

pub fn white_noise_stream(seed: u64, stream: u64, n: usize, variance: f64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::arg("noise length must be at least 1"));
    }
    if !(variance > 0.0 && variance.is_finite()) {
        return Err(Error::arg(format!("noise variance must be positive, got {variance}")));
    }
    let mut rng = noise_rng(seed, stream);
    Ok(gaussian_vec(&mut rng, n, variance.sqrt()))
}

/// Taps used to shape [`bandlimited_noise`].
pub const NOISE_SHAPING_TAPS: usize = 513;

/// White noise passed through a band-pass design and scaled to unit power.
///
/// The filter's start-up transient is discarded, so every returned sample is
/// in steady state.
pub fn bandlimited_noise(seed: u64, n: usize, f_low: f64, f_high: f64, fs: f64) -> Result<Signal> {
    bandlimited_noise_stream(seed, 0, n, f_low, f_high, fs)
}

pub fn bandlimited_noise_stream(
    seed: u64,
    stream: u64,
    n: usize,
    f_low: f64,
    f_high: f64,
    fs: f64,
) -> Result<Signal> {
    let mut shaper = design_bandpass(NOISE_SHAPING_TAPS, f_low, f_high, fs)?;
    let warm = NOISE_SHAPING_TAPS - 1;
    let raw = white_noise_stream(seed, stream, n + warm, 1.0)?;
    let mut y = shaper.process(&raw);
    y.drain(..warm);
    let p = energy(&y) / n as f64;
    if p > 0.0 {
        let g = p.sqrt().recip();
        y.iter_mut().for_each(|v| *v *= g);
    }
    Signal::new(y, fs)
}

/// `|H(f)|` on the `nfft / 2 + 1` non-negative DFT bins of the zero-padded taps.
pub fn magnitude_response(coeffs: &[f64], nfft: usize) -> Vec<f64> {
    let nfft = nfft.max(coeffs.len());
    let mut buf: Vec<Complex64> = (0..nfft)
        .map(|i| Complex64::new(coeffs.get(i).copied().unwrap_or(0.0), 0.0))
        .collect();
    FftPlanner::new().plan_fft_forward(nfft).process(&mut buf);
    buf[..nfft / 2 + 1].iter().map(|c| c.norm()).collect()
}

pub fn amplitude_db(mag: f64, floor_db: f64) -> f64 {
    if mag > 0.0 {
        (20.0 * mag.log10()).max(floor_db)
    } else {
        floor_db
    }
}

pub fn power_db(power: f64, floor_db: f64) -> f64 {
    if power > 0.0 {
        (10.0 * power.log10()).max(floor_db)
    } else {
        floor_db
    }
}

/// Bin index nearest to `freq` for an `nfft`-point DFT at `fs`.
pub fn bin_of(freq: f64, nfft: usize, fs: f64) -> usize {
    ((freq * nfft as f64 / fs).round() as usize).min(nfft / 2)
}
