//! Waveforms, normalization, band-limited resampling and speed perturbation.
//!
//! Everything here is a pure function of its inputs.

use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::error::{Error, Result};

/// A single-channel sampled signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    rate: f64,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, rate: f64) -> Result<Self> {
        if !(rate.is_finite() && rate > 0.0) {
            return Err(Error::InvalidWaveform(format!("sample rate must be positive, got {rate}")));
        }
        if samples.is_empty() {
            return Err(Error::InvalidWaveform("no samples".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidWaveform(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, rate })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.rate
    }

    /// Tiles (loop-pads) a short signal or center-crops a long one to exactly `len` samples.
    pub fn fit_length(&self, len: usize) -> Waveform {
        assert!(len > 0, "target length must be positive");
        let n = self.samples.len();
        let samples = if n >= len {
            let start = (n - len) / 2;
            self.samples[start..start + len].to_vec()
        } else {
            self.samples.iter().copied().cycle().take(len).collect()
        };
        Waveform {
            samples,
            rate: self.rate,
        }
    }
}

/// Result of [`minmax_normalize`]; `degenerate` is set for constant input.
#[derive(Debug, Clone)]
pub struct Normalized {
    pub wave: Waveform,
    pub degenerate: bool,
}

/// Affine map of the signal onto [-1, 1]: the minimum goes to -1 and the maximum to +1.
///
/// A constant signal has no range to stretch; it maps to all zeros and the result is
/// flagged as degenerate (a warning is logged as well).
pub fn minmax_normalize(x: &Waveform) -> Normalized {
    let (lo, hi) = x
        .samples
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &s| (lo.min(s), hi.max(s)));
    if hi <= lo {
        log::warn!("min-max normalization of a constant signal ({lo}); emitting zeros");
        return Normalized {
            wave: Waveform {
                samples: vec![0.0; x.len()],
                rate: x.rate,
            },
            degenerate: true,
        };
    }
    let (lo, span) = (lo as f64, hi as f64 - lo as f64);
    let samples = x
        .samples
        .iter()
        .map(|&s| (2.0 * ((s as f64 - lo) / span) - 1.0) as f32)
        .collect();
    Normalized {
        wave: Waveform {
            samples,
            rate: x.rate,
        },
        degenerate: false,
    }
}

/// Zero crossings of the sinc kernel on each side of the center.
const ZERO_CROSSINGS: usize = 16;
/// Kernel table resolution per zero crossing.
const TABLE_DENSITY: usize = 512;
const KAISER_BETA: f64 = 8.6;

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Kaiser-windowed sinc sampled on `[0, ZERO_CROSSINGS]` (in zero-crossing units).
fn kernel_table() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let len = ZERO_CROSSINGS * TABLE_DENSITY + 2;
        let norm = bessel_i0(KAISER_BETA);
        (0..len)
            .map(|i| {
                let u = i as f64 / TABLE_DENSITY as f64;
                if u >= ZERO_CROSSINGS as f64 {
                    return 0.0;
                }
                let sinc = if i == 0 { 1.0 } else { (PI * u).sin() / (PI * u) };
                let r = u / ZERO_CROSSINGS as f64;
                let window = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / norm;
                sinc * window
            })
            .collect()
    })
}

#[inline]
fn kernel_at(table: &[f64], u: f64) -> f64 {
    let pos = u.abs() * TABLE_DENSITY as f64;
    let i = pos as usize;
    if i + 1 >= table.len() {
        return 0.0;
    }
    let frac = pos - i as f64;
    table[i] + frac * (table[i + 1] - table[i])
}

fn direct(input: &[f32], ratio: f64, out_len: usize, cutoff: f64, half_width: f64, table: &[f64]) -> Vec<f32> {
    let n = input.len() as isize;
    (0..out_len)
        .map(|j| {
            let t = j as f64 / ratio;
            let lo = ((t - half_width).ceil() as isize).max(0);
            let hi = ((t + half_width).floor() as isize).min(n - 1);
            let mut acc = 0.0f64;
            for k in lo..=hi {
                let w = kernel_at(table, (t - k as f64) * cutoff);
                acc += w * input[k as usize] as f64;
            }
            (acc * cutoff) as f32
        })
        .collect()
}

/// `ratio == p / q` with a small denominator, if one exists.
fn rational(ratio: f64) -> Option<(usize, usize)> {
    (1..=MAX_PHASES).find_map(|p| {
        let q = (p as f64 / ratio).round();
        (q >= 1.0 && ((p as f64 / q) - ratio).abs() <= 1e-12 * ratio).then_some((p, q as usize))
    })
}

const MAX_PHASES: usize = 4096;

/// Same interpolation as the generic path with the kernel precomputed for each of the `p`
/// fractional output positions.
fn polyphase(input: &[f32], p: usize, q: usize, out_len: usize, cutoff: f64, half_width: f64, table: &[f64]) -> Vec<f32> {
    let reach = half_width.ceil() as isize + 1;
    let taps = (2 * reach + 1) as usize;
    let mut bank = vec![0.0f64; p * taps];
    for r in 0..p {
        let frac = r as f64 / p as f64;
        for (i, w) in bank[r * taps..(r + 1) * taps].iter_mut().enumerate() {
            let d = i as isize - reach;
            let u = frac - d as f64;
            if u.abs() <= half_width {
                *w = kernel_at(table, u * cutoff);
            }
        }
    }
    let n = input.len() as isize;
    (0..out_len)
        .map(|j| {
            let num = j * q;
            let (base, r) = ((num / p) as isize, num % p);
            let weights = &bank[r * taps..(r + 1) * taps];
            let start = base - reach;
            let mut acc = 0.0f64;
            if start >= 0 && start + taps as isize <= n {
                let xs = &input[start as usize..start as usize + taps];
                for (w, &v) in weights.iter().zip(xs) {
                    acc += w * v as f64;
                }
            } else {
                for (i, w) in weights.iter().enumerate() {
                    let k = start + i as isize;
                    if k >= 0 && k < n {
                        acc += w * input[k as usize] as f64;
                    }
                }
            }
            (acc * cutoff) as f32
        })
        .collect()
}

/// Band-limited resampling with a Kaiser-windowed sinc interpolator (16 zero crossings per side).
///
/// The output has `round(len * to_rate / rate)` samples at `to_rate`. When downsampling, the
/// kernel is stretched so its cutoff sits at the new Nyquist frequency. Samples outside the
/// input are treated as zero.
pub fn resample(x: &Waveform, to_rate: f64) -> Result<Waveform> {
    if !(to_rate.is_finite() && to_rate > 0.0) {
        return Err(Error::InvalidArgument(format!("target rate must be positive, got {to_rate}")));
    }
    if to_rate == x.rate {
        return Ok(x.clone());
    }
    let ratio = to_rate / x.rate;
    let out_len = ((x.len() as f64 * ratio).round() as usize).max(1);
    let cutoff = ratio.min(1.0);
    let half_width = ZERO_CROSSINGS as f64 / cutoff;
    let table = kernel_table();
    let input = &x.samples;
    let samples = match rational(ratio) {
        Some((p, q)) => polyphase(input, p, q, out_len, cutoff, half_width, table),
        None => direct(input, ratio, out_len, cutoff, half_width, table),
    };
    Ok(Waveform {
        samples,
        rate: to_rate,
    })
}

/// Plays the signal `factor` times faster: a tone at `f` ends up at `f * factor`.
///
/// Implemented as resampling to `rate / factor` followed by relabeling the rate back to the
/// original; the result is then tiled or center-cropped to the input length.
pub fn speed_perturb(x: &Waveform, factor: f64) -> Result<Waveform> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::InvalidArgument(format!("speed factor must be positive, got {factor}")));
    }
    if factor == 1.0 {
        return Ok(x.clone());
    }
    let mut scaled = resample(x, x.rate / factor)?;
    scaled.rate = x.rate;
    Ok(scaled.fit_length(x.len()))
}

/// The symmetric set of speed factors `1 + k*s`, `k = -(n-1)/2 ..= (n-1)/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedGrid {
    n: usize,
    step: f64,
    factors: Vec<f64>,
}

impl SpeedGrid {
    pub fn new(n: usize, step: f64) -> Result<Self> {
        if n == 0 || n.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "speed category count must be odd and positive, got {n}"
            )));
        }
        if !(step.is_finite() && step > 0.0) {
            return Err(Error::InvalidArgument(format!("speed step must be positive, got {step}")));
        }
        let half = (n as i64 - 1) / 2;
        if half as f64 * step >= 1.0 {
            return Err(Error::InvalidArgument(format!(
                "speed grid ({n}, {step}) would produce a non-positive factor"
            )));
        }
        let factors = (-half..=half).map(|k| 1.0 + k as f64 * step).collect();
        Ok(Self { n, step, factors })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn factors(&self) -> &[f64] {
        &self.factors
    }

    /// Index of the unperturbed (factor 1.0) category.
    pub fn identity_index(&self) -> usize {
        (self.n - 1) / 2
    }
}

pub fn speed_grid(n: usize, step: f64) -> Result<SpeedGrid> {
    SpeedGrid::new(n, step)
}

/// Label of a speed-perturbed copy: `base * n + speed_index`.
pub fn virtual_label(base: usize, speed_index: usize, n: usize) -> usize {
    debug_assert!(speed_index < n);
    base * n + speed_index
}

/// Inverse of [`virtual_label`] for the base class.
pub fn base_label(virtual_id: usize, n: usize) -> usize {
    virtual_id / n
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, rate: f64, len: usize) -> Waveform {
        let s = (0..len)
            .map(|i| (2.0 * PI * freq * i as f64 / rate).sin() as f32)
            .collect();
        Waveform::new(s, rate).unwrap()
    }

    /// Peak frequency of a plain DFT magnitude scan over `[f_lo, f_hi]`, bin spacing `rate/len`.
    fn dft_peak(x: &Waveform, f_lo: f64, f_hi: f64) -> (f64, f64) {
        let n = x.len();
        let bin = x.rate() / n as f64;
        let (k_lo, k_hi) = ((f_lo / bin) as usize, (f_hi / bin).ceil() as usize);
        let mut best = (0usize, -1.0f64);
        for k in k_lo..=k_hi {
            let (mut re, mut im) = (0.0f64, 0.0f64);
            for (i, &s) in x.samples().iter().enumerate() {
                let ph = 2.0 * PI * (k * i % n) as f64 / n as f64;
                re += s as f64 * ph.cos();
                im -= s as f64 * ph.sin();
            }
            let mag = re.hypot(im);
            if mag > best.1 {
                best = (k, mag);
            }
        }
        (best.0 as f64 * bin, bin)
    }

    #[test]
    fn polyphase_matches_direct_interpolation() {
        let x: Vec<f32> = (0..3000).map(|i| ((i * 7919) % 1013) as f32 / 506.0 - 1.0).collect();
        let table = kernel_table();
        for ratio in [10.0 / 11.0, 10.0 / 9.0, 75.0 / 8.0, 8.0 / 7.0, 40.0 / 41.0] {
            let (p, q) = rational(ratio).unwrap();
            assert!((p as f64 / q as f64 - ratio).abs() < 1e-12);
            let out_len = (x.len() as f64 * ratio).round() as usize;
            let cutoff = ratio.min(1.0);
            let hw = ZERO_CROSSINGS as f64 / cutoff;
            let a = polyphase(&x, p, q, out_len, cutoff, hw, table);
            let b = direct(&x, ratio, out_len, cutoff, hw, table);
            let err = a.iter().zip(&b).map(|(u, v)| (u - v).abs()).fold(0.0f32, f32::max);
            assert!(err < 1e-6, "ratio {ratio}: {err}");
        }
        assert_eq!(rational(std::f64::consts::PI), None);
    }

    #[test]
    fn rejects_bad_waveforms() {
        assert!(Waveform::new(vec![], 100.0).is_err());
        assert!(Waveform::new(vec![1.0], 0.0).is_err());
        assert!(Waveform::new(vec![f32::NAN], 10.0).is_err());
    }

    #[test]
    fn normalize_endpoints() {
        let w = Waveform::new(vec![-2.0, 0.0, 2.0], 10.0).unwrap();
        let out = minmax_normalize(&w);
        assert_eq!(out.wave.samples(), &[-1.0, 0.0, 1.0]);
        assert!(!out.degenerate);
    }

    #[test]
    fn normalize_constant_is_zero_and_flagged() {
        let w = Waveform::new(vec![5.0; 3], 10.0).unwrap();
        let out = minmax_normalize(&w);
        assert_eq!(out.wave.samples(), &[0.0, 0.0, 0.0]);
        assert!(out.degenerate);
    }

    #[test]
    fn normalize_random_hits_exact_bounds() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let s: Vec<f32> = (0..1000).map(|_| rng.random_range(-7.0..13.0)).collect();
        let out = minmax_normalize(&Waveform::new(s, 1.0).unwrap()).wave;
        let lo = out.samples().iter().copied().fold(f32::INFINITY, f32::min);
        let hi = out.samples().iter().copied().fold(f32::NEG_INFINITY, f32::max);
        assert_eq!(lo, -1.0);
        assert_eq!(hi, 1.0);
    }

    #[test]
    fn resample_identity_is_bitwise() {
        let w = tone(100.0, 48_000.0, 4800);
        assert_eq!(resample(&w, 48_000.0).unwrap(), w);
    }

    #[test]
    fn resample_length_rule() {
        let w = Waveform::new(vec![0.0; 192_000], 48_000.0).unwrap();
        assert_eq!(resample(&w, 42_000.0).unwrap().len(), 168_000);
    }

    #[test]
    fn resample_keeps_tone_frequency() {
        let w = tone(100.0, 48_000.0, 48_000);
        let down = resample(&w, 24_000.0).unwrap();
        assert_eq!(down.len(), 24_000);
        let (peak, bin) = dft_peak(&down, 50.0, 200.0);
        assert!((peak - 100.0).abs() <= bin, "peak {peak}");
        let back = resample(&down, 48_000.0).unwrap();
        let (peak, bin) = dft_peak(&back, 50.0, 200.0);
        assert!((peak - 100.0).abs() <= bin, "peak {peak}");
    }

    #[test]
    fn resampled_tone_amplitude_is_preserved() {
        let w = tone(440.0, 44_100.0, 44_100);
        let up = resample(&w, 48_000.0).unwrap();
        let mid = &up.samples()[4_000..44_000];
        let peak = mid.iter().fold(0.0f32, |a, &b| a.max(b.abs()));
        assert!((peak - 1.0).abs() < 2e-3, "peak {peak}");
    }

    #[test]
    fn speed_perturb_identity_and_length() {
        let w = tone(100.0, 8_000.0, 8_000);
        assert_eq!(speed_perturb(&w, 1.0).unwrap(), w);
        assert_eq!(speed_perturb(&w, 0.9).unwrap().len(), 8_000);
        assert_eq!(speed_perturb(&w, 1.1).unwrap().len(), 8_000);
        assert!(speed_perturb(&w, 0.0).is_err());
    }

    #[test]
    fn speed_perturb_shifts_tone() {
        let w = tone(100.0, 8_000.0, 8_000);
        let fast = speed_perturb(&w, 1.1).unwrap();
        let (peak, bin) = dft_peak(&fast, 50.0, 200.0);
        assert!((peak - 110.0).abs() <= bin, "peak {peak}");
    }

    #[test]
    fn fit_length_tiles_and_crops() {
        let w = Waveform::new(vec![1.0, 2.0, 3.0], 1.0).unwrap();
        assert_eq!(w.fit_length(7).samples(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0]);
        let w = Waveform::new(vec![1.0, 2.0, 3.0, 4.0, 5.0], 1.0).unwrap();
        assert_eq!(w.fit_length(3).samples(), &[2.0, 3.0, 4.0]);
    }

    #[test]
    fn speed_grids() {
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(speed_grid(3, 0.1).unwrap().factors(), &[0.9, 1.0, 1.1]));
        assert_eq!(speed_grid(1, 0.1).unwrap().factors(), &[1.0]);
        let g7 = speed_grid(7, 0.1).unwrap();
        assert!(close(g7.factors(), &[0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3]));
        assert_eq!(g7.factors()[g7.identity_index()], 1.0);
        assert!(speed_grid(4, 0.1).is_err());
        assert!(speed_grid(3, 0.0).is_err());
        assert!(speed_grid(3, -0.1).is_err());
        assert!(speed_grid(21, 0.1).is_err());
    }

    #[test]
    fn virtual_labels_are_bijective() {
        assert_eq!(virtual_label(0, 0, 3), 0);
        assert_eq!(virtual_label(4, 2, 3), 14);
        assert_eq!(base_label(14, 3), 4);
        let mut seen = std::collections::BTreeSet::new();
        for base in 0..5 {
            for speed in 0..3 {
                let v = virtual_label(base, speed, 3);
                assert!(v < 15);
                assert_eq!(base_label(v, 3), base);
                assert_eq!(v % 3, speed);
                assert!(seen.insert(v));
            }
        }
        assert_eq!(seen.len(), 15);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn normalize_is_idempotent(v in proptest::collection::vec(-100.0f32..100.0, 2..64)) {
                prop_assume!(v.iter().any(|&x| x != v[0]));
                let once = minmax_normalize(&Waveform::new(v, 1.0).unwrap()).wave;
                let twice = minmax_normalize(&once).wave;
                for (a, b) in once.samples().iter().zip(twice.samples()) {
                    prop_assert!((a - b).abs() <= 1e-6);
                }
            }

            #[test]
            fn virtual_label_roundtrip(base in 0usize..50, n in 1usize..9, s in 0usize..9) {
                prop_assume!(s < n);
                let v = virtual_label(base, s, n);
                prop_assert_eq!(base_label(v, n), base);
                prop_assert_eq!(v % n, s);
            }
        }
    }
}
