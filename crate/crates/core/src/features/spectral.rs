//! Short-time power spectrum and the log-Mel spectrogram.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::map::{Channel, FeatureMap};
use crate::error::{Error, Result};
use crate::signal::Waveform;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Window {
    Hann,
    Rectangular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub n_fft: usize,
    pub win_length: usize,
    pub hop: usize,
    pub window: Window,
    pub center: bool,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            n_fft: 1024,
            win_length: 1024,
            hop: 512,
            window: Window::Hann,
            center: true,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.win_length || self.win_length > self.n_fft {
            return Err(Error::InvalidArgument(format!(
                "need 0 < hop <= win_length <= n_fft, got {} / {} / {}",
                self.hop, self.win_length, self.n_fft
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Number of frames for a signal of `len` samples.
    pub fn frames(&self, len: usize) -> usize {
        if self.center {
            len / self.hop + 1
        } else if len < self.n_fft {
            0
        } else {
            (len - self.n_fft) / self.hop + 1
        }
    }

    /// Window of length `n_fft`, with the `win_length` taps centered.
    fn window(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.n_fft];
        let off = (self.n_fft - self.win_length) / 2;
        for i in 0..self.win_length {
            w[off + i] = match self.window {
                // periodic Hann
                Window::Hann => {
                    0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / self.win_length as f64).cos()
                }
                Window::Rectangular => 1.0,
            };
        }
        w
    }
}

/// Reflect-padding index map (no edge repeat), valid for any offset.
fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= len as isize {
        m = period - m;
    }
    m as usize
}

/// Computes `|STFT|^2` frame by frame. Reuses its FFT plan across calls.
pub struct PowerSpectrogram {
    cfg: StftConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for PowerSpectrogram {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PowerSpectrogram").field("cfg", &self.cfg).finish()
    }
}

impl PowerSpectrogram {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(Self {
            window: cfg.window(),
            cfg,
            fft,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    /// Row-major `bins x frames` power grid.
    pub fn compute(&self, x: &Waveform) -> Vec<f64> {
        let samples = x.samples();
        let (n_fft, hop) = (self.cfg.n_fft, self.cfg.hop);
        let frames = self.cfg.frames(samples.len());
        let bins = self.cfg.bins();
        let offset = if self.cfg.center { (n_fft / 2) as isize } else { 0 };
        let mut out = vec![0.0; bins * frames];
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..frames {
            let start = (t * hop) as isize - offset;
            for (i, b) in buf.iter_mut().enumerate() {
                let s = samples[reflect(start + i as isize, samples.len())] as f64;
                *b = Complex::new(s * self.window[i], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (b, c) in buf.iter().take(bins).enumerate() {
                out[b * frames + t] = c.norm_sqr();
            }
        }
        out
    }
}

/// `|STFT|^2` as a row-major `bins x frames` grid.
pub fn stft_power(x: &Waveform, cfg: &StftConfig) -> Result<Vec<f64>> {
    Ok(PowerSpectrogram::new(*cfg)?.compute(x))
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub n_mels: usize,
    pub fmin: f64,
    /// `None` means Nyquist.
    pub fmax: Option<f64>,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_mels: 64,
            fmin: 0.0,
            fmax: None,
            log_floor: 1e-10,
        }
    }
}

/// Triangular HTK-mel filterbank, each row scaled to a peak of exactly 1.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    n_mels: usize,
    bins: usize,
    weights: Vec<f64>,
    centers: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &MelConfig, n_fft: usize, rate: f64) -> Result<Self> {
        let fmax = cfg.fmax.unwrap_or(rate / 2.0);
        if cfg.n_mels < 2 {
            return Err(Error::InvalidArgument("need at least two mel bins".into()));
        }
        if !(cfg.fmin >= 0.0 && cfg.fmin < fmax && fmax <= rate / 2.0) {
            return Err(Error::InvalidArgument(format!(
                "mel range [{}, {fmax}] invalid for rate {rate}",
                cfg.fmin
            )));
        }
        let bins = n_fft / 2 + 1;
        let (mlo, mhi) = (hz_to_mel(cfg.fmin), hz_to_mel(fmax));
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let mut weights = vec![0.0; cfg.n_mels * bins];
        for m in 0..cfg.n_mels {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let row = &mut weights[m * bins..(m + 1) * bins];
            for (b, w) in row.iter_mut().enumerate() {
                let f = b as f64 * rate / n_fft as f64;
                let up = (f - lo) / (mid - lo);
                let down = (hi - f) / (hi - mid);
                *w = up.min(down).max(0.0);
            }
            let peak = row.iter().cloned().fold(0.0, f64::max);
            if peak <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "mel band {m} ({lo:.1}..{hi:.1} Hz) contains no FFT bin; use fewer mel bins or a larger n_fft"
                )));
            }
            row.iter_mut().for_each(|w| *w /= peak);
        }
        Ok(Self {
            n_mels: cfg.n_mels,
            bins,
            weights,
            centers: edges[1..=cfg.n_mels].to_vec(),
        })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    /// Row-major `n_mels x bins` weights.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn center_frequencies(&self) -> &[f64] {
        &self.centers
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.bins..(m + 1) * self.bins]
    }

    /// `weights * power` for a `bins x frames` grid.
    pub fn apply(&self, power: &[f64], frames: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_mels * frames];
        for m in 0..self.n_mels {
            let dst = &mut out[m * frames..(m + 1) * frames];
            for (b, &w) in self.row(m).iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let src = &power[b * frames..(b + 1) * frames];
                dst.iter_mut().zip(src).for_each(|(d, &p)| *d += w * p);
            }
        }
        out
    }
}

pub fn mel_weights(cfg: &MelConfig, n_fft: usize, rate: f64) -> Result<MelFilterbank> {
    MelFilterbank::new(cfg, n_fft, rate)
}

/// Log-Mel spectrogram extractor bound to one sample rate.
#[derive(Debug)]
pub struct LogMel {
    stft: PowerSpectrogram,
    bank: MelFilterbank,
    log_floor: f64,
    rate: f64,
}

impl LogMel {
    pub fn new(stft: StftConfig, mel: MelConfig, rate: f64) -> Result<Self> {
        Ok(Self {
            bank: MelFilterbank::new(&mel, stft.n_fft, rate)?,
            stft: PowerSpectrogram::new(stft)?,
            log_floor: mel.log_floor,
            rate,
        })
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.bank
    }

    /// `ln(max(W * |STFT|^2, floor))` as a single-channel map.
    pub fn compute(&self, x: &Waveform) -> Result<FeatureMap> {
        if x.rate() != self.rate {
            return Err(Error::InvalidArgument(format!(
                "log-mel extractor built for {} Hz, got {} Hz",
                self.rate,
                x.rate()
            )));
        }
        let frames = self.stft.config().frames(x.len());
        let power = self.stft.compute(x);
        let mel = self.bank.apply(&power, frames);
        let data = mel.iter().map(|&v| v.max(self.log_floor).ln() as f32).collect();
        FeatureMap::new(vec![Channel::M], self.bank.n_mels(), frames, data)
    }
}

pub fn log_mel(x: &Waveform, stft: &StftConfig, mel: &MelConfig) -> Result<FeatureMap> {
    LogMel::new(*stft, *mel, x.rate())?.compute(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    use std::f64::consts::PI;

    #[test]
    fn frame_count_matches_canonical_geometry() {
        assert_eq!(StftConfig::default().frames(192_000), 376);
    }

    #[test]
    fn dc_energy_lands_in_bin_zero() {
        let cfg = StftConfig {
            n_fft: 64,
            win_length: 64,
            hop: 16,
            window: Window::Rectangular,
            center: true,
        };
        let x = Waveform::new(vec![1.0; 256], 1000.0).unwrap();
        let p = stft_power(&x, &cfg).unwrap();
        let frames = cfg.frames(256);
        for t in 0..frames {
            assert!((p[t] - 64.0 * 64.0).abs() < 1e-6);
            for b in 1..cfg.bins() {
                assert!(p[b * frames + t] < 1e-12);
            }
        }
    }

    #[test]
    fn tone_peaks_at_its_bin_like_a_direct_dft() {
        let cfg = StftConfig {
            n_fft: 128,
            win_length: 128,
            hop: 32,
            window: Window::Hann,
            center: false,
        };
        let rate = 1280.0;
        let k = 13usize;
        let f = k as f64 * rate / 128.0;
        let s: Vec<f32> = (0..512).map(|i| (2.0 * PI * f * i as f64 / rate).cos() as f32).collect();
        let x = Waveform::new(s.clone(), rate).unwrap();
        let p = stft_power(&x, &cfg).unwrap();
        let frames = cfg.frames(512);
        // direct DFT of the first frame as oracle
        let w = cfg.window();
        let oracle: Vec<f64> = (0..cfg.bins())
            .map(|b| {
                let (mut re, mut im) = (0.0, 0.0);
                for n in 0..128 {
                    let v = s[n] as f64 * w[n];
                    let ph = 2.0 * PI * (b * n) as f64 / 128.0;
                    re += v * ph.cos();
                    im -= v * ph.sin();
                }
                re * re + im * im
            })
            .collect();
        let col: Vec<f64> = (0..cfg.bins()).map(|b| p[b * frames]).collect();
        for (a, o) in col.iter().zip(&oracle) {
            assert!((a - o).abs() <= 1e-6 * o.max(1.0));
        }
        let argmax = col.iter().enumerate().fold(0, |m, (i, v)| if *v > col[m] { i } else { m });
        assert_eq!(argmax, k);
    }

    #[test]
    fn mel_bank_shape_and_peaks() {
        let bank = mel_weights(&MelConfig::default(), 1024, 48_000.0).unwrap();
        assert_eq!((bank.n_mels(), bank.bins()), (64, 513));
        for m in 0..64 {
            assert_eq!(bank.row(m).iter().cloned().fold(0.0, f64::max), 1.0);
        }
        assert!(bank.center_frequencies().windows(2).all(|w| w[1] > w[0]));
        // interior bins all covered
        for b in 1..512 {
            let s: f64 = (0..64).map(|m| bank.row(m)[b]).sum();
            assert!(s > 0.0, "bin {b} uncovered");
        }
        // ones spectrum -> plain row sums, all positive
        let ones = vec![1.0; 513];
        let out = bank.apply(&ones, 1);
        for m in 0..64 {
            let direct: f64 = bank.row(m).iter().sum();
            assert!((out[m] - direct).abs() < 1e-12 && direct > 0.0);
        }
    }

    #[test]
    fn mel_bank_rejects_bad_ranges() {
        let mut cfg = MelConfig::default();
        cfg.fmax = Some(30_000.0);
        assert!(mel_weights(&cfg, 1024, 48_000.0).is_err());
        cfg.fmax = Some(100.0);
        cfg.fmin = 200.0;
        assert!(mel_weights(&cfg, 1024, 48_000.0).is_err());
        cfg = MelConfig {
            n_mels: 1,
            ..MelConfig::default()
        };
        assert!(mel_weights(&cfg, 1024, 48_000.0).is_err());
    }

    #[test]
    fn silence_hits_the_floor() {
        let x = Waveform::new(vec![0.0; 4096], 48_000.0).unwrap();
        let m = log_mel(&x, &StftConfig::default(), &MelConfig::default()).unwrap();
        let floor = (1e-10f64).ln() as f32;
        assert!(m.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn scaling_adds_log_of_square() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let s: Vec<f32> = (0..16_384).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x = Waveform::new(s.clone(), 48_000.0).unwrap();
        let y = Waveform::new(s.iter().map(|v| v * 3.0).collect(), 48_000.0).unwrap();
        let (a, b) = (
            log_mel(&x, &StftConfig::default(), &MelConfig::default()).unwrap(),
            log_mel(&y, &StftConfig::default(), &MelConfig::default()).unwrap(),
        );
        let shift = (9.0f64).ln() as f32;
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((v - u - shift).abs() < 1e-4);
        }
    }

    /// White noise has a flat per-bin power, so every mel row carries energy proportional to
    /// its total filter weight. Compensated for that weight, row means agree within 3 dB.
    #[test]
    fn white_noise_rows_are_flat_per_unit_weight() {
        let lm = LogMel::new(StftConfig::default(), MelConfig::default(), 48_000.0).unwrap();
        let weight_db: Vec<f64> = (0..64)
            .map(|m| 10.0 * lm.filterbank().row(m).iter().sum::<f64>().log10())
            .collect();
        let mut row_db = vec![0.0f64; 64];
        for seed in 0..10 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<f32> = (0..48_000).map(|_| StandardNormal.sample(&mut rng)).collect();
            let m = lm.compute(&Waveform::new(s, 48_000.0).unwrap()).unwrap();
            for (r, db) in row_db.iter_mut().enumerate() {
                let row = &m.data()[r * m.frames()..(r + 1) * m.frames()];
                let mean_power = row.iter().map(|&v| (v as f64).exp()).sum::<f64>() / row.len() as f64;
                *db += 10.0 * mean_power.log10() / 10.0;
            }
        }
        let flat: Vec<f64> = row_db.iter().zip(&weight_db).map(|(a, w)| a - w).collect();
        let (lo, hi) = flat
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        assert!(hi - lo < 3.0, "spread {} dB", hi - lo);
    }
}
