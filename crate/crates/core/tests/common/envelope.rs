//! Envelope-spectrum analysis: band-pass around the structural resonance, Hilbert envelope,
//! mean removed, zero-padded magnitude DFT.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

pub const ZERO_PAD: usize = 8;
/// Band searched for fault repetition rates.
pub const BAND: (f64, f64) = (4.0, 400.0);
pub const PEAK_TOLERANCE: f64 = 0.02;
pub const PROMINENCE: f64 = 3.0;

pub struct EnvelopeSpectrum {
    pub magnitude: Vec<f64>,
    pub bin_hz: f64,
}

/// Magnitude of the analytic signal restricted to `band` (Hz).
pub fn envelope(x: &[f32], rate: f64, band: (f64, f64)) -> Vec<f64> {
    let n = x.len();
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k as f64 * rate / n as f64;
        let keep = k < n.div_ceil(2) && f >= band.0 && f <= band.1;
        *c *= if keep { 2.0 } else { 0.0 };
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.norm() / n as f64).collect()
}

/// Pass band for a structure ringing at `resonance`.
pub fn resonance_band(resonance: f64, rate: f64) -> (f64, f64) {
    (0.5 * resonance, (1.5 * resonance).min(0.45 * rate))
}

pub fn envelope_spectrum(x: &[f32], rate: f64, band: (f64, f64)) -> EnvelopeSpectrum {
    let env = envelope(x, rate, band);
    let mean = env.iter().sum::<f64>() / env.len() as f64;
    let len = env.len() * ZERO_PAD;
    let mut buf = vec![Complex::new(0.0, 0.0); len];
    for (b, e) in buf.iter_mut().zip(&env) {
        b.re = e - mean;
    }
    FftPlanner::<f64>::new().plan_fft_forward(len).process(&mut buf);
    EnvelopeSpectrum {
        magnitude: buf[..len / 2].iter().map(|c| c.norm()).collect(),
        bin_hz: rate / len as f64,
    }
}

impl EnvelopeSpectrum {
    fn bins(&self, lo: f64, hi: f64) -> std::ops::Range<usize> {
        let a = (lo / self.bin_hz).ceil() as usize;
        let b = ((hi / self.bin_hz).floor() as usize + 1).min(self.magnitude.len());
        a..b
    }

    /// Frequency and magnitude of the largest bin in `[lo, hi]`.
    pub fn peak(&self, lo: f64, hi: f64) -> (f64, f64) {
        self.bins(lo, hi)
            .map(|k| (k as f64 * self.bin_hz, self.magnitude[k]))
            .fold((0.0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a })
    }

    pub fn median(&self, lo: f64, hi: f64) -> f64 {
        let mut v: Vec<f64> = self.magnitude[self.bins(lo, hi)].to_vec();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    }
}

impl EnvelopeSpectrum {
    /// Bin-wise mean of spectra sharing one resolution.
    pub fn mean(spectra: &[EnvelopeSpectrum]) -> EnvelopeSpectrum {
        let first = &spectra[0];
        let mut magnitude = vec![0.0; first.magnitude.len()];
        for s in spectra {
            assert_eq!(s.magnitude.len(), magnitude.len());
            magnitude.iter_mut().zip(&s.magnitude).for_each(|(a, b)| *a += b / spectra.len() as f64);
        }
        EnvelopeSpectrum {
            magnitude,
            bin_hz: first.bin_hz,
        }
    }
}
