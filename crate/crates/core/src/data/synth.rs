//! Synthetic paired acoustic/vibration recordings of rolling-bearing faults.
//!
//! A localized fault produces a train of impacts at a characteristic rate; each impact rings
//! the structure at a resonance and decays exponentially. The vibration sensor sees the
//! ringing plus shaft hum and noise. The microphone sees the same vibration through a
//! random (per dataset) FIR transmission path, plus its own hum and noise.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::audio::{write_text_signal, write_wav};
use crate::data::manifest::{write_manifest, SampleRecord, Split, NUM_CLASSES};
use crate::data::split::split_finetune;
use crate::error::{Error, Result};
use crate::signal::Waveform;

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Characteristic-frequency multipliers of the shaft rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultMultipliers {
    pub ftf: f64,
    pub bsf: f64,
    pub bpfo: f64,
    pub bpfi: f64,
}

impl Default for FaultMultipliers {
    fn default() -> Self {
        Self {
            ftf: 0.4,
            bsf: 2.4,
            bpfo: 3.6,
            bpfi: 5.4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VibrationFormat {
    Text,
    Wav,
}

/// Which stage a generated dataset feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthProfile {
    pub name: String,
    pub role: Role,
    pub shaft_rate: f64,
    pub multipliers: FaultMultipliers,
    pub resonance: f64,
    /// Exponential decay rate of each impact, 1/s.
    pub decay: f64,
    pub amplitude: f64,
    /// Relative spread of impact amplitudes.
    pub amplitude_jitter: f64,
    /// Impact timing spread as a fraction of the impact period.
    pub timing_jitter: f64,
    /// Mean fault-signal power over noise power.
    pub snr_db: f64,
    pub fir_taps: usize,
    pub acoustic_hum: f64,
    /// Hum amplitudes relative to the impact amplitude.
    pub hum_level: f64,
    pub acoustic_rate: f64,
    pub vibration_rate: f64,
    pub duration: f64,
    pub vibration_format: VibrationFormat,
}

/// Highest usable resonance as a fraction of a sensor's rate.
pub const MAX_RESONANCE_FRACTION: f64 = 0.35;

impl SynthProfile {
    pub fn source() -> Self {
        Self {
            name: "source".into(),
            role: Role::Source,
            shaft_rate: 30.0,
            multipliers: FaultMultipliers::default(),
            resonance: 4000.0,
            decay: 800.0,
            amplitude: 1.0,
            amplitude_jitter: 0.1,
            timing_jitter: 0.01,
            snr_db: 10.0,
            fir_taps: 48,
            acoustic_hum: 50.0,
            hum_level: 0.3,
            acoustic_rate: 48_000.0,
            vibration_rate: 5120.0,
            duration: 4.0,
            vibration_format: VibrationFormat::Text,
        }
    }

    pub fn target() -> Self {
        Self {
            name: "target".into(),
            role: Role::Target,
            shaft_rate: 25.0,
            resonance: 3200.0,
            snr_db: 6.0,
            acoustic_hum: 60.0,
            acoustic_rate: 42_000.0,
            vibration_rate: 42_000.0,
            duration: 1.0,
            vibration_format: VibrationFormat::Wav,
            ..Self::source()
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "source" => Ok(Self::source()),
            "target" => Ok(Self::target()),
            other => Err(Error::InvalidArgument(format!(
                "unknown profile `{other}`; valid profiles: source, target"
            ))),
        }
    }

    /// Impact rate of a class; `None` for the healthy class.
    pub fn characteristic_frequency(&self, class: usize) -> Option<f64> {
        let m = &self.multipliers;
        let mult = match class {
            1 => m.bpfo,
            2 => m.bpfi,
            3 => m.bsf,
            4 => m.ftf,
            _ => return None,
        };
        Some(mult * self.shaft_rate)
    }

    /// Resonance seen by the vibration sensor, limited by its bandwidth.
    pub fn vibration_resonance(&self) -> f64 {
        self.resonance.min(MAX_RESONANCE_FRACTION * self.vibration_rate)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("profile `{}`: {m}", self.name)));
        for (what, v) in [
            ("shaft rate", self.shaft_rate),
            ("resonance", self.resonance),
            ("decay", self.decay),
            ("amplitude", self.amplitude),
            ("acoustic rate", self.acoustic_rate),
            ("vibration rate", self.vibration_rate),
            ("duration", self.duration),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{what} {v} must be positive"));
            }
        }
        if !self.snr_db.is_finite() || self.fir_taps == 0 {
            return bad("SNR must be finite and the acoustic path non-empty".into());
        }
        if !(0.0..1.0).contains(&self.amplitude_jitter) || !(0.0..0.5).contains(&self.timing_jitter) {
            return bad("jitter out of range".into());
        }
        let low_nyquist = 0.5 * self.vibration_rate.min(self.acoustic_rate);
        let highest_impact = (1..NUM_CLASSES).filter_map(|c| self.characteristic_frequency(c)).fold(0.0, f64::max);
        if self.resonance >= 0.5 * self.acoustic_rate
            || highest_impact >= low_nyquist
            || self.acoustic_hum >= 0.5 * self.acoustic_rate
            || self.shaft_rate >= low_nyquist
        {
            return bad("every frequency must lie below the sensor Nyquist rates".into());
        }
        Ok(())
    }

    /// Average power of the impact train, averaged over the fault classes.
    pub fn fault_signal_power(&self) -> f64 {
        let (d, w) = (self.decay, 2.0 * std::f64::consts::PI * self.resonance);
        let impact_energy = self.amplitude.powi(2) * (1.0 + self.amplitude_jitter.powi(2) / 3.0) * w * w
            / (4.0 * d * (d * d + w * w));
        let faults = 1..NUM_CLASSES;
        let n = faults.len() as f64;
        faults
            .map(|c| {
                let modulation = if c == 2 { 0.5 } else { 1.0 };
                self.characteristic_frequency(c).expect("fault class") * modulation * impact_energy
            })
            .sum::<f64>()
            / n
    }

    fn noise_sigma(&self) -> f64 {
        (self.fault_signal_power() / 10f64.powf(self.snr_db / 10.0)).sqrt()
    }
}

#[derive(Debug, Clone, Copy)]
struct Impact {
    time: f64,
    amplitude: f64,
}

/// Deterministic sample generator for one profile and seed.
///
/// The acoustic path depends on the seed alone, so profiles generated with the same seed
/// share it. Per-sample randomness also depends on the profile name.
#[derive(Debug, Clone)]
pub struct Generator {
    profile: SynthProfile,
    sample_seed: u64,
    fir: Vec<f64>,
}

fn name_key(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Generator {
    pub fn new(profile: SynthProfile, seed: u64) -> Result<Self> {
        profile.validate()?;
        let mut rng = stream_rng(seed, 0);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let tau = profile.fir_taps as f64 / 4.0;
        let mut fir: Vec<f64> = (0..profile.fir_taps)
            .map(|k| normal.sample(&mut rng) * (-(k as f64) / tau).exp())
            .collect();
        let energy = fir.iter().map(|h| h * h).sum::<f64>().sqrt();
        fir.iter_mut().for_each(|h| *h /= energy);
        let sample_seed = seed ^ name_key(&profile.name);
        Ok(Self {
            profile,
            sample_seed,
            fir,
        })
    }

    pub fn profile(&self) -> &SynthProfile {
        &self.profile
    }

    /// Acoustic-path impulse response (unit energy).
    pub fn acoustic_path(&self) -> &[f64] {
        &self.fir
    }

    fn impacts(&self, class: usize, rng: &mut ChaCha8Rng) -> Vec<Impact> {
        let p = &self.profile;
        let Some(fc) = p.characteristic_frequency(class) else {
            return Vec::new();
        };
        let period = 1.0 / fc;
        let start = rng.random_range(0.0..period);
        let count = ((p.duration - start) / period).ceil().max(0.0) as usize;
        (0..count)
            .map(|i| {
                let nominal = start + i as f64 * period;
                let time = nominal + p.timing_jitter * period * rng.random_range(-1.0..1.0);
                let mut amplitude = p.amplitude * (1.0 + p.amplitude_jitter * rng.random_range(-1.0..1.0));
                if class == 2 {
                    amplitude *= (2.0 * std::f64::consts::PI * p.shaft_rate * nominal).cos().abs();
                }
                Impact { time, amplitude }
            })
            .collect()
    }

    fn ring(&self, impacts: &[Impact], rate: f64, resonance: f64, n: usize) -> Vec<f64> {
        let decay = self.profile.decay;
        let span = ((1e4f64).ln() / decay * rate).ceil() as usize;
        let w = 2.0 * std::f64::consts::PI * resonance;
        let mut out = vec![0.0; n];
        for imp in impacts {
            let first = (imp.time * rate).ceil().max(0.0) as usize;
            for (k, o) in out.iter_mut().enumerate().skip(first).take(span) {
                let tau = k as f64 / rate - imp.time;
                *o += imp.amplitude * (-decay * tau).exp() * (w * tau).sin();
            }
        }
        out
    }

    /// Acoustic and vibration recordings of sample `index` of `class`.
    pub fn sample(&self, class: usize, index: usize) -> Result<(Waveform, Waveform)> {
        if class >= NUM_CLASSES {
            return Err(Error::InvalidArgument(format!("class {class} out of range")));
        }
        let p = &self.profile;
        let mut rng = stream_rng(self.sample_seed, 1 + (class as u64) * (1 << 32) + index as u64);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let sigma = p.noise_sigma();
        let two_pi = 2.0 * std::f64::consts::PI;
        let impacts = self.impacts(class, &mut rng);
        let shaft_phase = rng.random_range(0.0..two_pi);
        let hum_phase = rng.random_range(0.0..two_pi);
        let hum = p.hum_level * p.amplitude;

        let nv = (p.duration * p.vibration_rate).round() as usize;
        let mut vib = self.ring(&impacts, p.vibration_rate, p.vibration_resonance(), nv);
        for (k, v) in vib.iter_mut().enumerate() {
            let t = k as f64 / p.vibration_rate;
            *v += hum * (two_pi * p.shaft_rate * t + shaft_phase).sin() + sigma * normal.sample(&mut rng);
        }

        let na = (p.duration * p.acoustic_rate).round() as usize;
        let mut source = self.ring(&impacts, p.acoustic_rate, p.resonance, na);
        for (k, v) in source.iter_mut().enumerate() {
            let t = k as f64 / p.acoustic_rate;
            *v += hum * (two_pi * p.shaft_rate * t + shaft_phase).sin();
        }
        let mut acoustic = vec![0.0; na];
        for (k, a) in acoustic.iter_mut().enumerate() {
            let t = k as f64 / p.acoustic_rate;
            let mut acc = 0.0;
            for (j, h) in self.fir.iter().enumerate().take(k + 1) {
                acc += h * source[k - j];
            }
            *a = acc + hum * (two_pi * p.acoustic_hum * t + hum_phase).sin() + sigma * normal.sample(&mut rng);
        }
        let to_wave = |x: Vec<f64>, rate| Waveform::new(x.into_iter().map(|v| v as f32).collect(), rate);
        Ok((to_wave(acoustic, p.acoustic_rate)?, to_wave(vib, p.vibration_rate)?))
    }
}

fn peak_scaled(x: &Waveform) -> Result<Waveform> {
    let peak = x.samples().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let g = if peak > 0.0 { 0.95 / peak } else { 1.0 };
    Waveform::new(x.samples().iter().map(|v| v * g).collect(), x.rate())
}

pub fn sample_id(profile: &SynthProfile, class: usize, index: usize) -> String {
    format!("{}-c{class}-{index:04}", profile.name)
}

/// Writes `per_class` samples of every class plus a manifest into `out`, returning the
/// records with paths resolved against `out`. Source datasets are marked for training;
/// target datasets carry the fine-tune pool / test assignment of the largest budget.
pub fn synth_dataset(profile: &SynthProfile, out: &Path, per_class: usize, seed: u64) -> Result<Vec<SampleRecord>> {
    if per_class == 0 {
        return Err(Error::InvalidArgument("per_class must be at least 1".into()));
    }
    let generator = Generator::new(profile.clone(), seed)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut records = Vec::with_capacity(per_class * NUM_CLASSES);
    for class in 0..NUM_CLASSES {
        for index in 0..per_class {
            let id = sample_id(profile, class, index);
            let (a, v) = generator.sample(class, index)?;
            let a_name = PathBuf::from(format!("{id}_a.wav"));
            write_wav(&out.join(&a_name), &peak_scaled(&a)?)?;
            let v_name = match profile.vibration_format {
                VibrationFormat::Text => {
                    let name = PathBuf::from(format!("{id}_v.txt"));
                    write_text_signal(&out.join(&name), &v)?;
                    name
                }
                VibrationFormat::Wav => {
                    let name = PathBuf::from(format!("{id}_v.wav"));
                    write_wav(&out.join(&name), &peak_scaled(&v)?)?;
                    name
                }
            };
            records.push(SampleRecord {
                id,
                acoustic_path: a_name,
                vibration_path: v_name,
                acoustic_rate: profile.acoustic_rate,
                vibration_rate: profile.vibration_rate,
                label: class,
                split: Split::Train,
            });
        }
    }
    if profile.role == Role::Target {
        let (pool, _) = split_finetune(&records, super::split::MAX_FINETUNE_PERCENT, seed)?;
        let pool: std::collections::HashSet<_> = pool.into_iter().map(|r| r.id).collect();
        for r in &mut records {
            r.split = if pool.contains(&r.id) { Split::Finetune } else { Split::Test };
        }
    }
    write_manifest(&out.join(MANIFEST_NAME), &records)?;
    Ok(records
        .into_iter()
        .map(|mut r| {
            r.acoustic_path = out.join(&r.acoustic_path);
            r.vibration_path = out.join(&r.vibration_path);
            r
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_differ_and_validate() {
        let (s, t) = (SynthProfile::source(), SynthProfile::target());
        s.validate().unwrap();
        t.validate().unwrap();
        assert_ne!(s.shaft_rate, t.shaft_rate);
        assert_ne!(s.resonance, t.resonance);
        assert_ne!(s.snr_db, t.snr_db);
        assert_ne!(s.vibration_rate, t.vibration_rate);
        assert!(s.vibration_resonance() < s.vibration_rate / 2.0);
        assert_eq!(t.vibration_resonance(), 3200.0);
        assert!(SynthProfile::by_name("bogus").unwrap_err().to_string().contains("source, target"));
    }

    #[test]
    fn characteristic_rates() {
        let s = SynthProfile::source();
        assert_eq!(s.characteristic_frequency(0), None);
        assert!((s.characteristic_frequency(1).unwrap() - 108.0).abs() < 1e-9);
        assert!((s.characteristic_frequency(2).unwrap() - 162.0).abs() < 1e-9);
        assert!((s.characteristic_frequency(3).unwrap() - 72.0).abs() < 1e-9);
        assert!((s.characteristic_frequency(4).unwrap() - 12.0).abs() < 1e-9);
    }

    #[test]
    fn noise_level_follows_mean_fault_power() {
        let p = SynthProfile::source();
        let g = Generator::new(p.clone(), 3).unwrap();
        let n = (p.duration * p.acoustic_rate) as usize;
        let mut measured = 0.0;
        for class in 1..NUM_CLASSES {
            let mut total = 0.0;
            for index in 0..8 {
                let mut rng = stream_rng(99, (class * 100 + index) as u64);
                let ring = g.ring(&g.impacts(class, &mut rng), p.acoustic_rate, p.resonance, n);
                total += ring.iter().map(|v| v * v).sum::<f64>() / n as f64;
            }
            measured += total / 8.0 / (NUM_CLASSES - 1) as f64;
        }
        let expected = p.fault_signal_power();
        assert!((measured / expected - 1.0).abs() < 0.05, "{measured} vs {expected}");
        let snr = 10.0 * (expected / p.noise_sigma().powi(2)).log10();
        assert!((snr - p.snr_db).abs() < 1e-9);
    }

    #[test]
    fn samples_are_deterministic_and_distinct() {
        let g = Generator::new(SynthProfile::target(), 5).unwrap();
        let (a1, v1) = g.sample(1, 3).unwrap();
        let (a2, v2) = g.sample(1, 3).unwrap();
        assert_eq!((&a1, &v1), (&a2, &v2));
        assert_eq!(a1.len(), 42_000);
        assert_eq!(v1.len(), 42_000);
        let (a3, _) = g.sample(1, 4).unwrap();
        assert_ne!(a1, a3);
        let fir_energy: f64 = g.acoustic_path().iter().map(|h| h * h).sum();
        assert!((fir_energy - 1.0).abs() < 1e-12);
    }

    #[test]
    fn profiles_share_the_acoustic_path_but_not_the_noise() {
        let s = Generator::new(SynthProfile::source(), 5).unwrap();
        let t = Generator::new(SynthProfile::target(), 5).unwrap();
        assert_eq!(s.acoustic_path(), t.acoustic_path());
        assert_ne!(s.acoustic_path(), Generator::new(SynthProfile::source(), 6).unwrap().acoustic_path());
        let (_, vs) = s.sample(0, 0).unwrap();
        let (_, vt) = t.sample(0, 0).unwrap();
        assert_ne!(vs.samples()[..100], vt.samples()[..100]);
    }

    #[test]
    fn dataset_files_are_reproducible() {
        let mut p = SynthProfile::target();
        p.duration = 0.1;
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let r1 = synth_dataset(&p, d1.path(), 4, 11).unwrap();
        synth_dataset(&p, d2.path(), 4, 11).unwrap();
        assert_eq!(r1.len(), 20);
        assert_eq!(r1.iter().filter(|r| r.split == Split::Finetune).count(), 5);
        for entry in std::fs::read_dir(d1.path()).unwrap() {
            let name = entry.unwrap().file_name();
            let a = std::fs::read(d1.path().join(&name)).unwrap();
            let b = std::fs::read(d2.path().join(&name)).unwrap();
            assert_eq!(a, b, "{name:?}");
        }
        let loaded = crate::data::manifest::load_manifest(&d1.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(loaded, r1);
    }
}
