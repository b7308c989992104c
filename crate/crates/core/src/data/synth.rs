//! Synthetic two-gear accelerometer streams.
//!
//! Each channel of gear `g` is a sum of three harmonics,
//!
//! ```text
//! v(t) = Σ_{k=1..3} A · a[g][k] · sin(2π·k·f·t + φ[g][k][channel]) + noise
//! ```
//!
//! where the harmonic amplitudes `a` and phases `φ` are fixed per gear, while
//! the intensity `A` and cycle frequency `f` are drawn per skier. Both gears of
//! a skier share `A` and `f`, so only the waveform shape tells them apart.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::record::{Gear, Record};
use crate::error::{Error, Result};

pub const SAMPLE_RATE_HZ: f64 = 50.0;

/// Harmonic amplitude profile and per-channel phases (radians) of one gear.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GearProfile {
    pub amplitude: [f64; 3],
    pub phase: [[f64; 3]; 3],
}

pub const GEAR2_PROFILE: GearProfile = GearProfile {
    amplitude: [1.0, 0.5, 0.4],
    phase: [[0.0, 1.6, 3.0], [0.4, 2.2, 1.1], [1.3, 0.2, 2.6]],
};

pub const GEAR3_PROFILE: GearProfile = GearProfile {
    amplitude: [1.0, 0.4, 0.5],
    phase: [[0.0, 1.6, 3.0], [2.0, 3.8, 2.7], [0.0, 5.2, 1.3]],
};

pub fn profile(gear: Gear) -> &'static GearProfile {
    match gear {
        Gear::Two => &GEAR2_PROFILE,
        Gear::Three => &GEAR3_PROFILE,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    /// Cycles recorded per gear per skier.
    pub cycles_per_gear: usize,
    pub skiers: usize,
    /// Range of the per-skier amplitude scale `A`.
    pub intensity_range: (f64, f64),
    /// Range of the per-skier cycle frequency `f`, in Hz.
    pub frequency_range: (f64, f64),
    pub noise_std: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            cycles_per_gear: 80,
            skiers: 10,
            intensity_range: (0.6, 1.4),
            frequency_range: (0.7, 1.3),
            noise_std: 0.3,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.cycles_per_gear == 0 || self.skiers == 0 {
            return Err(Error::invalid("cycles-per-gear and skiers must be at least 1"));
        }
        for (name, (lo, hi)) in [("intensity", self.intensity_range), ("frequency", self.frequency_range)] {
            if !(lo > 0.0 && lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::invalid(format!(
                    "{name} range must satisfy 0 < low <= high, got ({lo}, {hi})"
                )));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid(format!("noise-std must be >= 0, got {}", self.noise_std)));
        }
        Ok(())
    }

    /// `key=value` pairs for manifests.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("cycles_per_gear".into(), self.cycles_per_gear.to_string()),
            ("skiers".into(), self.skiers.to_string()),
            ("intensity_min".into(), self.intensity_range.0.to_string()),
            ("intensity_max".into(), self.intensity_range.1.to_string()),
            ("frequency_min".into(), self.frequency_range.0.to_string()),
            ("frequency_max".into(), self.frequency_range.1.to_string()),
            ("noise_std".into(), self.noise_std.to_string()),
        ]
    }

    /// Samples per gear block for a skier cycling at `freq` Hz.
    pub fn block_len(&self, freq: f64) -> usize {
        (self.cycles_per_gear as f64 * SAMPLE_RATE_HZ / freq).round() as usize
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Noise-free value of one channel at time `t` seconds.
pub fn clean_value(gear: Gear, channel: usize, intensity: f64, freq: f64, t: f64) -> f64 {
    let p = profile(gear);
    let mut v = 0.0;
    for k in 0..3 {
        let arg = 2.0 * std::f64::consts::PI * (k + 1) as f64 * freq * t + p.phase[k][channel];
        v += intensity * p.amplitude[k] * arg.sin();
    }
    v
}

/// Skier by skier, a gear-2 block followed by a gear-3 block. Each block
/// starts at a random point of the cycle. Sample indices run 0..N over the
/// whole stream.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<Vec<Record>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..spec.skiers {
        let intensity = draw(&mut rng, spec.intensity_range);
        let freq = draw(&mut rng, spec.frequency_range);
        let n = spec.block_len(freq);
        for gear in Gear::ALL {
            let t0 = rng.random::<f64>() / freq;
            for s in 0..n {
                let t = t0 + s as f64 / SAMPLE_RATE_HZ;
                let mut ch = [0.0; 3];
                for (c, v) in ch.iter_mut().enumerate() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = clean_value(gear, c, intensity, freq, t) + spec.noise_std * z;
                }
                out.push(Record {
                    t: out.len() as u64,
                    ax: ch[0],
                    ay: ch[1],
                    az: ch[2],
                    gear,
                });
            }
        }
    }
    Ok(out)
}
