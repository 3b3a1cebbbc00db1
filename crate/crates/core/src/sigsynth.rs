//! I/Q frame synthesis.
//!
//! Frames follow the RadioML 2018.01A layout: 1024 complex baseband samples
//! per frame, one modulation and one SNR per frame. Symbols are drawn i.i.d.
//! uniformly from a unit-power constellation at one sample per symbol (no
//! pulse shaping, no fading), then complex AWGN is added with per-component
//! variance `sigma^2 / 2`, where `sigma^2 = P_signal / 10^(snr_db / 10)` and
//! `P_signal` is the mean power of the frame's clean samples.
//!
//! Randomness: `ChaCha20Rng::seed_from_u64(seed)`; symbol indices come from
//! `gen_range(0..order)` and noise from `rand_distr::StandardNormal`, drawn
//! in sample order (symbol, then I noise, then Q noise).

use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Samples per RadioML frame.
pub const FRAME_LEN: usize = 1024;

/// SNR value meaning "no noise injected".
pub const NOISELESS: f64 = f64::INFINITY;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("unsupported modulation: {0}")]
    UnsupportedModulation(String),
    #[error("frame length must be at least 1")]
    EmptyFrame,
    #[error("invalid SNR target: {0}")]
    InvalidSnr(f64),
    #[error("degenerate frame: clean signal has zero power")]
    DegenerateFrame,
}

/// Linear digital modulations supported by the synthesizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModulationKind {
    #[serde(rename = "OOK")]
    Ook,
    #[serde(rename = "BPSK")]
    Bpsk,
    #[serde(rename = "QPSK")]
    Qpsk,
    #[serde(rename = "PSK8")]
    Psk8,
    #[serde(rename = "QAM16")]
    Qam16,
    #[serde(rename = "QAM64")]
    Qam64,
}

impl ModulationKind {
    pub const ALL: [ModulationKind; 6] = [
        ModulationKind::Ook,
        ModulationKind::Bpsk,
        ModulationKind::Qpsk,
        ModulationKind::Psk8,
        ModulationKind::Qam16,
        ModulationKind::Qam64,
    ];

    /// Default modulation set for generated datasets.
    pub const DEFAULT_SET: [ModulationKind; 4] = [
        ModulationKind::Bpsk,
        ModulationKind::Qpsk,
        ModulationKind::Psk8,
        ModulationKind::Qam16,
    ];

    /// Name as it appears in the RadioML class list.
    pub fn name(self) -> &'static str {
        match self {
            ModulationKind::Ook => "OOK",
            ModulationKind::Bpsk => "BPSK",
            ModulationKind::Qpsk => "QPSK",
            ModulationKind::Psk8 => "PSK8",
            ModulationKind::Qam16 => "QAM16",
            ModulationKind::Qam64 => "QAM64",
        }
    }

    pub fn order(self) -> usize {
        match self {
            ModulationKind::Ook | ModulationKind::Bpsk => 2,
            ModulationKind::Qpsk => 4,
            ModulationKind::Psk8 => 8,
            ModulationKind::Qam16 => 16,
            ModulationKind::Qam64 => 64,
        }
    }
}

impl fmt::Display for ModulationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModulationKind {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModulationKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| SynthError::UnsupportedModulation(s.to_string()))
    }
}

/// Unit-mean-power constellation for `kind`.
pub fn constellation(kind: ModulationKind) -> Vec<Complex64> {
    match kind {
        ModulationKind::Ook => vec![Complex64::new(0.0, 0.0), Complex64::new(SQRT_2, 0.0)],
        ModulationKind::Bpsk => vec![Complex64::new(1.0, 0.0), Complex64::new(-1.0, 0.0)],
        ModulationKind::Qpsk => [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)]
            .iter()
            .map(|&(i, q)| Complex64::new(i * FRAC_1_SQRT_2, q * FRAC_1_SQRT_2))
            .collect(),
        ModulationKind::Psk8 => (0..8)
            .map(|k| Complex64::from_polar(1.0, 2.0 * PI * k as f64 / 8.0))
            .collect(),
        ModulationKind::Qam16 => square_qam(4),
        ModulationKind::Qam64 => square_qam(8),
    }
}

/// Square QAM on the odd-integer grid, scaled to unit mean power.
fn square_qam(side: usize) -> Vec<Complex64> {
    let levels: Vec<f64> = (0..side).map(|k| (2 * k) as f64 - (side - 1) as f64).collect();
    // mean of i^2 + q^2 over the grid is 2 * mean(level^2) = 2 (side^2 - 1) / 3
    let scale = (2.0 * ((side * side - 1) as f64) / 3.0).sqrt().recip();
    let mut points = Vec::with_capacity(side * side);
    for &i in &levels {
        for &q in &levels {
            points.push(Complex64::new(i * scale, q * scale));
        }
    }
    points
}

/// One synthesized frame. `samples - clean` is exactly the injected noise.
#[derive(Debug, Clone, PartialEq)]
pub struct IqFrame {
    pub samples: Vec<Complex64>,
    pub clean: Vec<Complex64>,
    pub modulation: ModulationKind,
    /// Target SNR in dB; `NOISELESS` (+inf) when no noise was injected.
    pub snr_db_target: f64,
    pub seed: u64,
}

impl IqFrame {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The injected noise, sample by sample.
    pub fn noise(&self) -> impl Iterator<Item = Complex64> + '_ {
        self.samples.iter().zip(&self.clean).map(|(s, c)| s - c)
    }
}

fn mean_power<I: IntoIterator<Item = Complex64>>(it: I) -> f64 {
    let mut n = 0usize;
    let mut acc = 0.0;
    for z in it {
        acc += z.norm_sqr();
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}

/// Synthesizes `n` samples of `kind` at `snr_db` (`NOISELESS` for none).
pub fn synth_frame(kind: ModulationKind, snr_db: f64, n: usize, seed: u64) -> Result<IqFrame, SynthError> {
    if n == 0 {
        return Err(SynthError::EmptyFrame);
    }
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(SynthError::InvalidSnr(snr_db));
    }
    let points = constellation(kind);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let clean: Vec<Complex64> = (0..n).map(|_| points[rng.random_range(0..points.len())]).collect();

    let samples = if snr_db == NOISELESS {
        clean.clone()
    } else {
        let noise_var = mean_power(clean.iter().copied()) / 10f64.powf(snr_db / 10.0);
        let sd = (noise_var / 2.0).sqrt();
        clean
            .iter()
            .map(|c| {
                let ni: f64 = rng.sample(StandardNormal);
                let nq: f64 = rng.sample(StandardNormal);
                c + Complex64::new(sd * ni, sd * nq)
            })
            .collect()
    };

    Ok(IqFrame {
        samples,
        clean,
        modulation: kind,
        snr_db_target: snr_db,
        seed,
    })
}

/// Measured SNR in dB: clean power over injected-noise power.
///
/// Returns +inf for a noiseless frame.
pub fn measure_snr(frame: &IqFrame) -> Result<f64, SynthError> {
    let signal = mean_power(frame.clean.iter().copied());
    if signal == 0.0 {
        return Err(SynthError::DegenerateFrame);
    }
    let noise = mean_power(frame.noise());
    if noise == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (signal / noise).log10())
}
