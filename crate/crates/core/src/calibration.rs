//! Calibration data: structured driving-scene vectors versus unstructured
//! Gaussian noise, and the forward pass that turns either into an
//! [`ActivationTrace`].

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{ActivationTrace, ModelGraph};
use crate::tensor::Matrix;

pub const CAR_SLOTS: usize = 4;
pub const PED_SLOTS: usize = 2;
/// ego (2) + cars (3 each) + pedestrians (2 each) + light one-hot (3) + light distance.
pub const SCENARIO_WIDTH: usize = 2 + 3 * CAR_SLOTS + 2 * PED_SLOTS + 4;

/// Sample counts used by the calibration-count ablation.
pub const ABLATION_SAMPLE_COUNTS: [usize; 5] = [32, 64, 128, 256, 512];
pub const DEFAULT_SAMPLES: usize = 128;

pub const CALIBRATION_MAGIC: &[u8; 4] = b"LODC";

// Independent ChaCha streams per data source, so no calibration seed can
// reproduce the evaluation set.
const SCENARIO_STREAM: u64 = 1;
const GENERIC_STREAM: u64 = 2;
pub(crate) const EVAL_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Regime {
    Scenario,
    Generic,
}

impl Regime {
    pub fn code(self) -> u8 {
        match self {
            Regime::Scenario => 0,
            Regime::Generic => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Regime::Scenario),
            1 => Some(Regime::Generic),
            _ => None,
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Scenario => "SCENARIO",
            Regime::Generic => "GENERIC",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SCENARIO" => Ok(Regime::Scenario),
            "GENERIC" => Ok(Regime::Generic),
            _ => Err(Error::config(format!("unknown calibration regime `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LightState {
    Red,
    Green,
    None,
}

impl LightState {
    pub fn class(self) -> usize {
        match self {
            LightState::Red => 0,
            LightState::Green => 1,
            LightState::None => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Car {
    pub distance: f64,
    pub bearing: f64,
    pub speed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pedestrian {
    pub distance: f64,
    pub bearing: f64,
}

/// A synthetic driving scene. Distances are in tens of metres, bearings in
/// units of pi radians relative to the ego heading.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub ego_speed: f64,
    pub ego_heading: f64,
    /// Nearest first, at most [`CAR_SLOTS`].
    pub cars: Vec<Car>,
    /// Nearest first, at most [`PED_SLOTS`].
    pub pedestrians: Vec<Pedestrian>,
    pub light: LightState,
    /// Zero when there is no light.
    pub light_distance: f64,
}

impl Scenario {
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        let mut cars: Vec<Car> = (0..rng.random_range(0..=CAR_SLOTS))
            .map(|_| Car {
                distance: rng.random_range(0.2..5.0),
                bearing: rng.random_range(-1.0..1.0),
                speed: rng.random_range(0.0..3.0),
            })
            .collect();
        cars.sort_by(|a, b| a.distance.total_cmp(&b.distance));
        let mut pedestrians: Vec<Pedestrian> = (0..rng.random_range(0..=PED_SLOTS))
            .map(|_| Pedestrian {
                distance: rng.random_range(0.2..3.0),
                bearing: rng.random_range(-1.0..1.0),
            })
            .collect();
        pedestrians.sort_by(|a, b| a.distance.total_cmp(&b.distance));

        let light = match rng.random_range(0..3) {
            0 => LightState::Red,
            1 => LightState::Green,
            _ => LightState::None,
        };
        let light_distance = match light {
            LightState::None => 0.0,
            _ => rng.random_range(0.5..5.0),
        };

        // Ego slows for a red light and for a car close ahead.
        let mut ego_speed: f64 = rng.random_range(0.5..3.0);
        if light == LightState::Red {
            ego_speed = ego_speed.min(0.6 * light_distance - 0.3).max(0.0);
        }
        if let Some(lead) = cars.iter().find(|c| c.bearing.abs() < 0.15) {
            ego_speed = ego_speed.min(lead.distance);
        }
        let ego_heading = rng.random_range(-0.5..0.5);

        Scenario {
            ego_speed,
            ego_heading,
            cars,
            pedestrians,
            light,
            light_distance,
        }
    }

    /// Fixed-width vector; empty slots are zero-filled.
    pub fn encode(&self) -> [f64; SCENARIO_WIDTH] {
        let mut v = [0.0; SCENARIO_WIDTH];
        v[0] = self.ego_speed;
        v[1] = self.ego_heading;
        for (k, c) in self.cars.iter().enumerate() {
            v[2 + 3 * k] = c.distance;
            v[3 + 3 * k] = c.bearing;
            v[4 + 3 * k] = c.speed;
        }
        let ped = 2 + 3 * CAR_SLOTS;
        for (k, p) in self.pedestrians.iter().enumerate() {
            v[ped + 2 * k] = p.distance;
            v[ped + 1 + 2 * k] = p.bearing;
        }
        let light = ped + 2 * PED_SLOTS;
        v[light + self.light.class()] = 1.0;
        v[light + 3] = self.light_distance;
        v
    }

    /// Normalised steering command: counter the heading error and veer away
    /// from nearby road users.
    pub fn steering(&self) -> f64 {
        let avoid: f64 = self
            .cars
            .iter()
            .map(|c| (c.bearing, c.distance))
            .chain(self.pedestrians.iter().map(|p| (p.bearing, p.distance)))
            .map(|(b, d)| -0.4 * b.signum() * (1.0 - b.abs()) * (-d).exp())
            .sum();
        (-0.8 * self.ego_heading + avoid).clamp(-1.0, 1.0)
    }
}

/// Rows of calibration input, tagged with how they were produced.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub samples: Matrix,
    pub regime: Regime,
    pub seed: u64,
}

impl CalibrationSet {
    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.rows() == 0
    }

    pub fn generate(regime: Regime, n: usize, seed: u64) -> Result<Self> {
        match regime {
            Regime::Scenario => generate_scenarios(n, seed),
            Regime::Generic => generate_generic(n, seed),
        }
    }
}

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `n` encoded [`Scenario`]s drawn from a seeded stream.
pub fn generate_scenarios(n: usize, seed: u64) -> Result<CalibrationSet> {
    if n == 0 {
        return Err(Error::precondition("calibration set needs at least one sample"));
    }
    let mut rng = stream_rng(seed, SCENARIO_STREAM);
    let mut data = Vec::with_capacity(n * SCENARIO_WIDTH);
    for _ in 0..n {
        data.extend_from_slice(&Scenario::sample(&mut rng).encode());
    }
    Ok(CalibrationSet {
        samples: Matrix::new(n, SCENARIO_WIDTH, data)?,
        regime: Regime::Scenario,
        seed,
    })
}

/// `n` rows of i.i.d. standard normal entries.
pub fn generate_generic(n: usize, seed: u64) -> Result<CalibrationSet> {
    if n == 0 {
        return Err(Error::precondition("calibration set needs at least one sample"));
    }
    let mut rng = stream_rng(seed, GENERIC_STREAM);
    let data = (0..n * SCENARIO_WIDTH).map(|_| rng.sample(StandardNormal)).collect();
    Ok(CalibrationSet {
        samples: Matrix::new(n, SCENARIO_WIDTH, data)?,
        regime: Regime::Generic,
        seed,
    })
}

/// Input-activation norms of every layer over the calibration samples.
pub fn collect_norms(g: &ModelGraph, c: &CalibrationSet) -> Result<ActivationTrace> {
    Ok(g.forward(&c.samples)?.1)
}

pub fn encode_calibration(c: &CalibrationSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(21 + 8 * c.samples.as_slice().len());
    out.extend_from_slice(CALIBRATION_MAGIC);
    out.push(c.regime.code());
    out.extend_from_slice(&c.seed.to_le_bytes());
    out.extend_from_slice(&(c.samples.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(c.samples.cols() as u32).to_le_bytes());
    for v in c.samples.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_calibration(bytes: &[u8]) -> Result<CalibrationSet> {
    const HEADER: usize = 4 + 1 + 8 + 4 + 4;
    if bytes.len() < HEADER {
        return Err(Error::format(bytes.len(), "truncated calibration header"));
    }
    if &bytes[..4] != CALIBRATION_MAGIC {
        return Err(Error::format(0, "bad magic, expected LODC"));
    }
    let regime = Regime::from_code(bytes[4]).ok_or_else(|| Error::format(4, "unknown regime code"))?;
    let seed = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes"));
    let n = u32::from_le_bytes(bytes[13..17].try_into().expect("4 bytes")) as usize;
    let width = u32::from_le_bytes(bytes[17..21].try_into().expect("4 bytes")) as usize;
    let expected = n
        .checked_mul(width)
        .and_then(|c| c.checked_mul(8))
        .ok_or_else(|| Error::format(13, "payload size overflows"))?;
    let payload = &bytes[HEADER..];
    if payload.len() != expected {
        return Err(Error::format(
            HEADER + payload.len().min(expected),
            format!("payload is {} bytes, header declares {expected}", payload.len()),
        ));
    }
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if let Some(k) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(HEADER + 8 * k, "non-finite calibration value"));
    }
    Ok(CalibrationSet {
        samples: Matrix::new(n, width, data)?,
        regime,
        seed,
    })
}

pub fn save_calibration(c: &CalibrationSet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_calibration(c))?;
    Ok(())
}

pub fn load_calibration(path: impl AsRef<Path>) -> Result<CalibrationSet> {
    decode_calibration(&fs::read(path)?)
}
