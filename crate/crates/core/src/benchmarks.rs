//! The four nonlinear benchmark systems and their seeded simulators.
//!
//! Every system is driven from rest. Inputs `u_t` and innovations `e_t` are
//! i.i.d. standard normal, drawn from two independent ChaCha8 streams of the
//! same seed (stream 0 for `u`, stream 1 for `e`).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BURN_IN: usize = 100;
/// Trajectories leaving `[-1e6, 1e6]` are reported as unstable.
pub const INSTABILITY_BOUND: f64 = 1e6;
pub const RNG_ALGORITHM: &str = "ChaCha8 (stream 0: u, stream 1: e)";

const U_STREAM: u64 = 0;
const E_STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum SystemId {
    S1,
    S2,
    S3,
    S4,
}

impl TryFrom<u8> for SystemId {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(SystemId::S1),
            2 => Ok(SystemId::S2),
            3 => Ok(SystemId::S3),
            4 => Ok(SystemId::S4),
            other => Err(Error::config(
                "system",
                format!("{other} is not one of 1, 2, 3, 4"),
            )),
        }
    }
}

impl From<SystemId> for u8 {
    fn from(s: SystemId) -> u8 {
        match s {
            SystemId::S1 => 1,
            SystemId::S2 => 2,
            SystemId::S3 => 3,
            SystemId::S4 => 4,
        }
    }
}

impl fmt::Display for SystemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", u8::from(*self))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SystemSpec {
    pub id: SystemId,
    pub has_input: bool,
    pub y_lags: usize,
    pub u_lags: usize,
    /// Gain on the unit-variance innovation.
    pub eta_true: f64,
}

impl SystemSpec {
    pub fn new(id: SystemId) -> Self {
        let (has_input, y_lags, u_lags, eta_true) = match id {
            SystemId::S1 => (false, 2, 0, 1.0),
            SystemId::S2 => (false, 1, 0, 1.0),
            SystemId::S3 => (true, 2, 2, 0.22),
            SystemId::S4 => (true, 1, 3, 0.14),
        };
        SystemSpec {
            id,
            has_input,
            y_lags,
            u_lags,
            eta_true,
        }
    }

    pub fn max_lag(&self) -> usize {
        self.y_lags.max(self.u_lags)
    }

    /// `y_t` from histories ordered most-recent-first (`y_hist[0] = y_{t-1}`).
    pub fn step(&self, y_hist: &[f64], u_hist: &[f64], e: f64) -> Result<f64> {
        if y_hist.len() < self.y_lags || u_hist.len() < self.u_lags {
            return Err(Error::Contract(format!(
                "system {} needs {} y lags and {} u lags, got {} and {}",
                self.id,
                self.y_lags,
                self.u_lags,
                y_hist.len(),
                u_hist.len()
            )));
        }
        let y = |k: usize| y_hist[k - 1];
        let u = |k: usize| u_hist[k - 1];
        let value = match self.id {
            SystemId::S1 => (-0.1 * y(1) * y(1)).exp() * (2.0 * y(1) - y(2)) + e,
            SystemId::S2 => {
                let y1 = y(1);
                if y1 < 0.0 {
                    -2.0 * y1 + e
                } else {
                    0.4 * y1 + e
                }
            }
            SystemId::S3 => 0.5 * y(1) - 0.05 * y(2) * y(2) + u(1) * u(1) + 0.8 * u(2) + 0.22 * e,
            SystemId::S4 => {
                let (u1, u2, u3) = (u(1), u(2), u(3));
                0.8 * y(1) + u1 - 0.3 * u1.powi(3) + 0.25 * u1 * u2 - 0.3 * u2 + 0.25 * u2.powi(3)
                    - 0.2 * u2 * u3
                    - 0.4 * u3
                    + 0.14 * e
            }
        };
        Ok(value)
    }
}

pub fn eta_true(id: SystemId) -> f64 {
    SystemSpec::new(id).eta_true
}

/// What drives a simulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Excitation {
    #[default]
    Gaussian,
    /// `u ≡ 0`, `e ≡ 0`.
    Silent,
}

/// Aligned input/output samples of one trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesDataset {
    pub system: SystemId,
    pub seed: u64,
    pub burn_in: usize,
    pub u: Vec<f64>,
    pub y: Vec<f64>,
}

/// Sidecar metadata written next to a dataset CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub system: SystemId,
    #[serde(rename = "N")]
    pub n: usize,
    pub seed: u64,
    pub burn_in: usize,
    pub rng: String,
}

impl TimeSeriesDataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            system: self.system,
            n: self.len(),
            seed: self.seed,
            burn_in: self.burn_in,
            rng: RNG_ALGORITHM.to_string(),
        }
    }

    /// Writes `t,u,y` with 17 significant digits per value.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::with_capacity(self.len() * 56 + 8);
        out.push_str("t,u,y\n");
        for (t, (u, y)) in self.u.iter().zip(&self.y).enumerate() {
            out.push_str(&format!("{t},{u:.16e},{y:.16e}\n"));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn sidecar_path(csv: &Path) -> PathBuf {
        csv.with_extension("json")
    }

    /// CSV plus the JSON sidecar.
    pub fn save(&self, csv: &Path) -> Result<()> {
        self.write_csv(csv)?;
        let meta = serde_json::to_string_pretty(&self.meta())?;
        let side = Self::sidecar_path(csv);
        fs::write(&side, meta + "\n").map_err(|e| Error::io(side, e))
    }

    /// Reads a dataset CSV; the sidecar supplies metadata when present.
    pub fn load(csv: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(csv).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(csv, io),
            other => Error::Data(format!("{}: {other:?}", csv.display())),
        })?;
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["t", "u", "y"] {
            return Err(Error::Data(format!(
                "{}: expected header t,u,y, got {}",
                csv.display(),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let (mut u, mut y) = (Vec::new(), Vec::new());
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let parse = |k: usize| -> Result<f64> {
                rec.get(k)
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .ok_or_else(|| {
                        Error::Data(format!("{}: bad value on row {}", csv.display(), i + 1))
                    })
            };
            u.push(parse(1)?);
            y.push(parse(2)?);
        }
        let side = Self::sidecar_path(csv);
        let meta: Option<DatasetMeta> = match fs::read_to_string(&side) {
            Ok(s) => Some(serde_json::from_str(&s)?),
            Err(_) => None,
        };
        Ok(TimeSeriesDataset {
            system: meta.as_ref().map_or(SystemId::S4, |m| m.system),
            seed: meta.as_ref().map_or(0, |m| m.seed),
            burn_in: meta.as_ref().map_or(0, |m| m.burn_in),
            u,
            y,
        })
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// The unit-variance innovation sequence `e_0, e_1, ...` used by [`simulate`]
/// for `seed`, including burn-in samples.
pub fn innovation_stream(seed: u64, len: usize) -> Vec<f64> {
    let mut rng = stream(seed, E_STREAM);
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// The input sequence used by [`simulate`] for `seed`, including burn-in.
pub fn input_stream(seed: u64, len: usize) -> Vec<f64> {
    let mut rng = stream(seed, U_STREAM);
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}

pub fn simulate(id: SystemId, n: usize, seed: u64, burn_in: usize) -> Result<TimeSeriesDataset> {
    simulate_with(id, n, seed, burn_in, Excitation::Gaussian)
}

pub fn simulate_with(
    id: SystemId,
    n: usize,
    seed: u64,
    burn_in: usize,
    excitation: Excitation,
) -> Result<TimeSeriesDataset> {
    if n == 0 {
        return Err(Error::config("N", "must be at least 1"));
    }
    let spec = SystemSpec::new(id);
    let total = n + burn_in;
    let (u, e) = match excitation {
        Excitation::Gaussian if spec.has_input => {
            (input_stream(seed, total), innovation_stream(seed, total))
        }
        Excitation::Gaussian => (vec![0.0; total], innovation_stream(seed, total)),
        Excitation::Silent => (vec![0.0; total], vec![0.0; total]),
    };
    let lag = spec.max_lag();
    let mut y = vec![0.0; total];
    let mut y_hist = vec![0.0; lag];
    let mut u_hist = vec![0.0; lag];
    for t in 0..total {
        for k in 0..lag {
            y_hist[k] = if t > k { y[t - k - 1] } else { 0.0 };
            u_hist[k] = if t > k { u[t - k - 1] } else { 0.0 };
        }
        let yt = spec.step(&y_hist, &u_hist, e[t])?;
        if !(yt.abs() <= INSTABILITY_BOUND) {
            return Err(Error::Instability {
                system: id.into(),
                step: t,
                value: yt,
            });
        }
        y[t] = yt;
    }
    Ok(TimeSeriesDataset {
        system: id,
        seed,
        burn_in,
        u: u[burn_in..].to_vec(),
        y: y[burn_in..].to_vec(),
    })
}

/// Noise-free one-step predictions `E[y_t | past]` for `t >= max_lag`.
///
/// Returns `(targets, predictions)` aligned.
pub fn optimal_predictions(data: &TimeSeriesDataset) -> Result<(Vec<f64>, Vec<f64>)> {
    let spec = SystemSpec::new(data.system);
    let lag = spec.max_lag();
    let mut targets = Vec::new();
    let mut preds = Vec::new();
    for t in lag..data.len() {
        let y_hist: Vec<f64> = (1..=lag).map(|k| data.y[t - k]).collect();
        let u_hist: Vec<f64> = (1..=lag).map(|k| data.u[t - k]).collect();
        preds.push(spec.step(&y_hist, &u_hist, 0.0)?);
        targets.push(data.y[t]);
    }
    Ok((targets, preds))
}
