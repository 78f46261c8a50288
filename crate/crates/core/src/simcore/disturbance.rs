use std::f64::consts::PI;

use nalgebra::DVector;

use super::SimError;

/// Exogenous input `w_i(t)` applied to every agent.
#[derive(Debug, Clone, PartialEq)]
pub enum DisturbanceSpec {
    Zero,
    /// `amplitude[c] * sign(sin(2 pi t / period + phase))` on channel `c`,
    /// identical for all agents.
    SquareWave {
        amplitude: Vec<f64>,
        period: f64,
        phase: f64,
    },
    /// Piecewise-linear interpolation of samples, held constant outside
    /// the grid. Each value has either `l` entries (broadcast to every
    /// agent) or `N * l` entries (agent-major).
    Samples {
        times: Vec<f64>,
        values: Vec<DVector<f64>>,
    },
}

impl DisturbanceSpec {
    /// Unit-amplitude square wave on `channels` channels.
    pub fn square_wave(channels: usize, period: f64) -> Self {
        Self::SquareWave {
            amplitude: vec![1.0; channels],
            period,
            phase: 0.0,
        }
    }

    pub(crate) fn validate(&self, n_agents: usize, l: usize) -> Result<(), SimError> {
        match self {
            Self::Zero => Ok(()),
            Self::SquareWave {
                amplitude,
                period,
                phase,
            } => {
                if !(*period > 0.0 && period.is_finite()) {
                    return Err(SimError::InvalidParameter(format!(
                        "square wave period must be positive, got {period}"
                    )));
                }
                if !phase.is_finite() || amplitude.iter().any(|a| !a.is_finite()) {
                    return Err(SimError::InvalidParameter(
                        "square wave parameters must be finite".into(),
                    ));
                }
                if amplitude.len() != l {
                    return Err(SimError::DimensionMismatch(format!(
                        "square wave has {} amplitudes, plant has {l} disturbance channels",
                        amplitude.len()
                    )));
                }
                Ok(())
            }
            Self::Samples { times, values } => {
                if times.is_empty() || times.len() != values.len() {
                    return Err(SimError::InvalidParameter(format!(
                        "{} sample times but {} sample values",
                        times.len(),
                        values.len()
                    )));
                }
                if times.windows(2).any(|w| !(w[1] > w[0])) || times.iter().any(|t| !t.is_finite())
                {
                    return Err(SimError::InvalidParameter(
                        "sample times must be finite and strictly increasing".into(),
                    ));
                }
                for v in values {
                    if v.len() != l && v.len() != n_agents * l {
                        return Err(SimError::DimensionMismatch(format!(
                            "disturbance sample has {} entries, expected {l} or {}",
                            v.len(),
                            n_agents * l
                        )));
                    }
                    if v.iter().any(|x| !x.is_finite()) {
                        return Err(SimError::InvalidParameter(
                            "disturbance samples must be finite".into(),
                        ));
                    }
                }
                Ok(())
            }
        }
    }

    /// Times in the open interval `(t0, t1)` where the signal is not
    /// smooth.
    pub(crate) fn breakpoints(&self, t0: f64, t1: f64, out: &mut Vec<f64>) {
        match self {
            Self::Zero => {}
            Self::SquareWave { period, phase, .. } => {
                // sin changes sign at 2 pi t / period + phase = k pi
                let to_t = |k: f64| (k * PI - phase) * period / (2.0 * PI);
                let mut k = ((2.0 * PI * t0 / period + phase) / PI).floor();
                loop {
                    let t = to_t(k);
                    if t >= t1 {
                        break;
                    }
                    if t > t0 {
                        out.push(t);
                    }
                    k += 1.0;
                }
            }
            Self::Samples { times, .. } => {
                out.extend(times.iter().copied().filter(|&t| t > t0 && t < t1));
            }
        }
    }

    /// Writes `w(t)` for all agents into `out` (length `N * l`). `side` is
    /// a time strictly inside the current smooth piece and picks the
    /// branch at a discontinuity.
    pub(crate) fn eval_into(&self, t: f64, side: f64, l: usize, out: &mut DVector<f64>) {
        match self {
            Self::Zero => out.fill(0.0),
            Self::SquareWave {
                amplitude,
                period,
                phase,
            } => {
                let s = (2.0 * PI * side / period + phase).sin();
                let sign = if s > 0.0 {
                    1.0
                } else if s < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                for (i, w) in out.iter_mut().enumerate() {
                    *w = sign * amplitude[i % l];
                }
            }
            Self::Samples { times, values } => {
                let k = times.partition_point(|&s| s <= t);
                let (lo, hi, frac) = if k == 0 {
                    (0, 0, 0.0)
                } else if k == times.len() {
                    (k - 1, k - 1, 0.0)
                } else {
                    (k - 1, k, (t - times[k - 1]) / (times[k] - times[k - 1]))
                };
                let width = values[lo].len();
                for (i, w) in out.iter_mut().enumerate() {
                    let j = if width == l { i % l } else { i };
                    *w = (1.0 - frac) * values[lo][j] + frac * values[hi][j];
                }
            }
        }
    }

    /// `w(t)` using the right-continuous branch.
    pub fn value(&self, t: f64, n_agents: usize, l: usize) -> DVector<f64> {
        let mut out = DVector::zeros(n_agents * l);
        let side = match self {
            Self::SquareWave { period, .. } => t + 1e-9 * period,
            _ => t,
        };
        self.eval_into(t, side, l, &mut out);
        out
    }
}
