//! Lumped thermal model of a passively cooled BBU chip.
//!
//! Per slot of length `delta`:
//! `Psi' = max(Psi + lambda delta [mu D + alpha e^(beta Psi) + gamma - sigma (Psi - Psi_amb)], Psi_amb')`.

use std::io::{self, BufRead, Write};

use rand::Rng;
use thiserror::Error;

use crate::rng::seeded;

#[derive(Debug, Error)]
pub enum ThermalError {
    #[error("invalid thermal parameters: {0}")]
    InvalidParams(String),
    #[error("trace parse error at line {line}: {msg}")]
    TraceParse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThermalParams {
    /// Inverse thermal capacitance, degC/J.
    pub lambda: f64,
    /// Dynamic power per unit throughput, W per bit/s.
    pub mu: f64,
    /// Static power scale, W.
    pub alpha: f64,
    /// Static power temperature coefficient, 1/degC.
    pub beta: f64,
    /// Static power offset, W.
    pub gamma: f64,
    /// Slot duration, s.
    pub slot_seconds: f64,
    /// Safe chip temperature limit, degC.
    pub safe_limit: f64,
}

impl Default for ThermalParams {
    fn default() -> Self {
        Self { lambda: 0.007, mu: 0.6e-6, alpha: 0.5, beta: 0.02, gamma: 5.0, slot_seconds: 30.0, safe_limit: 120.0 }
    }
}

impl ThermalParams {
    pub fn validate(&self) -> Result<(), ThermalError> {
        let checks = [
            ("lambda", self.lambda > 0.0),
            ("mu", self.mu > 0.0),
            ("slot_seconds", self.slot_seconds > 0.0),
            ("alpha", self.alpha >= 0.0),
            ("beta", self.beta >= 0.0),
            ("gamma", self.gamma >= 0.0),
            ("safe_limit", self.safe_limit > 0.0),
        ];
        for (name, ok) in checks {
            if !ok {
                return Err(ThermalError::InvalidParams(format!("{name} out of range")));
            }
        }
        Ok(())
    }

    /// `lambda * delta`, degC per W held for one slot.
    #[inline]
    pub fn slot_gain(&self) -> f64 {
        self.lambda * self.slot_seconds
    }
}

/// Generated heat `mu D + alpha e^(beta Psi) + gamma`, W.
#[inline]
pub fn heat_generated(demand: f64, psi: f64, p: &ThermalParams) -> f64 {
    p.mu * demand + p.alpha * (p.beta * psi).exp() + p.gamma
}

/// Next temperature before the ambient floor is applied.
#[inline]
pub fn next_unclamped(psi: f64, ambient: f64, demand: f64, sigma: f64, p: &ThermalParams) -> f64 {
    psi + p.slot_gain() * (heat_generated(demand, psi, p) - sigma * (psi - ambient))
}

/// Recovers `sigma` from an unclamped realized step.
pub fn back_solve_sigma(psi: f64, ambient: f64, demand: f64, psi_next: f64, p: &ThermalParams) -> Option<f64> {
    let gap = psi - ambient;
    if gap.abs() < 1e-9 {
        return None;
    }
    let sigma = (psi + p.slot_gain() * heat_generated(demand, psi, p) - psi_next) / (p.slot_gain() * gap);
    sigma.is_finite().then_some(sigma)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThermalState {
    /// Chip temperature per cell, degC.
    pub chip: Vec<f64>,
    /// Ambient temperature per cell, degC.
    pub ambient: Vec<f64>,
    /// True dissipation efficiency for the current slot, W/degC.
    pub sigma: Vec<f64>,
    pub slot: usize,
}

impl ThermalState {
    /// Chip starts at ambient in slot 0.
    pub fn from_trace(trace: &EnvironmentTrace) -> Self {
        Self { chip: trace.ambient[0].clone(), ambient: trace.ambient[0].clone(), sigma: trace.sigma[0].clone(), slot: 0 }
    }

    pub fn cells(&self) -> usize {
        self.chip.len()
    }
}

/// Ambient temperature and dissipation efficiency for one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotConditions {
    pub ambient: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Advances with the true `state.sigma` and the next slot's conditions.
pub fn step_temperature(
    state: &ThermalState,
    demand: &[f64],
    params: &[ThermalParams],
    next: &SlotConditions,
) -> ThermalState {
    let chip = (0..state.cells())
        .map(|i| {
            let raw = next_unclamped(state.chip[i], state.ambient[i], demand[i], state.sigma[i], &params[i]);
            raw.max(next.ambient[i])
        })
        .collect();
    ThermalState { chip, ambient: next.ambient.clone(), sigma: next.sigma.clone(), slot: state.slot + 1 }
}

/// Agent-side forecast with an estimated `sigma`, without the ambient floor.
pub fn predict_temperature(state: &ThermalState, demand: &[f64], params: &[ThermalParams], sigma_estimate: &[f64]) -> Vec<f64> {
    (0..state.cells())
        .map(|i| next_unclamped(state.chip[i], state.ambient[i], demand[i], sigma_estimate[i], &params[i]))
        .collect()
}

/// Ambient and dissipation sequences for slots `0..=T`, per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentTrace {
    pub ambient: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
    pub mean_ambient: f64,
}

pub const SIGMA_RANGE: (f64, f64) = (0.25, 1.25);

impl EnvironmentTrace {
    /// Draws `slots + 1` slot conditions. Ambient is `mean * u` with
    /// `u ~ U[0.8, 1.2]`, so traces sharing a seed differ only by the mean.
    pub fn generate(cells: usize, slots: usize, mean_ambient: f64, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let mut ambient = Vec::with_capacity(slots + 1);
        let mut sigma = Vec::with_capacity(slots + 1);
        for _ in 0..=slots {
            let u: Vec<f64> = (0..cells).map(|_| rng.random_range(0.8..=1.2)).collect();
            let s: Vec<f64> = (0..cells).map(|_| rng.random_range(SIGMA_RANGE.0..=SIGMA_RANGE.1)).collect();
            ambient.push(u.into_iter().map(|x| x * mean_ambient).collect());
            sigma.push(s);
        }
        Self { ambient, sigma, mean_ambient }
    }

    /// Number of decision slots.
    pub fn slots(&self) -> usize {
        self.ambient.len() - 1
    }

    pub fn cells(&self) -> usize {
        self.ambient.first().map_or(0, Vec::len)
    }

    pub fn conditions(&self, t: usize) -> SlotConditions {
        SlotConditions { ambient: self.ambient[t].clone(), sigma: self.sigma[t].clone() }
    }

    pub fn min_ambient(&self) -> f64 {
        self.ambient.iter().flatten().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "t,cell,ambient,sigma")?;
        for t in 0..self.ambient.len() {
            for i in 0..self.cells() {
                // round-trip exact
                writeln!(w, "{},{},{:?},{:?}", t, i, self.ambient[t][i], self.sigma[t][i])?;
            }
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, ThermalError> {
        let mut rows: Vec<(usize, usize, f64, f64)> = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            let line_no = n + 1;
            if n == 0 {
                if line.trim() != "t,cell,ambient,sigma" {
                    return Err(ThermalError::TraceParse { line: 1, msg: "unexpected header".into() });
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            let err = |msg: &str| ThermalError::TraceParse { line: line_no, msg: msg.into() };
            if parts.len() != 4 {
                return Err(err("expected 4 columns"));
            }
            let t = parts[0].trim().parse().map_err(|_| err("bad t"))?;
            let c = parts[1].trim().parse().map_err(|_| err("bad cell"))?;
            let a = parts[2].trim().parse().map_err(|_| err("bad ambient"))?;
            let s = parts[3].trim().parse().map_err(|_| err("bad sigma"))?;
            rows.push((t, c, a, s));
        }
        let slots = rows.iter().map(|r| r.0).max().map(|m| m + 1).unwrap_or(0);
        let cells = rows.iter().map(|r| r.1).max().map(|m| m + 1).unwrap_or(0);
        if slots < 2 || rows.len() != slots * cells {
            return Err(ThermalError::TraceParse { line: 0, msg: "incomplete trace".into() });
        }
        let mut ambient = vec![vec![f64::NAN; cells]; slots];
        let mut sigma = vec![vec![f64::NAN; cells]; slots];
        for (t, c, a, s) in rows {
            ambient[t][c] = a;
            sigma[t][c] = s;
        }
        if ambient.iter().flatten().chain(sigma.iter().flatten()).any(|v| v.is_nan()) {
            return Err(ThermalError::TraceParse { line: 0, msg: "duplicate or missing rows".into() });
        }
        let mean_ambient = ambient.iter().flatten().sum::<f64>() / (slots * cells) as f64;
        Ok(Self { ambient, sigma, mean_ambient })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(alpha: f64, gamma: f64) -> ThermalParams {
        ThermalParams { alpha, gamma, ..ThermalParams::default() }
    }

    #[test]
    fn heat_examples() {
        assert_eq!(heat_generated(0.0, 50.0, &p(0.0, 5.0)), 5.0);
        assert!((heat_generated(100e6, 50.0, &p(0.0, 0.0)) - 60.0).abs() < 1e-9);
        let q = ThermalParams { alpha: 0.1, beta: 0.03, gamma: 0.0, ..ThermalParams::default() };
        assert!((heat_generated(0.0, 100.0, &q) - 0.1 * 3f64.exp()).abs() < 1e-12);
        assert!((heat_generated(0.0, 100.0, &q) - 2.0086).abs() < 1e-4);
    }

    fn one_cell(psi: f64, amb: f64, sigma: f64) -> ThermalState {
        ThermalState { chip: vec![psi], ambient: vec![amb], sigma: vec![sigma], slot: 0 }
    }

    #[test]
    fn balanced_heat_keeps_temperature() {
        // gamma = sigma * (psi - amb) -> zero net power
        let q = p(0.0, 0.5 * 40.0);
        let s = one_cell(60.0, 20.0, 0.5);
        let next = SlotConditions { ambient: vec![25.0], sigma: vec![0.5] };
        let n = step_temperature(&s, &[0.0], &[q], &next);
        assert!((n.chip[0] - 60.0).abs() < 1e-12);
    }

    #[test]
    fn huge_sigma_clamps_to_ambient() {
        let q = p(0.0, 0.0);
        let s = one_cell(90.0, 20.0, 1e6);
        let next = SlotConditions { ambient: vec![22.0], sigma: vec![0.5] };
        let n = step_temperature(&s, &[0.0], &[q], &next);
        assert_eq!(n.chip[0], 22.0);
    }

    #[test]
    fn hand_evaluated_cooling_step() {
        // lambda delta = 0.21, mu D + gamma = 65 W, sigma = 0.75, Psi = 120, ambient 24
        let q = ThermalParams { alpha: 0.0, gamma: 5.0, ..ThermalParams::default() };
        let s = one_cell(120.0, 24.0, 0.75);
        let next = SlotConditions { ambient: vec![24.0], sigma: vec![0.75] };
        let n = step_temperature(&s, &[100e6], &[q], &next);
        assert!((n.chip[0] - 118.53).abs() < 1e-9);
    }

    #[test]
    fn prediction_matches_unclamped_truth_with_exact_sigma() {
        let q = ThermalParams::default();
        let s = one_cell(100.0, 30.0, 0.6);
        let pred = predict_temperature(&s, &[5e7], &[q], &[0.6]);
        assert_eq!(pred[0], next_unclamped(100.0, 30.0, 5e7, 0.6, &q));
        // overestimating sigma underestimates heating
        let optimistic = predict_temperature(&s, &[5e7], &[q], &[0.9]);
        assert!(optimistic[0] < pred[0]);
    }

    #[test]
    fn back_solve_inverts_step() {
        let q = ThermalParams::default();
        let next = next_unclamped(95.0, 28.0, 7e7, 0.83, &q);
        let s = back_solve_sigma(95.0, 28.0, 7e7, next, &q).unwrap();
        assert!((s - 0.83).abs() < 1e-9);
        assert!(back_solve_sigma(28.0, 28.0, 7e7, 30.0, &q).is_none());
    }

    #[test]
    fn trace_ranges_and_round_trip() {
        let t = EnvironmentTrace::generate(3, 20, 24.0, 9);
        assert_eq!(t.slots(), 20);
        for (a, s) in t.ambient.iter().flatten().zip(t.sigma.iter().flatten()) {
            assert!((0.8 * 24.0..=1.2 * 24.0).contains(a));
            assert!((0.25..=1.25).contains(s));
        }
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = EnvironmentTrace::read_csv(io::Cursor::new(buf)).unwrap();
        assert_eq!(back.ambient, t.ambient);
        assert_eq!(back.sigma, t.sigma);
    }

    #[test]
    fn traces_with_same_seed_scale_with_mean() {
        let a = EnvironmentTrace::generate(2, 5, 16.0, 4);
        let b = EnvironmentTrace::generate(2, 5, 32.0, 4);
        assert_eq!(a.sigma, b.sigma);
        for (x, y) in a.ambient.iter().flatten().zip(b.ambient.iter().flatten()) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn malformed_trace_reports_line() {
        let text = "t,cell,ambient,sigma\n0,0,20.0,0.5\n1,0,oops,0.5\n";
        match EnvironmentTrace::read_csv(io::Cursor::new(text)) {
            Err(ThermalError::TraceParse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
