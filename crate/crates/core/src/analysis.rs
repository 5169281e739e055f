//! Fidelity estimators, measurement settings, benchmark bounds, and the
//! entanglement-witness bookkeeping used to evaluate runs.

use ndarray::Array2;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fock::DensityOperator;
use crate::protocol::QuditState;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid input: {0}")]
    BadInput(String),
    #[error("optimizer failed to converge: {0}")]
    NonConvergence(String),
}

/// `<psi| rho |psi>` of a density operator against a pure target.
pub fn fidelity(rho: &DensityOperator, psi: &QuditState) -> Result<f64, AnalysisError> {
    if rho.dim() != psi.dim() {
        return Err(AnalysisError::DimensionMismatch {
            expected: rho.dim(),
            got: psi.dim(),
        });
    }
    rho.overlap(psi.amps())
        .map_err(|e| AnalysisError::BadInput(e.to_string()))
}

/// One three-outcome measurement setting with outcome eigenvalues.
#[derive(Debug, Clone)]
pub struct MeasurementSetting {
    pub label: String,
    pub outcomes: Vec<QuditState>,
    pub eigenvalues: Vec<f64>,
}

impl MeasurementSetting {
    /// The observable `sum_o lambda_o |o><o|` as a matrix.
    pub fn observable(&self) -> Array2<Complex64> {
        let d = self.outcomes[0].dim();
        let mut m = Array2::zeros((d, d));
        for (state, &ev) in self.outcomes.iter().zip(self.eigenvalues.iter()) {
            for i in 0..d {
                for j in 0..d {
                    m[[i, j]] += state.amps()[i] * state.amps()[j].conj() * ev;
                }
            }
        }
        m
    }
}

/// The three two-level-coherence settings matched to the superposition input
/// `(|0> + e^{i phi1} |1> + e^{i phi2} |2>)/sqrt(3)`.
///
/// Setting `(i, j, k)` measures `{(u_i + u_j)/sqrt(2), (u_i - u_j)/sqrt(2),
/// |k>}` with eigenvalues `(+1, -1, +1)`, where `u_l = e^{i phi_l} |l>`.
/// Averaged over the settings `(0,1,2)`, `(0,2,1)`, `(1,2,0)`, the three
/// observables reproduce the projector onto the input state exactly.
pub fn sigma_settings(phi1: f64, phi2: f64) -> Vec<MeasurementSetting> {
    let phases = [0.0, phi1, phi2];
    let triples = [(0usize, 1usize, 2usize), (0, 2, 1), (1, 2, 0)];
    triples
        .iter()
        .map(|&(i, j, k)| {
            let mut plus = vec![Complex64::new(0.0, 0.0); 3];
            let mut minus = vec![Complex64::new(0.0, 0.0); 3];
            plus[i] = Complex64::cis(phases[i]);
            plus[j] = Complex64::cis(phases[j]);
            minus[i] = Complex64::cis(phases[i]);
            minus[j] = -Complex64::cis(phases[j]);
            MeasurementSetting {
                label: format!("sigma{i}{j}{k}"),
                outcomes: vec![
                    QuditState::new(plus).unwrap(),
                    QuditState::new(minus).unwrap(),
                    QuditState::computational(k, 3).unwrap(),
                ],
                eigenvalues: vec![1.0, -1.0, 1.0],
            }
        })
        .collect()
}

/// Recognizes a balanced superposition input and returns its two relative
/// phases, or `None` for any other amplitude profile.
pub fn superposition_phases(state: &QuditState) -> Option<(f64, f64)> {
    if state.dim() != 3 {
        return None;
    }
    let target = 1.0 / 3f64.sqrt();
    if state
        .amps()
        .iter()
        .any(|a| (a.norm() - target).abs() > 1e-9)
    {
        return None;
    }
    let a0 = state.amps()[0];
    Some(((state.amps()[1] / a0).arg(), (state.amps()[2] / a0).arg()))
}

/// Recognizes a computational-basis input and returns its level.
pub fn computational_level(state: &QuditState) -> Option<usize> {
    let mut level = None;
    for (i, a) in state.amps().iter().enumerate() {
        if a.norm() > 1e-9 {
            if level.is_some() {
                return None;
            }
            level = Some(i);
        }
    }
    level
}

/// Measured counts for one setting, in outcome order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CountRecord {
    pub setting: String,
    pub counts: [u64; 3],
}

/// A point estimate with a one-standard-deviation uncertainty.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub sigma: f64,
}

/// Fidelity of a superposition state from three-setting coincidence counts,
/// `F_s = (n_+ - n_- + n_k) / (n_+ + n_- + n_k)` averaged over settings,
/// with the uncertainty from Poisson-resampled replicas.
pub fn fidelity_from_counts(
    records: &[CountRecord],
    replicas: u32,
    seed: u64,
) -> Result<Estimate, AnalysisError> {
    if records.len() != 3 {
        return Err(AnalysisError::BadInput(format!(
            "expected 3 settings, got {}",
            records.len()
        )));
    }
    if replicas < 2 {
        return Err(AnalysisError::BadInput("need at least 2 replicas".into()));
    }
    let estimate = |counts: &[[f64; 3]; 3]| -> Result<f64, AnalysisError> {
        let mut acc = 0.0;
        for c in counts {
            let total = c[0] + c[1] + c[2];
            if total <= 0.0 {
                return Err(AnalysisError::BadInput("empty setting".into()));
            }
            acc += (c[0] - c[1] + c[2]) / total;
        }
        Ok(acc / 3.0)
    };
    let base: [[f64; 3]; 3] = [
        records[0].counts.map(|c| c as f64),
        records[1].counts.map(|c| c as f64),
        records[2].counts.map(|c| c as f64),
    ];
    let value = estimate(&base)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut replica_values = Vec::with_capacity(replicas as usize);
    for _ in 0..replicas {
        let mut resampled = [[0.0f64; 3]; 3];
        for (s, record) in base.iter().enumerate() {
            for (o, &lambda) in record.iter().enumerate() {
                resampled[s][o] = if lambda > 0.0 {
                    Poisson::new(lambda)
                        .map_err(|e| AnalysisError::BadInput(e.to_string()))?
                        .sample(&mut rng)
                } else {
                    0.0
                };
            }
        }
        match estimate(&resampled) {
            Ok(v) => replica_values.push(v),
            // A replica that empties a setting is discarded.
            Err(_) => continue,
        }
    }
    if replica_values.len() < 2 {
        return Err(AnalysisError::BadInput("all replicas degenerate".into()));
    }
    let n = replica_values.len() as f64;
    let mean: f64 = replica_values.iter().sum::<f64>() / n;
    let var: f64 = replica_values
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n;
    Ok(Estimate {
        value,
        sigma: var.sqrt(),
    })
}

/// The best fidelity reachable with classical measure-and-resend of
/// unknown d-level states: `2 / (d + 1)`.
pub fn classical_bound(d: usize) -> Result<f64, AnalysisError> {
    if d < 2 {
        return Err(AnalysisError::BadInput(format!("dimension {d} below 2")));
    }
    Ok(2.0 / (d as f64 + 1.0))
}

/// The best average squared overlap a two-level subspace can reach on the
/// nine balanced mutually unbiased states, computed by direct optimization
/// over subspace normals with a grid-search cross-check.
pub fn qubit_subspace_bound() -> Result<f64, AnalysisError> {
    let states: Vec<Vec<Complex64>> = crate::protocol::mub_states()
        .into_iter()
        .filter(|(label, _)| !label.starts_with("B1"))
        .map(|(_, q)| q.amps().to_vec())
        .collect();
    debug_assert_eq!(states.len(), 9);

    // Average projection onto the subspace orthogonal to the unit normal
    // (cos a, sin a cos b e^{i p1}, sin a sin b e^{i p2}).
    let objective = |a: f64, b: f64, p1: f64, p2: f64| -> f64 {
        let normal = [
            Complex64::new(a.cos(), 0.0),
            Complex64::cis(p1) * (a.sin() * b.cos()),
            Complex64::cis(p2) * (a.sin() * b.sin()),
        ];
        let leak: f64 = states
            .iter()
            .map(|s| {
                s.iter()
                    .zip(normal.iter())
                    .map(|(x, n)| n.conj() * x)
                    .sum::<Complex64>()
                    .norm_sqr()
            })
            .sum();
        1.0 - leak / states.len() as f64
    };

    let half_pi = std::f64::consts::FRAC_PI_2;
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut grid_best = f64::NEG_INFINITY;
    let mut seed = (0.0, 0.0, 0.0, 0.0);
    let steps = 9;
    for ia in 0..=steps {
        let a = half_pi * ia as f64 / steps as f64;
        for ib in 0..=steps {
            let b = half_pi * ib as f64 / steps as f64;
            for ip1 in 0..steps {
                let p1 = two_pi * ip1 as f64 / steps as f64;
                for ip2 in 0..steps {
                    let p2 = two_pi * ip2 as f64 / steps as f64;
                    let v = objective(a, b, p1, p2);
                    if v > grid_best {
                        grid_best = v;
                        seed = (a, b, p1, p2);
                    }
                }
            }
        }
    }

    // Coordinate descent with shrinking steps.
    let mut point = [seed.0, seed.1, seed.2, seed.3];
    let mut best = grid_best;
    let mut step = half_pi / steps as f64;
    for _ in 0..60 {
        let mut improved = false;
        for dim in 0..4 {
            for dir in [-1.0, 1.0] {
                let mut trial = point;
                trial[dim] += dir * step;
                let v = objective(trial[0], trial[1], trial[2], trial[3]);
                if v > best + 1e-15 {
                    best = v;
                    point = trial;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
            if step < 1e-10 {
                break;
            }
        }
    }

    if (best - grid_best).abs() > 1e-6 {
        return Err(AnalysisError::NonConvergence(format!(
            "grid {grid_best} vs refined {best}"
        )));
    }
    Ok(best)
}

/// Operators entering the two-qutrit witness: the level-population projector
/// and the three `xx`/`yy` two-level coherence pairs, all on the `d*d = 9`
/// dimensional joint space with index `i * 3 + j`.
pub struct WitnessOperators {
    pub population: Array2<Complex64>,
    pub pairs: [(usize, usize); 3],
    pub xx: [Array2<Complex64>; 3],
    pub yy: [Array2<Complex64>; 3],
}

pub fn witness_operators() -> WitnessOperators {
    let pairs = [(0usize, 1usize), (0, 2), (1, 2)];
    let mut population = Array2::zeros((9, 9));
    for k in 0..3 {
        population[[k * 3 + k, k * 3 + k]] = Complex64::new(1.0, 0.0);
    }
    let single = |i: usize, j: usize, imag: bool| -> Array2<Complex64> {
        let mut m = Array2::zeros((3, 3));
        if imag {
            m[[i, j]] = Complex64::new(0.0, -1.0);
            m[[j, i]] = Complex64::new(0.0, 1.0);
        } else {
            m[[i, j]] = Complex64::new(1.0, 0.0);
            m[[j, i]] = Complex64::new(1.0, 0.0);
        }
        m
    };
    let kron = |a: &Array2<Complex64>, b: &Array2<Complex64>| -> Array2<Complex64> {
        Array2::from_shape_fn((9, 9), |(r, c)| a[[r / 3, c / 3]] * b[[r % 3, c % 3]])
    };
    let build = |imag: bool| -> [Array2<Complex64>; 3] {
        let mut out = Vec::with_capacity(3);
        for &(i, j) in &pairs {
            let s = single(i, j, imag);
            out.push(kron(&s, &s));
        }
        out.try_into().unwrap()
    };
    WitnessOperators {
        population,
        pairs,
        xx: build(false),
        yy: build(true),
    }
}

/// Measured expectation values entering the witness fidelity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WitnessExpectations {
    pub population: f64,
    pub xx: [f64; 3],
    pub yy: [f64; 3],
}

/// Fidelity to the maximally entangled pair from seven local expectation
/// values: `F = (P + sum_pairs (xx - yy) / 2) / 3`.
pub fn entanglement_witness_fidelity(e: &WitnessExpectations) -> f64 {
    let coherence: f64 =
        e.xx.iter()
            .zip(e.yy.iter())
            .map(|(x, y)| (x - y) / 2.0)
            .sum();
    (e.population + coherence) / 3.0
}

/// Per-state result inside a full mutually-unbiased-bases scan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MubReportEntry {
    pub label: String,
    pub fidelity: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MubSuiteReport {
    pub entries: Vec<MubReportEntry>,
    pub mean_fidelity: f64,
    pub sigma: f64,
    pub classical_bound: f64,
    pub beats_classical: bool,
    pub qubit_subspace_bound: f64,
    pub beats_qubit_subspace: bool,
}

/// Aggregates per-state fidelities into a suite report and checks them
/// against the classical and two-level-subspace benchmarks.
pub fn mub_suite_report(entries: Vec<MubReportEntry>) -> Result<MubSuiteReport, AnalysisError> {
    if entries.is_empty() {
        return Err(AnalysisError::BadInput("no entries".into()));
    }
    let n = entries.len() as f64;
    let mean_fidelity = entries.iter().map(|e| e.fidelity).sum::<f64>() / n;
    let sigma = entries
        .iter()
        .map(|e| e.sigma * e.sigma)
        .sum::<f64>()
        .sqrt()
        / n;
    let classical = classical_bound(3)?;
    let qubit = qubit_subspace_bound()?;
    Ok(MubSuiteReport {
        mean_fidelity,
        sigma,
        classical_bound: classical,
        beats_classical: mean_fidelity > classical,
        qubit_subspace_bound: qubit,
        beats_qubit_subspace: mean_fidelity > qubit,
        entries,
    })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> Result<f64, AnalysisError> {
    let filtered: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|&(x, y)| (x.ln(), y.ln()))
        .collect();
    if filtered.len() < 2 {
        return Err(AnalysisError::BadInput(
            "need at least two positive points".into(),
        ));
    }
    let n = filtered.len() as f64;
    let mx: f64 = filtered.iter().map(|p| p.0).sum::<f64>() / n;
    let my: f64 = filtered.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = filtered.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx < 1e-18 {
        return Err(AnalysisError::BadInput("degenerate abscissa".into()));
    }
    let sxy: f64 = filtered.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Ok(sxy / sxx)
}
