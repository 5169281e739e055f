//! The qutrit teleportation protocol: resource states, the multiport Bell
//! measurement, click-pattern bookkeeping, and feed-forward corrections.
//!
//! Two pipeline variants are supported. `Main` expands the measured resource
//! photon into one extra path level before the multiport, after which three
//! "clean" click patterns herald the same Bell projection and Bob needs no
//! active correction. `FeedForward` omits the expansion, accepts every
//! level-resolving click pattern, and hands Bob a pattern-dependent
//! correction that ends in a filtering step on an auxiliary level.

use ndarray::Array2;
use num_complex::Complex64;
use std::f64::consts::PI;
use std::str::FromStr;
use std::sync::Arc;
use thiserror::Error;

use crate::elements::{self, ElementError, ModeUnitary};
use crate::fock::{CreationPoly, DensityOperator, FockError, FockState, ModeLabel, ModeRegister};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Fock(#[from] FockError),
    #[error(transparent)]
    Element(#[from] ElementError),
    #[error("unsupported dimension {0}")]
    BadDimension(u8),
    #[error("invalid state: {0}")]
    BadState(String),
    #[error("internal consistency failure: {0}")]
    InvariantViolation(String),
}

/// A normalized pure state of a d-level system.
#[derive(Debug, Clone, PartialEq)]
pub struct QuditState {
    amps: Vec<Complex64>,
}

impl QuditState {
    /// Builds a state from raw amplitudes, normalizing them.
    pub fn new(amps: Vec<Complex64>) -> Result<Self, ProtocolError> {
        if amps.is_empty() {
            return Err(ProtocolError::BadState("no amplitudes".into()));
        }
        let norm = amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(ProtocolError::BadState("zero norm".into()));
        }
        Ok(Self {
            amps: amps.into_iter().map(|a| a / norm).collect(),
        })
    }

    pub fn computational(k: usize, d: usize) -> Result<Self, ProtocolError> {
        if k >= d {
            return Err(ProtocolError::BadState(format!("level {k} outside 0..{d}")));
        }
        let mut amps = vec![Complex64::new(0.0, 0.0); d];
        amps[k] = Complex64::new(1.0, 0.0);
        Self::new(amps)
    }

    /// `(|0> + e^{i phi1} |1> + e^{i phi2} |2>) / sqrt(3)`.
    pub fn superposition(phi1: f64, phi2: f64) -> Self {
        let amps = vec![
            Complex64::new(1.0, 0.0),
            Complex64::cis(phi1),
            Complex64::cis(phi2),
        ];
        Self::new(amps).expect("superposition amplitudes are nonzero")
    }

    pub fn dim(&self) -> usize {
        self.amps.len()
    }

    pub fn amps(&self) -> &[Complex64] {
        &self.amps
    }

    pub fn overlap(&self, other: &Self) -> Complex64 {
        self.amps
            .iter()
            .zip(other.amps.iter())
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    pub fn density(&self) -> DensityOperator {
        DensityOperator::from_pure(&self.amps).expect("normalized amplitudes")
    }
}

impl FromStr for QuditState {
    type Err = ProtocolError;

    /// Parses comma-separated complex amplitudes such as
    /// `"1,0,0"` or `"0.5, 0.5i, 0.5-0.5i"`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let amps = s
            .split(',')
            .map(|tok| parse_complex(tok.trim()))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(amps)
    }
}

fn parse_complex(tok: &str) -> Result<Complex64, ProtocolError> {
    let bad = || ProtocolError::BadState(format!("cannot parse amplitude '{tok}'"));
    if tok.is_empty() {
        return Err(bad());
    }
    if let Ok(re) = tok.parse::<f64>() {
        return Ok(Complex64::new(re, 0.0));
    }
    if let Some(im_part) = tok.strip_suffix(['i', 'j']) {
        // Split off a real part if one precedes the imaginary term.
        let bytes = im_part.as_bytes();
        let mut split = None;
        for pos in (1..im_part.len()).rev() {
            let c = bytes[pos] as char;
            if (c == '+' || c == '-') && !matches!(bytes[pos - 1] as char, 'e' | 'E') {
                split = Some(pos);
                break;
            }
        }
        let (re_str, im_str) = match split {
            Some(p) => (&im_part[..p], &im_part[p..]),
            None => ("", im_part),
        };
        let re = if re_str.is_empty() {
            0.0
        } else {
            re_str.parse::<f64>().map_err(|_| bad())?
        };
        let im = match im_str {
            "" | "+" => 1.0,
            "-" => -1.0,
            other => other.parse::<f64>().map_err(|_| bad())?,
        };
        return Ok(Complex64::new(re, im));
    }
    Err(bad())
}

/// Index `(shift m, phase n)` of a generalized Bell state `|psi_mn>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BellIndex {
    pub shift: u8,
    pub phase: u8,
}

/// `|psi_mn> = 1/sqrt(d) sum_k w^{kn} |k>_b |k+m mod d>_c` on ports `b`, `c`.
pub fn bell_state(index: BellIndex, d: u8) -> Result<FockState, ProtocolError> {
    if d < 2 || index.shift >= d || index.phase >= d {
        return Err(ProtocolError::BadDimension(d));
    }
    let register = Arc::new(ModeRegister::with_ports(&[("b", d, 1), ("c", d, 1)])?);
    let poly = CreationPoly::build(&register, &bell_monomials(index, d, "b", "c"))?;
    Ok(FockState::vacuum(&register).apply_creation(&poly)?)
}

fn bell_monomials(
    index: BellIndex,
    d: u8,
    left: &str,
    right: &str,
) -> Vec<(Complex64, Vec<(ModeLabel, u8)>)> {
    let scale = 1.0 / (d as f64).sqrt();
    (0..d)
        .map(|k| {
            let phase = Complex64::cis(2.0 * PI * (k * index.phase) as f64 / d as f64);
            (
                phase * scale,
                vec![
                    (ModeLabel::new(left, k), 1),
                    (ModeLabel::new(right, (k + index.shift) % d), 1),
                ],
            )
        })
        .collect()
}

/// Amplitudes of `|psi_mn>` over the `d*d` product basis `|i>|j>`.
pub fn bell_vector(index: BellIndex, d: usize) -> Vec<Complex64> {
    let mut v = vec![Complex64::new(0.0, 0.0); d * d];
    let scale = 1.0 / (d as f64).sqrt();
    for k in 0..d {
        let j = (k + index.shift as usize) % d;
        v[k * d + j] =
            Complex64::cis(2.0 * PI * (k * index.phase as usize) as f64 / d as f64) * scale;
    }
    v
}

/// Weyl operator `X^m Z^n` with `Z|k> = w^k |k>` and `X|k> = |k+1 mod d>`.
pub fn weyl_operator(index: BellIndex, d: u8) -> Result<ModeUnitary, ProtocolError> {
    if d < 2 {
        return Err(ProtocolError::BadDimension(d));
    }
    let dd = d as usize;
    let mut mat = Array2::zeros((dd, dd));
    for k in 0..dd {
        let row = (k + index.shift as usize) % dd;
        mat[[row, k]] = Complex64::cis(2.0 * PI * (k * index.phase as usize) as f64 / dd as f64);
    }
    Ok(ModeUnitary::new(mat)?)
}

/// The twelve states of the four qutrit mutually unbiased bases, labeled
/// `B1-0` through `B4-2`. `B1` is the computational basis; the other three
/// are balanced superpositions with third-root-of-unity phases.
pub fn mub_states() -> Vec<(String, QuditState)> {
    let w = 2.0 * PI / 3.0;
    let mut out = Vec::with_capacity(12);
    for k in 0..3 {
        out.push((format!("B1-{k}"), QuditState::computational(k, 3).unwrap()));
    }
    let b2 = [[0.0, 0.0], [w, 2.0 * w], [2.0 * w, w]];
    let b3 = [[-w, -w], [w, 0.0], [0.0, w]];
    let b4 = [[w, w], [-w, 0.0], [0.0, -w]];
    for (base, table) in [(2, b2), (3, b3), (4, b4)] {
        for (k, [p1, p2]) in table.iter().enumerate() {
            out.push((format!("B{base}-{k}"), QuditState::superposition(*p1, *p2)));
        }
    }
    out
}

/// Unitary embedding of `n` path levels into `n + 1`.
///
/// The first `n` columns spread each level over all `n + 1` outputs with
/// equal support on the complementary levels; the closed form is
/// `J/(n-1) - I` on the `n x n` block, bordered so the matrix stays unitary.
/// For `n = 3` this is simply `J/2 - I` on four levels. The defining
/// property (checked in tests by an independent numerical reconstruction) is
/// that every off-level row sums to the same constant, which is what makes
/// the clean click patterns herald a single Bell projection.
pub fn expansion_embed(n: u8) -> Result<ModeUnitary, ProtocolError> {
    if n < 2 {
        return Err(ProtocolError::BadDimension(n));
    }
    let nn = n as usize;
    let inv = 1.0 / (nn as f64 - 1.0);
    let border = (nn as f64 - 2.0).sqrt() * inv;
    let mut mat = Array2::zeros((nn + 1, nn + 1));
    for j in 0..nn {
        for i in 0..nn {
            mat[[i, j]] = Complex64::new(if i == j { inv - 1.0 } else { inv }, 0.0);
        }
        mat[[nn, j]] = Complex64::new(border, 0.0);
    }
    for i in 0..nn {
        mat[[i, nn]] = Complex64::new(border, 0.0);
    }
    mat[[nn, nn]] = Complex64::new(-inv, 0.0);
    Ok(ModeUnitary::new(mat)?)
}

/// Which pipeline is assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Level expansion on Alice's resource photon; three clean patterns.
    Main,
    /// No expansion; every level-resolving pattern plus Bob-side correction.
    FeedForward,
}

/// Which physical realization of the three-port splitter is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementSet {
    /// Textbook Fourier multiport.
    Ideal,
    /// The hybrid waveplate/partial-splitter network.
    Experimental,
}

/// Bob's conditional operation for one click pattern.
#[derive(Debug, Clone)]
pub enum CorrectionOp {
    /// A Weyl rotation on the logical levels (identity included).
    Weyl(ModeUnitary),
    /// A unitary on `d + 1` levels followed by post-selecting the auxiliary
    /// level empty.
    Filtered(ModeUnitary),
}

/// One accepted detection pattern: `modes[l]` is the detector that must fire
/// for path level `l`, all other measurement-side detectors staying silent.
#[derive(Debug, Clone)]
pub struct ClickPattern {
    /// Port letters by level, e.g. `"aaa"` or `"abx"`.
    pub name: String,
    pub modes: Vec<ModeLabel>,
    /// Set when the heralded projector is a single Bell state.
    pub bell_index: Option<BellIndex>,
    pub correction: CorrectionOp,
}

/// An assembled run: the pre-detection state plus the pattern table.
#[derive(Debug)]
pub struct Pipeline {
    pub dimension: u8,
    pub variant: Variant,
    pub element_set: ElementSet,
    pub state: FockState,
    pub patterns: Vec<ClickPattern>,
}

/// Result of conditioning on one click pattern.
#[derive(Debug, Clone)]
pub struct TeleportOutcome {
    pub pattern: String,
    pub bell_index: Option<BellIndex>,
    /// Joint probability of the pattern and (where applicable) the
    /// correction filter succeeding.
    pub probability: f64,
    pub fidelity: f64,
    pub bob: DensityOperator,
}

#[derive(Debug)]
pub struct TeleportRun {
    pub outcomes: Vec<TeleportOutcome>,
    pub total_probability: f64,
    /// Probability-weighted average fidelity over the accepted patterns.
    pub mean_fidelity: f64,
}

fn measurement_ports(n: usize) -> Vec<&'static str> {
    ["a", "b", "x", "y"][..n].to_vec()
}

fn port_labels(port: &str, levels: u8) -> Vec<ModeLabel> {
    (0..levels).map(|l| ModeLabel::new(port, l)).collect()
}

fn tritter(element_set: ElementSet) -> Result<ModeUnitary, ProtocolError> {
    Ok(match element_set {
        ElementSet::Ideal => elements::qft_multiport(3)?,
        ElementSet::Experimental => elements::hybrid_multiport().transfer()?,
    })
}

fn multiport(n: usize, element_set: ElementSet) -> Result<ModeUnitary, ProtocolError> {
    if n == 3 {
        tritter(element_set)
    } else {
        Ok(elements::qft_multiport(n)?)
    }
}

/// Full-pipeline evolution up to (but excluding) detection.
fn evolve(
    input: &QuditState,
    n: u8,
    variant: Variant,
    element_set: ElementSet,
) -> Result<FockState, ProtocolError> {
    let mp = multiport(n as usize, element_set)?;
    let tritters = vec![mp; n as usize];
    evolve_with(input, n, variant, &tritters)
}

/// Like [`evolve`], but with a caller-supplied splitter per path level.
fn evolve_with(
    input: &QuditState,
    n: u8,
    variant: Variant,
    tritters: &[ModeUnitary],
) -> Result<FockState, ProtocolError> {
    let nn = n as usize;
    let ports = measurement_ports(nn);
    let (b_levels, c_levels) = match variant {
        Variant::Main => (n + 1, n),
        Variant::FeedForward => (n, n + 1),
    };
    let mut port_spec: Vec<(&str, u8, u8)> = Vec::new();
    port_spec.push(("a", n, 1));
    port_spec.push(("b", b_levels, 1));
    port_spec.push(("c", c_levels, 1));
    for anc in &ports[2..] {
        port_spec.push((anc, n, 1));
    }
    let register = Arc::new(ModeRegister::with_ports(&port_spec)?);

    let teleportee = CreationPoly::build(
        &register,
        &input
            .amps()
            .iter()
            .enumerate()
            .map(|(i, &a)| (a, vec![(ModeLabel::new("a", i as u8), 1)]))
            .collect::<Vec<_>>(),
    )?;
    let resource = CreationPoly::build(
        &register,
        &bell_monomials(BellIndex { shift: 0, phase: 0 }, n, "b", "c"),
    )?;
    let mut state = FockState::vacuum(&register)
        .apply_creation(&teleportee)?
        .apply_creation(&resource)?;
    let scale = Complex64::new(1.0 / (n as f64).sqrt(), 0.0);
    for anc in &ports[2..] {
        let poly = CreationPoly::build(
            &register,
            &(0..n)
                .map(|l| (scale, vec![(ModeLabel::new(anc, l), 1)]))
                .collect::<Vec<_>>(),
        )?;
        state = state.apply_creation(&poly)?;
    }

    if variant == Variant::Main {
        state = state.apply_unitary(&expansion_embed(n)?, &port_labels("b", n + 1))?;
    }
    for level in 0..n {
        let targets: Vec<ModeLabel> = ports.iter().map(|p| ModeLabel::new(p, level)).collect();
        state = state.apply_unitary(&tritters[level as usize], &targets)?;
    }
    Ok(state)
}

/// Measurement-side amplitudes `E[i][j]` for each pattern: the amplitude of
/// the pattern firing given `a` at level `i`, `b` at level `j`, and uniform
/// ancillas, with no resource attached. Used to decompose each heralded
/// projector in the Bell basis.
fn heralded_bras(
    n: u8,
    variant: Variant,
    element_set: ElementSet,
    assignments: &[Vec<usize>],
) -> Result<Vec<Array2<Complex64>>, ProtocolError> {
    let nn = n as usize;
    let ports = measurement_ports(nn);
    let b_levels = match variant {
        Variant::Main => n + 1,
        Variant::FeedForward => n,
    };
    let mut port_spec: Vec<(&str, u8, u8)> = vec![("a", n, 1), ("b", b_levels, 1)];
    for anc in &ports[2..] {
        port_spec.push((anc, n, 1));
    }
    let register = Arc::new(ModeRegister::with_ports(&port_spec)?);
    let scale = Complex64::new(1.0 / (n as f64).sqrt(), 0.0);
    let mp = multiport(nn, element_set)?;

    let mut bras = vec![Array2::<Complex64>::zeros((nn, nn)); assignments.len()];
    for i in 0..nn {
        for j in 0..nn {
            let mut state = FockState::basis(
                &register,
                &[
                    (ModeLabel::new("a", i as u8), 1),
                    (ModeLabel::new("b", j as u8), 1),
                ],
            )?;
            for anc in &ports[2..] {
                let poly = CreationPoly::build(
                    &register,
                    &(0..n)
                        .map(|l| (scale, vec![(ModeLabel::new(anc, l), 1)]))
                        .collect::<Vec<_>>(),
                )?;
                state = state.apply_creation(&poly)?;
            }
            if variant == Variant::Main {
                state = state.apply_unitary(&expansion_embed(n)?, &port_labels("b", n + 1))?;
            }
            for level in 0..n {
                let targets: Vec<ModeLabel> =
                    ports.iter().map(|p| ModeLabel::new(p, level)).collect();
                state = state.apply_unitary(&mp, &targets)?;
            }
            for (pat, assignment) in assignments.iter().enumerate() {
                let placements: Vec<(ModeLabel, u8)> = assignment
                    .iter()
                    .enumerate()
                    .map(|(level, &port)| (ModeLabel::new(ports[port], level as u8), 1))
                    .collect();
                bras[pat][[i, j]] = state.amplitude(&placements)?;
            }
        }
    }
    Ok(bras)
}

/// Bell decomposition of a measurement bra; returns the index when a single
/// Bell component carries all the weight.
fn dominant_bell_component(e: &Array2<Complex64>) -> Option<BellIndex> {
    let d = e.nrows();
    let total: f64 = e.iter().map(|z| z.norm_sqr()).sum();
    if total < 1e-20 {
        return None;
    }
    for m in 0..d {
        for p in 0..d {
            let index = BellIndex {
                shift: m as u8,
                phase: p as u8,
            };
            let bell = bell_vector(index, d);
            let mut overlap = Complex64::new(0.0, 0.0);
            for i in 0..d {
                for j in 0..d {
                    overlap += bell[i * d + j].conj() * e[[i, j]];
                }
            }
            if overlap.norm_sqr() / total > 1.0 - 1e-10 {
                return Some(index);
            }
        }
    }
    None
}

/// Factors `N[m][j] = s * delta_m * phi_j` for `m != j` with unit-modulus
/// phase vectors, requiring a vanishing diagonal and equal magnitudes.
fn solve_phase_layers(n_mat: &Array2<Complex64>) -> Option<(Vec<Complex64>, Vec<Complex64>)> {
    let d = n_mat.nrows();
    let max_abs = n_mat.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if max_abs < 1e-16 {
        return None;
    }
    let tol = 1e-9 * max_abs;
    for m in 0..d {
        if n_mat[[m, m]].norm() > tol {
            return None;
        }
    }
    let mut dvec = vec![Complex64::new(0.0, 0.0); d];
    let mut fvec = vec![Complex64::new(0.0, 0.0); d];
    if d == 2 {
        // An antidiagonal 2x2 map factors into phase layers exactly when its
        // two magnitudes agree.
        let m01 = n_mat[[0, 1]].norm();
        let m10 = n_mat[[1, 0]].norm();
        if m01 < tol || m10 < tol || (m01 - m10).abs() > 1e-9 * m01.max(m10) {
            return None;
        }
        return Some((
            vec![Complex64::new(1.0, 0.0), n_mat[[1, 0]] / m10],
            vec![Complex64::new(1.0, 0.0), n_mat[[0, 1]] / m01],
        ));
    } else {
        dvec[0] = Complex64::new(1.0, 0.0);
        for j in 1..d {
            fvec[j] = n_mat[[0, j]];
        }
        let pivot = (2..d).next()?;
        if fvec[pivot].norm() < tol {
            return None;
        }
        dvec[1] = n_mat[[1, pivot]] / fvec[pivot];
        if dvec[1].norm() < 1e-12 {
            return None;
        }
        fvec[0] = n_mat[[1, 0]] / dvec[1];
        if fvec[0].norm() < tol {
            return None;
        }
        for m in 2..d {
            dvec[m] = n_mat[[m, 0]] / fvec[0];
        }
    }
    for m in 0..d {
        for j in 0..d {
            if m == j {
                continue;
            }
            if (dvec[m] * fvec[j] - n_mat[[m, j]]).norm() > 10.0 * tol {
                return None;
            }
        }
    }
    // The unitary correction needs pure phase layers, so the magnitudes must
    // be uniform on each side.
    let dm = dvec[0].norm();
    let fm = fvec.iter().find(|z| z.norm() > 0.0)?.norm();
    if dvec
        .iter()
        .any(|z| (z.norm() - dm).abs() > 1e-9 * dm.max(1.0))
    {
        return None;
    }
    if fvec
        .iter()
        .any(|z| (z.norm() - fm).abs() > 1e-9 * fm.max(1.0))
    {
        return None;
    }
    Some((
        dvec.into_iter().map(|z| z / z.norm()).collect(),
        fvec.into_iter().map(|z| z / z.norm()).collect(),
    ))
}

fn filtered_correction(
    delta: &[Complex64],
    phi: &[Complex64],
    n: u8,
) -> Result<ModeUnitary, ProtocolError> {
    let nn = n as usize;
    let embed = expansion_embed(n)?;
    let diag = |phases: &[Complex64]| -> Array2<Complex64> {
        let mut m = Array2::zeros((nn + 1, nn + 1));
        for i in 0..nn {
            m[[i, i]] = phases[i].conj();
        }
        m[[nn, nn]] = Complex64::new(1.0, 0.0);
        m
    };
    let first = ModeUnitary::new(diag(delta))?;
    let last = ModeUnitary::new(diag(phi))?;
    Ok(first.then(&embed)?.then(&last)?)
}

fn all_assignments(n: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..n {
        let mut next = Vec::with_capacity(out.len() * n);
        for base in &out {
            for port in 0..n {
                let mut v = base.clone();
                v.push(port);
                next.push(v);
            }
        }
        out = next;
    }
    out
}

fn pattern_name(assignment: &[usize], ports: &[&'static str]) -> String {
    assignment
        .iter()
        .map(|&p| ports[p])
        .collect::<Vec<_>>()
        .concat()
}

/// Builds the click-pattern table for a pipeline. Bell indices and
/// corrections are computed from the simulated optics, not assumed.
fn build_patterns(
    n: u8,
    variant: Variant,
    element_set: ElementSet,
    strict: bool,
) -> Result<Vec<ClickPattern>, ProtocolError> {
    let nn = n as usize;
    let ports = measurement_ports(nn);
    let assignments: Vec<Vec<usize>> = match variant {
        Variant::Main => (0..nn).map(|p| vec![p; nn]).collect(),
        Variant::FeedForward => all_assignments(nn),
    };
    let bras = heralded_bras(n, variant, element_set, &assignments)?;

    // Unnormalized Bob response columns for each pattern, from runs on the
    // computational basis.
    let mut responses: Vec<Array2<Complex64>> = vec![Array2::zeros((nn, nn)); assignments.len()];
    if variant == Variant::FeedForward {
        for j in 0..nn {
            let basis_input = QuditState::computational(j, nn)?;
            let state = evolve(&basis_input, n, variant, element_set)?;
            let all_meas: Vec<ModeLabel> = state
                .register()
                .labels()
                .iter()
                .filter(|l| l.port != "c")
                .cloned()
                .collect();
            for (pat, assignment) in assignments.iter().enumerate() {
                let modes: Vec<ModeLabel> = assignment
                    .iter()
                    .enumerate()
                    .map(|(level, &port)| ModeLabel::new(ports[port], level as u8))
                    .collect();
                let discard: Vec<ModeLabel> = all_meas
                    .iter()
                    .filter(|l| !modes.contains(l))
                    .cloned()
                    .collect();
                let (prob, cond) = state.post_select(&modes, &discard)?;
                if let Some(cond) = cond {
                    let scale = prob.sqrt();
                    for m in 0..nn {
                        let amp = cond.amplitude(&[(ModeLabel::new("c", m as u8), 1)])?;
                        responses[pat][[m, j]] = amp * scale;
                    }
                }
            }
        }
    }

    let mut patterns = Vec::with_capacity(assignments.len());
    for (pat, assignment) in assignments.iter().enumerate() {
        let name = pattern_name(assignment, &ports);
        let modes: Vec<ModeLabel> = assignment
            .iter()
            .enumerate()
            .map(|(level, &port)| ModeLabel::new(ports[port], level as u8))
            .collect();
        let bell_index = dominant_bell_component(&bras[pat]);
        let correction = match variant {
            Variant::Main => {
                let index = bell_index.ok_or_else(|| {
                    ProtocolError::InvariantViolation(format!(
                        "pattern {name} does not herald a single Bell projection"
                    ))
                })?;
                // Heralding on <psi_mn| leaves Bob holding X^m Z^{-n} psi.
                let applied = weyl_operator(
                    BellIndex {
                        shift: index.shift,
                        phase: (n - index.phase % n) % n,
                    },
                    n,
                )?;
                CorrectionOp::Weyl(applied.adjoint())
            }
            Variant::FeedForward => match solve_phase_layers(&responses[pat]) {
                Some((delta, phi)) => CorrectionOp::Filtered(filtered_correction(&delta, &phi, n)?),
                None if strict => {
                    return Err(ProtocolError::InvariantViolation(format!(
                        "pattern {name} admits no phase-layer correction"
                    )));
                }
                None => continue,
            },
        };
        patterns.push(ClickPattern {
            name,
            modes,
            bell_index,
            correction,
        });
    }
    Ok(patterns)
}

/// Assembles the teleportation pipeline for a normalized qutrit input.
pub fn assemble_pipeline(
    input: &QuditState,
    variant: Variant,
    element_set: ElementSet,
) -> Result<Pipeline, ProtocolError> {
    if input.dim() != 3 {
        return Err(ProtocolError::BadDimension(input.dim() as u8));
    }
    let state = evolve(input, 3, variant, element_set)?;
    let patterns = build_patterns(3, variant, element_set, true)?;
    Ok(Pipeline {
        dimension: 3,
        variant,
        element_set,
        state,
        patterns,
    })
}

fn run_pipeline(
    input: &QuditState,
    n: u8,
    variant: Variant,
    element_set: ElementSet,
    strict: bool,
) -> Result<TeleportRun, ProtocolError> {
    let state = evolve(input, n, variant, element_set)?;
    let patterns = build_patterns(n, variant, element_set, strict)?;
    condition_on_patterns(&state, &patterns, input, n, strict)
}

/// Conditions an evolved state on each accepted pattern and applies the
/// stored corrections.
fn condition_on_patterns(
    state: &FockState,
    patterns: &[ClickPattern],
    input: &QuditState,
    n: u8,
    strict: bool,
) -> Result<TeleportRun, ProtocolError> {
    let measurement: Vec<ModeLabel> = state
        .register()
        .labels()
        .iter()
        .filter(|l| l.port != "c")
        .cloned()
        .collect();
    let bob_levels = port_labels("c", n);

    let mut outcomes = Vec::with_capacity(patterns.len());
    for pattern in patterns {
        let discard: Vec<ModeLabel> = measurement
            .iter()
            .filter(|l| !pattern.modes.contains(l))
            .cloned()
            .collect();
        let (p1, cond) = state.post_select(&pattern.modes, &discard)?;
        let Some(cond) = cond else {
            if strict {
                return Err(ProtocolError::InvariantViolation(format!(
                    "pattern {} never fires",
                    pattern.name
                )));
            }
            continue;
        };
        let (probability, bob_state) = match &pattern.correction {
            CorrectionOp::Weyl(w) => (p1, cond.apply_unitary(w, &bob_levels)?),
            CorrectionOp::Filtered(w) => {
                let rotated = cond.apply_unitary(w, &port_labels("c", n + 1))?;
                let (p2, filtered) = rotated.post_select(&[], &[ModeLabel::new("c", n)])?;
                let Some(filtered) = filtered else {
                    if strict {
                        return Err(ProtocolError::InvariantViolation(format!(
                            "pattern {} fails its filter with certainty",
                            pattern.name
                        )));
                    }
                    continue;
                };
                (p1 * p2, filtered)
            }
        };
        let rho = bob_state.reduce_to_qudit(&bob_levels)?;
        let fidelity = rho.overlap(input.amps())?;
        outcomes.push(TeleportOutcome {
            pattern: pattern.name.clone(),
            bell_index: pattern.bell_index,
            probability,
            fidelity,
            bob: rho,
        });
    }
    outcomes.sort_by(|a, b| a.pattern.cmp(&b.pattern));
    let total_probability: f64 = outcomes.iter().map(|o| o.probability).sum();
    let mean_fidelity = if total_probability > 0.0 {
        outcomes
            .iter()
            .map(|o| o.probability * o.fidelity)
            .sum::<f64>()
            / total_probability
    } else {
        0.0
    };
    Ok(TeleportRun {
        outcomes,
        total_probability,
        mean_fidelity,
    })
}

/// Runs the full qutrit protocol and conditions on every accepted pattern.
pub fn run_teleport(
    input: &QuditState,
    variant: Variant,
    element_set: ElementSet,
) -> Result<TeleportRun, ProtocolError> {
    if input.dim() != 3 {
        return Err(ProtocolError::BadDimension(input.dim() as u8));
    }
    run_pipeline(input, 3, variant, element_set, true)
}

/// The expanded-level scheme's accepted pattern table with ideal elements,
/// reusable across repeated custom runs.
pub fn clean_patterns() -> Result<Vec<ClickPattern>, ProtocolError> {
    build_patterns(3, Variant::Main, ElementSet::Ideal, true)
}

/// Runs the expanded-level qutrit scheme with one caller-supplied three-port
/// splitter per path level, conditioning on a fixed pattern table. Patterns
/// keep their stored corrections, so the returned fidelities measure how far
/// the supplied hardware drifts from the design the table was built for.
pub fn run_teleport_custom(
    input: &QuditState,
    tritters: &[ModeUnitary],
    patterns: &[ClickPattern],
) -> Result<TeleportRun, ProtocolError> {
    if input.dim() != 3 {
        return Err(ProtocolError::BadDimension(input.dim() as u8));
    }
    if tritters.len() != 3 || tritters.iter().any(|t| t.dim() != 3) {
        return Err(ProtocolError::BadState(
            "expected one 3-mode splitter per path level".into(),
        ));
    }
    let state = evolve_with(input, 3, Variant::Main, tritters)?;
    condition_on_patterns(&state, patterns, input, 3, false)
}

/// The N-dimensional generalization with ideal elements: an N-port Fourier
/// measurement with N - 2 single-photon ancillas, accepting every click
/// pattern whose conditional map admits a phase-layer correction.
///
/// `N = 2` recovers standard qubit teleportation (no ancillas, success 1/2);
/// `N = 3` reproduces [`run_teleport`] with [`Variant::FeedForward`].
pub fn general_scheme(n: u8, input: &QuditState) -> Result<TeleportRun, ProtocolError> {
    if !(2..=4).contains(&n) {
        return Err(ProtocolError::BadDimension(n));
    }
    if input.dim() != n as usize {
        return Err(ProtocolError::BadState(format!(
            "input dimension {} does not match N = {n}",
            input.dim()
        )));
    }
    run_pipeline(input, n, Variant::FeedForward, ElementSet::Ideal, n == 3)
}
