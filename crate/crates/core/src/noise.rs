//! Source, detector, and distinguishability imperfections.
//!
//! The model covers multi-pair emission from the two pair sources, per-photon
//! detection inefficiency with threshold detectors, partial distinguishability
//! through internal-mode vectors, splitter-ratio perturbation, and residual
//! path phases. Emission blocks with different photon numbers never interfere
//! in click statistics, so each block is expanded, evolved, and histogrammed
//! separately; detector efficiency and pair probability then enter through
//! closed-form reweighting, which keeps parameter grids cheap.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{self, AnalysisError, MeasurementSetting};
use crate::elements::{self, ElementError, ModeUnitary};
use crate::fock::{CreationPoly, FockError, FockState, ModeLabel, ModeRegister, MAX_PHOTONS};
use crate::protocol::{self, ProtocolError, QuditState};

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error(transparent)]
    Fock(#[from] FockError),
    #[error(transparent)]
    Element(#[from] ElementError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

/// Imperfection parameters of the photonic setup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseParams {
    /// Pair-generation probability per source per pulse.
    pub p: f64,
    /// Per-photon detection efficiency, collection included.
    pub p_d: f64,
    /// Pairwise indistinguishability of photons from the same crystal.
    pub v_same: f64,
    /// Pairwise indistinguishability of photons from different crystals.
    pub v_cross: f64,
    /// Half-width of the uniform perturbation on the partial splitter's
    /// horizontal reflectivity, as a fraction of its design value.
    pub r_h_deviation: f64,
    /// Standard deviation of residual path phases, in radians.
    pub phase_noise: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            p: 0.013,
            p_d: 0.16,
            v_same: 0.92,
            v_cross: 0.82,
            r_h_deviation: 0.0,
            phase_noise: 0.0,
        }
    }
}

impl NoiseParams {
    pub fn validate(&self) -> Result<(), NoiseError> {
        let probs = [
            ("p", self.p),
            ("p_d", self.p_d),
            ("v_same", self.v_same),
            ("v_cross", self.v_cross),
        ];
        for (name, value) in probs {
            if !(0.0..=1.0).contains(&value) {
                return Err(NoiseError::InvalidParam(format!(
                    "{name} = {value} outside [0, 1]"
                )));
            }
        }
        if !(0.0..=1.0 / 3.0).contains(&self.r_h_deviation) {
            return Err(NoiseError::InvalidParam(format!(
                "r_h_deviation = {} outside [0, 1/3]",
                self.r_h_deviation
            )));
        }
        if !self.phase_noise.is_finite() || self.phase_noise < 0.0 {
            return Err(NoiseError::InvalidParam(format!(
                "phase_noise = {} must be finite and non-negative",
                self.phase_noise
            )));
        }
        Ok(())
    }
}

fn check_pair_probability(p: f64) -> Result<(), NoiseError> {
    if !(0.0..0.1).contains(&p) {
        return Err(NoiseError::InvalidParam(format!(
            "pair probability {p} outside [0, 0.1)"
        )));
    }
    Ok(())
}

/// Which pair source to expand.
#[derive(Debug, Clone)]
pub enum SourceKind {
    /// The path-entangled resource source: pairs across ports `b` and `c`,
    /// correlated level by level.
    Entangled3,
    /// The teleportee/ancilla source: a product pair on ports `a` and `x`,
    /// with the `a` photon prepared in `input` and the `x` photon balanced.
    Pair2 { input: QuditState },
}

/// Truncated emission expansion of one pair source: the n-pair term carries
/// amplitude `p^(n/2)` relative to vacuum, renormalized after truncation.
pub fn spdc_source(p: f64, kind: &SourceKind, truncation: u32) -> Result<FockState, NoiseError> {
    check_pair_probability(p)?;
    if 2 * truncation > MAX_PHOTONS {
        return Err(NoiseError::InvalidParam(format!(
            "truncation {truncation} exceeds the photon cutoff"
        )));
    }
    let third = Complex64::new(1.0 / 3f64.sqrt(), 0.0);
    let (register, terms) = match kind {
        SourceKind::Entangled3 => {
            let register = Arc::new(ModeRegister::with_ports(&[("b", 3, 1), ("c", 3, 1)])?);
            let terms: Vec<(Complex64, Vec<(ModeLabel, u8)>)> = (0..3u8)
                .map(|k| {
                    (
                        third,
                        vec![(ModeLabel::new("b", k), 1), (ModeLabel::new("c", k), 1)],
                    )
                })
                .collect();
            (register, terms)
        }
        SourceKind::Pair2 { input } => {
            if input.dim() != 3 {
                return Err(NoiseError::InvalidParam(format!(
                    "teleportee dimension {} is not 3",
                    input.dim()
                )));
            }
            let register = Arc::new(ModeRegister::with_ports(&[("a", 3, 1), ("x", 3, 1)])?);
            let mut terms = Vec::with_capacity(9);
            for (l, &amp) in input.amps().iter().enumerate() {
                for m in 0..3u8 {
                    terms.push((
                        amp * third,
                        vec![
                            (ModeLabel::new("a", l as u8), 1),
                            (ModeLabel::new("x", m), 1),
                        ],
                    ));
                }
            }
            (register, terms)
        }
    };
    let poly = CreationPoly::build(&register, &terms)?;
    let vacuum = FockState::vacuum(&register);
    let mut powers = vec![vacuum.clone()];
    for _ in 1..=truncation {
        powers.push(powers.last().unwrap().apply_creation(&poly)?);
    }
    let lambda = p.sqrt();
    let mut weights = Vec::with_capacity(powers.len());
    let mut coeff = 1.0;
    for n in 0..powers.len() {
        if n > 0 {
            coeff *= lambda / n as f64;
        }
        weights.push(Complex64::new(coeff, 0.0));
    }
    let parts: Vec<(Complex64, &FockState)> = weights.into_iter().zip(powers.iter()).collect();
    Ok(FockState::superpose(&parts)?.normalized()?)
}

/// One photon-loss record: which photons were lost per mode, the probability
/// of that record, and the normalized surviving state.
#[derive(Debug, Clone)]
pub struct LossBranch {
    pub lost: Vec<u8>,
    pub probability: f64,
    pub state: FockState,
}

/// Exact expansion of per-photon loss: every photon survives independently
/// with probability `p_d`, and coherence survives within each loss record.
/// The records partition probability: branch probabilities sum to one.
pub fn apply_loss(state: &FockState, p_d: f64) -> Result<Vec<LossBranch>, NoiseError> {
    if !(0.0..=1.0).contains(&p_d) {
        return Err(NoiseError::InvalidParam(format!(
            "p_d = {p_d} outside [0, 1]"
        )));
    }
    let register = state.register();
    let mut branches: BTreeMap<Vec<u8>, BTreeMap<Vec<u8>, Complex64>> = BTreeMap::new();
    for (occ, amp) in state.terms() {
        let occupied: Vec<usize> = (0..occ.len()).filter(|&i| occ[i] > 0).collect();
        let mut lost = vec![0u8; occ.len()];
        loop {
            let mut weight = 1.0f64;
            for &i in &occupied {
                let n = occ[i];
                let l = lost[i];
                weight *= binomial(n, l) * p_d.powi((n - l) as i32) * (1.0 - p_d).powi(l as i32);
            }
            if weight > 0.0 {
                let surviving: Vec<u8> =
                    occ.iter().zip(lost.iter()).map(|(&n, &l)| n - l).collect();
                *branches
                    .entry(lost.clone())
                    .or_default()
                    .entry(surviving)
                    .or_default() += amp * weight.sqrt();
            }
            // Odometer over loss counts of the occupied modes.
            let mut carried = true;
            for &i in &occupied {
                if lost[i] < occ[i] {
                    lost[i] += 1;
                    carried = false;
                    break;
                }
                lost[i] = 0;
            }
            if carried {
                break;
            }
        }
    }
    let mut out = Vec::with_capacity(branches.len());
    for (lost, amps) in branches {
        let parts: Vec<(Complex64, FockState)> = amps
            .into_iter()
            .map(|(occ, amp)| {
                let placements: Vec<(ModeLabel, u8)> = occ
                    .iter()
                    .enumerate()
                    .filter(|(_, &n)| n > 0)
                    .map(|(i, &n)| (register.labels()[i].clone(), n))
                    .collect();
                FockState::basis(register, &placements).map(|s| (amp, s))
            })
            .collect::<Result<_, _>>()?;
        let refs: Vec<(Complex64, &FockState)> = parts.iter().map(|(a, s)| (*a, s)).collect();
        let raw = FockState::superpose(&refs)?;
        let probability = raw.norm_sqr();
        if probability < 1e-300 {
            continue;
        }
        out.push(LossBranch {
            lost,
            probability,
            state: raw.normalized()?,
        });
    }
    Ok(out)
}

fn binomial(n: u8, k: u8) -> f64 {
    let mut acc = 1.0f64;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

/// Two unit internal-mode vectors whose overlap magnitude is `sqrt(v)`, so
/// two photons carrying them interfere with visibility `v`.
pub fn overlap_vectors(v: f64) -> Result<[Vec<Complex64>; 2], NoiseError> {
    if !(0.0..=1.0).contains(&v) {
        return Err(NoiseError::InvalidParam(format!("v = {v} outside [0, 1]")));
    }
    Ok([
        vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)],
        vec![
            Complex64::new(v.sqrt(), 0.0),
            Complex64::new((1.0 - v).sqrt(), 0.0),
        ],
    ])
}

/// Coherence time of the filtered single photons: 450 fs at 3 nm bandwidth,
/// scaling inversely with bandwidth.
pub fn coherence_time_fs(bandwidth_nm: f64) -> Result<f64, NoiseError> {
    if bandwidth_nm <= 0.0 || !bandwidth_nm.is_finite() {
        return Err(NoiseError::InvalidParam(format!(
            "bandwidth {bandwidth_nm} nm must be positive"
        )));
    }
    Ok(450.0 * 3.0 / bandwidth_nm)
}

/// Two-photon coincidence probability against relative delay on a balanced
/// splitter, with a Gaussian mode overlap `v_max * exp(-(tau/tau_c)^2)`.
/// Distinguishable photons coincide with probability 1/2.
pub fn hom_scan(
    delays_fs: &[f64],
    bandwidth_nm: f64,
    v_max: f64,
) -> Result<Vec<(f64, f64)>, NoiseError> {
    if !(0.0..=1.0).contains(&v_max) {
        return Err(NoiseError::InvalidParam(format!(
            "v_max = {v_max} outside [0, 1]"
        )));
    }
    let tau_c = coherence_time_fs(bandwidth_nm)?;
    Ok(delays_fs
        .iter()
        .map(|&tau| {
            let overlap = v_max * (-(tau / tau_c) * (tau / tau_c)).exp();
            (tau, 0.5 * (1.0 - overlap))
        })
        .collect())
}

/// Dip visibility of a coincidence curve: one minus the ratio of the lowest
/// to the highest coincidence value. The scan must extend far enough past
/// the dip for the highest value to sit on the baseline.
pub fn extract_visibility(curve: &[(f64, f64)]) -> Result<f64, NoiseError> {
    if curve.len() < 2 {
        return Err(NoiseError::InvalidParam(
            "need at least two scan points".into(),
        ));
    }
    let mut dip = f64::INFINITY;
    let mut baseline = f64::NEG_INFINITY;
    for &(_, c) in curve {
        dip = dip.min(c);
        baseline = baseline.max(c);
    }
    if baseline <= 0.0 {
        return Err(NoiseError::InvalidParam(
            "curve has no positive baseline".into(),
        ));
    }
    Ok(1.0 - dip / baseline)
}

// ---------------------------------------------------------------------------
// Emission-block engine
// ---------------------------------------------------------------------------

/// One photon instance inside an emission block.
#[derive(Debug, Clone)]
struct Photon {
    port: usize,
    orbit: usize,
    /// Sparse internal-mode vector within the orbit's slice space.
    internal: Vec<(usize, f64)>,
}

/// One pair emission: a sum of placements of its two photons over levels.
#[derive(Debug, Clone)]
struct Emission {
    terms: Vec<(Complex64, Vec<(usize, u8)>)>,
}

/// A fixed-pair-number emission block before internal-mode expansion.
#[derive(Debug, Clone)]
struct Block {
    coeff: f64,
    photons: Vec<Photon>,
    emissions: Vec<Emission>,
}

/// Port layout shared by all groups of a scenario.
#[derive(Debug, Clone)]
struct PortLayout {
    names: Vec<&'static str>,
    levels: Vec<u8>,
    orbit_of_port: Vec<usize>,
}

impl PortLayout {
    fn spans(&self) -> Vec<(usize, u8)> {
        let mut spans = Vec::new();
        for (port, &levels) in self.levels.iter().enumerate() {
            for level in 0..levels {
                spans.push((port, level));
            }
        }
        spans
    }

    fn span_index(&self, port: usize, level: u8) -> usize {
        let mut idx = 0;
        for p in 0..port {
            idx += self.levels[p] as usize;
        }
        idx + level as usize
    }
}

/// Unit internal vectors realizing pairwise overlaps `sqrt(v_same)` within a
/// crystal and `sqrt(v_cross)` across crystals. Uses a shared-plus-own mode
/// construction when it applies exactly; otherwise factorizes the target
/// Gram matrix with negative eigenvalues clipped to zero.
fn internal_vectors(
    crystals: &[u8],
    v_same: f64,
    v_cross: f64,
) -> Result<Vec<Vec<(usize, f64)>>, NoiseError> {
    let n = crystals.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    if n == 1 {
        return Ok(vec![vec![(0, 1.0)]]);
    }
    let s = v_same.sqrt();
    let c = v_cross.sqrt();
    let distinct: BTreeSet<u8> = crystals.iter().copied().collect();
    let single_crystal = distinct.len() == 1;
    if single_crystal || c <= s {
        // Shared slice 0, one slice per multiply-occupied crystal, then one
        // own slice per photon.
        let shared = if single_crystal { s } else { c };
        let mut counts: BTreeMap<u8, usize> = BTreeMap::new();
        for &cr in crystals {
            *counts.entry(cr).or_default() += 1;
        }
        let mut cluster_slice: BTreeMap<u8, usize> = BTreeMap::new();
        let mut next = 1usize;
        if !single_crystal {
            for (&cr, &count) in &counts {
                if count >= 2 {
                    cluster_slice.insert(cr, next);
                    next += 1;
                }
            }
        }
        let mut vectors = Vec::with_capacity(n);
        for &cr in crystals {
            let mut v = Vec::with_capacity(3);
            if shared > 0.0 {
                v.push((0, shared.sqrt()));
            }
            let own_weight = if let Some(&slice) = cluster_slice.get(&cr) {
                if s - shared > 0.0 {
                    v.push((slice, (s - shared).sqrt()));
                }
                1.0 - s
            } else {
                1.0 - shared
            };
            if own_weight > 0.0 {
                v.push((next, own_weight.sqrt()));
                next += 1;
            }
            vectors.push(v);
        }
        return Ok(vectors);
    }
    // Fallback: nearest positive-semidefinite completion of the target Gram.
    let mut gram = Array2::<Complex64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let g = if i == j {
                1.0
            } else if crystals[i] == crystals[j] {
                s
            } else {
                c
            };
            gram[[i, j]] = Complex64::new(g, 0.0);
        }
    }
    let (eigs, vecs) = crate::linalg::hermitian_eigs(&gram);
    let mut vectors = Vec::with_capacity(n);
    for i in 0..n {
        let mut v = Vec::new();
        let mut norm_sqr = 0.0;
        for (k, &lambda) in eigs.iter().enumerate() {
            if lambda <= 0.0 {
                continue;
            }
            let comp = lambda.sqrt() * vecs[[i, k]].conj();
            debug_assert!(comp.im.abs() < 1e-9);
            if comp.re.abs() > 1e-12 {
                v.push((k, comp.re));
                norm_sqr += comp.re * comp.re;
            }
        }
        if norm_sqr < 1e-12 {
            return Err(NoiseError::InvalidParam(
                "distinguishability Gram matrix collapsed under clipping".into(),
            ));
        }
        let scale = norm_sqr.sqrt();
        for comp in &mut v {
            comp.1 /= scale;
        }
        vectors.push(v);
    }
    Ok(vectors)
}

/// Expand a block over internal-mode components, group the terms by the
/// conserved per-orbit slice occupation, and build one initial state per
/// group on a register holding only that group's occupied slices.
fn block_states(layout: &PortLayout, block: &Block) -> Result<Vec<FockState>, NoiseError> {
    let sizes: Vec<usize> = block.photons.iter().map(|p| p.internal.len()).collect();
    type Profile = Vec<(usize, usize, u8)>;
    let mut groups: BTreeMap<Profile, Vec<(f64, Vec<usize>)>> = BTreeMap::new();
    let mut choice = vec![0usize; sizes.len()];
    loop {
        let mut weight = block.coeff;
        let mut profile: BTreeMap<(usize, usize), u8> = BTreeMap::new();
        for (i, photon) in block.photons.iter().enumerate() {
            let (slice, comp) = photon.internal[choice[i]];
            weight *= comp;
            *profile.entry((photon.orbit, slice)).or_default() += 1;
        }
        let key: Profile = profile
            .into_iter()
            .map(|((orbit, slice), count)| (orbit, slice, count))
            .collect();
        groups
            .entry(key)
            .or_default()
            .push((weight, choice.clone()));

        let mut carried = true;
        for i in 0..sizes.len() {
            choice[i] += 1;
            if choice[i] < sizes[i] {
                carried = false;
                break;
            }
            choice[i] = 0;
        }
        if carried || sizes.is_empty() {
            break;
        }
    }

    let n_orbits = layout.orbit_of_port.iter().max().map_or(0, |&m| m + 1);
    let mut states = Vec::with_capacity(groups.len());
    for (profile, members) in groups {
        let mut occupied: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n_orbits];
        for &(orbit, slice, _) in &profile {
            occupied[orbit].insert(slice);
        }
        let slice_maps: Vec<BTreeMap<usize, u8>> = occupied
            .iter()
            .map(|set| {
                set.iter()
                    .enumerate()
                    .map(|(idx, &slice)| (slice, idx as u8))
                    .collect()
            })
            .collect();
        let port_spec: Vec<(&str, u8, u8)> = layout
            .names
            .iter()
            .enumerate()
            .map(|(port, &name)| {
                let dim = occupied[layout.orbit_of_port[port]].len().max(1) as u8;
                (name, layout.levels[port], dim)
            })
            .collect();
        let register = Arc::new(ModeRegister::with_ports(&port_spec)?);
        let vacuum = FockState::vacuum(&register);

        let mut parts: Vec<(Complex64, FockState)> = Vec::with_capacity(members.len());
        for (weight, choice) in members {
            let mut state = vacuum.clone();
            for emission in &block.emissions {
                let terms: Vec<(Complex64, Vec<(ModeLabel, u8)>)> = emission
                    .terms
                    .iter()
                    .map(|(coeff, placements)| {
                        let labels = placements
                            .iter()
                            .map(|&(photon_idx, level)| {
                                let photon = &block.photons[photon_idx];
                                let slice = photon.internal[choice[photon_idx]].0;
                                let internal = slice_maps[photon.orbit][&slice];
                                (
                                    ModeLabel::with_internal(
                                        layout.names[photon.port],
                                        level,
                                        internal,
                                    ),
                                    1,
                                )
                            })
                            .collect();
                        (*coeff, labels)
                    })
                    .collect();
                let poly = CreationPoly::build(&register, &terms)?;
                state = state.apply_creation(&poly)?;
            }
            parts.push((Complex64::new(weight, 0.0), state));
        }
        let refs: Vec<(Complex64, &FockState)> = parts.iter().map(|(w, s)| (*w, s)).collect();
        states.push(FockState::superpose(&refs)?);
    }
    Ok(states)
}

type Hist = BTreeMap<Vec<u8>, f64>;

fn span_histogram(state: &FockState, layout: &PortLayout, hist: &mut Hist) {
    let register = state.register();
    let spans: Vec<Vec<usize>> = layout
        .spans()
        .iter()
        .map(|&(port, level)| register.span(layout.names[port], level))
        .collect();
    for (occ, amp) in state.terms() {
        let key: Vec<u8> = spans
            .iter()
            .map(|ixs| ixs.iter().map(|&i| occ[i]).sum())
            .collect();
        *hist.entry(key).or_default() += amp.norm_sqr();
    }
}

/// Probability that exactly the `required` spans click under per-photon
/// efficiency encoded as `miss_pow[k] = (1 - p_d)^k`.
fn click_probability(counts: &[u8], required: &[usize], miss_pow: &[f64]) -> f64 {
    let mut prob = 1.0;
    for (idx, &count) in counts.iter().enumerate() {
        let miss = miss_pow[count as usize];
        prob *= if required.contains(&idx) {
            1.0 - miss
        } else {
            miss
        };
        if prob == 0.0 {
            return 0.0;
        }
    }
    prob
}

// ---------------------------------------------------------------------------
// Teleportation scenario
// ---------------------------------------------------------------------------

const CRYSTAL_RESOURCE: u8 = 1;
const CRYSTAL_TELEPORTEE: u8 = 2;

fn teleport_layout() -> PortLayout {
    PortLayout {
        names: vec!["a", "b", "c", "x"],
        levels: vec![3, 4, 3, 3],
        // Measurement-side ports interfere with each other; Bob's photons
        // only ever meet other Bob photons.
        orbit_of_port: vec![0, 0, 1, 0],
    }
}

fn teleport_block(
    input: &QuditState,
    n_resource: u32,
    n_teleportee: u32,
    v_same: f64,
    v_cross: f64,
) -> Result<Block, NoiseError> {
    let mut photons = Vec::new();
    let mut emissions = Vec::new();
    let third = Complex64::new(1.0 / 3f64.sqrt(), 0.0);
    let mut bsm_crystals = Vec::new();
    let mut bob_crystals = Vec::new();
    let mut bsm_members = Vec::new();
    let mut bob_members = Vec::new();

    for _ in 0..n_resource {
        let b_idx = photons.len();
        photons.push(Photon {
            port: 1,
            orbit: 0,
            internal: Vec::new(),
        });
        bsm_crystals.push(CRYSTAL_RESOURCE);
        bsm_members.push(b_idx);
        let c_idx = photons.len();
        photons.push(Photon {
            port: 2,
            orbit: 1,
            internal: Vec::new(),
        });
        bob_crystals.push(CRYSTAL_RESOURCE);
        bob_members.push(c_idx);
        emissions.push(Emission {
            terms: (0..3u8)
                .map(|k| (third, vec![(b_idx, k), (c_idx, k)]))
                .collect(),
        });
    }
    for _ in 0..n_teleportee {
        let a_idx = photons.len();
        photons.push(Photon {
            port: 0,
            orbit: 0,
            internal: Vec::new(),
        });
        bsm_crystals.push(CRYSTAL_TELEPORTEE);
        bsm_members.push(a_idx);
        let x_idx = photons.len();
        photons.push(Photon {
            port: 3,
            orbit: 0,
            internal: Vec::new(),
        });
        bsm_crystals.push(CRYSTAL_TELEPORTEE);
        bsm_members.push(x_idx);
        let mut terms = Vec::with_capacity(9);
        for (l, &amp) in input.amps().iter().enumerate() {
            for m in 0..3u8 {
                terms.push((amp * third, vec![(a_idx, l as u8), (x_idx, m)]));
            }
        }
        emissions.push(Emission { terms });
    }

    for (vectors, members) in [
        (
            internal_vectors(&bsm_crystals, v_same, v_cross)?,
            bsm_members,
        ),
        (
            internal_vectors(&bob_crystals, v_same, v_cross)?,
            bob_members,
        ),
    ] {
        for (vector, &photon_idx) in vectors.into_iter().zip(members.iter()) {
            photons[photon_idx].internal = vector;
        }
    }

    let mut coeff = 1.0;
    for n in [n_resource, n_teleportee] {
        for k in 1..=n {
            coeff /= k as f64;
        }
    }
    Ok(Block {
        coeff,
        photons,
        emissions,
    })
}

/// Applies the expanded-level interference network to every occupied
/// measurement-side slice, leaving Bob untouched.
fn evolve_bsm(
    mut state: FockState,
    embed: &ModeUnitary,
    tritter: &ModeUnitary,
) -> Result<FockState, NoiseError> {
    let slices = state.register().span("a", 0).len() as u8;
    for r in 0..slices {
        let targets: Vec<ModeLabel> = (0..4u8)
            .map(|lv| ModeLabel::with_internal("b", lv, r))
            .collect();
        state = state.apply_unitary(embed, &targets)?;
    }
    for level in 0..3u8 {
        for r in 0..slices {
            let targets = vec![
                ModeLabel::with_internal("a", level, r),
                ModeLabel::with_internal("b", level, r),
                ModeLabel::with_internal("x", level, r),
            ];
            state = state.apply_unitary(tritter, &targets)?;
        }
    }
    Ok(state)
}

fn rotate_port(
    mut state: FockState,
    port: &str,
    rotation: &ModeUnitary,
) -> Result<FockState, NoiseError> {
    let slices = state.register().span(port, 0).len() as u8;
    for t in 0..slices {
        let targets: Vec<ModeLabel> = (0..3u8)
            .map(|lv| ModeLabel::with_internal(port, lv, t))
            .collect();
        state = state.apply_unitary(rotation, &targets)?;
    }
    Ok(state)
}

/// How Bob's conditional counts are turned into a fidelity estimate.
#[derive(Debug, Clone, Copy)]
enum ReadoutKind {
    /// Computational-basis input: fidelity is the fraction in the right level.
    Computational { level: usize },
    /// Balanced-superposition input: three-setting decomposition with
    /// outcome eigenvalues (+1, -1, +1).
    Sigma,
}

#[derive(Debug, Clone)]
struct ReadoutSetting {
    rotation: ModeUnitary,
    kind: ReadoutKind,
}

fn basis_rotation(setting: &MeasurementSetting) -> Result<ModeUnitary, NoiseError> {
    let d = setting.outcomes[0].dim();
    let mut mat = Array2::zeros((d, d));
    for (o, outcome) in setting.outcomes.iter().enumerate() {
        for (j, &amp) in outcome.amps().iter().enumerate() {
            mat[[o, j]] = amp.conj();
        }
    }
    Ok(ModeUnitary::new(mat)?)
}

fn readout_settings(input: &QuditState) -> Result<Vec<ReadoutSetting>, NoiseError> {
    if let Some(level) = analysis::computational_level(input) {
        return Ok(vec![ReadoutSetting {
            rotation: ModeUnitary::identity(3),
            kind: ReadoutKind::Computational { level },
        }]);
    }
    if let Some((phi1, phi2)) = analysis::superposition_phases(input) {
        return analysis::sigma_settings(phi1, phi2)
            .iter()
            .map(|s| {
                Ok(ReadoutSetting {
                    rotation: basis_rotation(s)?,
                    kind: ReadoutKind::Sigma,
                })
            })
            .collect();
    }
    Err(NoiseError::InvalidParam(
        "noisy estimation supports computational and balanced-superposition inputs".into(),
    ))
}

fn fidelity_from_rates(
    settings: &[ReadoutSetting],
    counts: &[[f64; 3]],
) -> Result<f64, NoiseError> {
    match settings[0].kind {
        ReadoutKind::Computational { level } => {
            let total: f64 = counts[0].iter().sum();
            if total <= 0.0 {
                return Err(NoiseError::InvalidParam("no heralded events".into()));
            }
            Ok(counts[0][level] / total)
        }
        ReadoutKind::Sigma => {
            let mut acc = 0.0;
            for c in counts {
                let total = c[0] + c[1] + c[2];
                if total <= 0.0 {
                    return Err(NoiseError::InvalidParam("no heralded events".into()));
                }
                acc += (c[0] - c[1] + c[2]) / total;
            }
            Ok(acc / counts.len() as f64)
        }
    }
}

/// Per-input precomputed histograms: `hists[setting][block]`, plus the
/// p-powered norm terms of the truncated two-source expansion.
struct InputTables {
    settings: Vec<ReadoutSetting>,
    hists: Vec<Vec<Hist>>,
    norm_terms: Vec<(u32, f64)>,
}

const TELEPORT_BLOCKS: [(u32, u32); 3] = [(1, 1), (2, 1), (1, 2)];

fn teleport_tables(input: &QuditState, params: &NoiseParams) -> Result<InputTables, NoiseError> {
    let layout = teleport_layout();
    let embed = protocol::expansion_embed(3)?;
    let tritter = elements::qft_multiport(3)?;
    let settings = readout_settings(input)?;

    let mut hists: Vec<Vec<Hist>> = vec![vec![Hist::new(); TELEPORT_BLOCKS.len()]; settings.len()];
    for (b_idx, &(n1, n2)) in TELEPORT_BLOCKS.iter().enumerate() {
        // The single-pair-per-source block carries the full partial-
        // distinguishability model; the extra-pair blocks are already
        // suppressed by one power of p, so their distinguishability
        // corrections are second-order and they run with ideal overlap,
        // which collapses their internal-mode expansion.
        let (vs, vc) = if n1 + n2 > 2 {
            (1.0, 1.0)
        } else {
            (params.v_same, params.v_cross)
        };
        let block = teleport_block(input, n1, n2, vs, vc)?;
        for group in block_states(&layout, &block)? {
            let evolved = evolve_bsm(group, &embed, &tritter)?;
            for (s_idx, setting) in settings.iter().enumerate() {
                let rotated = rotate_port(evolved.clone(), "c", &setting.rotation)?;
                span_histogram(&rotated, &layout, &mut hists[s_idx][b_idx]);
            }
        }
    }

    // Norm of the truncated joint emission expansion, with the cutoff-excluded
    // double-double block dropped consistently. Single-pair emissions are
    // normalized regardless of internal overlap, so the ideal-overlap masses
    // are consistent with the histogram blocks above.
    let mut norm_terms = Vec::new();
    for n1 in 0..=2u32 {
        for n2 in 0..=2u32 {
            if n1 + n2 > 3 {
                continue;
            }
            let block = teleport_block(input, n1, n2, 1.0, 1.0)?;
            let mass: f64 = block_states(&layout, &block)?
                .iter()
                .map(|s| s.norm_sqr())
                .sum();
            norm_terms.push((n1 + n2, mass));
        }
    }
    Ok(InputTables {
        settings,
        hists,
        norm_terms,
    })
}

// ---------------------------------------------------------------------------
// Parameter sweeps
// ---------------------------------------------------------------------------

/// One named grid axis of a sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepAxis {
    pub name: String,
    pub values: Vec<f64>,
}

/// Gridded sweep output: `fidelity[i][j]` and `success[i][j]` follow the
/// first and second axis (a single-axis sweep has one-element rows).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub axes: Vec<SweepAxis>,
    pub fidelity: Vec<Vec<f64>>,
    pub success: Vec<Vec<f64>>,
    /// Monte Carlo draws behind each grid point; 0 marks exact enumeration.
    pub trials: u64,
    pub seed: u64,
    pub cutoff: u32,
    pub version: String,
}

impl SweepResult {
    /// One row per grid point: axis values, mean fidelity, success rate,
    /// and the trial count.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for axis in &self.axes {
            out.push_str(&axis.name);
            out.push(',');
        }
        out.push_str("fidelity,success,trials\n");
        for (i, row) in self.fidelity.iter().enumerate() {
            for (j, &f) in row.iter().enumerate() {
                out.push_str(&format!("{}", self.axes[0].values[i]));
                out.push(',');
                if self.axes.len() > 1 {
                    out.push_str(&format!("{}", self.axes[1].values[j]));
                    out.push(',');
                }
                out.push_str(&format!(
                    "{:.12e},{:.12e},{}\n",
                    f, self.success[i][j], self.trials
                ));
            }
        }
        out
    }
}

fn crate_version() -> String {
    env!("CARGO_PKG_VERSION").to_string()
}

/// Average teleportation fidelity and four-fold heralding rate over a grid of
/// detection efficiency and pair probability, with the twelve benchmark
/// input states estimated exactly as the experiment estimates them. The
/// interference histograms do not depend on either grid parameter, so they
/// are computed once and reweighted per grid point.
pub fn fidelity_landscape(
    p_d_grid: &[f64],
    p_grid: &[f64],
    base: &NoiseParams,
) -> Result<SweepResult, NoiseError> {
    base.validate()?;
    if p_d_grid.is_empty() || p_grid.is_empty() {
        return Err(NoiseError::InvalidParam("empty grid".into()));
    }
    for &pd in p_d_grid {
        if !(0.0 < pd && pd <= 1.0) {
            return Err(NoiseError::InvalidParam(format!(
                "P_d = {pd} outside (0, 1]"
            )));
        }
    }
    for &p in p_grid {
        check_pair_probability(p)?;
        if p == 0.0 {
            return Err(NoiseError::InvalidParam("p = 0 heralds nothing".into()));
        }
    }

    let layout = teleport_layout();
    let patterns: Vec<Vec<usize>> = protocol::clean_patterns()?
        .iter()
        .map(|pattern| {
            pattern
                .modes
                .iter()
                .map(|m| {
                    let port = layout.names.iter().position(|&n| n == m.port).unwrap();
                    layout.span_index(port, m.level)
                })
                .collect()
        })
        .collect();
    let bob_base = layout.span_index(2, 0);

    let inputs = protocol::mub_states();
    let tables: Vec<InputTables> = inputs
        .par_iter()
        .map(|(_, q)| teleport_tables(q, base))
        .collect::<Result<_, _>>()?;

    let mut fidelity = vec![vec![0.0; p_grid.len()]; p_d_grid.len()];
    let mut success = vec![vec![0.0; p_grid.len()]; p_d_grid.len()];
    for (i_pd, &pd) in p_d_grid.iter().enumerate() {
        let mut miss_pow = [0.0f64; MAX_PHOTONS as usize + 1];
        for (k, slot) in miss_pow.iter_mut().enumerate() {
            *slot = (1.0 - pd).powi(k as i32);
        }
        // Precomputed herald requirements: each clean pattern plus one Bob span.
        let required_sets: Vec<(usize, Vec<usize>)> = patterns
            .iter()
            .flat_map(|pattern| {
                (0..3usize).map(move |o| {
                    let mut required = pattern.clone();
                    required.push(bob_base + o);
                    (o, required)
                })
            })
            .collect();
        // Outcome rates per input, setting, block, folded over patterns.
        let rates: Vec<Vec<Vec<[f64; 3]>>> = tables
            .iter()
            .map(|table| {
                table
                    .hists
                    .iter()
                    .map(|blocks| {
                        blocks
                            .iter()
                            .map(|hist| {
                                let mut out = [0.0f64; 3];
                                for (counts, mass) in hist {
                                    for (o, required) in &required_sets {
                                        out[*o] +=
                                            mass * click_probability(counts, required, &miss_pow);
                                    }
                                }
                                out
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();

        for (i_p, &p) in p_grid.iter().enumerate() {
            let mut fid_acc = 0.0;
            let mut success_acc = 0.0;
            for (table, per_setting) in tables.iter().zip(rates.iter()) {
                let norm: f64 = table
                    .norm_terms
                    .iter()
                    .map(|&(pow, mass)| p.powi(pow as i32) * mass)
                    .sum();
                let counts: Vec<[f64; 3]> = per_setting
                    .iter()
                    .map(|blocks| {
                        let mut c = [0.0f64; 3];
                        for (b_idx, &(n1, n2)) in TELEPORT_BLOCKS.iter().enumerate() {
                            let weight = p.powi((n1 + n2) as i32);
                            for (o, slot) in c.iter_mut().enumerate() {
                                *slot += weight * blocks[b_idx][o];
                            }
                        }
                        c
                    })
                    .collect();
                fid_acc += fidelity_from_rates(&table.settings, &counts)?;
                let total: f64 = counts.iter().flatten().sum();
                success_acc += total / (counts.len() as f64 * norm);
            }
            fidelity[i_pd][i_p] = fid_acc / tables.len() as f64;
            success[i_pd][i_p] = success_acc / tables.len() as f64;
        }
    }

    Ok(SweepResult {
        axes: vec![
            SweepAxis {
                name: "P_d".into(),
                values: p_d_grid.to_vec(),
            },
            SweepAxis {
                name: "p".into(),
                values: p_grid.to_vec(),
            },
        ],
        fidelity,
        success,
        trials: 0,
        seed: 0,
        cutoff: MAX_PHOTONS,
        version: crate_version(),
    })
}

/// Mean teleportation fidelity against the half-width of a uniform
/// perturbation of the partial splitter's horizontal reflectivity, drawn
/// independently per path level and trial, with an ideal single-pair source.
/// Trials are seeded per index, so thread count never changes the result.
pub fn splitting_ratio_perturbation(
    deviations: &[f64],
    trials: u32,
    seed: u64,
) -> Result<SweepResult, NoiseError> {
    if deviations.is_empty() {
        return Err(NoiseError::InvalidParam("empty deviation grid".into()));
    }
    for &d in deviations {
        if !(0.0..=1.0 / 3.0).contains(&d) {
            return Err(NoiseError::InvalidParam(format!(
                "deviation {d} outside [0, 1/3]"
            )));
        }
    }
    if trials == 0 {
        return Err(NoiseError::InvalidParam("need at least one trial".into()));
    }
    let patterns = protocol::clean_patterns()?;
    let inputs = protocol::mub_states();

    let mut fidelity = Vec::with_capacity(deviations.len());
    let mut success = Vec::with_capacity(deviations.len());
    for (d_idx, &deviation) in deviations.iter().enumerate() {
        let results: Vec<(f64, f64)> = (0..trials)
            .into_par_iter()
            .map(|trial| -> Result<(f64, f64), NoiseError> {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(((d_idx as u64) << 32) | trial as u64);
                let mut tritters = Vec::with_capacity(3);
                for _ in 0..3 {
                    let u: f64 = rng.random_range(-deviation..=deviation);
                    let r_h = (1.0 + u) / 3.0;
                    tritters.push(elements::hybrid_multiport_with(r_h)?.transfer()?);
                }
                let mut fid = 0.0;
                let mut succ = 0.0;
                for (_, input) in &inputs {
                    let run = protocol::run_teleport_custom(input, &tritters, &patterns)?;
                    fid += run.mean_fidelity;
                    succ += run.total_probability;
                }
                Ok((fid / inputs.len() as f64, succ / inputs.len() as f64))
            })
            .collect::<Result<_, _>>()?;
        let n = results.len() as f64;
        fidelity.push(vec![results.iter().map(|r| r.0).sum::<f64>() / n]);
        success.push(vec![results.iter().map(|r| r.1).sum::<f64>() / n]);
    }

    Ok(SweepResult {
        axes: vec![SweepAxis {
            name: "deviation".into(),
            values: deviations.to_vec(),
        }],
        fidelity,
        success,
        trials: trials as u64,
        seed,
        cutoff: MAX_PHOTONS,
        version: crate_version(),
    })
}

// ---------------------------------------------------------------------------
// Entanglement-witness simulation
// ---------------------------------------------------------------------------

/// Simulated witness measurement of the resource source.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WitnessSimulation {
    pub expectations: analysis::WitnessExpectations,
    pub fidelity: f64,
    /// Mean two-fold coincidence probability per pulse across settings.
    pub two_fold_rate: f64,
    pub trials: u32,
    pub seed: u64,
}

fn witness_layout() -> PortLayout {
    PortLayout {
        names: vec!["b", "c"],
        levels: vec![3, 3],
        orbit_of_port: vec![0, 1],
    }
}

/// One resource-pair emission with path-resolved internal modes: the pair
/// emitted into level `k` carries a per-path internal vector whose overlap
/// with every other same-crystal emission instance is `sqrt(v_same)`, so the
/// level coherences of the pair state dephase by `v_same` per photon pair.
fn witness_emission_poly(
    register: &Arc<ModeRegister>,
    emission_idx: u32,
    phases: &[f64; 3],
    v_same: f64,
) -> Result<CreationPoly, NoiseError> {
    let s = v_same.sqrt();
    let shared = s.sqrt();
    let own = (1.0 - s).sqrt();
    let third = 1.0 / 3f64.sqrt();
    let mut terms = Vec::new();
    for k in 0..3u8 {
        let own_slice = (1 + 3 * emission_idx) as u8 + k;
        let amp = Complex64::cis(phases[k as usize]) * third;
        let comps = [(0u8, shared), (own_slice, own)];
        for &(rb, wb) in &comps {
            if wb == 0.0 {
                continue;
            }
            for &(rc, wc) in &comps {
                if wc == 0.0 {
                    continue;
                }
                terms.push((
                    amp * wb * wc,
                    vec![
                        (ModeLabel::with_internal("b", k, rb), 1),
                        (ModeLabel::with_internal("c", k, rc), 1),
                    ],
                ));
            }
        }
    }
    Ok(CreationPoly::build(register, &terms)?)
}

fn witness_emission_state(
    n_pairs: u32,
    phases: &[f64; 3],
    v_same: f64,
) -> Result<FockState, NoiseError> {
    let dim = (1 + 3 * n_pairs) as u8;
    let register = Arc::new(ModeRegister::with_ports(&[("b", 3, dim), ("c", 3, dim)])?);
    let mut state = FockState::vacuum(&register);
    let mut coeff = 1.0;
    for e in 0..n_pairs {
        state = state.apply_creation(&witness_emission_poly(&register, e, phases, v_same)?)?;
        coeff /= (e + 1) as f64;
    }
    Ok(state.scaled(Complex64::new(coeff, 0.0)))
}

fn pair_basis(i: usize, j: usize, imaginary: bool) -> MeasurementSetting {
    let k = 3 - i - j;
    let mut plus = vec![Complex64::new(0.0, 0.0); 3];
    let mut minus = vec![Complex64::new(0.0, 0.0); 3];
    plus[i] = Complex64::new(1.0, 0.0);
    minus[i] = Complex64::new(1.0, 0.0);
    let phase = if imaginary {
        Complex64::new(0.0, 1.0)
    } else {
        Complex64::new(1.0, 0.0)
    };
    plus[j] = phase;
    minus[j] = -phase;
    MeasurementSetting {
        label: format!("{}{i}{j}", if imaginary { "yy" } else { "xx" }),
        outcomes: vec![
            QuditState::new(plus).unwrap(),
            QuditState::new(minus).unwrap(),
            QuditState::computational(k, 3).unwrap(),
        ],
        eigenvalues: vec![1.0, -1.0, 0.0],
    }
}

/// Simulates the seven-setting witness measurement of the resource pair,
/// including double-pair emission, threshold detection, partial
/// distinguishability, and residual phase noise (Monte Carlo when nonzero).
pub fn witness_simulation(
    params: &NoiseParams,
    trials: u32,
    seed: u64,
) -> Result<WitnessSimulation, NoiseError> {
    params.validate()?;
    check_pair_probability(params.p)?;
    if params.p == 0.0 {
        return Err(NoiseError::InvalidParam("p = 0 heralds nothing".into()));
    }
    if trials == 0 {
        return Err(NoiseError::InvalidParam("need at least one trial".into()));
    }
    let effective_trials = if params.phase_noise == 0.0 { 1 } else { trials };
    let layout = witness_layout();
    let pairs = [(0usize, 1usize), (0, 2), (1, 2)];
    let identity = ModeUnitary::identity(3);
    let mut settings: Vec<(String, ModeUnitary, Option<MeasurementSetting>)> =
        vec![("population".into(), identity, None)];
    for imaginary in [false, true] {
        for &(i, j) in &pairs {
            let basis = pair_basis(i, j, imaginary);
            settings.push((basis.label.clone(), basis_rotation(&basis)?, Some(basis)));
        }
    }

    let mut miss_pow = [0.0f64; MAX_PHOTONS as usize + 1];
    for (k, slot) in miss_pow.iter_mut().enumerate() {
        *slot = (1.0 - params.p_d).powi(k as i32);
    }

    let normal = Normal::new(0.0, params.phase_noise.max(f64::MIN_POSITIVE))
        .map_err(|e| NoiseError::InvalidParam(e.to_string()))?;
    let mut rates = vec![[[0.0f64; 3]; 3]; settings.len()];
    let mut norm_acc = 0.0;
    for trial in 0..effective_trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trial as u64);
        let phases = if params.phase_noise == 0.0 {
            [0.0; 3]
        } else {
            [0.0, normal.sample(&mut rng), normal.sample(&mut rng)]
        };

        let mut trial_norm = 1.0; // vacuum block
        for n_pairs in 1..=2u32 {
            let state = witness_emission_state(n_pairs, &phases, params.v_same)?;
            let weight = params.p.powi(n_pairs as i32);
            trial_norm += weight * state.norm_sqr();
            for (s_idx, (_, rotation, _)) in settings.iter().enumerate() {
                let rotated =
                    rotate_port(rotate_port(state.clone(), "b", rotation)?, "c", rotation)?;
                let mut hist = Hist::new();
                span_histogram(&rotated, &layout, &mut hist);
                for (counts, mass) in &hist {
                    for o1 in 0..3usize {
                        for o2 in 0..3usize {
                            let prob = click_probability(counts, &[o1, 3 + o2], &miss_pow);
                            rates[s_idx][o1][o2] += weight * mass * prob;
                        }
                    }
                }
            }
        }
        norm_acc += trial_norm;
    }
    let norm = norm_acc / effective_trials as f64;

    let total = |r: &[[f64; 3]; 3]| -> f64 { r.iter().flatten().sum() };
    let expect = |r: &[[f64; 3]; 3], basis: &MeasurementSetting| -> f64 {
        let t = total(r);
        let mut acc = 0.0;
        for o1 in 0..3 {
            for o2 in 0..3 {
                acc += basis.eigenvalues[o1] * basis.eigenvalues[o2] * r[o1][o2];
            }
        }
        acc / t
    };
    let pop_total = total(&rates[0]);
    if pop_total <= 0.0 {
        return Err(NoiseError::InvalidParam("no coincidences".into()));
    }
    let population = (0..3).map(|k| rates[0][k][k]).sum::<f64>() / pop_total;
    let mut xx = [0.0f64; 3];
    let mut yy = [0.0f64; 3];
    for idx in 0..3 {
        let basis = settings[1 + idx].2.as_ref().unwrap();
        xx[idx] = expect(&rates[1 + idx], basis);
        let basis = settings[4 + idx].2.as_ref().unwrap();
        yy[idx] = expect(&rates[4 + idx], basis);
    }
    let expectations = analysis::WitnessExpectations { population, xx, yy };
    let fidelity = analysis::entanglement_witness_fidelity(&expectations);
    let mean_rate = rates.iter().map(total).sum::<f64>()
        / (settings.len() as f64 * effective_trials as f64 * norm);
    Ok(WitnessSimulation {
        expectations,
        fidelity,
        two_fold_rate: mean_rate,
        trials: effective_trials,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elements::beam_splitter;
    use crate::protocol::{ElementSet, Variant};
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_4;

    #[test]
    fn spdc_vanishes_to_vacuum_at_zero_pump() {
        for kind in [
            SourceKind::Entangled3,
            SourceKind::Pair2 {
                input: QuditState::superposition(0.0, 0.0),
            },
        ] {
            let state = spdc_source(0.0, &kind, 2).unwrap();
            assert_eq!(state.term_count(), 1);
            assert!((state.amplitude(&[]).unwrap().re - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn entangled_source_first_order_is_the_correlated_triple() {
        let p = 0.02;
        let state = spdc_source(p, &SourceKind::Entangled3, 2).unwrap();
        let vac = state.amplitude(&[]).unwrap();
        for k in 0..3u8 {
            let amp = state
                .amplitude(&[(ModeLabel::new("b", k), 1), (ModeLabel::new("c", k), 1)])
                .unwrap();
            let ratio = amp / vac;
            assert!((ratio.re - (p / 3.0).sqrt()).abs() < 1e-12 && ratio.im.abs() < 1e-15);
        }
        let cross = state
            .amplitude(&[(ModeLabel::new("b", 0), 1), (ModeLabel::new("c", 1), 1)])
            .unwrap();
        assert!(cross.norm() < 1e-15);
    }

    #[test]
    fn pair_source_first_order_is_a_product() {
        let input = QuditState::new(vec![
            Complex64::new(0.8, 0.0),
            Complex64::new(0.0, 0.6),
            Complex64::new(0.0, 0.0),
        ])
        .unwrap();
        let state = spdc_source(
            0.01,
            &SourceKind::Pair2 {
                input: input.clone(),
            },
            2,
        )
        .unwrap();
        let vac = state.amplitude(&[]).unwrap();
        for l in 0..3usize {
            for m in 0..3u8 {
                let amp = state
                    .amplitude(&[
                        (ModeLabel::new("a", l as u8), 1),
                        (ModeLabel::new("x", m), 1),
                    ])
                    .unwrap();
                let want = input.amps()[l] * 0.01f64.sqrt() / 3.0f64.sqrt() * vac;
                assert!((amp - want).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn truncation_error_is_bounded_by_the_dropped_order() {
        // The untruncated norm of the correlated source follows a closed
        // geometric form; the truncated expansion must agree through p^2.
        for p in [0.005f64, 0.02, 0.05] {
            let lambda = p.sqrt();
            // Squared norms of the bare n-pair terms: 1, 1, 8/3.
            let mut truncated = 0.0;
            let mut coeff = 1.0f64;
            let masses = [1.0, 1.0, 8.0 / 3.0];
            for (n, &mass) in masses.iter().enumerate() {
                if n > 0 {
                    coeff *= lambda / n as f64;
                }
                truncated += coeff * coeff * mass;
            }
            let exact = (1.0 - p / 3.0).powi(-3);
            assert!(
                (exact - truncated).abs() < 2.0 * p * p * p,
                "p = {p}: {exact} vs {truncated}"
            );
            // And the simulated state really carries those weights.
            let state = spdc_source(p, &SourceKind::Entangled3, 2).unwrap();
            let vac_weight = state.amplitude(&[]).unwrap().norm_sqr();
            assert!((1.0 / vac_weight - truncated).abs() < 1e-10);
            assert!((state.norm_sqr() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn loss_branches_partition_probability() {
        let state = spdc_source(0.04, &SourceKind::Entangled3, 2).unwrap();
        for p_d in [0.0, 0.16, 0.5, 1.0] {
            let branches = apply_loss(&state, p_d).unwrap();
            let total: f64 = branches.iter().map(|b| b.probability).sum();
            assert!((total - 1.0).abs() < 1e-9, "p_d = {p_d}: total {total}");
        }
        let lossless = apply_loss(&state, 1.0).unwrap();
        assert_eq!(lossless.len(), 1);
        assert!((lossless[0].state.inner(&state).unwrap().norm() - 1.0).abs() < 1e-12);
        let opaque = apply_loss(&state, 0.0).unwrap();
        for branch in &opaque {
            assert_eq!(branch.state.term_count(), 1);
            assert!(branch.state.amplitude(&[]).unwrap().norm() > 1.0 - 1e-12);
        }
    }

    #[test]
    fn single_photon_clicks_with_the_detection_efficiency() {
        let register = Arc::new(ModeRegister::with_ports(&[("d", 1, 1)]).unwrap());
        let photon = FockState::basis(&register, &[(ModeLabel::new("d", 0), 1)]).unwrap();
        let branches = apply_loss(&photon, 0.16).unwrap();
        let click: f64 = branches
            .iter()
            .filter(|b| b.lost.iter().all(|&l| l == 0))
            .map(|b| b.probability)
            .sum();
        assert!((click - 0.16).abs() < 1e-12);
    }

    #[test]
    fn threshold_click_formula_matches_exact_loss_enumeration() {
        // Oracle: closed-form span products against the explicit loss mixture
        // with threshold detectors applied to the survivors.
        let register = Arc::new(ModeRegister::with_ports(&[("d", 2, 1)]).unwrap());
        let state = FockState::superpose(&[
            (
                Complex64::new(0.6, 0.0),
                &FockState::basis(&register, &[(ModeLabel::new("d", 0), 2)]).unwrap(),
            ),
            (
                Complex64::new(0.0, 0.8),
                &FockState::basis(
                    &register,
                    &[(ModeLabel::new("d", 0), 1), (ModeLabel::new("d", 1), 1)],
                )
                .unwrap(),
            ),
        ])
        .unwrap();
        let p_d = 0.37f64;
        let mut miss_pow = [0.0f64; MAX_PHOTONS as usize + 1];
        for (k, slot) in miss_pow.iter_mut().enumerate() {
            *slot = (1.0 - p_d).powi(k as i32);
        }
        let layout = PortLayout {
            names: vec!["d"],
            levels: vec![2],
            orbit_of_port: vec![0],
        };
        let mut hist = Hist::new();
        span_histogram(&state, &layout, &mut hist);
        // Closed form: span 0 clicks, span 1 silent.
        let formula: f64 = hist
            .iter()
            .map(|(counts, mass)| mass * click_probability(counts, &[0], &miss_pow))
            .sum();
        // Enumeration: survivors with >= 1 photon in mode 0 and none in mode 1.
        let enumerated: f64 = apply_loss(&state, p_d)
            .unwrap()
            .iter()
            .map(|branch| {
                branch.probability
                    * branch
                        .state
                        .terms()
                        .filter(|(occ, _)| occ[0] >= 1 && occ[1] == 0)
                        .map(|(_, amp)| amp.norm_sqr())
                        .sum::<f64>()
            })
            .sum();
        assert!(
            (formula - enumerated).abs() < 1e-12,
            "{formula} vs {enumerated}"
        );
    }

    #[test]
    fn partial_overlap_reproduces_the_hom_coincidence_law() {
        for v in [0.0, 0.5, 0.82, 1.0] {
            let [xi1, xi2] = overlap_vectors(v).unwrap();
            let register = Arc::new(ModeRegister::with_ports(&[("l", 1, 2), ("r", 1, 2)]).unwrap());
            let poly = |port: &str, xi: &[Complex64]| {
                CreationPoly::build(
                    &register,
                    &xi.iter()
                        .enumerate()
                        .filter(|(_, a)| a.norm() > 0.0)
                        .map(|(i, &a)| (a, vec![(ModeLabel::with_internal(port, 0, i as u8), 1)]))
                        .collect::<Vec<_>>(),
                )
                .unwrap()
            };
            let mut state = FockState::vacuum(&register)
                .apply_creation(&poly("l", &xi1))
                .unwrap()
                .apply_creation(&poly("r", &xi2))
                .unwrap();
            let splitter = beam_splitter(FRAC_PI_4, 0.0);
            for slice in 0..2u8 {
                state = state
                    .apply_unitary(
                        &splitter,
                        &[
                            ModeLabel::with_internal("l", 0, slice),
                            ModeLabel::with_internal("r", 0, slice),
                        ],
                    )
                    .unwrap();
            }
            let layout = PortLayout {
                names: vec!["l", "r"],
                levels: vec![1, 1],
                orbit_of_port: vec![0, 0],
            };
            let mut hist = Hist::new();
            span_histogram(&state, &layout, &mut hist);
            let coincidence = hist.get(&vec![1u8, 1u8]).copied().unwrap_or(0.0);
            assert!(
                (coincidence - (1.0 - v) / 2.0).abs() < 1e-12,
                "v = {v}: coincidence {coincidence}"
            );
        }
    }

    #[test]
    fn hom_scan_recovers_the_injected_visibility() {
        let tau_c = coherence_time_fs(3.0).unwrap();
        assert!((tau_c - 450.0).abs() < 1e-12);
        assert!((coherence_time_fs(6.0).unwrap() - 225.0).abs() < 1e-12);
        let delays: Vec<f64> = (-50..=50).map(|k| k as f64 * tau_c / 10.0).collect();
        let curve = hom_scan(&delays, 3.0, 0.82).unwrap();
        let v = extract_visibility(&curve).unwrap();
        assert!((v - 0.82).abs() < 1e-6, "extracted {v}");
        let dip = curve.iter().find(|(t, _)| *t == 0.0).unwrap().1;
        assert!((dip - 0.09).abs() < 1e-12);
        for (tau, c) in &curve {
            let mirrored = curve.iter().find(|(t, _)| *t == -*tau).unwrap().1;
            assert_eq!(c.to_bits(), mirrored.to_bits());
            if tau.abs() > 3.0 * tau_c {
                assert!((c - 0.5).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn internal_vectors_realize_the_target_overlaps() {
        let cases: Vec<Vec<u8>> = vec![
            vec![1, 2, 2],
            vec![1, 1, 2, 2],
            vec![1, 1, 2, 2, 1, 1],
            vec![1, 1],
        ];
        for crystals in cases {
            let vectors = internal_vectors(&crystals, 0.92, 0.82).unwrap();
            for (i, vi) in vectors.iter().enumerate() {
                for (j, vj) in vectors.iter().enumerate() {
                    let mut overlap = 0.0;
                    for &(slice_a, wa) in vi {
                        for &(slice_b, wb) in vj {
                            if slice_a == slice_b {
                                overlap += wa * wb;
                            }
                        }
                    }
                    let want = if i == j {
                        1.0
                    } else if crystals[i] == crystals[j] {
                        0.92f64.sqrt()
                    } else {
                        0.82f64.sqrt()
                    };
                    assert!(
                        (overlap - want).abs() < 1e-12,
                        "{crystals:?} [{i}][{j}] = {overlap}, want {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn infeasible_overlaps_fall_back_to_a_clipped_gram() {
        // Cross-crystal overlap above the same-crystal one cannot be realized
        // exactly; the clipped factorization must still return unit vectors
        // with a symmetric, bounded overlap pattern.
        let crystals = vec![1u8, 1, 2];
        let vectors = internal_vectors(&crystals, 0.25, 0.81).unwrap();
        let overlap = |a: &Vec<(usize, f64)>, b: &Vec<(usize, f64)>| -> f64 {
            let mut acc = 0.0;
            for &(sa, wa) in a {
                for &(sb, wb) in b {
                    if sa == sb {
                        acc += wa * wb;
                    }
                }
            }
            acc
        };
        for (i, vi) in vectors.iter().enumerate() {
            assert!((overlap(vi, vi) - 1.0).abs() < 1e-9);
            for vj in vectors.iter().skip(i + 1) {
                let o = overlap(vi, vj);
                assert!((-1.0..=1.0).contains(&o));
            }
        }
        assert!(
            (overlap(&vectors[0], &vectors[2]) - overlap(&vectors[1], &vectors[2])).abs() < 1e-9
        );
    }

    /// The noisy engine at unit efficiency and full indistinguishability must
    /// reproduce the exact protocol run, block by block.
    #[test]
    fn noisy_engine_matches_the_ideal_protocol() {
        let params = NoiseParams {
            v_same: 1.0,
            v_cross: 1.0,
            ..NoiseParams::default()
        };
        let layout = teleport_layout();
        let embed = protocol::expansion_embed(3).unwrap();
        let tritter = elements::qft_multiport(3).unwrap();
        let patterns: Vec<Vec<usize>> = protocol::clean_patterns()
            .unwrap()
            .iter()
            .map(|pattern| {
                pattern
                    .modes
                    .iter()
                    .map(|m| {
                        let port = layout.names.iter().position(|&n| n == m.port).unwrap();
                        layout.span_index(port, m.level)
                    })
                    .collect()
            })
            .collect();
        let mut miss_pow = [0.0f64; MAX_PHOTONS as usize + 1];
        for (k, slot) in miss_pow.iter_mut().enumerate() {
            *slot = 0.0f64.powi(k as i32);
        }

        for input in [
            QuditState::computational(0, 3).unwrap(),
            QuditState::superposition(1.1, -0.7),
        ] {
            let settings = readout_settings(&input).unwrap();
            let block = teleport_block(&input, 1, 1, params.v_same, params.v_cross).unwrap();
            let states = block_states(&layout, &block).unwrap();
            assert_eq!(states.len(), 1);
            let evolved = evolve_bsm(states[0].clone(), &embed, &tritter).unwrap();
            let mut counts = Vec::new();
            for setting in &settings {
                let rotated = rotate_port(evolved.clone(), "c", &setting.rotation).unwrap();
                let mut hist = Hist::new();
                span_histogram(&rotated, &layout, &mut hist);
                let mut outcome = [0.0f64; 3];
                for (c, mass) in &hist {
                    for pattern in &patterns {
                        for (o, slot) in outcome.iter_mut().enumerate() {
                            let mut required = pattern.clone();
                            required.push(layout.span_index(2, 0) + o);
                            *slot += mass * click_probability(c, &required, &miss_pow);
                        }
                    }
                }
                counts.push(outcome);
            }
            // All three clean patterns herald the input exactly, so the rate
            // into outcome o is (3/243) * |<o|input>|^2 per setting.
            let run = protocol::run_teleport(&input, Variant::Main, ElementSet::Ideal).unwrap();
            assert!((run.total_probability - 1.0 / 81.0).abs() < 1e-10);
            for (setting, outcome) in settings.iter().zip(counts.iter()) {
                let total: f64 = outcome.iter().sum();
                assert!((total - 1.0 / 81.0).abs() < 1e-10, "total {total}");
                for (o, &rate) in outcome.iter().enumerate() {
                    let bra: Vec<Complex64> = (0..3)
                        .map(|j| setting.rotation.entry(o, j).conj())
                        .collect();
                    let want = input
                        .amps()
                        .iter()
                        .zip(bra.iter())
                        .map(|(a, b)| b.conj() * a)
                        .sum::<Complex64>()
                        .norm_sqr()
                        / 81.0;
                    assert!((rate - want).abs() < 1e-10, "outcome {o}: {rate} vs {want}");
                }
            }
            let fid = fidelity_from_rates(&settings, &counts).unwrap();
            assert!((fid - 1.0).abs() < 1e-9, "fidelity {fid}");
        }
    }

    #[test]
    fn splitting_sweep_is_exact_and_deterministic_at_zero_deviation() {
        let sweep = splitting_ratio_perturbation(&[0.0], 2, 9).unwrap();
        assert!((sweep.fidelity[0][0] - 1.0).abs() < 1e-9);
        assert!((sweep.success[0][0] - 1.0 / 81.0).abs() < 1e-9);
        let again = splitting_ratio_perturbation(&[0.0], 2, 9).unwrap();
        assert_eq!(
            sweep.fidelity[0][0].to_bits(),
            again.fidelity[0][0].to_bits()
        );
        assert!(splitting_ratio_perturbation(&[0.5], 2, 9).is_err());
        assert!(splitting_ratio_perturbation(&[], 2, 9).is_err());
        assert!(splitting_ratio_perturbation(&[0.0], 0, 9).is_err());
    }

    #[test]
    fn witness_is_near_perfect_for_a_clean_source() {
        let params = NoiseParams {
            p: 1e-4,
            p_d: 1.0,
            v_same: 1.0,
            v_cross: 1.0,
            ..NoiseParams::default()
        };
        let sim = witness_simulation(&params, 1, 3).unwrap();
        assert!(
            (sim.fidelity - 1.0).abs() < 2e-3,
            "fidelity {}",
            sim.fidelity
        );
        assert!((sim.expectations.population - 1.0).abs() < 2e-3);
    }

    #[test]
    fn witness_at_default_parameters_sits_in_the_reported_band() {
        let sim = witness_simulation(&NoiseParams::default(), 1, 3).unwrap();
        assert!(
            (0.90..=0.98).contains(&sim.fidelity),
            "witness fidelity {}",
            sim.fidelity
        );
    }

    #[test]
    fn sweep_serialization_round_trips() {
        let sweep = SweepResult {
            axes: vec![
                SweepAxis {
                    name: "P_d".into(),
                    values: vec![0.1, 0.2],
                },
                SweepAxis {
                    name: "p".into(),
                    values: vec![0.01],
                },
            ],
            fidelity: vec![vec![0.9], vec![0.95]],
            success: vec![vec![1e-4], vec![2e-4]],
            trials: 0,
            seed: 7,
            cutoff: MAX_PHOTONS,
            version: crate_version(),
        };
        let json = serde_json::to_string(&sweep).unwrap();
        let back: SweepResult = serde_json::from_str(&json).unwrap();
        assert_eq!(back.axes[0].values, sweep.axes[0].values);
        assert_eq!(back.fidelity, sweep.fidelity);
        let csv = sweep.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "P_d,p,fidelity,success,trials");
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().starts_with("0.1,0.01,"));
    }

    #[test]
    fn parameter_validation_rejects_out_of_range_values() {
        let bad = NoiseParams {
            p: -0.1,
            ..NoiseParams::default()
        };
        assert!(bad.validate().is_err());
        let bad = NoiseParams {
            v_same: 1.2,
            ..NoiseParams::default()
        };
        assert!(bad.validate().is_err());
        let bad = NoiseParams {
            r_h_deviation: 0.4,
            ..NoiseParams::default()
        };
        assert!(bad.validate().is_err());
        let bad = NoiseParams {
            phase_noise: -1.0,
            ..NoiseParams::default()
        };
        assert!(bad.validate().is_err());
        assert!(spdc_source(0.2, &SourceKind::Entangled3, 2).is_err());
        assert!(spdc_source(0.01, &SourceKind::Entangled3, 4).is_err());
        assert!(hom_scan(&[0.0], -1.0, 0.8).is_err());
        assert!(extract_visibility(&[(0.0, 0.1)]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn hom_curve_is_symmetric_and_bounded(
            v in 0.0f64..=1.0,
            tau in 0.0f64..2000.0,
        ) {
            let curve = hom_scan(&[-tau, tau], 3.0, v).unwrap();
            prop_assert_eq!(curve[0].1.to_bits(), curve[1].1.to_bits());
            prop_assert!(curve[0].1 >= 0.0 && curve[0].1 <= 0.5);
        }

        #[test]
        fn loss_is_trace_preserving_for_random_two_photon_states(
            theta in 0.0f64..std::f64::consts::FRAC_PI_2,
            p_d in 0.0f64..=1.0,
        ) {
            let register =
                Arc::new(ModeRegister::with_ports(&[("d", 2, 1)]).unwrap());
            let state = FockState::basis(
                &register,
                &[(ModeLabel::new("d", 0), 1), (ModeLabel::new("d", 1), 1)],
            )
            .unwrap()
            .apply_unitary(
                &beam_splitter(theta, 0.3),
                &[ModeLabel::new("d", 0), ModeLabel::new("d", 1)],
            )
            .unwrap();
            let total: f64 = apply_loss(&state, p_d)
                .unwrap()
                .iter()
                .map(|b| b.probability)
                .sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
    }
}
