//! Sparse second-quantized Fock states over labeled optical modes.
//!
//! States are stored as maps from occupation vectors to complex amplitudes.
//! Basis kets are unit vectors; all `sqrt(n+1)` bookkeeping from creation and
//! annihilation operators stays internal to the evolution routines. Map keys
//! are ordered, which keeps every floating-point reduction in a fixed order
//! and makes repeated runs bit-identical.

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

use crate::elements::ModeUnitary;
use crate::linalg;

/// Hard cap on total photon number per basis ket.
pub const MAX_PHOTONS: u32 = 6;

/// Amplitudes below this magnitude are dropped after evolution steps.
pub const AMPLITUDE_PRUNE: f64 = 1e-14;

const FACT: [f64; 7] = [1.0, 1.0, 2.0, 6.0, 24.0, 120.0, 720.0];

#[derive(Debug, Error)]
pub enum FockError {
    #[error("unknown mode {0}")]
    UnknownMode(String),
    #[error("duplicate mode {0}")]
    DuplicateMode(String),
    #[error("states live on different mode registers")]
    RegisterMismatch,
    #[error("photon number {total} exceeds the cutoff {MAX_PHOTONS}")]
    CutoffExceeded { total: u32 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("mode {0} appears in both the pattern and the discard set")]
    OverlappingSelection(String),
    #[error("photon-number condition violated: {0}")]
    PhotonCondition(String),
    #[error("state has (near-)zero norm")]
    NullState,
    #[error("matrix is not Hermitian (deviation {0:.3e})")]
    NotHermitian(f64),
    #[error("matrix has trace {0}, expected 1")]
    BadTrace(f64),
}

/// Identifies one optical mode: a named port, a path level on that port, and
/// an internal (spectral/temporal) component used by distinguishability
/// models. Fully indistinguishable photons use `internal = 0` only.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModeLabel {
    pub port: String,
    pub level: u8,
    pub internal: u8,
}

impl ModeLabel {
    pub fn new(port: &str, level: u8) -> Self {
        Self {
            port: port.to_string(),
            level,
            internal: 0,
        }
    }

    pub fn with_internal(port: &str, level: u8, internal: u8) -> Self {
        Self {
            port: port.to_string(),
            level,
            internal,
        }
    }
}

impl fmt::Display for ModeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.internal == 0 {
            write!(f, "{}{}", self.port, self.level)
        } else {
            write!(f, "{}{}.{}", self.port, self.level, self.internal)
        }
    }
}

/// Ordered dictionary of the modes a state lives on.
#[derive(Debug)]
pub struct ModeRegister {
    labels: Vec<ModeLabel>,
    index: HashMap<ModeLabel, usize>,
}

impl PartialEq for ModeRegister {
    fn eq(&self, other: &Self) -> bool {
        self.labels == other.labels
    }
}

impl ModeRegister {
    pub fn new(labels: Vec<ModeLabel>) -> Result<Self, FockError> {
        let mut index = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            if index.insert(l.clone(), i).is_some() {
                return Err(FockError::DuplicateMode(l.to_string()));
            }
        }
        Ok(Self { labels, index })
    }

    /// Register with `levels * internal_dim` modes per named port, grouped by
    /// port, then level, then internal component.
    pub fn with_ports(ports: &[(&str, u8, u8)]) -> Result<Self, FockError> {
        let mut labels = Vec::new();
        for &(name, levels, internal_dim) in ports {
            for level in 0..levels {
                for internal in 0..internal_dim.max(1) {
                    labels.push(ModeLabel::with_internal(name, level, internal));
                }
            }
        }
        Self::new(labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[ModeLabel] {
        &self.labels
    }

    pub fn index_of(&self, label: &ModeLabel) -> Option<usize> {
        self.index.get(label).copied()
    }

    /// Indices of every internal component of `(port, level)`.
    pub fn span(&self, port: &str, level: u8) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| l.port == port && l.level == level)
            .map(|(i, _)| i)
            .collect()
    }

    fn resolve(&self, label: &ModeLabel) -> Result<usize, FockError> {
        self.index_of(label)
            .ok_or_else(|| FockError::UnknownMode(label.to_string()))
    }
}

/// A pure state in the Fock space of a mode register.
#[derive(Debug, Clone)]
pub struct FockState {
    register: Arc<ModeRegister>,
    amps: BTreeMap<Vec<u8>, Complex64>,
}

impl FockState {
    pub fn vacuum(register: &Arc<ModeRegister>) -> Self {
        let mut amps = BTreeMap::new();
        amps.insert(vec![0u8; register.len()], Complex64::new(1.0, 0.0));
        Self {
            register: Arc::clone(register),
            amps,
        }
    }

    /// Basis ket with the given occupations; unlisted modes are empty.
    pub fn basis(
        register: &Arc<ModeRegister>,
        placements: &[(ModeLabel, u8)],
    ) -> Result<Self, FockError> {
        let mut occ = vec![0u8; register.len()];
        for (label, count) in placements {
            let i = register.resolve(label)?;
            occ[i] = occ[i].saturating_add(*count);
        }
        let total: u32 = occ.iter().map(|&n| n as u32).sum();
        if total > MAX_PHOTONS {
            return Err(FockError::CutoffExceeded { total });
        }
        let mut amps = BTreeMap::new();
        amps.insert(occ, Complex64::new(1.0, 0.0));
        Ok(Self {
            register: Arc::clone(register),
            amps,
        })
    }

    pub fn register(&self) -> &Arc<ModeRegister> {
        &self.register
    }

    pub fn terms(&self) -> impl Iterator<Item = (&[u8], Complex64)> {
        self.amps.iter().map(|(k, &v)| (k.as_slice(), v))
    }

    pub fn term_count(&self) -> usize {
        self.amps.len()
    }

    pub fn amplitude(&self, placements: &[(ModeLabel, u8)]) -> Result<Complex64, FockError> {
        let mut occ = vec![0u8; self.register.len()];
        for (label, count) in placements {
            let i = self.register.resolve(label)?;
            occ[i] = occ[i].saturating_add(*count);
        }
        Ok(self.amps.get(&occ).copied().unwrap_or_default())
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.values().map(|a| a.norm_sqr()).sum()
    }

    pub fn inner(&self, other: &Self) -> Result<Complex64, FockError> {
        if self.register != other.register {
            return Err(FockError::RegisterMismatch);
        }
        let mut acc = Complex64::new(0.0, 0.0);
        for (occ, amp) in &self.amps {
            if let Some(b) = other.amps.get(occ) {
                acc += amp.conj() * b;
            }
        }
        Ok(acc)
    }

    pub fn normalized(mut self) -> Result<Self, FockError> {
        let n = self.norm_sqr().sqrt();
        if n < 1e-12 {
            return Err(FockError::NullState);
        }
        for amp in self.amps.values_mut() {
            *amp /= n;
        }
        Ok(self)
    }

    pub fn scaled(mut self, factor: Complex64) -> Self {
        for amp in self.amps.values_mut() {
            *amp *= factor;
        }
        self
    }

    fn prune(&mut self) {
        self.amps.retain(|_, a| a.norm() > AMPLITUDE_PRUNE);
    }

    /// Weighted sum of states on a shared register.
    pub fn superpose(terms: &[(Complex64, &FockState)]) -> Result<Self, FockError> {
        let Some((_, first)) = terms.first() else {
            return Err(FockError::NullState);
        };
        let register = Arc::clone(&first.register);
        let mut amps: BTreeMap<Vec<u8>, Complex64> = BTreeMap::new();
        for (coeff, state) in terms {
            if state.register != register {
                return Err(FockError::RegisterMismatch);
            }
            for (occ, amp) in &state.amps {
                *amps.entry(occ.clone()).or_default() += coeff * amp;
            }
        }
        let mut out = Self { register, amps };
        out.prune();
        Ok(out)
    }

    /// Evolves the state through a mode unitary acting on `targets`.
    ///
    /// The unitary's column `j` gives the output amplitudes of a photon
    /// entering `targets[j]`; multi-photon terms expand the corresponding
    /// creation-operator polynomial one photon at a time.
    pub fn apply_unitary(&self, u: &ModeUnitary, targets: &[ModeLabel]) -> Result<Self, FockError> {
        let k = targets.len();
        if u.dim() != k {
            return Err(FockError::DimensionMismatch {
                expected: u.dim(),
                got: k,
            });
        }
        let mut idx = Vec::with_capacity(k);
        for label in targets {
            let i = self.register.resolve(label)?;
            if idx.contains(&i) {
                return Err(FockError::DuplicateMode(label.to_string()));
            }
            idx.push(i);
        }

        let mut out: BTreeMap<Vec<u8>, Complex64> = BTreeMap::new();
        for (occ, amp) in &self.amps {
            let local: Vec<u8> = idx.iter().map(|&i| occ[i]).collect();
            let photons: u32 = local.iter().map(|&n| n as u32).sum();
            if photons == 0 {
                *out.entry(occ.clone()).or_default() += amp;
                continue;
            }
            let in_norm: f64 = local.iter().map(|&n| FACT[n as usize]).product();
            let seed = amp / in_norm.sqrt();
            let mut work: BTreeMap<Vec<u8>, Complex64> = BTreeMap::new();
            work.insert(vec![0u8; k], seed);
            for (j, &nj) in local.iter().enumerate() {
                for _ in 0..nj {
                    let mut next: BTreeMap<Vec<u8>, Complex64> = BTreeMap::new();
                    for (part, coeff) in &work {
                        for row in 0..k {
                            let w = u.entry(row, j);
                            if w.norm_sqr() < 1e-30 {
                                continue;
                            }
                            let mut grown = part.clone();
                            grown[row] += 1;
                            *next.entry(grown).or_default() += coeff * w;
                        }
                    }
                    work = next;
                }
            }
            for (part, coeff) in work {
                let out_norm: f64 = part.iter().map(|&n| FACT[n as usize]).product();
                let mut new_occ = occ.clone();
                for (slot, &i) in idx.iter().enumerate() {
                    new_occ[i] = part[slot];
                }
                *out.entry(new_occ).or_default() += coeff * out_norm.sqrt();
            }
        }

        let mut state = Self {
            register: Arc::clone(&self.register),
            amps: out,
        };
        state.prune();
        Ok(state)
    }

    /// Applies mode-local phases `e^{i phi n}` for each `(mode, phi)` pair.
    pub fn apply_mode_phases(&self, phases: &[(ModeLabel, f64)]) -> Result<Self, FockError> {
        let mut resolved = Vec::with_capacity(phases.len());
        for (label, phi) in phases {
            resolved.push((self.register.resolve(label)?, *phi));
        }
        let mut amps = BTreeMap::new();
        for (occ, amp) in &self.amps {
            let total: f64 = resolved.iter().map(|&(i, phi)| phi * occ[i] as f64).sum();
            amps.insert(occ.clone(), amp * Complex64::cis(total));
        }
        Ok(Self {
            register: Arc::clone(&self.register),
            amps,
        })
    }

    /// Projects onto "exactly one photon in every `pattern` mode, zero in
    /// every `discard` mode", keeping the remaining modes.
    ///
    /// Returns the outcome probability and, when it is nonzero, the
    /// normalized conditional state on the surviving modes.
    pub fn post_select(
        &self,
        pattern: &[ModeLabel],
        discard: &[ModeLabel],
    ) -> Result<(f64, Option<FockState>), FockError> {
        let mut pattern_idx = Vec::with_capacity(pattern.len());
        for label in pattern {
            pattern_idx.push(self.register.resolve(label)?);
        }
        let mut discard_idx = Vec::with_capacity(discard.len());
        for label in discard {
            let i = self.register.resolve(label)?;
            if pattern_idx.contains(&i) {
                return Err(FockError::OverlappingSelection(label.to_string()));
            }
            discard_idx.push(i);
        }
        let removed: Vec<bool> = {
            let mut r = vec![false; self.register.len()];
            for &i in pattern_idx.iter().chain(discard_idx.iter()) {
                if r[i] {
                    return Err(FockError::DuplicateMode(
                        self.register.labels()[i].to_string(),
                    ));
                }
                r[i] = true;
            }
            r
        };
        let kept: Vec<usize> = (0..self.register.len()).filter(|i| !removed[*i]).collect();
        let sub_register = Arc::new(ModeRegister::new(
            kept.iter()
                .map(|&i| self.register.labels()[i].clone())
                .collect(),
        )?);

        let mut probability = 0.0;
        let mut amps: BTreeMap<Vec<u8>, Complex64> = BTreeMap::new();
        for (occ, amp) in &self.amps {
            if pattern_idx.iter().any(|&i| occ[i] != 1) {
                continue;
            }
            if discard_idx.iter().any(|&i| occ[i] != 0) {
                continue;
            }
            probability += amp.norm_sqr();
            let key: Vec<u8> = kept.iter().map(|&i| occ[i]).collect();
            *amps.entry(key).or_default() += amp;
        }
        if probability <= 1e-28 {
            return Ok((0.0, None));
        }
        let scale = probability.sqrt();
        for amp in amps.values_mut() {
            *amp /= scale;
        }
        let mut state = FockState {
            register: sub_register,
            amps,
        };
        state.prune();
        Ok((probability, Some(state)))
    }

    /// Reads out a logical qudit carried by one photon across the given
    /// `(port, level)` spans, tracing over internal components.
    ///
    /// Every ket must hold exactly one photon inside the union of the spans
    /// and none anywhere else.
    pub fn reduce_to_qudit(&self, level_modes: &[ModeLabel]) -> Result<DensityOperator, FockError> {
        let d = level_modes.len();
        if d == 0 {
            return Err(FockError::DimensionMismatch {
                expected: 1,
                got: 0,
            });
        }
        let mut spans: Vec<Vec<usize>> = Vec::with_capacity(d);
        let mut in_span = vec![usize::MAX; self.register.len()];
        for (k, label) in level_modes.iter().enumerate() {
            let span = self.register.span(&label.port, label.level);
            if span.is_empty() {
                return Err(FockError::UnknownMode(label.to_string()));
            }
            for &i in &span {
                if in_span[i] != usize::MAX {
                    return Err(FockError::OverlappingSelection(
                        self.register.labels()[i].to_string(),
                    ));
                }
                in_span[i] = k;
            }
            spans.push(span);
        }
        let internal_dim = spans[0].len();
        if spans.iter().any(|s| s.len() != internal_dim) {
            return Err(FockError::DimensionMismatch {
                expected: internal_dim,
                got: 0,
            });
        }

        // Amplitude vector over (logical level, internal component).
        let mut psi = vec![Complex64::new(0.0, 0.0); d * internal_dim];
        let mut weight = 0.0;
        for (occ, amp) in &self.amps {
            let mut hit = None;
            let mut ok = true;
            for (i, &n) in occ.iter().enumerate() {
                if n == 0 {
                    continue;
                }
                if n != 1 || in_span[i] == usize::MAX || hit.is_some() {
                    ok = false;
                    break;
                }
                hit = Some(i);
            }
            let (Some(i), true) = (hit, ok) else {
                return Err(FockError::PhotonCondition(format!(
                    "ket with weight {:.3e} is not a single photon over the readout spans",
                    amp.norm_sqr()
                )));
            };
            let level = in_span[i];
            let slot = spans[level].iter().position(|&s| s == i).unwrap();
            psi[level * internal_dim + slot] += amp;
            weight += amp.norm_sqr();
        }
        if weight < 1e-28 {
            return Err(FockError::NullState);
        }

        let mut mat = Array2::zeros((d, d));
        for k in 0..d {
            for l in 0..d {
                let mut z = Complex64::new(0.0, 0.0);
                for i in 0..internal_dim {
                    z += psi[k * internal_dim + i] * psi[l * internal_dim + i].conj();
                }
                mat[[k, l]] = z / weight;
            }
        }
        DensityOperator::from_matrix(mat)
    }

    pub(crate) fn apply_creation(&self, poly: &CreationPoly) -> Result<Self, FockError> {
        let mut amps: BTreeMap<Vec<u8>, Complex64> = BTreeMap::new();
        for (occ, amp) in &self.amps {
            for (coeff, monomial) in &poly.terms {
                let mut new_occ = occ.clone();
                let mut factor = 1.0f64;
                let mut total: u32 = occ.iter().map(|&n| n as u32).sum();
                for &(mode, count) in monomial {
                    let before = new_occ[mode] as usize;
                    let after = before + count as usize;
                    total += count as u32;
                    if total > MAX_PHOTONS {
                        return Err(FockError::CutoffExceeded { total });
                    }
                    new_occ[mode] = after as u8;
                    factor *= FACT[after] / FACT[before];
                }
                *amps.entry(new_occ).or_default() += amp * coeff * factor.sqrt();
            }
        }
        let mut out = Self {
            register: Arc::clone(&self.register),
            amps,
        };
        out.prune();
        Ok(out)
    }
}

/// Polynomial in creation operators over a fixed register, used to assemble
/// source states.
#[derive(Debug, Clone)]
pub(crate) struct CreationPoly {
    terms: Vec<(Complex64, Vec<(usize, u8)>)>,
}

impl CreationPoly {
    pub(crate) fn build(
        register: &ModeRegister,
        terms: &[(Complex64, Vec<(ModeLabel, u8)>)],
    ) -> Result<Self, FockError> {
        let mut resolved = Vec::with_capacity(terms.len());
        for (coeff, monomial) in terms {
            let mut modes = Vec::with_capacity(monomial.len());
            for (label, count) in monomial {
                modes.push((register.resolve(label)?, *count));
            }
            resolved.push((*coeff, modes));
        }
        Ok(Self { terms: resolved })
    }

    /// The product of two polynomials (operators commute).
    #[cfg(test)]
    pub(crate) fn product(&self, other: &Self) -> Self {
        let mut terms = Vec::with_capacity(self.terms.len() * other.terms.len());
        for (ca, ma) in &self.terms {
            for (cb, mb) in &other.terms {
                let mut mono: BTreeMap<usize, u8> = BTreeMap::new();
                for &(m, c) in ma.iter().chain(mb.iter()) {
                    *mono.entry(m).or_default() += c;
                }
                terms.push((ca * cb, mono.into_iter().collect()));
            }
        }
        Self { terms }
    }
}

/// Density operator of a logical qudit.
#[derive(Debug, Clone)]
pub struct DensityOperator {
    mat: Array2<Complex64>,
}

impl DensityOperator {
    /// Validates Hermiticity and unit trace.
    pub fn from_matrix(mat: Array2<Complex64>) -> Result<Self, FockError> {
        let n = mat.nrows();
        if n == 0 || mat.ncols() != n {
            return Err(FockError::DimensionMismatch {
                expected: n,
                got: mat.ncols(),
            });
        }
        let mut herm_dev = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                herm_dev = herm_dev.max((mat[[i, j]] - mat[[j, i]].conj()).norm());
            }
        }
        if herm_dev > 1e-9 {
            return Err(FockError::NotHermitian(herm_dev));
        }
        let trace: Complex64 = (0..n).map(|i| mat[[i, i]]).sum();
        if (trace - Complex64::new(1.0, 0.0)).norm() > 1e-9 {
            return Err(FockError::BadTrace(trace.re));
        }
        Ok(Self { mat })
    }

    pub fn from_pure(amps: &[Complex64]) -> Result<Self, FockError> {
        let norm_sqr: f64 = amps.iter().map(|a| a.norm_sqr()).sum();
        if norm_sqr < 1e-24 {
            return Err(FockError::NullState);
        }
        let d = amps.len();
        let mat = Array2::from_shape_fn((d, d), |(i, j)| amps[i] * amps[j].conj() / norm_sqr);
        Self::from_matrix(mat)
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn mat(&self) -> &Array2<Complex64> {
        &self.mat
    }

    pub fn purity(&self) -> f64 {
        let sq = self.mat.dot(&self.mat);
        (0..self.dim()).map(|i| sq[[i, i]].re).sum()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let (vals, _) = linalg::hermitian_eigs(&self.mat);
        vals[0]
    }

    /// `<psi| rho |psi>` for a normalized amplitude vector.
    pub fn overlap(&self, amps: &[Complex64]) -> Result<f64, FockError> {
        if amps.len() != self.dim() {
            return Err(FockError::DimensionMismatch {
                expected: self.dim(),
                got: amps.len(),
            });
        }
        let mut z = Complex64::new(0.0, 0.0);
        for i in 0..self.dim() {
            for j in 0..self.dim() {
                z += amps[i].conj() * self.mat[[i, j]] * amps[j];
            }
        }
        Ok(z.re.clamp(0.0, 1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elements::{beam_splitter, qft_multiport};
    use crate::linalg::random_unitary;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn single_port(levels: u8) -> Arc<ModeRegister> {
        Arc::new(ModeRegister::with_ports(&[("m", levels, 1)]).unwrap())
    }

    fn labels(port: &str, levels: u8) -> Vec<ModeLabel> {
        (0..levels).map(|l| ModeLabel::new(port, l)).collect()
    }

    /// Permanent by Laplace expansion; fine for the tiny matrices in tests.
    fn permanent(m: &Array2<Complex64>) -> Complex64 {
        let n = m.nrows();
        if n == 0 {
            return Complex64::new(1.0, 0.0);
        }
        let mut acc = Complex64::new(0.0, 0.0);
        for col in 0..n {
            let minor = Array2::from_shape_fn((n - 1, n - 1), |(i, j)| {
                m[[i + 1, if j < col { j } else { j + 1 }]]
            });
            acc += m[[0, col]] * permanent(&minor);
        }
        acc
    }

    fn compositions(total: u8, slots: usize) -> Vec<Vec<u8>> {
        if slots == 1 {
            return vec![vec![total]];
        }
        let mut out = Vec::new();
        for first in 0..=total {
            for mut rest in compositions(total - first, slots - 1) {
                let mut v = vec![first];
                v.append(&mut rest);
                out.push(v);
            }
        }
        out
    }

    /// Transition amplitude from the permanent formula:
    /// `<m|U|n> = perm(U[m,n]) / sqrt(prod m! prod n!)`.
    fn permanent_amplitude(u: &ModeUnitary, input: &[u8], output: &[u8]) -> Complex64 {
        let total: usize = input.iter().map(|&n| n as usize).sum();
        let mut rows = Vec::with_capacity(total);
        for (mode, &n) in output.iter().enumerate() {
            for _ in 0..n {
                rows.push(mode);
            }
        }
        let mut cols = Vec::with_capacity(total);
        for (mode, &n) in input.iter().enumerate() {
            for _ in 0..n {
                cols.push(mode);
            }
        }
        let sub = Array2::from_shape_fn((total, total), |(i, j)| u.entry(rows[i], cols[j]));
        let norm: f64 = input
            .iter()
            .chain(output.iter())
            .map(|&n| FACT[n as usize])
            .product();
        permanent(&sub) / norm.sqrt()
    }

    #[test]
    fn evolution_matches_the_permanent_formula() {
        let cases: &[(u8, &[u8])] = &[
            (2, &[1, 1]),
            (3, &[1, 0, 2]),
            (4, &[2, 1, 0, 0]),
            (5, &[1, 1, 1, 0, 0]),
            (6, &[0, 2, 0, 1, 0, 0]),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for &(modes, occ) in cases {
            let reg = single_port(modes);
            let u = ModeUnitary::new(random_unitary(modes as usize, &mut rng)).unwrap();
            let placements: Vec<(ModeLabel, u8)> = occ
                .iter()
                .enumerate()
                .filter(|(_, &n)| n > 0)
                .map(|(l, &n)| (ModeLabel::new("m", l as u8), n))
                .collect();
            let input = FockState::basis(&reg, &placements).unwrap();
            let evolved = input.apply_unitary(&u, &labels("m", modes)).unwrap();
            let total: u8 = occ.iter().sum();
            let mut prob = 0.0;
            for out in compositions(total, modes as usize) {
                let got = {
                    let key: Vec<(ModeLabel, u8)> = out
                        .iter()
                        .enumerate()
                        .filter(|(_, &n)| n > 0)
                        .map(|(l, &n)| (ModeLabel::new("m", l as u8), n))
                        .collect();
                    evolved.amplitude(&key).unwrap()
                };
                let want = permanent_amplitude(&u, occ, &out);
                assert!(
                    (got - want).norm() < 1e-10,
                    "modes={modes} occ={occ:?} out={out:?}: {got} vs {want}"
                );
                prob += want.norm_sqr();
            }
            assert!((prob - 1.0).abs() < 1e-10);
            assert!((evolved.norm_sqr() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn balanced_splitter_shows_two_photon_interference() {
        let reg = single_port(2);
        let state = FockState::basis(
            &reg,
            &[(ModeLabel::new("m", 0), 1), (ModeLabel::new("m", 1), 1)],
        )
        .unwrap();
        let out = state
            .apply_unitary(&beam_splitter(PI / 4.0, 0.0), &labels("m", 2))
            .unwrap();
        let coincidence = out
            .amplitude(&[(ModeLabel::new("m", 0), 1), (ModeLabel::new("m", 1), 1)])
            .unwrap();
        assert!(coincidence.norm() < 1e-12);
        let bunched = out.amplitude(&[(ModeLabel::new("m", 0), 2)]).unwrap();
        assert!((bunched.norm_sqr() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sequential_application_matches_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let reg = single_port(3);
        let state = FockState::basis(
            &reg,
            &[(ModeLabel::new("m", 0), 2), (ModeLabel::new("m", 2), 1)],
        )
        .unwrap();
        let u = ModeUnitary::new(random_unitary(3, &mut rng)).unwrap();
        let v = qft_multiport(3).unwrap();
        let step = state
            .apply_unitary(&u, &labels("m", 3))
            .unwrap()
            .apply_unitary(&v, &labels("m", 3))
            .unwrap();
        let fused = state
            .apply_unitary(&u.then(&v).unwrap(), &labels("m", 3))
            .unwrap();
        let overlap = step.inner(&fused).unwrap();
        assert!((overlap.re - 1.0).abs() < 1e-11 && overlap.im.abs() < 1e-11);
    }

    #[test]
    fn unitary_on_disjoint_targets_leaves_others_alone() {
        let reg = Arc::new(ModeRegister::with_ports(&[("a", 2, 1), ("b", 2, 1)]).unwrap());
        let state = FockState::basis(
            &reg,
            &[(ModeLabel::new("a", 0), 1), (ModeLabel::new("b", 1), 2)],
        )
        .unwrap();
        let out = state
            .apply_unitary(&beam_splitter(0.3, 0.7), &labels("a", 2))
            .unwrap();
        for (occ, _) in out.terms() {
            assert_eq!(occ[3], 2, "spectator mode changed");
        }
    }

    #[test]
    fn post_selection_probabilities_partition_unity() {
        let reg = single_port(3);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let u = ModeUnitary::new(random_unitary(3, &mut rng)).unwrap();
        let state = FockState::basis(
            &reg,
            &[(ModeLabel::new("m", 0), 1), (ModeLabel::new("m", 1), 1)],
        )
        .unwrap()
        .apply_unitary(&u, &labels("m", 3))
        .unwrap();

        let m: Vec<ModeLabel> = labels("m", 3);
        let mut total = 0.0;
        let mut matched_weight = 0.0;
        for i in 0..3 {
            for j in (i + 1)..3 {
                let k = (0..3).find(|&x| x != i && x != j).unwrap();
                let (p, cond) = state
                    .post_select(&[m[i].clone(), m[j].clone()], &[m[k].clone()])
                    .unwrap();
                total += p;
                matched_weight += p;
                if let Some(c) = cond {
                    assert!((c.norm_sqr() - 1.0).abs() < 1e-12);
                    assert_eq!(c.register().len(), 0);
                }
            }
        }
        // Remainder = bunched outcomes; together they restore unity.
        let bunched: f64 = state
            .terms()
            .filter(|(occ, _)| occ.iter().any(|&n| n >= 2))
            .map(|(_, a)| a.norm_sqr())
            .sum();
        assert!((total + bunched - 1.0).abs() < 1e-9);
        assert!(matched_weight > 0.0);
    }

    #[test]
    fn post_select_rejects_overlap() {
        let reg = single_port(2);
        let state = FockState::vacuum(&reg);
        let err = state
            .post_select(&[ModeLabel::new("m", 0)], &[ModeLabel::new("m", 0)])
            .unwrap_err();
        assert!(matches!(err, FockError::OverlappingSelection(_)));
    }

    #[test]
    fn reduce_recovers_a_pure_qutrit() {
        let reg = Arc::new(ModeRegister::with_ports(&[("c", 3, 1)]).unwrap());
        let amps = [
            Complex64::new(0.5, 0.0),
            Complex64::new(0.0, -0.5),
            Complex64::new(0.5, 0.5),
        ];
        let kets: Vec<FockState> = (0..3)
            .map(|l| FockState::basis(&reg, &[(ModeLabel::new("c", l), 1)]).unwrap())
            .collect();
        let terms: Vec<(Complex64, &FockState)> =
            amps.iter().zip(kets.iter()).map(|(&a, k)| (a, k)).collect();
        let state = FockState::superpose(&terms).unwrap().normalized().unwrap();
        let rho = state.reduce_to_qudit(&labels("c", 3)).unwrap();
        assert!((rho.purity() - 1.0).abs() < 1e-10);
        let norm: f64 = amps.iter().map(|a| a.norm_sqr()).sum();
        let psi: Vec<Complex64> = amps.iter().map(|a| a / norm.sqrt()).collect();
        assert!((rho.overlap(&psi).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn reduce_traces_over_internal_components() {
        let reg = Arc::new(ModeRegister::with_ports(&[("c", 3, 2)]).unwrap());
        let k0 = FockState::basis(&reg, &[(ModeLabel::with_internal("c", 0, 0), 1)]).unwrap();
        let k1 = FockState::basis(&reg, &[(ModeLabel::with_internal("c", 1, 1), 1)]).unwrap();
        let half = Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        let state = FockState::superpose(&[(half, &k0), (half, &k1)]).unwrap();
        let rho = state.reduce_to_qudit(&labels("c", 3)).unwrap();
        // Orthogonal internal tags destroy coherence between the levels.
        assert!((rho.mat()[[0, 0]].re - 0.5).abs() < 1e-12);
        assert!((rho.mat()[[1, 1]].re - 0.5).abs() < 1e-12);
        assert!(rho.mat()[[0, 1]].norm() < 1e-12);
        assert!((rho.purity() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn reduce_rejects_multi_photon_support() {
        let reg = Arc::new(ModeRegister::with_ports(&[("c", 3, 1)]).unwrap());
        let state = FockState::basis(&reg, &[(ModeLabel::new("c", 0), 2)]).unwrap();
        assert!(matches!(
            state.reduce_to_qudit(&labels("c", 3)),
            Err(FockError::PhotonCondition(_))
        ));
    }

    #[test]
    fn creation_polynomials_build_number_states() {
        let reg = single_port(2);
        let m0 = ModeLabel::new("m", 0);
        let poly = CreationPoly::build(&reg, &[(Complex64::new(1.0, 0.0), vec![(m0.clone(), 1)])])
            .unwrap();
        // (a†)^2 |vac> = sqrt(2) |2>.
        let state = FockState::vacuum(&reg)
            .apply_creation(&poly)
            .unwrap()
            .apply_creation(&poly)
            .unwrap();
        let amp = state.amplitude(&[(m0.clone(), 2)]).unwrap();
        assert!((amp - Complex64::new(2f64.sqrt(), 0.0)).norm() < 1e-12);

        let squared = poly.product(&poly);
        let direct = FockState::vacuum(&reg).apply_creation(&squared).unwrap();
        assert!((direct.amplitude(&[(m0, 2)]).unwrap() - amp).norm() < 1e-12);
    }

    #[test]
    fn photon_cutoff_is_enforced() {
        let reg = single_port(1);
        let m0 = ModeLabel::new("m", 0);
        assert!(matches!(
            FockState::basis(&reg, &[(m0.clone(), 7)]),
            Err(FockError::CutoffExceeded { total: 7 })
        ));
        let poly = CreationPoly::build(&reg, &[(Complex64::new(1.0, 0.0), vec![(m0, 3)])]).unwrap();
        let mut state = FockState::vacuum(&reg);
        state = state.apply_creation(&poly).unwrap();
        state = state.apply_creation(&poly).unwrap();
        assert!(matches!(
            state.apply_creation(&poly),
            Err(FockError::CutoffExceeded { .. })
        ));
    }

    #[test]
    fn mode_phases_act_per_photon() {
        let reg = single_port(2);
        let state = FockState::basis(&reg, &[(ModeLabel::new("m", 0), 2)]).unwrap();
        let rotated = state
            .apply_mode_phases(&[(ModeLabel::new("m", 0), PI / 2.0)])
            .unwrap();
        let amp = rotated.amplitude(&[(ModeLabel::new("m", 0), 2)]).unwrap();
        assert!((amp - Complex64::new(-1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn density_operator_validation() {
        let mut bad = Array2::zeros((2, 2));
        bad[[0, 0]] = Complex64::new(1.0, 0.0);
        bad[[0, 1]] = Complex64::new(0.5, 0.0);
        assert!(matches!(
            DensityOperator::from_matrix(bad),
            Err(FockError::NotHermitian(_))
        ));
        let mut off = Array2::zeros((2, 2));
        off[[0, 0]] = Complex64::new(0.7, 0.0);
        off[[1, 1]] = Complex64::new(0.7, 0.0);
        assert!(matches!(
            DensityOperator::from_matrix(off),
            Err(FockError::BadTrace(_))
        ));
        let pure =
            DensityOperator::from_pure(&[Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0)])
                .unwrap();
        assert!((pure.purity() - 1.0).abs() < 1e-12);
        assert!(pure.min_eigenvalue() > -1e-12);
    }

    proptest! {
        #[test]
        fn norm_is_preserved_by_any_splitter(
            theta in 0.0..(PI / 2.0),
            phi in -PI..PI,
            re0 in -1.0f64..1.0,
            im0 in -1.0f64..1.0,
            re1 in -1.0f64..1.0,
        ) {
            let reg = single_port(2);
            let k0 = FockState::basis(&reg, &[(ModeLabel::new("m", 0), 1)]).unwrap();
            let k1 = FockState::basis(&reg, &[(ModeLabel::new("m", 0), 1), (ModeLabel::new("m", 1), 1)]).unwrap();
            let state = FockState::superpose(&[
                (Complex64::new(re0, im0), &k0),
                (Complex64::new(re1, 0.4), &k1),
            ]).unwrap();
            prop_assume!(state.norm_sqr() > 1e-6);
            let state = state.normalized().unwrap();
            let out = state.apply_unitary(&beam_splitter(theta, phi), &labels("m", 2)).unwrap();
            prop_assert!((out.norm_sqr() - 1.0).abs() < 1e-10);
        }

        #[test]
        fn relabeled_targets_commute_with_row_swaps(theta in 0.01..1.5f64, phi in -3.0..3.0f64) {
            let reg = single_port(2);
            let state = FockState::basis(
                &reg,
                &[(ModeLabel::new("m", 0), 1), (ModeLabel::new("m", 1), 2)],
            ).unwrap();
            let bs = beam_splitter(theta, phi);
            let swapped = {
                let m = bs.mat();
                let mut s = Array2::zeros((2, 2));
                for i in 0..2 {
                    for j in 0..2 {
                        s[[1 - i, 1 - j]] = m[[i, j]];
                    }
                }
                ModeUnitary::new(s).unwrap()
            };
            let a = state.apply_unitary(&bs, &labels("m", 2)).unwrap();
            let rev: Vec<ModeLabel> = labels("m", 2).into_iter().rev().collect();
            let b = state.apply_unitary(&swapped, &rev).unwrap();
            let overlap = a.inner(&b).unwrap();
            prop_assert!((overlap.re - 1.0).abs() < 1e-10);
        }
    }
}
