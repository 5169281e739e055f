//! Linear-optical elements as validated mode unitaries.
//!
//! All elements are expressed in the mode-amplitude picture: an element with
//! matrix `U` sends annihilation operator `a_j` to `sum_k U[k][j] a_k`, so a
//! single photon in mode `j` exits in mode `k` with amplitude `U[k][j]`.
//! Reflections carry the `+i` convention throughout.

use ndarray::Array2;
use num_complex::Complex64;
use std::f64::consts::PI;
use std::fmt::Write as _;
use thiserror::Error;

use crate::linalg;

const UNITARITY_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum ElementError {
    #[error("matrix is not unitary (deviation {0:.3e})")]
    NotUnitary(f64),
    #[error("reflectivity {0} outside [0, 1]")]
    BadReflectivity(f64),
    #[error("unsupported mode count {0}")]
    BadModeCount(usize),
    #[error("invalid target modes: {0}")]
    BadTargets(String),
    #[error("mesh parse error: {0}")]
    Parse(String),
}

/// A unitary acting on a set of optical modes.
///
/// Construction checks unitarity, so holding a `ModeUnitary` is a proof that
/// the matrix preserves photon-number statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeUnitary {
    mat: Array2<Complex64>,
}

impl ModeUnitary {
    pub fn new(mat: Array2<Complex64>) -> Result<Self, ElementError> {
        if mat.nrows() != mat.ncols() || mat.nrows() == 0 {
            return Err(ElementError::BadModeCount(mat.nrows()));
        }
        let dev = linalg::unitarity_deviation(&mat);
        if dev > UNITARITY_TOL {
            return Err(ElementError::NotUnitary(dev));
        }
        Ok(Self { mat })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            mat: linalg::identity(n),
        }
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn mat(&self) -> &Array2<Complex64> {
        &self.mat
    }

    pub fn entry(&self, row: usize, col: usize) -> Complex64 {
        self.mat[[row, col]]
    }

    pub fn adjoint(&self) -> Self {
        Self {
            mat: linalg::adjoint(&self.mat),
        }
    }

    /// Matrix for `other` applied after `self`.
    pub fn then(&self, other: &Self) -> Result<Self, ElementError> {
        if self.dim() != other.dim() {
            return Err(ElementError::BadModeCount(other.dim()));
        }
        Ok(Self {
            mat: other.mat.dot(&self.mat),
        })
    }

    /// Embeds this unitary into `n` modes, acting on the listed targets.
    pub fn embedded(&self, n: usize, targets: &[usize]) -> Result<Self, ElementError> {
        if targets.len() != self.dim() {
            return Err(ElementError::BadTargets(format!(
                "{} targets for a {}-mode element",
                targets.len(),
                self.dim()
            )));
        }
        let mut seen = vec![false; n];
        for &t in targets {
            if t >= n || seen[t] {
                return Err(ElementError::BadTargets(format!(
                    "target {t} out of range or repeated"
                )));
            }
            seen[t] = true;
        }
        let mut mat = linalg::identity(n);
        for (i, &ti) in targets.iter().enumerate() {
            for (j, &tj) in targets.iter().enumerate() {
                mat[[ti, tj]] = self.mat[[i, j]];
            }
        }
        Ok(Self { mat })
    }

    pub fn approx_eq(&self, other: &Self, tol: f64) -> bool {
        self.dim() == other.dim() && linalg::max_abs_diff(&self.mat, &other.mat) <= tol
    }

    /// Equality after removing one global phase.
    pub fn approx_eq_up_to_phase(&self, other: &Self, tol: f64) -> bool {
        if self.dim() != other.dim() {
            return false;
        }
        let mut phase = None;
        for (a, b) in self.mat.iter().zip(other.mat.iter()) {
            if a.norm() > 1e-6 && b.norm() > 1e-6 {
                phase = Some(b / a * (a.norm() / b.norm()));
                break;
            }
        }
        let Some(phase) = phase else { return false };
        self.mat
            .iter()
            .zip(other.mat.iter())
            .all(|(a, b)| (a * phase - b).norm() <= tol)
    }

    #[cfg(test)]
    pub(crate) fn conjugated(&self) -> Self {
        Self {
            mat: self.mat.mapv(|z| z.conj()),
        }
    }
}

/// Two-mode beam splitter with transmission `cos(theta)`.
///
/// Matrix `[[cos t, i e^{i phi} sin t], [i e^{-i phi} sin t, cos t]]`; a
/// balanced splitter is `theta = pi/4`.
pub fn beam_splitter(theta: f64, phi: f64) -> ModeUnitary {
    let (s, c) = theta.sin_cos();
    let r = Complex64::new(0.0, 1.0) * Complex64::cis(phi) * s;
    let mut mat = Array2::zeros((2, 2));
    mat[[0, 0]] = Complex64::new(c, 0.0);
    mat[[0, 1]] = r;
    mat[[1, 0]] = Complex64::new(0.0, 1.0) * Complex64::cis(-phi) * s;
    mat[[1, 1]] = Complex64::new(c, 0.0);
    ModeUnitary { mat }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WaveplateKind {
    Half,
    Quarter,
}

/// Waveplate on one spatial mode's `(h, v)` polarization pair, fast axis at
/// `angle` from horizontal.
pub fn waveplate(kind: WaveplateKind, angle: f64) -> ModeUnitary {
    let (s, c) = angle.sin_cos();
    let rot = |m: &Array2<Complex64>| -> Array2<Complex64> {
        let mut r = Array2::zeros((2, 2));
        r[[0, 0]] = Complex64::new(c, 0.0);
        r[[0, 1]] = Complex64::new(-s, 0.0);
        r[[1, 0]] = Complex64::new(s, 0.0);
        r[[1, 1]] = Complex64::new(c, 0.0);
        let rt = Array2::from_shape_fn((2, 2), |(i, j)| r[[j, i]]);
        r.dot(m).dot(&rt)
    };
    let mut retard = Array2::zeros((2, 2));
    retard[[0, 0]] = Complex64::new(1.0, 0.0);
    retard[[1, 1]] = match kind {
        WaveplateKind::Half => Complex64::new(-1.0, 0.0),
        WaveplateKind::Quarter => Complex64::new(0.0, -1.0),
    };
    ModeUnitary { mat: rot(&retard) }
}

/// Polarizing beam splitter between two spatial modes.
///
/// Mode order is `[(p1,h), (p1,v), (p2,h), (p2,v)]`: horizontal transmits,
/// vertical reflects with phase `i`.
pub fn polarizing_splitter() -> ModeUnitary {
    let mut mat = Array2::zeros((4, 4));
    mat[[0, 0]] = Complex64::new(1.0, 0.0);
    mat[[2, 2]] = Complex64::new(1.0, 0.0);
    mat[[3, 1]] = Complex64::new(0.0, 1.0);
    mat[[1, 3]] = Complex64::new(0.0, 1.0);
    ModeUnitary { mat }
}

/// Partially polarizing beam splitter between two spatial modes.
///
/// Same mode order as [`polarizing_splitter`]. Horizontal light splits with
/// reflectivity `r_h`; vertical light is fully reflected.
pub fn partially_polarizing_splitter(r_h: f64) -> Result<ModeUnitary, ElementError> {
    if !(0.0..=1.0).contains(&r_h) || !r_h.is_finite() {
        return Err(ElementError::BadReflectivity(r_h));
    }
    let t = (1.0 - r_h).sqrt();
    let r = Complex64::new(0.0, r_h.sqrt());
    let mut mat = Array2::zeros((4, 4));
    mat[[0, 0]] = Complex64::new(t, 0.0);
    mat[[0, 2]] = r;
    mat[[2, 0]] = r;
    mat[[2, 2]] = Complex64::new(t, 0.0);
    mat[[1, 3]] = Complex64::new(0.0, 1.0);
    mat[[3, 1]] = Complex64::new(0.0, 1.0);
    Ok(ModeUnitary { mat })
}

/// Discrete-Fourier multiport on `n` modes: entries `omega^{jk} / sqrt(n)`.
pub fn qft_multiport(n: usize) -> Result<ModeUnitary, ElementError> {
    if n == 0 {
        return Err(ElementError::BadModeCount(0));
    }
    let root = 1.0 / (n as f64).sqrt();
    let mat = Array2::from_shape_fn((n, n), |(j, k)| {
        Complex64::cis(2.0 * PI * (j * k) as f64 / n as f64) * root
    });
    Ok(ModeUnitary { mat })
}

/// The hybrid splitter network that realizes a symmetric tritter on three
/// polarization-encoded inputs.
///
/// Six physical modes, rails `u, w, z` with `(h, v)` each, indexed
/// `(u,h)=0, (u,v)=1, (w,h)=2, (w,v)=3, (z,h)=4, (z,v)=5`. Light traverses,
/// in order: a polarizing splitter between `u` and `z`, a half-wave plate at
/// 22.5 degrees on `u`, a partially polarizing splitter between `u` and `w`,
/// a quarter-wave plate at 45 degrees on `w`, and a polarizing splitter
/// between `w` and `z`.
#[derive(Debug, Clone)]
pub struct HybridMultiport {
    unitary: ModeUnitary,
    inputs: [usize; 3],
    outputs: [usize; 3],
}

impl HybridMultiport {
    /// Full six-mode unitary.
    pub fn unitary(&self) -> &ModeUnitary {
        &self.unitary
    }

    /// Physical input mode indices for logical ports `(a, b, x)`.
    pub fn inputs(&self) -> [usize; 3] {
        self.inputs
    }

    /// Physical output mode indices for detector ports `(a', b', x')`.
    pub fn outputs(&self) -> [usize; 3] {
        self.outputs
    }

    /// Effective three-port transfer matrix, `T[out][in]` over the port
    /// dictionaries above. Unitary because the three inputs couple only to
    /// the three outputs.
    pub fn transfer(&self) -> Result<ModeUnitary, ElementError> {
        let mat = Array2::from_shape_fn((3, 3), |(i, j)| {
            self.unitary.entry(self.outputs[i], self.inputs[j])
        });
        ModeUnitary::new(mat)
    }
}

/// Hybrid multiport at the balanced working point `r_h = 1/3`.
pub fn hybrid_multiport() -> HybridMultiport {
    hybrid_multiport_with(1.0 / 3.0).expect("1/3 is a valid reflectivity")
}

/// Hybrid multiport with an arbitrary horizontal reflectivity, used for
/// tolerance studies and for the detuned negative control.
pub fn hybrid_multiport_with(r_h: f64) -> Result<HybridMultiport, ElementError> {
    let n = 6;
    let pbs_uz = polarizing_splitter().embedded(n, &[0, 1, 4, 5])?;
    let hwp_u = waveplate(WaveplateKind::Half, PI / 8.0).embedded(n, &[0, 1])?;
    let ppdbs_uw = partially_polarizing_splitter(r_h)?.embedded(n, &[0, 1, 2, 3])?;
    let qwp_w = waveplate(WaveplateKind::Quarter, PI / 4.0).embedded(n, &[2, 3])?;
    let pbs_wz = polarizing_splitter().embedded(n, &[2, 3, 4, 5])?;
    let unitary = pbs_uz
        .then(&hwp_u)?
        .then(&ppdbs_uw)?
        .then(&qwp_w)?
        .then(&pbs_wz)?;
    Ok(HybridMultiport {
        unitary,
        inputs: [0, 2, 5],
        outputs: [0, 2, 5],
    })
}

/// Searches for diagonal phase layers `d_out`, `d_in` with
/// `diag(d_out) * t * diag(d_in) = target`, entrywise within `tol`.
///
/// Returns `(d_out, d_in)` or `None` when no such layers exist. Both
/// matrices must be free of (near-)zero entries for the factorization to be
/// well posed.
pub fn diagonal_equivalence(
    t: &ModeUnitary,
    target: &ModeUnitary,
    tol: f64,
) -> Option<(Vec<Complex64>, Vec<Complex64>)> {
    let n = t.dim();
    if target.dim() != n {
        return None;
    }
    for i in 0..n {
        for j in 0..n {
            if t.entry(i, j).norm() < 1e-9 || target.entry(i, j).norm() < 1e-9 {
                return None;
            }
        }
    }
    let mut d_in = vec![Complex64::new(0.0, 0.0); n];
    let mut d_out = vec![Complex64::new(0.0, 0.0); n];
    for k in 0..n {
        d_in[k] = target.entry(0, k) / t.entry(0, k);
    }
    d_out[0] = Complex64::new(1.0, 0.0);
    for j in 1..n {
        d_out[j] = target.entry(j, 0) / (t.entry(j, 0) * d_in[0]);
    }
    for i in 0..n {
        for j in 0..n {
            let got = d_out[i] * t.entry(i, j) * d_in[j];
            if (got - target.entry(i, j)).norm() > tol {
                return None;
            }
        }
    }
    Some((d_out, d_in))
}

/// One element of a planar interferometer mesh.
#[derive(Debug, Clone, PartialEq)]
pub enum MeshElement {
    /// Beam splitter [`beam_splitter`]`(theta, phi)` between modes `i < j`.
    Rotation {
        i: usize,
        j: usize,
        theta: f64,
        phi: f64,
    },
    /// Output phase `e^{i phi}` on mode `i`.
    Phase { i: usize, phi: f64 },
}

/// An ordered mesh of two-mode rotations and output phases; elements are
/// listed in the order light traverses them.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshPlan {
    pub modes: usize,
    pub elements: Vec<MeshElement>,
}

impl MeshPlan {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "MODES {}", self.modes);
        for el in &self.elements {
            match el {
                MeshElement::Rotation { i, j, theta, phi } => {
                    let _ = writeln!(out, "ROT {i} {j} {theta:.11e} {phi:.11e}");
                }
                MeshElement::Phase { i, phi } => {
                    let _ = writeln!(out, "PHASE {i} {phi:.11e}");
                }
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, ElementError> {
        let mut modes = None;
        let mut elements = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let fail = |msg: &str| ElementError::Parse(format!("line {}: {msg}", lineno + 1));
            match fields[0] {
                "MODES" => {
                    if fields.len() != 2 {
                        return Err(fail("expected MODES <n>"));
                    }
                    modes = Some(
                        fields[1]
                            .parse::<usize>()
                            .map_err(|_| fail("bad mode count"))?,
                    );
                }
                "ROT" => {
                    if fields.len() != 5 {
                        return Err(fail("expected ROT <i> <j> <theta> <phi>"));
                    }
                    let i = fields[1].parse::<usize>().map_err(|_| fail("bad index"))?;
                    let j = fields[2].parse::<usize>().map_err(|_| fail("bad index"))?;
                    let theta = fields[3].parse::<f64>().map_err(|_| fail("bad angle"))?;
                    let phi = fields[4].parse::<f64>().map_err(|_| fail("bad angle"))?;
                    if !theta.is_finite() || !phi.is_finite() {
                        return Err(fail("non-finite angle"));
                    }
                    elements.push(MeshElement::Rotation { i, j, theta, phi });
                }
                "PHASE" => {
                    if fields.len() != 3 {
                        return Err(fail("expected PHASE <i> <phi>"));
                    }
                    let i = fields[1].parse::<usize>().map_err(|_| fail("bad index"))?;
                    let phi = fields[2].parse::<f64>().map_err(|_| fail("bad angle"))?;
                    if !phi.is_finite() {
                        return Err(fail("non-finite angle"));
                    }
                    elements.push(MeshElement::Phase { i, phi });
                }
                other => return Err(fail(&format!("unknown directive {other}"))),
            }
        }
        let modes = modes.ok_or_else(|| ElementError::Parse("missing MODES header".into()))?;
        Ok(Self { modes, elements })
    }
}

fn wrap_angle(phi: f64) -> f64 {
    let mut p = phi.rem_euclid(2.0 * PI);
    if p > PI {
        p -= 2.0 * PI;
    }
    p
}

/// Triangular mesh decomposition of an `n`-mode unitary.
///
/// Eliminates entries row-major from the last row upward by right-multiplied
/// two-mode rotations, leaving rotation angles in `[0, pi/2]` and phases in
/// `(-pi, pi]`. [`recompose`] inverts the decomposition.
pub fn reck_decompose(u: &ModeUnitary) -> MeshPlan {
    let n = u.dim();
    let mut w = u.mat().clone();
    let mut forward: Vec<(usize, usize, f64, f64)> = Vec::new();

    for r in (1..n).rev() {
        for c in 0..r {
            let target = w[[r, c]];
            if target.norm() < 1e-13 {
                continue;
            }
            let pivot = w[[r, r]];
            let (theta, phi) = if pivot.norm() < 1e-13 {
                (PI / 2.0, 0.0)
            } else {
                // Solve w[r][c] cos(t) + w[r][r] i e^{-i phi} sin(t) = 0.
                let z = -target / pivot;
                (z.norm().atan(), wrap_angle(PI / 2.0 - z.arg()))
            };
            let rot = beam_splitter(theta, phi)
                .embedded(n, &[c, r])
                .expect("valid targets");
            w = w.dot(rot.mat());
            forward.push((c, r, theta, phi));
        }
    }

    let mut elements: Vec<MeshElement> = forward
        .into_iter()
        .map(|(i, j, theta, phi)| MeshElement::Rotation {
            i,
            j,
            theta,
            phi: wrap_angle(phi + PI),
        })
        .collect();
    for i in 0..n {
        let phi = w[[i, i]].arg();
        if phi.abs() > 1e-13 {
            elements.push(MeshElement::Phase { i, phi });
        }
    }
    MeshPlan { modes: n, elements }
}

/// Rebuilds the unitary a mesh plan implements.
pub fn recompose(plan: &MeshPlan) -> Result<ModeUnitary, ElementError> {
    let n = plan.modes;
    if n == 0 {
        return Err(ElementError::BadModeCount(0));
    }
    let mut acc = ModeUnitary::identity(n);
    for el in &plan.elements {
        let step = match *el {
            MeshElement::Rotation { i, j, theta, phi } => {
                if i >= j {
                    return Err(ElementError::BadTargets(format!("ROT {i} {j} needs i < j")));
                }
                beam_splitter(theta, phi).embedded(n, &[i, j])?
            }
            MeshElement::Phase { i, phi } => {
                let mut m = Array2::zeros((1, 1));
                m[[0, 0]] = Complex64::cis(phi);
                ModeUnitary { mat: m }.embedded(n, &[i])?
            }
        };
        acc = acc.then(&step)?;
    }
    ModeUnitary::new(acc.mat.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random_unitary;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn beam_splitter_is_balanced_at_quarter_pi() {
        let bs = beam_splitter(PI / 4.0, 0.0);
        for i in 0..2 {
            for j in 0..2 {
                assert!((bs.entry(i, j).norm_sqr() - 0.5).abs() < 1e-12);
            }
        }
        assert!((bs.entry(0, 1) - c(0.0, 1.0 / 2f64.sqrt())).norm() < 1e-12);
    }

    #[test]
    fn half_wave_plate_at_22_5_is_hadamard() {
        let hwp = waveplate(WaveplateKind::Half, PI / 8.0);
        let s = 1.0 / 2f64.sqrt();
        assert!((hwp.entry(0, 0) - c(s, 0.0)).norm() < 1e-12);
        assert!((hwp.entry(0, 1) - c(s, 0.0)).norm() < 1e-12);
        assert!((hwp.entry(1, 0) - c(s, 0.0)).norm() < 1e-12);
        assert!((hwp.entry(1, 1) - c(-s, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn quarter_wave_plate_at_45_makes_circular() {
        let qwp = waveplate(WaveplateKind::Quarter, PI / 4.0);
        // h maps to (h + i v) / sqrt(2) up to a global phase.
        let h_out = (qwp.entry(0, 0), qwp.entry(1, 0));
        let ratio = h_out.1 / h_out.0;
        assert!((ratio - c(0.0, 1.0)).norm() < 1e-12);
        assert!((h_out.0.norm_sqr() - 0.5).abs() < 1e-12);
        // Applying it twice acts as a half-wave plate up to a global phase.
        let twice = qwp.then(&qwp).unwrap();
        let hwp = waveplate(WaveplateKind::Half, PI / 4.0);
        assert!(twice.approx_eq_up_to_phase(&hwp, 1e-12));
    }

    #[test]
    fn qft_multiport_matches_roots_of_unity() {
        let f = qft_multiport(3).unwrap();
        let w = Complex64::cis(2.0 * PI / 3.0);
        let s = 1.0 / 3f64.sqrt();
        for j in 0..3 {
            for k in 0..3 {
                let want = w.powu((j * k) as u32) * s;
                assert!((f.entry(j, k) - want).norm() < 1e-12);
            }
        }
        // Fourth power of the dimension-3 transform is the identity.
        let f2 = f.then(&f).unwrap();
        let f4 = f2.then(&f2).unwrap();
        assert!(f4.approx_eq(&ModeUnitary::identity(3), 1e-10));
    }

    #[test]
    fn hybrid_multiport_has_balanced_magnitudes() {
        let hm = hybrid_multiport();
        let t = hm.transfer().unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!(
                    (t.entry(i, j).norm_sqr() - 1.0 / 3.0).abs() < 1e-10,
                    "|t[{i}][{j}]|^2 = {}",
                    t.entry(i, j).norm_sqr()
                );
            }
        }
    }

    #[test]
    fn hybrid_multiport_is_fourier_up_to_phases() {
        let t = hybrid_multiport().transfer().unwrap();
        let f = qft_multiport(3).unwrap();
        let direct = diagonal_equivalence(&t, &f, 1e-9);
        let mirrored = diagonal_equivalence(&t, &f.conjugated(), 1e-9);
        assert!(
            direct.is_some() || mirrored.is_some(),
            "transfer matrix is not Fourier-equivalent: direct={direct:?} mirrored={mirrored:?}"
        );
        // The realized chirality is fixed by the +i reflection convention.
        assert!(
            direct.is_some(),
            "expected the un-mirrored Fourier transform"
        );
    }

    #[test]
    fn hybrid_multiport_leaves_idle_modes_dark() {
        let hm = hybrid_multiport();
        let u = hm.unitary();
        // Inputs only couple to the three detector outputs.
        for &input in &hm.inputs() {
            for out in 0..6 {
                if hm.outputs().contains(&out) {
                    continue;
                }
                assert!(
                    u.entry(out, input).norm() < 1e-12,
                    "input {input} leaks to mode {out}"
                );
            }
        }
    }

    #[test]
    fn detuned_multiport_fails_the_balance_check() {
        let t = hybrid_multiport_with(0.0).unwrap().transfer().unwrap();
        assert!((t.entry(0, 0).norm_sqr() - 0.5).abs() < 1e-12);
        let f = qft_multiport(3).unwrap();
        assert!(diagonal_equivalence(&t, &f, 1e-9).is_none());
        assert!(diagonal_equivalence(&t, &f.conjugated(), 1e-9).is_none());
    }

    #[test]
    fn diagonal_equivalence_recovers_planted_phases() {
        let f = qft_multiport(3).unwrap();
        let d_out = [0.3f64, -1.2, 2.4];
        let d_in = [1.9f64, 0.0, -0.7];
        let mut mat = f.mat().clone();
        for i in 0..3 {
            for j in 0..3 {
                mat[[i, j]] *= Complex64::cis(d_out[i]) * Complex64::cis(d_in[j]);
            }
        }
        let t = ModeUnitary::new(mat).unwrap();
        let (out, inp) = diagonal_equivalence(&t, &f, 1e-10).expect("planted phases");
        for i in 0..3 {
            for j in 0..3 {
                let got = out[i] * t.entry(i, j) * inp[j];
                assert!((got - f.entry(i, j)).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn reck_roundtrip_on_random_unitaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for n in 2..=6 {
            for _ in 0..4 {
                let u = ModeUnitary::new(random_unitary(n, &mut rng)).unwrap();
                let plan = reck_decompose(&u);
                for el in &plan.elements {
                    if let MeshElement::Rotation { theta, phi, .. } = el {
                        assert!((0.0..=PI / 2.0 + 1e-12).contains(theta));
                        assert!((-PI - 1e-12..=PI + 1e-12).contains(phi));
                    }
                }
                let back = recompose(&plan).unwrap();
                assert!(back.approx_eq(&u, 1e-10), "roundtrip failed for n={n}");
            }
        }
    }

    #[test]
    fn reck_of_identity_is_empty() {
        let plan = reck_decompose(&ModeUnitary::identity(4));
        assert!(plan.elements.is_empty());
        assert!(recompose(&plan)
            .unwrap()
            .approx_eq(&ModeUnitary::identity(4), 1e-12));
    }

    #[test]
    fn reck_of_fourier_is_compact() {
        let f = qft_multiport(3).unwrap();
        let plan = reck_decompose(&f);
        let rotations = plan
            .elements
            .iter()
            .filter(|e| matches!(e, MeshElement::Rotation { .. }))
            .count();
        assert!(
            rotations <= 3,
            "{rotations} rotations for the 3-mode transform"
        );
        assert!(recompose(&plan).unwrap().approx_eq(&f, 1e-10));
    }

    #[test]
    fn mesh_text_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = ModeUnitary::new(random_unitary(5, &mut rng)).unwrap();
        let plan = reck_decompose(&u);
        let text = plan.to_text();
        let parsed = MeshPlan::parse(&text).unwrap();
        let back = recompose(&parsed).unwrap();
        // Angles survive the 12-significant-digit text round trip.
        assert!(back.approx_eq(&u, 1e-9));
    }

    #[test]
    fn mesh_parse_rejects_garbage() {
        assert!(MeshPlan::parse("ROT 0 1 0.1 0.2").is_err());
        assert!(MeshPlan::parse("MODES 3\nROT 0 0.1 0.2").is_err());
        assert!(MeshPlan::parse("MODES 3\nTWIST 0 1").is_err());
        assert!(MeshPlan::parse("MODES 3\nPHASE 1 nan").is_err());
    }

    #[test]
    fn rejects_non_unitary_matrices() {
        let mut mat = Array2::zeros((2, 2));
        mat[[0, 0]] = c(1.0, 0.0);
        mat[[1, 1]] = c(0.5, 0.0);
        assert!(matches!(
            ModeUnitary::new(mat),
            Err(ElementError::NotUnitary(_))
        ));
        assert!(partially_polarizing_splitter(1.5).is_err());
        assert!(partially_polarizing_splitter(f64::NAN).is_err());
    }

    proptest! {
        #[test]
        fn splitters_and_plates_are_unitary(theta in 0.0..PI, phi in -PI..PI, r in 0.0..1.0) {
            prop_assert!(linalg::unitarity_deviation(beam_splitter(theta, phi).mat()) < 1e-12);
            prop_assert!(linalg::unitarity_deviation(waveplate(WaveplateKind::Half, theta).mat()) < 1e-12);
            prop_assert!(linalg::unitarity_deviation(waveplate(WaveplateKind::Quarter, theta).mat()) < 1e-12);
            prop_assert!(linalg::unitarity_deviation(partially_polarizing_splitter(r).unwrap().mat()) < 1e-12);
        }

        #[test]
        fn beam_splitter_adjoint_flips_phase(theta in 0.0..(PI / 2.0), phi in -PI..PI) {
            let bs = beam_splitter(theta, phi);
            let flipped = beam_splitter(theta, phi + PI);
            prop_assert!(bs.adjoint().approx_eq(&flipped, 1e-12));
        }
    }
}
