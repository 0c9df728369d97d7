//! Dense complex matrix kernel: reshaping, reshuffling, Hermitian spectra,
//! signed Kraus extraction and canonical-basis checks for small dimensions.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{CoreError, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

/// Self-adjointness tolerance used when diagnosing reshuffled matrices.
pub const SELF_ADJOINT_TOL: f64 = 1e-10;
/// A map is declared CP when its smallest Choi eigenvalue is above `-CP_TOL`.
pub const CP_TOL: f64 = 1e-9;
/// Kraus members with |eigenvalue| below this are dropped.
pub const KRAUS_CUTOFF: f64 = 1e-12;
/// Tolerance for `check_channel_sum` to accept a multiple of the identity.
pub const CHANNEL_SUM_TOL: f64 = 1e-10;

#[inline]
pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

#[inline]
pub fn cr(re: f64) -> C64 {
    C64::new(re, 0.0)
}

pub fn identity(d: usize) -> CMatrix {
    CMatrix::identity(d, d)
}

pub fn zeros(d: usize) -> CMatrix {
    CMatrix::zeros(d, d)
}

pub fn sigma_x() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[cr(0.0), cr(1.0), cr(1.0), cr(0.0)])
}

pub fn sigma_y() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[cr(0.0), c(0.0, -1.0), c(0.0, 1.0), cr(0.0)])
}

/// `sigma_z` with the first basis element as the excited state.
pub fn sigma_z() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[cr(1.0), cr(0.0), cr(0.0), cr(-1.0)])
}

/// Lowering operator: maps the excited state (first basis element) to the ground state.
pub fn sigma_minus() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[cr(0.0), cr(0.0), cr(1.0), cr(0.0)])
}

pub fn sigma_plus() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[cr(0.0), cr(1.0), cr(0.0), cr(0.0)])
}

/// Excited-state projector `sigma_plus * sigma_minus = diag(1, 0)`.
pub fn excited_projector() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[cr(1.0), cr(0.0), cr(0.0), cr(0.0)])
}

pub fn max_abs(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn all_finite(m: &CMatrix) -> bool {
    m.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

/// Hermitian defect `max |M - M^dag|`.
pub fn hermiticity_defect(m: &CMatrix) -> f64 {
    max_abs(&(m - m.adjoint()))
}

/// Lexicographic reshape of a square matrix into a vector of length d^2:
/// component `d*(i-1)+j` (1-based) holds entry `(i, j)`.
pub fn reshape(m: &CMatrix) -> Result<CVector> {
    if m.nrows() != m.ncols() {
        return Err(CoreError::Shape(format!(
            "reshape requires a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let d = m.nrows();
    let mut v = CVector::zeros(d * d);
    for i in 0..d {
        for j in 0..d {
            v[d * i + j] = m[(i, j)];
        }
    }
    Ok(v)
}

/// Inverse of [`reshape`].
pub fn unreshape(v: &CVector) -> Result<CMatrix> {
    let n = v.len();
    let d = (n as f64).sqrt().round() as usize;
    if d * d != n {
        return Err(CoreError::Shape(format!(
            "unreshape requires a length that is a perfect square, got {n}"
        )));
    }
    let mut m = CMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            m[(i, j)] = v[d * i + j];
        }
    }
    Ok(m)
}

/// Reshaped identity `res(1_d)`; the left fixed point of trace-preserving maps.
pub fn reshaped_identity(d: usize) -> CVector {
    let mut v = CVector::zeros(d * d);
    for i in 0..d {
        v[d * i + i] = cr(1.0);
    }
    v
}

/// A `d^2 x d^2` matrix acting on reshaped `d x d` operators.
#[derive(Debug, Clone, PartialEq)]
pub struct Superoperator {
    dim: usize,
    mat: CMatrix,
}

impl Superoperator {
    pub fn new(dim: usize, mat: CMatrix) -> Result<Self> {
        if mat.nrows() != dim * dim || mat.ncols() != dim * dim {
            return Err(CoreError::Shape(format!(
                "superoperator for d={dim} must be {0}x{0}, got {1}x{2}",
                dim * dim,
                mat.nrows(),
                mat.ncols()
            )));
        }
        Ok(Self { dim, mat })
    }

    pub fn identity(dim: usize) -> Self {
        Self { dim, mat: CMatrix::identity(dim * dim, dim * dim) }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn matrix(&self) -> &CMatrix {
        &self.mat
    }

    pub fn into_matrix(self) -> CMatrix {
        self.mat
    }

    /// Apply to a `d x d` operator.
    pub fn apply(&self, rho: &CMatrix) -> Result<CMatrix> {
        let v = reshape(rho)?;
        unreshape(&(&self.mat * v))
    }

    /// `max |res(1)^T S - res(1)^T|`; zero for trace-preserving maps.
    pub fn trace_preservation_defect(&self) -> f64 {
        let one = reshaped_identity(self.dim);
        let lhs = self.mat.transpose() * &one;
        (lhs - one).iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// `max |res(1)^T S|`; zero for trace-killing generators.
    pub fn trace_generator_defect(&self) -> f64 {
        let one = reshaped_identity(self.dim);
        let lhs = self.mat.transpose() * one;
        lhs.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

/// Reshuffled (Choi) matrix: entry `(l(i,j), l(m,n))` of the output equals
/// entry `(l(i,m), l(j,n))` of the input. Involutive.
pub fn reshuffle(s: &Superoperator) -> CMatrix {
    let d = s.dim();
    let l = |i: usize, j: usize| d * i + j;
    let mut out = CMatrix::zeros(d * d, d * d);
    for i in 0..d {
        for j in 0..d {
            for m in 0..d {
                for n in 0..d {
                    out[(l(i, j), l(m, n))] = s.mat[(l(i, m), l(j, n))];
                }
            }
        }
    }
    out
}

/// Rebuild a superoperator from its reshuffled matrix (same index permutation).
pub fn unreshuffle(r: &CMatrix, dim: usize) -> Result<Superoperator> {
    let tmp = Superoperator::new(dim, r.clone())?;
    Superoperator::new(dim, reshuffle(&tmp))
}

/// Eigendecomposition of a Hermitian matrix, eigenvalues descending.
///
/// Eigenvectors are deterministically phase-fixed: the largest-magnitude
/// component is rotated to the positive real axis (lowest index on ties).
pub fn hermitian_eigen(m: &CMatrix) -> (Vec<f64>, Vec<CVector>) {
    let herm = (m + m.adjoint()).scale(0.5);
    let se = nalgebra::SymmetricEigen::new(herm);
    let n = se.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| se.eigenvalues[b].partial_cmp(&se.eigenvalues[a]).unwrap());
    let mut vals = Vec::with_capacity(n);
    let mut vecs = Vec::with_capacity(n);
    for &k in &order {
        vals.push(se.eigenvalues[k]);
        let mut v: CVector = se.eigenvectors.column(k).into_owned();
        let mut best = 0usize;
        let mut best_mag = -1.0f64;
        for (idx, z) in v.iter().enumerate() {
            let mag = z.norm();
            if mag > best_mag + 1e-15 {
                best_mag = mag;
                best = idx;
            }
        }
        if best_mag > 0.0 && v[best].norm() > 0.0 {
            let phase = v[best] / v[best].norm();
            for z in v.iter_mut() {
                *z /= phase;
            }
        }
        vecs.push(v);
    }
    (vals, vecs)
}

/// Sorted Choi spectrum of a superoperator plus the CP verdict.
#[derive(Debug, Clone)]
pub struct ChoiSpectrum {
    /// Eigenvalues of the reshuffled matrix, descending.
    pub eigenvalues: Vec<f64>,
    pub is_cp: bool,
    pub cp_tol: f64,
}

/// Spectrum of the reshuffled matrix; errors unless the reshuffling is
/// self-adjoint within `SELF_ADJOINT_TOL` (self-adjoint-preserving dynamics).
pub fn choi_spectrum(s: &Superoperator) -> Result<ChoiSpectrum> {
    choi_spectrum_with(s, CP_TOL)
}

pub fn choi_spectrum_with(s: &Superoperator, cp_tol: f64) -> Result<ChoiSpectrum> {
    let r = reshuffle(s);
    let defect = hermiticity_defect(&r);
    if defect > SELF_ADJOINT_TOL {
        return Err(CoreError::NotSelfAdjoint { defect, tol: SELF_ADJOINT_TOL });
    }
    let (vals, _) = hermitian_eigen(&r);
    let min = vals.last().copied().unwrap_or(0.0);
    Ok(ChoiSpectrum { eigenvalues: vals, is_cp: min >= -cp_tol, cp_tol })
}

/// One signed Kraus member; the operator absorbs `|f_n|^(1/2)`.
#[derive(Debug, Clone)]
pub struct SignedKraus {
    pub sign: f64,
    pub op: CMatrix,
}

#[derive(Debug, Clone)]
pub struct SignedKrausSet {
    pub members: Vec<SignedKraus>,
}

impl SignedKrausSet {
    /// `sum_n sign_n V_n rho V_n^dag`.
    pub fn apply(&self, rho: &CMatrix) -> CMatrix {
        let d = rho.nrows();
        let mut out = CMatrix::zeros(d, d);
        for m in &self.members {
            out += (&m.op * rho * m.op.adjoint()).scale(m.sign);
        }
        out
    }
}

/// Spectral decomposition of the reshuffled matrix into signed Kraus operators.
/// Eigenvalues with `|f_n| < KRAUS_CUTOFF` are dropped.
pub fn kraus_decompose(s: &Superoperator) -> Result<SignedKrausSet> {
    let r = reshuffle(s);
    let defect = hermiticity_defect(&r);
    if defect > SELF_ADJOINT_TOL {
        return Err(CoreError::NotSelfAdjoint { defect, tol: SELF_ADJOINT_TOL });
    }
    let (vals, vecs) = hermitian_eigen(&r);
    let mut members = Vec::new();
    for (f, v) in vals.iter().zip(vecs.iter()) {
        if f.abs() < KRAUS_CUTOFF {
            continue;
        }
        let scaled = v.scale(f.abs().sqrt());
        members.push(SignedKraus { sign: f.signum(), op: unreshape(&scaled)? });
    }
    Ok(SignedKrausSet { members })
}

/// Outcome of the canonical-basis sum check `sum_l L_l^dag L_l = g 1_d`.
#[derive(Debug, Clone)]
pub enum ChannelSumCheck {
    /// The sum is `g` times the identity to within tolerance.
    Proportional { g: f64 },
    /// Deficiency report: `d_matrix = g_star 1 - sum L^dag L` for the largest
    /// eigenvalue `g_star` of the sum, PSD by construction up to roundoff.
    Deficient { g_star: f64, d_matrix: CMatrix, d_is_psd: bool },
}

pub fn check_channel_sum(channels: &[CMatrix]) -> Result<ChannelSumCheck> {
    if channels.is_empty() {
        return Err(CoreError::InvalidModel("channel list is empty".into()));
    }
    let d = channels[0].nrows();
    for l in channels {
        if l.nrows() != d || l.ncols() != d {
            return Err(CoreError::Shape(format!(
                "channel dimension mismatch: expected {d}x{d}, got {}x{}",
                l.nrows(),
                l.ncols()
            )));
        }
    }
    let mut sum = CMatrix::zeros(d, d);
    for l in channels {
        sum += l.adjoint() * l;
    }
    let g = sum.trace().re / d as f64;
    let defect = max_abs(&(&sum - identity(d).scale(g)));
    if defect <= CHANNEL_SUM_TOL && g > 0.0 {
        return Ok(ChannelSumCheck::Proportional { g });
    }
    let (vals, _) = hermitian_eigen(&sum);
    let g_star = vals[0];
    let d_matrix = identity(d).scale(g_star) - &sum;
    let (dvals, _) = hermitian_eigen(&d_matrix);
    let d_is_psd = dvals.last().copied().unwrap_or(0.0) >= -CHANNEL_SUM_TOL;
    Ok(ChannelSumCheck::Deficient { g_star, d_matrix, d_is_psd })
}

/// Orthonormal traceless Hermitian basis of `M_d` (generalized Gell-Mann
/// matrices normalized to `Tr(T_i^dag T_j) = delta_ij`), `d^2 - 1` members.
pub fn gell_mann_basis(d: usize) -> Vec<CMatrix> {
    let mut out = Vec::with_capacity(d * d - 1);
    let s = 1.0 / 2f64.sqrt();
    for j in 0..d {
        for k in (j + 1)..d {
            let mut sym = CMatrix::zeros(d, d);
            sym[(j, k)] = cr(s);
            sym[(k, j)] = cr(s);
            out.push(sym);
            let mut asym = CMatrix::zeros(d, d);
            asym[(j, k)] = c(0.0, -s);
            asym[(k, j)] = c(0.0, s);
            out.push(asym);
        }
    }
    for l in 1..d {
        let norm = 1.0 / ((l * (l + 1)) as f64).sqrt();
        let mut diag = CMatrix::zeros(d, d);
        for i in 0..l {
            diag[(i, i)] = cr(norm);
        }
        diag[(l, l)] = cr(-(l as f64) * norm);
        out.push(diag);
    }
    out
}

/// Diagonal members of the generalized Gell-Mann basis (default observables
/// for d > 2).
pub fn gell_mann_diagonal(d: usize) -> Vec<CMatrix> {
    gell_mann_basis(d)
        .into_iter()
        .filter(|m| {
            (0..m.nrows()).all(|i| (0..m.ncols()).all(|j| i == j || m[(i, j)].norm() < 1e-15))
        })
        .collect()
}

/// Rotate an operator basis by a unitary acting on the basis index:
/// `T'_i = sum_j U_ji T_j`. Preserves orthonormality and the channel sum.
pub fn rotate_basis(basis: &[CMatrix], u: &CMatrix) -> Vec<CMatrix> {
    let n = basis.len();
    assert_eq!(u.nrows(), n);
    assert_eq!(u.ncols(), n);
    let d = basis[0].nrows();
    (0..n)
        .map(|i| {
            let mut t = CMatrix::zeros(d, d);
            for j in 0..n {
                t += basis[j].map(|e| e * u[(j, i)]);
            }
            t
        })
        .collect()
}

/// Haar-ish random unitary from Gram-Schmidt on a complex Gaussian matrix.
pub fn random_unitary<R: rand::Rng>(n: usize, rng: &mut R) -> CMatrix {
    use rand_distr::StandardNormal;
    let mut m = CMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            m[(i, j)] = c(re, im);
        }
    }
    for j in 0..n {
        for k in 0..j {
            let col_k = m.column(k).into_owned();
            let proj: C64 = col_k.dotc(&m.column(j).into_owned());
            let update = col_k.map(|e| e * proj);
            let mut col_j = m.column_mut(j);
            col_j -= update;
        }
        let norm = m.column(j).norm();
        let mut col_j = m.column_mut(j);
        col_j /= cr(norm);
    }
    m
}

/// Serialize a matrix as row-major `[re, im]` pairs (nested rows).
pub fn matrix_to_json(m: &CMatrix) -> serde_json::Value {
    let rows: Vec<Vec<[f64; 2]>> = (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| [m[(i, j)].re, m[(i, j)].im]).collect())
        .collect();
    serde_json::json!(rows)
}

/// Parse a matrix from row-major `[re, im]` pairs (nested rows).
pub fn matrix_from_json(v: &serde_json::Value) -> Result<CMatrix> {
    let rows = v
        .as_array()
        .ok_or_else(|| CoreError::InvalidConfig("matrix must be an array of rows".into()))?;
    let nrows = rows.len();
    if nrows == 0 {
        return Err(CoreError::InvalidConfig("matrix has no rows".into()));
    }
    let parse_entry = |e: &serde_json::Value| -> Result<C64> {
        let pair = e
            .as_array()
            .ok_or_else(|| CoreError::InvalidConfig("matrix entry must be [re, im]".into()))?;
        if pair.len() != 2 {
            return Err(CoreError::InvalidConfig("matrix entry must be [re, im]".into()));
        }
        let re = pair[0].as_f64().ok_or_else(|| CoreError::InvalidConfig("non-numeric entry".into()))?;
        let im = pair[1].as_f64().ok_or_else(|| CoreError::InvalidConfig("non-numeric entry".into()))?;
        Ok(c(re, im))
    };
    let first = rows[0]
        .as_array()
        .ok_or_else(|| CoreError::InvalidConfig("matrix row must be an array".into()))?;
    let ncols = first.len();
    let mut m = CMatrix::zeros(nrows, ncols);
    for (i, row) in rows.iter().enumerate() {
        let row = row
            .as_array()
            .ok_or_else(|| CoreError::InvalidConfig("matrix row must be an array".into()))?;
        if row.len() != ncols {
            return Err(CoreError::InvalidConfig("ragged matrix rows".into()));
        }
        for (j, e) in row.iter().enumerate() {
            m[(i, j)] = parse_entry(e)?;
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn random_cmatrix(d: usize, seed: u64) -> CMatrix {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        CMatrix::from_fn(d, d, |_, _| c(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
    }

    #[test]
    fn reshape_identity_and_matrix_unit() {
        let v = reshape(&identity(2)).unwrap();
        assert_eq!(v.as_slice(), &[cr(1.0), cr(0.0), cr(0.0), cr(1.0)]);
        // matrix unit E_12 lands in component l(1,2) = 2 (1-based).
        let mut e12 = zeros(2);
        e12[(0, 1)] = cr(1.0);
        let v = reshape(&e12).unwrap();
        assert_eq!(v.as_slice(), &[cr(0.0), cr(1.0), cr(0.0), cr(0.0)]);
    }

    #[test]
    fn reshape_round_trip() {
        let m = random_cmatrix(3, 7);
        let back = unreshape(&reshape(&m).unwrap()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn reshuffle_identity_superoperator_spectrum() {
        let s = Superoperator::identity(2);
        let spec = choi_spectrum(&s).unwrap();
        assert!(spec.is_cp);
        let expect = [2.0, 0.0, 0.0, 0.0];
        for (a, b) in spec.eigenvalues.iter().zip(expect.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn unitary_conjugation_choi_is_rank_one() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let u = random_unitary(3, &mut rng);
        let s = Superoperator::new(3, u.kronecker(&u.conjugate())).unwrap();
        let spec = choi_spectrum(&s).unwrap();
        assert!(spec.is_cp);
        assert_abs_diff_eq!(spec.eigenvalues[0], 3.0, epsilon = 1e-10);
        for v in &spec.eigenvalues[1..] {
            assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn kraus_reconstructs_generic_self_adjoint_preserving_map() {
        // Build a superoperator with Hermitian reshuffling from a random
        // Hermitian matrix, then verify the operator-sum reconstruction.
        let r0 = random_cmatrix(4, 21);
        let herm = (&r0 + r0.adjoint()).scale(0.5);
        let s = unreshuffle(&herm, 2).unwrap();
        let kraus = kraus_decompose(&s).unwrap();
        assert!(kraus.members.len() <= 4);
        for seed in 0..5 {
            let rho = random_cmatrix(2, 100 + seed);
            let direct = s.apply(&rho).unwrap();
            let viasum = kraus.apply(&rho);
            assert!(max_abs(&(direct - viasum)) < 1e-10);
        }
    }

    #[test]
    fn channel_sum_pauli_gives_three_halves() {
        let s = 1.0 / 2f64.sqrt();
        let chans = vec![sigma_x().scale(s), sigma_y().scale(s), sigma_z().scale(s)];
        match check_channel_sum(&chans).unwrap() {
            ChannelSumCheck::Proportional { g } => assert_abs_diff_eq!(g, 1.5, epsilon = 1e-12),
            _ => panic!("expected proportional"),
        }
    }

    #[test]
    fn channel_sum_ladder_pair_gives_one() {
        let chans = vec![sigma_minus(), sigma_plus()];
        match check_channel_sum(&chans).unwrap() {
            ChannelSumCheck::Proportional { g } => assert_abs_diff_eq!(g, 1.0, epsilon = 1e-12),
            _ => panic!("expected proportional"),
        }
    }

    #[test]
    fn channel_sum_lowering_alone_reports_deficiency() {
        match check_channel_sum(&[sigma_minus()]).unwrap() {
            ChannelSumCheck::Deficient { g_star, d_matrix, d_is_psd } => {
                assert_abs_diff_eq!(g_star, 1.0, epsilon = 1e-12);
                assert!(d_is_psd);
                // D = 1 - sigma_+ sigma_- = diag(0, 1)
                let expect = CMatrix::from_row_slice(2, 2, &[cr(0.0), cr(0.0), cr(0.0), cr(1.0)]);
                assert!(max_abs(&(d_matrix - expect)) < 1e-12);
            }
            _ => panic!("expected deficient"),
        }
    }

    #[test]
    fn gell_mann_basis_is_orthonormal_and_sums_to_g() {
        for d in [2usize, 3, 4] {
            let basis = gell_mann_basis(d);
            assert_eq!(basis.len(), d * d - 1);
            for (i, a) in basis.iter().enumerate() {
                assert!(a.trace().norm() < 1e-14);
                for (j, b) in basis.iter().enumerate() {
                    let ip = (a.adjoint() * b).trace();
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert_abs_diff_eq!(ip.re, expect, epsilon = 1e-12);
                    assert_abs_diff_eq!(ip.im, 0.0, epsilon = 1e-12);
                }
            }
            match check_channel_sum(&basis).unwrap() {
                ChannelSumCheck::Proportional { g } => {
                    let expect = (d * d - 1) as f64 / d as f64;
                    assert_abs_diff_eq!(g, expect, epsilon = 1e-10);
                }
                _ => panic!("basis should sum to a multiple of the identity"),
            }
        }
    }

    #[test]
    fn matrix_json_round_trip() {
        let m = random_cmatrix(3, 5);
        let back = matrix_from_json(&matrix_to_json(&m)).unwrap();
        assert!(max_abs(&(m - back)) < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn reshuffle_is_an_involution(seed in 0u64..1000) {
            let m = random_cmatrix(9, seed);
            let s = Superoperator::new(3, m.clone()).unwrap();
            let r = reshuffle(&s);
            let twice = reshuffle(&Superoperator::new(3, r).unwrap());
            prop_assert!(max_abs(&(twice - m)) < 1e-14);
        }

        #[test]
        fn reshuffled_trace_of_trace_preserving_map_is_d(seed in 0u64..1000) {
            // Unitary conjugation maps are trace preserving.
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let u = random_unitary(2, &mut rng);
            let s = Superoperator::new(2, u.kronecker(&u.conjugate())).unwrap();
            prop_assert!(s.trace_preservation_defect() < 1e-12);
            let r = reshuffle(&s);
            prop_assert!((r.trace().re - 2.0).abs() < 1e-10);
            prop_assert!(r.trace().im.abs() < 1e-12);
        }
    }
}
