//! Steady states, the linearized transition matrix and its spectrum.

pub mod eigen;

use std::fmt;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::dynamics::ControlLaw;
use crate::kernel::{assemble_static, build_components, KernelComponents, KernelError, StochasticMatrix};
use crate::state_space::{make_space, Distribution, ModelParams, ParamError, StateSpace};
pub use eigen::{EigenError, C64};

/// Default relative tolerance for family labels and regime decisions.
pub const FAMILY_TOLERANCE: f64 = 1e-9;
const STEADY_TOLERANCE: f64 = 1e-14;
const STEADY_RESIDUAL: f64 = 1e-12;
const STEADY_BUDGET: usize = 20_000;
const HALF_TOLERANCE: f64 = 1e-9;
const RESIDUAL_TOLERANCE: f64 = 1e-8;
const BISECTION_WIDTH: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Eigen(#[from] EigenError),
    #[error("steady state not found: residual {residual:e} after {iterations} iterations and direct solve")]
    NoSteadyState { residual: f64, iterations: usize },
    #[error("linearization needs N_up = 1/2 at the steady state, got {0}")]
    NotBalanced(f64),
    #[error("dimension mismatch: matrix is {matrix}, vector has {vector}")]
    Dimension { matrix: usize, vector: usize },
    #[error("eigenvector residual {residual:e} for mode {mode} exceeds tolerance")]
    Residual { mode: usize, residual: f64 },
    #[error("significant family is empty")]
    EmptySignificantFamily,
    #[error("spectrum has not been classified")]
    Unclassified,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Unclassified,
    Stationary,
    Ghost,
    Significant,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Unclassified => "unclassified",
            Self::Stationary => "stationary",
            Self::Ghost => "ghost",
            Self::Significant => "significant",
        })
    }
}

/// Eigen-decomposition of a linearized transition matrix, sorted by
/// descending `|Lambda|`.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub eigenvalues: Vec<C64>,
    /// Right eigenvectors as columns.
    pub right: DMatrix<C64>,
    /// Left eigenvectors as rows, `left * right = I`.
    pub left: DMatrix<C64>,
    pub relaxation: Vec<C64>,
    pub family: Vec<Family>,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn right_vector(&self, i: usize) -> DVector<C64> {
        self.right.column(i).into_owned()
    }

    fn is_classified(&self) -> bool {
        self.family.iter().all(|f| *f != Family::Unclassified)
    }

    fn non_stationary(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&i| match self.family[i] {
            Family::Stationary => false,
            Family::Unclassified => (self.eigenvalues[i] - 1.0).norm() >= FAMILY_TOLERANCE,
            _ => true,
        })
    }
}

/// `lambda = -ln|Lambda| + i arg(Lambda)`.
pub fn relaxation_constant(lambda: C64) -> C64 {
    C64::new(-lambda.norm().ln(), lambda.arg())
}

/// Column-compressed nonzeros, used to keep power iteration cheap.
fn sparse_columns(m: &DMatrix<f64>) -> Vec<Vec<(usize, f64)>> {
    (0..m.ncols())
        .map(|j| m.column(j).iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, v)| (i, *v)).collect())
        .collect()
}

fn sparse_apply(cols: &[Vec<(usize, f64)>], x: &DVector<f64>, out: &mut DVector<f64>) {
    out.fill(0.0);
    for (j, col) in cols.iter().enumerate() {
        let xj = x[j];
        if xj != 0.0 {
            for &(i, v) in col {
                out[i] += v * xj;
            }
        }
    }
}

fn residual_l1(p: &DMatrix<f64>, rho: &DVector<f64>) -> f64 {
    (p * rho - rho).lp_norm(1)
}

fn direct_null_space(p: &DMatrix<f64>) -> Option<DVector<f64>> {
    let m = p.nrows();
    let mut a = p - DMatrix::identity(m, m);
    a.row_mut(m - 1).fill(1.0);
    let mut b = DVector::zeros(m);
    b[m - 1] = 1.0;
    a.lu().solve(&b)
}

/// Probability-normalized fixed point of a stochastic matrix.
///
/// Power iteration from the uniform distribution, falling back to a dense
/// solve of `(p - I) rho = 0` with the normalization row when the budget runs
/// out. Uniqueness needs `epsilon > 0`; with `epsilon = 0` a warning is logged
/// and whichever fixed point is found is returned.
pub fn steady_state(matrix: &StochasticMatrix) -> Result<Distribution, SpectralError> {
    let p = matrix.as_matrix();
    let m = p.nrows();
    if (0..m).any(|j| p[(j, j)] == 0.0) {
        warn!("transition matrix has zero diagonal entries; the steady state may not be unique");
    }
    let cols = sparse_columns(p);
    let mut rho = DVector::from_element(m, 1.0 / m as f64);
    let mut next = DVector::zeros(m);
    let mut iterations = 0;
    while iterations < STEADY_BUDGET {
        iterations += 1;
        sparse_apply(&cols, &rho, &mut next);
        let change: f64 = next.iter().zip(rho.iter()).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut rho, &mut next);
        if change < STEADY_TOLERANCE {
            break;
        }
    }
    let mut residual = residual_l1(p, &rho);
    if residual >= STEADY_RESIDUAL {
        if let Some(direct) = direct_null_space(p) {
            let r = residual_l1(p, &direct);
            if r < residual {
                rho = direct;
                residual = r;
            }
        }
    }
    if residual >= STEADY_RESIDUAL || rho.iter().any(|v| *v < -STEADY_RESIDUAL) {
        return Err(SpectralError::NoSteadyState { residual, iterations });
    }
    rho.iter_mut().for_each(|v| *v = v.max(0.0));
    let total = rho.sum();
    rho /= total;
    Distribution::new(rho).map_err(|_| SpectralError::NoSteadyState { residual, iterations })
}

/// Linearization `S = p + V` of the nonlinear step around the steady state.
pub fn linearized_matrix(
    space: &StateSpace,
    components: &KernelComponents,
    law: &ControlLaw,
    rho_st: &Distribution,
) -> Result<DMatrix<f64>, SpectralError> {
    let m = components.dim();
    if rho_st.len() != m || space.len() != m {
        return Err(SpectralError::Dimension { matrix: m, vector: rho_st.len() });
    }
    let u = space.on_indicator();
    let n_up = u.dot(rho_st.as_vector());
    if (n_up - 0.5).abs() > HALF_TOLERANCE {
        return Err(SpectralError::NotBalanced(n_up));
    }
    let mut s = crate::kernel::combine(components, law.r, law.r);
    if law.alpha != 0.0 {
        let drift = &components.p_down * rho_st.as_vector() - &components.p_up * rho_st.as_vector();
        let coef = 2.0 * law.alpha * law.r;
        for j in 0..m {
            if u[j] != 0.0 {
                s.column_mut(j).axpy(coef * u[j], &drift, 1.0);
            }
        }
    }
    Ok(s)
}

/// Full spectrum of `s` with a per-mode residual check. Families are left
/// unclassified.
pub fn eigendecompose(s: &DMatrix<f64>) -> Result<Spectrum, SpectralError> {
    let eig = eigen::decompose(s)?;
    let s_norm = s.iter().map(|v| v.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE) * s.nrows() as f64;
    let s_c = s.map(|v| C64::new(v, 0.0));
    for (i, lambda) in eig.values.iter().enumerate() {
        let psi = eig.right.column(i);
        let res = (&s_c * psi - psi * *lambda).iter().map(|z| z.norm()).fold(0.0, f64::max);
        let scale = psi.iter().map(|z| z.norm()).fold(0.0, f64::max);
        if res > RESIDUAL_TOLERANCE * s_norm * scale {
            return Err(SpectralError::Residual { mode: i, residual: res });
        }
    }
    let relaxation = eig.values.iter().map(|l| relaxation_constant(*l)).collect();
    let family = vec![Family::Unclassified; eig.values.len()];
    Ok(Spectrum { eigenvalues: eig.values, right: eig.right, left: eig.left, relaxation, family })
}

/// Labels each mode stationary, ghost or significant.
pub fn classify_families(mut spec: Spectrum, u: &DVector<f64>, tol: f64) -> Spectrum {
    for i in 0..spec.len() {
        spec.family[i] = if (spec.eigenvalues[i] - 1.0).norm() < tol {
            Family::Stationary
        } else {
            let psi = spec.right.column(i);
            let weight: C64 = psi.iter().zip(u.iter()).map(|(p, w)| p * *w).sum();
            let l1: f64 = psi.iter().map(|z| z.norm()).sum();
            if weight.norm() < tol * l1 {
                Family::Ghost
            } else {
                Family::Significant
            }
        };
    }
    spec
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Standard,
    SuperRelaxation,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Standard => "standard",
            Self::SuperRelaxation => "super-relaxation",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapReport {
    pub min_re_sf: f64,
    pub min_re_wf: f64,
    pub gap: f64,
    pub regime: Regime,
    /// Mode attaining the significant-family minimum.
    pub sf_mode: usize,
    /// Mode attaining the whole-family minimum.
    pub wf_mode: usize,
}

fn slowest(spec: &Spectrum, modes: impl Iterator<Item = usize>) -> Option<usize> {
    modes.min_by(|&a, &b| {
        let (la, lb) = (spec.relaxation[a], spec.relaxation[b]);
        la.re.partial_cmp(&lb.re).unwrap().then(la.im.abs().partial_cmp(&lb.im.abs()).unwrap()).then(a.cmp(&b))
    })
}

/// Super-relaxation gap using the default tolerance for the regime call.
pub fn gap(spec: &Spectrum) -> Result<GapReport, SpectralError> {
    gap_with_tolerance(spec, FAMILY_TOLERANCE)
}

pub fn gap_with_tolerance(spec: &Spectrum, tol: f64) -> Result<GapReport, SpectralError> {
    if !spec.is_classified() {
        return Err(SpectralError::Unclassified);
    }
    let sf = slowest(spec, spec.non_stationary().filter(|&i| spec.family[i] == Family::Significant))
        .ok_or(SpectralError::EmptySignificantFamily)?;
    let wf = slowest(spec, spec.non_stationary()).ok_or(SpectralError::EmptySignificantFamily)?;
    let min_re_sf = spec.relaxation[sf].re;
    let min_re_wf = spec.relaxation[wf].re;
    let gap = min_re_sf - min_re_wf;
    let regime = if gap > tol { Regime::SuperRelaxation } else { Regime::Standard };
    Ok(GapReport { min_re_sf, min_re_wf, gap, regime, sf_mode: sf, wf_mode: wf })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stability {
    Stable,
    Alternating,
    Unstable,
}

impl fmt::Display for Stability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Stable => "stable",
            Self::Alternating => "alternating",
            Self::Unstable => "unstable",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityReport {
    pub verdict: Stability,
    /// Largest `|Lambda|` over non-stationary modes (0 if there are none).
    pub max_modulus: f64,
}

pub fn stability(spec: &Spectrum) -> StabilityReport {
    let dominant = spec.non_stationary().max_by(|&a, &b| {
        spec.eigenvalues[a].norm().partial_cmp(&spec.eigenvalues[b].norm()).unwrap().then(b.cmp(&a))
    });
    let Some(d) = dominant else {
        return StabilityReport { verdict: Stability::Stable, max_modulus: 0.0 };
    };
    let lead = spec.eigenvalues[d];
    let max_modulus = lead.norm();
    let verdict = if max_modulus > 1.0 + FAMILY_TOLERANCE {
        Stability::Unstable
    } else if lead.im == 0.0 && lead.re < 0.0 {
        Stability::Alternating
    } else {
        Stability::Stable
    };
    StabilityReport { verdict, max_modulus }
}

/// Real part of the slowest-decaying significant right eigenvector,
/// projected onto zero sum and scaled to unit L1 norm.
pub fn perturbation_shape(spec: &Spectrum) -> Option<DVector<f64>> {
    let i = spec
        .non_stationary()
        .filter(|&i| spec.family[i] == Family::Significant)
        .max_by(|&a, &b| spec.eigenvalues[a].norm().partial_cmp(&spec.eigenvalues[b].norm()).unwrap().then(b.cmp(&a)))?;
    let mut v: DVector<f64> = spec.right.column(i).map(|z| z.re);
    let mean = v.mean();
    v.add_scalar_mut(-mean);
    let l1 = v.lp_norm(1);
    (l1 > 0.0).then(|| v / l1)
}

/// Static parts of the model that do not depend on `alpha`.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub space: StateSpace,
    pub components: KernelComponents,
    pub steady: Distribution,
}

impl LinearModel {
    pub fn new(params: ModelParams) -> Result<Self, SpectralError> {
        let space = make_space(params)?;
        let components = build_components(&space);
        let steady = steady_state(&assemble_static(&components, params.r)?)?;
        Ok(Self { space, components, steady })
    }

    pub fn params(&self) -> &ModelParams {
        self.space.params()
    }

    pub fn law(&self, alpha: f64) -> ControlLaw {
        ControlLaw { r: self.params().r, alpha, epsilon: self.params().epsilon }
    }

    pub fn linearized(&self, alpha: f64) -> Result<DMatrix<f64>, SpectralError> {
        linearized_matrix(&self.space, &self.components, &self.law(alpha), &self.steady)
    }

    /// Classified spectrum at the given `alpha`.
    pub fn spectrum(&self, alpha: f64, tol: f64) -> Result<Spectrum, SpectralError> {
        if alpha < 0.0 || !alpha.is_finite() {
            return Err(ParamError::AlphaNegative(alpha).into());
        }
        let spec = eigendecompose(&self.linearized(alpha)?)?;
        Ok(classify_families(spec, self.space.on_indicator(), tol))
    }
}

/// Thresholds of the dominant significant eigenvalue along `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AlphaTransitions {
    /// The tracked eigenvalue becomes real.
    pub alpha0: Option<f64>,
    /// It crosses zero.
    pub alpha1: Option<f64>,
    /// It drops below -1.
    pub alpha2: Option<f64>,
}

const REAL_IM: f64 = 1e-10;

fn candidates(spec: &Spectrum) -> Vec<C64> {
    spec.non_stationary()
        .filter(|&i| spec.family[i] == Family::Significant && spec.eigenvalues[i].im >= -REAL_IM)
        .map(|i| spec.eigenvalues[i])
        .collect()
}

/// Continues `prev` onto the candidates of a nearby `alpha`: nearest
/// neighbour, except that when a complex pair has just collided on the real
/// axis the lower of the two emerging real eigenvalues is taken.
fn track(prev: C64, cands: &[C64]) -> Option<C64> {
    let dist = |z: &C64| (*z - prev).norm();
    let nearest = *cands.iter().min_by(|a, b| dist(a).partial_cmp(&dist(b)).unwrap())?;
    if prev.im > REAL_IM && nearest.im.abs() <= REAL_IM {
        let mut reals: Vec<C64> = cands.iter().copied().filter(|z| z.im.abs() <= REAL_IM).collect();
        reals.sort_by(|a, b| dist(a).partial_cmp(&dist(b)).unwrap());
        return reals.iter().take(2).copied().min_by(|a, b| a.re.partial_cmp(&b.re).unwrap());
    }
    Some(nearest)
}

/// Dominant significant eigenvalue at the start of a scan.
fn leading(cands: &[C64]) -> Option<C64> {
    cands.iter().copied().max_by(|a, b| a.norm().partial_cmp(&b.norm()).unwrap().then(a.im.partial_cmp(&b.im).unwrap()))
}

/// Scans the dominant significant eigenvalue over a monotone `alpha` grid and
/// locates where it becomes real, crosses zero and falls below -1. Each
/// threshold is refined by bisection to `1e-3`; thresholds not bracketed by
/// the grid are `None`.
pub fn alpha_transitions(params: ModelParams, alpha_grid: &[f64]) -> Result<AlphaTransitions, SpectralError> {
    let model = LinearModel::new(params)?;
    let tol = FAMILY_TOLERANCE;
    let spectra: Vec<Vec<C64>> = alpha_grid
        .par_iter()
        .map(|&a| model.spectrum(a, tol).map(|s| candidates(&s)))
        .collect::<Result<_, _>>()?;
    let mut path: Vec<C64> = Vec::with_capacity(alpha_grid.len());
    for cands in &spectra {
        let next = match path.last() {
            None => leading(cands),
            Some(prev) => track(*prev, cands),
        };
        match next {
            Some(z) => path.push(z),
            None => break,
        }
    }

    let predicates: [fn(C64) -> bool; 3] = [|z| z.im.abs() <= REAL_IM, |z| z.im.abs() <= REAL_IM && z.re < 0.0, |z| z.re < -1.0];
    let mut out = [None; 3];
    for (k, pred) in predicates.iter().enumerate() {
        if let Some(hi) = path.iter().position(|z| pred(*z)) {
            if hi == 0 {
                out[k] = Some(alpha_grid[0]);
                continue;
            }
            out[k] = Some(bisect(&model, alpha_grid[hi - 1], path[hi - 1], alpha_grid[hi], *pred)?);
        }
    }
    Ok(AlphaTransitions { alpha0: out[0], alpha1: out[1], alpha2: out[2] })
}

fn bisect(model: &LinearModel, mut lo: f64, mut at_lo: C64, mut hi: f64, pred: fn(C64) -> bool) -> Result<f64, SpectralError> {
    while hi - lo > BISECTION_WIDTH {
        let mid = 0.5 * (lo + hi);
        let cands = candidates(&model.spectrum(mid, FAMILY_TOLERANCE)?);
        match track(at_lo, &cands) {
            Some(z) if !pred(z) => {
                lo = mid;
                at_lo = z;
            }
            _ => hi = mid,
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::step_vector;
    use crate::kernel::swap_operator;
    use crate::state_space::Branch;
    use proptest::prelude::*;

    fn model(n_in: usize, n_out: usize, eps: f64, r: f64) -> LinearModel {
        LinearModel::new(ModelParams::new(n_in, n_out, eps, r, 0.0).unwrap()).unwrap()
    }

    #[test]
    fn steady_state_is_balanced_and_swap_invariant() {
        for &(n_in, n_out, eps, r) in &[(12, 18, 0.05, 0.05), (3, 6, 0.1, 0.2), (1, 4, 0.2, 0.3), (12, 18, 0.05, 0.3)] {
            let m = model(n_in, n_out, eps, r);
            let st = m.steady.as_vector();
            assert!((m.space.on_indicator().dot(st) - 0.5).abs() < 1e-10);
            let t = swap_operator(&m.space).into_matrix();
            assert!((&t * st - st).lp_norm(1) < 1e-10);
            let p = assemble_static(&m.components, r).unwrap().into_matrix();
            assert!((&p * st - st).lp_norm(1) < 1e-12);
        }
    }

    #[test]
    fn tiny_space_matches_null_space_oracle() {
        let m = model(1, 4, 0.1, 0.2);
        let p = assemble_static(&m.components, 0.2).unwrap().into_matrix();
        // independent oracle: Gaussian elimination on (p - I) with the last equation
        // replaced by normalization, done by hand on a row-major copy
        let k = p.nrows();
        let mut a: Vec<Vec<f64>> = (0..k)
            .map(|i| {
                let mut row: Vec<f64> = (0..k).map(|j| p[(i, j)] - if i == j { 1.0 } else { 0.0 }).collect();
                row.push(0.0);
                row
            })
            .collect();
        a[k - 1] = vec![1.0; k + 1];
        for c in 0..k {
            let piv = (c..k).max_by(|&x, &y| a[x][c].abs().partial_cmp(&a[y][c].abs()).unwrap()).unwrap();
            a.swap(c, piv);
            for r in 0..k {
                if r != c {
                    let f = a[r][c] / a[c][c];
                    for j in c..=k {
                        a[r][j] -= f * a[c][j];
                    }
                }
            }
        }
        for i in 0..k {
            let expected = a[i][k] / a[i][i];
            assert!((m.steady.as_vector()[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn linearization_at_alpha_zero_is_static() {
        let m = model(4, 8, 0.05, 0.1);
        let p = assemble_static(&m.components, 0.1).unwrap().into_matrix();
        assert_eq!(m.linearized(0.0).unwrap(), p);
    }

    #[test]
    fn linearized_columns_sum_to_one() {
        let m = model(12, 18, 0.05, 0.05);
        let s = m.linearized(10.0).unwrap();
        for j in 0..s.ncols() {
            assert!((s.column(j).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn linearization_refuses_unbalanced_state() {
        let m = model(3, 6, 0.05, 0.1);
        let bad = Distribution::point_mass(m.space.len(), 0);
        let err = linearized_matrix(&m.space, &m.components, &m.law(3.0), &bad).unwrap_err();
        assert!(matches!(err, SpectralError::NotBalanced(_)));
    }

    #[test]
    fn finite_difference_matches_linearization() {
        let m = model(6, 10, 0.05, 0.05);
        let alpha = 4.0;
        let law = m.law(alpha);
        let s = m.linearized(alpha).unwrap();
        let k = m.space.len();
        let mut delta = DVector::from_fn(k, |i, _| ((i * 7 + 3) as f64).sin());
        let mean = delta.mean();
        delta.add_scalar_mut(-mean);
        let st = m.steady.as_vector();
        let mut errs = Vec::new();
        for h in [1e-3, 1e-4] {
            let plus = step_vector(&(st + &delta * h), &m.space, &m.components, &law);
            let minus = step_vector(&(st - &delta * h), &m.space, &m.components, &law);
            let fd = (plus - minus) / (2.0 * h);
            errs.push((fd - &s * &delta).norm());
        }
        assert!(errs[1] < 1e-5, "{errs:?}");
        assert!(errs[1] <= errs[0] + 1e-12);
    }

    #[test]
    fn stationary_mode_is_unique_and_others_sum_to_zero() {
        let m = model(12, 18, 0.05, 0.05);
        let spec = m.spectrum(10.0, FAMILY_TOLERANCE).unwrap();
        let stationary: Vec<usize> = (0..spec.len()).filter(|&i| spec.family[i] == Family::Stationary).collect();
        assert_eq!(stationary, vec![0]);
        for i in 1..spec.len() {
            let psi = spec.right.column(i);
            let sum: C64 = psi.iter().sum();
            assert!(sum.norm() < 1e-8 * psi.iter().map(|z| z.norm()).sum::<f64>(), "mode {i}");
        }
    }

    #[test]
    fn conjugate_pairs_and_reconstruction() {
        let m = model(12, 18, 0.05, 0.05);
        let s = m.linearized(10.0).unwrap();
        let spec = classify_families(eigendecompose(&s).unwrap(), m.space.on_indicator(), FAMILY_TOLERANCE);
        let mut i = 0;
        while i < spec.len() {
            let z = spec.eigenvalues[i];
            if z.im != 0.0 {
                assert_eq!(spec.eigenvalues[i + 1], z.conj());
                i += 2;
            } else {
                i += 1;
            }
        }
        let lam = DMatrix::from_diagonal(&DVector::from_vec(spec.eigenvalues.clone()));
        let rebuilt = &spec.right * lam * &spec.left;
        let diff = rebuilt.map(|z| z.re) - &s;
        assert!(diff.norm() / s.norm() < 1e-6);
        assert!(rebuilt.iter().all(|z| z.im.abs() < 1e-8));
        let id = &spec.left * &spec.right;
        assert!((id - DMatrix::<C64>::identity(spec.len(), spec.len())).iter().all(|z| z.norm() < 1e-8));
    }

    #[test]
    fn ghost_modes_do_not_depend_on_alpha() {
        let m = model(12, 18, 0.05, 0.05);
        let ghosts = |alpha: f64| {
            let spec = m.spectrum(alpha, FAMILY_TOLERANCE).unwrap();
            let mut g: Vec<C64> = (0..spec.len()).filter(|&i| spec.family[i] == Family::Ghost).map(|i| spec.eigenvalues[i]).collect();
            g.sort_by(|a, b| a.re.partial_cmp(&b.re).unwrap().then(a.im.partial_cmp(&b.im).unwrap()));
            g
        };
        let base = ghosts(0.0);
        // half of the 60 modes are swap-symmetric, one of them stationary
        assert_eq!(base.len(), 29);
        for alpha in [5.0, 10.0] {
            let other = ghosts(alpha);
            assert_eq!(other.len(), base.len());
            for (a, b) in base.iter().zip(&other) {
                assert!((a - b).norm() < 1e-8);
            }
        }
    }

    #[test]
    fn ghost_modes_are_swap_symmetric() {
        let m = model(5, 8, 0.05, 0.1);
        let spec = m.spectrum(6.0, FAMILY_TOLERANCE).unwrap();
        for i in 0..spec.len() {
            let psi = spec.right.column(i);
            let swapped: Vec<C64> = (0..psi.len()).map(|k| psi[m.space.swap_index(k)]).collect();
            let sym = psi.iter().zip(&swapped).all(|(a, b)| (a - b).norm() < 1e-8);
            assert_eq!(sym, spec.family[i] == Family::Ghost, "mode {i}");
        }
    }

    #[test]
    fn gap_examples() {
        let m = model(12, 18, 0.05, 0.05);
        let g = gap(&m.spectrum(10.0, FAMILY_TOLERANCE).unwrap()).unwrap();
        assert!(g.gap > 0.0 && g.regime == Regime::SuperRelaxation);
        assert!((g.gap - (g.min_re_sf - g.min_re_wf)).abs() < 1e-15);
        let g0 = gap(&m.spectrum(0.0, FAMILY_TOLERANCE).unwrap()).unwrap();
        assert!(g0.gap.abs() <= FAMILY_TOLERANCE && g0.regime == Regime::Standard);
        let m = model(12, 18, 0.05, 0.1);
        for alpha in [0.0, 0.5, 1.0] {
            let g = gap(&m.spectrum(alpha, FAMILY_TOLERANCE).unwrap()).unwrap();
            assert!(g.gap.abs() <= FAMILY_TOLERANCE, "alpha {alpha}: {}", g.gap);
        }
        let raw = eigendecompose(&m.linearized(1.0).unwrap()).unwrap();
        assert_eq!(gap(&raw), Err(SpectralError::Unclassified));
    }

    #[test]
    fn stability_examples() {
        let m = model(12, 18, 0.05, 0.2);
        assert_eq!(stability(&m.spectrum(25.0, FAMILY_TOLERANCE).unwrap()).verdict, Stability::Unstable);
        let s5 = stability(&m.spectrum(5.0, FAMILY_TOLERANCE).unwrap());
        assert_eq!(s5.verdict, Stability::Stable);
        assert!(s5.max_modulus < 1.0);
        assert_eq!(stability(&m.spectrum(0.0, FAMILY_TOLERANCE).unwrap()).verdict, Stability::Stable);
    }

    #[test]
    fn perturbation_shape_is_zero_sum() {
        let m = model(12, 18, 0.05, 0.05);
        let v = perturbation_shape(&m.spectrum(10.0, FAMILY_TOLERANCE).unwrap()).unwrap();
        assert!(v.sum().abs() < 1e-12);
        assert!((v.lp_norm(1) - 1.0).abs() < 1e-12);
        // significant modes break the on/off symmetry
        let u = m.space.on_indicator();
        assert!(u.dot(&v).abs() > 1e-6);
        let _ = Branch::On;
    }

    #[test]
    fn transitions_short_grid() {
        let params = ModelParams::new(12, 18, 0.05, 0.2, 0.0).unwrap();
        let grid: Vec<f64> = (0..=24).map(|k| k as f64 * 0.5).collect();
        let t = alpha_transitions(params, &grid).unwrap();
        let (a0, a1) = (t.alpha0.unwrap(), t.alpha1.unwrap());
        assert!(a0 < a1);
        assert_eq!(t.alpha2, None);
        // closed-form estimate of the zero crossing at these parameters is 7.75
        assert!(a1 > 7.75 / 2.0 && a1 < 7.75 * 2.0);
    }

    /// Characteristic polynomial by Faddeev-LeVerrier, roots by Durand-Kerner.
    fn polynomial_roots(a: &DMatrix<f64>) -> Vec<C64> {
        let n = a.nrows();
        let mut coeffs = vec![1.0];
        let mut m = DMatrix::<f64>::zeros(n, n);
        for k in 1..=n {
            m = a * &m + DMatrix::identity(n, n) * coeffs[k - 1];
            let c = -(a * &m).trace() / k as f64;
            coeffs.push(c);
        }
        let eval = |z: C64| coeffs.iter().fold(C64::new(0.0, 0.0), |acc, c| acc * z + *c);
        let seed = C64::new(0.4, 0.9);
        let mut roots: Vec<C64> = (0..n).map(|k| seed.powu(k as u32) * 2.0).collect();
        for _ in 0..2000 {
            for i in 0..n {
                let mut denom = C64::new(1.0, 0.0);
                for j in 0..n {
                    if i != j {
                        denom *= roots[i] - roots[j];
                    }
                }
                let step = eval(roots[i]) / denom;
                roots[i] -= step;
            }
        }
        roots
    }

    #[test]
    fn random_matrix_matches_polynomial_roots() {
        let mut state = 12345u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let a = DMatrix::from_fn(8, 8, |_, _| next());
        let spec = eigendecompose(&a).unwrap();
        let roots = polynomial_roots(&a);
        for z in &spec.eigenvalues {
            let best = roots.iter().map(|r| (r - z).norm()).fold(f64::INFINITY, f64::min);
            assert!(best < 1e-6, "{z} unmatched: {best}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn spectra_of_random_models_are_consistent(
            n_in in 1usize..6,
            half in 2usize..5,
            eps in 0.02f64..0.2,
            r_frac in 0.05f64..0.95,
            alpha in 0.0f64..20.0,
        ) {
            let eps = eps.min(0.24);
            let r = r_frac * (1.0 - 2.0 * eps);
            let m = model(n_in, 2 * half, eps, r);
            let spec = m.spectrum(alpha, FAMILY_TOLERANCE).unwrap();
            let stationary = spec.family.iter().filter(|f| **f == Family::Stationary).count();
            prop_assert_eq!(stationary, 1);
            let id = &spec.left * &spec.right;
            let err = (id - DMatrix::<C64>::identity(spec.len(), spec.len())).iter().map(|z| z.norm()).fold(0.0, f64::max);
            prop_assert!(err < 1e-8);
            let im_sum: f64 = spec.eigenvalues.iter().map(|z| z.im).sum();
            prop_assert!(im_sum.abs() < 1e-9);
        }
    }
}
