//! Entropy, mutual information, redundancy and rate-distortion quantities.
//!
//! Everything is measured in bits. The discrete mutual-information routines
//! are exact enumeration oracles for small joints; the Gaussian routines are
//! the estimators used at run time.

use std::collections::BTreeSet;
use std::f64::consts::{E, PI};

use nalgebra::{DMatrix, DVector};
use ndarray::{Array3, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

const TWO_PI_E: f64 = 2.0 * PI * E;

/// Differential entropy of a scalar Gaussian with variance `sigma2`.
pub fn gaussian_entropy(sigma2: f64) -> Result<f64> {
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(Error::Domain(format!("variance must be positive, got {sigma2}")));
    }
    Ok(0.5 * (TWO_PI_E * sigma2).log2())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateDistortionQuery {
    pub sigma2: f64,
    pub d0: f64,
    /// `H·W·C`
    pub pixel_count: usize,
}

/// Rate-distortion function of an i.i.d. Gaussian image source under MSE,
/// `max{h(X) − (HWC/2)·log₂(2πe·D₀), 0}`.
pub fn rate_distortion(q: RateDistortionQuery) -> Result<f64> {
    if !(q.sigma2 > 0.0) || !(q.d0 > 0.0) || q.pixel_count == 0 {
        return Err(Error::Domain(format!(
            "rate-distortion needs positive sigma2, D0 and pixel count, got {q:?}"
        )));
    }
    // h(X) − (HWC/2)·log₂(2πe·D₀) collapses to (HWC/2)·log₂(σ²/D₀).
    Ok((0.5 * q.pixel_count as f64 * (q.sigma2 / q.d0).log2()).max(0.0))
}

/// Bits per pixel of `n` tokens drawn from a codebook of size `k`.
pub fn code_rate(n: usize, k: usize, h: usize, w: usize, c: usize) -> Result<f64> {
    if k < 2 || h == 0 || w == 0 || c == 0 {
        return Err(Error::Domain(format!(
            "code rate needs K >= 2 and positive dimensions, got K={k} {h}x{w}x{c}"
        )));
    }
    Ok(n as f64 * (k as f64).log2() / (h * w * c) as f64)
}

/// Smallest MSE a Gaussian source of variance `sigma2` admits at `rate_bpp`
/// bits per sample, `σ²·2^(−2R)`.
pub fn gaussian_distortion_bound(sigma2: f64, rate_bpp: f64) -> f64 {
    sigma2 * (-2.0 * rate_bpp).exp2()
}

/// Orthogonal projector onto the row space of a `k×D` basis.
#[derive(Debug, Clone)]
pub struct RowProjector {
    dim: usize,
    /// Orthonormal spanning vectors, one per column.
    span: DMatrix<f64>,
}

impl RowProjector {
    pub fn new(basis: ArrayView2<f64>) -> Result<Self> {
        let (k, d) = basis.dim();
        if basis.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite projection basis".into()));
        }
        if k == 0 || basis.iter().all(|v| *v == 0.0) {
            return Ok(Self { dim: d, span: DMatrix::zeros(d, 0) });
        }
        let a = DMatrix::from_fn(d, k, |i, j| basis[(j, i)]);
        let svd = a.svd(true, false);
        let u = svd.u.expect("left singular vectors requested");
        let tol = svd.singular_values.max() * 1e-10;
        let keep: Vec<usize> = (0..svd.singular_values.len())
            .filter(|&i| svd.singular_values[i] > tol)
            .collect();
        Ok(Self {
            dim: d,
            span: u.select_columns(&keep),
        })
    }

    pub fn project(&self, v: ArrayView1<f64>) -> Result<Vec<f64>> {
        if v.len() != self.dim {
            return Err(Error::Config(format!(
                "projection dimension mismatch: vector {} vs basis {}",
                v.len(),
                self.dim
            )));
        }
        let x = DVector::from_iterator(self.dim, v.iter().copied());
        let coef = self.span.tr_mul(&x);
        Ok((&self.span * coef).iter().copied().collect())
    }
}

/// Orthogonal projection of `v` onto the row space of `basis`.
pub fn project_onto_rows(v: ArrayView1<f64>, basis: ArrayView2<f64>) -> Result<Vec<f64>> {
    if basis.ncols() != v.len() {
        return Err(Error::Config(format!(
            "projection dimension mismatch: vector {} vs basis {}",
            v.len(),
            basis.ncols()
        )));
    }
    RowProjector::new(basis)?.project(v)
}

/// Sample variance (population form) of a slice.
pub fn variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Score of one patch token's unique information given the global tokens:
/// squared projection residual times the raw patch complexity.
pub fn conditional_entropy_proxy(
    patch_token: ArrayView1<f64>,
    globals: ArrayView2<f64>,
    raw_patch: &[f64],
) -> Result<f64> {
    proxy_with(&RowProjector::new(globals)?, patch_token, raw_patch)
}

/// [`conditional_entropy_proxy`] with the global projector built once.
pub fn proxy_with(projector: &RowProjector, patch_token: ArrayView1<f64>, raw_patch: &[f64]) -> Result<f64> {
    let proj = projector.project(patch_token)?;
    let residual: f64 = patch_token
        .iter()
        .zip(&proj)
        .map(|(t, p)| (t - p) * (t - p))
        .sum();
    let complexity = variance(raw_patch) + 1e-12;
    let score = residual * complexity;
    if !score.is_finite() {
        return Err(Error::Domain("non-finite proxy score".into()));
    }
    Ok(score.max(0.0))
}

/// Covariance shrinkage added before any Gaussian entropy fit.
pub const SHRINKAGE: f64 = 1e-6;

fn covariance(columns: &[Vec<f64>]) -> DMatrix<f64> {
    let d = columns.len();
    let m = columns[0].len() as f64;
    let means: Vec<f64> = columns.iter().map(|c| c.iter().sum::<f64>() / m).collect();
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let s: f64 = columns[i]
                .iter()
                .zip(&columns[j])
                .map(|(a, b)| (a - means[i]) * (b - means[j]))
                .sum();
            cov[(i, j)] = s / (m - 1.0);
            cov[(j, i)] = cov[(i, j)];
        }
        cov[(i, i)] += SHRINKAGE;
    }
    cov
}

fn cholesky_diag(cov: DMatrix<f64>) -> Result<Vec<f64>> {
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::Estimation("covariance is singular after shrinkage".into()))?;
    let l = chol.l();
    Ok((0..l.nrows()).map(|i| l[(i, i)]).collect())
}

/// Gaussian-fit entropy of the given coordinates, accumulated through the
/// chain rule `Σⱼ h(cⱼ | c₍<ⱼ₎)` with every conditional term floored at zero.
///
/// A coordinate that is (nearly) a deterministic function of earlier ones then
/// contributes nothing instead of a large negative value driven by the
/// shrinkage constant.
fn chained_entropy(columns: &[Vec<f64>]) -> Result<f64> {
    let diag = cholesky_diag(covariance(columns))?;
    Ok(diag
        .iter()
        .map(|l| (0.5 * (TWO_PI_E * l * l).log2()).max(0.0))
        .sum())
}

/// Plain Gaussian differential entropy `½·log₂((2πe)^d·det Σ)`.
fn gaussian_joint_entropy(columns: &[Vec<f64>]) -> Result<f64> {
    let diag = cholesky_diag(covariance(columns))?;
    let d = diag.len() as f64;
    Ok(0.5 * (d * TWO_PI_E.log2() + diag.iter().map(|l| 2.0 * l.log2()).sum::<f64>()))
}

fn standardize(columns: &mut [Vec<f64>]) -> Result<()> {
    for (j, col) in columns.iter_mut().enumerate() {
        let var = variance(col);
        if !(var > 0.0) || !var.is_finite() {
            return Err(Error::Estimation(format!("coordinate {j} has zero variance")));
        }
        let n = col.len() as f64;
        let mean = col.iter().sum::<f64>() / n;
        let sd = var.sqrt();
        col.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    }
    Ok(())
}

/// Redundancy of a token ensemble, `(Σᵢ h(zᵢ) − h(z)) / Σᵢ h(zᵢ)`.
///
/// `samples` has shape `(m, n, D)`: `m` observations of `n` tokens of width
/// `D`. Coordinates are standardized first so every marginal entropy is
/// positive.
pub fn redundancy(samples: &Array3<f64>) -> Result<f64> {
    let (m, n, d) = samples.dim();
    if n < 2 {
        return Err(Error::Estimation(format!("redundancy needs at least 2 tokens, got {n}")));
    }
    if d == 0 || m < d * n || m < 2 {
        return Err(Error::Estimation(format!(
            "need at least D·n = {} samples, got {m}",
            d * n
        )));
    }
    let mut columns: Vec<Vec<f64>> = (0..n * d)
        .map(|c| (0..m).map(|s| samples[(s, c / d, c % d)]).collect())
        .collect();
    standardize(&mut columns)?;
    let marginal_sum = columns
        .chunks(d)
        .map(chained_entropy)
        .sum::<Result<f64>>()?;
    let joint = chained_entropy(&columns)?;
    if !(marginal_sum > 0.0) {
        return Err(Error::Estimation("marginal entropies sum to zero".into()));
    }
    Ok((marginal_sum - joint) / marginal_sum)
}

/// Gaussian-fit mutual information `h(X) + h(Y) − h(X, Y)` between two
/// paired sample sets (rows are observations).
pub fn gaussian_mutual_information(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    let (m, dx) = x.dim();
    let (my, dy) = y.dim();
    if m != my {
        return Err(Error::Estimation(format!("paired samples differ in length: {m} vs {my}")));
    }
    if m <= dx + dy {
        return Err(Error::Estimation(format!(
            "need more than {} samples, got {m}",
            dx + dy
        )));
    }
    let mut cols: Vec<Vec<f64>> = (0..dx)
        .map(|j| x.column(j).to_vec())
        .chain((0..dy).map(|j| y.column(j).to_vec()))
        .collect();
    standardize(&mut cols)?;
    let hx = gaussian_joint_entropy(&cols[..dx])?;
    let hy = gaussian_joint_entropy(&cols[dx..])?;
    let hxy = gaussian_joint_entropy(&cols)?;
    Ok((hx + hy - hxy).max(0.0))
}

/// A joint probability table over discrete variables, stored row-major
/// (last variable fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    dims: Vec<usize>,
    probs: Vec<f64>,
}

/// Largest table the enumeration oracle accepts.
pub const MAX_JOINT_CELLS: usize = 4096;

impl DiscreteJoint {
    pub fn new(dims: Vec<usize>, probs: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::Domain(format!("invalid alphabet sizes {dims:?}")));
        }
        let cells = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&c| c <= MAX_JOINT_CELLS)
            .ok_or_else(|| Error::Domain(format!("joint over {dims:?} exceeds {MAX_JOINT_CELLS} cells")))?;
        if probs.len() != cells {
            return Err(Error::Domain(format!("expected {cells} probabilities, got {}", probs.len())));
        }
        if probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::Domain("probabilities must be finite and nonnegative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self { dims, probs })
    }

    /// Normalizes arbitrary nonnegative weights into a joint.
    pub fn from_weights(dims: Vec<usize>, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Domain("weights must have positive mass".into()));
        }
        let mut probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        // push the rounding residue into the largest cell
        let residue = 1.0 - probs.iter().sum::<f64>();
        if let Some(max) = probs
            .iter_mut()
            .max_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal))
        {
            *max += residue;
        }
        Self::new(dims, probs)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_vars(&self) -> usize {
        self.dims.len()
    }

    /// Calls `f(outcome, p)` for every cell.
    pub fn for_each_cell(&self, mut f: impl FnMut(&[usize], f64)) {
        let mut outcome = vec![0usize; self.dims.len()];
        for &p in &self.probs {
            f(&outcome, p);
            for v in (0..outcome.len()).rev() {
                outcome[v] += 1;
                if outcome[v] < self.dims[v] {
                    break;
                }
                outcome[v] = 0;
            }
        }
    }

    /// Shannon entropy of the marginal over `vars`.
    pub fn entropy(&self, vars: &BTreeSet<usize>) -> f64 {
        if vars.is_empty() {
            return 0.0;
        }
        let vars: Vec<usize> = vars.iter().copied().collect();
        let size: usize = vars.iter().map(|&v| self.dims[v]).product();
        let mut marginal = vec![0.0; size];
        self.for_each_cell(|outcome, p| {
            let idx = vars.iter().fold(0, |acc, &v| acc * self.dims[v] + outcome[v]);
            marginal[idx] += p;
        });
        -marginal
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.log2())
            .sum::<f64>()
    }

    /// The joint with variable `source` replaced by `f(source)`, where `f`
    /// maps its outcomes onto `0..out_size`.
    pub fn push_forward(&self, source: usize, out_size: usize, f: &[usize]) -> Result<Self> {
        if source >= self.dims.len() || f.len() != self.dims[source] || f.iter().any(|&v| v >= out_size) {
            return Err(Error::Domain("invalid push-forward map".into()));
        }
        let mut dims = self.dims.clone();
        dims[source] = out_size;
        let size: usize = dims.iter().product();
        let mut probs = vec![0.0; size];
        self.for_each_cell(|outcome, p| {
            let idx = outcome.iter().enumerate().fold(0, |acc, (v, &o)| {
                let o = if v == source { f[o] } else { o };
                acc * dims[v] + o
            });
            probs[idx] += p;
        });
        Self::new(dims, probs)
    }
}

/// Exact conditional mutual information `I(A; B | cond)` by enumeration.
pub fn exact_mi(joint: &DiscreteJoint, a: &[usize], b: &[usize], cond: &[usize]) -> Result<f64> {
    let set = |vars: &[usize]| -> Result<BTreeSet<usize>> {
        let s: BTreeSet<usize> = vars.iter().copied().collect();
        if s.len() != vars.len() {
            return Err(Error::Domain(format!("repeated variable in {vars:?}")));
        }
        if let Some(v) = s.iter().find(|&&v| v >= joint.num_vars()) {
            return Err(Error::Domain(format!("variable {v} not in joint")));
        }
        Ok(s)
    };
    let (a, b, c) = (set(a)?, set(b)?, set(cond)?);
    if !a.is_disjoint(&b) || !a.is_disjoint(&c) || !b.is_disjoint(&c) {
        return Err(Error::Domain("variable groups must be disjoint".into()));
    }
    let union = |x: &BTreeSet<usize>, y: &BTreeSet<usize>| x.union(y).copied().collect::<BTreeSet<_>>();
    let ac = union(&a, &c);
    let bc = union(&b, &c);
    let abc = union(&ac, &b);
    Ok(joint.entropy(&ac) + joint.entropy(&bc) - joint.entropy(&abc) - joint.entropy(&c))
}

/// DTF threshold `τ = max(T, (1 − ε)·H_total)`.
pub fn dtf_threshold(h_total: f64, epsilon: f64, t: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::Domain(format!("epsilon {epsilon} outside [0, 1)")));
    }
    if !(h_total >= 0.0) || !(t >= 0.0) {
        return Err(Error::Domain(format!("H_total ({h_total}) and T ({t}) must be nonnegative")));
    }
    Ok(t.max((1.0 - epsilon) * h_total))
}

/// Information the patch tokens must supply once the globals carry a fraction
/// `alpha` of `R(D₀)`: `T = (1 − α)·R(D₀)`.
pub fn supplement_requirement(alpha: f64, rd0: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha {alpha} outside (0, 1)")));
    }
    if !(rd0 >= 0.0) {
        return Err(Error::Domain(format!("R(D0) must be nonnegative, got {rd0}")));
    }
    Ok((1.0 - alpha) * rd0)
}

/// Distortion floor after the code rate grows by `delta_r` bits:
/// `D_min·2^(−2ΔR)`.
pub fn rate_gain_distortion_bound(d_min: f64, delta_r: f64) -> Result<f64> {
    if !(d_min > 0.0) {
        return Err(Error::Domain(format!("D_min must be positive, got {d_min}")));
    }
    if !(delta_r >= 0.0) {
        return Err(Error::Domain(format!("rate increment must be nonnegative, got {delta_r}")));
    }
    Ok(d_min * (-2.0 * delta_r).exp2())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn gaussian_entropy_examples() {
        assert!(gaussian_entropy(1.0 / TWO_PI_E).unwrap().abs() < 1e-15);
        let x = 0.37;
        let diff = gaussian_entropy(4.0 * x).unwrap() - gaussian_entropy(x).unwrap();
        assert!((diff - 1.0).abs() < 1e-14);
        // ½·log₂(2πe) = ½·log₂(17.0794684...) = 2.04709558...
        assert!((gaussian_entropy(1.0).unwrap() - 2.047095585180641).abs() < 1e-12);
        assert!(gaussian_entropy(0.0).is_err());
        assert!(gaussian_entropy(-1.0).is_err());
    }

    #[test]
    fn rate_distortion_examples() {
        let q = |sigma2, d0, pixel_count| RateDistortionQuery { sigma2, d0, pixel_count };
        assert_eq!(rate_distortion(q(0.3, 0.3, 10)).unwrap(), 0.0);
        assert_eq!(rate_distortion(q(1.0, 0.25, 1)).unwrap(), 1.0);
        assert_eq!(rate_distortion(q(1.0, 2.0, 100)).unwrap(), 0.0);
        assert!(rate_distortion(q(0.0, 1.0, 1)).is_err());
        assert!(rate_distortion(q(1.0, -1.0, 1)).is_err());
        // closed form equals h(X) − (HWC/2)·log₂(2πe·D₀)
        let (s2, d0, n) = (0.8, 0.05, 12);
        let direct = n as f64 * gaussian_entropy(s2).unwrap() - 0.5 * n as f64 * (TWO_PI_E * d0).log2();
        assert!((rate_distortion(q(s2, d0, n)).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn code_rate_examples() {
        let r = code_rate(256, 1024, 256, 256, 3).unwrap();
        assert!((r - 2560.0 / 196608.0).abs() < 1e-15);
        assert!((r - 0.01302).abs() < 1e-5);
        assert_eq!(code_rate(12, 2, 2, 2, 3).unwrap(), 1.0);
        assert_eq!(code_rate(20, 16, 4, 4, 1).unwrap(), 2.0 * code_rate(10, 16, 4, 4, 1).unwrap());
        assert!(code_rate(1, 1, 1, 1, 1).is_err());
    }

    #[test]
    fn proxy_examples() {
        let globals = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let raw = [0.0, 1.0, 0.0, 1.0];
        let in_span = array![0.3, -2.0, 0.0];
        let s = conditional_entropy_proxy(in_span.view(), globals.view(), &raw).unwrap();
        assert!(s.abs() < 1e-20);

        let off = array![0.3, -2.0, 5.0];
        let s = conditional_entropy_proxy(off.view(), globals.view(), &[0.4; 4]).unwrap();
        assert!(s < 1e-10);

        let empty = Array2::<f64>::zeros((0, 3));
        let s = conditional_entropy_proxy(off.view(), empty.view(), &raw).unwrap();
        let norm2 = 0.09 + 4.0 + 25.0;
        assert!((s - norm2 * (0.25 + 1e-12)).abs() < 1e-12);

        let bad = array![[1.0, 0.0]];
        assert!(matches!(
            conditional_entropy_proxy(off.view(), bad.view(), &raw),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn projection_handles_rank_deficient_basis() {
        let globals = array![[1.0, 1.0, 0.0], [2.0, 2.0, 0.0], [0.0, 0.0, 0.0]];
        let v = array![1.0, 0.0, 3.0];
        let p = project_onto_rows(v.view(), globals.view()).unwrap();
        for (a, b) in p.iter().zip([0.5, 0.5, 0.0]) {
            assert!((a - b).abs() < 1e-12, "{p:?}");
        }
    }

    fn ensemble(seed: u64, m: usize, n: usize, d: usize, duplicate: bool) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Array3::zeros((m, n, d));
        for s in 0..m {
            for t in 0..n {
                for j in 0..d {
                    out[(s, t, j)] = if duplicate && t > 0 {
                        out[(s, 0, j)]
                    } else {
                        rng.sample(StandardNormal)
                    };
                }
            }
        }
        out
    }

    #[test]
    fn redundancy_examples() {
        let red = redundancy(&ensemble(1, 5000, 4, 2, false)).unwrap();
        assert!(red.abs() < 0.05, "{red}");
        let red = redundancy(&ensemble(2, 5000, 2, 2, true)).unwrap();
        assert!((red - 0.5).abs() < 0.05, "{red}");
        let red = redundancy(&ensemble(3, 5000, 4, 2, true)).unwrap();
        assert!((red - 0.75).abs() < 0.05, "{red}");
    }

    #[test]
    fn redundancy_errors() {
        assert!(matches!(redundancy(&ensemble(1, 5, 4, 2, false)), Err(Error::Estimation(_))));
        assert!(matches!(redundancy(&ensemble(1, 50, 1, 2, false)), Err(Error::Estimation(_))));
        let mut z = ensemble(1, 100, 2, 2, false);
        z.slice_mut(ndarray::s![.., 1, 0]).fill(3.0);
        assert!(matches!(redundancy(&z), Err(Error::Estimation(_))));
    }

    #[test]
    fn gaussian_mi_sanity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = 4000;
        let x = Array2::from_shape_fn((m, 1), |_| rng.sample::<f64, _>(StandardNormal));
        let noise = Array2::from_shape_fn((m, 1), |_| rng.sample::<f64, _>(StandardNormal));
        let y = &x + &noise;
        // I = ½·log₂(1 + SNR) = ½ bit at unit SNR
        let mi = gaussian_mutual_information(x.view(), y.view()).unwrap();
        assert!((mi - 0.5).abs() < 0.05, "{mi}");
        let mi = gaussian_mutual_information(x.view(), noise.view()).unwrap();
        assert!(mi < 0.01, "{mi}");
    }

    #[test]
    fn exact_mi_examples() {
        let indep = DiscreteJoint::new(vec![2, 2], vec![0.25; 4]).unwrap();
        assert!(exact_mi(&indep, &[0], &[1], &[]).unwrap().abs() < 1e-15);
        let copy = DiscreteJoint::new(vec![2, 2], vec![0.5, 0.0, 0.0, 0.5]).unwrap();
        assert!((exact_mi(&copy, &[0], &[1], &[]).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(exact_mi(&copy, &[0], &[0], &[]), Err(Error::Domain(_))));
        assert!(matches!(exact_mi(&copy, &[0], &[2], &[]), Err(Error::Domain(_))));
    }

    #[test]
    fn joint_validation() {
        assert!(DiscreteJoint::new(vec![2], vec![0.5, 0.6]).is_err());
        assert!(DiscreteJoint::new(vec![2], vec![1.5, -0.5]).is_err());
        assert!(DiscreteJoint::new(vec![4096, 2], vec![0.0; 8192]).is_err());
    }

    fn arb_joint() -> impl Strategy<Value = DiscreteJoint> {
        proptest::collection::vec(1usize..=4, 3..=4).prop_flat_map(|dims| {
            let cells: usize = dims.iter().product();
            proptest::collection::vec(0.0f64..1.0, cells)
                .prop_filter("positive mass", |w| w.iter().sum::<f64>() > 1e-3)
                .prop_map(move |w| DiscreteJoint::from_weights(dims.clone(), w).unwrap())
        })
    }

    proptest! {
        #[test]
        fn chain_rule_and_symmetry(j in arb_joint()) {
            let lhs = exact_mi(&j, &[0], &[1, 2], &[]).unwrap();
            let rhs = exact_mi(&j, &[0], &[1], &[]).unwrap() + exact_mi(&j, &[0], &[2], &[1]).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12);
            let ab = exact_mi(&j, &[0], &[1], &[2]).unwrap();
            let ba = exact_mi(&j, &[1], &[0], &[2]).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-12);
            prop_assert!(ab >= -1e-12);
        }

        #[test]
        fn rate_distortion_monotone(s2 in 0.01f64..2.0, a in 0.001f64..3.0, b in 0.001f64..3.0, n in 1usize..100) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let q = |d0| RateDistortionQuery { sigma2: s2, d0, pixel_count: n };
            let rlo = rate_distortion(q(lo)).unwrap();
            let rhi = rate_distortion(q(hi)).unwrap();
            prop_assert!(rlo >= rhi && rhi >= 0.0);
            if hi >= s2 { prop_assert_eq!(rhi, 0.0); }
        }
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(dtf_threshold(12.5, 0.0, 0.0).unwrap(), 12.5);
        assert_eq!(dtf_threshold(10.0, 0.05, 11.0).unwrap(), 11.0);
        assert_eq!(dtf_threshold(100.0, 0.05, 40.0).unwrap(), 95.0);
        assert!(dtf_threshold(1.0, 1.0, 0.0).is_err());
        assert!(dtf_threshold(1.0, -0.1, 0.0).is_err());
    }

    #[test]
    fn supplement_examples() {
        assert!(supplement_requirement(1.0 - 1e-12, 10.0).unwrap() < 1e-10);
        assert_eq!(supplement_requirement(0.5, 10.0).unwrap(), 5.0);
        assert!((supplement_requirement(0.3, 7.2).unwrap() - 5.04).abs() < 1e-12);
        assert!(supplement_requirement(0.0, 1.0).is_err());
        assert!(supplement_requirement(1.0, 1.0).is_err());
    }

    #[test]
    fn rate_gain_bound_examples() {
        assert_eq!(rate_gain_distortion_bound(0.7, 0.0).unwrap(), 0.7);
        assert_eq!(rate_gain_distortion_bound(0.7, 0.5).unwrap(), 0.35);
        let vals: Vec<f64> = (0..20).map(|i| rate_gain_distortion_bound(1.0, i as f64 * 0.1).unwrap()).collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]));
        assert!(rate_gain_distortion_bound(0.0, 1.0).is_err());
    }
}
