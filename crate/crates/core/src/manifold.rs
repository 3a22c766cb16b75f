//! Stiefel-manifold geometry for the `B` factor.
//!
//! For `B ∈ St(d, r)` and a Euclidean gradient `G`, the skew direction
//!
//! ```text
//! Ŵ = G·Bᵀ − ½·B·Bᵀ·G·Bᵀ = P·Bᵀ,   P = G − ½·B·(BᵀG)
//! W = Ŵ − Ŵᵀ = P·Bᵀ − B·Pᵀ
//! ```
//!
//! has rank at most `2r` and is only ever applied in factored form:
//! `W·X = P·(BᵀX) − B·(PᵀX)`.

use crate::error::{ForaError, Result};
use crate::linalg::{matmul, matmul_tn, qr_thin, solve, Matrix};
use crate::rng::{streams, RngStream};

/// Drift above which a QR retraction is forced.
pub const DRIFT_LIMIT: f64 = 1e-3;

/// A `d × r` matrix that should have orthonormal columns, with the
/// orthonormality defect `‖BᵀB − I‖_F` from its last audit.
#[derive(Debug, Clone, PartialEq)]
pub struct StiefelPoint {
    b: Matrix,
    drift: f64,
}

impl StiefelPoint {
    /// Wrap `b` and audit its drift.
    pub fn new(b: Matrix) -> Self {
        let drift = b.orthonormality_defect();
        Self { b, drift }
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn into_inner(self) -> Matrix {
        self.b
    }

    pub fn drift(&self) -> f64 {
        self.drift
    }

    /// Recompute and return the drift.
    pub fn audit(&mut self) -> f64 {
        self.drift = self.b.orthonormality_defect();
        self.drift
    }
}

/// Implicit skew-symmetric `W = u·vᵀ − v·uᵀ` with `d × r` factors.
#[derive(Debug, Clone, PartialEq)]
pub struct SkewFactor {
    u: Matrix,
    v: Matrix,
}

impl SkewFactor {
    pub fn new(u: Matrix, v: Matrix) -> Result<Self> {
        if u.shape() != v.shape() {
            return Err(ForaError::ShapeMismatch {
                op: "skew_factor",
                lhs: u.shape(),
                rhs: v.shape(),
            });
        }
        Ok(Self { u, v })
    }

    pub fn dim(&self) -> usize {
        self.u.rows()
    }

    pub fn u(&self) -> &Matrix {
        &self.u
    }

    pub fn v(&self) -> &Matrix {
        &self.v
    }

    pub fn is_zero(&self) -> bool {
        self.u.max_abs() == 0.0 || self.v.max_abs() == 0.0
    }

    /// `W·x` without forming `W`.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let vx = matmul_tn(&self.v, x)?;
        let ux = matmul_tn(&self.u, x)?;
        let mut out = matmul(&self.u, &vx)?;
        out.add_assign(&matmul(&self.v, &ux)?, -1.0)?;
        Ok(out)
    }

    /// Dense `d × d` matrix. Only for small problems and test oracles.
    pub fn dense(&self) -> Matrix {
        let uv = crate::linalg::matmul_nt(&self.u, &self.v).expect("factor shapes match");
        let vu = uv.transpose();
        uv.sub(&vu).expect("square")
    }
}

fn check_same(op: &'static str, b: &Matrix, g: &Matrix) -> Result<()> {
    if b.shape() != g.shape() {
        return Err(ForaError::ShapeMismatch {
            op,
            lhs: b.shape(),
            rhs: g.shape(),
        });
    }
    Ok(())
}

/// Projection of `g` onto the tangent space at `b`: `G − B·sym(BᵀG)`.
pub fn riemannian_grad(b: &Matrix, g: &Matrix) -> Result<Matrix> {
    check_same("riemannian_grad", b, g)?;
    let btg = matmul_tn(b, g)?;
    let sym = btg.add(&btg.transpose())?.scale(0.5);
    let mut out = g.clone();
    out.add_assign(&matmul(b, &sym)?, -1.0)?;
    Ok(out)
}

/// Skew direction for `(b, g)`; `W·B` equals the Riemannian gradient when
/// `b` is exactly orthonormal.
pub fn build_skew(b: &Matrix, g: &Matrix) -> Result<SkewFactor> {
    check_same("build_skew", b, g)?;
    let btg = matmul_tn(b, g)?;
    let mut p = g.clone();
    p.add_assign(&matmul(b, &btg)?, -0.5)?;
    SkewFactor::new(p, b.clone())
}

fn check_skew(w: &Matrix) -> Result<()> {
    if w.rows() != w.cols() {
        return Err(ForaError::ShapeMismatch {
            op: "cayley",
            lhs: w.shape(),
            rhs: w.shape(),
        });
    }
    let defect = w.add(&w.transpose())?.max_abs();
    if defect > 1e-12 {
        return Err(ForaError::NotSkew(defect));
    }
    Ok(())
}

/// Cayley transform `Q = (I − α/2·W)⁻¹ (I + α/2·W)` of a dense skew `W`.
pub fn cayley_transform(w: &Matrix, alpha: f64) -> Result<Matrix> {
    check_skew(w)?;
    let n = w.rows();
    let eye = Matrix::identity(n);
    let half = w.scale(alpha / 2.0);
    let lhs = eye.sub(&half)?;
    let rhs = eye.add(&half)?;
    solve(&lhs, &rhs)
}

/// Reference Cayley update `Q·B` with a dense solve.
pub fn cayley_direct(w: &Matrix, b: &Matrix, alpha: f64) -> Result<Matrix> {
    let q = cayley_transform(w, alpha)?;
    matmul(&q, b)
}

/// Fixed-point solve of `Y = B + (α/2)·W·(B + Y)` starting from
/// `Y⁰ = B + α·W·B`, with `n_c` iterations.
///
/// Fails if the step norm `‖Yᵏ⁺¹ − Yᵏ‖_F` grows on two consecutive
/// iterations.
pub fn cayley_fixed_point(skew: &SkewFactor, b: &Matrix, alpha: f64, n_c: usize) -> Result<Matrix> {
    if n_c == 0 {
        return Err(ForaError::Config("n_c must be >= 1".into()));
    }
    if skew.dim() != b.rows() {
        return Err(ForaError::ShapeMismatch {
            op: "cayley_fixed_point",
            lhs: (skew.dim(), skew.dim()),
            rhs: b.shape(),
        });
    }
    let wb = skew.apply(b)?;
    // Constant part of the iteration: B + (α/2)·W·B.
    let mut base = b.clone();
    base.add_assign(&wb, alpha / 2.0)?;
    let mut y = b.clone();
    y.add_assign(&wb, alpha)?;
    let mut last_step = f64::INFINITY;
    let mut growth = 0;
    for k in 0..n_c {
        let mut next = base.clone();
        next.add_assign(&skew.apply(&y)?, alpha / 2.0)?;
        let step = frob_diff(&next, &y);
        if !step.is_finite() || !next.is_finite() {
            return Err(ForaError::NonFinite("cayley_fixed_point"));
        }
        if step > last_step {
            growth += 1;
            if growth >= 2 {
                return Err(ForaError::FixedPointDivergence { iteration: k + 1 });
            }
        } else {
            growth = 0;
        }
        last_step = step;
        y = next;
    }
    Ok(y)
}

fn frob_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Re-project onto the manifold with a thin QR (non-negative `diag(R)`).
pub fn qr_retract(b: &Matrix) -> Result<StiefelPoint> {
    Ok(StiefelPoint::new(qr_thin(b)?.q))
}

/// Estimate of `‖W‖₂` from `iterations` power steps started at a fixed,
/// seeded vector.
pub fn spectral_norm_estimate(skew: &SkewFactor, iterations: usize, seed: u64) -> Result<f64> {
    let d = skew.dim();
    let mut s = RngStream::new(seed, streams::POWER_ITERATION);
    let mut x = Matrix::from_fn(d, 1, |_, _| s.gaussian());
    let n = x.frobenius_norm();
    x.scale_in_place(1.0 / n);
    let mut est = 0.0;
    for _ in 0..iterations.max(1) {
        let y = skew.apply(&x)?;
        est = y.frobenius_norm();
        if est == 0.0 {
            return Ok(0.0);
        }
        x = y.scale(1.0 / est);
    }
    Ok(est)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{probe, random_gaussian};
    use proptest::prelude::*;

    fn stiefel(d: usize, r: usize, s: &mut RngStream) -> Matrix {
        qr_thin(&random_gaussian(d, r, 1.0, s)).unwrap().q
    }

    fn rs(seed: u64) -> RngStream {
        RngStream::new(seed, streams::TEST)
    }

    fn tangency(b: &Matrix, xi: &Matrix) -> f64 {
        let btx = matmul_tn(b, xi).unwrap();
        btx.add(&btx.transpose()).unwrap().frobenius_norm()
    }

    #[test]
    fn tangent_input_is_fixed() {
        let mut s = rs(1);
        let b = stiefel(12, 3, &mut s);
        let c = random_gaussian(12, 3, 1.0, &mut s);
        let g = riemannian_grad(&b, &c).unwrap();
        let again = riemannian_grad(&b, &g).unwrap();
        assert!(again.max_abs_diff(&g) <= 1e-12);
    }

    #[test]
    fn normal_direction_projects_to_zero() {
        let b = stiefel(10, 4, &mut rs(2));
        assert!(riemannian_grad(&b, &b).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn projection_matches_skew_form() {
        let mut s = rs(3);
        for _ in 0..20 {
            let b = stiefel(20, 5, &mut s);
            let g = random_gaussian(20, 5, 1.0, &mut s);
            let xi = riemannian_grad(&b, &g).unwrap();
            assert!(tangency(&b, &xi) <= 1e-12);
            let wb = build_skew(&b, &g).unwrap().apply(&b).unwrap();
            assert!(xi.max_abs_diff(&wb) <= 1e-10);
        }
    }

    #[test]
    fn zero_gradient_gives_zero_skew() {
        let mut s = rs(4);
        let b = stiefel(8, 2, &mut s);
        let w = build_skew(&b, &Matrix::zeros(8, 2)).unwrap();
        let x = random_gaussian(8, 3, 1.0, &mut s);
        assert_eq!(w.apply(&x).unwrap().max_abs(), 0.0);
        assert_eq!(cayley_fixed_point(&w, &b, 0.1, 5).unwrap(), b);
    }

    #[test]
    fn factored_apply_matches_dense() {
        let mut s = rs(5);
        let b = stiefel(6, 2, &mut s);
        let g = random_gaussian(6, 2, 1.0, &mut s);
        let w = build_skew(&b, &g).unwrap();
        // Dense oracle built entry by entry from Ŵ = G·Bᵀ − ½·B·Bᵀ·G·Bᵀ.
        let bbt_g = matmul(&matmul(&b, &b.transpose()).unwrap(), &g).unwrap();
        let what = Matrix::from_fn(6, 6, |i, j| {
            (0..2).map(|k| g[(i, k)] * b[(j, k)] - 0.5 * bbt_g[(i, k)] * b[(j, k)]).sum()
        });
        let dense = what.sub(&what.transpose()).unwrap();
        let x = random_gaussian(6, 4, 1.0, &mut s);
        let direct = matmul(&dense, &x).unwrap();
        assert!(w.apply(&x).unwrap().max_abs_diff(&direct) <= 1e-12);
        assert!(w.dense().max_abs_diff(&dense) <= 1e-12);
        assert_eq!(dense.add(&dense.transpose()).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn factored_path_cost_is_linear_in_d() {
        let mut s = rs(6);
        let (d, r) = (256, 8);
        let b = stiefel(d, r, &mut s);
        let g = random_gaussian(d, r, 1.0, &mut s);
        probe::reset();
        let w = build_skew(&b, &g).unwrap();
        let _ = cayley_fixed_point(&w, &b, 0.01, 5).unwrap();
        let reading = probe::read();
        // 2 products for the skew, 4 per apply, 1 + 5 applies.
        assert!(reading.madds <= 30 * (d * r * r) as u64, "{reading:?}");
        assert!(reading.largest_alloc < d * d);
    }

    #[test]
    fn cayley_zero_is_identity() {
        let b = stiefel(5, 2, &mut rs(7));
        assert_eq!(cayley_direct(&Matrix::zeros(5, 5), &b, 0.3).unwrap(), b);
    }

    #[test]
    fn cayley_two_by_two_is_rotation() {
        let (w, alpha) = (0.7, 0.4);
        let m = Matrix::from_rows(&[[0.0, w], [-w, 0.0]]);
        let q = cayley_transform(&m, alpha).unwrap();
        let theta = 2.0 * (alpha * w / 2.0).atan();
        let expect = Matrix::from_rows(&[[theta.cos(), theta.sin()], [-theta.sin(), theta.cos()]]);
        assert!(q.max_abs_diff(&expect) <= 1e-15);
    }

    #[test]
    fn cayley_rejects_non_skew() {
        let m = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]);
        assert!(matches!(cayley_transform(&m, 0.1), Err(ForaError::NotSkew(_))));
    }

    #[test]
    fn fixed_point_matches_direct_small_step() {
        let mut s = rs(8);
        let b = stiefel(16, 4, &mut s);
        let g = random_gaussian(16, 4, 1.0, &mut s);
        let w = build_skew(&b, &g).unwrap();
        let fp = cayley_fixed_point(&w, &b, 0.01, 5).unwrap();
        let direct = cayley_direct(&w.dense(), &b, 0.01).unwrap();
        assert!(frob_diff(&fp, &direct) <= 1e-8);
    }

    #[test]
    fn fixed_point_contraction_ratio() {
        let mut s = rs(9);
        let b = stiefel(16, 4, &mut s);
        let g = random_gaussian(16, 4, 1.0, &mut s);
        let w = build_skew(&b, &g).unwrap();
        let dense = w.dense();
        let norm = crate::linalg::singular_values(&dense).largest();
        let alpha = 0.4 / norm;
        let direct = cayley_direct(&dense, &b, alpha).unwrap();
        let errs: Vec<f64> = (1..=5)
            .map(|k| frob_diff(&cayley_fixed_point(&w, &b, alpha, k).unwrap(), &direct))
            .collect();
        let bound = alpha * norm / 2.0;
        for pair in errs.windows(2) {
            let ratio = pair[1] / pair[0];
            assert!(ratio <= bound * 1.0001, "ratio {ratio} bound {bound}");
            assert!(ratio >= 0.25 * bound, "ratio {ratio} bound {bound}");
        }
    }

    #[test]
    fn divergence_is_detected() {
        let mut s = rs(10);
        let b = stiefel(16, 4, &mut s);
        let g = random_gaussian(16, 4, 1.0, &mut s);
        let w = build_skew(&b, &g).unwrap();
        let norm = crate::linalg::singular_values(&w.dense()).largest();
        let err = cayley_fixed_point(&w, &b, 8.0 / norm, 10).unwrap_err();
        assert!(matches!(err, ForaError::FixedPointDivergence { .. }));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn qr_retract_examples() {
        let mut s = rs(11);
        let b = stiefel(20, 4, &mut s);
        let fixed = qr_retract(&b).unwrap();
        assert!(fixed.b().max_abs_diff(&b) <= 1e-12);
        assert!(fixed.drift() <= 1e-12);

        let mut noisy = b.clone();
        noisy.add_assign(&random_gaussian(20, 4, 1e-4, &mut s), 1.0).unwrap();
        let back = qr_retract(&noisy).unwrap();
        assert!(back.drift() <= 1e-12);
        let dist = frob_diff(back.b(), &noisy);
        assert!(dist > 1e-6 && dist < 1e-3, "{dist}");

        let mut zero_col = b.clone();
        for i in 0..20 {
            zero_col.row_mut(i)[2] = 0.0;
        }
        assert!(matches!(
            qr_retract(&zero_col),
            Err(ForaError::RankDeficient { column: 2 })
        ));
    }

    #[test]
    fn spectral_estimate_is_close_and_never_above_truth() {
        let mut s = rs(12);
        let b = stiefel(32, 4, &mut s);
        let g = random_gaussian(32, 4, 1.0, &mut s);
        let w = build_skew(&b, &g).unwrap();
        let truth = crate::linalg::singular_values(&w.dense()).largest();
        let est = spectral_norm_estimate(&w, 3, 0).unwrap();
        assert!(est <= truth * (1.0 + 1e-12));
        assert!(est >= 0.5 * truth);
        assert_eq!(est, spectral_norm_estimate(&w, 3, 0).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn tangency_holds_universally(seed in 0u64..10_000, d in 4usize..40, r_frac in 0.0f64..1.0) {
            let r = 1 + ((d - 1) as f64 * r_frac * 0.5) as usize;
            let mut s = rs(seed);
            let b = stiefel(d, r, &mut s);
            let g = random_gaussian(d, r, 3.0, &mut s);
            let xi = riemannian_grad(&b, &g).unwrap();
            prop_assert!(tangency(&b, &xi) <= 1e-12);
        }

        #[test]
        fn cayley_is_orthogonal(seed in 0u64..10_000, n in 2usize..24, a_idx in 0usize..3) {
            let alpha = [1e-3, 1e-2, 1e-1][a_idx];
            let mut s = rs(seed);
            let m = random_gaussian(n, n, 1.0, &mut s);
            let w = m.sub(&m.transpose()).unwrap();
            let q = cayley_transform(&w, alpha).unwrap();
            prop_assert!(q.orthonormality_defect() <= 1e-12);
        }
    }
}
