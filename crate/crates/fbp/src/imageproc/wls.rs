//! Weighted-least-squares smoothing of the lightness plane.
//!
//! `wls_base` minimizes
//!
//! ```text
//! sum_p (u_p - L_p)^2
//!   + lambda * sum_p [ a_x(p) (du/dx)_p^2 + a_y(p) (du/dy)_p^2 ]
//! ```
//!
//! with smoothness weights `a(p) = (|grad of guide|^alpha + eps)^-1` taken
//! from the log-luminance guide `log10(L/100 + 0.01)`. Gradients are
//! one-sided forward differences; nothing wraps at the borders. The normal
//! equations `(I + lambda*A) u = L` form a symmetric positive definite
//! 5-point system solved by Jacobi-preconditioned conjugate gradients.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct WlsParams {
    /// Smoothing strength; 0 returns the input unchanged.
    pub lambda: f64,
    /// Gradient-sensitivity exponent.
    pub alpha: f64,
    /// Regularizer keeping flat-region weights finite.
    pub eps: f64,
    /// Relative residual target for the CG solve.
    pub cg_tol: f64,
    /// Iteration cap; 0 means the automatic cap of 10·H·W.
    pub cg_max_iters: usize,
}

impl Default for WlsParams {
    fn default() -> Self {
        WlsParams { lambda: 0.125, alpha: 1.2, eps: 1e-4, cg_tol: 1e-6, cg_max_iters: 0 }
    }
}

impl WlsParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Arg(format!("wls lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Arg(format!("wls alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Arg(format!("wls eps must be > 0, got {}", self.eps)));
        }
        if !(self.cg_tol > 0.0 && self.cg_tol < 1.0) {
            return Err(Error::Arg(format!("cg_tol must be in (0,1), got {}", self.cg_tol)));
        }
        Ok(())
    }

    pub fn max_iters_for(&self, h: usize, w: usize) -> usize {
        if self.cg_max_iters == 0 {
            10 * h * w
        } else {
            self.cg_max_iters
        }
    }

    /// Stable fingerprint of the decomposition parameters, used by the
    /// on-disk cache layout.
    pub fn fingerprint(&self, out_size: usize, dtype_tag: u8) -> u64 {
        let text = format!(
            "lambda={:e};alpha={:e};eps={:e};tol={:e};iters={};size={};dtype={}",
            self.lambda, self.alpha, self.eps, self.cg_tol, self.cg_max_iters, out_size, dtype_tag
        );
        crate::util::fnv1a(text.as_bytes())
    }
}

/// Smoothness weights for the horizontal (x) and vertical (y) edges of the
/// pixel graph. `wx[y*w + x]` couples (y,x) with (y,x+1) and is zero in the
/// last column; `wy` likewise for the last row.
fn edge_weights<T: Real>(l: &[T], h: usize, w: usize, p: &WlsParams) -> (Vec<f64>, Vec<f64>) {
    let guide: Vec<f64> = l.iter().map(|&v| (v.to_f64() / 100.0 + 0.01).max(1e-12).log10()).collect();
    let mut wx = vec![0.0; h * w];
    let mut wy = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                let g = (guide[i + 1] - guide[i]).abs();
                wx[i] = 1.0 / (g.powf(p.alpha) + p.eps);
            }
            if y + 1 < h {
                let g = (guide[i + w] - guide[i]).abs();
                wy[i] = 1.0 / (g.powf(p.alpha) + p.eps);
            }
        }
    }
    (wx, wy)
}

/// The 5-point operator (I + lambda*A) applied to `u`.
struct Stencil<T> {
    h: usize,
    w: usize,
    lambda: T,
    wx: Vec<T>,
    wy: Vec<T>,
    diag: Vec<T>,
}

impl<T: Real> Stencil<T> {
    fn new(l: &[T], h: usize, w: usize, p: &WlsParams) -> Self {
        let (wx64, wy64) = edge_weights(l, h, w, p);
        let wx: Vec<T> = wx64.iter().map(|&v| T::from_f64(v)).collect();
        let wy: Vec<T> = wy64.iter().map(|&v| T::from_f64(v)).collect();
        let lambda = T::from_f64(p.lambda);
        let mut diag = vec![T::ONE; h * w];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let mut s = T::ZERO;
                if x + 1 < w {
                    s += wx[i];
                }
                if x > 0 {
                    s += wx[i - 1];
                }
                if y + 1 < h {
                    s += wy[i];
                }
                if y > 0 {
                    s += wy[i - w];
                }
                diag[i] = T::ONE + lambda * s;
            }
        }
        Stencil { h, w, lambda, wx, wy, diag }
    }

    fn apply(&self, u: &[T], out: &mut [T]) {
        let (h, w, lambda) = (self.h, self.w, self.lambda);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let mut acc = self.diag[i] * u[i];
                if x + 1 < w {
                    acc -= lambda * self.wx[i] * u[i + 1];
                }
                if x > 0 {
                    acc -= lambda * self.wx[i - 1] * u[i - 1];
                }
                if y + 1 < h {
                    acc -= lambda * self.wy[i] * u[i + w];
                }
                if y > 0 {
                    acc -= lambda * self.wy[i - w] * u[i - w];
                }
                out[i] = acc;
            }
        }
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x.to_f64() * y.to_f64()).sum()
}

/// Piecewise-smooth base layer of a [1, H, W] lightness plane.
pub fn wls_base<T: Real>(l_plane: &Tensor<T>, params: &WlsParams) -> Result<Tensor<T>> {
    params.validate()?;
    if l_plane.rank() != 3 || l_plane.shape()[0] != 1 {
        return Err(Error::Shape(format!("wls_base needs [1,H,W], got {:?}", l_plane.shape())));
    }
    if l_plane.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("wls_base input contains non-finite values".into()));
    }
    let (h, w) = (l_plane.shape()[1], l_plane.shape()[2]);
    let b = l_plane.data();
    let stencil = Stencil::new(b, h, w, params);

    let norm_b = dot(b, b).sqrt();
    if norm_b == 0.0 {
        return Ok(l_plane.clone());
    }

    // Starting from u = L makes the lambda = 0 case exact: the residual is
    // identically zero, so the input is returned bit-for-bit.
    let mut u: Vec<T> = b.to_vec();
    let mut r = vec![T::ZERO; h * w];
    stencil.apply(&u, &mut r);
    for (ri, &bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }

    let tol = params.cg_tol * norm_b;
    let max_iters = params.max_iters_for(h, w);
    let mut z: Vec<T> = r.iter().zip(&stencil.diag).map(|(&ri, &d)| ri / d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![T::ZERO; h * w];
    let mut residual = dot(&r, &r).sqrt();

    let mut iter = 0;
    while residual > tol {
        if iter >= max_iters {
            return Err(Error::Convergence { residual: residual / norm_b, iters: iter });
        }
        stencil.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            // SPD system; a non-positive curvature means arithmetic broke down.
            return Err(Error::Convergence { residual: residual / norm_b, iters: iter });
        }
        let alpha = T::from_f64(rz / pap);
        for i in 0..u.len() {
            u[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..z.len() {
            z[i] = r[i] / stencil.diag[i];
        }
        let rz_next = dot(&r, &z);
        let beta = T::from_f64(rz_next / rz);
        for i in 0..p.len() {
            p[i] = z[i] + beta * p[i];
        }
        rz = rz_next;
        residual = dot(&r, &r).sqrt();
        iter += 1;
    }

    Tensor::from_vec(&[1, h, w], u)
}

/// Sum of absolute one-sided neighbor differences; the smoothing tests use
/// it to confirm the base layer is never rougher than its input.
pub fn total_variation<T: Real>(plane: &Tensor<T>) -> f64 {
    let (h, w) = (plane.shape()[1], plane.shape()[2]);
    let d = plane.data();
    let mut tv = 0.0;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                tv += (d[i + 1].to_f64() - d[i].to_f64()).abs();
            }
            if y + 1 < h {
                tv += (d[i + w].to_f64() - d[i].to_f64()).abs();
            }
        }
    }
    tv
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn lambda_zero_is_identity() {
        let mut rng = Rng::new(21);
        let l = Tensor::<f64>::uniform(&mut rng, &[1, 6, 5], 0.0, 100.0).unwrap();
        let p = WlsParams { lambda: 0.0, ..WlsParams::default() };
        let base = wls_base(&l, &p).unwrap();
        assert_eq!(base, l);
    }

    #[test]
    fn constant_plane_is_fixed_point() {
        let l = Tensor::<f64>::filled(&[1, 8, 8], 42.5).unwrap();
        let base = wls_base(&l, &WlsParams::default()).unwrap();
        for (b, o) in base.iter().zip(l.iter()) {
            assert!((b - o).abs() < 1e-9);
        }
    }

    #[test]
    fn smoothing_reduces_total_variation() {
        let mut rng = Rng::new(33);
        let l = Tensor::<f64>::uniform(&mut rng, &[1, 12, 12], 0.0, 100.0).unwrap();
        let base = wls_base(&l, &WlsParams::default()).unwrap();
        assert!(total_variation(&base) <= total_variation(&l));
    }

    #[test]
    fn tv_monotone_in_lambda() {
        let mut rng = Rng::new(34);
        let l = Tensor::<f64>::uniform(&mut rng, &[1, 10, 14], 0.0, 100.0).unwrap();
        let mut last = f64::INFINITY;
        for lambda in [0.0, 0.05, 0.125, 0.5, 2.0] {
            let p = WlsParams { lambda, ..WlsParams::default() };
            let tv = total_variation(&wls_base(&l, &p).unwrap());
            assert!(tv <= last + 1e-9, "tv {tv} after {last} at lambda {lambda}");
            last = tv;
        }
    }

    #[test]
    fn rejects_bad_params_and_shapes() {
        let l = Tensor::<f64>::zeros(&[1, 4, 4]).unwrap();
        for p in [
            WlsParams { lambda: -1.0, ..WlsParams::default() },
            WlsParams { alpha: 0.0, ..WlsParams::default() },
            WlsParams { eps: 0.0, ..WlsParams::default() },
            WlsParams { cg_tol: 1.5, ..WlsParams::default() },
        ] {
            assert!(wls_base(&l, &p).is_err());
        }
        let bad = Tensor::<f64>::zeros(&[2, 4, 4]).unwrap();
        assert!(wls_base(&bad, &WlsParams::default()).is_err());
    }

    // Independent dense oracle: assemble (I + lambda*A) row by row from its
    // own weight computation and solve by Gaussian elimination with partial
    // pivoting. Kept free of the stencil/CG code on purpose.
    fn dense_solve(l: &[f64], h: usize, w: usize, p: &WlsParams) -> Vec<f64> {
        let n = h * w;
        let guide: Vec<f64> = l.iter().map(|&v| (v / 100.0 + 0.01).max(1e-12).log10()).collect();
        let weight = |i: usize, j: usize| {
            let g = (guide[j] - guide[i]).abs();
            1.0 / (g.powf(p.alpha) + p.eps)
        };
        let mut m = vec![0.0; n * n];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                m[i * n + i] += 1.0;
                let mut neighbors = Vec::new();
                if x + 1 < w {
                    neighbors.push(i + 1);
                }
                if y + 1 < h {
                    neighbors.push(i + w);
                }
                for j in neighbors {
                    let wij = p.lambda * weight(i, j);
                    m[i * n + i] += wij;
                    m[j * n + j] += wij;
                    m[i * n + j] -= wij;
                    m[j * n + i] -= wij;
                }
            }
        }
        let mut rhs = l.to_vec();
        for col in 0..n {
            let pivot = (col..n).max_by(|&a, &b| {
                m[a * n + col].abs().partial_cmp(&m[b * n + col].abs()).unwrap()
            }).unwrap();
            if pivot != col {
                for k in 0..n {
                    m.swap(col * n + k, pivot * n + k);
                }
                rhs.swap(col, pivot);
            }
            let d = m[col * n + col];
            for row in col + 1..n {
                let f = m[row * n + col] / d;
                if f != 0.0 {
                    for k in col..n {
                        m[row * n + k] -= f * m[col * n + k];
                    }
                    rhs[row] -= f * rhs[col];
                }
            }
        }
        let mut x = vec![0.0; n];
        for row in (0..n).rev() {
            let mut s = rhs[row];
            for k in row + 1..n {
                s -= m[row * n + k] * x[k];
            }
            x[row] = s / m[row * n + row];
        }
        x
    }

    #[test]
    fn cg_matches_dense_oracle() {
        let mut rng = Rng::new(4);
        for (h, w, lambda, alpha) in
            [(4, 4, 0.125, 1.2), (7, 5, 0.5, 1.0), (9, 9, 2.0, 1.8), (12, 3, 0.05, 1.2)]
        {
            let l = Tensor::<f64>::uniform(&mut rng, &[1, h, w], 0.0, 100.0).unwrap();
            let p = WlsParams { lambda, alpha, eps: 1e-4, cg_tol: 1e-10, cg_max_iters: 0 };
            let base = wls_base(&l, &p).unwrap();
            let oracle = dense_solve(l.data(), h, w, &p);
            for (got, want) in base.iter().zip(&oracle) {
                assert!((got - want).abs() < 1e-6, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn convergence_error_carries_residual() {
        let mut rng = Rng::new(35);
        let l = Tensor::<f64>::uniform(&mut rng, &[1, 16, 16], 0.0, 100.0).unwrap();
        let p = WlsParams { cg_max_iters: 1, cg_tol: 1e-12, ..WlsParams::default() };
        match wls_base(&l, &p) {
            Err(Error::Convergence { residual, iters }) => {
                assert!(residual > 0.0 && iters == 1);
            }
            other => panic!("expected convergence error, got {other:?}"),
        }
    }
}
