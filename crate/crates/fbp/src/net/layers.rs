//! Per-sample layer kernels with hand-derived gradients.
//!
//! Convolutions are valid (no padding), stride 1, and run as im2col plus a
//! GEMM; pooling is non-overlapping 2×2 max with floor on odd extents;
//! dropout uses the inverted convention (masks are 0 or 1/keep so eval mode
//! is the identity). All planes are row-major [channel, height, width].

use crate::real::Real;
use crate::rng::Rng;

/// Geometry of one convolution: `out_extent = in_extent - kernel + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_channels: usize,
    pub in_extent: usize,
    pub out_maps: usize,
    pub kernel: usize,
}

impl ConvShape {
    pub fn out_extent(&self) -> usize {
        self.in_extent - self.kernel + 1
    }
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
    pub fn out_len(&self) -> usize {
        self.out_maps * self.out_extent() * self.out_extent()
    }
    pub fn weight_len(&self) -> usize {
        self.out_maps * self.patch_len()
    }
}

/// Unfold `x` ([C, E, E]) into a patch matrix of shape
/// [C·k·k, out_extent²], one column per output position.
fn im2col<T: Real>(x: &[T], sh: &ConvShape, col: &mut Vec<T>) {
    let (e, k, oe) = (sh.in_extent, sh.kernel, sh.out_extent());
    col.clear();
    col.reserve(sh.patch_len() * oe * oe);
    for c in 0..sh.in_channels {
        let plane = &x[c * e * e..(c + 1) * e * e];
        for ky in 0..k {
            for kx in 0..k {
                for oy in 0..oe {
                    let row = &plane[(oy + ky) * e + kx..(oy + ky) * e + kx + oe];
                    col.extend_from_slice(row);
                }
            }
        }
    }
}

/// Scatter a patch-matrix gradient back onto the input plane.
fn col2im<T: Real>(dcol: &[T], sh: &ConvShape, dx: &mut [T]) {
    let (e, k, oe) = (sh.in_extent, sh.kernel, sh.out_extent());
    for v in dx.iter_mut() {
        *v = T::ZERO;
    }
    let mut r = 0;
    for c in 0..sh.in_channels {
        let plane = &mut dx[c * e * e..(c + 1) * e * e];
        for ky in 0..k {
            for kx in 0..k {
                for oy in 0..oe {
                    let src = &dcol[(r * oe + oy) * oe..(r * oe + oy) * oe + oe];
                    let dst = &mut plane[(oy + ky) * e + kx..(oy + ky) * e + kx + oe];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += *s;
                    }
                }
                r += 1;
            }
        }
    }
}

/// Forward convolution with fused ReLU. `w` is [M, C, k, k] flattened,
/// `b` is [M]. Returns the post-activation maps [M, oe, oe].
pub fn conv_forward<T: Real>(x: &[T], w: &[T], b: &[T], sh: &ConvShape, relu: bool) -> Vec<T> {
    debug_assert_eq!(x.len(), sh.in_channels * sh.in_extent * sh.in_extent);
    debug_assert_eq!(w.len(), sh.weight_len());
    debug_assert_eq!(b.len(), sh.out_maps);
    let oe = sh.out_extent();
    let oo = oe * oe;
    let mut col = Vec::new();
    im2col(x, sh, &mut col);
    let mut out = vec![T::ZERO; sh.out_len()];
    T::gemm(sh.out_maps, sh.patch_len(), oo, T::ONE, w, &col, T::ZERO, &mut out);
    for m in 0..sh.out_maps {
        let bias = b[m];
        for v in &mut out[m * oo..(m + 1) * oo] {
            *v += bias;
            if relu && *v < T::ZERO {
                *v = T::ZERO;
            }
        }
    }
    out
}

/// Gradients of the convolution. `post` is the forward output (used for the
/// ReLU mask), `dout` the upstream gradient. Returns (dw, db, dx); the patch
/// matrix is recomputed from `x` rather than cached.
pub fn conv_backward<T: Real>(
    x: &[T],
    w: &[T],
    sh: &ConvShape,
    relu: bool,
    post: &[T],
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let oe = sh.out_extent();
    let oo = oe * oe;
    let mut dpre: Vec<T> = dout.to_vec();
    if relu {
        for (d, &p) in dpre.iter_mut().zip(post) {
            if p <= T::ZERO {
                *d = T::ZERO;
            }
        }
    }

    let mut db = vec![T::ZERO; sh.out_maps];
    for m in 0..sh.out_maps {
        db[m] = T::from_f64(dpre[m * oo..(m + 1) * oo].iter().map(|v| v.to_f64()).sum());
    }

    let mut col = Vec::new();
    im2col(x, sh, &mut col);

    // dW = dPre (M×OO) · colᵀ (OO×R)
    let r = sh.patch_len();
    let mut dw = vec![T::ZERO; sh.weight_len()];
    T::gemm_strided(sh.out_maps, oo, r, T::ONE, &dpre, oo as isize, 1, &col, 1, oo as isize, T::ZERO, &mut dw);

    // dcol = Wᵀ (R×M) · dPre (M×OO)
    let mut dcol = vec![T::ZERO; r * oo];
    T::gemm_strided(r, sh.out_maps, oo, T::ONE, w, 1, r as isize, &dpre, oo as isize, 1, T::ZERO, &mut dcol);

    let mut dx = vec![T::ZERO; x.len()];
    col2im(&dcol, sh, &mut dx);
    (dw, db, dx)
}

/// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
/// `argmax` records the flat input index feeding each output element, with
/// first-found tie-breaking in scan order (top-left, top-right, bottom-left,
/// bottom-right).
pub fn pool_forward<T: Real>(x: &[T], channels: usize, extent: usize) -> (Vec<T>, Vec<u32>) {
    let oe = extent / 2;
    let mut out = vec![T::ZERO; channels * oe * oe];
    let mut argmax = vec![0u32; channels * oe * oe];
    for c in 0..channels {
        let plane = &x[c * extent * extent..(c + 1) * extent * extent];
        for oy in 0..oe {
            for ox in 0..oe {
                let mut best_idx = (2 * oy) * extent + 2 * ox;
                let mut best = plane[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (2 * oy + dy) * extent + 2 * ox + dx;
                    if plane[idx] > best {
                        best = plane[idx];
                        best_idx = idx;
                    }
                }
                let o = c * oe * oe + oy * oe + ox;
                out[o] = best;
                argmax[o] = (c * extent * extent + best_idx) as u32;
            }
        }
    }
    (out, argmax)
}

pub fn pool_backward<T: Real>(dout: &[T], argmax: &[u32], in_len: usize) -> Vec<T> {
    let mut dx = vec![T::ZERO; in_len];
    for (&g, &idx) in dout.iter().zip(argmax) {
        dx[idx as usize] += g;
    }
    dx
}

/// Fully-connected layer on the flattened input; `w` is [out, in] row-major.
pub fn fc_forward<T: Real>(x: &[T], w: &[T], b: &[T], relu: bool) -> Vec<T> {
    let out_n = b.len();
    let in_n = x.len();
    debug_assert_eq!(w.len(), out_n * in_n);
    let mut out = b.to_vec();
    T::gemm(out_n, in_n, 1, T::ONE, w, x, T::ONE, &mut out);
    if relu {
        for v in &mut out {
            if *v < T::ZERO {
                *v = T::ZERO;
            }
        }
    }
    out
}

pub fn fc_backward<T: Real>(
    x: &[T],
    w: &[T],
    relu: bool,
    post: &[T],
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let out_n = post.len();
    let in_n = x.len();
    let mut dpre: Vec<T> = dout.to_vec();
    if relu {
        for (d, &p) in dpre.iter_mut().zip(post) {
            if p <= T::ZERO {
                *d = T::ZERO;
            }
        }
    }
    // dW = dPre (out×1) · xᵀ (1×in)
    let mut dw = vec![T::ZERO; out_n * in_n];
    T::gemm(out_n, 1, in_n, T::ONE, &dpre, x, T::ZERO, &mut dw);
    // dx = Wᵀ (in×out) · dPre
    let mut dx = vec![T::ZERO; in_n];
    T::gemm_strided(in_n, out_n, 1, T::ONE, w, 1, in_n as isize, &dpre, 1, 1, T::ZERO, &mut dx);
    (dw, dpre, dx)
}

/// Inverted dropout: each element is kept with probability `keep` and scaled
/// by 1/keep, so the expected train-mode output equals the eval-mode output.
pub fn dropout_forward<T: Real>(x: &[T], keep: f64, rng: &mut Rng) -> (Vec<T>, Vec<T>) {
    let inv = T::from_f64(1.0 / keep);
    let mut mask = vec![T::ZERO; x.len()];
    let mut out = vec![T::ZERO; x.len()];
    for i in 0..x.len() {
        if rng.next_f64() < keep {
            mask[i] = inv;
            out[i] = x[i] * inv;
        }
    }
    (out, mask)
}

pub fn dropout_backward<T: Real>(dout: &[T], mask: &[T]) -> Vec<T> {
    dout.iter().zip(mask).map(|(&d, &m)| d * m).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_hand_computed_dot_product() {
        // One 2x2 kernel over a 2x2 input: a single dot product plus bias.
        let sh = ConvShape { in_channels: 1, in_extent: 2, out_maps: 1, kernel: 2 };
        let x = [1.0, 2.0, 3.0, 4.0];
        let w = [0.5, -1.0, 0.25, 2.0];
        let b = [0.125];
        let out = conv_forward(&x, &w, &b, &sh, true);
        // 0.5*1 - 1*2 + 0.25*3 + 2*4 + 0.125 = 7.375
        assert_eq!(out, vec![7.375]);

        let neg_b = [-10.0];
        let out = conv_forward(&x, &w, &neg_b, &sh, true);
        assert_eq!(out, vec![0.0], "relu clips");
    }

    #[test]
    fn conv_two_channel_window() {
        let sh = ConvShape { in_channels: 2, in_extent: 3, out_maps: 1, kernel: 2 };
        // channel 0 = ramp, channel 1 = constant 1
        let mut x = vec![0.0; 18];
        for i in 0..9 {
            x[i] = i as f64;
        }
        for i in 9..18 {
            x[i] = 1.0;
        }
        // kernel picks the top-left element of channel 0 and sums channel 1
        let w = [1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        let b = [0.0];
        let out = conv_forward(&x, &w, &b, &sh, false);
        assert_eq!(out, vec![4.0, 5.0, 7.0, 8.0]);
    }

    #[test]
    fn pool_basics_and_tie_break() {
        let x = [1.0, 2.0, 3.0, 4.0, 4.0, 4.0, 4.0, 4.0];
        let (out, argmax) = pool_forward(&x, 2, 2);
        assert_eq!(out, vec![4.0, 4.0]);
        assert_eq!(argmax[0], 3);
        assert_eq!(argmax[1], 4, "first-found tie break");

        // Odd extent: last row/column dropped.
        let x: Vec<f64> = (0..25).map(|i| i as f64).collect();
        let (out, _) = pool_forward(&x, 1, 5);
        assert_eq!(out, vec![6.0, 8.0, 16.0, 18.0]);
    }

    #[test]
    fn pool_shift_invariance() {
        let mut rng = Rng::new(8);
        let x: Vec<f64> = (0..2 * 36).map(|_| rng.next_f64()).collect();
        let shifted: Vec<f64> = x.iter().map(|v| v + 3.25).collect();
        let (a, _) = pool_forward(&x, 2, 6);
        let (b, _) = pool_forward(&shifted, 2, 6);
        for (p, q) in a.iter().zip(&b) {
            assert_eq!(p + 3.25, *q);
        }
    }

    #[test]
    fn fc_hand_computed() {
        let x = [1.0, -2.0, 3.0];
        let w = [1.0, 1.0, 1.0, 0.5, 0.0, -0.5];
        let b = [0.0, 1.0];
        let out = fc_forward(&x, &w, &b, false);
        assert_eq!(out, vec![2.0, 0.0]);
    }

    #[test]
    fn dropout_mask_values_and_eval_expectation() {
        let x = vec![1.0f64; 10_000];
        let mut rng = Rng::new(17);
        let (out, mask) = dropout_forward(&x, 0.5, &mut rng);
        assert!(mask.iter().all(|&m| m == 0.0 || m == 2.0));
        let kept = mask.iter().filter(|&&m| m != 0.0).count();
        assert!((kept as f64 / 10_000.0 - 0.5).abs() < 0.02);
        // Inverted scaling: the mean output matches eval mode (identity).
        let mean = out.iter().sum::<f64>() / out.len() as f64;
        assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
    }

    // Central finite differences on every kernel, against a scalar readout
    // L = sum(out ⊙ g) with a fixed random g.
    fn fd_check(analytic: &[f64], mut f: impl FnMut(usize, f64) -> f64, n_params: usize) {
        let h = 1e-4;
        for i in 0..n_params {
            let plus = f(i, h);
            let minus = f(i, -h);
            let fd = (plus - minus) / (2.0 * h);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-8);
            assert!(
                (analytic[i] - fd).abs() / denom < 1e-5,
                "param {i}: analytic {} vs fd {fd}",
                analytic[i]
            );
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let sh = ConvShape { in_channels: 2, in_extent: 5, out_maps: 3, kernel: 3 };
        let mut rng = Rng::new(42);
        let x: Vec<f64> = (0..2 * 25).map(|_| rng.uniform(0.1, 1.0)).collect();
        let w: Vec<f64> = (0..sh.weight_len()).map(|_| rng.uniform(-0.5, 0.5)).collect();
        let b: Vec<f64> = (0..3).map(|_| rng.uniform(0.2, 0.6)).collect();
        let g: Vec<f64> = (0..sh.out_len()).map(|_| rng.uniform(-1.0, 1.0)).collect();

        let loss = |w_: &[f64], b_: &[f64], x_: &[f64]| -> f64 {
            conv_forward(x_, w_, b_, &sh, true)
                .iter()
                .zip(&g)
                .map(|(o, gi)| o * gi)
                .sum()
        };
        let post = conv_forward(&x, &w, &b, &sh, true);
        let (dw, db, dx) = conv_backward(&x, &w, &sh, true, &post, &g);

        fd_check(&dw, |i, h| {
            let mut w2 = w.clone();
            w2[i] += h;
            loss(&w2, &b, &x)
        }, dw.len());
        fd_check(&db, |i, h| {
            let mut b2 = b.clone();
            b2[i] += h;
            loss(&w, &b2, &x)
        }, db.len());
        fd_check(&dx, |i, h| {
            let mut x2 = x.clone();
            x2[i] += h;
            loss(&w, &b, &x2)
        }, dx.len());
    }

    #[test]
    fn pool_gradients_match_finite_differences() {
        let mut rng = Rng::new(43);
        let x: Vec<f64> = (0..32).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let g: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let loss = |x_: &[f64]| -> f64 {
            pool_forward(x_, 2, 4).0.iter().zip(&g).map(|(o, gi)| o * gi).sum()
        };
        let (_, argmax) = pool_forward(&x, 2, 4);
        let dx = pool_backward(&g, &argmax, x.len());
        fd_check(&dx, |i, h| {
            let mut x2 = x.clone();
            x2[i] += h;
            loss(&x2)
        }, x.len());
    }

    #[test]
    fn fc_gradients_match_finite_differences() {
        let mut rng = Rng::new(44);
        let x: Vec<f64> = (0..6).map(|_| rng.uniform(0.1, 1.0)).collect();
        let w: Vec<f64> = (0..24).map(|_| rng.uniform(-0.5, 0.5)).collect();
        let b: Vec<f64> = (0..4).map(|_| rng.uniform(0.1, 0.5)).collect();
        let g: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let loss = |w_: &[f64], b_: &[f64], x_: &[f64]| -> f64 {
            fc_forward(x_, w_, b_, true).iter().zip(&g).map(|(o, gi)| o * gi).sum()
        };
        let post = fc_forward(&x, &w, &b, true);
        let (dw, db, dx) = fc_backward(&x, &w, true, &post, &g);
        fd_check(&dw, |i, h| {
            let mut w2 = w.clone();
            w2[i] += h;
            loss(&w2, &b, &x)
        }, dw.len());
        fd_check(&db, |i, h| {
            let mut b2 = b.clone();
            b2[i] += h;
            loss(&w, &b2, &x)
        }, db.len());
        fd_check(&dx, |i, h| {
            let mut x2 = x.clone();
            x2[i] += h;
            loss(&w, &b, &x2)
        }, dx.len());
    }

    #[test]
    fn dropout_gradients_with_fixed_mask() {
        let mut rng = Rng::new(45);
        let x: Vec<f64> = (0..16).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let g: Vec<f64> = (0..16).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let (_, mask) = dropout_forward(&x, 0.5, &mut Rng::new(7));
        let dx = dropout_backward(&g, &mask);
        let loss = |x_: &[f64]| -> f64 {
            x_.iter().zip(&mask).zip(&g).map(|((xi, mi), gi)| xi * mi * gi).sum()
        };
        fd_check(&dx, |i, h| {
            let mut x2 = x.clone();
            x2[i] += h;
            loss(&x2)
        }, x.len());
    }
}
