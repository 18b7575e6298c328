//! Row-major dense kernels over flat slices, generic over `f32` / `f64`.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Sum + Send + Sync + 'static
{
    /// Checkpoint dtype tag (byte width).
    const DTYPE: u8;

    /// `c = alpha * a b + beta * c` with arbitrary strides.
    ///
    /// # Safety
    /// Every addressed element of `a`, `b` and `c` must be in bounds.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }
}

impl Scalar for f32 {
    const DTYPE: u8 = 4;
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    const DTYPE: u8 = 8;
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// A row-major sub-matrix: `rows x cols` starting at `off` with row stride `ld`.
#[derive(Debug, Clone, Copy)]
pub struct View {
    pub off: usize,
    pub rows: usize,
    pub cols: usize,
    pub ld: usize,
}

impl View {
    pub fn full(rows: usize, cols: usize) -> Self {
        Self { off: 0, rows, cols, ld: cols }
    }

    pub fn at(off: usize, rows: usize, cols: usize, ld: usize) -> Self {
        Self { off, rows, cols, ld }
    }

    fn check(&self, len: usize) {
        if self.rows > 0 && self.cols > 0 {
            assert!(
                self.off + (self.rows - 1) * self.ld + self.cols <= len,
                "view {self:?} out of bounds for length {len}"
            );
        }
    }

    /// Logical shape and strides, optionally transposed.
    fn strided(&self, trans: bool) -> (usize, usize, isize, isize) {
        if trans {
            (self.cols, self.rows, 1, self.ld as isize)
        } else {
            (self.rows, self.cols, self.ld as isize, 1)
        }
    }
}

/// `c = alpha * op(a) op(b) + beta * c`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    alpha: T,
    a: &[T],
    va: View,
    ta: bool,
    b: &[T],
    vb: View,
    tb: bool,
    beta: T,
    c: &mut [T],
    vc: View,
) {
    va.check(a.len());
    vb.check(b.len());
    vc.check(c.len());
    let (m, k, rsa, csa) = va.strided(ta);
    let (k2, n, rsb, csb) = vb.strided(tb);
    assert_eq!(k, k2, "inner dimensions disagree");
    assert_eq!((m, n), (vc.rows, vc.cols), "output shape disagrees");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for r in 0..m {
            for v in &mut c[vc.off + r * vc.ld..vc.off + r * vc.ld + n] {
                *v = beta * *v;
            }
        }
        return;
    }
    // SAFETY: all three views were bounds-checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(va.off),
            rsa,
            csa,
            b.as_ptr().add(vb.off),
            rsb,
            csb,
            beta,
            c.as_mut_ptr().add(vc.off),
            vc.ld as isize,
            1,
        );
    }
}

/// `y = x w + b` for `x: m x din`, `w: din x dout`.
pub fn linear<T: Scalar>(x: &[T], m: usize, din: usize, w: &[T], b: &[T], dout: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(m * dout);
    for _ in 0..m {
        y.extend_from_slice(b);
    }
    gemm(T::one(), x, View::full(m, din), false, w, View::full(din, dout), false, T::one(), &mut y, View::full(m, dout));
    y
}

/// Accumulate weight and bias gradients of [`linear`]; optionally accumulate `dx`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Scalar>(
    x: &[T],
    m: usize,
    din: usize,
    w: &[T],
    dy: &[T],
    dout: usize,
    dw: &mut [T],
    db: &mut [T],
    dx: Option<&mut [T]>,
) {
    gemm(T::one(), x, View::full(m, din), true, dy, View::full(m, dout), false, T::one(), dw, View::full(din, dout));
    for row in dy.chunks_exact(dout) {
        for (g, v) in db.iter_mut().zip(row) {
            *g = *g + *v;
        }
    }
    if let Some(dx) = dx {
        gemm(T::one(), dy, View::full(m, dout), false, w, View::full(din, dout), true, T::one(), dx, View::full(m, din));
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Per-row normalization cache.
#[derive(Debug, Clone, Default)]
pub struct LnCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm<T: Scalar>(x: &[T], d: usize, g: &[T], b: &[T]) -> (Vec<T>, LnCache<T>) {
    let m = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(m);
    let dn = T::c(d as f64);
    let eps = T::c(LN_EPS);
    for r in 0..m {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let rs = T::one() / (var + eps).sqrt();
        rstd.push(rs);
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = h * g[j] + b[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Accumulate gain/bias gradients and add the input gradient into `dx`.
pub fn layer_norm_backward<T: Scalar>(
    cache: &LnCache<T>,
    d: usize,
    g: &[T],
    dy: &[T],
    dg: &mut [T],
    db: &mut [T],
    dx: &mut [T],
) {
    let dn = T::c(d as f64);
    let mut dxhat = vec![T::zero(); d];
    for (r, &rs) in cache.rstd.iter().enumerate() {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for j in 0..d {
            dg[j] = dg[j] + dyr[j] * xh[j];
            db[j] = db[j] + dyr[j];
            dxhat[j] = dyr[j] * g[j];
            s1 = s1 + dxhat[j];
            s2 = s2 + dxhat[j] * xh[j];
        }
        let (m1, m2) = (s1 / dn, s2 / dn);
        for j in 0..d {
            dx[r * d + j] = dx[r * d + j] + rs * (dxhat[j] - m1 - xh[j] * m2);
        }
    }
}

/// In-place softmax of one row; entries flagged in `mask` get probability 0.
pub fn softmax_in_place<T: Scalar>(row: &mut [T], mask: Option<&[bool]>) {
    let allowed = |j: usize| mask.is_none_or(|m| !m[j]);
    let mut max = T::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if allowed(j) && v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for (j, v) in row.iter_mut().enumerate() {
        *v = if allowed(j) { (*v - max).exp() } else { T::zero() };
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Softmax cross-entropy of one logit row: returns the loss and writes
/// `scale * (p - onehot)` into `grad`.
pub fn cross_entropy<T: Scalar>(
    logits: &[T],
    target: usize,
    mask: Option<&[bool]>,
    scale: T,
    grad: &mut [T],
) -> f64 {
    grad.copy_from_slice(logits);
    softmax_in_place(grad, mask);
    let p = grad[target].to_f64().expect("finite");
    for v in grad.iter_mut() {
        *v = *v * scale;
    }
    grad[target] = grad[target] - scale;
    -p.max(f64::MIN_POSITIVE).ln()
}

/// Sinusoidal position encodings for positions `0..len`.
pub fn positions<T: Scalar>(len: usize, d: usize) -> Vec<T> {
    let mut pe = vec![T::zero(); len * d];
    for pos in 0..len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[pos * d + 2 * i] = T::c(angle.sin());
            pe[pos * d + 2 * i + 1] = T::c(angle.cos());
        }
    }
    pe
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes_and_views() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        gemm(1.0, &a, View::full(2, 2), false, &b, View::full(2, 2), false, 0.0, &mut c, View::full(2, 2));
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(1.0, &a, View::full(2, 2), true, &b, View::full(2, 2), false, 0.0, &mut c, View::full(2, 2));
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(1.0, &a, View::full(2, 2), false, &b, View::full(2, 2), true, 0.0, &mut c, View::full(2, 2));
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
        // second column of a times first row of b
        let mut o = [0.0f64; 4];
        gemm(1.0, &a, View::at(1, 2, 1, 2), false, &b, View::at(0, 1, 2, 2), false, 0.0, &mut o, View::full(2, 2));
        assert_eq!(o, [10.0, 12.0, 20.0, 24.0]);
    }

    #[test]
    fn softmax_respects_mask() {
        let mut r = [1.0f64, 2.0, 3.0];
        softmax_in_place(&mut r, Some(&[false, true, false]));
        assert_eq!(r[1], 0.0);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((r[2] / r[0] - 2f64.exp()).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_uniform() {
        let logits = [0.0f64; 4];
        let mut g = [0.0f64; 4];
        let l = cross_entropy(&logits, 2, None, 1.0, &mut g);
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert_eq!(g, [0.25, 0.25, -0.75, 0.25]);
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let x = [1.0f64, 2.0, 3.0, 4.0];
        let (y, _) = layer_norm(&x, 4, &[1.0; 4], &[0.0; 4]);
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }
}
