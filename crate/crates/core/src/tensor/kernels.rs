//! Dense inner loops shared by the graph primitives and the benches.
//!
//! All routines take flat row-major slices plus explicit dimensions and
//! never validate shapes; callers in `graph` do that first.

use crate::par::{self, Exec};

use super::Real;

/// `a[m,k] · b[k,n] -> [m,n]`
pub fn matmul<T: Real>(exec: Exec, a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    par::for_each_row(exec, m * k * n, &mut out, n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    });
    out
}

/// `aᵀ · b` for `a[m,k]`, `b[m,n]` -> `[k,n]`
pub fn matmul_tn<T: Real>(exec: Exec, a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    par::for_each_row(exec, m * k * n, &mut out, n, |p, row| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let b_row = &b[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    });
    out
}

/// `a · bᵀ` for `a[m,n]`, `b[k,n]` -> `[m,k]`
pub fn matmul_nt<T: Real>(exec: Exec, a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    par::for_each_row(exec, m * k * n, &mut out, k, |i, row| {
        let a_row = &a[i * n..(i + 1) * n];
        for (p, o) in row.iter_mut().enumerate() {
            *o = dot(a_row, &b[p * n..(p + 1) * n]);
        }
    });
    out
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Geometry of a valid (unpadded) 1-D convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub batch: usize,
    pub seq: usize,
    pub in_dim: usize,
    pub maps: usize,
    pub width: usize,
}

impl ConvDims {
    pub fn positions(&self) -> usize {
        self.seq + 1 - self.width
    }

    fn window(&self) -> usize {
        self.width * self.in_dim
    }

    fn work(&self) -> usize {
        self.batch * self.positions() * self.maps * self.window()
    }
}

/// `x[B,S,D] ⊛ w[M,W,D] -> y[B,S-W+1,M]`.
///
/// A window of `W` consecutive tokens is a contiguous `W·D` slice of `x`,
/// so each output element is one dot product with a filter row.
pub fn conv1d_forward<T: Real>(exec: Exec, x: &[T], w: &[T], d: ConvDims) -> Vec<T> {
    let positions = d.positions();
    let win = d.window();
    let mut out = vec![T::zero(); d.batch * positions * d.maps];
    par::for_each_row(exec, d.work(), &mut out, d.maps, |row_idx, row| {
        let b = row_idx / positions;
        let p = row_idx % positions;
        let start = (b * d.seq + p) * d.in_dim;
        let window = &x[start..start + win];
        for (m, o) in row.iter_mut().enumerate() {
            *o = dot(window, &w[m * win..(m + 1) * win]);
        }
    });
    out
}

/// Gradient of the convolution with respect to its input.
pub fn conv1d_backward_input<T: Real>(exec: Exec, dy: &[T], w: &[T], d: ConvDims) -> Vec<T> {
    let positions = d.positions();
    let win = d.window();
    let mut dx = vec![T::zero(); d.batch * d.seq * d.in_dim];
    par::for_each_row(exec, d.work(), &mut dx, d.seq * d.in_dim, |b, dx_b| {
        for p in 0..positions {
            let dy_row = &dy[(b * positions + p) * d.maps..(b * positions + p + 1) * d.maps];
            let target = &mut dx_b[p * d.in_dim..p * d.in_dim + win];
            for (m, &g) in dy_row.iter().enumerate() {
                if g == T::zero() {
                    continue;
                }
                for (t, &wv) in target.iter_mut().zip(&w[m * win..(m + 1) * win]) {
                    *t = *t + g * wv;
                }
            }
        }
    });
    dx
}

/// Gradient of the convolution with respect to its filters.
pub fn conv1d_backward_weight<T: Real>(exec: Exec, dy: &[T], x: &[T], d: ConvDims) -> Vec<T> {
    let positions = d.positions();
    let win = d.window();
    let mut dw = vec![T::zero(); d.maps * win];
    par::for_each_row(exec, d.work(), &mut dw, win, |m, dw_m| {
        for b in 0..d.batch {
            for p in 0..positions {
                let g = dy[(b * positions + p) * d.maps + m];
                if g == T::zero() {
                    continue;
                }
                let start = (b * d.seq + p) * d.in_dim;
                for (t, &xv) in dw_m.iter_mut().zip(&x[start..start + win]) {
                    *t = *t + g * xv;
                }
            }
        }
    });
    dw
}

/// Geometry of multi-head self-attention over `[B,S,E]` inputs.
#[derive(Debug, Clone, Copy)]
pub struct AttnDims {
    pub batch: usize,
    pub seq: usize,
    pub dim: usize,
    pub heads: usize,
}

impl AttnDims {
    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn work(&self) -> usize {
        self.batch * self.seq * self.seq * self.dim
    }
}

/// Masked scaled dot-product attention.
///
/// Returns `(out[B,S,E], probs[B,H,S,S])`. Masked keys receive weight
/// exactly zero; masked queries produce a zero output row.
pub fn attention_forward<T: Real>(
    exec: Exec,
    q: &[T],
    k: &[T],
    v: &[T],
    mask: &[bool],
    d: AttnDims,
) -> (Vec<T>, Vec<T>) {
    let (s, e, h, dh) = (d.seq, d.dim, d.heads, d.head_dim());
    let scale = T::one() / T::of(dh as f64).sqrt();
    let per_batch = par::map_range(exec, d.work(), d.batch, |b| {
        let base = b * s * e;
        let m = &mask[b * s..(b + 1) * s];
        let mut out = vec![T::zero(); s * e];
        let mut probs = vec![T::zero(); h * s * s];
        for head in 0..h {
            let off = head * dh;
            for i in 0..s {
                if !m[i] {
                    continue;
                }
                let qi = &q[base + i * e + off..base + i * e + off + dh];
                let p_row = &mut probs[(head * s + i) * s..(head * s + i + 1) * s];
                let mut max = T::neg_infinity();
                for j in 0..s {
                    if m[j] {
                        let kj = &k[base + j * e + off..base + j * e + off + dh];
                        let sc = dot(qi, kj) * scale;
                        p_row[j] = sc;
                        if sc > max {
                            max = sc;
                        }
                    }
                }
                let mut total = T::zero();
                for j in 0..s {
                    if m[j] {
                        let ex = (p_row[j] - max).exp();
                        p_row[j] = ex;
                        total = total + ex;
                    }
                }
                for j in 0..s {
                    if m[j] {
                        p_row[j] = p_row[j] / total;
                    }
                }
                let o_row = &mut out[i * e + off..i * e + off + dh];
                for j in 0..s {
                    if !m[j] {
                        continue;
                    }
                    let pj = p_row[j];
                    let vj = &v[base + j * e + off..base + j * e + off + dh];
                    for (o, &vv) in o_row.iter_mut().zip(vj) {
                        *o = *o + pj * vv;
                    }
                }
            }
        }
        (out, probs)
    });
    let mut out = Vec::with_capacity(d.batch * s * e);
    let mut probs = Vec::with_capacity(d.batch * h * s * s);
    for (o, p) in per_batch {
        out.extend(o);
        probs.extend(p);
    }
    (out, probs)
}

/// Gradients `(dq, dk, dv)` of [`attention_forward`] given the upstream `dout`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Real>(
    exec: Exec,
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    mask: &[bool],
    d: AttnDims,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (s, e, h, dh) = (d.seq, d.dim, d.heads, d.head_dim());
    let scale = T::one() / T::of(dh as f64).sqrt();
    let per_batch = par::map_range(exec, d.work(), d.batch, |b| {
        let base = b * s * e;
        let m = &mask[b * s..(b + 1) * s];
        let mut dq = vec![T::zero(); s * e];
        let mut dk = vec![T::zero(); s * e];
        let mut dv = vec![T::zero(); s * e];
        let mut dp = vec![T::zero(); s];
        for head in 0..h {
            let off = head * dh;
            let pb = (b * h + head) * s * s;
            for i in 0..s {
                if !m[i] {
                    continue;
                }
                let p_row = &probs[pb + i * s..pb + (i + 1) * s];
                let g = &dout[base + i * e + off..base + i * e + off + dh];
                let mut weighted = T::zero();
                for j in 0..s {
                    if !m[j] {
                        dp[j] = T::zero();
                        continue;
                    }
                    let vj = &v[base + j * e + off..base + j * e + off + dh];
                    dp[j] = dot(g, vj);
                    weighted = weighted + p_row[j] * dp[j];
                    for (t, &gv) in dv[j * e + off..j * e + off + dh].iter_mut().zip(g) {
                        *t = *t + p_row[j] * gv;
                    }
                }
                let qi = &q[base + i * e + off..base + i * e + off + dh];
                for j in 0..s {
                    if !m[j] {
                        continue;
                    }
                    let ds = p_row[j] * (dp[j] - weighted) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let kj = &k[base + j * e + off..base + j * e + off + dh];
                    for (t, &kv) in dq[i * e + off..i * e + off + dh].iter_mut().zip(kj) {
                        *t = *t + ds * kv;
                    }
                    for (t, &qv) in dk[j * e + off..j * e + off + dh].iter_mut().zip(qi) {
                        *t = *t + ds * qv;
                    }
                }
            }
        }
        (dq, dk, dv)
    });
    let mut dq = Vec::with_capacity(d.batch * s * e);
    let mut dk = Vec::with_capacity(d.batch * s * e);
    let mut dv = Vec::with_capacity(d.batch * s * e);
    for (a, b, c) in per_batch {
        dq.extend(a);
        dk.extend(b);
        dv.extend(c);
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    fn ramp(n: usize, seed: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + seed) * 0.37).sin()).collect()
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let (m, k, n) = (5, 7, 3);
        let a = ramp(m * k, 1.0);
        let b = ramp(k * n, 2.0);
        let want = naive_matmul(&a, &b, m, k, n);
        let got = matmul(Exec::Sequential, &a, &b, m, k, n);
        for (x, y) in got.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        // aᵀb with a laid out as [k,m] transposed
        let at: Vec<f64> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let tn = matmul_tn(Exec::Sequential, &at, &b, k, m, n);
        for (x, y) in tn.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        let bt: Vec<f64> = (0..n * k).map(|idx| b[(idx % k) * n + idx / k]).collect();
        let nt = matmul_nt(Exec::Sequential, &a, &bt, m, k, n);
        for (x, y) in nt.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn parallel_and_sequential_are_bitwise_identical() {
        let d = ConvDims {
            batch: 4,
            seq: 40,
            in_dim: 24,
            maps: 32,
            width: 4,
        };
        let x: Vec<f32> = (0..d.batch * d.seq * d.in_dim)
            .map(|i| ((i as f32) * 0.013).cos())
            .collect();
        let w: Vec<f32> = (0..d.maps * d.width * d.in_dim)
            .map(|i| ((i as f32) * 0.029).sin())
            .collect();
        let a = conv1d_forward(Exec::Sequential, &x, &w, d);
        let b = conv1d_forward(Exec::Parallel, &x, &w, d);
        assert_eq!(a, b);
        let dy: Vec<f32> = (0..a.len()).map(|i| ((i as f32) * 0.07).sin()).collect();
        assert_eq!(
            conv1d_backward_input(Exec::Sequential, &dy, &w, d),
            conv1d_backward_input(Exec::Parallel, &dy, &w, d)
        );
        assert_eq!(
            conv1d_backward_weight(Exec::Sequential, &dy, &x, d),
            conv1d_backward_weight(Exec::Parallel, &dy, &x, d)
        );
    }

    #[test]
    fn conv_output_length_is_valid_positions() {
        let d = ConvDims {
            batch: 1,
            seq: 150,
            in_dim: 1,
            maps: 1,
            width: 3,
        };
        let y = conv1d_forward(Exec::Sequential, &[1.0f64; 150], &[1.0; 3], d);
        assert_eq!(y.len(), 148);
        assert!(y.iter().all(|&v| v == 3.0));
    }
}
