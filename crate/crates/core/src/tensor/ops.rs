//! Numeric kernels shared by the tape's forward and backward passes.

use crate::error::{Error, Result};

/// `c = op(a) * op(b) + beta * c` where `op(a)` is `m x k` and `op(b)` is `k x n`.
/// With `trans_a` the buffer `a` is stored `k x m`; with `trans_b` the buffer `b`
/// is stored `n x k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    trans_a: bool,
    trans_b: bool,
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements, and the
    // strides above address only those elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Maps linear indices of a broadcast output back into one operand.
pub(crate) enum BroadcastIndex {
    Identity,
    Modulo(usize),
    Table(Vec<usize>),
}

impl BroadcastIndex {
    pub(crate) fn new(out: &[usize], input: &[usize]) -> Self {
        let n_in: usize = input.iter().product();
        if out == input {
            return BroadcastIndex::Identity;
        }
        // Trailing-suffix broadcast (bias rows and the like).
        let stripped: Vec<usize> = input.iter().copied().skip_while(|&d| d == 1).collect();
        if stripped.len() <= out.len() && out[out.len() - stripped.len()..] == stripped[..] {
            return BroadcastIndex::Modulo(n_in.max(1));
        }
        let rank = out.len();
        let mut strides = vec![0usize; rank];
        let mut acc = 1;
        for i in (0..input.len()).rev() {
            let oi = i + rank - input.len();
            strides[oi] = if input[i] == 1 { 0 } else { acc };
            acc *= input[i];
        }
        let n_out: usize = out.iter().product();
        let mut table = Vec::with_capacity(n_out);
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..n_out {
            table.push(off);
            for d in (0..rank).rev() {
                idx[d] += 1;
                off += strides[d];
                if idx[d] < out[d] {
                    break;
                }
                off -= strides[d] * out[d];
                idx[d] = 0;
            }
        }
        BroadcastIndex::Table(table)
    }

    #[inline]
    pub(crate) fn at(&self, i: usize) -> usize {
        match self {
            BroadcastIndex::Identity => i,
            BroadcastIndex::Modulo(n) => i % n,
            BroadcastIndex::Table(t) => t[i],
        }
    }
}

/// Splits `shape` around `axis` into `(outer, extent, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

pub(crate) fn without_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Reorders `data` (shaped `shape`) so that output axis `i` is input axis `axes[i]`.
pub(crate) fn permute(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if rank == 0 {
        out.extend_from_slice(data);
        return (out, out_shape);
    }
    // Copy contiguous runs when the last axis is unchanged.
    let last = rank - 1;
    let run = if axes[last] == last { out_shape[last] } else { 1 };
    let outer_rank = if run > 1 { last } else { rank };
    let mut idx = vec![0usize; outer_rank];
    let mut off = 0usize;
    let steps = n / run;
    for _ in 0..steps {
        if run > 1 {
            out.extend_from_slice(&data[off..off + run]);
        } else {
            out.push(data[off]);
        }
        for d in (0..outer_rank).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// `cos(acos(c) + m)`, falling back to `c - m sin m` once `acos(c) + m` passes pi.
#[inline]
pub(crate) fn arc_margin(c: f64, m: f64) -> f64 {
    if c >= (std::f64::consts::PI - m).cos() {
        let s = (1.0 - c * c).max(0.0).sqrt();
        c * m.cos() - s * m.sin()
    } else {
        c - m * m.sin()
    }
}

#[inline]
pub(crate) fn arc_margin_grad(c: f64, m: f64) -> f64 {
    if c >= (std::f64::consts::PI - m).cos() {
        let s = (1.0 - c * c).max(1e-24).sqrt();
        m.cos() + c * m.sin() / s
    } else {
        1.0
    }
}

/// Numerically stable `log(1 + sum(exp(x)))` over the entries where `mask` holds.
pub(crate) fn log1p_sum_exp(x: &[f64], mask: &[bool]) -> f64 {
    let mx = x
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold(0.0f64, |acc, (&v, _)| acc.max(v));
    let mut s = (-mx).exp();
    for (&v, &m) in x.iter().zip(mask) {
        if m {
            s += (v - mx).exp();
        }
    }
    mx + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[1, 3, 4]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
    }

    #[test]
    fn broadcast_table_matches_manual() {
        let out = [2, 3, 2];
        let idx = BroadcastIndex::new(&out, &[2, 1, 1]);
        let got: Vec<usize> = (0..12).map(|i| idx.at(i)).collect();
        assert_eq!(got, vec![0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1]);
        let idx = BroadcastIndex::new(&out, &[3, 1]);
        let got: Vec<usize> = (0..12).map(|i| idx.at(i)).collect();
        assert_eq!(got, vec![0, 0, 1, 1, 2, 2, 0, 0, 1, 1, 2, 2]);
    }

    #[test]
    fn permute_roundtrip() {
        let shape = [2, 3, 4];
        let data: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let axes = [1, 0, 2];
        let (p, ps) = permute(&data, &shape, &axes);
        assert_eq!(ps, vec![3, 2, 4]);
        assert_eq!(p[4], data[12]);
        let (back, bs) = permute(&p, &ps, &inverse_axes(&axes));
        assert_eq!(bs, shape.to_vec());
        assert_eq!(back, data);
        let (t, _) = permute(&data, &shape, &[2, 0, 1]);
        // element (k, i, j) = data(i, j, k)
        assert_eq!(t[1 * 6 + 1 * 3 + 2], data[1 * 12 + 2 * 4 + 1]);
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, &b, &mut c, false, false, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, &b, &mut c, true, false, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, &b, &mut c, false, true, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn arc_margin_values() {
        assert!((arc_margin(1.0, 0.3) - 0.3f64.cos()).abs() < 1e-15);
        assert_eq!(arc_margin(0.4, 0.0), 0.4);
        let c = -0.999;
        assert!((arc_margin(c, 0.3) - (c - 0.3 * 0.3f64.sin())).abs() < 1e-15);
    }
}
