use ndarray::ArrayView1;

/// FNV-1a, used to derive per-(user, index) seeds that do not depend on
/// execution order or the standard library's hasher.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Log-sum-exp of a row, stable for large magnitudes.
pub(crate) fn log_sum_exp(row: ArrayView1<f64>) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out += x · w` for a row-major `w` of shape `x.len() × out.len()`.
#[inline]
pub(crate) fn vec_mat_acc(x: &[f64], w: &[f64], out: &mut [f64]) {
    let n = out.len();
    debug_assert_eq!(w.len(), x.len() * n);
    for (j, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        let row = &w[j * n..(j + 1) * n];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += xj * wv;
        }
    }
}

/// `out += w · y` for a row-major `w` of shape `out.len() × y.len()`.
#[inline]
pub(crate) fn mat_vec_acc(w: &[f64], y: &[f64], out: &mut [f64]) {
    let n = y.len();
    debug_assert_eq!(w.len(), out.len() * n);
    for (j, o) in out.iter_mut().enumerate() {
        let row = &w[j * n..(j + 1) * n];
        *o += row.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    }
}
