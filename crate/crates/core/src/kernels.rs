//! Row-major f32 kernels for the encoder.
//!
//! Every output element of [`matmul_bias`] is accumulated in a fixed order
//! that does not depend on how many rows are processed together, so computing
//! a single row gives bitwise the same result as computing it inside a larger
//! matrix. No kernel fuses multiply-add, so wider vector units produce the
//! same bits as narrow ones.

const LANES: usize = 8;

/// Dot product with eight independent partial sums (vectorizes without
/// reassociation).
#[inline(always)]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f32; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    let s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    s + tail
}

#[inline(always)]
pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Column tile width of the register-blocked products.
const TILE_N: usize = 16;

/// `out[i, :] += sum_t a(i, t) * b[t, :]` where `a(i, t) = a[i * rs + t * ts]`
/// and `b: inner x n`. Each output element adds its terms in ascending `t`,
/// whatever the tiling, so results do not depend on the number of rows.
#[inline(always)]
fn gemm_acc(m: usize, inner: usize, n: usize, a: &[f32], rs: usize, ts: usize, b: &[f32], out: &mut [f32]) {
    debug_assert!(b.len() >= inner * n && out.len() >= m * n);
    let b = &b[..inner * n];
    let mut panel = Vec::new();
    let mut i = 0;
    while i + 4 <= m {
        gemm_rows::<4>(i, inner, n, a, rs, ts, b, out, &mut panel);
        i += 4;
    }
    let mut single = Vec::new();
    while i < m {
        gemm_rows::<1>(i, inner, n, a, rs, ts, b, out, &mut single);
        i += 1;
    }
}

/// Rows `i0..i0 + R` of [`gemm_acc`], with the `R x inner` slice of `a`
/// packed once and reused across column tiles.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn gemm_rows<const R: usize>(
    i0: usize,
    inner: usize,
    n: usize,
    a: &[f32],
    rs: usize,
    ts: usize,
    b: &[f32],
    out: &mut [f32],
    panel: &mut Vec<[f32; R]>,
) {
    panel.clear();
    panel.extend((0..inner).map(|t| std::array::from_fn(|r| a[(i0 + r) * rs + t * ts])));
    let out = &mut out[i0 * n..(i0 + R) * n];
    let mut j0 = 0;
    while j0 + TILE_N <= n {
        let mut acc = [[0f32; TILE_N]; R];
        for (r, row) in acc.iter_mut().enumerate() {
            row.copy_from_slice(&out[r * n + j0..r * n + j0 + TILE_N]);
        }
        for (brow, av) in b.chunks_exact(n).zip(panel.iter()) {
            let brow: &[f32; TILE_N] = brow[j0..j0 + TILE_N].try_into().unwrap();
            for (row, &s) in acc.iter_mut().zip(av) {
                for c in 0..TILE_N {
                    row[c] += s * brow[c];
                }
            }
        }
        for (r, row) in acc.iter().enumerate() {
            out[r * n + j0..r * n + j0 + TILE_N].copy_from_slice(row);
        }
        j0 += TILE_N;
    }
    for j in j0..n {
        for r in 0..R {
            let mut v = out[r * n + j];
            for (brow, av) in b.chunks_exact(n).zip(panel.iter()) {
                v += av[r] * brow[j];
            }
            out[r * n + j] = v;
        }
    }
}

/// `out[i, :] = bias + a[i, :] . w` with `a: rows x k`, `w: k x n`.
#[inline(always)]
pub fn matmul_bias(a: &[f32], k: usize, w: &[f32], n: usize, bias: &[f32], out: &mut [f32]) {
    debug_assert_eq!(w.len(), k * n);
    debug_assert_eq!(a.len() / k, out.len() / n);
    let rows = out.len() / n;
    for o in out.chunks_exact_mut(n) {
        o.copy_from_slice(&bias[..n]);
    }
    gemm_acc(rows, k, n, a, k, 1, w, out);
}

/// `out = a . w` with `a: rows x k`, `w: k x n`.
#[inline(always)]
pub fn matmul(a: &[f32], k: usize, w: &[f32], n: usize, out: &mut [f32]) {
    out.fill(0.0);
    gemm_acc(out.len() / n, k, n, a, k, 1, w, out);
}

/// Transpose of row-major `src: rows x cols`.
pub fn transpose(src: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut dst = vec![0f32; src.len()];
    for (r, srow) in src.chunks_exact(cols).enumerate().take(rows) {
        for (c, &v) in srow.iter().enumerate() {
            dst[c * rows + r] = v;
        }
    }
    dst
}

/// `dw += a^T . d` with `a: rows x k`, `d: rows x n`, `dw: k x n`.
#[inline(always)]
pub fn acc_at_b(a: &[f32], k: usize, d: &[f32], n: usize, dw: &mut [f32]) {
    let rows = d.len() / n;
    gemm_acc(k, rows, n, a, 1, k, d, dw);
}

/// `db += sum of rows of d`.
#[inline(always)]
pub fn acc_rows(d: &[f32], n: usize, db: &mut [f32]) {
    for drow in d.chunks_exact(n) {
        for (b, x) in db.iter_mut().zip(drow) {
            *b += x;
        }
    }
}
