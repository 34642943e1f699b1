//! Raw loops behind the differentiable ops. Row-major, no bounds beyond slices.

use crate::scalar::Scalar;

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `c += op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
pub(crate) fn gemm<T: Scalar>(
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    let bt;
    let b = if trans_b {
        bt = transpose(b, n, k);
        &bt[..]
    } else {
        b
    };
    if trans_a {
        // a is stored k×m
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            for i in 0..m {
                let av = a[p * m + i];
                if av != T::zero() {
                    axpy(av, brow, &mut c[i * n..(i + 1) * n]);
                }
            }
        }
    } else {
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av != T::zero() {
                    axpy(av, &b[p * n..(p + 1) * n], crow);
                }
            }
        }
    }
}

/// Geometry of a grouped 1-D convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub len: usize,
    pub out_len: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeom {
    /// Range of output positions whose tap `k` lands inside the input.
    #[inline]
    fn valid_range(&self, k: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.padding > k { (self.padding - k + s - 1) / s } else { 0 };
        // t*s + k - p <= len - 1
        let top = self.len + self.padding;
        if top < k + 1 {
            return (0, 0);
        }
        let hi = ((top - k - 1) / s + 1).min(self.out_len);
        (lo, hi.max(lo))
    }
}

pub(crate) fn conv1d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], b: Option<&[T]>, y: &mut [T]) {
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    for bi in 0..g.batch {
        for o in 0..g.cout {
            let grp = o / cout_g;
            let yrow = &mut y[(bi * g.cout + o) * g.out_len..(bi * g.cout + o + 1) * g.out_len];
            if let Some(b) = b {
                yrow.iter_mut().for_each(|v| *v = b[o]);
            }
            for ii in 0..cin_g {
                let ci = grp * cin_g + ii;
                let xrow = &x[(bi * g.cin + ci) * g.len..(bi * g.cin + ci + 1) * g.len];
                for k in 0..g.kernel {
                    let wv = w[(o * cin_g + ii) * g.kernel + k];
                    if wv == T::zero() {
                        continue;
                    }
                    let (lo, hi) = g.valid_range(k);
                    if g.stride == 1 {
                        let src = lo + k - g.padding;
                        axpy(wv, &xrow[src..src + (hi - lo)], &mut yrow[lo..hi]);
                    } else {
                        for t in lo..hi {
                            yrow[t] += wv * xrow[t * g.stride + k - g.padding];
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates input, weight and bias adjoints of a grouped convolution.
pub(crate) fn conv1d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    for bi in 0..g.batch {
        for o in 0..g.cout {
            let grp = o / cout_g;
            let dyrow = &dy[(bi * g.cout + o) * g.out_len..(bi * g.cout + o + 1) * g.out_len];
            if let Some(db) = db.as_deref_mut() {
                db[o] += dyrow.iter().copied().sum::<T>();
            }
            for ii in 0..cin_g {
                let ci = grp * cin_g + ii;
                let xoff = (bi * g.cin + ci) * g.len;
                for k in 0..g.kernel {
                    let (lo, hi) = g.valid_range(k);
                    if lo >= hi {
                        continue;
                    }
                    let widx = (o * cin_g + ii) * g.kernel + k;
                    if let Some(dw) = dw.as_deref_mut() {
                        let mut acc = T::zero();
                        for t in lo..hi {
                            acc += dyrow[t] * x[xoff + t * g.stride + k - g.padding];
                        }
                        dw[widx] += acc;
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        let wv = w[widx];
                        if g.stride == 1 {
                            let src = xoff + lo + k - g.padding;
                            axpy(wv, &dyrow[lo..hi], &mut dx[src..src + (hi - lo)]);
                        } else {
                            for t in lo..hi {
                                dx[xoff + t * g.stride + k - g.padding] += wv * dyrow[t];
                            }
                        }
                    }
                }
            }
        }
    }
}
