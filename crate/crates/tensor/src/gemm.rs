//! Strided matrix views over `matrixmultiply::dgemm`.

#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatRef<'a> {
    /// Row-major `rows × cols` storage, optionally viewed transposed.
    pub fn new(data: &'a [f64], cols: usize, transposed: bool) -> Self {
        if transposed {
            Self {
                data,
                rs: 1,
                cs: cols as isize,
            }
        } else {
            Self {
                data,
                rs: cols as isize,
                cs: 1,
            }
        }
    }
}

/// `c = beta·c + a·b` where `a` is `m×k` and `b` is `k×n`. `c` is written
/// through strides `(rsc, csc)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            for i in 0..m {
                for j in 0..n {
                    c[(i as isize * rsc + j as isize * csc) as usize] = 0.0;
                }
            }
        }
        return;
    }
    debug_assert!(max_offset(m, k, a.rs, a.cs) < a.data.len());
    debug_assert!(max_offset(k, n, b.rs, b.cs) < b.data.len());
    debug_assert!(max_offset(m, n, rsc, csc) < c.len());
    // SAFETY: the debug assertions above describe the contract every caller
    // upholds: each view addresses only elements inside its slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

fn max_offset(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    ((rows as isize - 1) * rs + (cols as isize - 1) * cs) as usize
}
