//! Safe wrappers over the `matrixmultiply` kernels for row-major operands.

#[allow(clippy::too_many_arguments)]
fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // `op(a)` is rows x cols; the stored matrix is cols x rows when transposed.
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

/// Below this inner or output width the packed kernels lose to plain loops.
const THIN: usize = 4;

#[allow(clippy::too_many_arguments)]
fn thin<T: Copy + Default + std::ops::Mul<Output = T> + std::ops::AddAssign + std::ops::MulAssign + PartialEq>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (isize, isize),
    b: &[T],
    (rsb, csb): (isize, isize),
    beta: T,
    c: &mut [T],
) {
    let c = &mut c[..m * n];
    if beta == T::default() {
        c.fill(T::default());
    } else {
        c.iter_mut().for_each(|v| *v *= beta);
    }
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[(i as isize * rsa + p as isize * csa) as usize];
            for (j, out) in row.iter_mut().enumerate() {
                *out += av * b[(p as isize * rsb + j as isize * csb) as usize];
            }
        }
    }
}

macro_rules! gemm_impl {
    ($name:ident, $ty:ty, $kernel:path) => {
        #[allow(clippy::too_many_arguments)]
        pub(super) fn $name(
            m: usize,
            k: usize,
            n: usize,
            a: &[$ty],
            trans_a: bool,
            b: &[$ty],
            trans_b: bool,
            beta: $ty,
            c: &mut [$ty],
        ) {
            assert!(a.len() >= m * k, "gemm: lhs too short");
            assert!(b.len() >= k * n, "gemm: rhs too short");
            assert!(c.len() >= m * n, "gemm: output too short");
            if m == 0 || n == 0 {
                return;
            }
            if k == 0 {
                for v in &mut c[..m * n] {
                    *v *= beta;
                }
                return;
            }
            let (rsa, csa) = strides(m, k, trans_a);
            let (rsb, csb) = strides(k, n, trans_b);
            if k < THIN || n < THIN {
                thin(m, k, n, a, (rsa, csa), b, (rsb, csb), beta, c);
                return;
            }
            // SAFETY: the asserts above guarantee every index reachable from
            // the given dimensions and strides lies inside the slices.
            unsafe {
                $kernel(
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
    };
}

gemm_impl!(sgemm, f32, matrixmultiply::sgemm);
gemm_impl!(dgemm, f64, matrixmultiply::dgemm);
