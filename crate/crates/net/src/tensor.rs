use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of tensors and graphs.
pub trait Scalar: Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + std::iter::Sum + 'static {
    /// `c = alpha * a·b + beta * c` over strided row-major views.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_scalar {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: callers pass slices that cover every strided index in range
                unsafe {
                    $f(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, csc);
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Convert an `f64` literal.
#[inline]
pub fn c<T: Scalar>(v: f64) -> T {
    T::from_f64(v).unwrap()
}

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?} vs {} elements", data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![T::zero(); n] }
    }

    pub fn full(shape: Vec<usize>, v: T) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![v; n] }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Trailing dimension of a 2-D tensor.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn at(&self, r: usize, col: usize) -> T {
        self.data[r * self.cols() + col]
    }

    pub fn row(&self, r: usize) -> &[T] {
        let n = self.cols();
        &self.data[r * n..(r + 1) * n]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::from_f64(v.to_f64().unwrap()).unwrap()).collect() }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64().unwrap()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }
}

/// `[m,k]·[k,n]` with optional transposes of either operand's storage.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, ta: bool, tb: bool, out: &mut [T], beta: T) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    T::gemm(m, k, n, T::one(), a, rsa, csa, b, rsb, csb, beta, out, n as isize, 1);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_with_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        matmul(&a, &b, 2, 2, 2, false, false, &mut out, 0.0);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
        matmul(&a, &b, 2, 2, 2, true, false, &mut out, 0.0);
        assert_eq!(out, [26.0, 30.0, 38.0, 44.0]);
        matmul(&a, &b, 2, 2, 2, false, true, &mut out, 0.0);
        assert_eq!(out, [17.0, 23.0, 39.0, 53.0]);
        let mut acc = [1.0f32; 4];
        matmul(&[1.0f32, 0.0, 0.0, 1.0], &[2.0, 3.0, 4.0, 5.0], 2, 2, 2, false, false, &mut acc, 1.0);
        assert_eq!(acc, [3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn cast_roundtrip() {
        let t = Tensor::<f32>::new(vec![2, 2], vec![0.5, -1.0, 2.0, 3.25]);
        assert_eq!(t.cast::<f64>().cast::<f32>(), t);
    }
}
