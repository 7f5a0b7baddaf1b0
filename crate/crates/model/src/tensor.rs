//! Dense row-major `f64` tensors and the GEMM wrapper used by the convolution kernels.

use ndarray::Array3;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} values",
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(&[1], vec![v])
    }

    /// Stacks equally shaped `(C, H, W)` rasters into `(N, C, H, W)`.
    pub fn stack(rasters: &[&Array3<f64>]) -> Self {
        let (c, h, w) = rasters[0].dim();
        let mut data = Vec::with_capacity(rasters.len() * c * h * w);
        for r in rasters {
            assert_eq!(r.dim(), (c, h, w), "stacked rasters must share a shape");
            data.extend(r.iter().copied());
        }
        Tensor::from_vec(&[rasters.len(), c, h, w], data)
    }

    /// Slice `n` of an `(N, C, H, W)` tensor as a raster.
    pub fn raster(&self, n: usize) -> Array3<f64> {
        let (_, c, h, w) = self.dims4();
        let plane = c * h * w;
        Array3::from_shape_vec((c, h, w), self.data[n * plane..(n + 1) * plane].to_vec())
            .expect("slice has c*h*w values")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        match self.shape[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => panic!("expected a 4-d tensor, got shape {:?}", self.shape),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Strides of a row-major matrix view, optionally transposed.
#[derive(Debug, Clone, Copy)]
pub struct MatView {
    pub row_stride: isize,
    pub col_stride: isize,
}

impl MatView {
    /// A `rows × cols` matrix stored row-major.
    pub fn row_major(cols: usize) -> Self {
        MatView {
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// The transpose of a matrix with `cols` columns stored row-major.
    pub fn transposed(cols: usize) -> Self {
        MatView {
            row_stride: 1,
            col_stride: cols as isize,
        }
    }
}

fn max_index(rows: usize, cols: usize, v: MatView) -> usize {
    (rows - 1) * v.row_stride as usize + (cols - 1) * v.col_stride as usize
}

/// `c = a · b + beta · c` with `a: m × k`, `b: k × n`, `c: m × n` (row-major `c`).
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], av: MatView, b: &[f64], bv: MatView, beta: f64, c: &mut [f64]) {
    gemm_strided(m, k, n, a, av, b, bv, beta, c, MatView::row_major(n));
}

/// [`gemm`] with an arbitrarily strided output view.
#[allow(clippy::too_many_arguments)]
pub fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    av: MatView,
    b: &[f64],
    bv: MatView,
    beta: f64,
    c: &mut [f64],
    cv: MatView,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() > max_index(m, n, cv), "output view out of bounds");
    if k > 0 {
        assert!(a.len() > max_index(m, k, av), "left operand view out of bounds");
        assert!(b.len() > max_index(k, n, bv), "right operand view out of bounds");
    }
    // SAFETY: the asserts above bound the largest offset reachable through each view.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            av.row_stride,
            av.col_stride,
            b.as_ptr(),
            bv.row_stride,
            bv.col_stride,
            beta,
            c.as_mut_ptr(),
            cv.row_stride,
            cv.col_stride,
        );
    }
}
