use nalgebra::DMatrix;

use crate::rng::Rng;
use crate::tensor::Tensor;

/// Random orthogonal tensor. The tensor is viewed as a `[rows, cols]` matrix
/// (trailing axis = columns); columns are orthonormal when `rows >= cols`,
/// rows are orthonormal otherwise.
pub fn orthogonal_init(shape: &[usize], rng: &mut Rng) -> Tensor {
    let probe = Tensor::zeros(shape);
    let (rows, cols) = probe.matrix_dims();
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let gauss = DMatrix::from_fn(tall, short, |_, _| rng.normal());
    let qr = gauss.qr();
    let mut q = qr.q();
    let r = qr.r();
    // Sign fix makes the distribution Haar rather than QR-convention dependent.
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let m = if rows >= cols { q } else { q.transpose() };
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            data.push(m[(i, j)]);
        }
    }
    Tensor::from_parts(shape, data)
}
