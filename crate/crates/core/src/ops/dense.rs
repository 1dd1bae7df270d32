use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// `input [N, F] * weight [F, G] + bias [G]`.
pub fn dense<T: Element>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, f, g) = dims(input, weight)?;
    if bias.shape() != [g] {
        return Err(Error::shape(format!("bias {:?} does not match {g} outputs", bias.shape())));
    }
    let mut out = Vec::with_capacity(n * g);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    T::gemm(
        n,
        f,
        g,
        T::one(),
        input.data(),
        f as isize,
        1,
        weight.data(),
        g as isize,
        1,
        T::one(),
        &mut out,
        g as isize,
        1,
    );
    Tensor::new(&[n, g], out)
}

fn dims<T: Element>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if input.rank() != 2 || weight.rank() != 2 {
        return Err(Error::shape(format!(
            "dense expects [N, F] x [F, G], got {:?} x {:?}",
            input.shape(),
            weight.shape()
        )));
    }
    if input.shape()[1] != weight.shape()[0] {
        return Err(Error::shape(format!(
            "dim 1 of input ({}) does not match dim 0 of weight ({})",
            input.shape()[1],
            weight.shape()[0]
        )));
    }
    Ok((input.shape()[0], input.shape()[1], weight.shape()[1]))
}

pub(crate) fn dense_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, f, g) = dims(input, weight)?;
    let mut dx = input.zeros_like();
    let mut dw = weight.zeros_like();
    // dX = dY W^T
    T::gemm(
        n,
        g,
        f,
        T::one(),
        grad_out.data(),
        g as isize,
        1,
        weight.data(),
        1,
        g as isize,
        T::zero(),
        dx.data_mut(),
        f as isize,
        1,
    );
    // dW = X^T dY
    T::gemm(
        f,
        n,
        g,
        T::one(),
        input.data(),
        1,
        f as isize,
        grad_out.data(),
        g as isize,
        1,
        T::zero(),
        dw.data_mut(),
        g as isize,
        1,
    );
    let mut db = vec![T::zero(); g];
    for row in grad_out.data().chunks(g) {
        for (acc, &v) in db.iter_mut().zip(row) {
            *acc = *acc + v;
        }
    }
    Ok((dx, dw, Tensor::new(&[g], db)?))
}
