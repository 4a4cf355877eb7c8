use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::Tensor;

impl<T: Scalar> Tape<T> {
    /// `[m x k] . [k x n] -> [m x n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.values(&[a, b])?;
        let (x, y) = (&v[0], &v[1]);
        if x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[0] {
            return Err(Error::shape("matmul", x.shape(), y.shape()));
        }
        let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, x.data(), false, y.data(), false, &mut out, T::zero());
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul, &[a, b])
    }
}

pub(crate) fn matmul_backward<T: Scalar>(inputs: &[usize], g: &[T], sink: &mut GradSink<'_, T>) {
    let (ia, ib) = (inputs[0], inputs[1]);
    let (m, k) = {
        let s = sink.value(ia).shape();
        (s[0], s[1])
    };
    let n = sink.value(ib).shape()[1];
    if sink.wants(ia) {
        // dA = G . B^T
        let (b, ga) = sink.value_and_buf(ib, ia);
        T::gemm(m, n, k, g, false, b.data(), true, ga, T::one());
    }
    if sink.wants(ib) {
        // dB = A^T . G
        let (a, gb) = sink.value_and_buf(ia, ib);
        T::gemm(k, m, n, a.data(), true, g, false, gb, T::one());
    }
}
