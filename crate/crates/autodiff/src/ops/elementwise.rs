use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::Tensor;

/// Output shape of a binary elementwise op. Only scalar-tensor broadcasting
/// is allowed; any other shape mixing must be made explicit by the caller.
fn binary_shape(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else if b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else {
        Err(Error::shape(op, a.shape(), b.shape()))
    }
}

impl<T: Scalar> Tape<T> {
    fn binary(&self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let v = self.values(&[a, b])?;
        let (x, y) = (&v[0], &v[1]);
        let shape = binary_shape(op.name(), x, y)?;
        let n: usize = shape.iter().product();
        let xd = x.data();
        let yd = y.data();
        let data: Vec<T> = if x.numel() == n && y.numel() == n {
            xd.iter().zip(yd).map(|(&p, &q)| f(p, q)).collect()
        } else if x.numel() == 1 {
            yd.iter().map(|&q| f(xd[0], q)).collect()
        } else {
            xd.iter().map(|&p| f(p, yd[0])).collect()
        };
        self.push(Tensor::from_parts(shape, data), op, &[a, b])
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add, |p, q| p + q)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub, |p, q| p - q)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul, |p, q| p * q)
    }

    fn unary(&self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let x = self.values(&[a])?.remove(0);
        let out = x.map(f);
        self.push(out, op, &[a])
    }

    pub fn scale(&self, a: Var, c: T) -> Result<Var> {
        self.unary(a, Op::Scale(c), |x| x * c)
    }

    /// Adds the constant `c` to every element.
    pub fn shift(&self, a: Var, c: T) -> Result<Var> {
        self.unary(a, Op::Shift, |x| x + c)
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp, |x| x.exp())
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log, |x| x.ln())
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu, |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid, |x| {
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        })
    }

    /// Clamps into `[lo, hi]`; gradient is zero where the input lies outside.
    pub fn clamp(&self, a: Var, lo: T, hi: T) -> Result<Var> {
        if !(lo <= hi) {
            return Err(Error::arg("clamp", format!("lo {lo} > hi {hi}")));
        }
        self.unary(a, Op::Clamp { lo, hi }, |x| x.max(lo).min(hi))
    }

    /// `1 - a`, a common building block of the probability losses.
    pub fn one_minus(&self, a: Var) -> Result<Var> {
        let neg = self.scale(a, -T::one())?;
        self.shift(neg, T::one())
    }
}

pub(crate) fn unary_backward<T: Scalar>(
    input: usize,
    g: &[T],
    sink: &mut GradSink<'_, T>,
    f: impl Fn(T, T) -> T,
) {
    if !sink.wants(input) {
        return;
    }
    let (x, buf) = sink.value_and_buf(input, input);
    let x = x.data();
    for ((b, &xi), &gi) in buf.iter_mut().zip(x).zip(g) {
        *b += f(xi, gi);
    }
}

pub(crate) fn output_backward<T: Scalar>(
    input: usize,
    out: &Tensor<T>,
    g: &[T],
    sink: &mut GradSink<'_, T>,
    f: impl Fn(T, T) -> T,
) {
    if !sink.wants(input) {
        return;
    }
    let buf = sink.buf(input);
    for ((b, &y), &gi) in buf.iter_mut().zip(out.data()).zip(g) {
        *b += f(y, gi);
    }
}

pub(crate) fn add_backward<T: Scalar>(
    inputs: &[usize],
    out: &Tensor<T>,
    g: &[T],
    sink: &mut GradSink<'_, T>,
    sign_b: T,
) {
    for (slot, &idx) in inputs.iter().enumerate() {
        if !sink.wants(idx) {
            continue;
        }
        let sign = if slot == 0 { T::one() } else { sign_b };
        let broadcast = sink.value(idx).numel() == 1 && out.numel() > 1;
        let buf = sink.buf(idx);
        if broadcast {
            buf[0] += sign * g.iter().copied().sum::<T>();
        } else {
            for (b, &gi) in buf.iter_mut().zip(g) {
                *b += sign * gi;
            }
        }
    }
}

pub(crate) fn mul_backward<T: Scalar>(
    inputs: &[usize],
    out: &Tensor<T>,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    for slot in 0..2 {
        let idx = inputs[slot];
        let other = inputs[1 - slot];
        if !sink.wants(idx) {
            continue;
        }
        let self_bc = sink.value(idx).numel() == 1 && out.numel() > 1;
        let (other_val, buf) = sink.value_and_buf(other, idx);
        let o = other_val.data();
        let other_bc = o.len() == 1 && out.numel() > 1;
        if self_bc {
            let s: T = if other_bc {
                g.iter().map(|&gi| gi * o[0]).sum()
            } else {
                g.iter().zip(o).map(|(&gi, &ov)| gi * ov).sum()
            };
            buf[0] += s;
        } else if other_bc {
            for (b, &gi) in buf.iter_mut().zip(g) {
                *b += gi * o[0];
            }
        } else {
            for ((b, &gi), &ov) in buf.iter_mut().zip(g).zip(o) {
                *b += gi * ov;
            }
        }
    }
}
