use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::Tensor;

impl<T: Scalar> Tape<T> {
    /// Layer normalization over the last axis with learnable `gain` and `bias`
    /// (both `[D]`).
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let v = self.values(&[x, gain, bias])?;
        let (xv, gv, bv) = (&v[0], &v[1], &v[2]);
        let d = *xv.shape().last().ok_or_else(|| Error::arg("layer_norm", "scalar input"))?;
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = xv.numel() / d;
        let eps = T::c(eps);
        let inv_d = T::one() / T::c(d as f64);
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() * inv_d;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        self.push(
            Tensor::from_parts(xv.shape().to_vec(), out),
            Op::LayerNorm { xhat, inv_std },
            &[x, gain, bias],
        )
    }
}

pub(crate) fn layer_norm_backward<T: Scalar>(
    inputs: &[usize],
    xhat: &[T],
    inv_std: &[T],
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let (ix, ig, ib) = (inputs[0], inputs[1], inputs[2]);
    let d = sink.value(ig).numel();
    let rows = inv_std.len();
    if sink.wants(ib) {
        let gb = sink.buf(ib);
        for row in g.chunks(d) {
            for (b, &gi) in gb.iter_mut().zip(row) {
                *b += gi;
            }
        }
    }
    if sink.wants(ig) {
        let gg = sink.buf(ig);
        for (row, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
            for j in 0..d {
                gg[j] += row[j] * hrow[j];
            }
        }
    }
    if sink.wants(ix) {
        let (gain, gx) = sink.value_and_buf(ig, ix);
        let gain = gain.data();
        let inv_d = T::one() / T::c(d as f64);
        for r in 0..rows {
            let gr = &g[r * d..(r + 1) * d];
            let hr = &xhat[r * d..(r + 1) * d];
            let mut mean_dh = T::zero();
            let mut mean_dh_h = T::zero();
            for j in 0..d {
                let dh = gr[j] * gain[j];
                mean_dh += dh;
                mean_dh_h += dh * hr[j];
            }
            mean_dh *= inv_d;
            mean_dh_h *= inv_d;
            for j in 0..d {
                let dh = gr[j] * gain[j];
                gx[r * d + j] += inv_std[r] * (dh - mean_dh - hr[j] * mean_dh_h);
            }
        }
    }
}
