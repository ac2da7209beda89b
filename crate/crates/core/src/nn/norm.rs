use crate::autograd::tape::{Op, Tape, Var};
use crate::autograd::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

impl<T: Scalar> Tape<T> {
    /// Per-channel normalization over batch and spatial positions, always
    /// with the statistics of the current pass, followed by `gamma·x̂ + beta`.
    pub fn batchnorm2d(&mut self, input: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::Shape(format!("{name} shape {:?}, expected [{c}]", self.shape(v))));
            }
        }
        if !(eps > T::zero()) {
            return Err(Error::Config("batchnorm eps must be positive".into()));
        }
        let hw = h * w;
        let count = T::lit((n * hw) as f64);
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let src = x.data();
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let plane = |b: usize| (b * c + ch) * hw..(b * c + ch + 1) * hw;
            let mut mean = T::zero();
            for b in 0..n {
                for &v in &src[plane(b)] {
                    mean += v;
                }
            }
            mean = mean / count;
            let mut var = T::zero();
            for b in 0..n {
                for &v in &src[plane(b)] {
                    var += (v - mean) * (v - mean);
                }
            }
            var = var / count;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[ch] = inv;
            for b in 0..n {
                for i in plane(b) {
                    let xn = (src[i] - mean) * inv;
                    xhat[i] = xn;
                    out[i] = gm[ch] * xn + bt[ch];
                }
            }
        }
        let out = Tensor::new(x.shape(), out)?;
        Ok(self.push(out, &[input, gamma, beta], Op::BatchNorm { input, gamma, beta, xhat, inv_std }))
    }
}

pub(crate) fn batchnorm_backward<T: Scalar>(
    tape: &Tape<T>,
    input: Var,
    gamma: Var,
    beta: Var,
    xhat: &[T],
    inv_std: &[T],
    g: &[T],
) -> Vec<(Var, Vec<T>)> {
    let (n, c, h, w) = tape.value(input).dims4().expect("batchnorm rank");
    let hw = h * w;
    let count = T::lit((n * hw) as f64);
    let gm = tape.value(gamma).data();
    let mut gx = vec![T::zero(); g.len()];
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    for ch in 0..c {
        let plane = |b: usize| (b * c + ch) * hw..(b * c + ch + 1) * hw;
        let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
        for b in 0..n {
            for i in plane(b) {
                sum_dy += g[i];
                sum_dy_xhat += g[i] * xhat[i];
            }
        }
        gg[ch] = sum_dy_xhat;
        gb[ch] = sum_dy;
        let scale = gm[ch] * inv_std[ch] / count;
        for b in 0..n {
            for i in plane(b) {
                gx[i] = scale * (count * g[i] - sum_dy - xhat[i] * sum_dy_xhat);
            }
        }
    }
    vec![(input, gx), (gamma, gg), (beta, gb)]
}
