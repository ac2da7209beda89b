//! Deformable convolution (offsets only, no modulation).

use crate::autograd::tape::{Op, Tape, Var};
use crate::autograd::tensor::Tensor;
use crate::error::{Error, Result};
use crate::nn::conv::{bias_grad, ConvSpec};
use crate::nn::sample::Bilinear;
use crate::scalar::Scalar;

/// Bilinear reader for every (channel, tap, output pixel) of one batch item.
struct Sampler<'a, T> {
    spec: &'a ConvSpec,
    offsets: &'a [T],
    ho: usize,
    wo: usize,
}

impl<T: Scalar> Sampler<'_, T> {
    /// Offset channel `2t` holds Δrow and `2t + 1` holds Δcol for tap `t`.
    #[inline]
    fn point(&self, tap: usize, oy: usize, ox: usize) -> Option<Bilinear<T>> {
        let k = self.spec.kernel;
        let p = self.ho * self.wo;
        let pix = oy * self.wo + ox;
        let dy = self.offsets[(2 * tap) * p + pix];
        let dx = self.offsets[(2 * tap + 1) * p + pix];
        let y = T::lit(self.spec.source(oy, tap / k) as f64) + dy;
        let x = T::lit(self.spec.source(ox, tap % k) as f64) + dx;
        Bilinear::new(y, x)
    }

    /// Deformed im2col: `(cin·k·k) × (ho·wo)`.
    fn columns(&self, x: &[T], cin: usize, h: usize, w: usize, cols: &mut [T]) {
        let kk = self.spec.kernel * self.spec.kernel;
        let p = self.ho * self.wo;
        for tap in 0..kk {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let pix = oy * self.wo + ox;
                    let bl = self.point(tap, oy, ox);
                    for c in 0..cin {
                        cols[(c * kk + tap) * p + pix] = match &bl {
                            Some(bl) => bl.sample(&x[c * h * w..][..h * w], h, w),
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Convolution whose taps read the input at `tap position + offset`.
    ///
    /// `offset` has shape `(N, 2·k·k, H', W')`. Zero offsets reproduce
    /// [`Tape::conv2d`] with the same weights.
    pub fn deformable_conv2d(
        &mut self,
        input: Var,
        offset: Var,
        weight: Var,
        bias: Option<Var>,
        spec: &ConvSpec,
    ) -> Result<Var> {
        if spec.groups != 1 {
            return Err(Error::Shape("deformable convolution supports groups = 1 only".into()));
        }
        let x = self.value(input);
        let (n, h, w, ho, wo) = spec.check(x, self.value(weight), bias.map(|b| self.value(b)))?;
        let kk = spec.kernel * spec.kernel;
        let expected = [n, 2 * kk, ho, wo];
        if self.shape(offset) != expected {
            return Err(Error::Shape(format!(
                "offset field {:?}, expected {expected:?}",
                self.shape(offset)
            )));
        }
        let cin = spec.in_channels;
        let rows = cin * kk;
        let p = ho * wo;
        let mut out = vec![T::zero(); n * spec.out_channels * p];
        let mut cols = vec![T::zero(); rows * p];
        for b_idx in 0..n {
            let sampler = Sampler {
                spec,
                offsets: &self.value(offset).data()[b_idx * 2 * kk * p..][..2 * kk * p],
                ho,
                wo,
            };
            sampler.columns(&x.data()[b_idx * cin * h * w..][..cin * h * w], cin, h, w, &mut cols);
            let og = &mut out[b_idx * spec.out_channels * p..][..spec.out_channels * p];
            T::gemm(spec.out_channels, rows, p, self.value(weight).data(), rows, 1, &cols, p, 1, og, p, 1, false);
            if let Some(b) = bias {
                for (co, &bv) in self.value(b).data().iter().enumerate() {
                    og[co * p..(co + 1) * p].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let out = Tensor::new(&[n, spec.out_channels, ho, wo], out)?;
        let mut inputs = vec![input, offset, weight];
        inputs.extend(bias);
        Ok(self.push(out, &inputs, Op::Deform { input, offset, weight, bias, spec: *spec }))
    }
}

pub(crate) fn deform_backward<T: Scalar>(
    tape: &Tape<T>,
    input: Var,
    offset: Var,
    weight: Var,
    bias: Option<Var>,
    spec: &ConvSpec,
    g: &[T],
) -> Vec<(Var, Vec<T>)> {
    let x = tape.value(input);
    let (n, cin, h, w) = x.dims4().expect("deform input rank");
    let ho = spec.output_extent(h).expect("deform geometry");
    let wo = spec.output_extent(w).expect("deform geometry");
    let kk = spec.kernel * spec.kernel;
    let rows = cin * kk;
    let p = ho * wo;
    let cout = spec.out_channels;
    let wt = tape.value(weight).data();
    let mut gx = vec![T::zero(); x.numel()];
    let mut goff = vec![T::zero(); tape.value(offset).numel()];
    let mut gw = vec![T::zero(); wt.len()];
    let mut cols = vec![T::zero(); rows * p];
    let mut dcols = vec![T::zero(); rows * p];
    for b_idx in 0..n {
        let sampler = Sampler {
            spec,
            offsets: &tape.value(offset).data()[b_idx * 2 * kk * p..][..2 * kk * p],
            ho,
            wo,
        };
        let xs = &x.data()[b_idx * cin * h * w..][..cin * h * w];
        let go = &g[b_idx * cout * p..][..cout * p];
        sampler.columns(xs, cin, h, w, &mut cols);
        T::gemm(cout, p, rows, go, p, 1, &cols, 1, p, &mut gw, rows, 1, true);
        T::gemm(rows, cout, p, wt, 1, rows, go, p, 1, &mut dcols, p, 1, false);
        let gxs = &mut gx[b_idx * cin * h * w..][..cin * h * w];
        let gos = &mut goff[b_idx * 2 * kk * p..][..2 * kk * p];
        for tap in 0..kk {
            for oy in 0..ho {
                for ox in 0..wo {
                    let pix = oy * wo + ox;
                    let Some(bl) = sampler.point(tap, oy, ox) else { continue };
                    let (mut acc_y, mut acc_x) = (T::zero(), T::zero());
                    for c in 0..cin {
                        let d = dcols[(c * kk + tap) * p + pix];
                        if d == T::zero() {
                            continue;
                        }
                        bl.scatter(&mut gxs[c * h * w..][..h * w], h, w, d);
                        let (dy, dx) = bl.coord_grad(&xs[c * h * w..][..h * w], h, w);
                        acc_y += d * dy;
                        acc_x += d * dx;
                    }
                    gos[(2 * tap) * p + pix] += acc_y;
                    gos[(2 * tap + 1) * p + pix] += acc_x;
                }
            }
        }
    }
    let mut grads = vec![(input, gx), (offset, goff), (weight, gw)];
    if let Some(b) = bias {
        grads.push((b, bias_grad(g, n, cout, p)));
    }
    grads
}
