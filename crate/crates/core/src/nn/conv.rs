use crate::autograd::tape::{Op, Tape, Var};
use crate::autograd::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Geometry of a 2-D convolution with square kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self { in_channels, out_channels, kernel, stride: 1, padding: 0, dilation: 1, groups: 1 }
    }

    /// Stride-1 convolution padded so the spatial extent is preserved.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, dilation: usize) -> Self {
        Self::new(in_channels, out_channels, kernel)
            .dilation(dilation)
            .padding(dilation * (kernel - 1) / 2)
    }

    /// Stride-1, size-preserving depthwise convolution.
    pub fn depthwise(channels: usize, kernel: usize, dilation: usize) -> Self {
        Self::same(channels, channels, kernel, dilation).groups(channels)
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    /// Expected weight shape `(Cout, Cin/groups, k, k)`.
    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels / self.groups.max(1), self.kernel, self.kernel]
    }

    pub fn weight_count(&self) -> usize {
        self.weight_shape().iter().product()
    }

    fn span(&self) -> usize {
        self.dilation * (self.kernel - 1) + 1
    }

    /// Output extent along one axis, or an error when the geometry is invalid.
    pub fn output_extent(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.span() {
            return Err(Error::Shape(format!(
                "input extent {input} (padding {}) smaller than kernel span {}",
                self.padding,
                self.span()
            )));
        }
        Ok((padded - self.span()) / self.stride + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 || self.dilation == 0 || self.groups == 0 {
            return Err(Error::Shape(format!("zero kernel/stride/dilation/groups in {self:?}")));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Shape(format!("zero channels in {self:?}")));
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return Err(Error::Shape(format!("channels not divisible by groups in {self:?}")));
        }
        Ok(())
    }

    /// Validates against an input/weight/bias triple and returns `(n, h, w, ho, wo)`.
    pub(crate) fn check<T: Scalar>(
        &self,
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
    ) -> Result<(usize, usize, usize, usize, usize)> {
        self.validate()?;
        let (n, c, h, w) = input.dims4()?;
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "input has {c} channels, spec expects {}",
                self.in_channels
            )));
        }
        if weight.shape() != self.weight_shape() {
            return Err(Error::Shape(format!(
                "weight shape {:?}, spec expects {:?}",
                weight.shape(),
                self.weight_shape()
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [self.out_channels] {
                return Err(Error::Shape(format!("bias shape {:?}", b.shape())));
            }
        }
        let ho = self.output_extent(h)?;
        let wo = self.output_extent(w)?;
        Ok((n, h, w, ho, wo))
    }

    /// Input coordinate read by output coordinate `o` at kernel tap `t`.
    #[inline]
    pub(crate) fn source(&self, o: usize, t: usize) -> isize {
        (o * self.stride + t * self.dilation) as isize - self.padding as isize
    }

    /// Range of output coordinates whose tap `t` lands inside `[0, extent)`.
    pub(crate) fn valid_range(&self, t: usize, extent: usize, out: usize) -> (usize, usize) {
        let offset = (t * self.dilation) as isize - self.padding as isize;
        let s = self.stride as isize;
        // smallest o with o*s + offset >= 0
        let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
        // largest o with o*s + offset <= extent - 1
        let hi_num = extent as isize - 1 - offset;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let lo = (lo as usize).min(out);
        let hi = ((hi + 1).max(0) as usize).min(out);
        (lo, hi.max(lo))
    }
}

/// Unfolds one group's input slab (`cin × h × w`) into `(cin·k·k) × (ho·wo)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let k = spec.kernel;
    let p = ho * wo;
    for c in 0..cin {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            let (ylo, yhi) = spec.valid_range(ky, h, ho);
            for kx in 0..k {
                let (xlo, xhi) = spec.valid_range(kx, w, wo);
                let row = &mut cols[((c * k + ky) * k + kx) * p..][..p];
                row.fill(T::zero());
                for oy in ylo..yhi {
                    let iy = spec.source(oy, ky) as usize;
                    let src = &plane[iy * w..(iy + 1) * w];
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if spec.stride == 1 {
                        let ix0 = spec.source(xlo, kx) as usize;
                        dst[xlo..xhi].copy_from_slice(&src[ix0..ix0 + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            dst[ox] = src[spec.source(ox, kx) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into the input slab.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im<T: Scalar>(
    cols: &[T],
    cin: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    let k = spec.kernel;
    let p = ho * wo;
    for c in 0..cin {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            let (ylo, yhi) = spec.valid_range(ky, h, ho);
            for kx in 0..k {
                let (xlo, xhi) = spec.valid_range(kx, w, wo);
                let row = &cols[((c * k + ky) * k + kx) * p..][..p];
                for oy in ylo..yhi {
                    let iy = spec.source(oy, ky) as usize;
                    for ox in xlo..xhi {
                        let ix = spec.source(ox, kx) as usize;
                        plane[iy * w + ix] += row[oy * wo + ox];
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Zero-padded cross-correlation with optional bias, any group count.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let x = self.value(input);
        let wt = self.value(weight);
        let b = bias.map(|v| self.value(v));
        let (n, h, w, ho, wo) = spec.check(x, wt, b)?;
        let g = spec.groups;
        let (cin_g, cout_g) = (spec.in_channels / g, spec.out_channels / g);
        let k2 = spec.kernel * spec.kernel;
        let rows = cin_g * k2;
        let p = ho * wo;
        let mut out = vec![T::zero(); n * spec.out_channels * p];
        let mut cols = vec![T::zero(); rows * p];
        for b_idx in 0..n {
            for grp in 0..g {
                let slab = &x.data()[(b_idx * spec.in_channels + grp * cin_g) * h * w..][..cin_g * h * w];
                im2col(slab, cin_g, h, w, spec, ho, wo, &mut cols);
                let wg = &wt.data()[grp * cout_g * rows..][..cout_g * rows];
                let og = &mut out[(b_idx * spec.out_channels + grp * cout_g) * p..][..cout_g * p];
                T::gemm(cout_g, rows, p, wg, rows, 1, &cols, p, 1, og, p, 1, false);
            }
            if let Some(bias) = b {
                for (co, &bv) in bias.data().iter().enumerate() {
                    for v in &mut out[(b_idx * spec.out_channels + co) * p..][..p] {
                        *v += bv;
                    }
                }
            }
        }
        let out = Tensor::new(&[n, spec.out_channels, ho, wo], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(out, &inputs, Op::Conv2d { input, weight, bias, spec: *spec }))
    }

    /// One `k×k` filter per channel; channels never mix.
    pub fn depthwise_conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: &ConvSpec,
    ) -> Result<Var> {
        if spec.groups != spec.in_channels || spec.out_channels != spec.in_channels {
            return Err(Error::Shape(format!("depthwise spec must have groups = Cin = Cout: {spec:?}")));
        }
        let x = self.value(input);
        let wt = self.value(weight);
        let b = bias.map(|v| self.value(v));
        let (n, h, w, ho, wo) = spec.check(x, wt, b)?;
        let c = spec.in_channels;
        let k = spec.kernel;
        let mut out = vec![T::zero(); n * c * ho * wo];
        for b_idx in 0..n {
            for ch in 0..c {
                let plane = &x.data()[(b_idx * c + ch) * h * w..][..h * w];
                let filt = &wt.data()[ch * k * k..][..k * k];
                let dst = &mut out[(b_idx * c + ch) * ho * wo..][..ho * wo];
                if let Some(bias) = b {
                    dst.fill(bias.data()[ch]);
                }
                for ky in 0..k {
                    let (ylo, yhi) = spec.valid_range(ky, h, ho);
                    for kx in 0..k {
                        let wv = filt[ky * k + kx];
                        let (xlo, xhi) = spec.valid_range(kx, w, wo);
                        for oy in ylo..yhi {
                            let iy = spec.source(oy, ky) as usize;
                            let src = &plane[iy * w..(iy + 1) * w];
                            let row = &mut dst[oy * wo..(oy + 1) * wo];
                            if spec.stride == 1 {
                                let ix0 = spec.source(xlo, kx) as usize;
                                for (o, &s) in row[xlo..xhi].iter_mut().zip(&src[ix0..]) {
                                    *o += wv * s;
                                }
                            } else {
                                for ox in xlo..xhi {
                                    row[ox] += wv * src[spec.source(ox, kx) as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[n, c, ho, wo], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(out, &inputs, Op::Depthwise { input, weight, bias, spec: *spec }))
    }
}

pub(crate) fn bias_grad<T: Scalar>(g: &[T], n: usize, cout: usize, p: usize) -> Vec<T> {
    let mut gb = vec![T::zero(); cout];
    for b_idx in 0..n {
        for (co, acc) in gb.iter_mut().enumerate() {
            for &v in &g[(b_idx * cout + co) * p..][..p] {
                *acc += v;
            }
        }
    }
    gb
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    tape: &Tape<T>,
    input: Var,
    weight: Var,
    bias: Option<Var>,
    spec: &ConvSpec,
    g: &[T],
    need_input: bool,
    need_weight: bool,
) -> Vec<(Var, Vec<T>)> {
    let x = tape.value(input);
    let wt = tape.value(weight);
    let (n, _, h, w) = x.dims4().expect("conv input rank");
    let ho = spec.output_extent(h).expect("conv geometry");
    let wo = spec.output_extent(w).expect("conv geometry");
    let grp_count = spec.groups;
    let (cin_g, cout_g) = (spec.in_channels / grp_count, spec.out_channels / grp_count);
    let rows = cin_g * spec.kernel * spec.kernel;
    let p = ho * wo;
    let mut gx = if need_input { vec![T::zero(); x.numel()] } else { Vec::new() };
    let mut gw = vec![T::zero(); wt.numel()];
    let mut cols = vec![T::zero(); rows * p];
    let mut dcols = vec![T::zero(); rows * p];
    for b_idx in 0..n {
        for grp in 0..grp_count {
            let go = &g[(b_idx * spec.out_channels + grp * cout_g) * p..][..cout_g * p];
            if need_weight {
                let slab = &x.data()[(b_idx * spec.in_channels + grp * cin_g) * h * w..][..cin_g * h * w];
                im2col(slab, cin_g, h, w, spec, ho, wo, &mut cols);
                let gwg = &mut gw[grp * cout_g * rows..][..cout_g * rows];
                // dW (cout_g × rows) += dOut (cout_g × p) · colsᵀ (p × rows)
                T::gemm(cout_g, p, rows, go, p, 1, &cols, 1, p, gwg, rows, 1, true);
            }
            if need_input {
                let wg = &wt.data()[grp * cout_g * rows..][..cout_g * rows];
                // dcols (rows × p) = Wᵀ (rows × cout_g) · dOut (cout_g × p)
                T::gemm(rows, cout_g, p, wg, 1, rows, go, p, 1, &mut dcols, p, 1, false);
                let slab = &mut gx[(b_idx * spec.in_channels + grp * cin_g) * h * w..][..cin_g * h * w];
                col2im(&dcols, cin_g, h, w, spec, ho, wo, slab);
            }
        }
    }
    let mut grads = Vec::with_capacity(3);
    if need_input {
        grads.push((input, gx));
    }
    if need_weight {
        grads.push((weight, gw));
    }
    if let Some(b) = bias {
        grads.push((b, bias_grad(g, n, spec.out_channels, p)));
    }
    grads
}

pub(crate) fn depthwise_backward<T: Scalar>(
    tape: &Tape<T>,
    input: Var,
    weight: Var,
    bias: Option<Var>,
    spec: &ConvSpec,
    g: &[T],
) -> Vec<(Var, Vec<T>)> {
    let x = tape.value(input);
    let wt = tape.value(weight);
    let (n, c, h, w) = x.dims4().expect("depthwise input rank");
    let ho = spec.output_extent(h).expect("depthwise geometry");
    let wo = spec.output_extent(w).expect("depthwise geometry");
    let k = spec.kernel;
    let mut gx = vec![T::zero(); x.numel()];
    let mut gw = vec![T::zero(); wt.numel()];
    for b_idx in 0..n {
        for ch in 0..c {
            let plane = &x.data()[(b_idx * c + ch) * h * w..][..h * w];
            let gplane = &mut gx[(b_idx * c + ch) * h * w..][..h * w];
            let filt = &wt.data()[ch * k * k..][..k * k];
            let go = &g[(b_idx * c + ch) * ho * wo..][..ho * wo];
            for ky in 0..k {
                let (ylo, yhi) = spec.valid_range(ky, h, ho);
                for kx in 0..k {
                    let (xlo, xhi) = spec.valid_range(kx, w, wo);
                    let wv = filt[ky * k + kx];
                    let mut acc = T::zero();
                    for oy in ylo..yhi {
                        let iy = spec.source(oy, ky) as usize;
                        for ox in xlo..xhi {
                            let ix = spec.source(ox, kx) as usize;
                            let d = go[oy * wo + ox];
                            acc += d * plane[iy * w + ix];
                            gplane[iy * w + ix] += d * wv;
                        }
                    }
                    gw[ch * k * k + ky * k + kx] += acc;
                }
            }
        }
    }
    let mut grads = vec![(input, gx), (weight, gw)];
    if let Some(b) = bias {
        grads.push((b, bias_grad(g, n, c, ho * wo)));
    }
    grads
}
