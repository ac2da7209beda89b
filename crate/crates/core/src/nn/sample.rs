use crate::autograd::tape::{Op, Tape, Var};
use crate::autograd::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Continuous source coordinates, one `[row, col]` pair per output pixel,
/// in pixel units.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGrid {
    pub height: usize,
    pub width: usize,
    pub points: Vec<[f64; 2]>,
}

impl SampleGrid {
    /// Grid that reads every pixel from itself.
    pub fn identity(height: usize, width: usize) -> Self {
        let points = (0..height)
            .flat_map(|i| (0..width).map(move |j| [i as f64, j as f64]))
            .collect();
        Self { height, width, points }
    }

    pub fn at(&self, i: usize, j: usize) -> [f64; 2] {
        self.points[i * self.width + j]
    }

    /// `height × width × 2` tensor of `(row, col)` pairs.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.points.iter().flat_map(|p| [T::lit(p[0]), T::lit(p[1])]).collect();
        Tensor::new(&[self.height, self.width, 2], data).expect("grid shape")
    }
}

/// The four integer neighbours of a continuous coordinate and their weights.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Bilinear<T> {
    y0: isize,
    x0: isize,
    ly: T,
    lx: T,
}

impl<T: Scalar> Bilinear<T> {
    /// `None` when the coordinate is not finite.
    #[inline]
    pub(crate) fn new(y: T, x: T) -> Option<Self> {
        if !y.is_finite() || !x.is_finite() {
            return None;
        }
        let (fy, fx) = (y.floor(), x.floor());
        Some(Self { y0: fy.to_isize()?, x0: fx.to_isize()?, ly: y - fy, lx: x - fx })
    }

    #[inline]
    fn corners(&self) -> [(isize, isize, T); 4] {
        let one = T::one();
        let (ly, lx) = (self.ly, self.lx);
        [
            (self.y0, self.x0, (one - ly) * (one - lx)),
            (self.y0, self.x0 + 1, (one - ly) * lx),
            (self.y0 + 1, self.x0, ly * (one - lx)),
            (self.y0 + 1, self.x0 + 1, ly * lx),
        ]
    }

    #[inline]
    fn read(plane: &[T], h: usize, w: usize, y: isize, x: isize) -> T {
        if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
            plane[y as usize * w + x as usize]
        } else {
            T::zero()
        }
    }

    /// Interpolated value with zero padding outside the plane.
    #[inline]
    pub(crate) fn sample(&self, plane: &[T], h: usize, w: usize) -> T {
        let mut acc = T::zero();
        for (y, x, wt) in self.corners() {
            if wt != T::zero() {
                acc += wt * Self::read(plane, h, w, y, x);
            }
        }
        acc
    }

    /// Partial derivatives of [`Self::sample`] w.r.t. the row and column coordinate.
    #[inline]
    pub(crate) fn coord_grad(&self, plane: &[T], h: usize, w: usize) -> (T, T) {
        let one = T::one();
        let v00 = Self::read(plane, h, w, self.y0, self.x0);
        let v01 = Self::read(plane, h, w, self.y0, self.x0 + 1);
        let v10 = Self::read(plane, h, w, self.y0 + 1, self.x0);
        let v11 = Self::read(plane, h, w, self.y0 + 1, self.x0 + 1);
        let dy = (one - self.lx) * (v10 - v00) + self.lx * (v11 - v01);
        let dx = (one - self.ly) * (v01 - v00) + self.ly * (v11 - v10);
        (dy, dx)
    }

    /// Adds `g` times the interpolation weights into `plane`.
    #[inline]
    pub(crate) fn scatter(&self, plane: &mut [T], h: usize, w: usize, g: T) {
        for (y, x, wt) in self.corners() {
            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && wt != T::zero() {
                plane[y as usize * w + x as usize] += g * wt;
            }
        }
    }
}

fn grid_dims(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [ho, wo, 2] => Ok((*ho, *wo)),
        _ => Err(Error::Shape(format!("sample grid must be H×W×2, got {shape:?}"))),
    }
}

impl<T: Scalar> Tape<T> {
    /// Reads `input` at the grid's continuous coordinates by bilinear
    /// interpolation; reads outside the image return zero. Differentiable
    /// with respect to the input and the grid.
    pub fn bilinear_sample(&mut self, input: Var, grid: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let (ho, wo) = grid_dims(self.shape(grid))?;
        let src = self.value(input).data();
        let coords = self.value(grid).data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        for p in 0..ho * wo {
            let Some(bl) = Bilinear::new(coords[2 * p], coords[2 * p + 1]) else { continue };
            for plane_idx in 0..n * c {
                let plane = &src[plane_idx * h * w..][..h * w];
                out[plane_idx * ho * wo + p] = bl.sample(plane, h, w);
            }
        }
        let out = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.push(out, &[input, grid], Op::Bilinear { input, grid }))
    }

    /// [`Tape::bilinear_sample`] at a fixed, non-differentiable grid.
    pub fn warp(&mut self, input: Var, grid: &SampleGrid) -> Result<Var> {
        let g = self.constant(grid.to_tensor());
        self.bilinear_sample(input, g)
    }
}

pub(crate) fn bilinear_backward<T: Scalar>(
    tape: &Tape<T>,
    input: Var,
    grid: Var,
    g: &[T],
    need_grid: bool,
) -> Vec<(Var, Vec<T>)> {
    let (n, c, h, w) = tape.value(input).dims4().expect("sample rank");
    let (ho, wo) = grid_dims(tape.shape(grid)).expect("grid rank");
    let src = tape.value(input).data();
    let coords = tape.value(grid).data();
    let mut gx = vec![T::zero(); src.len()];
    let mut gg = vec![T::zero(); coords.len()];
    for p in 0..ho * wo {
        let Some(bl) = Bilinear::new(coords[2 * p], coords[2 * p + 1]) else { continue };
        for plane_idx in 0..n * c {
            let d = g[plane_idx * ho * wo + p];
            bl.scatter(&mut gx[plane_idx * h * w..][..h * w], h, w, d);
            if need_grid {
                let (dy, dx) = bl.coord_grad(&src[plane_idx * h * w..][..h * w], h, w);
                gg[2 * p] += d * dy;
                gg[2 * p + 1] += d * dx;
            }
        }
    }
    let mut grads = vec![(input, gx)];
    if need_grid {
        grads.push((grid, gg));
    }
    grads
}
