//! Fixed 3×3 derivative stencils written as weighted neighbour differences.

use crate::autograd::tape::{Op, Tape, Var};
use crate::autograd::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `weight · (x[p + plus] − x[p + minus])`, offsets as `(row, col)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiffTerm {
    pub plus: (isize, isize),
    pub minus: (isize, isize),
    pub weight: f64,
}

const fn term(plus: (isize, isize), minus: (isize, isize), weight: f64) -> DiffTerm {
    DiffTerm { plus, minus, weight }
}

/// `[[−1,0,1],[−2,0,2],[−1,0,1]]`
pub const SOBEL_X: [DiffTerm; 3] =
    [term((-1, 1), (-1, -1), 1.0), term((0, 1), (0, -1), 2.0), term((1, 1), (1, -1), 1.0)];
/// `[[−1,−2,−1],[0,0,0],[1,2,1]]`
pub const SOBEL_Y: [DiffTerm; 3] =
    [term((1, -1), (-1, -1), 1.0), term((1, 0), (-1, 0), 2.0), term((1, 1), (-1, 1), 1.0)];
/// `[[0,1,2],[−1,0,1],[−2,−1,0]]`
pub const SOBEL_XY: [DiffTerm; 3] =
    [term((-1, 0), (1, 0), 1.0), term((-1, 1), (1, -1), 2.0), term((0, 1), (0, -1), 1.0)];

/// Dense 3×3 cross-correlation kernel equivalent to a list of terms.
pub fn stencil_kernel(terms: &[DiffTerm]) -> [f64; 9] {
    let mut k = [0.0; 9];
    for t in terms {
        k[((t.plus.0 + 1) * 3 + t.plus.1 + 1) as usize] += t.weight;
        k[((t.minus.0 + 1) * 3 + t.minus.1 + 1) as usize] -= t.weight;
    }
    k
}

fn interior(h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    (1..h - 1).flat_map(move |i| (1..w - 1).map(move |j| (i, j)))
}

#[inline]
fn at(i: usize, j: usize, (di, dj): (isize, isize), w: usize) -> usize {
    (i as isize + di) as usize * w + (j as isize + dj) as usize
}

impl<T: Scalar> Tape<T> {
    /// Applies the stencil per channel on the interior of each plane; the
    /// one-pixel border of the output is zero. Needs `H, W ≥ 3`.
    pub fn diff_stencil(&mut self, input: Var, terms: &[DiffTerm]) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if h < 3 || w < 3 {
            return Err(Error::Shape(format!("3x3 stencil needs at least 3x3, got {h}x{w}")));
        }
        let src = self.value(input).data();
        let weights: Vec<T> = terms.iter().map(|t| T::lit(t.weight)).collect();
        let mut out = vec![T::zero(); src.len()];
        for plane in 0..n * c {
            let x = &src[plane * h * w..][..h * w];
            let o = &mut out[plane * h * w..][..h * w];
            for (i, j) in interior(h, w) {
                let mut acc = T::zero();
                for (t, &wt) in terms.iter().zip(&weights) {
                    acc += wt * (x[at(i, j, t.plus, w)] - x[at(i, j, t.minus, w)]);
                }
                o[i * w + j] = acc;
            }
        }
        let out = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(out, &[input], Op::Stencil { input, terms: terms.to_vec() }))
    }
}

pub(crate) fn stencil_backward<T: Scalar>(tape: &Tape<T>, input: Var, terms: &[DiffTerm], g: &[T]) -> Vec<(Var, Vec<T>)> {
    let (n, c, h, w) = tape.value(input).dims4().expect("stencil rank");
    let mut gx = vec![T::zero(); g.len()];
    for plane in 0..n * c {
        let go = &g[plane * h * w..][..h * w];
        let gi = &mut gx[plane * h * w..][..h * w];
        for (i, j) in interior(h, w) {
            let d = go[i * w + j];
            for t in terms {
                let v = d * T::lit(t.weight);
                gi[at(i, j, t.plus, w)] += v;
                gi[at(i, j, t.minus, w)] -= v;
            }
        }
    }
    vec![(input, gx)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stencils_expand_to_sobel_kernels() {
        assert_eq!(stencil_kernel(&SOBEL_X), [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0]);
        assert_eq!(stencil_kernel(&SOBEL_Y), [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0]);
        assert_eq!(stencil_kernel(&SOBEL_XY), [0.0, 1.0, 2.0, -1.0, 0.0, 1.0, -2.0, -1.0, 0.0]);
    }
}
