//! Random affine maps, inverse-warp sampling grids and label warping.

use rand::Rng;

use crate::error::{Error, Result};
use crate::labels::{LabelMap, INVALID_LABEL};
use crate::nn::SampleGrid;

const MAX_RESAMPLES: usize = 16;
const MIN_ABS_DET: f64 = 1e-6;

/// Rotation, isotropic scale, shear and translation about the image center.
///
/// The linear part is `A = R(rotation) · Shear(shear) · scale` acting on
/// `(x, y)` column vectors; translation is a fraction of `(W, H)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub rotation_deg: f64,
    pub scale: f64,
    pub shear_deg: f64,
    /// `(x, y)` translation as a fraction of width and height.
    pub translate: [f64; 2],
}

impl AffineParams {
    pub const IDENTITY: Self = Self { rotation_deg: 0.0, scale: 1.0, shear_deg: 0.0, translate: [0.0, 0.0] };

    pub fn rotation(deg: f64) -> Self {
        Self { rotation_deg: deg, ..Self::IDENTITY }
    }

    pub fn translation(fx: f64, fy: f64) -> Self {
        Self { translate: [fx, fy], ..Self::IDENTITY }
    }

    /// 2×2 matrix `[[a, b], [c, d]]`.
    pub fn matrix(&self) -> [[f64; 2]; 2] {
        let (cos, sin) = cos_sin_deg(self.rotation_deg);
        let shear = self.shear_deg.to_radians().tan();
        let s = self.scale;
        // R · [[1, shear], [0, 1]] · s
        [[cos * s, (cos * shear - sin) * s], [sin * s, (sin * shear + cos) * s]]
    }

    pub fn det(&self) -> f64 {
        let [[a, b], [c, d]] = self.matrix();
        a * d - b * c
    }

    /// Translation vector `(tx, ty)` in pixels for an `h×w` image.
    pub fn translation_px(&self, h: usize, w: usize) -> [f64; 2] {
        [self.translate[0] * w as f64, self.translate[1] * h as f64]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::DegenerateTransform(format!("scale {} must be positive", self.scale)));
        }
        let det = self.det();
        if !det.is_finite() || det.abs() <= MIN_ABS_DET {
            return Err(Error::DegenerateTransform(format!("|det A| = {det} is not invertible")));
        }
        Ok(())
    }
}

/// cos/sin of an angle in degrees, exact at multiples of 90°.
fn cos_sin_deg(deg: f64) -> (f64, f64) {
    if deg.fract() == 0.0 && deg % 90.0 == 0.0 {
        match (deg / 90.0).rem_euclid(4.0) as u8 {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        let r = deg.to_radians();
        (r.cos(), r.sin())
    }
}

/// Closed intervals the per-iteration transform is drawn from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineRanges {
    pub rotation_deg: (f64, f64),
    pub scale: (f64, f64),
    pub shear_deg: (f64, f64),
    /// Applied independently to the x and y fractions.
    pub translate: (f64, f64),
}

impl Default for AffineRanges {
    fn default() -> Self {
        Self { rotation_deg: (-30.0, 30.0), scale: (0.8, 1.2), shear_deg: (-10.0, 10.0), translate: (-0.1, 0.1) }
    }
}

impl AffineRanges {
    /// Every range collapsed onto the identity transform.
    pub const IDENTITY: Self =
        Self { rotation_deg: (0.0, 0.0), scale: (1.0, 1.0), shear_deg: (0.0, 0.0), translate: (0.0, 0.0) };

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("rotation", self.rotation_deg),
            ("scale", self.scale),
            ("shear", self.shear_deg),
            ("translate", self.translate),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("{name} range ({lo}, {hi}) is invalid")));
            }
        }
        if self.scale.0 <= 0.0 {
            return Err(Error::Config("scale range must be positive".into()));
        }
        if self.shear_deg.0 <= -90.0 || self.shear_deg.1 >= 90.0 {
            return Err(Error::Config("shear range must lie inside (-90, 90)".into()));
        }
        Ok(())
    }
}

fn draw<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// Independent uniform draws from `ranges`, resampled a bounded number of
/// times when the resulting map is not invertible.
pub fn sample_affine<R: Rng + ?Sized>(rng: &mut R, ranges: &AffineRanges) -> Result<AffineParams> {
    ranges.validate()?;
    for _ in 0..MAX_RESAMPLES {
        let p = AffineParams {
            rotation_deg: draw(rng, ranges.rotation_deg),
            scale: draw(rng, ranges.scale),
            shear_deg: draw(rng, ranges.shear_deg),
            translate: [draw(rng, ranges.translate), draw(rng, ranges.translate)],
        };
        if p.validate().is_ok() {
            return Ok(p);
        }
    }
    Err(Error::DegenerateTransform(format!("no invertible map after {MAX_RESAMPLES} draws")))
}

/// Pixels whose warped source coordinate lies inside the image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub valid: Vec<bool>,
}

impl Mask {
    pub fn count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Inverse-warp grid: output pixel `p` reads source
/// `A⁻¹·(p − center − t) + center`, with `center = ((W−1)/2, (H−1)/2)`.
pub fn affine_grid(params: &AffineParams, height: usize, width: usize) -> Result<(SampleGrid, Mask)> {
    params.validate()?;
    let [[a, b], [c, d]] = params.matrix();
    let det = a * d - b * c;
    let inv = [[d / det, -b / det], [-c / det, a / det]];
    let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    let [tx, ty] = params.translation_px(height, width);
    let mut points = Vec::with_capacity(height * width);
    let mut valid = Vec::with_capacity(height * width);
    for i in 0..height {
        for j in 0..width {
            let (u, v) = (j as f64 - cx - tx, i as f64 - cy - ty);
            let sx = inv[0][0] * u + inv[0][1] * v + cx;
            let sy = inv[1][0] * u + inv[1][1] * v + cy;
            points.push([sy, sx]);
            valid.push(sy >= 0.0 && sx >= 0.0 && sy <= (height - 1) as f64 && sx <= (width - 1) as f64);
        }
    }
    Ok((SampleGrid { height, width, points }, Mask { height, width, valid }))
}

/// Nearest-neighbour warp of a label map; invalid pixels get [`INVALID_LABEL`].
pub fn warp_labels(labels: &LabelMap, grid: &SampleGrid, mask: &Mask) -> Result<LabelMap> {
    if grid.points.len() != mask.valid.len() {
        return Err(Error::Shape("grid and mask sizes differ".into()));
    }
    let (h, w) = (labels.height, labels.width);
    let out = grid
        .points
        .iter()
        .zip(&mask.valid)
        .map(|(&[sy, sx], &ok)| {
            if !ok {
                return INVALID_LABEL;
            }
            let y = (sy.round().max(0.0) as usize).min(h - 1);
            let x = (sx.round().max(0.0) as usize).min(w - 1);
            labels.labels[y * w + x]
        })
        .collect();
    LabelMap::new(grid.height, grid.width, out)
}
