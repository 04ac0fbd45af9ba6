//! Homography algebra and bilinear image warping.
//!
//! Homographies are stored normalized so that the bottom-right entry is 1
//! whenever it is not vanishingly small, which resolves the "equal up to
//! scale" ambiguity of projective matrices.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};

const SINGULAR_DET: f64 = 1e-12;
const NORMALIZE_EPS: f64 = 1e-12;

pub type Mat3 = [[f64; 3]; 3];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography {
    m: Mat3,
}

/// Homogeneous point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointH {
    pub x: f64,
    pub y: f64,
    pub w: f64,
}

impl PointH {
    pub fn new(x: f64, y: f64, w: f64) -> Self {
        Self { x, y, w }
    }

    pub fn euclidean(x: f64, y: f64) -> Self {
        Self { x, y, w: 1.0 }
    }

    pub fn to_euclidean(self) -> Result<(f64, f64)> {
        if self.w.abs() < NORMALIZE_EPS {
            return Err(Error::DegeneratePoint { w: self.w });
        }
        Ok((self.x / self.w, self.y / self.w))
    }
}

fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn mul3(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, o) in row.iter_mut().enumerate() {
            *o = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

impl Homography {
    pub const IDENTITY: Homography = Homography {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };

    /// Validates invertibility and finiteness, then normalizes.
    pub fn new(m: Mat3) -> Result<Self> {
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("homography"));
        }
        let h = Self::normalized(m);
        let det = det3(&h.m);
        if det.abs() < SINGULAR_DET {
            return Err(Error::SingularMatrix { det });
        }
        Ok(h)
    }

    pub fn from_row_major(v: &[f64]) -> Result<Self> {
        if v.len() != 9 {
            return Err(Error::shape("homography", &[v.len()], &[9]));
        }
        Self::new([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]])
    }

    fn normalized(mut m: Mat3) -> Self {
        let s = m[2][2];
        if s.abs() > NORMALIZE_EPS && s != 1.0 {
            for v in m.iter_mut().flatten() {
                *v /= s;
            }
        }
        Self { m }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: [[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]],
        }
    }

    pub fn scaling(sx: f64, sy: f64) -> Result<Self> {
        Self::new([[sx, 0.0, 0.0], [0.0, sy, 0.0], [0.0, 0.0, 1.0]])
    }

    /// Rotation by `theta` radians. With image coordinates (y pointing down)
    /// positive angles turn content clockwise on screen.
    pub fn rotation(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self {
            m: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.m
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.m;
        [
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        ]
    }

    pub fn det(&self) -> f64 {
        det3(&self.m)
    }

    /// Normalized product `a · b`: applies `b` first, then `a`.
    pub fn compose(a: &Homography, b: &Homography) -> Homography {
        Self::normalized(mul3(&a.m, &b.m))
    }

    /// Adjugate inverse, normalized.
    pub fn invert(&self) -> Result<Homography> {
        let m = &self.m;
        let det = det3(m);
        if det.abs() < SINGULAR_DET {
            return Err(Error::SingularMatrix { det });
        }
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| {
            m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]
        };
        let adj = [
            [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
            [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
            [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
        ];
        let mut inv = adj;
        for v in inv.iter_mut().flatten() {
            *v /= det;
        }
        Ok(Self::normalized(inv))
    }

    /// Homogeneous product `h · p`.
    pub fn apply(&self, p: PointH) -> PointH {
        let m = &self.m;
        PointH {
            x: m[0][0] * p.x + m[0][1] * p.y + m[0][2] * p.w,
            y: m[1][0] * p.x + m[1][1] * p.y + m[1][2] * p.w,
            w: m[2][0] * p.x + m[2][1] * p.y + m[2][2] * p.w,
        }
    }

    /// Maps a Euclidean point and performs the perspective divide.
    pub fn apply_euclidean(&self, x: f64, y: f64) -> Result<(f64, f64)> {
        self.apply(PointH::euclidean(x, y)).to_euclidean()
    }

    pub fn max_abs_diff(&self, other: &Homography) -> f64 {
        self.m
            .iter()
            .flatten()
            .zip(other.m.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Parameters of a generated view transform. Angle in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomographyParams {
    pub sx: f64,
    pub sy: f64,
    pub tx: f64,
    pub ty: f64,
    pub theta_deg: f64,
}

impl HomographyParams {
    pub const IDENTITY: HomographyParams = HomographyParams {
        sx: 1.0,
        sy: 1.0,
        tx: 0.0,
        ty: 0.0,
        theta_deg: 0.0,
    };

    /// `T(tx, ty) · C · R(theta) · S(sx, sy) · C⁻¹`, with `C` the translation to
    /// the image center `(width/2, height/2)`.
    pub fn to_homography(&self, width: usize, height: usize) -> Result<Homography> {
        let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
        let center = Homography::translation(cx, cy);
        let uncenter = Homography::translation(-cx, -cy);
        let linear = Homography::compose(
            &Homography::rotation(self.theta_deg.to_radians()),
            &Homography::scaling(self.sx, self.sy)?,
        );
        let centered = Homography::compose(&center, &Homography::compose(&linear, &uncenter));
        Ok(Homography::compose(
            &Homography::translation(self.tx, self.ty),
            &centered,
        ))
    }

    pub fn within(&self, bounds: &HomographyBounds) -> bool {
        let inside = |v: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&v);
        inside(self.sx, bounds.scale)
            && inside(self.sy, bounds.scale)
            && inside(self.tx, bounds.translation)
            && inside(self.ty, bounds.translation)
            && inside(self.theta_deg, bounds.theta_deg)
    }
}

/// Closed sampling ranges for [`random_homography`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomographyBounds {
    pub scale: (f64, f64),
    /// Pixels.
    pub translation: (f64, f64),
    pub theta_deg: (f64, f64),
}

impl Default for HomographyBounds {
    fn default() -> Self {
        Self {
            scale: (0.5, 1.5),
            translation: (-4.0, 4.0),
            theta_deg: (-20.0, 20.0),
        }
    }
}

fn sample(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Samples every parameter uniformly from `bounds` and builds the centered
/// affine homography for a `width × height` image.
pub fn random_homography(
    rng: &mut impl Rng,
    bounds: &HomographyBounds,
    width: usize,
    height: usize,
) -> Result<(Homography, HomographyParams)> {
    let params = HomographyParams {
        sx: sample(rng, bounds.scale),
        sy: sample(rng, bounds.scale),
        tx: sample(rng, bounds.translation),
        ty: sample(rng, bounds.translation),
        theta_deg: sample(rng, bounds.theta_deg),
    };
    Ok((params.to_homography(width, height)?, params))
}

/// Inverse-mapping warp: destination pixel `q` samples the source at
/// `h⁻¹ · q` with bilinear interpolation; taps outside the source are 0.
pub fn warp_image(img: &Image, h: &Homography) -> Result<Image> {
    let inv = h.invert()?;
    let (w, ht) = (img.width(), img.height());
    let mut out = vec![0.0; w * ht];
    for y in 0..ht {
        for x in 0..w {
            let p = inv.apply(PointH::euclidean(x as f64, y as f64));
            if p.w.abs() < NORMALIZE_EPS {
                continue;
            }
            out[y * w + x] = bilinear(img, p.x / p.w, p.y / p.w).clamp(0.0, 1.0);
        }
    }
    Image::new(w, ht, out)
}

/// Bilinear sample at a real-valued position with zero fill outside the image.
pub fn bilinear(img: &Image, sx: f64, sy: f64) -> f64 {
    if !sx.is_finite() || !sy.is_finite() {
        return 0.0;
    }
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let tap = |xi: f64, yi: f64| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi >= img.width() as f64 || yi >= img.height() as f64 {
            0.0
        } else {
            img.get(xi as usize, yi as usize)
        }
    };
    (1.0 - fx) * (1.0 - fy) * tap(x0, y0)
        + fx * (1.0 - fy) * tap(x0 + 1.0, y0)
        + (1.0 - fx) * fy * tap(x0, y0 + 1.0)
        + fx * fy * tap(x0 + 1.0, y0 + 1.0)
}
