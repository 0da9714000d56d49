//! Interleaved RGB images, cropping and PCA colour augmentation.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::pose::Pose2D;

/// Row-major `H × W × 3` bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape(
                "image",
                format!("{} bytes for {height}x{width}x3", data.len()),
            ));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(height * width * 3).collect();
        Image { height, width, data }
    }

    pub fn pixel(&self, r: usize, c: usize) -> [u8; 3] {
        let i = (r * self.width + c) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn mean_brightness(&self) -> f64 {
        self.data.iter().map(|&b| b as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn crop(&self, top: usize, left: usize, size: usize) -> Result<Image> {
        if top + size > self.height || left + size > self.width {
            return Err(Error::shape(
                "crop",
                format!("{size}px window at ({top}, {left}) exceeds {}x{}", self.height, self.width),
            ));
        }
        let mut data = Vec::with_capacity(size * size * 3);
        for r in top..top + size {
            let start = (r * self.width + left) * 3;
            data.extend_from_slice(&self.data[start..start + size * 3]);
        }
        Ok(Image { height: size, width: size, data })
    }
}

pub fn center_crop_offset(image_size: usize, crop: usize) -> usize {
    (image_size - crop) / 2
}

pub const MAX_CROP_ATTEMPTS: usize = 100;

/// Crops a `crop × crop` window and shifts the joints into it. The offset is
/// `(top, left)`; random offsets are redrawn until every joint is inside.
pub fn random_crop<R: Rng + ?Sized>(
    image: &Image,
    pose: &Pose2D,
    crop: usize,
    rng: &mut R,
    center: bool,
) -> Result<(Image, Pose2D, (usize, usize))> {
    if crop == 0 || crop > image.height || crop > image.width {
        return Err(Error::Config(format!(
            "crop size {crop} does not fit a {}x{} image",
            image.height, image.width
        )));
    }
    let attempt = |top: usize, left: usize| {
        let shifted = pose.shifted(-(left as f64), -(top as f64));
        shifted.inside(crop as f64).then_some(shifted)
    };
    if center {
        let (top, left) = (center_crop_offset(image.height, crop), center_crop_offset(image.width, crop));
        return match attempt(top, left) {
            Some(p) => Ok((image.crop(top, left, crop)?, p, (top, left))),
            None => Err(Error::Domain("joints fall outside the centre crop".into())),
        };
    }
    for _ in 0..MAX_CROP_ATTEMPTS {
        let top = rng.random_range(0..=image.height - crop);
        let left = rng.random_range(0..=image.width - crop);
        if let Some(p) = attempt(top, left) {
            return Ok((image.crop(top, left, crop)?, p, (top, left)));
        }
    }
    Err(Error::Domain(format!(
        "no crop keeps all joints inside after {MAX_CROP_ATTEMPTS} attempts"
    )))
}

/// Eigen-decomposition of the RGB covariance (channels scaled to `[0, 1]`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RgbEigen {
    pub values: [f64; 3],
    /// `vectors[i]` is the unit eigenvector for `values[i]`.
    pub vectors: [[f64; 3]; 3],
}

pub const PCA_ALPHA_STD: f64 = 0.1;

impl RgbEigen {
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Self> {
        let mut n = 0u64;
        let mut sum = [0.0f64; 3];
        let mut cross = [[0.0f64; 3]; 3];
        for img in images {
            for px in img.data.chunks_exact(3) {
                let v = [px[0] as f64 / 255.0, px[1] as f64 / 255.0, px[2] as f64 / 255.0];
                for i in 0..3 {
                    sum[i] += v[i];
                    for j in 0..3 {
                        cross[i][j] += v[i] * v[j];
                    }
                }
                n += 1;
            }
        }
        if n < 2 {
            return Err(Error::Config("need at least two pixels for colour statistics".into()));
        }
        let nf = n as f64;
        let mut cov = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] = (cross[i][j] - sum[i] * sum[j] / nf) / (nf - 1.0);
            }
        }
        Ok(Self::from_covariance(cov))
    }

    pub fn from_covariance(cov: [[f64; 3]; 3]) -> Self {
        let (values, vectors) = jacobi_eigen(cov);
        RgbEigen { values, vectors }
    }

    /// Colour shift `Σ αᵢ λᵢ eᵢ` in `[0, 1]` units.
    pub fn offset(&self, alpha: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for i in 0..3 {
            for c in 0..3 {
                out[c] += alpha[i] * self.values[i] * self.vectors[i][c];
            }
        }
        out
    }

    pub fn sample_alpha<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
        let normal = Normal::new(0.0, PCA_ALPHA_STD).unwrap();
        [normal.sample(rng), normal.sample(rng), normal.sample(rng)]
    }
}

/// Symmetric 3×3 eigen-decomposition by cyclic Jacobi rotations; eigenvalues
/// sorted descending.
fn jacobi_eigen(mut a: [[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _ in 0..64 {
        let off = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
        if off < 1e-30 {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q].abs() < 1e-300 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            for k in 0..3 {
                let (akp, akq) = (a[k][p], a[k][q]);
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let (apk, aqk) = (a[p][k], a[q][k]);
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            for row in &mut v {
                let (vp, vq) = (row[p], row[q]);
                row[p] = c * vp - s * vq;
                row[q] = s * vp + c * vq;
            }
        }
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| a[j][j].partial_cmp(&a[i][i]).unwrap());
    let values = order.map(|i| a[i][i]);
    let vectors = order.map(|i| [v[0][i], v[1][i], v[2][i]]);
    (values, vectors)
}

/// Adds a single colour offset (in `[0, 1]` units) to every pixel, then
/// rounds and clamps to bytes.
pub fn apply_color_offset(image: &Image, offset: [f64; 3]) -> Image {
    let mut out = image.clone();
    for px in out.data.chunks_exact_mut(3) {
        for c in 0..3 {
            px[c] = (px[c] as f64 + 255.0 * offset[c]).round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

pub fn pca_color_augment<R: Rng + ?Sized>(image: &Image, eigen: Option<&RgbEigen>, rng: &mut R) -> Result<Image> {
    let eigen = eigen.ok_or_else(|| Error::Config("PCA colour augmentation needs RGB eigenpairs".into()))?;
    Ok(apply_color_offset(image, eigen.offset(RgbEigen::sample_alpha(rng))))
}
