//! Grayscale rasters, pyramids, and sub-pixel access for the direct tracker.

use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("failed to read image {path}: {source}")]
    Read {
        path: String,
        source: image::ImageError,
    },
    #[error("image {0} has zero size")]
    Empty(String),
}

/// Real-valued grayscale raster, intensities nominally in 0..255.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height, "raster data size mismatch");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    /// Loads an 8-bit grayscale PGM or PNG file.
    pub fn load(path: &Path) -> Result<Self, ImageError> {
        let img = image::open(path)
            .map_err(|source| ImageError::Read {
                path: path.display().to_string(),
                source,
            })?
            .into_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        if w == 0 || h == 0 {
            return Err(ImageError::Empty(path.display().to_string()));
        }
        Ok(Self {
            width: w,
            height: h,
            data: img.into_raw().into_iter().map(f64::from).collect(),
        })
    }

    /// Writes the raster as an 8-bit binary PGM, clamping to 0..255.
    pub fn save_pgm(&self, path: &Path) -> std::io::Result<()> {
        let mut bytes = Vec::with_capacity(self.data.len() + 32);
        bytes.extend_from_slice(format!("P5\n{} {}\n255\n", self.width, self.height).as_bytes());
        bytes.extend(self.data.iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
        std::fs::write(path, bytes)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Bilinear sample at a fractional pixel position. Caller must keep the
    /// position inside `[0, w-1] x [0, h-1]`.
    #[inline]
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        self.sample_with_gradient(x, y).0
    }

    /// Bilinear sample plus the exact gradient of the bilinear interpolant
    /// within the cell. Using the interpolant's own derivative keeps the
    /// photometric Jacobians consistent with finite differences of the
    /// residual.
    #[inline]
    pub fn sample_with_gradient(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let x0 = (x.floor() as usize).min(self.width - 2);
        let y0 = (y.floor() as usize).min(self.height - 2);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let i00 = self.get(x0, y0);
        let i10 = self.get(x0 + 1, y0);
        let i01 = self.get(x0, y0 + 1);
        let i11 = self.get(x0 + 1, y0 + 1);
        let top = i00 + fx * (i10 - i00);
        let bot = i01 + fx * (i11 - i01);
        let value = top + fy * (bot - top);
        let gx = (i10 - i00) * (1.0 - fy) + (i11 - i01) * fy;
        let gy = (i01 - i00) * (1.0 - fx) + (i11 - i10) * fx;
        (value, gx, gy)
    }

    /// True if the position stays a `margin` away from the raster border,
    /// leaving room for bilinear access.
    #[inline]
    pub fn in_bounds(&self, x: f64, y: f64, margin: f64) -> bool {
        x >= margin
            && y >= margin
            && x <= self.width as f64 - 1.0 - margin
            && y <= self.height as f64 - 1.0 - margin
    }

    /// Central-difference gradient at an integer pixel (one-sided at the
    /// border). Used for point selection and gradient weighting.
    pub fn grid_gradient(&self, x: usize, y: usize) -> (f64, f64) {
        let xm = x.saturating_sub(1);
        let xp = (x + 1).min(self.width - 1);
        let ym = y.saturating_sub(1);
        let yp = (y + 1).min(self.height - 1);
        let gx = (self.get(xp, y) - self.get(xm, y)) / (xp - xm) as f64;
        let gy = (self.get(x, yp) - self.get(x, ym)) / (yp - ym) as f64;
        (gx, gy)
    }

    /// Squared gradient magnitude at an integer pixel.
    pub fn grad_sq(&self, x: usize, y: usize) -> f64 {
        let (gx, gy) = self.grid_gradient(x, y);
        gx * gx + gy * gy
    }

    /// Half-size raster by 2x2 averaging. Odd trailing rows/columns are
    /// dropped.
    pub fn downsample(&self) -> Raster {
        let w = self.width / 2;
        let h = self.height / 2;
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let s = self.get(2 * x, 2 * y)
                    + self.get(2 * x + 1, 2 * y)
                    + self.get(2 * x, 2 * y + 1)
                    + self.get(2 * x + 1, 2 * y + 1);
                data.push(s * 0.25);
            }
        }
        Raster {
            width: w,
            height: h,
            data,
        }
    }
}

/// Image pyramid, level 0 the full resolution.
#[derive(Debug, Clone)]
pub struct Pyramid {
    levels: Vec<Raster>,
}

impl Pyramid {
    pub fn build(base: Raster, levels: usize) -> Self {
        assert!(levels >= 1);
        let mut v = Vec::with_capacity(levels);
        v.push(base);
        for l in 1..levels {
            let next = v[l - 1].downsample();
            if next.width() < 8 || next.height() < 8 {
                break;
            }
            v.push(next);
        }
        Self { levels: v }
    }

    pub fn level(&self, l: usize) -> &Raster {
        &self.levels[l]
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn bilinear_matches_corners_and_center() {
        let r = Raster::new(2, 2, vec![0.0, 10.0, 20.0, 30.0]);
        assert_eq!(r.sample(0.0, 0.0), 0.0);
        assert_eq!(r.sample(1.0, 0.0), 10.0);
        assert_relative_eq!(r.sample(0.5, 0.5), 15.0);
    }

    #[test]
    fn bilinear_gradient_is_exact_inside_cell() {
        let r = Raster::new(2, 2, vec![1.0, 5.0, 3.0, 11.0]);
        // I(x,y) = 1 + 4x + 2y + 4xy on the unit cell.
        let (v, gx, gy) = r.sample_with_gradient(0.25, 0.5);
        assert_relative_eq!(v, 1.0 + 4.0 * 0.25 + 2.0 * 0.5 + 4.0 * 0.25 * 0.5);
        assert_relative_eq!(gx, 4.0 + 4.0 * 0.5);
        assert_relative_eq!(gy, 2.0 + 4.0 * 0.25);
    }

    #[test]
    fn downsample_averages_blocks() {
        let r = Raster::new(4, 2, vec![1.0, 3.0, 5.0, 7.0, 9.0, 11.0, 13.0, 15.0]);
        let d = r.downsample();
        assert_eq!(d.width(), 2);
        assert_eq!(d.height(), 1);
        assert_eq!(d.get(0, 0), 6.0);
        assert_eq!(d.get(1, 0), 10.0);
    }

    #[test]
    fn pyramid_stops_before_degenerate_levels() {
        let r = Raster::from_fn(32, 32, |x, y| (x + y) as f64);
        let p = Pyramid::build(r, 6);
        assert!(p.num_levels() <= 3);
        assert_eq!(p.level(p.num_levels() - 1).width(), 8);
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.pgm");
        let r = Raster::from_fn(16, 8, |x, y| ((x * 16 + y * 3) % 256) as f64);
        r.save_pgm(&path).unwrap();
        let back = Raster::load(&path).unwrap();
        assert_eq!(back.width(), 16);
        assert_eq!(back.height(), 8);
        for (a, b) in r.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5);
        }
    }

    #[test]
    fn central_difference_gradient() {
        let r = Raster::from_fn(8, 8, |x, _| (x * x) as f64);
        let (gx, gy) = r.grid_gradient(3, 4);
        assert_relative_eq!(gx, ((16 - 4) / 2) as f64);
        assert_eq!(gy, 0.0);
    }
}
