//! Grayscale raster images and the invariance transforms used as hints.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl RasterImage {
    /// Row-major `pixels`, each finite and within `[0, 1]`.
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dims must be positive, got {height}x{width}"
            )));
        }
        if pixels.len() != height * width {
            return Err(Error::LengthMismatch {
                shape: vec![height, width],
                expected: height * width,
                actual: pixels.len(),
            });
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("image pixels"));
        }
        if pixels.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::InvalidArgument("pixel outside [0, 1]".into()));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    /// Builds an image from arbitrary finite values, clamping into `[0, 1]`.
    pub fn from_clamped(height: usize, width: usize, mut pixels: Vec<f64>) -> Result<Self> {
        pixels.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
        Self::new(height, width, pixels)
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    fn get_or_zero(&self, row: isize, col: isize) -> f64 {
        if row < 0 || col < 0 || row >= self.height as isize || col >= self.width as isize {
            0.0
        } else {
            self.pixels[row as usize * self.width + col as usize]
        }
    }

    pub fn same_shape(&self, other: &RasterImage) -> bool {
        self.height == other.height && self.width == other.width
    }
}

pub fn flip_horizontal(img: &RasterImage) -> RasterImage {
    let pixels = img
        .pixels
        .chunks_exact(img.width)
        .flat_map(|row| row.iter().rev().copied())
        .collect();
    RasterImage { pixels, ..*img }
}

/// Shifts content right by `dx` and down by `dy`; vacated pixels are 0.
pub fn translate(img: &RasterImage, dx: i64, dy: i64) -> Result<RasterImage> {
    let (h, w) = (img.height as i64, img.width as i64);
    if dx.abs() >= w || dy.abs() >= h {
        return Err(Error::InvalidArgument(format!(
            "shift ({dx}, {dy}) too large for {h}x{w} image"
        )));
    }
    let mut out = RasterImage::zeros(img.height, img.width);
    for r in 0..h {
        for c in 0..w {
            out.pixels[(r * w + c) as usize] = img.get_or_zero((r - dy) as isize, (c - dx) as isize);
        }
    }
    Ok(out)
}

/// Rotation about the image centre with bilinear sampling. Zero degrees is
/// an exact copy.
pub fn rotate(img: &RasterImage, degrees: f64) -> Result<RasterImage> {
    if !degrees.is_finite() || degrees.abs() > 90.0 {
        return Err(Error::InvalidArgument(format!(
            "rotation {degrees} outside [-90, 90]"
        )));
    }
    if degrees == 0.0 {
        return Ok(img.clone());
    }
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (img.height as f64 - 1.0) / 2.0;
    let cx = (img.width as f64 - 1.0) / 2.0;
    let mut out = RasterImage::zeros(img.height, img.width);
    for r in 0..img.height {
        for c in 0..img.width {
            let (u, v) = (c as f64 - cx, r as f64 - cy);
            // inverse map: where in the source does this output pixel come from
            let sx = cos * u + sin * v + cx;
            let sy = -sin * u + cos * v + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let top = img.get_or_zero(y0, x0) * (1.0 - fx) + img.get_or_zero(y0, x0 + 1) * fx;
            let bot = img.get_or_zero(y0 + 1, x0) * (1.0 - fx) + img.get_or_zero(y0 + 1, x0 + 1) * fx;
            out.pixels[r * img.width + c] = (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Random flip / translation / rotation with bounded magnitudes.
#[derive(Clone, Debug, PartialEq)]
pub struct HintTransformSpec {
    pub flip_probability: f64,
    /// Upper bound on |shift| as a fraction of the image side, in `[0, 0.5]`.
    pub max_translate_fraction: f64,
    /// Upper bound on |rotation| in degrees, in `[0, 90]`.
    pub max_rotate_degrees: f64,
    /// Tag mixed into per-item seeds so different transform specs draw from
    /// different streams.
    pub seed_stream: u64,
}

impl HintTransformSpec {
    pub fn identity() -> Self {
        Self {
            flip_probability: 0.0,
            max_translate_fraction: 0.0,
            max_rotate_degrees: 0.0,
            seed_stream: 0,
        }
    }

    pub fn flip_only() -> Self {
        Self {
            flip_probability: 1.0,
            ..Self::identity()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: f64, hi: f64| {
            if v.is_finite() && (0.0..=hi).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name}={v} outside [0, {hi}]")))
            }
        };
        check("flip_probability", self.flip_probability, 1.0)?;
        check("max_translate_fraction", self.max_translate_fraction, 0.5)?;
        check("max_rotate_degrees", self.max_rotate_degrees, 90.0)
    }

    pub fn is_identity(&self) -> bool {
        self.flip_probability == 0.0
            && self.max_translate_fraction == 0.0
            && self.max_rotate_degrees == 0.0
    }

    /// Draws one transform. Always consumes the same number of random values.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, height: usize, width: usize) -> SampledTransform {
        let flip = rng.random::<f64>() < self.flip_probability;
        let mut shift = |side: usize| {
            let magnitude = rng.random::<f64>() * self.max_translate_fraction * side as f64;
            let pixels = (magnitude + 0.5).floor() as i64;
            if rng.random::<bool>() {
                pixels
            } else {
                -pixels
            }
        };
        let dx = shift(width);
        let dy = shift(height);
        let degrees = self.max_rotate_degrees * (2.0 * rng.random::<f64>() - 1.0);
        SampledTransform {
            flip,
            dx,
            dy,
            degrees,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampledTransform {
    pub flip: bool,
    pub dx: i64,
    pub dy: i64,
    pub degrees: f64,
}

impl SampledTransform {
    /// Flip, then translate, then rotate.
    pub fn apply(&self, img: &RasterImage) -> Result<RasterImage> {
        let flipped;
        let base = if self.flip {
            flipped = flip_horizontal(img);
            &flipped
        } else {
            img
        };
        let shifted = if self.dx == 0 && self.dy == 0 {
            base.clone()
        } else {
            translate(base, self.dx, self.dy)?
        };
        rotate(&shifted, self.degrees)
    }
}

pub fn apply_hint_transform<R: Rng + ?Sized>(
    img: &RasterImage,
    spec: &HintTransformSpec,
    rng: &mut R,
) -> Result<RasterImage> {
    spec.validate()?;
    spec.sample(rng, img.height, img.width).apply(img)
}

/// Writes one record: `u32` height and width (big-endian) then the pixels as big-endian `f32`.
pub fn write_image<W: Write>(w: &mut W, img: &RasterImage) -> std::io::Result<()> {
    w.write_all(&(img.height as u32).to_be_bytes())?;
    w.write_all(&(img.width as u32).to_be_bytes())?;
    for &p in &img.pixels {
        w.write_all(&(p as f32).to_be_bytes())?;
    }
    Ok(())
}

/// Reads one record, or `None` at a clean end of input.
pub fn read_image<R: Read>(r: &mut R) -> Result<Option<RasterImage>, String> {
    let mut head = [0u8; 8];
    let mut got = 0;
    while got < head.len() {
        match r.read(&mut head[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err("truncated record header".into()),
            Ok(n) => got += n,
            Err(e) => return Err(e.to_string()),
        }
    }
    let height = u32::from_be_bytes(head[..4].try_into().unwrap()) as usize;
    let width = u32::from_be_bytes(head[4..].try_into().unwrap()) as usize;
    let mut buf = vec![0u8; height * width * 4];
    r.read_exact(&mut buf).map_err(|_| "truncated pixel data".to_string())?;
    let pixels = buf
        .chunks_exact(4)
        .map(|b| f32::from_be_bytes(b.try_into().unwrap()) as f64)
        .collect();
    RasterImage::new(height, width, pixels)
        .map(Some)
        .map_err(|e| e.to_string())
}

pub fn save_images(path: &Path, images: &[RasterImage]) -> Result<()> {
    let mut buf = Vec::new();
    for img in images {
        write_image(&mut buf, img).map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_images(path: &Path) -> Result<Vec<RasterImage>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cursor = bytes.as_slice();
    let mut out = Vec::new();
    while let Some(img) = read_image(&mut cursor).map_err(|m| Error::format(path, m))? {
        out.push(img);
    }
    Ok(out)
}

/// Rounds every pixel through `f32` so images survive the binary format unchanged.
pub fn quantize(img: &RasterImage) -> RasterImage {
    let pixels = img.pixels.iter().map(|&p| p as f32 as f64).collect();
    RasterImage { pixels, ..*img }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img(rows: &[&[f64]]) -> RasterImage {
        let w = rows[0].len();
        RasterImage::new(rows.len(), w, rows.concat()).unwrap()
    }

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> RasterImage {
        RasterImage::new(h, w, (0..h * w).map(|_| rng.random()).collect()).unwrap()
    }

    /// Soft-edged disk centred on the pixel grid, rendered from its radial profile.
    fn disk(side: usize, radius: f64) -> RasterImage {
        let c = (side as f64 - 1.0) / 2.0;
        let px = (0..side * side)
            .map(|i| {
                let (r, col) = ((i / side) as f64, (i % side) as f64);
                let d = ((r - c).powi(2) + (col - c).powi(2)).sqrt();
                1.0 / (1.0 + ((d - radius) / 1.5).exp())
            })
            .collect();
        RasterImage::new(side, side, px).unwrap()
    }

    /// Smooth random field: a few broad Gaussian bumps.
    fn smooth_image(rng: &mut ChaCha8Rng, side: usize) -> RasterImage {
        let bumps: Vec<(f64, f64, f64)> = (0..4)
            .map(|_| {
                (
                    rng.random_range(4.0..side as f64 - 4.0),
                    rng.random_range(4.0..side as f64 - 4.0),
                    rng.random_range(0.2..0.5),
                )
            })
            .collect();
        let px = (0..side * side)
            .map(|i| {
                let (r, c) = ((i / side) as f64, (i % side) as f64);
                bumps
                    .iter()
                    .map(|&(y, x, a)| a * (-((r - y).powi(2) + (c - x).powi(2)) / 18.0).exp())
                    .sum::<f64>()
            })
            .collect();
        RasterImage::from_clamped(side, side, px).unwrap()
    }

    #[test]
    fn constructor_validates() {
        assert!(RasterImage::new(2, 2, vec![0.0; 3]).is_err());
        assert!(RasterImage::new(1, 1, vec![1.5]).is_err());
        assert!(RasterImage::new(0, 1, vec![]).is_err());
        assert_eq!(RasterImage::from_clamped(1, 2, vec![-1.0, 2.0]).unwrap().pixels(), &[0.0, 1.0]);
    }

    #[test]
    fn flip_examples() {
        let a = img(&[&[0.1, 0.2], &[0.3, 0.4]]);
        assert_eq!(flip_horizontal(&a), img(&[&[0.2, 0.1], &[0.4, 0.3]]));
        let sym = img(&[&[0.5, 0.2, 0.5], &[0.1, 0.9, 0.1]]);
        assert_eq!(flip_horizontal(&sym), sym);
    }

    #[test]
    fn translate_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_image(&mut rng, 4, 4);
        assert_eq!(translate(&a, 0, 0).unwrap(), a);
        let z = RasterImage::zeros(4, 4);
        assert_eq!(translate(&z, 2, -3).unwrap(), z);
        let s = translate(&a, 1, 0).unwrap();
        for r in 0..4 {
            assert_eq!(s.get(r, 0), 0.0);
            for c in 1..4 {
                assert_eq!(s.get(r, c), a.get(r, c - 1));
            }
        }
        assert!(translate(&a, 4, 0).is_err());
        assert!(translate(&a, 0, -4).is_err());
    }

    #[test]
    fn translation_composes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_image(&mut rng, 6, 6);
        for (p, q) in [(1, 2), (2, 1), (-1, -2), (-3, 1)] {
            let twice = translate(&translate(&a, p, 0).unwrap(), q, 0).unwrap();
            let once = translate(&a, p + q, 0).unwrap();
            // columns that never left the frame agree
            let lo = 0.max(q).max(p + q) as usize;
            let hi = (6 + 0.min(q).min(p + q)) as usize;
            for r in 0..6 {
                for c in lo..hi {
                    assert_eq!(twice.get(r, c), once.get(r, c));
                }
            }
        }
    }

    #[test]
    fn rotate_zero_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng, 7, 5);
        assert_eq!(rotate(&a, 0.0).unwrap(), a);
        assert!(rotate(&a, 91.0).is_err());
    }

    #[test]
    fn rotate_centered_disk() {
        let d = disk(33, 9.0);
        let r = rotate(&d, 30.0).unwrap();
        let max = d
            .pixels()
            .iter()
            .zip(r.pixels())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max < 0.05, "max diff {max}");
    }

    #[test]
    fn rotate_near_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let a = smooth_image(&mut rng, 24);
            let back = rotate(&rotate(&a, 10.0).unwrap(), -10.0).unwrap();
            let mut sum = 0.0;
            let mut n = 0;
            for r in 4..20 {
                for c in 4..20 {
                    sum += (a.get(r, c) - back.get(r, c)).abs();
                    n += 1;
                }
            }
            assert!(sum / (n as f64) < 0.02);
        }
    }

    #[test]
    fn hint_transform_degenerate_specs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_image(&mut rng, 8, 8);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(apply_hint_transform(&a, &HintTransformSpec::identity(), &mut r).unwrap(), a);
        assert_eq!(
            apply_hint_transform(&a, &HintTransformSpec::flip_only(), &mut r).unwrap(),
            flip_horizontal(&a)
        );
    }

    #[test]
    fn hint_transform_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_image(&mut rng, 16, 16);
        let spec = HintTransformSpec {
            flip_probability: 0.5,
            max_translate_fraction: 0.1,
            max_rotate_degrees: 18.0,
            seed_stream: 0,
        };
        let run = |s| apply_hint_transform(&a, &spec, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
        assert_eq!(run(42), run(42));
        assert_ne!(run(42), run(43));
    }

    #[test]
    fn sampled_magnitudes_in_range() {
        let spec = HintTransformSpec {
            flip_probability: 0.5,
            max_translate_fraction: 0.05,
            max_rotate_degrees: 18.0,
            seed_stream: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let t = spec.sample(&mut rng, 16, 16);
            // 5% of 16 is 0.8, which rounds to at most one pixel
            assert!(t.dx.abs() <= 1 && t.dy.abs() <= 1);
            assert!(t.degrees.abs() <= 18.0);
        }
        let bad = HintTransformSpec {
            max_translate_fraction: 0.6,
            ..spec
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn binary_record_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let images: Vec<_> = (0..3).map(|_| quantize(&random_image(&mut rng, 3, 5))).collect();
        let mut buf = Vec::new();
        for i in &images {
            write_image(&mut buf, i).unwrap();
        }
        assert_eq!(&buf[..8], &[0, 0, 0, 3, 0, 0, 0, 5]);
        assert_eq!(buf.len(), 3 * (8 + 15 * 4));
        let mut cur = buf.as_slice();
        let mut back = Vec::new();
        while let Some(i) = read_image(&mut cur).unwrap() {
            back.push(i);
        }
        assert_eq!(back, images);
        let mut short = &buf[..10];
        assert!(read_image(&mut short).is_err());
    }
}
