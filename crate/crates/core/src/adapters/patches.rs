use image::RgbImage;

use crate::error::{Error, Result};

/// Side length of every patch fed to the encoder.
pub const PATCH_SIZE: usize = 32;

/// RGB image with channels in `[0, 1]`, stored row-major HWC.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Self {
        assert_eq!(pixels.len(), width * height * 3);
        Self { width, height, pixels }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let pixels = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, pixels }
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let pixels = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Self { width: w as usize, height: h as usize, pixels }
    }

    /// Decodes any supported image file to RGB.
    pub fn open(path: &std::path::Path) -> Result<Self> {
        Ok(Self::from_rgb8(&image::open(path)?.to_rgb8()))
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size matches")
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Image {
        let mut pixels = Vec::with_capacity(w * h * 3);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * 3;
            pixels.extend_from_slice(&self.pixels[start..start + w * 3]);
        }
        Image { width: w, height: h, pixels }
    }

    /// Largest centered square crop.
    pub fn center_square(&self) -> Image {
        let side = self.width.min(self.height);
        let x0 = (self.width - side) / 2;
        let y0 = (self.height - side) / 2;
        self.crop(x0, y0, side, side)
    }

    /// Bilinear resampling with half-pixel centers and edge clamping.
    pub fn resize_bilinear(&self, out_w: usize, out_h: usize) -> Image {
        if out_w == self.width && out_h == self.height {
            return self.clone();
        }
        let sx = self.width as f32 / out_w as f32;
        let sy = self.height as f32 / out_h as f32;
        let mut pixels = Vec::with_capacity(out_w * out_h * 3);
        for oy in 0..out_h {
            let fy = ((oy as f32 + 0.5) * sy - 0.5).max(0.0);
            let y0 = (fy.floor() as usize).min(self.height - 1);
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f32;
            for ox in 0..out_w {
                let fx = ((ox as f32 + 0.5) * sx - 0.5).max(0.0);
                let x0 = (fx.floor() as usize).min(self.width - 1);
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f32;
                for c in 0..3 {
                    let top = self.get(x0, y0, c) * (1.0 - wx) + self.get(x1, y0, c) * wx;
                    let bot = self.get(x0, y1, c) * (1.0 - wx) + self.get(x1, y1, c) * wx;
                    pixels.push(top * (1.0 - wy) + bot * wy);
                }
            }
        }
        Image { width: out_w, height: out_h, pixels }
    }
}

/// A `3 x 32 x 32` patch in CHW order, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch(pub Vec<f32>);

impl Patch {
    pub fn from_image(img: &Image) -> Result<Self> {
        if img.width != PATCH_SIZE || img.height != PATCH_SIZE {
            return Err(Error::PatchSize { expected: PATCH_SIZE, got: img.pixels.len() });
        }
        let plane = PATCH_SIZE * PATCH_SIZE;
        let mut data = vec![0.0; 3 * plane];
        for (i, px) in img.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px[c];
            }
        }
        Ok(Patch(data))
    }

    pub fn to_image(&self) -> Image {
        let plane = PATCH_SIZE * PATCH_SIZE;
        let pixels = (0..plane).flat_map(|i| [self.0[i], self.0[plane + i], self.0[2 * plane + i]]).collect();
        Image::new(PATCH_SIZE, PATCH_SIZE, pixels)
    }
}

/// Cuts `image` into an `n x n` grid in row-major order and resizes each piece to 32x32.
pub fn patchify(image: &Image, n: usize) -> Result<Vec<Patch>> {
    if n < 1 {
        return Err(Error::InvalidGrid);
    }
    if image.width < n || image.height < n {
        return Err(Error::ImageTooSmall {
            width: image.width as u32,
            height: image.height as u32,
            reason: format!("cannot split into a {n}x{n} grid"),
        });
    }
    let mut out = Vec::with_capacity(n * n);
    for row in 0..n {
        let y0 = row * image.height / n;
        let y1 = (row + 1) * image.height / n;
        for col in 0..n {
            let x0 = col * image.width / n;
            let x1 = (col + 1) * image.width / n;
            let piece = image.crop(x0, y0, x1 - x0, y1 - y0).resize_bilinear(PATCH_SIZE, PATCH_SIZE);
            out.push(Patch::from_image(&piece)?);
        }
    }
    Ok(out)
}

/// Draws each patch centered at its continuous position; `[-1, 1]²` maps onto
/// the central `32n x 32n` area of a canvas with a one-patch margin.
pub fn render_placement(patches: &[Patch], positions: &[f64], n: usize) -> Result<Image> {
    if positions.len() != 2 * patches.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} positions", 2 * patches.len()),
            got: positions.len().to_string(),
        });
    }
    let inner = (PATCH_SIZE * n) as f64;
    let side = PATCH_SIZE * (n + 2);
    let mut canvas = Image::filled(side, side, [0.15, 0.15, 0.15]);
    let half = PATCH_SIZE as f64 / 2.0;
    for (p, xy) in patches.iter().zip(positions.chunks_exact(2)) {
        let cx = PATCH_SIZE as f64 + (xy[0] + 1.0) / 2.0 * inner;
        let cy = PATCH_SIZE as f64 + (xy[1] + 1.0) / 2.0 * inner;
        let (x0, y0) = ((cx - half).round() as i64, (cy - half).round() as i64);
        let plane = PATCH_SIZE * PATCH_SIZE;
        for py in 0..PATCH_SIZE {
            for px in 0..PATCH_SIZE {
                let (x, y) = (x0 + px as i64, y0 + py as i64);
                if x < 0 || y < 0 || x >= side as i64 || y >= side as i64 {
                    continue;
                }
                let dst = (y as usize * side + x as usize) * 3;
                for c in 0..3 {
                    canvas.pixels[dst + c] = p.0[c * plane + py * PATCH_SIZE + px];
                }
            }
        }
    }
    Ok(canvas)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Image {
        let mut px = Vec::new();
        for y in 0..h {
            for x in 0..w {
                px.extend([x as f32 / w as f32, y as f32 / h as f32, ((x * 7 + y * 13) % 17) as f32 / 17.0]);
            }
        }
        Image::new(w, h, px)
    }

    #[test]
    fn exact_crops_without_resampling() {
        let img = ramp(64, 64);
        let patches = patchify(&img, 2).unwrap();
        assert_eq!(patches.len(), 4);
        let p3 = patches[3].to_image();
        for y in 0..32 {
            for x in 0..32 {
                for c in 0..3 {
                    assert_eq!(p3.get(x, y, c), img.get(32 + x, 32 + y, c));
                }
            }
        }
    }

    #[test]
    fn constant_image_gives_identical_patches() {
        let img = Image::filled(90, 90, [0.2, 0.4, 0.6]);
        let patches = patchify(&img, 3).unwrap();
        assert!(patches.windows(2).all(|w| w[0] == w[1]));
    }

    /// Separate bilinear implementation working in source coordinates directly.
    fn oracle_sample(img: &Image, sx: f64, sy: f64, c: usize) -> f64 {
        let cx = sx.clamp(0.0, (img.width - 1) as f64);
        let cy = sy.clamp(0.0, (img.height - 1) as f64);
        let (x0, y0) = (cx.floor(), cy.floor());
        let (x1, y1) = ((x0 + 1.0).min((img.width - 1) as f64), (y0 + 1.0).min((img.height - 1) as f64));
        let (fx, fy) = (cx - x0, cy - y0);
        let g = |x: f64, y: f64| img.get(x as usize, y as usize, c) as f64;
        g(x0, y0) * (1.0 - fx) * (1.0 - fy) + g(x1, y0) * fx * (1.0 - fy) + g(x0, y1) * (1.0 - fx) * fy + g(x1, y1) * fx * fy
    }

    #[test]
    fn upsampled_patches_match_bilinear_oracle() {
        let img = ramp(64, 64);
        let patches = patchify(&img, 4).unwrap();
        assert_eq!(patches.len(), 16);
        for (idx, p) in patches.iter().enumerate() {
            let (row, col) = (idx / 4, idx % 4);
            let piece = img.crop(col * 16, row * 16, 16, 16);
            let pi = p.to_image();
            for &(x, y) in &[(0usize, 0usize), (31, 0), (0, 31), (31, 31), (10, 21)] {
                for c in 0..3 {
                    let sx = (x as f64 + 0.5) * 0.5 - 0.5;
                    let sy = (y as f64 + 0.5) * 0.5 - 0.5;
                    let want = oracle_sample(&piece, sx, sy, c);
                    assert!((pi.get(x, y, c) as f64 - want).abs() < 1e-6);
                }
            }
            // corners coincide with the source corners
            assert_eq!(pi.get(0, 0, 0), piece.get(0, 0, 0));
            assert_eq!(pi.get(31, 31, 1), piece.get(15, 15, 1));
        }
    }

    #[test]
    fn rejects_tiny_image() {
        let img = Image::filled(3, 3, [0.0; 3]);
        assert!(patchify(&img, 4).is_err());
    }

    #[test]
    fn center_square_crop() {
        let img = ramp(100, 60);
        let sq = img.center_square();
        assert_eq!((sq.width, sq.height), (60, 60));
        // x offset (100 - 60) / 2 = 20, y offset 0
        assert_eq!(sq.get(0, 0, 0), img.get(20, 0, 0));
        assert_eq!(sq.get(59, 59, 2), img.get(79, 59, 2));
    }

    #[test]
    fn rendering_exact_positions_reassembles_the_grid() {
        let img = Image::new(64, 64, (0..64 * 64 * 3).map(|i| (i % 251) as f32 / 251.0).collect());
        let patches = patchify(&img, 2).unwrap();
        let grid = crate::adapters::GridSpec::new(2).unwrap();
        let canvas = render_placement(&patches, &grid.positions_of(&[0, 1, 2, 3]), 2).unwrap();
        assert_eq!(canvas.width, 128);
        assert_eq!(canvas.crop(32, 32, 64, 64), img);
        assert_eq!(canvas.get(0, 0, 0), 0.15);
    }
}
