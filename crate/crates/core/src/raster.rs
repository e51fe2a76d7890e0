//! Single-channel `f64` images with a clamped bilinear sampler, its exact
//! spatial derivative, separable Gaussian smoothing, and binary PGM I/O.
//!
//! Pixel `(row i, column j)` sits at continuous coordinate `(x = j, y = i)`.
//! Coordinates outside `[0, w-1] × [0, h-1]` are clamped before sampling, so
//! the sampler is total and its derivative is zero along a clamped axis.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major grayscale raster, at least 2×2.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(Error::dim(format!(
                "image must be at least 2x2, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::dim(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Image {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Image::new(width, height, vec![value; width * height])
    }

    /// Builds an image from `f(x, y)` evaluated at every pixel.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Image::new(width, height, pixels)
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Bilinear lookup at `(x, y)` after clamping into the image.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let cx = Cell::locate(x, self.width);
        let cy = Cell::locate(y, self.height);
        self.interpolate(&cx, &cy)
    }

    /// Exact partial derivatives `(∂/∂x, ∂/∂y)` of [`Image::sample_bilinear`]
    /// inside the containing cell. On lattice lines the cell to the
    /// right/below is used.
    pub fn grad_bilinear(&self, x: f64, y: f64) -> (f64, f64) {
        self.sample_with_grad(x, y).1
    }

    /// Value and gradient in one pass.
    pub fn sample_with_grad(&self, x: f64, y: f64) -> (f64, (f64, f64)) {
        let cx = Cell::locate(x, self.width);
        let cy = Cell::locate(y, self.height);
        let [p00, p10, p01, p11] = self.corners(&cx, &cy);
        let value = self.interpolate(&cx, &cy);
        let top = p10 - p00;
        let bottom = p11 - p01;
        let gx = if cx.clamped {
            0.0
        } else {
            (1.0 - cy.frac) * top + cy.frac * bottom
        };
        let left = p01 - p00;
        let right = p11 - p10;
        let gy = if cy.clamped {
            0.0
        } else {
            (1.0 - cx.frac) * left + cx.frac * right
        };
        (value, (gx, gy))
    }

    /// Identifies which smooth piece of the sampler `(x, y)` falls in.
    ///
    /// Two coordinates with equal keys are joined by a path on which the
    /// sampler is a single polynomial. Indices run from -1 (clamped low) to
    /// `w - 1` (clamped high).
    pub fn cell_key(&self, x: f64, y: f64) -> (i64, i64) {
        (piece_index(x, self.width), piece_index(y, self.height))
    }

    fn corners(&self, cx: &Cell, cy: &Cell) -> [f64; 4] {
        let w = self.width;
        let i0 = cy.index * w + cx.index;
        let i1 = (cy.index + 1) * w + cx.index;
        [
            self.pixels[i0],
            self.pixels[i0 + 1],
            self.pixels[i1],
            self.pixels[i1 + 1],
        ]
    }

    fn interpolate(&self, cx: &Cell, cy: &Cell) -> f64 {
        let [p00, p10, p01, p11] = self.corners(cx, cy);
        let top = p00 + cx.frac * (p10 - p00);
        let bottom = p01 + cx.frac * (p11 - p01);
        top + cy.frac * (bottom - top)
    }

    /// Separable Gaussian blur with radius `ceil(3σ)`, normalized kernel and
    /// clamp-to-edge borders.
    pub fn gaussian_blur(&self, sigma: f64) -> Result<Image> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!(
                "blur sigma must be > 0, got {sigma}"
            )));
        }
        let kernel = gaussian_kernel(sigma);
        let radius = (kernel.len() / 2) as isize;
        let (w, h) = (self.width, self.height);
        let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;

        let mut horizontal = vec![0.0; w * h];
        for y in 0..h {
            let row = &self.pixels[y * w..(y + 1) * w];
            for x in 0..w {
                let mut acc = 0.0;
                for (t, &k) in kernel.iter().enumerate() {
                    let sx = clamp(x as isize + t as isize - radius, w);
                    acc += k * row[sx];
                }
                horizontal[y * w + x] = acc;
            }
        }
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, &k) in kernel.iter().enumerate() {
                    let sy = clamp(y as isize + t as isize - radius, h);
                    acc += k * horizontal[sy * w + x];
                }
                out[y * w + x] = acc;
            }
        }
        Image::new(w, h, out)
    }

    /// Reads an 8-bit binary PGM (`P5`, maxval 255), mapping intensities to
    /// `[0, 1]`.
    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        parse_pgm(&bytes).map_err(|m| Error::format(path, m))
    }

    /// Writes an 8-bit binary PGM. Values are clamped to `[0, 1]` and
    /// rounded to the nearest of 256 levels.
    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::with_capacity(self.pixels.len() + 20);
        write!(out, "P5\n{} {}\n255\n", self.width, self.height).expect("write to Vec");
        out.extend(self.pixels.iter().map(|&v| quantize(v)));
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// The image as it would be after a PGM round trip.
    pub fn quantized(&self) -> Image {
        self.map(|v| f64::from(quantize(v)) / 255.0)
    }
}

#[inline]
fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Position of a clamped coordinate along one axis.
struct Cell {
    index: usize,
    frac: f64,
    clamped: bool,
}

impl Cell {
    #[inline]
    fn locate(t: f64, n: usize) -> Cell {
        let max = (n - 1) as f64;
        let clamped = !(0.0..=max).contains(&t);
        let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, max) };
        let index = (t.floor() as usize).min(n - 2);
        Cell {
            index,
            frac: t - index as f64,
            clamped,
        }
    }
}

fn piece_index(t: f64, n: usize) -> i64 {
    let max = (n - 1) as f64;
    if t < 0.0 {
        -1
    } else if t > max {
        n as i64 - 1
    } else {
        (t.floor() as i64).min(n as i64 - 2)
    }
}

/// Normalized 1D Gaussian taps of radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        // whitespace and comments
        while pos < bytes.len() {
            if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PGM header".into());
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if tokens[0] != "P5" {
        return Err(format!("expected magic P5, found {:?}", tokens[0]));
    }
    let parse = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| format!("bad PGM {what}: {s:?}"))
    };
    let width = parse(&tokens[1], "width")?;
    let height = parse(&tokens[2], "height")?;
    let maxval = parse(&tokens[3], "maxval")?;
    if maxval != 255 {
        return Err(format!("only maxval 255 is supported, found {maxval}"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != width * height {
        return Err(format!(
            "expected {} raster bytes for {width}x{height}, found {}",
            width * height,
            body.len()
        ));
    }
    let pixels = body.iter().map(|&b| f64::from(b) / 255.0).collect();
    Image::new(width, height, pixels).map_err(|e| e.to_string())
}
