//! sRGB <-> CIE Lab conversion.
//!
//! Every unlabeled image is split into its lightness plane (the network
//! input) and its ab chroma planes (the pseudo label). Conversions use the
//! standard sRGB primaries with a D65 white point; the white is derived from
//! the forward matrix itself so that neutral grays map to exactly a = b = 0.

use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Largest chroma magnitude we represent. The sRGB gamut fits comfortably
/// inside [-110, 110] on both ab axes, and the quantization grid spans it.
pub const AB_MAX: f64 = 110.0;

/// sRGB -> XYZ (D65) forward matrix.
const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

/// XYZ -> sRGB inverse matrix.
const XYZ_TO_SRGB: [[f64; 3]; 3] = [
    [3.2404542, -1.5371385, -0.4985314],
    [-0.9692660, 1.8760108, 0.0415560],
    [0.0556434, -0.2040259, 1.0572252],
];

/// An sRGB image with real-valued channels in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    /// H x W x 3, each value in [0, 1].
    pub pixels: Array3<f64>,
}

impl RgbImage {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 || c != 3 {
            return Err(Error::invalid(format!(
                "rgb image must be HxWx3 with H,W >= 1, got {}x{}x{}",
                h, w, c
            )));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("rgb values must lie in [0,1]"));
        }
        Ok(Self { pixels })
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    /// Build from 8-bit data, dividing by 255.
    pub fn from_u8(data: &[u8], height: usize, width: usize) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::invalid("u8 buffer length does not match HxWx3"));
        }
        let pixels = Array3::from_shape_fn((height, width, 3), |(y, x, c)| {
            f64::from(data[(y * width + x) * 3 + c]) / 255.0
        });
        Ok(Self { pixels })
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

/// An image in CIE Lab, split into the lightness plane and the ab planes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabImage {
    /// H x W lightness, in [0, 100].
    pub lightness: Array2<f64>,
    /// H x W x 2 chroma (a, b), each component in [-AB_MAX, AB_MAX].
    pub chroma: Array3<f64>,
}

impl LabImage {
    pub fn new(lightness: Array2<f64>, chroma: Array3<f64>) -> Result<Self> {
        let (h, w) = lightness.dim();
        let (ch, cw, cc) = chroma.dim();
        if h == 0 || w == 0 || ch != h || cw != w || cc != 2 {
            return Err(Error::ShapeMismatch(format!(
                "lightness {}x{} vs chroma {}x{}x{}",
                h, w, ch, cw, cc
            )));
        }
        if lightness.iter().any(|v| !(0.0..=100.0).contains(v)) {
            return Err(Error::invalid("lightness must lie in [0,100]"));
        }
        if chroma.iter().any(|v| !(-AB_MAX..=AB_MAX).contains(v)) {
            return Err(Error::invalid("chroma must lie in [-110,110]"));
        }
        Ok(Self { lightness, chroma })
    }

    pub fn height(&self) -> usize {
        self.lightness.dim().0
    }

    pub fn width(&self) -> usize {
        self.lightness.dim().1
    }
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.0031308 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

/// Piecewise cube-root nonlinearity of the Lab definition.
fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

fn white_point() -> [f64; 3] {
    // X/Y/Z of sRGB (1,1,1); row sums of the forward matrix.
    let mut w = [0.0; 3];
    for (i, row) in SRGB_TO_XYZ.iter().enumerate() {
        w[i] = row.iter().sum();
    }
    w
}

/// Convert a single sRGB pixel (each channel in [0,1]) to (L, a, b).
pub fn rgb_pixel_to_lab(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let lin = [srgb_to_linear(r), srgb_to_linear(g), srgb_to_linear(b)];
    let mut xyz = [0.0; 3];
    for (i, row) in SRGB_TO_XYZ.iter().enumerate() {
        xyz[i] = row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2];
    }
    let w = white_point();
    let fx = lab_f(xyz[0] / w[0]);
    let fy = lab_f(xyz[1] / w[1]);
    let fz = lab_f(xyz[2] / w[2]);
    (116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz))
}

/// Convert a single Lab pixel back to sRGB, clipping out-of-gamut results
/// to [0,1] per channel.
pub fn lab_pixel_to_rgb(l: f64, a: f64, b: f64) -> (f64, f64, f64) {
    let fy = (l + 16.0) / 116.0;
    let fx = fy + a / 500.0;
    let fz = fy - b / 200.0;
    let w = white_point();
    let xyz = [w[0] * lab_f_inv(fx), w[1] * lab_f_inv(fy), w[2] * lab_f_inv(fz)];
    let mut rgb = [0.0; 3];
    for (i, row) in XYZ_TO_SRGB.iter().enumerate() {
        let lin = row[0] * xyz[0] + row[1] * xyz[1] + row[2] * xyz[2];
        rgb[i] = linear_to_srgb(lin.max(0.0)).clamp(0.0, 1.0);
    }
    (rgb[0], rgb[1], rgb[2])
}

/// Split an sRGB image into lightness and chroma planes.
///
/// Chroma is clamped to the representable [-110, 110] range; the entire sRGB
/// gamut stays strictly inside it, so the clamp only guards rounding noise.
pub fn rgb_to_lab(img: &RgbImage) -> LabImage {
    let (h, w, _) = img.pixels.dim();
    let mut lightness = Array2::zeros((h, w));
    let mut chroma = Array3::zeros((h, w, 2));
    for y in 0..h {
        for x in 0..w {
            let (l, a, b) = rgb_pixel_to_lab(
                img.pixels[[y, x, 0]],
                img.pixels[[y, x, 1]],
                img.pixels[[y, x, 2]],
            );
            lightness[[y, x]] = l.clamp(0.0, 100.0);
            chroma[[y, x, 0]] = a.clamp(-AB_MAX, AB_MAX);
            chroma[[y, x, 1]] = b.clamp(-AB_MAX, AB_MAX);
        }
    }
    LabImage { lightness, chroma }
}

/// Recompose an sRGB image from Lab planes. Inverse of [`rgb_to_lab`] up to
/// gamut clipping.
pub fn lab_to_rgb(lab: &LabImage) -> RgbImage {
    let (h, w) = lab.lightness.dim();
    let mut pixels = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let (r, g, b) = lab_pixel_to_rgb(
                lab.lightness[[y, x]],
                lab.chroma[[y, x, 0]],
                lab.chroma[[y, x, 1]],
            );
            pixels[[y, x, 0]] = r;
            pixels[[y, x, 1]] = g;
            pixels[[y, x, 2]] = b;
        }
    }
    RgbImage { pixels }
}

/// Load a PNG or JPEG file. Grayscale images are promoted to three equal
/// channels; 8-bit samples are divided by 255.
pub fn load_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    RgbImage::from_u8(img.as_raw(), h as usize, w as usize)
}

/// Write an image as PNG.
pub fn save_png(path: &Path, img: &RgbImage) -> Result<()> {
    let (h, w, _) = img.pixels.dim();
    let buf = img.to_u8();
    let out: image::RgbImage =
        image::ImageBuffer::from_raw(w as u32, h as u32, buf).expect("buffer sized from image");
    out.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
