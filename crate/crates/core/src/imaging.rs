//! Raster images, patch-budget resizing and vision-token accounting.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use base64::Engine as _;
use image::imageops::FilterType;
use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, CoordSpace};

/// Side length in pixels of one vision-token patch.
pub const PATCH: u32 = 28;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("token budget must be at least 1")]
    ZeroBudget,
    #[error("dimensions {width}x{height} are not multiples of {PATCH}")]
    Misaligned { width: u32, height: u32 },
    #[error("box {bbox} belongs to a {box_space} image, not {image_space}")]
    ForeignBox {
        bbox: BBox,
        box_space: CoordSpace,
        image_space: CoordSpace,
    },
    #[error("pixel buffer holds {got} bytes, expected {expected}")]
    BufferSize { got: usize, expected: usize },
    #[error("empty image {width}x{height}")]
    Empty { width: u32, height: u32 },
    #[error("failed to decode {}: {source}", path.display())]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("failed to encode PNG: {0}")]
    Encode(#[source] image::ImageError),
}

/// Caps the number of vision tokens at `max_tokens` (budget `max_tokens * 28 * 28` pixels).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct PixelConstraint {
    max_tokens: u32,
}

impl PixelConstraint {
    pub fn new(max_tokens: u32) -> Result<Self, ImagingError> {
        if max_tokens == 0 {
            return Err(ImagingError::ZeroBudget);
        }
        Ok(Self { max_tokens })
    }

    pub fn max_tokens(&self) -> u32 {
        self.max_tokens
    }

    pub fn pixel_budget(&self) -> u64 {
        u64::from(self.max_tokens) * u64::from(PATCH * PATCH)
    }
}

impl TryFrom<u32> for PixelConstraint {
    type Error = ImagingError;
    fn try_from(v: u32) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<PixelConstraint> for u32 {
    fn from(c: PixelConstraint) -> u32 {
        c.max_tokens
    }
}

/// Target dimensions for an image under `c`.
///
/// Scales by `min(1, sqrt(budget / (w * h)))` and floors each side to a
/// multiple of the patch size (at least one patch). The result never exceeds
/// the budget and never upscales. Sides below one patch are treated as if
/// padded up to it.
pub fn smart_resize(width: u32, height: u32, c: PixelConstraint) -> (u32, u32) {
    let (w, h) = (width.max(PATCH), height.max(PATCH));
    let pixels = u64::from(w) * u64::from(h);
    let scale = if pixels <= c.pixel_budget() {
        1.0
    } else {
        (c.pixel_budget() as f64 / pixels as f64).sqrt()
    };
    let patches = |side: u32| -> u64 { ((scale * f64::from(side) / f64::from(PATCH)).floor() as u64).max(1) };
    let (mut pw, mut ph) = (patches(w), patches(h));
    let max = u64::from(c.max_tokens);
    // Float rounding, or the one-patch floor on a very thin side, can push the
    // product over the budget; shave the longer side until it fits.
    while pw * ph > max {
        if pw >= ph {
            pw = (max / ph).max(1).min(pw - 1);
        } else {
            ph = (max / pw).max(1).min(ph - 1);
        }
    }
    ((pw as u32) * PATCH, (ph as u32) * PATCH)
}

/// Number of vision tokens for an image of already patch-aligned dimensions.
pub fn token_count(width: u32, height: u32) -> Result<u64, ImagingError> {
    if width % PATCH != 0 || height % PATCH != 0 {
        return Err(ImagingError::Misaligned { width, height });
    }
    Ok(u64::from(width / PATCH) * u64::from(height / PATCH))
}

/// Row-major RGB8 image.
#[derive(Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for RasterImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RasterImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl RasterImage {
    pub fn from_raw(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::Empty { width, height });
        }
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(ImagingError::BufferSize {
                got: pixels.len(),
                expected,
            });
        }
        Ok(Self { width, height, pixels })
    }

    /// Image filled with a single colour.
    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self, ImagingError> {
        let pixels = rgb.iter().copied().cycle().take(width as usize * height as usize * 3).collect();
        Self::from_raw(width, height, pixels)
    }

    /// Image whose pixel values are produced by `f(x, y)`.
    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> [u8; 3]) -> Result<Self, ImagingError> {
        let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        Self::from_raw(width, height, pixels)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn space(&self) -> CoordSpace {
        CoordSpace::new(self.width, self.height).expect("non-empty image")
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    fn to_rgb(&self) -> RgbImage {
        RgbImage::from_raw(self.width, self.height, self.pixels.clone()).expect("buffer size checked")
    }

    fn from_rgb(img: RgbImage) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            pixels: img.into_raw(),
        }
    }

    fn check_box(&self, b: &BBox) -> Result<(), ImagingError> {
        if b.space() != self.space() {
            return Err(ImagingError::ForeignBox {
                bbox: *b,
                box_space: b.space(),
                image_space: self.space(),
            });
        }
        Ok(())
    }

    /// Pads each side below one patch up to [`PATCH`] by replicating edge pixels.
    pub fn pad_to_patch(&self) -> RasterImage {
        if self.width >= PATCH && self.height >= PATCH {
            return self.clone();
        }
        let (w, h) = (self.width.max(PATCH), self.height.max(PATCH));
        RasterImage::from_fn(w, h, |x, y| self.pixel(x.min(self.width - 1), y.min(self.height - 1)))
            .expect("padded dims are non-empty")
    }
}

/// Resizes `img` to its [`smart_resize`] dimensions with bilinear filtering.
/// Images that already have those dimensions are returned unchanged.
pub fn downsample(img: &RasterImage, c: PixelConstraint) -> RasterImage {
    let padded = img.pad_to_patch();
    let (w, h) = smart_resize(padded.width, padded.height, c);
    if (w, h) == (padded.width, padded.height) {
        return padded;
    }
    let resized = image::imageops::resize(&padded.to_rgb(), w, h, FilterType::Triangle);
    RasterImage::from_rgb(resized)
}

/// Exact pixel copy of the region `b`.
pub fn crop(img: &RasterImage, b: &BBox) -> Result<RasterImage, ImagingError> {
    img.check_box(b)?;
    let row = img.width as usize * 3;
    let mut pixels = Vec::with_capacity(b.area() as usize * 3);
    for y in b.y1()..b.y2() {
        let start = y as usize * row + b.x1() as usize * 3;
        pixels.extend_from_slice(&img.pixels[start..start + b.width() as usize * 3]);
    }
    RasterImage::from_raw(b.width(), b.height(), pixels)
}

/// Copy of `img` with every pixel inside `b` set to black.
pub fn mask_region(img: &RasterImage, b: &BBox) -> Result<RasterImage, ImagingError> {
    img.check_box(b)?;
    let mut out = img.clone();
    let row = img.width as usize * 3;
    for y in b.y1()..b.y2() {
        let start = y as usize * row + b.x1() as usize * 3;
        out.pixels[start..start + b.width() as usize * 3].fill(0);
    }
    Ok(out)
}

pub fn decode_file(path: &Path) -> Result<RasterImage, ImagingError> {
    let img = image::open(path).map_err(|source| ImagingError::Decode {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(RasterImage::from_rgb(img.to_rgb8()))
}

/// Decodes PNG or JPEG bytes. `label` names the source in errors.
pub fn decode_bytes(bytes: &[u8], label: &str) -> Result<RasterImage, ImagingError> {
    let img = image::load_from_memory(bytes).map_err(|source| ImagingError::Decode {
        path: PathBuf::from(label),
        source,
    })?;
    Ok(RasterImage::from_rgb(img.to_rgb8()))
}

/// Reads only the header to get an image file's dimensions.
pub fn probe_dimensions(path: &Path) -> Result<(u32, u32), ImagingError> {
    image::image_dimensions(path).map_err(|source| ImagingError::Decode {
        path: path.to_path_buf(),
        source,
    })
}

pub fn encode_png(img: &RasterImage) -> Result<Vec<u8>, ImagingError> {
    let mut buf = Cursor::new(Vec::new());
    img.to_rgb()
        .write_to(&mut buf, ImageFormat::Png)
        .map_err(ImagingError::Encode)?;
    Ok(buf.into_inner())
}

/// `data:image/png;base64,...` form used on the wire.
pub fn png_data_uri(img: &RasterImage) -> Result<String, ImagingError> {
    let png = encode_png(img)?;
    Ok(format!(
        "data:image/png;base64,{}",
        base64::engine::general_purpose::STANDARD.encode(png)
    ))
}
