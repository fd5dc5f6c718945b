//! Value types shared by every stage (images, sampling grids, masks,
//! confidence and error maps, keypoints) and their on-disk formats.
//!
//! Coordinates in a [`SamplingGrid`] are normalized: `-1` and `+1` address the
//! centers of the first and last pixel along each axis (align-corners).

use std::fs;
use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const GRID_MAGIC: [u8; 4] = *b"WGRD";
const GRID_VERSION: u32 = 1;
const GRID_HEADER_LEN: usize = 16;

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

/// Normalized coordinate of pixel index `i` on an axis of `n` samples.
#[inline]
pub fn pixel_to_norm(i: f64, n: usize) -> f64 {
    let span = n as f64 - 1.0;
    (2.0 * i - span) / span
}

#[inline]
pub fn norm_to_pixel(v: f64, n: usize) -> f64 {
    (v + 1.0) * 0.5 * (n as f64 - 1.0)
}

/// `C×H×W` intensities in `[0, 1]`, row-major per channel plane.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if !(1..=4).contains(&channels) || height == 0 || width == 0 {
            return Err(Error::InvalidDimensions(format!("image {channels}x{height}x{width}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::dims(format!(
                "image {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::InvalidValue(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    /// Build from an f64 tensor, clamping into `[0, 1]` (non-finite values become 0).
    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            channels: t.channels,
            height: t.height,
            width: t.width,
            data: t
                .data
                .iter()
                .map(|&v| if v.is_finite() { v.clamp(0.0, 1.0) as f32 } else { 0.0 })
                .collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Decode an 8- or 16-bit PNG with 1–4 channels.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = read_file(path)?;
        let decoded = decode_png(&bytes).map_err(|reason| match reason {
            PngFailure::Depth(d) => Error::UnsupportedBitDepth(d),
            PngFailure::Malformed(reason) => Error::MalformedPng {
                path: path.to_path_buf(),
                reason,
            },
        })?;
        let (channels, height, width, samples, max) = decoded;
        let data = deinterleave(&samples, channels, height, width, max);
        Self::new(channels, height, width, data)
    }

    /// Encode at the given bit depth (8 or 16); values are rounded to the
    /// nearest representable level.
    pub fn save_png(&self, path: impl AsRef<Path>, bit_depth: u8) -> Result<()> {
        let max = match bit_depth {
            8 => 255.0,
            16 => 65535.0,
            d => return Err(Error::UnsupportedBitDepth(d)),
        };
        let n = self.height * self.width;
        let mut samples = Vec::with_capacity(n * self.channels);
        for i in 0..n {
            for c in 0..self.channels {
                samples.push((self.data[c * n + i] as f64 * max).round() as u16);
            }
        }
        write_png(
            path.as_ref(),
            self.width,
            self.height,
            self.channels,
            bit_depth,
            &samples,
        )
    }
}

fn deinterleave(samples: &[u16], channels: usize, height: usize, width: usize, max: f32) -> Vec<f32> {
    let n = height * width;
    let mut data = vec![0.0f32; channels * n];
    for i in 0..n {
        for c in 0..channels {
            data[c * n + i] = samples[i * channels + c] as f32 / max;
        }
    }
    data
}

enum PngFailure {
    Depth(u8),
    Malformed(String),
}

type Decoded = (usize, usize, usize, Vec<u16>, f32);

fn decode_png(bytes: &[u8]) -> std::result::Result<Decoded, PngFailure> {
    let malformed = |e: png::DecodingError| PngFailure::Malformed(e.to_string());
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    // header peek to reject sub-byte depths before any expansion
    {
        let probe = png::Decoder::new(Cursor::new(bytes)).read_info().map_err(malformed)?;
        let info = probe.info();
        let depth = info.bit_depth as u8;
        if depth != 8 && depth != 16 {
            return Err(PngFailure::Depth(depth));
        }
        if info.color_type == png::ColorType::Indexed {
            decoder.set_transformations(png::Transformations::EXPAND);
        }
    }
    let mut reader = decoder.read_info().map_err(malformed)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| PngFailure::Malformed("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let out = reader.next_frame(&mut buf).map_err(malformed)?;
    let channels = match out.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(PngFailure::Malformed("unexpanded palette".into())),
    };
    let (w, h) = (out.width as usize, out.height as usize);
    let per_row = w * channels;
    let mut samples = Vec::with_capacity(per_row * h);
    let (max, wide) = match out.bit_depth {
        png::BitDepth::Eight => (255.0, false),
        png::BitDepth::Sixteen => (65535.0, true),
        other => return Err(PngFailure::Depth(other as u8)),
    };
    for row in 0..h {
        let line = &buf[row * out.line_size..];
        for i in 0..per_row {
            samples.push(if wide {
                u16::from_be_bytes([line[2 * i], line[2 * i + 1]])
            } else {
                line[i] as u16
            });
        }
    }
    Ok((channels, h, w, samples, max))
}

fn write_png(path: &Path, width: usize, height: usize, channels: usize, depth: u8, samples: &[u16]) -> Result<()> {
    let color = match channels {
        1 => png::ColorType::Grayscale,
        2 => png::ColorType::GrayscaleAlpha,
        3 => png::ColorType::Rgb,
        4 => png::ColorType::Rgba,
        c => return Err(Error::InvalidDimensions(format!("{c} channels"))),
    };
    let mut bytes = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut bytes, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(if depth == 16 {
            png::BitDepth::Sixteen
        } else {
            png::BitDepth::Eight
        });
        let mut writer = enc.write_header().map_err(|e| Error::Io(std::io::Error::other(e)))?;
        let raw: Vec<u8> = if depth == 16 {
            samples.iter().flat_map(|s| s.to_be_bytes()).collect()
        } else {
            samples.iter().map(|&s| s as u8).collect()
        };
        writer
            .write_image_data(&raw)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        writer.finish().map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Per-pixel normalized coordinates: plane 0 holds x, plane 1 holds y.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGrid {
    height: usize,
    width: usize,
    coords: Vec<f32>,
}

impl SamplingGrid {
    pub fn new(height: usize, width: usize, coords: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidDimensions(format!("grid {height}x{width}")));
        }
        if coords.len() != 2 * height * width {
            return Err(Error::dims(format!(
                "grid {height}x{width} needs {} values, got {}",
                2 * height * width,
                coords.len()
            )));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("grid coordinate".into()));
        }
        Ok(Self { height, width, coords })
    }

    /// The canonical grid: every pixel addresses itself.
    pub fn identity(height: usize, width: usize) -> Result<Self> {
        if height < 2 || width < 2 {
            return Err(Error::InvalidDimensions(format!(
                "identity grid needs at least 2x2, got {height}x{width}"
            )));
        }
        let n = height * width;
        let mut coords = vec![0.0f32; 2 * n];
        for r in 0..height {
            for c in 0..width {
                coords[r * width + c] = pixel_to_norm(c as f64, width) as f32;
                coords[n + r * width + c] = pixel_to_norm(r as f64, height) as f32;
            }
        }
        Ok(Self { height, width, coords })
    }

    /// Grid from a 2-channel tensor. Non-finite entries are rejected.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.channels != 2 {
            return Err(Error::dims(format!("grid tensor needs 2 channels, got {}", t.channels)));
        }
        Self::new(t.height, t.width, t.data.iter().map(|&v| v as f32).collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            channels: 2,
            height: self.height,
            width: self.width,
            data: self.coords.iter().map(|&v| v as f64).collect(),
        }
    }

    /// `identity + displacement`, displacement given as a 2-channel tensor.
    pub fn from_displacement(disp: &Tensor) -> Result<Self> {
        let id = Self::identity(disp.height, disp.width)?;
        let mut t = id.to_tensor();
        if !t.same_shape(disp) {
            return Err(Error::dims("displacement shape"));
        }
        t.add_assign(disp);
        Self::from_tensor(&t)
    }

    pub fn displacement(&self) -> Result<Tensor> {
        let id = Self::identity(self.height, self.width)?;
        let mut t = self.to_tensor();
        for (v, i) in t.data.iter_mut().zip(&id.coords) {
            *v -= *i as f64;
        }
        Ok(t)
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn coords(&self) -> &[f32] {
        &self.coords
    }

    #[inline]
    pub fn x(&self, r: usize, c: usize) -> f32 {
        self.coords[r * self.width + c]
    }

    #[inline]
    pub fn y(&self, r: usize, c: usize) -> f32 {
        self.coords[self.height * self.width + r * self.width + c]
    }

    /// Whether the pixel's coordinate lies inside `[-1, 1]²`.
    pub fn in_range(&self, r: usize, c: usize) -> bool {
        let (x, y) = (self.x(r, c), self.y(r, c));
        (-1.0..=1.0).contains(&x) && (-1.0..=1.0).contains(&y)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(GRID_HEADER_LEN + 4 * self.coords.len());
        out.extend_from_slice(&GRID_MAGIC);
        out.extend_from_slice(&GRID_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for v in &self.coords {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < GRID_HEADER_LEN {
            return Err(Error::SizeMismatch {
                expected: GRID_HEADER_LEN,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
        if magic != GRID_MAGIC {
            return Err(Error::BadMagic {
                expected: GRID_MAGIC,
                found: magic,
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != GRID_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let (h, w) = (word(8) as usize, word(12) as usize);
        let expected = GRID_HEADER_LEN + 8 * h * w;
        if bytes.len() != expected {
            return Err(Error::SizeMismatch {
                expected,
                found: bytes.len(),
            });
        }
        let coords = bytes[GRID_HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Self::new(h, w, coords)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }
}

pub fn identity_grid(height: usize, width: usize) -> Result<SamplingGrid> {
    SamplingGrid::identity(height, width)
}

pub fn save_grid(grid: &SamplingGrid, path: impl AsRef<Path>) -> Result<()> {
    grid.save(path)
}

pub fn load_grid(path: impl AsRef<Path>) -> Result<SamplingGrid> {
    SamplingGrid::load(path)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    ImageBuffer::load_png(path)
}

/// Binary object / visibility mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dims(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.width + c]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    pub fn and(&self, other: &Mask) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect(),
        }
    }

    pub fn and_not(&self, other: &Mask) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a && !*b).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(a, b)| !*a || *b)
    }

    /// 0/1 as f64, one plane.
    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            channels: 1,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Loads an 8/16-bit single-channel PNG; any nonzero sample is foreground.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = ImageBuffer::load_png(path)?;
        Ok(Self {
            height: img.height,
            width: img.width,
            data: img.plane(0).iter().map(|&v| v > 0.5).collect(),
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let samples: Vec<u16> = self.data.iter().map(|&m| if m { 255 } else { 0 }).collect();
        write_png(path.as_ref(), self.width, self.height, 1, 8, &samples)
    }
}

macro_rules! scalar_map {
    ($(#[$doc:meta])* $name:ident, $valid:expr, $what:literal) => {
        $(#[$doc])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            height: usize,
            width: usize,
            data: Vec<f32>,
        }

        impl $name {
            pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
                if data.len() != height * width {
                    return Err(Error::dims(format!(
                        "{} {height}x{width} needs {} values, got {}",
                        $what,
                        height * width,
                        data.len()
                    )));
                }
                let valid: fn(f32) -> bool = $valid;
                if let Some(v) = data.iter().find(|&&v| !valid(v)) {
                    return Err(Error::InvalidValue(format!("{} value {v}", $what)));
                }
                Ok(Self { height, width, data })
            }

            pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
                Self::new(height, width, vec![value; height * width])
            }

            pub fn height(&self) -> usize {
                self.height
            }
            pub fn width(&self) -> usize {
                self.width
            }
            pub fn data(&self) -> &[f32] {
                &self.data
            }

            #[inline]
            pub fn get(&self, r: usize, c: usize) -> f32 {
                self.data[r * self.width + c]
            }

            pub fn to_tensor(&self) -> Tensor {
                Tensor {
                    channels: 1,
                    height: self.height,
                    width: self.width,
                    data: self.data.iter().map(|&v| v as f64).collect(),
                }
            }
        }
    };
}

scalar_map!(
    /// Per-pixel confidence in `[0, 1]`.
    ConfidenceMap,
    |v| v.is_finite() && (0.0..=1.0).contains(&v),
    "confidence map"
);

scalar_map!(
    /// Per-pixel non-negative error.
    ErrorMap,
    |v| v.is_finite() && v >= 0.0,
    "error map"
);

impl ConfidenceMap {
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let samples: Vec<u16> = self.data.iter().map(|&v| (v as f64 * 255.0).round() as u16).collect();
        write_png(path.as_ref(), self.width, self.height, 1, 8, &samples)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = ImageBuffer::load_png(path)?;
        Self::new(img.height, img.width, img.plane(0).to_vec())
    }
}

/// One correspondence in pixel units; serialized as `[x_s, y_s, x_t, y_t, visible]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(f32, f32, f32, f32, bool)", into = "(f32, f32, f32, f32, bool)")]
pub struct Keypoint {
    pub x_src: f32,
    pub y_src: f32,
    pub x_tgt: f32,
    pub y_tgt: f32,
    pub visible: bool,
}

impl From<(f32, f32, f32, f32, bool)> for Keypoint {
    fn from(t: (f32, f32, f32, f32, bool)) -> Self {
        Keypoint {
            x_src: t.0,
            y_src: t.1,
            x_tgt: t.2,
            y_tgt: t.3,
            visible: t.4,
        }
    }
}

impl From<Keypoint> for (f32, f32, f32, f32, bool) {
    fn from(k: Keypoint) -> Self {
        (k.x_src, k.y_src, k.x_tgt, k.y_tgt, k.visible)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeypointSet {
    pub points: Vec<Keypoint>,
}

impl KeypointSet {
    pub fn new(points: Vec<Keypoint>) -> Self {
        Self { points }
    }

    pub fn visible(&self) -> impl Iterator<Item = &Keypoint> {
        self.points.iter().filter(|k| k.visible)
    }

    /// Checks that visible points lie inside both images.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let inside = |x: f32, y: f32| x >= 0.0 && y >= 0.0 && x <= (width - 1) as f32 && y <= (height - 1) as f32;
        for k in self.visible() {
            if !(inside(k.x_src, k.y_src) && inside(k.x_tgt, k.y_tgt)) {
                return Err(Error::InvalidValue(format!("keypoint {k:?} outside {height}x{width}")));
            }
        }
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&read_file(path.as_ref())?)?)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }
}

/// A predicted bidirectional pair `(Ĝ_st, Ĝ_ts, Ĉ_s, Ĉ_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub grid_st: SamplingGrid,
    pub grid_ts: SamplingGrid,
    pub conf_s: ConfidenceMap,
    pub conf_t: ConfidenceMap,
}

impl Prediction {
    /// Identity grids with uniform confidence.
    pub fn identity(height: usize, width: usize, confidence: f32) -> Result<Self> {
        Ok(Self {
            grid_st: SamplingGrid::identity(height, width)?,
            grid_ts: SamplingGrid::identity(height, width)?,
            conf_s: ConfidenceMap::filled(height, width, confidence)?,
            conf_t: ConfidenceMap::filled(height, width, confidence)?,
        })
    }

    pub fn height(&self) -> usize {
        self.grid_st.height
    }
    pub fn width(&self) -> usize {
        self.grid_st.width
    }

    /// `(grid_st, grid_ts, conf_s, conf_t)` file paths under `dir`.
    pub fn paths(dir: impl AsRef<Path>, id: &str) -> [std::path::PathBuf; 4] {
        let d = dir.as_ref();
        [
            d.join(format!("{id}_pred_gst.wgrd")),
            d.join(format!("{id}_pred_gts.wgrd")),
            d.join(format!("{id}_conf_s.png")),
            d.join(format!("{id}_conf_t.png")),
        ]
    }

    pub fn save(&self, dir: impl AsRef<Path>, id: &str) -> Result<()> {
        let [a, b, c, d] = Self::paths(dir, id);
        self.grid_st.save(a)?;
        self.grid_ts.save(b)?;
        self.conf_s.save_png(c)?;
        self.conf_t.save_png(d)
    }

    /// Reads a saved prediction; confidences come back quantized to 8 bits.
    pub fn load(dir: impl AsRef<Path>, id: &str) -> Result<Self> {
        let [a, b, c, d] = Self::paths(dir, id);
        Ok(Self {
            grid_st: SamplingGrid::load(a)?,
            grid_ts: SamplingGrid::load(b)?,
            conf_s: ConfidenceMap::load_png(c)?,
            conf_t: ConfidenceMap::load_png(d)?,
        })
    }
}
