//! Raster types shared by every stage of the pipeline, alpha compositing,
//! resampling and 8-bit PNG I/O.
//!
//! All rasters are row-major. [`Image`] stores interleaved RGB. Every
//! constructor clamps values into `[0, 1]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved RGB raster with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

/// Single-channel transparency raster with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaMask {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScribbleLabel {
    Background,
    Foreground,
    Unlabeled,
}

impl ScribbleLabel {
    /// Target alpha of an annotated pixel.
    pub fn target(self) -> Option<f64> {
        match self {
            ScribbleLabel::Background => Some(0.0),
            ScribbleLabel::Foreground => Some(1.0),
            ScribbleLabel::Unlabeled => None,
        }
    }

    pub fn to_byte(self) -> u8 {
        match self {
            ScribbleLabel::Background => 0,
            ScribbleLabel::Unlabeled => 128,
            ScribbleLabel::Foreground => 255,
        }
    }

    pub fn from_byte(v: u8) -> Option<Self> {
        match v {
            0 => Some(ScribbleLabel::Background),
            128 => Some(ScribbleLabel::Unlabeled),
            255 => Some(ScribbleLabel::Foreground),
            _ => None,
        }
    }
}

/// Sparse user annotation. The annotated set is every non-`Unlabeled` pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScribbleMap {
    width: usize,
    height: usize,
    labels: Vec<ScribbleLabel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrimapLabel {
    Background,
    Foreground,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trimap {
    width: usize,
    height: usize,
    labels: Vec<TrimapLabel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleMode {
    Bilinear,
    Nearest,
}

fn check_len(width: usize, height: usize, channels: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument(format!(
            "raster dimensions must be nonzero, got {width}x{height}"
        )));
    }
    if width * height * channels != len {
        return Err(Error::InvalidArgument(format!(
            "data length {len} does not match {width}x{height}x{channels}"
        )));
    }
    Ok(())
}

#[inline]
fn clamp01(v: f64) -> f64 {
    // NaN maps to 0 so the [0, 1] invariant holds unconditionally.
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

impl Image {
    pub fn from_vec(width: usize, height: usize, mut data: Vec<f64>) -> Result<Self> {
        check_len(width, height, 3, data.len())?;
        data.iter_mut().for_each(|v| *v = clamp01(*v));
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self::from_vec(width, height, data)
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self::from_vec(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Planar copy of one channel.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }

    pub fn resample(&self, new_width: usize, new_height: usize, mode: ResampleMode) -> Result<Self> {
        let data = resample_interleaved(
            &self.data,
            self.width,
            self.height,
            3,
            new_width,
            new_height,
            mode,
        )?;
        Self::from_vec(new_width, new_height, data)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let raw = RawPng::read_file(path.as_ref())?;
        raw.into_image()
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        RawPng::decode(bytes, "<memory>")?.into_image()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        encode_png(self.width, self.height, png::ColorType::Rgb, &self.to_bytes())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.encode_png()?)
    }
}

impl AlphaMask {
    pub fn from_vec(width: usize, height: usize, mut data: Vec<f64>) -> Result<Self> {
        check_len(width, height, 1, data.len())?;
        data.iter_mut().for_each(|v| *v = clamp01(*v));
        Ok(AlphaMask {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::from_vec(width, height, vec![value; width * height])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::from_vec(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        AlphaMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| clamp01(f(v))).collect(),
        }
    }

    pub fn resample(&self, new_width: usize, new_height: usize, mode: ResampleMode) -> Result<Self> {
        let data = resample_interleaved(
            &self.data,
            self.width,
            self.height,
            1,
            new_width,
            new_height,
            mode,
        )?;
        Self::from_vec(new_width, new_height, data)
    }

    /// Value after an 8-bit save/load cycle.
    pub fn quantized(&self) -> Self {
        self.map(|v| quantize(v) as f64 / 255.0)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        RawPng::read_file(path.as_ref())?.into_mask()
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        RawPng::decode(bytes, "<memory>")?.into_mask()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        encode_png(
            self.width,
            self.height,
            png::ColorType::Grayscale,
            &self.to_bytes(),
        )
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.encode_png()?)
    }
}

impl ScribbleMap {
    pub fn new(width: usize, height: usize, labels: Vec<ScribbleLabel>) -> Result<Self> {
        check_len(width, height, 1, labels.len())?;
        Ok(ScribbleMap {
            width,
            height,
            labels,
        })
    }

    pub fn unlabeled(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![ScribbleLabel::Unlabeled; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn labels(&self) -> &[ScribbleLabel] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> ScribbleLabel {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, label: ScribbleLabel) {
        self.labels[y * self.width + x] = label;
    }

    /// Number of annotated pixels, `|S|`.
    pub fn annotated_count(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| **l != ScribbleLabel::Unlabeled)
            .count()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.labels.iter().map(|l| l.to_byte()).collect()
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        check_len(width, height, 1, bytes.len())?;
        let labels = bytes
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                ScribbleLabel::from_byte(v).ok_or(Error::ScribbleValue {
                    value: v,
                    x: i % width,
                    y: i / width,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(width, height, labels)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        RawPng::read_file(path.as_ref())?.into_scribbles()
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        RawPng::decode(bytes, "<memory>")?.into_scribbles()
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        encode_png(
            self.width,
            self.height,
            png::ColorType::Grayscale,
            &self.to_bytes(),
        )
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.encode_png()?)
    }
}

impl Trimap {
    pub fn new(width: usize, height: usize, labels: Vec<TrimapLabel>) -> Result<Self> {
        check_len(width, height, 1, labels.len())?;
        Ok(Trimap {
            width,
            height,
            labels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn labels(&self) -> &[TrimapLabel] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> TrimapLabel {
        self.labels[y * self.width + x]
    }

    /// Per-pixel membership of the Unknown band, usable as a metric region.
    pub fn unknown_region(&self) -> Vec<bool> {
        self.labels
            .iter()
            .map(|l| *l == TrimapLabel::Unknown)
            .collect()
    }

    pub fn unknown_count(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| **l == TrimapLabel::Unknown)
            .count()
    }

    /// Grayscale encoding 0 / 128 / 255 for background / unknown / foreground.
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let bytes: Vec<u8> = self
            .labels
            .iter()
            .map(|l| match l {
                TrimapLabel::Background => 0,
                TrimapLabel::Unknown => 128,
                TrimapLabel::Foreground => 255,
            })
            .collect();
        encode_png(self.width, self.height, png::ColorType::Grayscale, &bytes)
    }
}

/// `α·F + (1 − α)·B` per channel, clamped to `[0, 1]`.
pub fn composite(fg: &Image, bg: &Image, alpha: &AlphaMask) -> Result<Image> {
    if fg.dims() != bg.dims() {
        return Err(Error::dims(fg.dims(), bg.dims()));
    }
    if fg.dims() != alpha.dims() {
        return Err(Error::dims(fg.dims(), alpha.dims()));
    }
    let mut data = Vec::with_capacity(fg.data.len());
    for (i, &a) in alpha.data.iter().enumerate() {
        for c in 0..3 {
            let k = i * 3 + c;
            data.push(a * fg.data[k] + (1.0 - a) * bg.data[k]);
        }
    }
    Image::from_vec(fg.width, fg.height, data)
}

/// Round-half-up 8-bit quantization of a value in `[0, 1]`.
#[inline]
pub fn quantize(v: f64) -> u8 {
    (clamp01(v) * 255.0 + 0.5).floor() as u8
}

/// Source taps along one axis: output index `o` reads
/// `w0 * src[i0] + w1 * src[i1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct AxisTap {
    pub i0: usize,
    pub i1: usize,
    pub w0: f64,
    pub w1: f64,
}

/// Bilinear taps sample at pixel centers with edge clamping; nearest taps
/// pick the source pixel containing the output center.
pub(crate) fn axis_taps(n_in: usize, n_out: usize, mode: ResampleMode) -> Vec<AxisTap> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| match mode {
            ResampleMode::Nearest => {
                let i = (((o as f64 + 0.5) * scale).floor() as usize).min(n_in - 1);
                AxisTap {
                    i0: i,
                    i1: i,
                    w0: 1.0,
                    w1: 0.0,
                }
            }
            ResampleMode::Bilinear => {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                let t = s - i0 as f64;
                AxisTap {
                    i0,
                    i1,
                    w0: 1.0 - t,
                    w1: t,
                }
            }
        })
        .collect()
}

/// Resample an interleaved raster of `channels` channels.
pub(crate) fn resample_interleaved(
    src: &[f64],
    width: usize,
    height: usize,
    channels: usize,
    new_width: usize,
    new_height: usize,
    mode: ResampleMode,
) -> Result<Vec<f64>> {
    if new_width == 0 || new_height == 0 {
        return Err(Error::InvalidArgument(format!(
            "resample target must be nonzero, got {new_width}x{new_height}"
        )));
    }
    let xt = axis_taps(width, new_width, mode);
    let yt = axis_taps(height, new_height, mode);
    let mut out = Vec::with_capacity(new_width * new_height * channels);
    for ty in &yt {
        for tx in &xt {
            for c in 0..channels {
                let at = |y: usize, x: usize| src[(y * width + x) * channels + c];
                let v = if mode == ResampleMode::Nearest {
                    at(ty.i0, tx.i0)
                } else {
                    let top = tx.w0 * at(ty.i0, tx.i0) + tx.w1 * at(ty.i0, tx.i1);
                    let bot = tx.w0 * at(ty.i1, tx.i0) + tx.w1 * at(ty.i1, tx.i1);
                    ty.w0 * top + ty.w1 * bot
                };
                out.push(v);
            }
        }
    }
    Ok(out)
}

struct RawPng {
    source: String,
    width: usize,
    height: usize,
    color: png::ColorType,
    bytes: Vec<u8>,
}

impl RawPng {
    fn read_file(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::decode_reader(BufReader::new(file), &path.display().to_string())
    }

    fn decode(bytes: &[u8], source: &str) -> Result<Self> {
        Self::decode_reader(Cursor::new(bytes), source)
    }

    fn decode_reader<R: std::io::BufRead + std::io::Seek>(r: R, source: &str) -> Result<Self> {
        let decode_err = |e| Error::PngDecode {
            path: source.to_string(),
            source: e,
        };
        let mut reader = png::Decoder::new(r).read_info().map_err(decode_err)?;
        let size = reader.output_buffer_size().ok_or_else(|| Error::UnsupportedPng {
            path: source.to_string(),
            reason: "image too large".into(),
        })?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(decode_err)?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(Error::UnsupportedPng {
                path: source.to_string(),
                reason: format!("bit depth {:?}, expected 8", info.bit_depth),
            });
        }
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::Rgb => 3,
            other => {
                return Err(Error::UnsupportedPng {
                    path: source.to_string(),
                    reason: format!("color type {other:?}, expected grayscale or rgb"),
                })
            }
        };
        let (w, h) = (info.width as usize, info.height as usize);
        let mut bytes = Vec::with_capacity(w * h * channels);
        for row in buf.chunks(info.line_size).take(h) {
            bytes.extend_from_slice(&row[..w * channels]);
        }
        Ok(RawPng {
            source: source.to_string(),
            width: w,
            height: h,
            color: info.color_type,
            bytes,
        })
    }

    fn expect(&self, color: png::ColorType) -> Result<()> {
        if self.color != color {
            return Err(Error::UnsupportedPng {
                path: self.source.clone(),
                reason: format!("color type {:?}, expected {color:?}", self.color),
            });
        }
        Ok(())
    }

    fn into_image(self) -> Result<Image> {
        self.expect(png::ColorType::Rgb)?;
        let data = self.bytes.iter().map(|&b| b as f64 / 255.0).collect();
        Image::from_vec(self.width, self.height, data)
    }

    fn into_mask(self) -> Result<AlphaMask> {
        self.expect(png::ColorType::Grayscale)?;
        let data = self.bytes.iter().map(|&b| b as f64 / 255.0).collect();
        AlphaMask::from_vec(self.width, self.height, data)
    }

    fn into_scribbles(self) -> Result<ScribbleMap> {
        self.expect(png::ColorType::Grayscale)?;
        ScribbleMap::from_bytes(self.width, self.height, &self.bytes)
    }
}

pub(crate) fn encode_png(
    width: usize,
    height: usize,
    color: png::ColorType,
    bytes: &[u8],
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(bytes)?;
        writer.finish()?;
    }
    Ok(out)
}

/// Write through a sibling temp file and rename, so readers never see a
/// partially written file.
pub fn write_file_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = match dir {
        Some(d) => d.join(format!(".{}.tmp", name.to_string_lossy())),
        None => Path::new(&format!(".{}.tmp", name.to_string_lossy())).to_path_buf(),
    };
    {
        let f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(f);
        w.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        w.into_inner()
            .map_err(|e| Error::io(&tmp, e.into_error()))?
            .sync_all()
            .map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rgb(w: usize, h: usize, seed: u64) -> Image {
        let mut s = seed;
        Image::from_fn(w, h, |_, _| {
            let mut next = || {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64
            };
            [next(), next(), next()]
        })
        .unwrap()
    }

    #[test]
    fn constructors_clamp() {
        let img = Image::from_vec(1, 1, vec![-0.5, 0.5, 1.5]).unwrap();
        assert_eq!(img.data(), &[0.0, 0.5, 1.0]);
        let m = AlphaMask::from_vec(2, 1, vec![f64::NAN, 2.0]).unwrap();
        assert_eq!(m.data(), &[0.0, 1.0]);
        assert!(Image::from_vec(2, 2, vec![0.0; 5]).is_err());
        assert!(AlphaMask::from_vec(0, 2, vec![]).is_err());
    }

    #[test]
    fn composite_identities() {
        let f = rgb(5, 4, 1);
        let b = rgb(5, 4, 2);
        let zero = AlphaMask::filled(5, 4, 0.0).unwrap();
        let one = AlphaMask::filled(5, 4, 1.0).unwrap();
        assert_eq!(composite(&f, &b, &zero).unwrap(), b);
        assert_eq!(composite(&f, &b, &one).unwrap(), f);
    }

    #[test]
    fn composite_quarter_alpha() {
        let f = Image::filled(1, 1, [1.0; 3]).unwrap();
        let b = Image::filled(1, 1, [0.0; 3]).unwrap();
        let a = AlphaMask::filled(1, 1, 0.25).unwrap();
        assert_eq!(composite(&f, &b, &a).unwrap().data(), &[0.25, 0.25, 0.25]);
    }

    #[test]
    fn composite_rejects_mismatch() {
        let f = rgb(4, 4, 1);
        let b = rgb(4, 3, 2);
        let a = AlphaMask::filled(4, 4, 0.5).unwrap();
        assert!(matches!(composite(&f, &b, &a), Err(Error::Dimension { .. })));
    }

    #[test]
    fn nearest_identity_is_bit_exact() {
        let img = rgb(7, 5, 3);
        assert_eq!(img.resample(7, 5, ResampleMode::Nearest).unwrap(), img);
    }

    #[test]
    fn constant_stays_constant() {
        let m = AlphaMask::filled(5, 3, 0.3).unwrap();
        for mode in [ResampleMode::Bilinear, ResampleMode::Nearest] {
            let r = m.resample(11, 2, mode).unwrap();
            assert!(r.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        }
    }

    #[test]
    fn bilinear_two_to_four() {
        // centers map to s = 0.5·o − 0.25: −0.25→0, 0.25, 0.75, 1.25→1.
        let m = AlphaMask::from_vec(2, 1, vec![0.0, 1.0]).unwrap();
        let up = m.resample(4, 1, ResampleMode::Bilinear).unwrap();
        assert_eq!(up.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn resample_rejects_zero() {
        let m = AlphaMask::filled(2, 2, 0.0).unwrap();
        assert!(m.resample(0, 2, ResampleMode::Nearest).is_err());
    }

    #[test]
    fn mask_png_round_half_up() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        AlphaMask::from_vec(3, 1, vec![0.0, 0.5, 1.0])
            .unwrap()
            .save_png(&p)
            .unwrap();
        let back = AlphaMask::load_png(&p).unwrap();
        assert_eq!(back.data(), &[0.0, 128.0 / 255.0, 1.0]);
    }

    #[test]
    fn image_png_within_one_level() {
        let img = rgb(6, 5, 9);
        let back = Image::decode_png(&img.encode_png().unwrap()).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn scribble_png_rejects_unknown_value() {
        let bytes = encode_png(2, 1, png::ColorType::Grayscale, &[128, 37]).unwrap();
        let err = ScribbleMap::decode_png(&bytes).unwrap_err();
        assert!(matches!(err, Error::ScribbleValue { value: 37, .. }));
        assert!(err.to_string().contains("37"));
    }

    #[test]
    fn all_unlabeled_scribbles_have_empty_set() {
        let bytes = encode_png(4, 3, png::ColorType::Grayscale, &[128; 12]).unwrap();
        let s = ScribbleMap::decode_png(&bytes).unwrap();
        assert_eq!(s.annotated_count(), 0);
    }

    #[test]
    fn wrong_color_type_is_rejected() {
        let img = rgb(2, 2, 1);
        assert!(AlphaMask::decode_png(&img.encode_png().unwrap()).is_err());
        assert!(Image::decode_png(b"not a png").is_err());
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_file_atomic(&p, b"one").unwrap();
        write_file_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn unit() -> impl Strategy<Value = f64> {
            0.0f64..=1.0
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(128))]

            #[test]
            fn composite_is_exact_at_binary_alpha(
                fg in proptest::collection::vec(unit(), 12),
                bg in proptest::collection::vec(unit(), 12),
                bits in proptest::collection::vec(any::<bool>(), 4),
            ) {
                let f = Image::from_vec(2, 2, fg).unwrap();
                let b = Image::from_vec(2, 2, bg).unwrap();
                let a = AlphaMask::from_vec(2, 2, bits.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()).unwrap();
                let out = composite(&f, &b, &a).unwrap();
                for i in 0..4 {
                    let src = if bits[i] { &f } else { &b };
                    prop_assert_eq!(&out.data()[3 * i..3 * i + 3], &src.data()[3 * i..3 * i + 3]);
                }
            }

            #[test]
            fn composite_monotone_in_alpha(lo in unit(), hi in unit(), a1 in unit(), a2 in unit()) {
                let (fv, bv) = (lo.max(hi), lo.min(hi));
                let f = Image::filled(1, 1, [fv, fv, fv]).unwrap();
                let b = Image::filled(1, 1, [bv, bv, bv]).unwrap();
                let (x, y) = (a1.min(a2), a1.max(a2));
                let cx = composite(&f, &b, &AlphaMask::filled(1, 1, x).unwrap()).unwrap();
                let cy = composite(&f, &b, &AlphaMask::filled(1, 1, y).unwrap()).unwrap();
                for c in 0..3 {
                    prop_assert!(cx.data()[c] <= cy.data()[c]);
                }
            }

            #[test]
            fn scribble_png_round_trip(labels in proptest::collection::vec(0u8..3, 35)) {
                let labels: Vec<ScribbleLabel> = labels
                    .iter()
                    .map(|&v| [ScribbleLabel::Background, ScribbleLabel::Unlabeled, ScribbleLabel::Foreground][v as usize])
                    .collect();
                let m = ScribbleMap::new(7, 5, labels).unwrap();
                prop_assert_eq!(ScribbleMap::decode_png(&m.encode_png().unwrap()).unwrap(), m);
            }

            #[test]
            fn nearest_preserves_value_set(
                vals in proptest::collection::vec(prop_oneof![Just(0.0), Just(0.25), Just(1.0)], 12),
                nw in 1usize..9,
                nh in 1usize..9,
            ) {
                let m = AlphaMask::from_vec(4, 3, vals.clone()).unwrap();
                let r = m.resample(nw, nh, ResampleMode::Nearest).unwrap();
                for v in r.data() {
                    prop_assert!(vals.contains(v));
                }
            }
        }
    }

}
