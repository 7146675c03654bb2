//! Images, MNIST IDX ingestion, preprocessing and raster output.

use std::path::Path;

use crate::error::{MtdError, Result};
use crate::scalar::{cast, Scalar};

/// A row-major grid of real intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    /// Builds an image, rejecting a length mismatch or non-finite pixels.
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(MtdError::shape(format!(
                "{}x{} image needs {} pixels, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(MtdError::Numeric(format!("non-finite pixel at index {i}")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn square(side: usize, data: Vec<T>) -> Result<Self> {
        Self::new(side, side, data)
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![T::zero(); width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    /// Side length of a square image.
    pub fn side(&self) -> Result<usize> {
        if self.width == self.height {
            Ok(self.width)
        } else {
            Err(MtdError::shape(format!(
                "expected a square image, got {}x{}",
                self.width, self.height
            )))
        }
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable pixel access. Callers are responsible for keeping values finite.
    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.width + col] = value;
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    /// Frobenius norm.
    pub fn norm(&self) -> T {
        self.norm_sq().sqrt()
    }

    pub fn max(&self) -> T {
        self.data
            .iter()
            .copied()
            .fold(T::neg_infinity(), |a, b| a.max(b))
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scaled(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    /// `self + factor * other`, shapes must agree.
    pub fn axpy(&self, factor: T, other: &Self) -> Result<Self> {
        if !self.same_shape(other) {
            return Err(MtdError::shape("axpy on images of different shape"));
        }
        Ok(Self {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + factor * b)
                .collect(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| cast(v)).collect(),
        }
    }
}

/// How pixel intensities are rescaled after resizing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Normalization {
    /// Divide by the maximum pixel value (no-op for an all-zero image).
    #[default]
    MaxOne,
    /// Divide by the Frobenius norm.
    UnitFrobenius,
    None,
}

/// Preprocessing recipe applied to every dataset image.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub crop_margin: usize,
    pub side: usize,
    pub normalization: Normalization,
}

impl DatasetSpec {
    pub fn new(crop_margin: usize, side: usize) -> Result<Self> {
        if side == 0 {
            return Err(MtdError::Config("target side length must be >= 1".into()));
        }
        Ok(Self {
            crop_margin,
            side,
            normalization: Normalization::MaxOne,
        })
    }

    pub fn with_normalization(mut self, normalization: Normalization) -> Self {
        self.normalization = normalization;
        self
    }
}

const IDX_UBYTE: u8 = 0x08;

struct IdxHeader {
    dims: Vec<usize>,
    payload_offset: usize,
}

fn parse_idx_header(bytes: &[u8]) -> Result<IdxHeader> {
    if bytes.len() < 4 {
        return Err(MtdError::Length {
            expected: 4,
            found: bytes.len(),
        });
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(MtdError::format("IDX magic must start with two zero bytes"));
    }
    if bytes[2] != IDX_UBYTE {
        return Err(MtdError::format(format!(
            "unsupported IDX element type 0x{:02x} (only unsigned bytes)",
            bytes[2]
        )));
    }
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(MtdError::format("IDX file declares zero dimensions"));
    }
    let payload_offset = 4 + 4 * ndims;
    if bytes.len() < payload_offset {
        return Err(MtdError::Length {
            expected: payload_offset,
            found: bytes.len(),
        });
    }
    let dims = (0..ndims)
        .map(|d| {
            let o = 4 + 4 * d;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    Ok(IdxHeader {
        dims,
        payload_offset,
    })
}

/// Parses an IDX image file (magic `0x00000803`) into images scaled to `[0, 1]`.
pub fn parse_idx<T: Scalar>(bytes: &[u8]) -> Result<Vec<Image<T>>> {
    let header = parse_idx_header(bytes)?;
    let (count, rows, cols) = match header.dims[..] {
        [n, r, c] => (n, r, c),
        _ => {
            return Err(MtdError::format(format!(
                "IDX image file must have 3 dimensions, found {}",
                header.dims.len()
            )))
        }
    };
    let per = rows * cols;
    let expected = header.payload_offset + count * per;
    if bytes.len() < expected {
        return Err(MtdError::Length {
            expected,
            found: bytes.len(),
        });
    }
    let scale = T::lit(1.0 / 255.0);
    let payload = &bytes[header.payload_offset..expected];
    Ok(payload
        .chunks_exact(per.max(1))
        .take(count)
        .map(|chunk| Image {
            width: cols,
            height: rows,
            data: chunk.iter().map(|&b| T::lit(b as f64) * scale).collect(),
        })
        .collect())
}

/// Parses an IDX label file (magic `0x00000801`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let header = parse_idx_header(bytes)?;
    let count = match header.dims[..] {
        [n] => n,
        _ => return Err(MtdError::format("IDX label file must have 1 dimension")),
    };
    let expected = header.payload_offset + count;
    if bytes.len() < expected {
        return Err(MtdError::Length {
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes[header.payload_offset..expected].to_vec())
}

/// Crops `spec.crop_margin` pixels from every side, resizes bilinearly
/// (half-pixel centers, edge clamped) to `spec.side`², then normalizes.
pub fn crop_and_resize<T: Scalar>(img: &Image<T>, spec: &DatasetSpec) -> Result<Image<T>> {
    let m = spec.crop_margin;
    if 2 * m >= img.width || 2 * m >= img.height {
        return Err(MtdError::Bounds(format!(
            "crop margin {} leaves no interior in a {}x{} image",
            m, img.width, img.height
        )));
    }
    let (cw, ch) = (img.width - 2 * m, img.height - 2 * m);
    let cropped = Image::from_fn(cw, ch, |r, c| img.get(r + m, c + m));
    let resized = resize_bilinear(&cropped, spec.side, spec.side);
    Ok(normalize(resized, spec.normalization))
}

fn normalize<T: Scalar>(img: Image<T>, mode: Normalization) -> Image<T> {
    let divisor = match mode {
        Normalization::MaxOne => img.max(),
        Normalization::UnitFrobenius => img.norm(),
        Normalization::None => return img,
    };
    if divisor > T::zero() {
        img.scaled(divisor.recip())
    } else {
        img
    }
}

/// Bilinear resampling with `align_corners = false`.
pub fn resize_bilinear<T: Scalar>(img: &Image<T>, width: usize, height: usize) -> Image<T> {
    if img.width == width && img.height == height {
        return img.clone();
    }
    let sy = img.height as f64 / height as f64;
    let sx = img.width as f64 / width as f64;
    let taps = |dst: usize, scale: f64, len: usize| -> (usize, usize, T) {
        let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, T::lit(src - i0 as f64))
    };
    Image::from_fn(width, height, |r, c| {
        let (r0, r1, fy) = taps(r, sy, img.height);
        let (c0, c1, fx) = taps(c, sx, img.width);
        let top = img.get(r0, c0) * (T::one() - fx) + img.get(r0, c1) * fx;
        let bottom = img.get(r1, c0) * (T::one() - fx) + img.get(r1, c1) * fx;
        top * (T::one() - fy) + bottom * fy
    })
}

/// Clips to `[0, 1]` and quantizes to 8 bits, rounding half up.
pub fn quantize<T: Scalar>(value: T) -> u8 {
    let v = value.to_f64_lossy().clamp(0.0, 1.0);
    (v * 255.0 + 0.5).floor() as u8
}

/// Writes an 8-bit grayscale raster; the format follows the extension (`.png` or `.pgm`).
pub fn write_raster<T: Scalar>(img: &Image<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let format = raster_format(path)?;
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    let gray = ::image::GrayImage::from_raw(img.width as u32, img.height as u32, bytes)
        .ok_or_else(|| MtdError::shape("raster buffer size mismatch"))?;
    gray.save_with_format(path, format).map_err(image_err)
}

/// Reads an 8-bit grayscale raster into `[0, 1]` intensities.
pub fn read_raster<T: Scalar>(path: impl AsRef<Path>) -> Result<Image<T>> {
    let decoded = ::image::open(path.as_ref()).map_err(image_err)?.into_luma8();
    let (w, h) = decoded.dimensions();
    let scale = T::lit(1.0 / 255.0);
    Ok(Image {
        width: w as usize,
        height: h as usize,
        data: decoded
            .into_raw()
            .into_iter()
            .map(|b| T::lit(b as f64) * scale)
            .collect(),
    })
}

fn raster_format(path: &Path) -> Result<::image::ImageFormat> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("png") => Ok(::image::ImageFormat::Png),
        Some("pgm") => Ok(::image::ImageFormat::Pnm),
        _ => Err(MtdError::Config(format!(
            "unsupported raster extension for {} (use .png or .pgm)",
            path.display()
        ))),
    }
}

fn image_err(e: ::image::ImageError) -> MtdError {
    match e {
        ::image::ImageError::IoError(io) => MtdError::Io(io),
        other => MtdError::Format(other.to_string()),
    }
}

/// Stacks equally sized images into a grid (`rows` of images, left to right),
/// with `gap` pixels of zero between tiles.
pub fn tile_grid<T: Scalar>(rows: &[Vec<Image<T>>], gap: usize) -> Result<Image<T>> {
    let first = rows
        .iter()
        .flat_map(|r| r.first())
        .next()
        .ok_or_else(|| MtdError::shape("empty panel"))?;
    let (cell_w, cell_h) = (first.width, first.height);
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let width = cols * cell_w + cols.saturating_sub(1) * gap;
    let height = rows.len() * cell_h + rows.len().saturating_sub(1) * gap;
    let mut out = Image::zeros(width, height);
    for (ri, row) in rows.iter().enumerate() {
        for (ci, img) in row.iter().enumerate() {
            if img.width != cell_w || img.height != cell_h {
                return Err(MtdError::shape("panel tiles must share one size"));
            }
            let (oy, ox) = (ri * (cell_h + gap), ci * (cell_w + gap));
            for r in 0..cell_h {
                for c in 0..cell_w {
                    out.set(oy + r, ox + c, img.get(r, c));
                }
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbour enlargement, used to put low-resolution images next to
/// high-resolution ones in a panel.
pub fn upscale_nearest<T: Scalar>(img: &Image<T>, factor: usize) -> Image<T> {
    Image::from_fn(img.width * factor, img.height * factor, |r, c| {
        img.get(r / factor, c / factor)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_bytes(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = vec![0, 0, 0x08, 3];
        for d in [count, rows, cols] {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    #[test]
    fn parses_single_record() {
        let imgs: Vec<Image<f64>> = parse_idx(&idx_bytes(1, 2, 2, &[0, 255, 0, 255])).unwrap();
        assert_eq!(imgs.len(), 1);
        assert_eq!(imgs[0].data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn parses_empty_file() {
        let imgs: Vec<Image<f64>> = parse_idx(&idx_bytes(0, 28, 28, &[])).unwrap();
        assert!(imgs.is_empty());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut bad = idx_bytes(1, 2, 2, &[1, 2, 3, 4]);
        bad[1] = 7;
        assert!(matches!(parse_idx::<f64>(&bad), Err(MtdError::Format(_))));
        let short = idx_bytes(2, 2, 2, &[1, 2, 3, 4, 5]);
        assert!(matches!(
            parse_idx::<f64>(&short),
            Err(MtdError::Length { .. })
        ));
        assert!(matches!(
            parse_idx::<f64>(&[0, 0]),
            Err(MtdError::Length { .. })
        ));
    }

    #[test]
    fn labels_parse() {
        let mut b = vec![0, 0, 0x08, 1];
        b.extend_from_slice(&3u32.to_be_bytes());
        b.extend_from_slice(&[7, 2, 1]);
        assert_eq!(parse_idx_labels(&b).unwrap(), vec![7, 2, 1]);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Image::filled(28, 28, 0.4f64);
        let spec = DatasetSpec::new(3, 14)
            .unwrap()
            .with_normalization(Normalization::None);
        let out = crop_and_resize(&img, &spec).unwrap();
        assert_eq!((out.width(), out.height()), (14, 14));
        assert!(out.data().iter().all(|&v| (v - 0.4).abs() < 1e-15));
    }

    /// Independent bilinear oracle: explicit weights over the four neighbours
    /// of the half-pixel source coordinate, written without the clamp helper.
    fn bilinear_oracle(src: &[f64], n: usize, m: usize) -> Vec<f64> {
        let scale = n as f64 / m as f64;
        let coord = |d: usize| ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let mut out = vec![0.0; m * m];
        for r in 0..m {
            for c in 0..m {
                let (y, x) = (coord(r), coord(c));
                let mut acc = 0.0;
                for sy in 0..n {
                    for sx in 0..n {
                        let wy = (1.0 - (y - sy as f64).abs()).max(0.0);
                        let wx = (1.0 - (x - sx as f64).abs()).max(0.0);
                        acc += wy * wx * src[sy * n + sx];
                    }
                }
                out[r * m + c] = acc;
            }
        }
        out
    }

    #[test]
    fn checkerboard_downsample_matches_oracle() {
        let board = Image::from_fn(4, 4, |r, c| ((r + c) % 2) as f64);
        let spec = DatasetSpec::new(0, 2)
            .unwrap()
            .with_normalization(Normalization::None);
        let out = crop_and_resize(&board, &spec).unwrap();
        let expected = bilinear_oracle(board.data(), 4, 2);
        for (a, b) in out.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        // Each output pixel straddles one 2x2 checker block.
        assert!(expected.iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn upsample_matches_oracle() {
        let src = Image::from_fn(3, 3, |r, c| (r * 3 + c) as f64 / 8.0);
        let out = resize_bilinear(&src, 7, 7);
        let expected = bilinear_oracle(src.data(), 3, 7);
        for (a, b) in out.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_is_idempotent_at_target_size() {
        let img = Image::from_fn(6, 6, |r, c| ((r * 7 + c * 3) % 5) as f64 / 4.0);
        let spec = DatasetSpec::new(0, 6).unwrap();
        let once = crop_and_resize(&img, &spec).unwrap();
        let twice = crop_and_resize(&once, &spec).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn crop_exceeding_bounds_fails() {
        let img = Image::<f64>::zeros(4, 4);
        let spec = DatasetSpec::new(2, 2).unwrap();
        assert!(matches!(
            crop_and_resize(&img, &spec),
            Err(MtdError::Bounds(_))
        ));
    }

    #[test]
    fn quantization_rounds_half_up_and_clips() {
        assert_eq!(quantize(0.5f64), 128);
        assert_eq!(quantize(0.0f64), 0);
        assert_eq!(quantize(1.0f64), 255);
        assert_eq!(quantize(-3.0f64), 0);
        assert_eq!(quantize(7.0f64), 255);
    }

    #[test]
    fn raster_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(5, 3, |r, c| (r * 5 + c) as f64 / 14.0);
        for name in ["a.png", "a.pgm"] {
            let p = dir.path().join(name);
            write_raster(&img, &p).unwrap();
            let back: Image<f64> = read_raster(&p).unwrap();
            assert_eq!((back.width(), back.height()), (5, 3));
            for (a, b) in img.data().iter().zip(back.data()) {
                assert_eq!(quantize(*a), quantize(*b));
            }
        }
        let black = dir.path().join("black.png");
        write_raster(&Image::<f64>::zeros(2, 2), &black).unwrap();
        let back: Image<f64> = read_raster(&black).unwrap();
        assert!(back.data().iter().all(|&v| v == 0.0));
        let white = dir.path().join("white.pgm");
        write_raster(&Image::filled(2, 2, 1.0f64), &white).unwrap();
        let back: Image<f64> = read_raster(&white).unwrap();
        assert!(back.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let img = Image::<f64>::zeros(2, 2);
        let err = write_raster(&img, "/nonexistent-dir/x/y.png").unwrap_err();
        assert!(matches!(err, MtdError::Io(_)), "{err:?}");
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Image::new(1, 1, vec![f64::NAN]).is_err());
        assert!(Image::new(2, 1, vec![0.0f64]).is_err());
    }
}
