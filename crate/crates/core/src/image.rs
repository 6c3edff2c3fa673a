//! Dense interleaved images and the PFM / PPM / PGM interchange formats.
//!
//! PFM files are written little-endian (negative scale) with rows stored
//! bottom-to-top, as the format prescribes. PPM/PGM are 8-bit binary (P6/P5)
//! with rows stored top-to-bottom.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major image with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<T>,
}

pub type Mask = Image<bool>;

impl<T: Clone> Image<T> {
    pub fn filled(width: usize, height: usize, channels: usize, value: T) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn same_size<U>(&self, other: &Image<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    #[inline]
    pub fn pixel(&self, col: usize, row: usize) -> &[T] {
        let i = (row * self.width + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, col: usize, row: usize) -> &mut [T] {
        let i = (row * self.width + col) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Single-channel accessor.
    #[inline]
    pub fn get(&self, col: usize, row: usize) -> T {
        self.data[(row * self.width + col) * self.channels].clone()
    }

    #[inline]
    pub fn set(&mut self, col: usize, row: usize, value: T) {
        self.data[(row * self.width + col) * self.channels] = value;
    }

    /// Copies the `width x height` window starting at (`col0`, `row0`).
    pub fn crop(&self, col0: usize, row0: usize, width: usize, height: usize) -> Result<Self> {
        if col0 + width > self.width || row0 + height > self.height {
            return Err(Error::Shape(format!(
                "crop {width}x{height}+{col0}+{row0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(width * height * self.channels);
        for r in row0..row0 + height {
            let start = (r * self.width + col0) * self.channels;
            data.extend_from_slice(&self.data[start..start + width * self.channels]);
        }
        Ok(Self {
            width,
            height,
            channels: self.channels,
            data,
        })
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        if !self.same_size(other) {
            return Err(Error::Shape("mask sizes differ".into()));
        }
        Ok(Mask {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a && b)
                .collect(),
        })
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Encodes a 1- or 3-channel float image as little-endian PFM.
pub fn encode_pfm(img: &Image<f32>) -> Result<Vec<u8>> {
    let magic = match img.channels() {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::Shape(format!("PFM supports 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{magic}\n{} {}\n-1.0\n", img.width(), img.height()).into_bytes();
    let row_len = img.width() * img.channels();
    for r in (0..img.height()).rev() {
        for v in &img.data()[r * row_len..(r + 1) * row_len] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8], origin: &str) -> Result<Image<f32>> {
    let mut hdr = HeaderReader::new(bytes, origin);
    let channels = match hdr.token()? {
        "Pf" => 1,
        "PF" => 3,
        m => return Err(Error::parse(origin, 1, format!("bad PFM magic `{m}`"))),
    };
    let width = hdr.number::<usize>()?;
    let height = hdr.number::<usize>()?;
    let scale = hdr.number::<f32>()?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::parse(origin, 3, "PFM scale must be nonzero"));
    }
    let body = hdr.body()?;
    let n = width * height * channels;
    if body.len() != n * 4 {
        return Err(Error::parse(
            origin,
            0,
            format!("PFM body has {} bytes, expected {}", body.len(), n * 4),
        ));
    }
    let row_len = width * channels;
    let mut data = vec![0.0f32; n];
    for (k, chunk) in body.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if scale < 0.0 {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let file_row = k / row_len;
        let r = height - 1 - file_row;
        data[r * row_len + k % row_len] = v;
    }
    Image::from_vec(width, height, channels, data)
}

pub fn write_pfm(img: &Image<f32>, path: &Path) -> Result<()> {
    write_file(path, &encode_pfm(img)?)
}

pub fn read_pfm(path: &Path) -> Result<Image<f32>> {
    decode_pfm(&read_file(path)?, &path.display().to_string())
}

/// Encodes 8-bit PPM (3 channels) or PGM (1 channel).
pub fn encode_pnm(img: &Image<u8>) -> Result<Vec<u8>> {
    let magic = match img.channels() {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Shape(format!("PNM supports 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    Ok(out)
}

pub fn decode_pnm(bytes: &[u8], origin: &str) -> Result<Image<u8>> {
    let mut hdr = HeaderReader::new(bytes, origin);
    let channels = match hdr.token()? {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::parse(origin, 1, format!("unsupported PNM magic `{m}`"))),
    };
    let width = hdr.number::<usize>()?;
    let height = hdr.number::<usize>()?;
    let maxval = hdr.number::<u32>()?;
    if maxval != 255 {
        return Err(Error::parse(origin, 0, "only 8-bit PNM (maxval 255) is supported"));
    }
    let body = hdr.body()?;
    Image::from_vec(width, height, channels, body.to_vec())
        .map_err(|_| Error::parse(origin, 0, "PNM body size does not match header"))
}

pub fn write_pnm(img: &Image<u8>, path: &Path) -> Result<()> {
    write_file(path, &encode_pnm(img)?)
}

pub fn read_pnm(path: &Path) -> Result<Image<u8>> {
    decode_pnm(&read_file(path)?, &path.display().to_string())
}

/// Masks are stored as PGM with 255 for set pixels.
pub fn write_mask(mask: &Mask, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_pnm(&Image::from_vec(mask.width(), mask.height(), 1, bytes)?, path)
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = read_pnm(path)?;
    if img.channels() != 1 {
        return Err(Error::parse(path.display().to_string(), 0, "mask must be a PGM"));
    }
    let data = img.data().iter().map(|&v| v >= 128).collect();
    Image::from_vec(img.width(), img.height(), 1, data)
}

/// Quantizes `[0,1]` floats to 8 bits.
pub fn to_u8(img: &Image<f32>) -> Image<u8> {
    let data = img
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Image::from_vec(img.width(), img.height(), img.channels(), data).expect("same shape")
}

/// Whitespace-separated header tokens with `#` comments, as used by the
/// netpbm family. The body starts after exactly one whitespace byte.
struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> HeaderReader<'a> {
    fn new(bytes: &'a [u8], origin: &'a str) -> Self {
        Self {
            bytes,
            pos: 0,
            origin,
        }
    }

    fn token(&mut self) -> Result<&'a str> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(_) => break,
                None => return Err(Error::parse(self.origin, 0, "truncated header")),
            }
        }
        let start = self.pos;
        while self
            .bytes
            .get(self.pos)
            .is_some_and(|b| !b.is_ascii_whitespace())
        {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| Error::parse(self.origin, 0, "non-ASCII header"))
    }

    fn number<T: std::str::FromStr>(&mut self) -> Result<T> {
        let tok = self.token()?;
        tok.parse()
            .map_err(|_| Error::parse(self.origin, 0, format!("bad header value `{tok}`")))
    }

    fn body(self) -> Result<&'a [u8]> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => Ok(&self.bytes[self.pos + 1..]),
            _ => Err(Error::parse(self.origin, 0, "missing separator before data")),
        }
    }
}
