//! Hyperspectral cube storage, spectral distances and the HSC1 file format.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Magic bytes of the cube format.
pub const CUBE_MAGIC: &[u8; 4] = b"HSC1";
/// Magic bytes of the per-pixel label raster.
pub const LABEL_MAGIC: &[u8; 4] = b"HSL1";

/// Norm below which a spectrum is considered to have no direction.
pub const MIN_SAM_NORM: f64 = 1e-12;

/// A reflectance cube stored channel-last: `data[(y * width + x) * channels + band]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    width: usize,
    height: usize,
    channels: usize,
    wavelengths: Vec<f32>,
    data: Vec<f32>,
}

impl HsiCube {
    /// Builds a cube, clamping values into `[0, 1]`.
    ///
    /// Returns the cube together with the number of clamped values.
    pub fn new(
        width: usize,
        height: usize,
        wavelengths: Vec<f32>,
        mut data: Vec<f32>,
    ) -> Result<(Self, usize)> {
        let channels = wavelengths.len();
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::Config(format!(
                "cube dimensions must be positive, got {width}x{height}x{channels}"
            )));
        }
        let expected = width
            .checked_mul(height)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| Error::Config("cube dimensions overflow".into()))?;
        if data.len() != expected {
            return Err(Error::shape(
                "HsiCube::new",
                format!("expected {expected} values, got {}", data.len()),
            ));
        }
        if let Some(i) = wavelengths.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::Config(format!(
                "wavelengths must be strictly increasing (index {})",
                i + 1
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite reflectance at index {i}")));
        }
        let clamped = clamp_unit(&mut data);
        Ok((
            HsiCube {
                width,
                height,
                channels,
                wavelengths,
                data,
            },
            clamped,
        ))
    }

    /// Evenly spaced wavelength axis between `first` and `last` nm.
    pub fn linear_wavelengths(channels: usize, first: f32, last: f32) -> Vec<f32> {
        if channels == 1 {
            return vec![first];
        }
        let step = (last - first) / (channels - 1) as f32;
        (0..channels).map(|i| first + step * i as f32).collect()
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

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn wavelengths(&self) -> &[f32] {
        &self.wavelengths
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Spectrum of the pixel with flat index `p = y * width + x`.
    #[inline]
    pub fn spectrum(&self, p: usize) -> &[f32] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    #[inline]
    pub fn spectrum_at(&self, x: usize, y: usize) -> &[f32] {
        self.spectrum(y * self.width + x)
    }

    /// Single band as a `width * height` image.
    pub fn band(&self, band: usize) -> Vec<f32> {
        (0..self.pixel_count())
            .map(|p| self.data[p * self.channels + band])
            .collect()
    }
}

fn clamp_unit(data: &mut [f32]) -> usize {
    let mut clamped = 0;
    for v in data.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
            clamped += 1;
        } else if *v > 1.0 {
            *v = 1.0;
            clamped += 1;
        }
    }
    clamped
}

/// An owned spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum(pub Vec<f32>);

impl Spectrum {
    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

impl From<Vec<f32>> for Spectrum {
    fn from(v: Vec<f32>) -> Self {
        Spectrum(v)
    }
}

impl AsRef<[f32]> for Spectrum {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

pub(crate) fn norm(a: &[f32]) -> f64 {
    a.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn check_len(op: &'static str, a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(
            op,
            format!("spectra have lengths {} and {}", a.len(), b.len()),
        ));
    }
    Ok(())
}

/// Spectral angle between two spectra in radians, in `[0, pi]`.
pub fn sam_distance(a: &[f32], b: &[f32]) -> Result<f64> {
    check_len("sam_distance", a, b)?;
    let na = norm(a);
    if na < MIN_SAM_NORM {
        return Err(Error::Domain(
            "sam_distance: first operand has zero norm".into(),
        ));
    }
    let nb = norm(b);
    if nb < MIN_SAM_NORM {
        return Err(Error::Domain(
            "sam_distance: second operand has zero norm".into(),
        ));
    }
    Ok(angle_from(dot(a, b), na, nb))
}

#[inline]
pub(crate) fn angle_from(dot: f64, na: f64, nb: f64) -> f64 {
    (dot / (na * nb)).clamp(-1.0, 1.0).acos()
}

/// Euclidean distance between two spectra.
pub fn l2_distance(a: &[f32], b: &[f32]) -> Result<f64> {
    check_len("l2_distance", a, b)?;
    Ok(l2_unchecked(a, b))
}

#[inline]
pub(crate) fn l2_unchecked(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Spectral dissimilarity used for clustering and quality metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpectralDistance {
    Sam,
    L2,
}

impl std::str::FromStr for SpectralDistance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sam" => Ok(SpectralDistance::Sam),
            "l2" => Ok(SpectralDistance::L2),
            other => Err(Error::Config(format!("unknown distance '{other}'"))),
        }
    }
}

/// Encodes a cube as HSC1 bytes.
pub fn encode_cube(cube: &HsiCube) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * (cube.channels + cube.data.len()));
    out.extend_from_slice(CUBE_MAGIC);
    for d in [cube.width, cube.height, cube.channels] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for w in &cube.wavelengths {
        out.extend_from_slice(&w.to_le_bytes());
    }
    for v in &cube.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Little-endian cursor that reports byte offsets in its errors.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != magic {
            return Err(Error::format(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        Ok(())
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.bytes.len() as u64,
                format!(
                    "truncated {what}: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            )),
        }
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| Error::format(self.offset(), format!("{what} size overflow")))?;
        let b = self.take(bytes, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub(crate) fn finish(&self, what: &str) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.offset(),
                format!(
                    "{} trailing bytes after {what}",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        Ok(())
    }
}

/// Product of dimensions, failing with a format error on overflow.
pub(crate) fn checked_volume(dims: &[usize], offset: u64) -> Result<usize> {
    dims.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d)
            .ok_or_else(|| Error::format(offset, format!("dimension overflow in {dims:?}")))
    })
}

/// Decodes HSC1 bytes. Returns the cube and how many values were clamped into `[0, 1]`.
pub fn decode_cube(bytes: &[u8]) -> Result<(HsiCube, usize)> {
    let mut r = Reader::new(bytes);
    r.magic(CUBE_MAGIC)?;
    let width = r.u32("width")? as usize;
    let height = r.u32("height")? as usize;
    let channels = r.u32("channels")? as usize;
    if width == 0 || height == 0 || channels == 0 {
        return Err(Error::format(4, "zero dimension in header"));
    }
    let volume = checked_volume(&[width, height, channels], 4)?;
    if volume.checked_mul(4).is_none() {
        return Err(Error::format(4, "payload size overflow"));
    }
    let wl_offset = r.offset();
    let wavelengths = r.f32s(channels, "wavelengths")?;
    if let Some(i) = wavelengths
        .windows(2)
        .position(|w| !(w[1] > w[0]) || !w[1].is_finite())
    {
        return Err(Error::format(
            wl_offset + 4 * (i as u64 + 1),
            "wavelengths not strictly increasing",
        ));
    }
    let data_offset = r.offset();
    let data = r.f32s(volume, "payload")?;
    r.finish("payload")?;
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(
            data_offset + 4 * i as u64,
            "non-finite reflectance",
        ));
    }
    let (cube, clamped) = HsiCube::new(width, height, wavelengths, data)?;
    if clamped > 0 {
        log::warn!("clamped {clamped} reflectance values into [0, 1]");
    }
    Ok((cube, clamped))
}

pub fn save_cube(cube: &HsiCube, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_cube(cube))
}

/// Loads an HSC1 file. The second value counts values clamped into `[0, 1]`.
pub fn load_cube(path: impl AsRef<Path>) -> Result<(HsiCube, usize)> {
    decode_cube(&fs::read(path)?)
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.flush()?;
    drop(f);
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Per-pixel class raster (u8), stored as `HSL1` + u32 width + u32 height + payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.data.len());
        out.extend_from_slice(LABEL_MAGIC);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(LABEL_MAGIC)?;
        let width = r.u32("width")? as usize;
        let height = r.u32("height")? as usize;
        let n = checked_volume(&[width, height], 4)?;
        let data = r.take(n, "label payload")?.to_vec();
        r.finish("label payload")?;
        Ok(LabelMap {
            width,
            height,
            data,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.encode())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}
