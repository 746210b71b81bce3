//! Binary file formats.
//!
//! All multi-byte fields are little-endian except inside PGM (ASCII header)
//! and MNIST IDX (big-endian, handled in [`crate::data`]).
//!
//! * Sinogram: `"SINO"`, u32 version, u32 angle count, u32 bins, f64 pitch,
//!   f64 angles, f64 values row-major.
//! * Image: `"IMGG"`, u32 version, u32 n, f64 pitch, u8 domain
//!   (0 normalized, 1 Hounsfield), f64 values row-major.
//! * Weight container: 4-byte magic (`"AMAP"` weights, `"AOPT"` optimizer
//!   state), u32 version, u32 n, u32 input_len, u32 dense count, u32 dense
//!   widths, u32 conv count, (u32 filters, u32 kh, u32 kw) per conv, u32
//!   tensor count, then per tensor: u16 name length, name bytes, u8 rank, u32
//!   dims, f64 data.
//! * PGM: binary `P5` with maxval 255.

use std::path::Path;

use crate::error::{Error, Result};
use crate::radon::{Domain, ImageGrid, Sinogram};
use crate::tensor::Tensor;

pub const SINOGRAM_MAGIC: &[u8; 4] = b"SINO";
pub const IMAGE_MAGIC: &[u8; 4] = b"IMGG";
pub const WEIGHTS_MAGIC: &[u8; 4] = b"AMAP";
pub const OPTIMIZER_MAGIC: &[u8; 4] = b"AOPT";
pub const FORMAT_VERSION: u32 = 1;

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
    kind: &'static str,
}

impl<'b> Reader<'b> {
    fn new(bytes: &'b [u8], kind: &'static str) -> Self {
        Reader { bytes, pos: 0, kind }
    }

    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.kind, format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != expected {
            return Err(Error::format(
                self.kind,
                format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(got), String::from_utf8_lossy(expected)),
            ));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(Error::format(self.kind, format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let len = count
            .checked_mul(8)
            .ok_or_else(|| Error::format(self.kind, "length overflow"))?;
        let raw = self.take(len)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.kind,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn as_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} exceeds u32")))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes `bytes`, creating parent directories as needed.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_sinogram(sino: &Sinogram) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(24 + 8 * (sino.angles_deg().len() + sino.values().len()));
    out.extend_from_slice(SINOGRAM_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, as_u32(sino.angles_deg().len(), "angle count")?);
    put_u32(&mut out, as_u32(sino.bins(), "bin count")?);
    out.extend_from_slice(&sino.pitch_mm().to_le_bytes());
    put_f64s(&mut out, sino.angles_deg());
    put_f64s(&mut out, sino.values());
    Ok(out)
}

pub fn decode_sinogram(bytes: &[u8]) -> Result<Sinogram> {
    let mut r = Reader::new(bytes, "sinogram");
    r.magic(SINOGRAM_MAGIC)?;
    r.version()?;
    let angles = r.u32()? as usize;
    let bins = r.u32()? as usize;
    let pitch = r.f64()?;
    let angles_deg = r.f64s(angles)?;
    let values = r.f64s(angles * bins)?;
    r.finish()?;
    Sinogram::new(angles_deg, bins, pitch, values)
}

pub fn write_sinogram(path: &Path, sino: &Sinogram) -> Result<()> {
    write_file(path, &encode_sinogram(sino)?)
}

pub fn read_sinogram(path: &Path) -> Result<Sinogram> {
    decode_sinogram(&read_file(path)?)
}

pub fn encode_image(img: &ImageGrid) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(21 + 8 * img.values().len());
    out.extend_from_slice(IMAGE_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, as_u32(img.n(), "image side")?);
    out.extend_from_slice(&img.pitch_mm().to_le_bytes());
    out.push(match img.domain() {
        Domain::Normalized => 0,
        Domain::Hounsfield => 1,
    });
    put_f64s(&mut out, img.values());
    Ok(out)
}

pub fn decode_image(bytes: &[u8]) -> Result<ImageGrid> {
    let mut r = Reader::new(bytes, "image");
    r.magic(IMAGE_MAGIC)?;
    r.version()?;
    let n = r.u32()? as usize;
    let pitch = r.f64()?;
    let domain = match r.u8()? {
        0 => Domain::Normalized,
        1 => Domain::Hounsfield,
        d => return Err(Error::format("image", format!("unknown domain tag {d}"))),
    };
    let values = r.f64s(n * n)?;
    r.finish()?;
    ImageGrid::new(n, pitch, values, domain)
}

/// 8-bit grayscale raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray8 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn encode_pgm(img: &Gray8) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Gray8> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("pgm", "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(Error::format("pgm", format!("unsupported type {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::format("pgm", format!("bad number {s}")));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::format("pgm", format!("unsupported maxval {maxval}")));
    }
    let data = &bytes[(pos + 1).min(bytes.len())..];
    if data.len() < width * height {
        return Err(Error::format("pgm", "truncated raster"));
    }
    let pixels = data[..width * height]
        .iter()
        .map(|&b| ((b as usize * 255) / maxval).min(255) as u8)
        .collect();
    Ok(Gray8 {
        width,
        height,
        pixels,
    })
}

/// Reads an image file in either the `IMGG` or the PGM format. PGM input
/// must be square and is mapped into the normalized domain.
pub fn read_image(path: &Path, pgm_pitch_mm: f64) -> Result<ImageGrid> {
    let bytes = read_file(path)?;
    if bytes.starts_with(IMAGE_MAGIC) {
        return decode_image(&bytes);
    }
    if bytes.starts_with(b"P5") {
        let g = decode_pgm(&bytes)?;
        if g.width != g.height {
            return Err(Error::format("pgm", format!("image is {}x{}, expected square", g.width, g.height)));
        }
        let values = g.pixels.iter().map(|&b| b as f64 / 255.0).collect();
        return ImageGrid::new(g.width, pgm_pitch_mm, values, Domain::Normalized);
    }
    Err(Error::format("image", format!("{}: neither IMGG nor P5 PGM", path.display())))
}

pub fn write_image(path: &Path, img: &ImageGrid) -> Result<()> {
    write_file(path, &encode_image(img)?)
}

/// Architecture header stored at the front of every weight container.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelHeader {
    pub n: u32,
    pub input_len: u32,
    pub dense: Vec<u32>,
    /// `(filters, kh, kw)` per convolution.
    pub conv: Vec<(u32, u32, u32)>,
}

/// Named tensors under a [`ModelHeader`].
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub header: ModelHeader,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn encode_container(magic: &[u8; 4], c: &Container) -> Result<Vec<u8>> {
    let payload: usize = c.tensors.iter().map(|(_, t)| t.len() * 8 + 32).sum();
    let mut out = Vec::with_capacity(64 + payload);
    out.extend_from_slice(magic);
    put_u32(&mut out, FORMAT_VERSION);
    let h = &c.header;
    put_u32(&mut out, h.n);
    put_u32(&mut out, h.input_len);
    put_u32(&mut out, as_u32(h.dense.len(), "dense count")?);
    h.dense.iter().for_each(|&d| put_u32(&mut out, d));
    put_u32(&mut out, as_u32(h.conv.len(), "conv count")?);
    for &(f, kh, kw) in &h.conv {
        put_u32(&mut out, f);
        put_u32(&mut out, kh);
        put_u32(&mut out, kw);
    }
    put_u32(&mut out, as_u32(c.tensors.len(), "tensor count")?);
    for (name, t) in &c.tensors {
        let name_len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.dims().len()).map_err(|_| Error::invalid("tensor rank exceeds 255"))?;
        out.push(rank);
        for &d in t.dims() {
            put_u32(&mut out, as_u32(d, "tensor extent")?);
        }
        put_f64s(&mut out, t.data());
    }
    Ok(out)
}

pub fn decode_container(magic: &[u8; 4], bytes: &[u8]) -> Result<Container> {
    let mut r = Reader::new(bytes, "weight file");
    r.magic(magic)?;
    r.version()?;
    let n = r.u32()?;
    let input_len = r.u32()?;
    let dense_count = r.u32()? as usize;
    let dense = (0..dense_count).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let conv_count = r.u32()? as usize;
    let conv = (0..conv_count)
        .map(|_| Ok((r.u32()?, r.u32()?, r.u32()?)))
        .collect::<Result<Vec<_>>>()?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::format("weight file", "tensor name is not UTF-8"))?;
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let data = r.f64s(count)?;
        tensors.push((name, Tensor::new(dims, data)?));
    }
    r.finish()?;
    Ok(Container {
        header: ModelHeader {
            n,
            input_len,
            dense,
            conv,
        },
        tensors,
    })
}

/// Ordered `key = value` document, one entry per line. Lists are joined
/// with commas by the producer.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues {
    pub entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn extend(&mut self, other: &KeyValues) {
        self.entries.extend(other.entries.iter().cloned());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split_once(" = ")
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| Error::format("report", format!("line without ` = `: `{l}`")))
            })
            .collect::<Result<_>>()?;
        Ok(KeyValues { entries })
    }
}
