//! Binary 8-bit PPM (P6) and PGM (P5).

use std::fs;
use std::path::Path;

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::maps::{ChangeMask, LabelMap};

/// Parsed header: dimensions and the byte offset of the raster.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PnmHeader {
    pub width: usize,
    pub height: usize,
    pub data_offset: usize,
}

fn format_err(path: &Path, offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        detail: detail.into(),
    }
}

/// Parse a P5/P6 header with `maxval` 255. Comments (`#` to end of line)
/// may appear between tokens; exactly one whitespace byte separates the
/// header from the raster.
pub fn parse_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<PnmHeader> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format_err(path, 0, format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, name) in ["width", "height", "maxval"].iter().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            let detail = if pos >= bytes.len() {
                format!("header ends before {name}")
            } else {
                format!("expected decimal {name}")
            };
            return Err(format_err(path, pos, detail));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        fields[i] = text
            .parse()
            .map_err(|_| format_err(path, start, format!("{name} `{text}` out of range")))?;
        if i < 2 && fields[i] == 0 {
            return Err(format_err(path, start, format!("{name} must be positive")));
        }
    }
    if fields[2] != 255 {
        return Err(format_err(path, pos, format!("maxval {} unsupported, need 255", fields[2])));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(format_err(path, pos, "missing whitespace after maxval")),
    }
    Ok(PnmHeader {
        width: fields[0],
        height: fields[1],
        data_offset: pos,
    })
}

fn raster<'a>(bytes: &'a [u8], header: &PnmHeader, channels: usize, path: &Path) -> Result<&'a [u8]> {
    let need = header.width * header.height * channels;
    let have = bytes.len() - header.data_offset;
    if have < need {
        return Err(format_err(
            path,
            bytes.len(),
            format!("truncated raster: need {need} bytes, found {have}"),
        ));
    }
    if have > need {
        return Err(format_err(path, header.data_offset + need, format!("{} trailing bytes", have - need)));
    }
    Ok(&bytes[header.data_offset..])
}

fn pnm_bytes(magic: &str, width: usize, height: usize, raster: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(raster);
    out
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// An interleaved 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let h = parse_header(bytes, b"P6", path)?;
        let data = raster(bytes, &h, 3, path)?.to_vec();
        Ok(RgbImage {
            width: h.width,
            height: h.height,
            data,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        pnm_bytes("P6", self.width, self.height, &self.data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode())
    }

    /// Planar `[3, H, W]` tensor with `v / 127.5 - 1`.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        Tensor::from_fn(&[3, self.height, self.width], |i| {
            let (c, p) = (i / plane, i % plane);
            self.data[p * 3 + c] as f32 / 127.5 - 1.0
        })
    }

    /// Inverse of [`RgbImage::to_tensor`], rounding and clamping to 0..=255.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [c, h, w] = t.shape() else {
            return Err(Error::shape("write_image", format!("expected [3, H, W], got {:?}", t.shape())));
        };
        if *c != 3 {
            return Err(Error::shape("write_image", format!("expected 3 channels, got {c}")));
        }
        let plane = h * w;
        let mut data = vec![0u8; plane * 3];
        for (i, &v) in t.data().iter().enumerate() {
            let (ch, p) = (i / plane, i % plane);
            data[p * 3 + ch] = ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
        }
        Ok(RgbImage {
            width: *w,
            height: *h,
            data,
        })
    }
}

/// Read a P6 image as a `[3, H, W]` tensor in `[-1, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor> {
    Ok(RgbImage::decode(&read_file(path)?, path)?.to_tensor())
}

pub fn write_image(image: &Tensor, path: &Path) -> Result<()> {
    RgbImage::from_tensor(image)?.save(path)
}

pub fn decode_labelmap(bytes: &[u8], path: &Path) -> Result<LabelMap> {
    let h = parse_header(bytes, b"P5", path)?;
    LabelMap::new(h.width, h.height, raster(bytes, &h, 1, path)?.to_vec())
}

pub fn encode_labelmap(labels: &LabelMap) -> Vec<u8> {
    pnm_bytes("P5", labels.width(), labels.height(), labels.data())
}

/// Read a P5 class-index map; 255 is the unlabeled marker.
pub fn read_labelmap(path: &Path) -> Result<LabelMap> {
    decode_labelmap(&read_file(path)?, path)
}

pub fn write_labelmap(labels: &LabelMap, path: &Path) -> Result<()> {
    write_file(path, &encode_labelmap(labels))
}

/// Masks are stored as P5 with 0 for unchanged and 255 for changed; 1 is
/// also accepted as changed on read.
pub fn decode_mask(bytes: &[u8], path: &Path) -> Result<ChangeMask> {
    let h = parse_header(bytes, b"P5", path)?;
    let data = raster(bytes, &h, 1, path)?;
    let bits = data
        .iter()
        .enumerate()
        .map(|(i, &v)| match v {
            0 => Ok(0),
            1 | 255 => Ok(1),
            other => Err(format_err(path, h.data_offset + i, format!("mask value {other} is neither 0 nor 255"))),
        })
        .collect::<Result<Vec<u8>>>()?;
    ChangeMask::new(h.width, h.height, bits)
}

pub fn encode_mask(mask: &ChangeMask) -> Vec<u8> {
    let data: Vec<u8> = mask.data().iter().map(|&v| v * 255).collect();
    pnm_bytes("P5", mask.width(), mask.height(), &data)
}

pub fn read_mask(path: &Path) -> Result<ChangeMask> {
    decode_mask(&read_file(path)?, path)
}

pub fn write_mask(mask: &ChangeMask, path: &Path) -> Result<()> {
    write_file(path, &encode_mask(mask))
}
