//! Binary PPM (P6) and PGM (P5) images with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Serializes a `(1, C, H, W)` tensor with `C = 1` (P5) or `C = 3` (P6).
pub fn encode(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = t.shape();
    let magic = match (s.n, s.c) {
        (1, 1) => "P5",
        (1, 3) => "P6",
        _ => return Err(Error::dim("encode_pnm", format!("cannot store {s} as an image"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", s.w, s.h).into_bytes();
    let plane = s.h * s.w;
    out.reserve(plane * s.c);
    for i in 0..plane {
        for c in 0..s.c {
            out.push(quantize(t.data()[c * plane + i]));
        }
    }
    Ok(out)
}

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    maxval: usize,
    raster: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    let err = |offset: usize, msg: String| Error::format(path, offset as u64, msg);
    if bytes.len() < 2 {
        return Err(err(0, "file too short for a magic number".into()));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(err(0, "bad magic: expected P5 or P6".into())),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments before each field
        let start = pos;
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        if pos == start {
            return Err(err(pos, "expected whitespace in header".into()));
        }
        let digits = bytes[pos..].iter().take_while(|b| b.is_ascii_digit()).count();
        if digits == 0 {
            let name = ["width", "height", "maxval"][i];
            return Err(err(pos, format!("expected {name}")));
        }
        let text = std::str::from_utf8(&bytes[pos..pos + digits]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| err(pos, format!("number `{text}` out of range")))?;
        pos += digits;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(err(pos, "expected a single whitespace byte after maxval".into()));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(err(3, format!("empty image {width}x{height}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(err(pos, format!("unsupported maxval {maxval}")));
    }
    Ok(Header {
        channels,
        width,
        height,
        maxval,
        raster: pos + 1,
    })
}

/// Parses PNM bytes into a `(1, C, H, W)` tensor scaled to `[0, 1]`.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let h = parse_header(bytes, path)?;
    let plane = h.width * h.height;
    let need = plane * h.channels;
    let raster = &bytes[h.raster..];
    if raster.len() < need {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!("truncated raster: expected {need} bytes, found {}", raster.len()),
        ));
    }
    let scale = h.maxval as f32;
    let mut data = vec![0.0f32; need];
    for i in 0..plane {
        for c in 0..h.channels {
            let v = raster[i * h.channels + c] as usize;
            if v > h.maxval {
                let at = (h.raster + i * h.channels + c) as u64;
                return Err(Error::format(
                    path,
                    at,
                    format!("sample {v} exceeds maxval {}", h.maxval),
                ));
            }
            data[c * plane + i] = v as f32 / scale;
        }
    }
    Tensor::from_vec(Shape::new(1, h.channels, h.height, h.width), data)
}

fn read(path: &Path, channels: usize) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let t = decode(&bytes, path)?;
    if t.shape().c != channels {
        let want = if channels == 1 { "P5" } else { "P6" };
        return Err(Error::format(path, 0, format!("bad magic: expected {want}")));
    }
    Ok(t)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    read(path.as_ref(), 3)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    read(path.as_ref(), 1)
}

fn write(path: &Path, t: &Tensor<f32>, channels: usize) -> Result<()> {
    if t.shape().c != channels {
        return Err(Error::dim(
            "write_pnm",
            format!("{} needs {channels} channels", path.display()),
        ));
    }
    fs::write(path, encode(t)?).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    write(path.as_ref(), t, 3)
}

pub fn write_pgm(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    write(path.as_ref(), t, 1)
}
