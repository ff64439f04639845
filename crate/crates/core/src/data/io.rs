//! Image files (binary PPM, PNG) and the dataset manifest.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::mask::BoundingBox;
use super::synth::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Interleaved RGB bytes of a `3×H×W` image in `[0,1]`.
fn to_rgb_bytes(image: &Tensor<f32>) -> Result<(usize, usize, Vec<u8>)> {
    let [c, h, w] = image.dims3()?;
    if c != 3 {
        return Err(Error::shape(format!(
            "expected an RGB image, got {c} channels"
        )));
    }
    let d = image.data();
    let mut bytes = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for ch in 0..3 {
            bytes.push(to_byte(d[ch * h * w + i]));
        }
    }
    Ok((h, w, bytes))
}

fn from_rgb_bytes(h: usize, w: usize, bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut data = vec![0.0f32; 3 * h * w];
    for i in 0..h * w {
        for ch in 0..3 {
            data[ch * h * w + i] = bytes[3 * i + ch] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w, bytes) = to_rgb_bytes(image)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&bytes);
    Ok(out)
}

pub fn decode_ppm(buf: &[u8]) -> Result<Tensor<f32>> {
    // header: magic, width, height, maxval separated by whitespace, with
    // optional '#' comments, then exactly one whitespace byte
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < buf.len() && (buf[pos].is_ascii_whitespace() || buf[pos] == b'#') {
            if buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PPM header".into()));
        }
        fields.push(String::from_utf8_lossy(&buf[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(Error::Format(format!(
            "unsupported PPM magic {:?}",
            fields[0]
        )));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PPM header field {s:?}")))
    };
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(Error::Format(format!(
            "PPM maxval {maxval} unsupported (need 255)"
        )));
    }
    let need = 3 * w * h;
    if buf.len() < pos + need || w == 0 || h == 0 {
        return Err(Error::Format("PPM pixel data truncated".into()));
    }
    from_rgb_bytes(h, w, &buf[pos..pos + need])
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Writes a `3×H×W` image; `.png` paths are PNG-encoded, everything else PPM.
pub fn write_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    if is_png(path) {
        let (h, w, bytes) = to_rgb_bytes(image)?;
        let buf = image::RgbImage::from_raw(w as u32, h as u32, bytes)
            .ok_or_else(|| Error::Format("PNG buffer size mismatch".into()))?;
        buf.save(path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    } else {
        let bytes = encode_ppm(image)?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P6") {
        return decode_ppm(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())));
    }
    let img = image::load_from_memory(&bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .to_rgb8();
    from_rgb_bytes(img.height() as usize, img.width() as usize, img.as_raw())
}

pub fn format_boxes(boxes: &[BoundingBox]) -> String {
    boxes
        .iter()
        .map(|b| format!("{},{},{},{}", b.x0, b.y0, b.x1, b.y1))
        .collect::<Vec<_>>()
        .join(";")
}

/// Parses `x0,y0,x1,y1;x0,y0,x1,y1;...`.
pub fn parse_boxes(s: &str) -> Result<Vec<BoundingBox>> {
    s.split(';')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|part| {
            let v: Vec<usize> = part
                .split(',')
                .map(|x| x.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Format(format!("bad box {part:?}")))?;
            match v[..] {
                [x0, y0, x1, y1] if x0 < x1 && y0 < y1 => Ok(BoundingBox::new(x0, y0, x1, y1)),
                _ => Err(Error::Format(format!("bad box {part:?}"))),
            }
        })
        .collect()
}

/// One manifest line: `seed <tab> caption <tab> boxes`.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub seed: u64,
    pub caption: String,
    pub boxes: Vec<BoundingBox>,
}

impl From<&Sample> for ManifestEntry {
    fn from(s: &Sample) -> Self {
        ManifestEntry {
            seed: s.seed,
            caption: s.caption.clone(),
            boxes: s.boxes.clone(),
        }
    }
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for e in entries {
        writeln!(f, "{}\t{}\t{}", e.seed, e.caption, format_boxes(&e.boxes))
            .map_err(|err| Error::io(path, err))?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(Error::Format(format!(
                    "{}:{}: expected 3 tab-separated fields",
                    path.display(),
                    i + 1
                )));
            }
            let seed = parts[0]
                .parse()
                .map_err(|_| Error::Format(format!("{}:{}: bad seed", path.display(), i + 1)))?;
            Ok(ManifestEntry {
                seed,
                caption: parts[1].to_string(),
                boxes: parse_boxes(parts[2])?,
            })
        })
        .collect()
}
