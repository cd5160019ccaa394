//! Image, raw array and CSV files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::imaging_sim::SceneImage;

#[derive(Debug, Error)]
pub enum IoError {
    // the cause is folded into the message rather than exposed as a source,
    // so chained reports do not repeat it
    #[error("{path}: {cause}")]
    File {
        path: PathBuf,
        cause: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |cause| IoError::File {
        path: path.to_path_buf(),
        cause,
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> IoError {
    IoError::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(file_err(dir))?;
        }
    }
    fs::write(path, bytes).map_err(file_err(path))
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(file_err(path))
}

/// Bit depth of a written portable anymap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Depth {
    Eight,
    Sixteen,
}

impl Depth {
    fn maxval(self) -> u32 {
        match self {
            Depth::Eight => 255,
            Depth::Sixteen => 65535,
        }
    }
}

fn quantize(v: f64, depth: Depth, out: &mut Vec<u8>) {
    let m = depth.maxval();
    let q = (v.clamp(0.0, 1.0) * m as f64).round() as u32;
    match depth {
        Depth::Eight => out.push(q as u8),
        Depth::Sixteen => out.extend_from_slice(&(q as u16).to_be_bytes()),
    }
}

/// Binary graymap (P5) of values in `[0, 1]`.
pub fn encode_pgm(values: &[f64], width: usize, height: usize, depth: Depth) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n{}\n", depth.maxval()).into_bytes();
    for &v in &values[..width * height] {
        quantize(v, depth, &mut out);
    }
    out
}

/// Binary pixmap (P6).
pub fn encode_ppm(img: &SceneImage, depth: Depth) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n{}\n", img.width, img.height, depth.maxval()).into_bytes();
    for i in 0..img.width * img.height {
        for c in &img.channels {
            quantize(c[i], depth, &mut out);
        }
    }
    out
}

/// Parse a binary P5 or P6 file; graymaps are replicated into three channels.
pub fn decode_pnm(bytes: &[u8], pitch: f64, path: &Path) -> Result<SceneImage, IoError> {
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let channels = match tokens[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(format_err(path, format!("unsupported magic {other}; expected P5 or P6"))),
    };
    let num = |i: usize| {
        tokens[i]
            .parse::<usize>()
            .map_err(|_| format_err(path, format!("bad header field {:?}", tokens[i])))
    };
    let (w, h, maxval) = (num(1)?, num(2)?, num(3)?);
    if maxval == 0 || maxval > 65535 {
        return Err(format_err(path, format!("maxval {maxval} out of range")));
    }
    let bps = if maxval < 256 { 1 } else { 2 };
    let need = w * h * channels * bps;
    let raster = bytes.get(pos..pos + need).ok_or_else(|| format_err(path, "truncated raster"))?;
    let sample = |i: usize| -> f64 {
        let v = if bps == 1 {
            raster[i] as u32
        } else {
            u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]]) as u32
        };
        v as f64 / maxval as f64
    };
    let mut out: [Vec<f64>; 3] = Default::default();
    for (c, plane) in out.iter_mut().enumerate() {
        *plane = (0..w * h)
            .map(|p| sample(if channels == 1 { p } else { p * 3 + c }))
            .collect();
    }
    SceneImage::new(w, h, pitch, out).map_err(|e| format_err(path, e.to_string()))
}

pub fn read_pnm(path: &Path, pitch: f64) -> Result<SceneImage, IoError> {
    let bytes = fs::read(path).map_err(file_err(path))?;
    decode_pnm(&bytes, pitch, path)
}

/// Side-car header describing a raw little-endian `f32` array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawHeader {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

impl RawHeader {
    pub fn render(&self) -> String {
        format!(
            "format = f32le\nlayout = interleaved\nwidth = {}\nheight = {}\nchannels = {}\n",
            self.width, self.height, self.channels
        )
    }

    pub fn parse(text: &str, path: &Path) -> Result<RawHeader, IoError> {
        let mut h = RawHeader {
            width: 0,
            height: 0,
            channels: 0,
        };
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format_err(path, format!("expected key = value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let n = || v.parse::<usize>().map_err(|_| format_err(path, format!("bad {k}: {v}")));
            match k {
                "format" if v == "f32le" => {}
                "layout" if v == "interleaved" => {}
                "width" => h.width = n()?,
                "height" => h.height = n()?,
                "channels" => h.channels = n()?,
                _ => return Err(format_err(path, format!("unsupported entry {line:?}"))),
            }
        }
        if h.width == 0 || h.height == 0 || h.channels == 0 {
            return Err(format_err(path, "width, height and channels are required"));
        }
        Ok(h)
    }
}

/// Path of the side-car header for raw file `path`.
pub fn header_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".hdr");
    PathBuf::from(s)
}

pub fn write_raw(path: &Path, header: &RawHeader, interleaved: &[f64]) -> Result<(), IoError> {
    let mut bytes = Vec::with_capacity(interleaved.len() * 4);
    for &v in interleaved {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_file(path, &bytes)?;
    write_file(&header_path(path), header.render().as_bytes())
}

pub fn read_raw(path: &Path) -> Result<(RawHeader, Vec<f64>), IoError> {
    let hp = header_path(path);
    let header = RawHeader::parse(&read_text(&hp)?, &hp)?;
    let bytes = fs::read(path).map_err(file_err(path))?;
    let n = header.width * header.height * header.channels;
    if bytes.len() != 4 * n {
        return Err(format_err(path, format!("{} bytes, header implies {}", bytes.len(), 4 * n)));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok((header, data))
}

pub fn scene_to_raw(img: &SceneImage) -> (RawHeader, Vec<f64>) {
    let mut data = Vec::with_capacity(img.width * img.height * 3);
    for i in 0..img.width * img.height {
        for c in &img.channels {
            data.push(c[i]);
        }
    }
    (
        RawHeader {
            width: img.width,
            height: img.height,
            channels: 3,
        },
        data,
    )
}

pub fn raw_to_scene(h: &RawHeader, data: &[f64], pitch: f64, path: &Path) -> Result<SceneImage, IoError> {
    if h.channels != 1 && h.channels != 3 {
        return Err(format_err(path, format!("{} channels; expected 1 or 3", h.channels)));
    }
    let mut out: [Vec<f64>; 3] = Default::default();
    for (c, plane) in out.iter_mut().enumerate() {
        let src = if h.channels == 1 { 0 } else { c };
        *plane = (0..h.width * h.height).map(|p| data[p * h.channels + src]).collect();
    }
    SceneImage::new(h.width, h.height, pitch, out).map_err(|e| format_err(path, e.to_string()))
}

/// Comma-separated table with a header row. Floats use the shortest
/// representation that round-trips.
pub fn csv(header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        let mut first = true;
        for v in r {
            if !first {
                out.push(',');
            }
            first = false;
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}

/// Square grid as CSV, one grid row per line.
pub fn grid_csv(values: &[f64], side: usize) -> String {
    let mut out = String::new();
    for row in values.chunks(side) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_16_bit() {
        let img = SceneImage::new(
            3,
            2,
            1.2,
            [
                vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1],
                vec![1.0; 6],
                vec![0.0; 6],
            ],
        )
        .unwrap();
        let bytes = encode_ppm(&img, Depth::Sixteen);
        let back = decode_pnm(&bytes, 1.2, Path::new("x.ppm")).unwrap();
        for (a, b) in back.channels.iter().zip(&img.channels) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 0.5 / 65535.0);
            }
        }
    }

    #[test]
    fn pgm_8_bit_with_comment() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255]);
        let img = decode_pnm(&bytes, 1.2, Path::new("x.pgm")).unwrap();
        assert_eq!(img.channels[2], vec![0.0, 1.0]);
        assert_eq!(encode_pgm(&[0.0, 1.0], 2, 1, Depth::Eight)[..], b"P5\n2 1\n255\n\x00\xff"[..]);
    }

    #[test]
    fn rejects_ascii_pnm() {
        let r = decode_pnm(b"P3\n1 1\n255\n0 0 0\n", 1.2, Path::new("a.ppm"));
        assert!(matches!(r, Err(IoError::Format { .. })));
    }

    #[test]
    fn raw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.f32");
        let h = RawHeader {
            width: 2,
            height: 2,
            channels: 1,
        };
        write_raw(&p, &h, &[0.0, 0.25, 0.5, 1.0]).unwrap();
        let (h2, d) = read_raw(&p).unwrap();
        assert_eq!(h2, h);
        assert_eq!(d, vec![0.0, 0.25, 0.5, 1.0]);
    }

    #[test]
    fn csv_layout() {
        assert_eq!(csv(&["a", "b"], vec![vec![1.0, 0.5]]), "a,b\n1,0.5\n");
    }
}
