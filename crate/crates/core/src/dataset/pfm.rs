use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

/// Writes a 1- or 3-channel image as little-endian PFM (rows stored
/// bottom to top).
pub fn write_pfm(path: &Path, img: &Image<f64>) -> Result<()> {
    let tag = match img.channels() {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::invalid(format!("PFM holds 1 or 3 channels, not {c}"))),
    };
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let mut buf = format!("{tag}\n{w} {h}\n-1.0\n").into_bytes();
    buf.reserve(w * h * c * 4);
    for y in (0..h).rev() {
        for v in &img.data()[y * w * c..(y + 1) * w * c] {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos]).ok().filter(|s| !s.is_empty())
}

pub fn read_pfm(path: &Path) -> Result<Image<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::load(path, m.to_string());
    let mut pos = 0;
    let c = match next_token(&bytes, &mut pos) {
        Some("Pf") => 1,
        Some("PF") => 3,
        _ => return Err(bad("not a PFM file")),
    };
    let mut num = |what: &str| -> Result<f64> {
        next_token(&bytes, &mut pos)
            .and_then(|t| t.parse::<f64>().ok())
            .ok_or_else(|| bad(&format!("bad PFM {what}")))
    };
    let w = num("width")?;
    let h = num("height")?;
    let scale = num("scale")?;
    if w < 1.0 || h < 1.0 || w.fract() != 0.0 || h.fract() != 0.0 || scale == 0.0 {
        return Err(bad("bad PFM header"));
    }
    let (w, h) = (w as usize, h as usize);
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    let row_len = w * c;
    if raster.len() != row_len * h * 4 {
        return Err(bad(&format!("expected {} raster bytes, found {}", row_len * h * 4, raster.len())));
    }
    let little = scale < 0.0;
    let mut data = vec![0.0; row_len * h];
    for (i, chunk) in raster.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, x) = (i / row_len, i % row_len);
        data[(h - 1 - row) * row_len + x] = v as f64;
    }
    Ok(Image::from_vec(w, h, c, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_orientation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        let img = Image::from_vec(3, 2, 1, vec![0.0, 1.5, 2.25, 3.0, 0.125, 1e-3]);
        write_pfm(&p, &img).unwrap();
        let back = read_pfm(&p).unwrap();
        assert_eq!((back.width(), back.height()), (3, 2));
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        // bottom row comes first on disk
        let raw = fs::read(&p).unwrap();
        let header = b"Pf\n3 2\n-1.0\n".len();
        assert_eq!(f32::from_le_bytes(raw[header..header + 4].try_into().unwrap()), 3.0);
    }

    #[test]
    fn color_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pfm");
        let img = Image::from_vec(2, 2, 3, (0..12).map(|i| i as f64 / 8.0).collect());
        write_pfm(&p, &img).unwrap();
        let back = read_pfm(&p).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn truncated_raster_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        fs::write(&p, b"Pf\n2 2\n-1.0\n\0\0\0\0").unwrap();
        assert!(matches!(read_pfm(&p), Err(Error::Load { .. })));
    }
}
