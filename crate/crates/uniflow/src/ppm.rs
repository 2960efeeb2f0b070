//! Binary PPM (P6) image files — the workspace's only image format, chosen
//! because it round-trips bit-exactly with no codec dependencies.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::scalar::Scalar;
use crate::tensor::{NumericsError, Result, Tensor};
use crate::toydata::{IMG_LEN, IMG_SIZE};

fn io_err(context: &str, e: std::io::Error) -> NumericsError {
    NumericsError::InvalidArgument { context: context.into(), detail: e.to_string() }
}

fn bad(context: &str, detail: String) -> NumericsError {
    NumericsError::InvalidArgument { context: context.into(), detail }
}

/// Writes interleaved RGB bytes as binary P6.
pub fn write_ppm(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != w * h * 3 {
        return Err(bad("write_ppm", format!("{}x{} needs {} bytes, got {}", w, h, w * h * 3, rgb.len())));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err("write_ppm", e))?;
    }
    let mut f = BufWriter::new(File::create(path).map_err(|e| io_err("write_ppm", e))?);
    write!(f, "P6\n{w} {h}\n255\n").map_err(|e| io_err("write_ppm", e))?;
    f.write_all(rgb).map_err(|e| io_err("write_ppm", e))?;
    f.flush().map_err(|e| io_err("write_ppm", e))
}

/// Reads a binary P6 file with maxval 255. Returns (width, height, rgb).
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut r = BufReader::new(File::open(path).map_err(|e| io_err("read_ppm", e))?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| io_err("read_ppm", e))?;
    // header: magic, width, height, maxval as whitespace-separated tokens,
    // then exactly one whitespace byte before the pixel data
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("read_ppm", "truncated header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token(&bytes)?;
    if magic != "P6" {
        return Err(bad("read_ppm", format!("not a binary PPM (magic {magic:?})")));
    }
    let w: usize = token(&bytes)?.parse().map_err(|_| bad("read_ppm", "bad width".into()))?;
    let h: usize = token(&bytes)?.parse().map_err(|_| bad("read_ppm", "bad height".into()))?;
    let maxval: usize = token(&bytes)?.parse().map_err(|_| bad("read_ppm", "bad maxval".into()))?;
    if maxval != 255 {
        return Err(bad("read_ppm", format!("only maxval 255 is supported, got {maxval}")));
    }
    pos += 1; // the single whitespace after maxval
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(bad("read_ppm", format!("expected {need} pixel bytes, have {}", bytes.len() - pos)));
    }
    Ok((w, h, bytes[pos..pos + need].to_vec()))
}

/// Quantizes a [0,1] HWC image tensor to RGB bytes.
pub fn image_to_rgb8<S: Scalar>(img: &Tensor<S>) -> Result<Vec<u8>> {
    if img.len() % 3 != 0 {
        return Err(bad("image_to_rgb8", format!("length {} is not a multiple of 3", img.len())));
    }
    Ok(img
        .data()
        .iter()
        .map(|v| (v.to_f64_c().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect())
}

/// Dequantizes RGB bytes back to a [0,1] tensor of the given shape.
pub fn rgb8_to_image<S: Scalar>(rgb: &[u8], shape: &[usize]) -> Result<Tensor<S>> {
    let vals: Vec<S> = rgb.iter().map(|&b| S::from_f64_c(b as f64 / 255.0)).collect();
    Tensor::from_vec(shape, vals)
}

/// Saves a rendered 32x32 scene image.
pub fn save_image<S: Scalar>(path: &Path, img: &Tensor<S>) -> Result<()> {
    if img.len() != IMG_LEN {
        return Err(bad("save_image", format!("expected a [{IMG_LEN}] image, got {:?}", img.shape())));
    }
    write_ppm(path, IMG_SIZE, IMG_SIZE, &image_to_rgb8(img)?)
}

/// Loads a 32x32 image saved by [`save_image`].
pub fn load_image<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let (w, h, rgb) = read_ppm(path)?;
    if (w, h) != (IMG_SIZE, IMG_SIZE) {
        return Err(bad("load_image", format!("expected {IMG_SIZE}x{IMG_SIZE}, got {w}x{h}")));
    }
    rgb8_to_image(&rgb, &[IMG_LEN])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toydata::{generate_corpus, render, Split};

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ppm");
        let p2 = dir.path().join("b.ppm");
        let scene = &generate_corpus(3, 1, Split::All)[0].0;
        let img = render::<f32>(scene);
        save_image(&p1, &img).unwrap();
        let back = load_image::<f32>(&p1).unwrap();
        save_image(&p2, &back).unwrap();
        let bytes1 = std::fs::read(&p1).unwrap();
        let bytes2 = std::fs::read(&p2).unwrap();
        assert_eq!(bytes1, bytes2, "write -> read -> write must be byte-identical");
        // quantization error bounded by half a bucket
        assert!(img.max_abs_diff(&back) <= 0.5 / 255.0 + 1e-6);
    }

    #[test]
    fn header_is_canonical_p6() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ppm");
        write_ppm(&p, 2, 1, &[255, 0, 0, 0, 0, 255]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(bytes.len(), b"P6\n2 1\n255\n".len() + 6);
        let (w, h, rgb) = read_ppm(&p).unwrap();
        assert_eq!((w, h), (2, 1));
        assert_eq!(rgb, vec![255, 0, 0, 0, 0, 255]);
    }

    #[test]
    fn malformed_files_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ppm");
        std::fs::write(&p, b"P3\n2 1\n255\n, not binary").unwrap();
        assert!(read_ppm(&p).is_err(), "P3 rejected");
        std::fs::write(&p, b"P6\n2 1\n255\nxx").unwrap();
        assert!(read_ppm(&p).is_err(), "truncated pixels rejected");
        std::fs::write(&p, b"P6\n2 1\n65535\n").unwrap();
        assert!(read_ppm(&p).is_err(), "16-bit maxval rejected");
    }
}
