//! Binary PPM (P6) grids for eyeballing images.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Tiles `[N, 3, H, W]` images in [-1, 1] into rows of `cols`, with a
/// one-pixel gap. Returns `(width, height, rgb bytes)`.
pub fn tile<T: Real>(images: &Tensor<T>, cols: usize) -> Result<(usize, usize, Vec<u8>)> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 3 || cols == 0 {
        return Err(Error::shape("ppm tile", format!("{:?} with {cols} columns", s)));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    let rows = n.div_ceil(cols).max(1);
    let (gw, gh) = (cols * (w + 1) + 1, rows * (h + 1) + 1);
    let mut buf = vec![40u8; gw * gh * 3];
    for i in 0..n {
        let (oy, ox) = ((i / cols) * (h + 1) + 1, (i % cols) * (w + 1) + 1);
        let img = images.row(i);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = img[c * h * w + y * w + x].to_f64();
                    let byte = ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
                    buf[((oy + y) * gw + ox + x) * 3 + c] = byte;
                }
            }
        }
    }
    Ok((gw, gh, buf))
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn write_grid<T: Real>(path: impl AsRef<Path>, images: &Tensor<T>, cols: usize) -> Result<()> {
    let (w, h, rgb) = tile(images, cols)?;
    std::fs::write(path, encode_ppm(w, h, &rgb))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_geometry_and_header() {
        let imgs = Tensor::<f32>::full(&[3, 3, 2, 2], 1.0);
        let (w, h, rgb) = tile(&imgs, 2).unwrap();
        assert_eq!((w, h), (7, 7));
        assert_eq!(rgb.len(), 7 * 7 * 3);
        // first pixel of the first image is white
        assert_eq!(&rgb[(7 + 1) * 3..(7 + 1) * 3 + 3], &[255, 255, 255]);
        let ppm = encode_ppm(w, h, &rgb);
        assert!(ppm.starts_with(b"P6\n7 7\n255\n"));
    }
}
