//! Binary PPM image grids.

use std::path::Path;

use crate::data::unit_to_byte;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Tiles the first `rows·cols` images of `[N, C, H, W]` row-major into one
/// binary PPM (`P6`). Values in `[-1, 1]` map to bytes with round-half-up and
/// clamping; single-channel images are replicated to RGB.
pub fn image_grid_ppm<T: Scalar>(images: &Tensor<T>, rows: usize, cols: usize) -> Result<Vec<u8>> {
    let s = images.shape();
    if s.len() != 4 || !(s[1] == 1 || s[1] == 3) {
        return Err(Error::invalid(format!("image grid needs [N, 1|3, H, W], got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if rows == 0 || cols == 0 || rows * cols > n {
        return Err(Error::invalid(format!("{rows}x{cols} grid needs more than {n} images")));
    }
    let (gh, gw) = (rows * h, cols * w);
    let mut out = format!("P6\n{gw} {gh}\n255\n").into_bytes();
    let data = images.data();
    for gr in 0..gh {
        let (tile_r, r) = (gr / h, gr % h);
        for gc in 0..gw {
            let (tile_c, col) = (gc / w, gc % w);
            let img = tile_r * cols + tile_c;
            for ch in 0..3 {
                let ch = if c == 1 { 0 } else { ch };
                let v = data[((img * c + ch) * h + r) * w + col].f64();
                out.push(unit_to_byte(v));
            }
        }
    }
    Ok(out)
}

pub fn write_image_grid<T: Scalar>(images: &Tensor<T>, rows: usize, cols: usize, path: impl AsRef<Path>) -> Result<()> {
    let bytes = image_grid_ppm(images, rows, cols)?;
    let path = path.as_ref();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
