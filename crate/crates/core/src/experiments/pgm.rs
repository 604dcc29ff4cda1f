//! Kernel visualization: a binary-PGM grid where each 3x3x3 kernel is drawn
//! as three 3x3 depth tiles side by side, min-max normalized per kernel.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harvest::KernelSlice;

const TILE: usize = 3;
/// One kernel occupies three tiles plus two 1-px separators.
const KERNEL_W: usize = 3 * TILE + 2;
const SEP: u8 = 0;
const MID_GRAY: u8 = 128;

/// Pixel rows for one kernel (3 x 11), min-max normalized; constant kernels
/// map to mid-gray.
fn kernel_pixels(k: &KernelSlice) -> [[u8; KERNEL_W]; TILE] {
    let mut lo = f32::MAX;
    let mut hi = f32::MIN;
    for &v in &k.values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    let mut out = [[SEP; KERNEL_W]; TILE];
    for d in 0..3 {
        for y in 0..TILE {
            for x in 0..TILE {
                let v = k.values[d * 9 + y * 3 + x];
                let px = if span <= 0.0 {
                    MID_GRAY
                } else {
                    ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
                };
                out[y][d * (TILE + 1) + x] = px;
            }
        }
    }
    out
}

/// Write the kernels as a binary (P5) PGM grid, row-major with 1-pixel
/// separators; the grid is as close to square (in kernels) as possible.
pub fn render_kernel_grid(kernels: &[KernelSlice], path: &Path) -> Result<()> {
    if kernels.is_empty() {
        return Err(Error::InvalidArgument("no kernels to render".into()));
    }
    let n = kernels.len();
    let ncols = (n as f64).sqrt().ceil() as usize;
    let nrows = n.div_ceil(ncols);
    let width = ncols * KERNEL_W + (ncols - 1);
    let height = nrows * TILE + (nrows - 1);

    let mut pixels = vec![SEP; width * height];
    for (i, k) in kernels.iter().enumerate() {
        let (row, col) = (i / ncols, i % ncols);
        let (y0, x0) = (row * (TILE + 1), col * (KERNEL_W + 1));
        let tile = kernel_pixels(k);
        for (dy, line) in tile.iter().enumerate() {
            let off = (y0 + dy) * width + x0;
            pixels[off..off + KERNEL_W].copy_from_slice(line);
        }
    }

    let p = path.display().to_string();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(&p, e))?;
    let io = |e| Error::io(&p, e);
    write!(f, "P5\n{width} {height}\n255\n").map_err(io)?;
    f.write_all(&pixels).map_err(io)
}
