//! Grey-scale PGM previews for eyeballing results.

use std::path::Path;

use anyhow::{bail, Context, Result};
use image::GrayImage;

use foe_core::Tensor;

/// Maximum projection along the leading axis of a `[Z, H, W]` or `[H, W]`
/// tensor, linearly mapped to 0..=255.
pub fn max_projection(t: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let (h, w) = t.hw()?;
    if !(2..=3).contains(&t.rank()) {
        bail!("preview expects [H, W] or [Z, H, W], got {:?}", t.shape());
    }
    let mut mip = vec![f64::NEG_INFINITY; h * w];
    for plane in t.re().chunks_exact(h * w) {
        for (m, v) in mip.iter_mut().zip(plane) {
            *m = m.max(*v);
        }
    }
    Ok((h, w, mip))
}

pub fn write_mip(path: &Path, t: &Tensor) -> Result<()> {
    let (h, w, mip) = max_projection(t)?;
    let lo = mip.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = mip.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let px: Vec<u8> = mip.iter().map(|v| (255.0 * (v - lo) / span).round() as u8).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, px).expect("buffer sized to image");
    img.save(path).with_context(|| format!("writing {}", path.display()))
}
