//! PNG renderings of a prediction.
//!
//! Files written per pair id:
//!
//! | file | content |
//! |---|---|
//! | `{id}_warped.png` | `W(I_s, Ĝ_st)`, the source resampled onto the target |
//! | `{id}_checker.png` | 8 px checkerboard alternating warped source and target |
//! | `{id}_cycle_heat.png` | source cycle error `‖I_s − Î_s⟲‖ / √C` through [`crate::colormap`] |
//! | `{id}_confidence.png` | `Ĉ_s` through [`crate::colormap`] |
//!
//! The heatmap scale is fixed: `√C` is the largest possible per-pixel error
//! for images in `[0, 1]`, so equal errors always get equal colours.

use std::path::{Path, PathBuf};

use warpgrid::metrics::cycle_errors;
use warpgrid::warp::bilinear_sample;
use warpgrid::{ImageBuffer, Prediction};

use crate::colormap::color;
use crate::CliError;

pub const CHECKER_TILE: usize = 8;
pub const VIZ_SUFFIXES: [&str; 4] = ["warped", "checker", "cycle_heat", "confidence"];

pub fn viz_paths(dir: &Path, id: &str) -> [PathBuf; 4] {
    VIZ_SUFFIXES.map(|s| dir.join(format!("{id}_{s}.png")))
}

/// Tiles of `a` and `b` in a `tile`-pixel checkerboard, `a` at the origin.
pub fn checkerboard(a: &ImageBuffer, b: &ImageBuffer, tile: usize) -> Result<ImageBuffer, CliError> {
    let (c, h, w) = (a.channels(), a.height(), a.width());
    if (b.channels(), b.height(), b.width()) != (c, h, w) {
        return Err(CliError::Usage("checkerboard images differ in shape".into()));
    }
    let tile = tile.max(1);
    let n = h * w;
    let mut data = vec![0f32; c * n];
    for ch in 0..c {
        for r in 0..h {
            for x in 0..w {
                let src = if (r / tile + x / tile).is_multiple_of(2) { a } else { b };
                data[ch * n + r * w + x] = src.get(ch, r, x);
            }
        }
    }
    Ok(ImageBuffer::new(c, h, w, data)?)
}

/// RGB rendering of `values / scale` through the colormap.
pub fn heatmap(values: &[f32], height: usize, width: usize, scale: f64) -> Result<ImageBuffer, CliError> {
    let n = height * width;
    if values.len() != n {
        return Err(CliError::Usage(format!(
            "{} values for a {height}x{width} heatmap",
            values.len()
        )));
    }
    let mut data = vec![0f32; 3 * n];
    for (i, v) in values.iter().enumerate() {
        let rgb = color(*v as f64 / scale);
        for (ch, byte) in rgb.iter().enumerate() {
            data[ch * n + i] = *byte as f32 / 255.0;
        }
    }
    Ok(ImageBuffer::new(3, height, width, data)?)
}

/// Writes the four renderings and returns their paths.
pub fn render(
    image_s: &ImageBuffer,
    image_t: &ImageBuffer,
    pred: &Prediction,
    out_dir: &Path,
    id: &str,
) -> Result<[PathBuf; 4], CliError> {
    let (h, w) = (image_s.height(), image_s.width());
    let warped = bilinear_sample(image_s, &pred.grid_st)?;
    let checker = checkerboard(&warped, image_t, CHECKER_TILE)?;
    let (err_s, _) = cycle_errors(image_s, image_t, pred)?;
    let heat = heatmap(err_s.data(), h, w, (image_s.channels() as f64).sqrt())?;
    let conf = heatmap(pred.conf_s.data(), h, w, 1.0)?;
    let paths = viz_paths(out_dir, id);
    for (img, path) in [warped, checker, heat, conf].iter().zip(&paths) {
        img.save_png(path, 8)?;
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::colormap::COLORMAP;

    fn ramp(c: usize, h: usize, w: usize, k: f32) -> ImageBuffer {
        let data = (0..c * h * w).map(|i| ((i as f32 * k) % 1.0).abs()).collect();
        ImageBuffer::new(c, h, w, data).unwrap()
    }

    #[test]
    fn checkerboard_alternates_tiles() {
        let (a, b) = (ramp(1, 16, 16, 0.01), ramp(1, 16, 16, 0.03));
        let cb = checkerboard(&a, &b, 8).unwrap();
        assert_eq!(cb.get(0, 0, 0), a.get(0, 0, 0));
        assert_eq!(cb.get(0, 0, 9), b.get(0, 0, 9));
        assert_eq!(cb.get(0, 9, 9), a.get(0, 9, 9));
    }

    #[test]
    fn zero_heatmap_is_the_colormap_origin() {
        let img = heatmap(&[0.0; 12], 3, 4, 1.0).unwrap();
        for (ch, byte) in COLORMAP[0].iter().enumerate() {
            assert!(img.plane(ch).iter().all(|&v| v == *byte as f32 / 255.0));
        }
    }

    #[test]
    fn identity_on_identical_pair_reproduces_target() {
        let img = ramp(3, 8, 8, 0.017);
        let pred = Prediction::identity(8, 8, 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = render(&img, &img, &pred, dir.path(), "p").unwrap();
        assert!(paths.iter().all(|p| p.exists()));
        let warped = ImageBuffer::load_png(&paths[0]).unwrap();
        for (a, b) in warped.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
        let heat = ImageBuffer::load_png(&paths[2]).unwrap();
        assert!(heat.plane(0).iter().all(|&v| v == heat.plane(0)[0]));
    }
}
