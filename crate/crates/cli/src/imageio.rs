//! PNG input and grid output for NHWC image batches in `[-1, 1]`.

use std::path::Path;

use image::imageops::FilterType;
use image::{Rgb, RgbImage};
use ndarray::{ArrayD, ArrayView3, Axis, IxDyn};

use crate::error::CliError;

fn to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

fn to_unit(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

/// Loads every PNG in `dir` in file-name order, resized to `resolution`.
pub fn load_dir(dir: &Path, resolution: usize) -> Result<ArrayD<f32>, CliError> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| CliError::Config(format!("cannot read image dir {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Config(format!("no PNG images in {}", dir.display())));
    }
    let r = resolution as u32;
    let mut out = ArrayD::zeros(IxDyn(&[paths.len(), resolution, resolution, 3]));
    for (n, path) in paths.iter().enumerate() {
        let mut img = image::open(path)?.to_rgb8();
        if img.dimensions() != (r, r) {
            img = image::imageops::resize(&img, r, r, FilterType::Triangle);
        }
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                out[[n, y as usize, x as usize, c]] = to_unit(px[c]);
            }
        }
    }
    Ok(out)
}

fn blit(canvas: &mut RgbImage, img: ArrayView3<f32>, ox: u32, oy: u32) {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    for y in 0..h {
        for x in 0..w {
            let px = Rgb([to_byte(img[[y, x, 0]]), to_byte(img[[y, x, 1]]), to_byte(img[[y, x, 2]])]);
            canvas.put_pixel(ox + x as u32, oy + y as u32, px);
        }
    }
}

/// Lays out `rows`, each an `[cols, H, W, 3]` batch, with a 1-pixel gutter.
pub fn grid(rows: &[ArrayD<f32>]) -> Result<RgbImage, CliError> {
    let first = rows.first().ok_or_else(|| CliError::Other("empty image grid".into()))?;
    let s = first.shape();
    if s.len() != 4 || s[3] != 3 {
        return Err(CliError::Mismatch(format!("grid rows must be [N, H, W, 3], got {s:?}")));
    }
    let (cols, h, w) = (s[0], s[1] as u32, s[2] as u32);
    if rows.iter().any(|r| r.shape() != s) {
        return Err(CliError::Mismatch("grid rows have different shapes".into()));
    }
    let gw = cols as u32 * (w + 1) - 1;
    let gh = rows.len() as u32 * (h + 1) - 1;
    let mut canvas = RgbImage::from_pixel(gw, gh, Rgb([255, 255, 255]));
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.axis_iter(Axis(0)).enumerate() {
            let img = img.into_dimensionality().expect("rank checked");
            blit(&mut canvas, img, c as u32 * (w + 1), r as u32 * (h + 1));
        }
    }
    Ok(canvas)
}

pub fn save_grid(rows: &[ArrayD<f32>], path: &Path) -> Result<(), CliError> {
    grid(rows)?.save(path)?;
    Ok(())
}

/// Writes each image of an `[N, H, W, 3]` batch as `{prefix}{i:04}.png`.
pub fn save_batch(batch: &ArrayD<f32>, dir: &Path, prefix: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    for (i, img) in batch.axis_iter(Axis(0)).enumerate() {
        let one = img.insert_axis(Axis(0)).to_owned();
        save_grid(&[one], &dir.join(format!("{prefix}{i:04}.png")))?;
    }
    Ok(())
}
