use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::DynamicImage;

use crate::error::{Error, Result};
use crate::types::{ImageArray, ImageRole};

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Image files of `dir` with a supported extension, alphabetically.
pub fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Dataset(format!("{}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Center-crops to a square, resizes bilinearly to `h x w` (skipped when the
/// crop already has that size) and scales to `[0, 1]`. Grayscale sources are
/// replicated across three channels; `channels == 1` keeps luma only.
pub fn prepare_image(img: &DynamicImage, channels: usize, h: usize, w: usize) -> Result<ImageArray> {
    let side = img.width().min(img.height());
    let x0 = (img.width() - side) / 2;
    let y0 = (img.height() - side) / 2;
    let mut square = img.crop_imm(x0, y0, side, side);
    if (square.width() as usize, square.height() as usize) != (w, h) {
        square = square.resize_exact(w as u32, h as u32, FilterType::Triangle);
    }
    let (raw, c) = match channels {
        1 => (square.to_luma8().into_raw(), 1),
        3 => (square.to_rgb8().into_raw(), 3),
        other => return Err(Error::Dataset(format!("unsupported channel count {other}"))),
    };
    let hw = h * w;
    let mut planar = vec![0u8; c * hw];
    for i in 0..hw {
        for ch in 0..c {
            planar[ch * hw + i] = raw[i * c + ch];
        }
    }
    ImageArray::from_u8(c, h, w, &planar, ImageRole::Host)
}

/// Loads every decodable image of `dir` (alphabetical order). Undecodable
/// files are skipped with a warning; an error is returned when nothing loads.
pub fn load_dataset(dir: &Path, channels: usize, h: usize, w: usize) -> Result<Vec<ImageArray>> {
    Ok(load_named(dir, channels, h, w)?.into_iter().map(|(_, img)| img).collect())
}

/// Like [`load_dataset`], also returning each file's stem as an identifier.
pub fn load_named(dir: &Path, channels: usize, h: usize, w: usize) -> Result<Vec<(String, ImageArray)>> {
    let files = image_files(dir)?;
    if files.is_empty() {
        return Err(Error::Dataset(format!("no PNG/JPEG files in {}", dir.display())));
    }
    let mut out = Vec::with_capacity(files.len());
    for path in &files {
        match image::open(path) {
            Ok(img) => {
                let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
                out.push((id, prepare_image(&img, channels, h, w)?));
            }
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    if out.is_empty() {
        return Err(Error::Dataset(format!("no decodable images in {}", dir.display())));
    }
    Ok(out)
}

/// Writes an image as an 8-bit PNG (RGB or grayscale).
pub fn save_png(image: &ImageArray, path: &Path) -> Result<()> {
    let (c, h, w) = image.dims();
    let bytes = image.to_u8();
    let hw = h * w;
    let mut interleaved = vec![0u8; c * hw];
    for i in 0..hw {
        for ch in 0..c {
            interleaved[i * c + ch] = bytes[ch * hw + i];
        }
    }
    let color = match c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        other => return Err(Error::Image(format!("cannot write {other}-channel PNG"))),
    };
    image::save_buffer_with_format(path, &interleaved, w as u32, h as u32, color, image::ImageFormat::Png)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Reads one image file at its native size (must be a multiple of 8).
pub fn load_image(path: &Path, channels: usize) -> Result<ImageArray> {
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w != h {
        return Err(Error::Image(format!("{} is {w}x{h}; expected a square image", path.display())));
    }
    prepare_image(&img, channels, h, w)
}
