use std::path::Path;

use anyhow::{bail, Context, Result};
use image::{Rgb, RgbImage};
use tdla_core::synth::PageImage;
use tdla_core::PageRecord;

pub fn save_png(img: &PageImage, path: &Path) -> Result<()> {
    let buf = RgbImage::from_fn(img.width, img.height, |x, y| {
        let px = |c| (img.get(x, y, c).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    buf.save(path).with_context(|| format!("writing {}", path.display()))
}

pub fn load_png(path: &Path) -> Result<PageImage> {
    let rgb = image::open(path).with_context(|| format!("reading {}", path.display()))?.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Ok(PageImage { width: w, height: h, data })
}

/// Images named by each page's `file_name` under `dir`, checked against
/// the recorded page size.
pub fn load_page_images(pages: &[PageRecord], dir: &Path) -> Result<Vec<PageImage>> {
    pages
        .iter()
        .map(|p| {
            let img = load_png(&dir.join(&p.file_name))?;
            if (img.width, img.height) != (p.width, p.height) {
                bail!("{} is {}x{} but page {} says {}x{}", p.file_name, img.width, img.height, p.image_id, p.width, p.height);
            }
            Ok(img)
        })
        .collect()
}
