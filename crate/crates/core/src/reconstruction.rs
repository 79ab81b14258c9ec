//! Cropping, resizing and mosaic assembly of selected patches.

use std::path::Path;

use image::imageops::FilterType;
use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::Mode;
use crate::dataset::ImageSource;
use crate::manifest::{SyntheticItem, SyntheticManifest};
use crate::{Error, Result};

pub const RESIZE_FILTER: &str = "bilinear";

/// Pixel rectangle in source-image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl CropBox {
    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.w > 0
            && self.h > 0
            && self.x.checked_add(self.w).is_some_and(|r| r <= width)
            && self.y.checked_add(self.h).is_some_and(|b| b <= height)
    }
}

/// Exact pixel copy of `b`.
pub fn crop_patch(image: &RgbImage, b: CropBox) -> Result<RgbImage> {
    let (w, h) = image.dimensions();
    if !b.fits(w, h) {
        return Err(Error::InvalidInput(format!("crop box {b:?} outside {w}x{h} image")));
    }
    Ok(image::imageops::crop_imm(image, b.x, b.y, b.w, b.h).to_image())
}

/// Bilinear resize to `size`x`size`; same-size input is copied untouched.
pub fn resize_patch(patch: &RgbImage, size: u32) -> RgbImage {
    if patch.dimensions() == (size, size) {
        return patch.clone();
    }
    image::imageops::resize(patch, size, size, FilterType::Triangle)
}

/// 2x2 mosaic of `out_size`x`out_size`, tiles placed TL, TR, BL, BR.
pub fn assemble_mosaic(patches: &[RgbImage], out_size: u32) -> Result<RgbImage> {
    if patches.len() != 4 {
        return Err(Error::InvalidInput(format!("mosaic needs 4 patches, got {}", patches.len())));
    }
    if out_size == 0 || !out_size.is_multiple_of(2) {
        return Err(Error::InvalidInput(format!("mosaic size {out_size} must be even and > 0")));
    }
    let half = out_size / 2;
    let mut out = RgbImage::new(out_size, out_size);
    for (k, p) in patches.iter().enumerate() {
        let tile = resize_patch(p, half);
        let (x, y) = ((k as u32 % 2) * half, (k as u32 / 2) * half);
        image::imageops::replace(&mut out, &tile, i64::from(x), i64::from(y));
    }
    Ok(out)
}

/// Pixels of one synthetic item, rebuilt from its tile records.
pub fn render_item(item: &SyntheticItem, source: &dyn ImageSource, out_size: u32) -> Result<RgbImage> {
    item.validate()?;
    let patches = item
        .tiles
        .iter()
        .map(|t| crop_patch(&source.load(&t.source_id)?, t.crop_box))
        .collect::<Result<Vec<_>>>()?;
    match item.mode {
        Mode::Mosaic => assemble_mosaic(&patches, out_size),
        Mode::Single => Ok(resize_patch(&patches[0], out_size)),
    }
}

/// Render every item and write it under `out_dir` at its manifest path.
pub fn write_item_images(
    manifest: &SyntheticManifest,
    source: &dyn ImageSource,
    out_dir: &Path,
) -> Result<()> {
    for class in &manifest.header.classes {
        let dir = out_dir.join(class);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    manifest.items.par_iter().try_for_each(|item| {
        let img = render_item(item, source, manifest.header.output_size)?;
        save_png(&img, &out_dir.join(&item.file))
    })
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other),
        })
}

pub fn load_item_image(manifest_dir: &Path, item: &SyntheticItem) -> Result<RgbImage> {
    let path = manifest_dir.join(&item.file);
    Ok(image::open(&path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(&path, io),
            other => Error::Image(other),
        })?
        .to_rgb8())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SourceSpec;
    use crate::manifest::tests::sample_manifest;
    use image::Rgb;

    fn gradient(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([x as u8, y as u8, (x * 7 + y * 13) as u8]))
    }

    fn constant(c: u8, size: u32) -> RgbImage {
        RgbImage::from_pixel(size, size, Rgb([c, 255 - c, c / 2]))
    }

    #[test]
    fn full_box_is_identity() {
        let img = gradient(9, 5);
        assert_eq!(crop_patch(&img, CropBox { x: 0, y: 0, w: 9, h: 5 }).unwrap(), img);
    }

    #[test]
    fn top_left_block() {
        let img = gradient(4, 4);
        let p = crop_patch(&img, CropBox { x: 0, y: 0, w: 2, h: 2 }).unwrap();
        for (x, y, px) in p.enumerate_pixels() {
            assert_eq!(px, img.get_pixel(x, y));
        }
    }

    #[test]
    fn overlapping_boxes_share_pixels() {
        let img = gradient(20, 20);
        let a = CropBox { x: 2, y: 3, w: 10, h: 10 };
        let b = CropBox { x: 7, y: 5, w: 10, h: 10 };
        let (pa, pb) = (crop_patch(&img, a).unwrap(), crop_patch(&img, b).unwrap());
        for y in 5..13 {
            for x in 7..12 {
                assert_eq!(pa.get_pixel(x - a.x, y - a.y), pb.get_pixel(x - b.x, y - b.y));
            }
        }
    }

    #[test]
    fn out_of_bounds_rejected() {
        let img = gradient(8, 8);
        assert!(crop_patch(&img, CropBox { x: 4, y: 0, w: 5, h: 2 }).is_err());
        assert!(crop_patch(&img, CropBox { x: 0, y: 0, w: 0, h: 2 }).is_err());
        assert!(crop_patch(&img, CropBox { x: u32::MAX, y: 0, w: 2, h: 2 }).is_err());
    }

    #[test]
    fn constant_patches_give_constant_quadrants() {
        let patches: Vec<RgbImage> = [10, 90, 170, 250].iter().map(|&c| constant(c, 37)).collect();
        let m = assemble_mosaic(&patches, 224).unwrap();
        assert_eq!(m.dimensions(), (224, 224));
        for (k, p) in patches.iter().enumerate() {
            let (x0, y0) = ((k as u32 % 2) * 112, (k as u32 / 2) * 112);
            for y in 0..112 {
                for x in 0..112 {
                    assert_eq!(m.get_pixel(x0 + x, y0 + y), p.get_pixel(0, 0));
                }
            }
        }
    }

    #[test]
    fn presized_tiles_copied_bit_exact() {
        let patches: Vec<RgbImage> = (0..4).map(|k| gradient(112 + k, 112 + k)).map(|g| resize_patch(&g, 112)).collect();
        let m = assemble_mosaic(&patches, 224).unwrap();
        for (k, p) in patches.iter().enumerate() {
            let (x0, y0) = ((k as u32 % 2) * 112, (k as u32 / 2) * 112);
            let q = image::imageops::crop_imm(&m, x0, y0, 112, 112).to_image();
            assert_eq!(&q, p);
        }
    }

    #[test]
    fn permutations_move_quadrants() {
        let base: Vec<RgbImage> = [0, 60, 120, 180].iter().map(|&c| constant(c, 5)).collect();
        let mut perm = [0usize, 1, 2, 3];
        let mut seen = 0;
        // Heap's algorithm over all 24 orders
        fn heap(k: usize, a: &mut [usize; 4], f: &mut dyn FnMut(&[usize; 4])) {
            if k == 1 {
                f(a);
                return;
            }
            for i in 0..k {
                heap(k - 1, a, f);
                if k.is_multiple_of(2) { a.swap(i, k - 1) } else { a.swap(0, k - 1) }
            }
        }
        heap(4, &mut perm, &mut |p| {
            let ordered: Vec<RgbImage> = p.iter().map(|&i| base[i].clone()).collect();
            let m = assemble_mosaic(&ordered, 8).unwrap();
            for (q, &i) in p.iter().enumerate() {
                let (x0, y0) = ((q as u32 % 2) * 4, (q as u32 / 2) * 4);
                assert_eq!(m.get_pixel(x0 + 1, y0 + 2), base[i].get_pixel(0, 0));
            }
            seen += 1;
        });
        assert_eq!(seen, 24);
    }

    #[test]
    fn wrong_patch_count_rejected() {
        assert!(assemble_mosaic(&[constant(1, 4)], 8).is_err());
        assert!(assemble_mosaic(&vec![constant(1, 4); 4], 7).is_err());
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let m = sample_manifest(Mode::Mosaic, 2, &["class0", "class1"]);
        let src = m.header.source.clone();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_item_images(&m, &src, a.path()).unwrap();
        write_item_images(&m, &src, b.path()).unwrap();
        for item in &m.items {
            let fa = std::fs::read(a.path().join(&item.file)).unwrap();
            assert_eq!(fa, std::fs::read(b.path().join(&item.file)).unwrap());
            let img = load_item_image(a.path(), item).unwrap();
            assert_eq!(img, render_item(item, &src, 16).unwrap());
            assert_eq!(img.dimensions(), (16, 16));
        }
        assert!(matches!(src, SourceSpec::Mock { .. }));
    }
}
