//! Image IO, value normalization, training augmentation, and the unpaired
//! two-domain dataset. Every sample is addressed by (epoch, index) so a
//! resumed run replays the exact byte stream of the original.

use crate::error::{Error, Result};
use autodiff::seed::derive_rng;
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use std::path::{Path, PathBuf};

/// Maps a byte channel value into the generator range [-1, 1].
pub fn normalize(v: u8) -> f64 {
    f64::from(v) / 127.5 - 1.0
}

/// Inverse of [`normalize`]: rounds to the nearest byte and clamps, so every
/// byte value roundtrips exactly and out-of-range activations saturate.
pub fn denormalize(v: f64) -> u8 {
    let scaled = (127.5 * (v + 1.0)).round();
    scaled.clamp(0.0, 255.0) as u8
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other}", path.display())),
    }
}

/// Decodes an image to a [3, H, W] array in [-1, 1]. Grayscale sources come
/// back with the channel replicated.
pub fn load_image(path: &Path) -> Result<Array3<f64>> {
    let decoded = image::open(path).map_err(|e| image_error(path, e))?;
    let rgb = decoded.to_rgb8();
    let (w, h) = rgb.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, pixel) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = normalize(pixel.0[c]);
        }
    }
    Ok(out)
}

/// Writes a [3, H, W] array in [-1, 1] as an 8-bit PNG, creating parent
/// directories as needed.
pub fn save_image(path: &Path, img: &Array3<f64>) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(Error::Data(format!("expected 3 channels, got {c}")));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| denormalize(img[[ch, y as usize, x as usize]]);
        image::Rgb([px(0), px(1), px(2)])
    });
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_error(path, e))
}

/// Bilinear resampling with half-pixel centers. Identical input and output
/// extents return a plain copy.
pub fn bilinear_resize(img: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, h, w) = img.dim();
    assert!(out_h > 0 && out_w > 0, "empty resize target");
    if (h, w) == (out_h, out_w) {
        return img.clone();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = Array3::zeros((c, out_h, out_w));
    for i in 0..out_h {
        let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for j in 0..out_w {
            let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ch in 0..c {
                let top = (1.0 - wx) * img[[ch, y0, x0]] + wx * img[[ch, y0, x1]];
                let bot = (1.0 - wx) * img[[ch, y1, x0]] + wx * img[[ch, y1, x1]];
                out[[ch, i, j]] = (1.0 - wy) * top + wy * bot;
            }
        }
    }
    out
}

fn hflip(img: &Array3<f64>) -> Array3<f64> {
    let mut out = img.clone();
    out.invert_axis(ndarray::Axis(2));
    out
}

/// Training-time augmentation: resize to the load extent, take a uniform
/// random crop, and flip horizontally with probability one half when enabled.
/// The draw order (crop row, crop column, flip) is part of the byte contract.
pub fn augment<R: Rng>(
    img: &Array3<f64>,
    load_size: usize,
    crop_size: usize,
    flip: bool,
    rng: &mut R,
) -> Array3<f64> {
    assert!(crop_size <= load_size, "crop exceeds load extent");
    let resized = bilinear_resize(img, load_size, load_size);
    let max_off = load_size - crop_size;
    let oy = rng.random_range(0..=max_off);
    let ox = rng.random_range(0..=max_off);
    let cropped = resized
        .slice(ndarray::s![.., oy..oy + crop_size, ox..ox + crop_size])
        .to_owned();
    if flip && rng.random_bool(0.5) {
        hflip(&cropped)
    } else {
        cropped
    }
}

/// Deterministic inference-time preparation: resize straight to the crop
/// extent with no crop or flip.
pub fn load_test_image(path: &Path, crop_size: usize) -> Result<Array3<f64>> {
    let img = load_image(path)?;
    Ok(bilinear_resize(&img, crop_size, crop_size))
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| {
            let lower = e.to_ascii_lowercase();
            IMAGE_EXTENSIONS.contains(&lower.as_str())
        })
        .unwrap_or(false)
}

/// Lists decodable images under `dir` in name order. Undecodable candidates
/// are skipped with a warning; an empty survivor set is an error.
pub fn scan_image_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut candidates: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file() && has_image_extension(&path) {
            candidates.push(path);
        }
    }
    candidates.sort();
    if candidates.is_empty() {
        return Err(Error::Data(format!(
            "no image files (png/jpg/jpeg) in {}",
            dir.display()
        )));
    }
    let mut kept = Vec::with_capacity(candidates.len());
    for path in candidates {
        match image::open(&path) {
            Ok(_) => kept.push(path),
            Err(e) => eprintln!("warning: skipping undecodable {}: {e}", path.display()),
        }
    }
    if kept.is_empty() {
        return Err(Error::Data(format!(
            "no decodable images in {}",
            dir.display()
        )));
    }
    Ok(kept)
}

/// Two image folders with per-epoch repairing. Sampling is a pure function
/// of (seed, epoch, index): each epoch both domains are shuffled from a
/// derived stream, the longer one is implicitly subsampled to the epoch
/// length, and per-sample augmentation draws from its own stream.
pub struct UnpairedDataset {
    paths_x: Vec<PathBuf>,
    paths_y: Vec<PathBuf>,
    seed: u64,
    load_size: usize,
    crop_size: usize,
    flip: bool,
}

impl UnpairedDataset {
    pub fn open(
        dir_x: &Path,
        dir_y: &Path,
        seed: u64,
        load_size: usize,
        crop_size: usize,
        flip: bool,
    ) -> Result<UnpairedDataset> {
        Ok(UnpairedDataset {
            paths_x: scan_image_dir(dir_x)?,
            paths_y: scan_image_dir(dir_y)?,
            seed,
            load_size,
            crop_size,
            flip,
        })
    }

    /// Samples per epoch: the smaller domain's size.
    pub fn epoch_len(&self) -> usize {
        self.paths_x.len().min(self.paths_y.len())
    }

    pub fn domain_sizes(&self) -> (usize, usize) {
        (self.paths_x.len(), self.paths_y.len())
    }

    fn epoch_permutations(&self, epoch: usize) -> (Vec<usize>, Vec<usize>) {
        let mut rng = derive_rng(self.seed, "pairing", &[epoch as u64]);
        let mut px: Vec<usize> = (0..self.paths_x.len()).collect();
        let mut py: Vec<usize> = (0..self.paths_y.len()).collect();
        px.shuffle(&mut rng);
        py.shuffle(&mut rng);
        (px, py)
    }

    /// The source paths paired at (epoch, idx), before augmentation.
    pub fn pair_paths(&self, epoch: usize, idx: usize) -> (&Path, &Path) {
        assert!(idx < self.epoch_len(), "sample index out of epoch range");
        let (px, py) = self.epoch_permutations(epoch);
        (&self.paths_x[px[idx]], &self.paths_y[py[idx]])
    }

    /// Loads and augments the (epoch, idx) pair. Stateless: calling twice
    /// with the same arguments yields bit-identical arrays.
    pub fn sample(&self, epoch: usize, idx: usize) -> Result<(Array3<f64>, Array3<f64>)> {
        let (path_x, path_y) = {
            let (a, b) = self.pair_paths(epoch, idx);
            (a.to_path_buf(), b.to_path_buf())
        };
        let raw_x = load_image(&path_x)?;
        let raw_y = load_image(&path_y)?;
        let mut rng = derive_rng(self.seed, "aug", &[epoch as u64, idx as u64]);
        let x = augment(&raw_x, self.load_size, self.crop_size, self.flip, &mut rng);
        let y = augment(&raw_y, self.load_size, self.crop_size, self.flip, &mut rng);
        Ok((x, y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn write_png(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) {
        let img = image::RgbImage::from_fn(w, h, |x, y| image::Rgb(f(x, y)));
        img.save_with_format(path, image::ImageFormat::Png).unwrap();
    }

    #[test]
    fn every_byte_value_roundtrips() {
        for v in 0..=255u8 {
            assert_eq!(denormalize(normalize(v)), v);
        }
        assert_eq!(normalize(0), -1.0);
        assert_eq!(normalize(255), 1.0);
    }

    #[test]
    fn denormalize_saturates() {
        assert_eq!(denormalize(-1.7), 0);
        assert_eq!(denormalize(2.3), 255);
    }

    #[test]
    fn resize_preserves_constant_images() {
        let img = Array3::from_elem((3, 5, 7), 0.25);
        let out = bilinear_resize(&img, 11, 4);
        assert_eq!(out.dim(), (3, 11, 4));
        for &v in out.iter() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_matches_hand_computed_midpoints() {
        let mut img = Array3::zeros((1, 1, 2));
        img[[0, 0, 0]] = 0.0;
        img[[0, 0, 1]] = 1.0;
        let out = bilinear_resize(&img, 1, 4);
        // Half-pixel centers: samples at source x = -0.25, 0.25, 0.75, 1.25.
        let expect = [0.0, 0.25, 0.75, 1.0];
        for (j, e) in expect.iter().enumerate() {
            assert!((out[[0, 0, j]] - e).abs() < 1e-12, "col {j}");
        }
    }

    #[test]
    fn grayscale_loads_with_replicated_channels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        let img = image::GrayImage::from_fn(4, 3, |x, y| image::Luma([(x * 10 + y) as u8]));
        img.save_with_format(&path, image::ImageFormat::Png)
            .unwrap();
        let loaded = load_image(&path).unwrap();
        assert_eq!(loaded.dim(), (3, 3, 4));
        for y in 0..3 {
            for x in 0..4 {
                let v = loaded[[0, y, x]];
                assert_eq!(loaded[[1, y, x]], v);
                assert_eq!(loaded[[2, y, x]], v);
            }
        }
    }

    #[test]
    fn save_and_load_are_inverse_on_byte_data() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.png");
        let mut img = Array3::zeros((3, 6, 5));
        for (i, v) in img.iter_mut().enumerate() {
            *v = normalize((i * 7 % 256) as u8);
        }
        save_image(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn test_image_resizes_without_cropping() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        write_png(&path, 31, 17, |x, y| [x as u8, y as u8, 0]);
        let img = load_test_image(&path, 16).unwrap();
        assert_eq!(img.dim(), (3, 16, 16));
    }

    #[test]
    fn undecodable_files_are_skipped_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("junk.png"), b"not a png at all").unwrap();
        write_png(&dir.path().join("ok.png"), 4, 4, |_, _| [1, 2, 3]);
        let paths = scan_image_dir(dir.path()).unwrap();
        assert_eq!(paths.len(), 1);
        assert!(paths[0].ends_with("ok.png"));
    }

    #[test]
    fn all_undecodable_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.png"), b"garbage").unwrap();
        std::fs::write(dir.path().join("b.jpg"), b"more garbage").unwrap();
        assert!(matches!(scan_image_dir(dir.path()), Err(Error::Data(_))));
    }

    #[test]
    fn empty_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(scan_image_dir(dir.path()).is_err());
    }

    fn toy_dataset(nx: u32, ny: u32) -> (tempfile::TempDir, UnpairedDataset) {
        let root = tempfile::tempdir().unwrap();
        let dx = root.path().join("trainA");
        let dy = root.path().join("trainB");
        std::fs::create_dir_all(&dx).unwrap();
        std::fs::create_dir_all(&dy).unwrap();
        for i in 0..nx {
            write_png(&dx.join(format!("x{i}.png")), 12, 12, move |x, y| {
                [(i * 20) as u8, x as u8, y as u8]
            });
        }
        for i in 0..ny {
            write_png(&dy.join(format!("y{i}.png")), 12, 12, move |x, y| {
                [255 - (i * 20) as u8, y as u8, x as u8]
            });
        }
        let ds = UnpairedDataset::open(&dx, &dy, 7, 10, 8, true).unwrap();
        (root, ds)
    }

    #[test]
    fn epoch_length_is_smaller_domain() {
        let (_root, ds) = toy_dataset(5, 3);
        assert_eq!(ds.epoch_len(), 3);
        assert_eq!(ds.domain_sizes(), (5, 3));
    }

    #[test]
    fn sampling_is_stateless_and_epoch_sensitive() {
        let (_root, ds) = toy_dataset(4, 4);
        let (x1, y1) = ds.sample(2, 1).unwrap();
        let (x2, y2) = ds.sample(2, 1).unwrap();
        assert_eq!(x1, x2);
        assert_eq!(y1, y2);
        assert_eq!(x1.dim(), (3, 8, 8));

        let mut pairs_a: Vec<_> = (0..4).map(|i| ds.pair_paths(0, i).0.to_owned()).collect();
        let mut pairs_b: Vec<_> = (0..4).map(|i| ds.pair_paths(1, i).0.to_owned()).collect();
        // Within an epoch every source is used once.
        pairs_a.sort();
        pairs_a.dedup();
        assert_eq!(pairs_a.len(), 4);
        // Across epochs the order changes for this seed.
        pairs_b.sort();
        assert_eq!(pairs_a, pairs_b);
        let order_a: Vec<_> = (0..4).map(|i| ds.pair_paths(0, i).0.to_owned()).collect();
        let order_b: Vec<_> = (0..4).map(|i| ds.pair_paths(1, i).0.to_owned()).collect();
        assert_ne!(order_a, order_b);
    }

    #[test]
    fn domains_shuffle_independently() {
        let (_root, ds) = toy_dataset(6, 6);
        let (px, py): (Vec<_>, Vec<_>) = (0..6)
            .map(|i| {
                let (a, b) = ds.pair_paths(0, i);
                (
                    a.file_name().unwrap().to_owned(),
                    b.file_name().unwrap().to_owned(),
                )
            })
            .unzip();
        let xi: Vec<usize> = px
            .iter()
            .map(|n| n.to_str().unwrap()[1..2].parse().unwrap())
            .collect();
        let yi: Vec<usize> = py
            .iter()
            .map(|n| n.to_str().unwrap()[1..2].parse().unwrap())
            .collect();
        assert_ne!(xi, yi);
    }
}
