//! Replay pool for translated images shown to a critic. Until the pool
//! fills, queries store the image and return it; afterwards each query
//! either passes the new image through or swaps it for a random stored one,
//! with equal probability. Zero capacity is pure passthrough. The pool owns
//! its stream so its draws serialize with the run.

use crate::error::{Error, Result};
use autodiff::archive::Archive;
use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub struct ImagePool {
    capacity: usize,
    images: Vec<ArrayD<f64>>,
    rng: ChaCha20Rng,
}

impl ImagePool {
    pub fn new(capacity: usize, rng: ChaCha20Rng) -> ImagePool {
        ImagePool {
            capacity,
            images: Vec::with_capacity(capacity),
            rng,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Offers one detached image; returns the image the critic should see.
    pub fn query(&mut self, image: ArrayD<f64>) -> ArrayD<f64> {
        if self.capacity == 0 {
            return image;
        }
        if self.images.len() < self.capacity {
            self.images.push(image.clone());
            return image;
        }
        if self.rng.random_bool(0.5) {
            image
        } else {
            let slot = self.rng.random_range(0..self.capacity);
            std::mem::replace(&mut self.images[slot], image)
        }
    }

    /// Serializes contents and stream position under `prefix` keys.
    pub fn write_state(&self, archive: &mut Archive, prefix: &str) {
        archive.put_uint(format!("{prefix}/count"), self.images.len() as u64);
        for (i, img) in self.images.iter().enumerate() {
            archive.put_array(format!("{prefix}/img_{i}"), img.clone());
        }
        let seed_hex: String = self
            .rng
            .get_seed()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        archive.put_text(format!("{prefix}/rng_seed"), seed_hex);
        archive.put_text(
            format!("{prefix}/rng_word_pos"),
            self.rng.get_word_pos().to_string(),
        );
    }

    /// Restores a pool previously written with [`write_state`]. The capacity
    /// comes from the current configuration; stored contents beyond it are
    /// rejected rather than silently truncated.
    pub fn read_state(capacity: usize, archive: &Archive, prefix: &str) -> Result<ImagePool> {
        let bad = |msg: String| Error::Data(msg);
        let count = archive
            .get_uint(&format!("{prefix}/count"))
            .map_err(|e| bad(format!("{prefix}: {e}")))? as usize;
        if count > capacity {
            return Err(bad(format!(
                "{prefix} holds {count} images but the configured capacity is {capacity}"
            )));
        }
        let mut images = Vec::with_capacity(count);
        for i in 0..count {
            let img = archive
                .get_array(&format!("{prefix}/img_{i}"))
                .map_err(|e| bad(format!("{prefix}: {e}")))?;
            images.push(img.clone());
        }
        let seed_hex = archive
            .get_text(&format!("{prefix}/rng_seed"))
            .map_err(|e| bad(format!("{prefix}: {e}")))?;
        if seed_hex.len() != 64 || !seed_hex.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(bad(format!("{prefix}: malformed stream seed")));
        }
        let mut seed = [0u8; 32];
        for (i, chunk) in seed_hex.as_bytes().chunks(2).enumerate() {
            seed[i] = u8::from_str_radix(std::str::from_utf8(chunk).unwrap(), 16).unwrap();
        }
        let pos: u128 = archive
            .get_text(&format!("{prefix}/rng_word_pos"))
            .map_err(|e| bad(format!("{prefix}: {e}")))?
            .parse()
            .map_err(|_| bad(format!("{prefix}: malformed stream position")))?;
        let mut rng = ChaCha20Rng::from_seed(seed);
        rng.set_word_pos(pos);
        Ok(ImagePool {
            capacity,
            images,
            rng,
        })
    }
}
