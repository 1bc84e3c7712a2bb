//! Projection heads: one two-layer MLP per tap, mapping sampled feature rows
//! to 256-dimensional embeddings. Outputs are unnormalized; contrastive
//! losses normalize where they need to.

use crate::config::TapPoint;
use autodiff::{Linear, Tensor, Var};
use rand_chacha::ChaCha20Rng;

pub const EMBED_DIM: usize = 256;

/// Channel count a tap produces for a generator of the given base width.
pub fn tap_channels(tap: TapPoint, base_width: usize) -> usize {
    match tap {
        TapPoint::Rgb => 3,
        TapPoint::Down1 => 2 * base_width,
        TapPoint::Down2 | TapPoint::Res(_) => 4 * base_width,
    }
}

#[derive(Clone)]
struct FeatureHead {
    l1: Linear,
    l2: Linear,
}

impl FeatureHead {
    fn new(name: &str, cin: usize, rng: &mut ChaCha20Rng) -> FeatureHead {
        FeatureHead {
            l1: Linear::new(&format!("{name}/l1"), cin, EMBED_DIM, rng),
            l2: Linear::new(&format!("{name}/l2"), EMBED_DIM, EMBED_DIM, rng),
        }
    }

    fn forward(&self, rows: &Tensor, frozen: bool) -> Tensor {
        let h = self.l1.forward(rows, frozen).relu();
        self.l2.forward(&h, frozen)
    }
}

/// The per-tap head stack for one domain embedding.
#[derive(Clone)]
pub struct ProjectionHeads {
    taps: Vec<TapPoint>,
    heads: Vec<FeatureHead>,
}

impl ProjectionHeads {
    pub fn new(
        name: &str,
        taps: &[TapPoint],
        base_width: usize,
        rng: &mut ChaCha20Rng,
    ) -> ProjectionHeads {
        let heads = taps
            .iter()
            .map(|tap| {
                FeatureHead::new(
                    &format!("{name}/{}", tap.name()),
                    tap_channels(*tap, base_width),
                    rng,
                )
            })
            .collect();
        ProjectionHeads {
            taps: taps.to_vec(),
            heads,
        }
    }

    pub fn taps(&self) -> &[TapPoint] {
        &self.taps
    }

    /// Projects [S, C_l] sampled rows from tap `idx` to [S, 256].
    pub fn forward(&self, idx: usize, rows: &Tensor, frozen: bool) -> Tensor {
        self.heads[idx].forward(rows, frozen)
    }

    pub fn params(&self, out: &mut Vec<Var>) {
        for head in &self.heads {
            head.l1.params(out);
            head.l2.params(out);
        }
    }
}
