//! Light networks for the mode-collapse-resistant variant. Each maps a stack
//! of per-layer pooled embeddings [L, 256] to a single 64-dimensional code:
//! a rowwise projection, mean over layers, then a small MLP.

use autodiff::{Linear, Tensor, Var};
use rand_chacha::ChaCha20Rng;

pub const LIGHT_DIM: usize = 64;

pub struct LightNet {
    l1: Linear,
    l2: Linear,
    l3: Linear,
}

impl LightNet {
    pub fn new(name: &str, in_dim: usize, rng: &mut ChaCha20Rng) -> LightNet {
        LightNet {
            l1: Linear::new(&format!("{name}/l1"), in_dim, LIGHT_DIM, rng),
            l2: Linear::new(&format!("{name}/l2"), LIGHT_DIM, LIGHT_DIM, rng),
            l3: Linear::new(&format!("{name}/l3"), LIGHT_DIM, LIGHT_DIM, rng),
        }
    }

    /// [L, in_dim] pooled layer embeddings to a [1, 64] code.
    pub fn forward(&self, pooled: &Tensor, frozen: bool) -> Tensor {
        let h = self.l1.forward(pooled, frozen).relu().mean_rows();
        let h = self.l2.forward(&h, frozen).relu();
        self.l3.forward(&h, frozen)
    }

    pub fn params(&self, out: &mut Vec<Var>) {
        self.l1.params(out);
        self.l2.params(out);
        self.l3.params(out);
    }
}

/// The four light networks: one per (domain, real/translated) combination.
pub struct LightNets {
    pub xr: LightNet,
    pub xf: LightNet,
    pub yr: LightNet,
    pub yf: LightNet,
}

impl LightNets {
    pub fn params(&self, out: &mut Vec<Var>) {
        self.xr.params(out);
        self.xf.params(out);
        self.yr.params(out);
        self.yf.params(out);
    }
}
