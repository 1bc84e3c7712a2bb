//! Patch discriminator: stacked stride-2 4x4 convolutions with leaky ReLU,
//! instance norm from the second stage on, and a one-channel logit map whose
//! cells each see a 70-pixel receptive field.

use autodiff::{Conv2d, InstanceNorm2d, Padding, Tensor, Var};
use rand_chacha::ChaCha20Rng;

const LEAK: f64 = 0.2;

pub struct PatchDiscriminator {
    c1: Conv2d,
    c2: Conv2d,
    n2: InstanceNorm2d,
    c3: Conv2d,
    n3: InstanceNorm2d,
    c4: Conv2d,
    n4: InstanceNorm2d,
    out: Conv2d,
}

impl PatchDiscriminator {
    pub fn new(name: &str, width: usize, rng: &mut ChaCha20Rng) -> PatchDiscriminator {
        let w = width;
        let p = Padding::Zero(1);
        PatchDiscriminator {
            c1: Conv2d::new(&format!("{name}/c1"), 3, w, 4, 2, p, rng),
            c2: Conv2d::new(&format!("{name}/c2"), w, 2 * w, 4, 2, p, rng),
            n2: InstanceNorm2d::new(&format!("{name}/n2"), 2 * w),
            c3: Conv2d::new(&format!("{name}/c3"), 2 * w, 4 * w, 4, 2, p, rng),
            n3: InstanceNorm2d::new(&format!("{name}/n3"), 4 * w),
            c4: Conv2d::new(&format!("{name}/c4"), 4 * w, 8 * w, 4, 1, p, rng),
            n4: InstanceNorm2d::new(&format!("{name}/n4"), 8 * w),
            out: Conv2d::new(&format!("{name}/out"), 8 * w, 1, 4, 1, p, rng),
        }
    }

    /// Logit map over overlapping patches, shape [N, 1, H', W'].
    pub fn forward(&self, x: &Tensor, frozen: bool) -> Tensor {
        let h = self.c1.forward(x, frozen).leaky_relu(LEAK);
        let h = self
            .n2
            .forward(&self.c2.forward(&h, frozen), frozen)
            .leaky_relu(LEAK);
        let h = self
            .n3
            .forward(&self.c3.forward(&h, frozen), frozen)
            .leaky_relu(LEAK);
        let h = self
            .n4
            .forward(&self.c4.forward(&h, frozen), frozen)
            .leaky_relu(LEAK);
        self.out.forward(&h, frozen)
    }

    pub fn params(&self, out: &mut Vec<Var>) {
        self.c1.params(out);
        self.c2.params(out);
        self.n2.params(out);
        self.c3.params(out);
        self.n3.params(out);
        self.c4.params(out);
        self.n4.params(out);
        self.out.params(out);
    }
}
