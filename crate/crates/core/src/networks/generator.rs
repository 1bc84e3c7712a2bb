//! Residual translation generator: a 7x7 reflect-padded stem, two stride-2
//! downsamplers, a residual trunk, two transposed-conv upsamplers, and a
//! tanh output stage. The first half of the trunk (rounded up) together with
//! the stem and downsamplers forms the feature encoder.

use crate::config::TapPoint;
use autodiff::{Conv2d, ConvTranspose2d, InstanceNorm2d, Padding, Tensor, Var};
use rand_chacha::ChaCha20Rng;

#[derive(Clone)]
struct ResBlock {
    conv1: Conv2d,
    norm1: InstanceNorm2d,
    conv2: Conv2d,
    norm2: InstanceNorm2d,
}

impl ResBlock {
    fn new(name: &str, channels: usize, rng: &mut ChaCha20Rng) -> ResBlock {
        ResBlock {
            conv1: Conv2d::new(
                &format!("{name}/conv1"),
                channels,
                channels,
                3,
                1,
                Padding::Reflect(1),
                rng,
            ),
            norm1: InstanceNorm2d::new(&format!("{name}/norm1"), channels),
            conv2: Conv2d::new(
                &format!("{name}/conv2"),
                channels,
                channels,
                3,
                1,
                Padding::Reflect(1),
                rng,
            ),
            norm2: InstanceNorm2d::new(&format!("{name}/norm2"), channels),
        }
    }

    fn forward(&self, x: &Tensor, frozen: bool) -> Tensor {
        let h = self
            .norm1
            .forward(&self.conv1.forward(x, frozen), frozen)
            .relu();
        let h = self.norm2.forward(&self.conv2.forward(&h, frozen), frozen);
        x.add(&h)
    }

    fn params(&self, out: &mut Vec<Var>) {
        self.conv1.params(out);
        self.norm1.params(out);
        self.conv2.params(out);
        self.norm2.params(out);
    }
}

pub struct Generator {
    stem: Conv2d,
    stem_norm: InstanceNorm2d,
    down1: Conv2d,
    down1_norm: InstanceNorm2d,
    down2: Conv2d,
    down2_norm: InstanceNorm2d,
    blocks: Vec<ResBlock>,
    up1: ConvTranspose2d,
    up1_norm: InstanceNorm2d,
    up2: ConvTranspose2d,
    up2_norm: InstanceNorm2d,
    out: Conv2d,
    encoder_blocks: usize,
}

/// Encoder activations captured during a forward pass.
struct EncoderTrace {
    input: Tensor,
    down1: Tensor,
    down2: Tensor,
    res: Vec<Tensor>,
}

impl Generator {
    pub fn new(name: &str, width: usize, blocks: usize, rng: &mut ChaCha20Rng) -> Generator {
        assert!(blocks >= 1, "trunk needs at least one block");
        let w = width;
        Generator {
            stem: Conv2d::new(
                &format!("{name}/stem"),
                3,
                w,
                7,
                1,
                Padding::Reflect(3),
                rng,
            ),
            stem_norm: InstanceNorm2d::new(&format!("{name}/stem_norm"), w),
            down1: Conv2d::new(
                &format!("{name}/down1"),
                w,
                2 * w,
                3,
                2,
                Padding::Zero(1),
                rng,
            ),
            down1_norm: InstanceNorm2d::new(&format!("{name}/down1_norm"), 2 * w),
            down2: Conv2d::new(
                &format!("{name}/down2"),
                2 * w,
                4 * w,
                3,
                2,
                Padding::Zero(1),
                rng,
            ),
            down2_norm: InstanceNorm2d::new(&format!("{name}/down2_norm"), 4 * w),
            blocks: (0..blocks)
                .map(|k| ResBlock::new(&format!("{name}/res{}", k + 1), 4 * w, rng))
                .collect(),
            up1: ConvTranspose2d::new(&format!("{name}/up1"), 4 * w, 2 * w, 3, 2, 1, 1, rng),
            up1_norm: InstanceNorm2d::new(&format!("{name}/up1_norm"), 2 * w),
            up2: ConvTranspose2d::new(&format!("{name}/up2"), 2 * w, w, 3, 2, 1, 1, rng),
            up2_norm: InstanceNorm2d::new(&format!("{name}/up2_norm"), w),
            out: Conv2d::new(&format!("{name}/out"), w, 3, 7, 1, Padding::Reflect(3), rng),
            encoder_blocks: (blocks + 1) / 2,
        }
    }

    pub fn encoder_blocks(&self) -> usize {
        self.encoder_blocks
    }

    fn check_input(x: &Tensor) {
        let shape = x.shape();
        assert_eq!(shape.len(), 4, "generator input must be [N, C, H, W]");
        assert!(
            shape[2] % 4 == 0 && shape[3] % 4 == 0 && shape[2] >= 4 && shape[3] >= 4,
            "spatial extents must be positive multiples of 4, got {}x{}",
            shape[2],
            shape[3]
        );
    }

    fn encoder_pass(&self, x: &Tensor, frozen: bool) -> EncoderTrace {
        Self::check_input(x);
        let h = self
            .stem_norm
            .forward(&self.stem.forward(x, frozen), frozen)
            .relu();
        let d1 = self
            .down1_norm
            .forward(&self.down1.forward(&h, frozen), frozen)
            .relu();
        let d2 = self
            .down2_norm
            .forward(&self.down2.forward(&d1, frozen), frozen)
            .relu();
        let mut res = Vec::with_capacity(self.encoder_blocks);
        let mut cur = d2.clone();
        for block in &self.blocks[..self.encoder_blocks] {
            cur = block.forward(&cur, frozen);
            res.push(cur.clone());
        }
        EncoderTrace {
            input: x.clone(),
            down1: d1,
            down2: d2,
            res,
        }
    }

    /// Full translation pass. Output shape equals input shape; values land in
    /// (-1, 1) through the final tanh.
    pub fn forward(&self, x: &Tensor, frozen: bool) -> Tensor {
        let trace = self.encoder_pass(x, frozen);
        let mut cur = trace.res.last().expect("at least one block").clone();
        for block in &self.blocks[self.encoder_blocks..] {
            cur = block.forward(&cur, frozen);
        }
        let u1 = self
            .up1_norm
            .forward(&self.up1.forward(&cur, frozen), frozen)
            .relu();
        let u2 = self
            .up2_norm
            .forward(&self.up2.forward(&u1, frozen), frozen)
            .relu();
        self.out.forward(&u2, frozen).tanh()
    }

    /// Translates one [3, H, W] image without building a graph.
    pub fn translate(&self, img: &ndarray::Array3<f64>) -> ndarray::Array3<f64> {
        autodiff::no_grad(|| {
            let x = Tensor::constant(img.clone().insert_axis(ndarray::Axis(0)).into_dyn());
            self.forward(&x, false)
                .to_array()
                .index_axis(ndarray::Axis(0), 0)
                .to_owned()
                .into_dimensionality()
                .expect("translation output is [1, 3, H, W]")
        })
    }

    /// Feature maps at the requested taps, in the order given. The raw-pixel
    /// tap returns the input itself.
    pub fn encode(&self, x: &Tensor, taps: &[TapPoint], frozen: bool) -> Vec<Tensor> {
        let trace = self.encoder_pass(x, frozen);
        taps.iter()
            .map(|tap| match tap {
                TapPoint::Rgb => trace.input.clone(),
                TapPoint::Down1 => trace.down1.clone(),
                TapPoint::Down2 => trace.down2.clone(),
                TapPoint::Res(k) => {
                    assert!(
                        *k >= 1 && *k <= self.encoder_blocks,
                        "tap res{k} outside encoder ({} blocks)",
                        self.encoder_blocks
                    );
                    trace.res[k - 1].clone()
                }
            })
            .collect()
    }

    /// Shares the encoder half (stem, downsamplers, first trunk blocks) with
    /// another generator: this generator's encoder parameters become aliases
    /// of the donor's while the decoder half stays independent.
    pub fn alias_encoder(&mut self, donor: &Generator) {
        assert_eq!(
            self.encoder_blocks, donor.encoder_blocks,
            "encoder depth mismatch"
        );
        self.stem = donor.stem.clone();
        self.stem_norm = donor.stem_norm.clone();
        self.down1 = donor.down1.clone();
        self.down1_norm = donor.down1_norm.clone();
        self.down2 = donor.down2.clone();
        self.down2_norm = donor.down2_norm.clone();
        for k in 0..self.encoder_blocks {
            self.blocks[k] = donor.blocks[k].clone();
        }
    }

    pub fn params(&self, out: &mut Vec<Var>) {
        self.stem.params(out);
        self.stem_norm.params(out);
        self.down1.params(out);
        self.down1_norm.params(out);
        self.down2.params(out);
        self.down2_norm.params(out);
        for block in &self.blocks {
            block.params(out);
        }
        self.up1.params(out);
        self.up1_norm.params(out);
        self.up2.params(out);
        self.up2_norm.params(out);
        self.out.params(out);
    }

    pub fn encoder_params(&self, out: &mut Vec<Var>) {
        self.stem.params(out);
        self.stem_norm.params(out);
        self.down1.params(out);
        self.down1_norm.params(out);
        self.down2.params(out);
        self.down2_norm.params(out);
        for block in &self.blocks[..self.encoder_blocks] {
            block.params(out);
        }
    }
}
