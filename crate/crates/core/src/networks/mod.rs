//! Network construction and wiring: the translation pair, the two patch
//! critics, the per-domain projection heads, and (in the variant mode) the
//! four light networks. Each network draws its init parameters from its own
//! derived stream so the set of networks built never shifts another's init.

mod discriminator;
mod generator;
mod heads;
mod light;

pub use discriminator::PatchDiscriminator;
pub use generator::Generator;
pub use heads::{tap_channels, ProjectionHeads, EMBED_DIM};
pub use light::{LightNet, LightNets, LIGHT_DIM};

use crate::config::{Mode, TrainConfig};
use autodiff::seed::derive_rng;
use autodiff::Var;

pub struct NetBundle {
    /// G, the X to Y translator. Always present.
    pub gen_xy: Generator,
    /// F, the reverse translator. Absent in the single-direction ablation.
    pub gen_yx: Option<Generator>,
    /// Critic over domain X images (judges F outputs). Absent with F.
    pub disc_x: Option<PatchDiscriminator>,
    /// Critic over domain Y images (judges G outputs).
    pub disc_y: PatchDiscriminator,
    /// Projection heads paired with G's encoder.
    pub head_x: ProjectionHeads,
    /// Projection heads paired with F's encoder. Aliases head_x under the
    /// shared-embedding ablation.
    pub head_y: ProjectionHeads,
    /// Light networks, present only in the variant mode.
    pub light: Option<LightNets>,
}

impl NetBundle {
    pub fn build(cfg: &TrainConfig) -> NetBundle {
        let taps = cfg.effective_taps();
        let w = cfg.net.base_width;
        let blocks = cfg.net.residual_blocks;
        let dw = cfg.net.disc_width;
        let rng_for = |idx: u64| derive_rng(cfg.seed, "init", &[idx]);

        let gen_xy = Generator::new("gen_xy", w, blocks, &mut rng_for(0));
        let gen_yx = (!cfg.ablation.single_direction).then(|| {
            let mut g = Generator::new("gen_yx", w, blocks, &mut rng_for(1));
            if cfg.ablation.shared_embedding {
                g.alias_encoder(&gen_xy);
            }
            g
        });
        let disc_x = (!cfg.ablation.single_direction)
            .then(|| PatchDiscriminator::new("disc_x", dw, &mut rng_for(2)));
        let disc_y = PatchDiscriminator::new("disc_y", dw, &mut rng_for(3));
        let head_x = ProjectionHeads::new("head_x", &taps, w, &mut rng_for(4));
        let head_y = if cfg.ablation.shared_embedding {
            head_x.clone()
        } else {
            ProjectionHeads::new("head_y", &taps, w, &mut rng_for(5))
        };
        let light = (cfg.mode == Mode::SimDcl).then(|| LightNets {
            xr: LightNet::new("light_xr", EMBED_DIM, &mut rng_for(6)),
            xf: LightNet::new("light_xf", EMBED_DIM, &mut rng_for(7)),
            yr: LightNet::new("light_yr", EMBED_DIM, &mut rng_for(8)),
            yf: LightNet::new("light_yf", EMBED_DIM, &mut rng_for(9)),
        });
        NetBundle {
            gen_xy,
            gen_yx,
            disc_x,
            disc_y,
            head_x,
            head_y,
            light,
        }
    }

    /// Number of networks instantiated (aliased networks still count; they
    /// exist, they just share storage).
    pub fn network_count(&self) -> usize {
        let mut n = 3; // gen_xy, disc_y, head_x
        if self.gen_yx.is_some() {
            n += 1;
        }
        if self.disc_x.is_some() {
            n += 1;
        }
        n += 1; // head_y
        if self.light.is_some() {
            n += 4;
        }
        n
    }

    /// Everything the generator-side optimizer trains: both translators, both
    /// head stacks, and the light networks. May contain aliases; the
    /// optimizer deduplicates by storage.
    pub fn generator_params(&self) -> Vec<Var> {
        let mut out = Vec::new();
        self.gen_xy.params(&mut out);
        if let Some(g) = &self.gen_yx {
            g.params(&mut out);
        }
        self.head_x.params(&mut out);
        self.head_y.params(&mut out);
        if let Some(l) = &self.light {
            l.params(&mut out);
        }
        out
    }

    pub fn discriminator_params(&self) -> Vec<Var> {
        let mut out = Vec::new();
        if let Some(d) = &self.disc_x {
            d.params(&mut out);
        }
        self.disc_y.params(&mut out);
        out
    }

    pub fn all_params(&self) -> Vec<Var> {
        let mut out = self.generator_params();
        out.extend(self.discriminator_params());
        out
    }
}
