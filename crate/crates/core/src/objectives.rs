//! Scalar training objectives: the three adversarial loss families, mean
//! absolute reconstruction penalties, the weighted total, and the per-step
//! loss report with its finiteness guard. Every term is nonnegative except
//! the hinge generator term, which is an unbounded critic mean.

use crate::config::{GanVariant, Mode, TrainConfig};
use crate::error::{Error, Result};
use autodiff::Tensor;

/// Critic loss over a map of patch logits for real and translated inputs.
pub fn gan_discriminator_loss(variant: GanVariant, real: &Tensor, fake: &Tensor) -> Tensor {
    match variant {
        GanVariant::Hinge => {
            let r = real.neg().add_scalar(1.0).relu().mean_all();
            let f = fake.add_scalar(1.0).relu().mean_all();
            r.add(&f)
        }
        GanVariant::Lsgan => {
            let r = real.add_scalar(-1.0);
            let r = r.mul(&r).mean_all();
            let f = fake.mul(fake).mean_all();
            r.add(&f)
        }
        GanVariant::Log => {
            let r = real.neg().softplus().mean_all();
            let f = fake.softplus().mean_all();
            r.add(&f)
        }
    }
}

/// Generator-side adversarial term over the critic's logits for a
/// translated image.
pub fn gan_generator_loss(variant: GanVariant, fake: &Tensor) -> Tensor {
    match variant {
        GanVariant::Hinge => fake.mean_all().neg(),
        GanVariant::Lsgan => {
            let d = fake.add_scalar(-1.0);
            d.mul(&d).mean_all()
        }
        GanVariant::Log => fake.neg().softplus().mean_all(),
    }
}

/// Mean absolute difference over every element.
pub fn mae(a: &Tensor, b: &Tensor) -> Tensor {
    a.sub(b).abs().mean_all()
}

/// Keeps each translator near the identity on its own target domain:
/// F should leave X images alone and G should leave Y images alone.
pub fn identity_loss(f_of_x: &Tensor, x: &Tensor, g_of_y: &Tensor, y: &Tensor) -> Tensor {
    mae(f_of_x, x).add(&mae(g_of_y, y))
}

/// Round-trip reconstruction penalty for the cycle ablation.
pub fn cycle_loss(f_of_g_x: &Tensor, x: &Tensor, g_of_f_y: &Tensor, y: &Tensor) -> Tensor {
    mae(f_of_g_x, x).add(&mae(g_of_f_y, y))
}

/// Weights applied to the generator-side objective. `sim` and `cycle` are
/// present exactly when their terms are active.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveWeights {
    pub gan: f64,
    pub nce: f64,
    pub idt: f64,
    pub sim: Option<f64>,
    pub cycle: Option<f64>,
}

impl ObjectiveWeights {
    pub fn from_config(cfg: &TrainConfig) -> ObjectiveWeights {
        ObjectiveWeights {
            gan: cfg.loss.lambda_gan,
            nce: cfg.loss.lambda_nce,
            idt: cfg.loss.lambda_idt,
            sim: (cfg.mode == Mode::SimDcl).then_some(cfg.loss.lambda_sim),
            cycle: cfg.loss.lambda_cycle.filter(|_| cfg.ablation.cycle_loss),
        }
    }
}

/// The unweighted generator-side terms. In the single-direction ablation the
/// reverse terms are zero (sums over an empty set).
#[derive(Debug, Clone)]
pub struct ObjectiveParts<T> {
    pub gan_g: T,
    pub gan_f: T,
    pub nce_x: T,
    pub nce_y: T,
    pub idt: T,
    pub sim: Option<T>,
    pub cycle: Option<T>,
}

fn check_presence<T>(w: &ObjectiveWeights, p: &ObjectiveParts<T>) -> Result<()> {
    match (w.sim.is_some(), p.sim.is_some()) {
        (true, false) => {
            return Err(Error::Config(
                "similarity term is active but no similarity part was supplied".to_string(),
            ))
        }
        (false, true) => {
            return Err(Error::Config(
                "similarity part supplied but the similarity term is inactive".to_string(),
            ))
        }
        _ => {}
    }
    match (w.cycle.is_some(), p.cycle.is_some()) {
        (true, false) => Err(Error::Config(
            "cycle term is active but no cycle part was supplied".to_string(),
        )),
        (false, true) => Err(Error::Config(
            "cycle part supplied but the cycle term is inactive".to_string(),
        )),
        _ => Ok(()),
    }
}

/// Weighted generator objective as a graph node, for backprop.
pub fn total_objective_tensor(w: &ObjectiveWeights, p: &ObjectiveParts<Tensor>) -> Result<Tensor> {
    check_presence(w, p)?;
    let mut total = p.gan_g.add(&p.gan_f).mul_scalar(w.gan);
    total = total.add(&p.nce_x.mul_scalar(w.nce));
    total = total.add(&p.nce_y.mul_scalar(w.nce));
    total = total.add(&p.idt.mul_scalar(w.idt));
    if let (Some(lam), Some(sim)) = (w.sim, &p.sim) {
        total = total.add(&sim.mul_scalar(lam));
    }
    if let (Some(lam), Some(cycle)) = (w.cycle, &p.cycle) {
        total = total.add(&cycle.mul_scalar(lam));
    }
    Ok(total)
}

/// Weighted generator objective on plain scalars; identical arithmetic to
/// the tensor form.
pub fn total_objective(w: &ObjectiveWeights, p: &ObjectiveParts<f64>) -> Result<f64> {
    check_presence(w, p)?;
    let mut total = (p.gan_g + p.gan_f) * w.gan;
    total += p.nce_x * w.nce;
    total += p.nce_y * w.nce;
    total += p.idt * w.idt;
    if let (Some(lam), Some(sim)) = (w.sim, p.sim) {
        total += sim * lam;
    }
    if let (Some(lam), Some(cycle)) = (w.cycle, p.cycle) {
        total += cycle * lam;
    }
    Ok(total)
}

/// Every scalar logged for one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub gan_g: f64,
    pub gan_f: f64,
    pub d_x: f64,
    pub d_y: f64,
    pub nce_x: f64,
    pub nce_y: f64,
    pub idt: f64,
    pub sim: Option<f64>,
    pub cycle: Option<f64>,
    pub total_g: f64,
}

impl LossReport {
    /// Terms in logging order, absent options skipped.
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![
            ("gan_G", self.gan_g),
            ("gan_F", self.gan_f),
            ("d_X", self.d_x),
            ("d_Y", self.d_y),
            ("nce_X", self.nce_x),
            ("nce_Y", self.nce_y),
            ("idt", self.idt),
        ];
        if let Some(v) = self.sim {
            out.push(("sim", v));
        }
        if let Some(v) = self.cycle {
            out.push(("cycle", v));
        }
        out.push(("total_G", self.total_g));
        out
    }

    /// Errors with the offending term's name on the first non-finite value.
    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in self.entries() {
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss term {name} is not finite ({v}); aborting"
                )));
            }
        }
        Ok(())
    }
}
