//! Contrastive machinery: the noise-contrastive estimation loss on cosine
//! similarities, patchwise feature stacks sampled from encoder taps, the
//! per-direction patch loss (with optional external negatives from a second
//! same-domain image), and the code-similarity loss for the variant mode.

use crate::error::{Error, Result};
use crate::networks::{Generator, LightNets, ProjectionHeads};
use autodiff::{concat_rows, Tensor};
use rand_chacha::ChaCha20Rng;

fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive and finite; got {temperature}"
        )));
    }
    Ok(())
}

fn check_rows_nonzero(t: &Tensor, what: &str) -> Result<()> {
    let a = t.to_array();
    for (r, row) in a.axis_iter(ndarray::Axis(0)).enumerate() {
        let norm_sq: f64 = row.iter().map(|v| v * v).sum();
        // Anything under the normalization floor would be silently rescaled
        // rather than normalized, so reject the whole range.
        if norm_sq < 1e-24 {
            return Err(Error::Numeric(format!(
                "{what} row {r} has zero norm; cosine similarity is undefined"
            )));
        }
    }
    Ok(())
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 2 {
        return Err(Error::Config(format!(
            "{what} must be a [rows, dim] matrix, got shape {s:?}"
        )));
    }
    Ok((s[0], s[1]))
}

/// One positive against a pool of negatives on cosine similarity, scaled by
/// the temperature. `query` and `positive` are [1, D]; `negatives` is
/// [N, D]. Scale-invariant in every input vector.
pub fn info_nce(
    query: &Tensor,
    positive: &Tensor,
    negatives: &Tensor,
    temperature: f64,
) -> Result<Tensor> {
    check_temperature(temperature)?;
    let (qr, qd) = dims2(query, "query")?;
    let (pr, pd) = dims2(positive, "positive")?;
    let (nr, nd) = dims2(negatives, "negatives")?;
    if qr != 1 || pr != 1 {
        return Err(Error::Config(format!(
            "query and positive must be single rows, got {qr} and {pr}"
        )));
    }
    if qd != pd || qd != nd || nr == 0 {
        return Err(Error::Config(format!(
            "incompatible shapes: query [1, {qd}], positive [1, {pd}], negatives [{nr}, {nd}]"
        )));
    }
    check_rows_nonzero(query, "query")?;
    check_rows_nonzero(positive, "positive")?;
    check_rows_nonzero(negatives, "negatives")?;
    let keys = concat_rows(&[positive.clone(), negatives.clone()]);
    let logits = query
        .l2_normalize_rows()
        .matmul(&keys.l2_normalize_rows().transpose2())
        .mul_scalar(1.0 / temperature);
    Ok(logits.cross_entropy_rows(&[0]).mean_all())
}

/// Per-layer patch embeddings for one image through one (encoder, heads)
/// pair, with the sampled flat locations that produced them.
pub struct FeatureStack {
    /// One [S, 256] matrix per tap.
    pub layers: Vec<Tensor>,
    /// Flat (row-major H*W) indices sampled per tap.
    pub locations: Vec<Vec<usize>>,
}

/// Samples `count` distinct flat locations out of `hw`, or all of them when
/// the map is smaller than the request.
pub fn sample_locations(hw: usize, count: usize, rng: &mut ChaCha20Rng) -> Vec<usize> {
    if count >= hw {
        (0..hw).collect()
    } else {
        rand::seq::index::sample(rng, hw, count).into_vec()
    }
}

/// Runs `image` through the encoder taps and projection heads, sampling
/// `num_patches` locations per tap from `rng`, or reusing `locations` when
/// given (the query side of a direction must reuse the key side's draws).
pub fn embed_patches(
    gen: &Generator,
    heads: &ProjectionHeads,
    image: &Tensor,
    num_patches: usize,
    locations: Option<&[Vec<usize>]>,
    mut rng: Option<&mut ChaCha20Rng>,
) -> Result<FeatureStack> {
    let taps = heads.taps();
    if image.shape()[0] != 1 {
        return Err(Error::Config(
            "patch embedding operates on single images; accumulate batches outside".to_string(),
        ));
    }
    if let Some(ls) = locations {
        if ls.len() != taps.len() {
            return Err(Error::Config(format!(
                "got locations for {} layers, need {}",
                ls.len(),
                taps.len()
            )));
        }
    } else if rng.is_none() {
        return Err(Error::Config(
            "patch embedding needs either fixed locations or a sampling stream".to_string(),
        ));
    }
    let feats = gen.encode(image, taps, false);
    let mut layers = Vec::with_capacity(taps.len());
    let mut used = Vec::with_capacity(taps.len());
    for (idx, feat) in feats.iter().enumerate() {
        let shape = feat.shape();
        let hw = shape[2] * shape[3];
        let locs = match locations {
            Some(ls) => {
                if let Some(&bad) = ls[idx].iter().find(|&&loc| loc >= hw) {
                    return Err(Error::Config(format!(
                        "location {bad} out of range for a {hw}-cell map at layer {idx}"
                    )));
                }
                ls[idx].clone()
            }
            None => sample_locations(hw, num_patches, rng.as_mut().unwrap()),
        };
        let rows = feat.spatial_to_rows().gather_rows(&locs);
        layers.push(heads.forward(idx, &rows, false));
        used.push(locs);
    }
    Ok(FeatureStack {
        layers,
        locations: used,
    })
}

/// One direction of the patch contrastive loss.
pub struct NceDirection {
    /// Sum over layers of the mean per-location loss.
    pub loss: Tensor,
    /// Negatives each query row competed against, per layer.
    pub negatives_per_query: Vec<usize>,
}

impl std::fmt::Debug for NceDirection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NceDirection")
            .field("loss", &self.loss.scalar())
            .field("negatives_per_query", &self.negatives_per_query)
            .finish()
    }
}

/// Patchwise contrastive loss for one direction: each query row's positive
/// is the key row at the same sampled location; every other key row is a
/// negative, plus every row of `external` when given. Key and query stacks
/// must have been built on identical locations.
pub fn patch_nce_direction(
    key: &FeatureStack,
    query: &FeatureStack,
    external: Option<&FeatureStack>,
    temperature: f64,
) -> Result<NceDirection> {
    check_temperature(temperature)?;
    if key.layers.len() != query.layers.len() {
        return Err(Error::Config(format!(
            "key stack has {} layers, query stack {}",
            key.layers.len(),
            query.layers.len()
        )));
    }
    if let Some(ext) = external {
        if ext.layers.len() != key.layers.len() {
            return Err(Error::Config(format!(
                "external stack has {} layers, need {}",
                ext.layers.len(),
                key.layers.len()
            )));
        }
    }
    let mut total: Option<Tensor> = None;
    let mut negatives = Vec::with_capacity(key.layers.len());
    for l in 0..key.layers.len() {
        if key.locations[l] != query.locations[l] {
            return Err(Error::Config(format!(
                "key and query stacks sampled different locations at layer {l}; \
                 the positive pairing is undefined"
            )));
        }
        let s = key.locations[l].len();
        if s == 0 {
            return Err(Error::Config(format!("layer {l} sampled no locations")));
        }
        let kn = key.layers[l].l2_normalize_rows();
        let all_keys = match external {
            Some(ext) => concat_rows(&[kn, ext.layers[l].l2_normalize_rows()]),
            None => kn,
        };
        let qn = query.layers[l].l2_normalize_rows();
        let logits = qn
            .matmul(&all_keys.transpose2())
            .mul_scalar(1.0 / temperature);
        let targets: Vec<usize> = (0..s).collect();
        let layer_loss = logits.cross_entropy_rows(&targets).mean_all();
        negatives.push(all_keys.shape()[0] - 1);
        total = Some(match total {
            Some(t) => t.add(&layer_loss),
            None => layer_loss,
        });
    }
    Ok(NceDirection {
        loss: total.expect("at least one layer"),
        negatives_per_query: negatives,
    })
}

/// Stacks each layer's mean embedding into an [L, 256] matrix.
pub fn pooled_stack(stack: &FeatureStack) -> Tensor {
    let pooled: Vec<Tensor> = stack.layers.iter().map(|l| l.mean_rows()).collect();
    concat_rows(&pooled)
}

fn code_l1(a: &Tensor, b: &Tensor) -> Tensor {
    a.sub(b).abs().sum_all()
}

/// Code-similarity loss of the variant mode: each (real, translated) pooled
/// stack pair per domain goes through its own light network and the codes
/// are compared in L1, summed over both domains.
pub fn similarity_loss(
    light: &LightNets,
    emb_x_real: &FeatureStack,
    emb_x_fake: &FeatureStack,
    emb_y_real: &FeatureStack,
    emb_y_fake: &FeatureStack,
) -> Tensor {
    let xr = light.xr.forward(&pooled_stack(emb_x_real), false);
    let xf = light.xf.forward(&pooled_stack(emb_x_fake), false);
    let yr = light.yr.forward(&pooled_stack(emb_y_real), false);
    let yf = light.yf.forward(&pooled_stack(emb_y_fake), false);
    code_l1(&xr, &xf).add(&code_l1(&yr, &yf))
}
