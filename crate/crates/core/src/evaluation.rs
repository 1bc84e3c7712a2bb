//! Desk-scale quality and diversity measurement. Translated and real image
//! sets are summarized as Gaussians in a feature space produced by a
//! pluggable embedder, compared by Fréchet distance, and screened for mode
//! collapse with a pixel-space diversity score.
//!
//! The bundled embedder is a seeded random projection, nowhere near an
//! ImageNet-trained feature extractor. Its numbers are comparable between
//! runs of this toolkit and are reported as "FD (custom embedder)", never as
//! FID.

use crate::error::{Error, Result};
use crate::imagedata::{bilinear_resize, load_test_image, save_image, scan_image_dir};
use crate::networks::Generator;
use autodiff::seed::derive_rng;
use autodiff::xavier_normal;
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Array3};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Gaussian summary of an embedded image set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Array1<f64>,
    /// Unbiased sample covariance, symmetric by construction.
    pub cov: Array2<f64>,
    pub n: usize,
}

pub trait Embedder {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, img: &Array3<f64>) -> Array1<f64>;
}

/// Working resolution of the bundled embedder.
pub const EMBED_SIDE: usize = 32;
/// Feature dimension of the bundled embedder.
pub const EMBED_FEATURES: usize = 64;

/// Seeded Gaussian random projection of the 32x32 image into a feature
/// vector. Deterministic for a fixed seed; entries are N(0, 1/D) over the
/// D = 3x32x32 input so squared norms are preserved in expectation.
pub struct RandomProjectionEmbedder {
    projection: Array2<f64>,
    name: String,
}

impl RandomProjectionEmbedder {
    pub fn new(seed: u64) -> RandomProjectionEmbedder {
        let input = 3 * EMBED_SIDE * EMBED_SIDE;
        let mut rng = derive_rng(seed, "embedder", &[]);
        let w = xavier_normal(&[EMBED_FEATURES, input], input, input, &mut rng)
            .into_dimensionality()
            .expect("projection is a matrix");
        RandomProjectionEmbedder {
            projection: w,
            name: format!("randproj{EMBED_FEATURES}-seed{seed}"),
        }
    }
}

impl Embedder for RandomProjectionEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        EMBED_FEATURES
    }

    fn embed(&self, img: &Array3<f64>) -> Array1<f64> {
        let small = bilinear_resize(img, EMBED_SIDE, EMBED_SIDE);
        let flat = Array1::from_iter(small.iter().cloned());
        self.projection.dot(&flat)
    }
}

impl FeatureStats {
    /// Sample mean and unbiased covariance of precomputed embeddings, in a
    /// fixed sequential reduction order so equal inputs give equal stats.
    pub fn from_embeddings(embedded: &[Array1<f64>]) -> Result<FeatureStats> {
        if embedded.len() < 2 {
            return Err(Error::Data(format!(
                "covariance needs at least 2 samples, got {}",
                embedded.len()
            )));
        }
        let d = embedded[0].len();
        for (i, e) in embedded.iter().enumerate() {
            if e.len() != d {
                return Err(Error::Data(format!(
                    "embedding {i} has dimension {}, expected {d}",
                    e.len()
                )));
            }
        }
        let n = embedded.len();
        let mut mean = Array1::<f64>::zeros(d);
        for e in embedded {
            mean += e;
        }
        mean /= n as f64;
        let mut cov = Array2::<f64>::zeros((d, d));
        for e in embedded {
            let c = e - &mean;
            for i in 0..d {
                for j in 0..=i {
                    cov[[i, j]] += c[i] * c[j];
                }
            }
        }
        cov /= (n - 1) as f64;
        for i in 0..d {
            for j in 0..i {
                cov[[j, i]] = cov[[i, j]];
            }
        }
        Ok(FeatureStats { mean, cov, n })
    }
}

/// Embeds the images and summarizes them; see
/// [`FeatureStats::from_embeddings`].
pub fn collect_stats(images: &[Array3<f64>], emb: &dyn Embedder) -> Result<FeatureStats> {
    let embedded: Vec<Array1<f64>> = images.iter().map(|img| emb.embed(img)).collect();
    FeatureStats::from_embeddings(&embedded)
}

fn to_dmatrix(m: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_row_iterator(m.nrows(), m.ncols(), m.iter().cloned())
}

/// Eigendecomposition with the PSD guard: eigenvalues down to
/// -1e-6 * scale (or -1e-12 absolute for near-zero matrices) clamp to 0,
/// anything lower is a genuine negative direction and errors.
fn psd_eigen(m: DMatrix<f64>, label: &str) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let se = SymmetricEigen::new(m);
    let scale = se.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let tol = (1e-6 * scale).max(1e-12);
    let mut clamped = Vec::with_capacity(se.eigenvalues.len());
    for &ev in se.eigenvalues.iter() {
        if ev < -tol {
            return Err(Error::Numeric(format!(
                "{label} is not positive semidefinite: eigenvalue {ev:e} against scale {scale:e}"
            )));
        }
        clamped.push(ev.max(0.0));
    }
    Ok((se.eigenvectors, clamped))
}

/// Fréchet distance between two Gaussian summaries:
/// |mu_a - mu_b|^2 + tr(cov_a + cov_b - 2 (cov_a cov_b)^(1/2)).
/// The cross term is evaluated through the symmetric product
/// sqrt(cov_a) cov_b sqrt(cov_a), which shares its eigenvalues with
/// cov_a cov_b. Bit-equal inputs short-circuit to exactly 0; otherwise the
/// result is clamped at 0.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    let d = a.mean.len();
    if b.mean.len() != d || a.cov.dim() != (d, d) || b.cov.dim() != (d, d) {
        return Err(Error::Config(format!(
            "feature stats dimensions disagree: {} vs {}",
            d,
            b.mean.len()
        )));
    }
    if a.mean == b.mean && a.cov == b.cov {
        return Ok(0.0);
    }

    let (ua, la) = psd_eigen(to_dmatrix(&a.cov), "first covariance")?;
    let sqrt_a = {
        let mut s = ua.clone();
        for (j, &l) in la.iter().enumerate() {
            let r = l.sqrt();
            s.column_mut(j).scale_mut(r);
        }
        &s * ua.transpose()
    };
    let prod = &sqrt_a * to_dmatrix(&b.cov) * &sqrt_a;
    let sym = (&prod + prod.transpose()) * 0.5;
    let (_, lp) = psd_eigen(sym, "covariance cross term")?;
    let tr_sqrt_prod: f64 = lp.iter().map(|l| l.sqrt()).sum();

    let mean_sq: f64 = a
        .mean
        .iter()
        .zip(b.mean.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let tr_a: f64 = (0..d).map(|i| a.cov[[i, i]]).sum();
    let tr_b: f64 = (0..d).map(|i| b.cov[[i, i]]).sum();
    Ok((mean_sq + tr_a + tr_b - 2.0 * tr_sqrt_prod).max(0.0))
}

/// Mean pairwise pixel-space L1 distance over a set of outputs. Exactly 0
/// when all outputs are identical; near-zero flags mode collapse.
pub fn diversity_score(outputs: &[Array3<f64>]) -> Result<f64> {
    if outputs.len() < 2 {
        return Err(Error::Data(format!(
            "diversity needs at least 2 outputs, got {}",
            outputs.len()
        )));
    }
    let shape = outputs[0].dim();
    for (i, o) in outputs.iter().enumerate() {
        if o.dim() != shape {
            return Err(Error::Data(format!(
                "output {i} has shape {:?}, expected {shape:?}",
                o.dim()
            )));
        }
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..outputs.len() {
        for j in (i + 1)..outputs.len() {
            let diff: f64 = outputs[i]
                .iter()
                .zip(outputs[j].iter())
                .map(|(x, y)| (x - y).abs())
                .sum();
            total += diff / outputs[i].len() as f64;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Diversity below this is reported as probable mode collapse. Pixel values
/// live in [-1, 1]; honest translations of distinct inputs land orders of
/// magnitude above this.
pub const COLLAPSE_THRESHOLD: f64 = 1e-3;

/// Translates every image in `input_dir` at `size`^2 through `gen`, writes
/// 8-bit PNGs plus a two-column manifest (input path, tab, output path) into
/// `out_dir`, and returns the pairs. An input dir without usable images
/// yields an empty manifest and a warning rather than an error.
pub fn translate_folder(
    gen: &Generator,
    input_dir: &Path,
    out_dir: &Path,
    size: usize,
) -> Result<Vec<(PathBuf, PathBuf)>> {
    let paths = match scan_image_dir(input_dir) {
        Ok(p) => p,
        Err(Error::Data(msg)) => {
            eprintln!("warning: nothing to translate: {msg}");
            Vec::new()
        }
        Err(e) => return Err(e),
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut pairs = Vec::with_capacity(paths.len());
    let mut used = std::collections::HashSet::new();
    for path in paths {
        let img = load_test_image(&path, size)?;
        let translated = gen.translate(&img);
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".to_string());
        let mut name = format!("{stem}.png");
        let mut k = 1;
        while !used.insert(name.clone()) {
            name = format!("{stem}_{k}.png");
            k += 1;
        }
        let out_path = out_dir.join(&name);
        save_image(&out_path, &translated)?;
        pairs.push((path, out_path));
    }
    let manifest_path = out_dir.join("manifest.tsv");
    let mut manifest =
        std::fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    for (input, output) in &pairs {
        writeln!(manifest, "{}\t{}", input.display(), output.display())
            .map_err(|e| Error::io(&manifest_path, e))?;
    }
    Ok(pairs)
}

/// One line of the evaluation report.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub metric: String,
    pub value: f64,
    pub n_real: usize,
    pub n_fake: usize,
    pub embedder: String,
    pub checkpoint: String,
}

/// Tab-separated report: metric, value, n_real, n_fake, embedder,
/// checkpoint.
pub fn write_eval_report(path: &Path, rows: &[EvalRow]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut out = String::from("metric\tvalue\tn_real\tn_fake\tembedder\tcheckpoint\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            r.metric, r.value, r.n_real, r.n_fake, r.embedder, r.checkpoint
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
