//! Differentiable operations. Each op computes its value eagerly and records
//! a closure mapping output gradients to parent gradients.

use crate::conv::par_matmul;
use crate::{make_node, Tensor};
use ndarray::prelude::*;

fn view2(a: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a 2-d tensor")
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        let v = self.with(|a| {
            other.with(|b| {
                assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
                a + b
            })
        });
        make_node(v, vec![self.clone(), other.clone()], |g, m| {
            vec![m[0].then(|| g.clone()), m[1].then(|| g.clone())]
        })
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let v = self.with(|a| {
            other.with(|b| {
                assert_eq!(a.shape(), b.shape(), "sub: shape mismatch");
                a - b
            })
        });
        make_node(v, vec![self.clone(), other.clone()], |g, m| {
            vec![m[0].then(|| g.clone()), m[1].then(|| g.mapv(|x| -x))]
        })
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        let v = self.with(|a| {
            other.with(|b| {
                assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
                a * b
            })
        });
        let (pa, pb) = (self.clone(), other.clone());
        make_node(v, vec![self.clone(), other.clone()], move |g, m| {
            vec![
                m[0].then(|| pb.with(|b| g * b)),
                m[1].then(|| pa.with(|a| g * a)),
            ]
        })
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let v = self.with(|a| a.mapv(|x| x + c));
        make_node(v, vec![self.clone()], |g, m| vec![m[0].then(|| g.clone())])
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let v = self.with(|a| a.mapv(|x| x * c));
        make_node(v, vec![self.clone()], move |g, m| {
            vec![m[0].then(|| g.mapv(|x| x * c))]
        })
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn relu(&self) -> Tensor {
        let v = self.with(|a| a.mapv(|x| x.max(0.0)));
        let px = self.clone();
        make_node(v, vec![self.clone()], move |g, m| {
            vec![m[0].then(|| {
                px.with(|x| {
                    let mut out = g.clone();
                    out.zip_mut_with(x, |gv, &xv| {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    });
                    out
                })
            })]
        })
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let v = self.with(|a| a.mapv(|x| if x > 0.0 { x } else { slope * x }));
        let px = self.clone();
        make_node(v, vec![self.clone()], move |g, m| {
            vec![m[0].then(|| {
                px.with(|x| {
                    let mut out = g.clone();
                    out.zip_mut_with(x, |gv, &xv| {
                        if xv <= 0.0 {
                            *gv *= slope;
                        }
                    });
                    out
                })
            })]
        })
    }

    pub fn tanh(&self) -> Tensor {
        let v = self.with(|a| a.mapv(f64::tanh));
        let y = v.clone();
        make_node(v, vec![self.clone()], move |g, m| {
            vec![m[0].then(|| {
                let mut out = g.clone();
                out.zip_mut_with(&y, |gv, &yv| *gv *= 1.0 - yv * yv);
                out
            })]
        })
    }

    pub fn abs(&self) -> Tensor {
        let v = self.with(|a| a.mapv(f64::abs));
        let px = self.clone();
        make_node(v, vec![self.clone()], move |g, m| {
            vec![m[0].then(|| {
                px.with(|x| {
                    let mut out = g.clone();
                    out.zip_mut_with(x, |gv, &xv| {
                        *gv *= if xv > 0.0 {
                            1.0
                        } else if xv < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    out
                })
            })]
        })
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&self) -> Tensor {
        let v = self.with(|a| a.mapv(|x| x.max(0.0) + (-x.abs()).exp().ln_1p()));
        let px = self.clone();
        make_node(v, vec![self.clone()], move |g, m| {
            vec![m[0].then(|| {
                px.with(|x| {
                    let mut out = g.clone();
                    out.zip_mut_with(x, |gv, &xv| {
                        let s = if xv >= 0.0 {
                            1.0 / (1.0 + (-xv).exp())
                        } else {
                            let e = xv.exp();
                            e / (1.0 + e)
                        };
                        *gv *= s;
                    });
                    out
                })
            })]
        })
    }

    /// Mean over all elements, as a zero-dimensional tensor.
    pub fn mean_all(&self) -> Tensor {
        let n = self.len() as f64;
        let shape = self.shape();
        let v = self.with(|a| arr0(a.sum() / n).into_dyn());
        make_node(v, vec![self.clone()], move |g, m| {
            let gv = *g.iter().next().unwrap();
            vec![m[0].then(|| ArrayD::from_elem(IxDyn(&shape), gv / n))]
        })
    }

    /// Sum over all elements, as a zero-dimensional tensor.
    pub fn sum_all(&self) -> Tensor {
        let shape = self.shape();
        let v = self.with(|a| arr0(a.sum()).into_dyn());
        make_node(v, vec![self.clone()], move |g, m| {
            let gv = *g.iter().next().unwrap();
            vec![m[0].then(|| ArrayD::from_elem(IxDyn(&shape), gv))]
        })
    }

    /// Mean over rows: `[R, C] -> [1, C]`.
    pub fn mean_rows(&self) -> Tensor {
        let (r, c) = self.with(|a| view2(a).dim());
        let v = self.with(|a| {
            let a2 = view2(a);
            let mean = a2.mean_axis(Axis(0)).unwrap();
            mean.insert_axis(Axis(0)).into_dyn()
        });
        make_node(v, vec![self.clone()], move |g, m| {
            vec![m[0].then(|| {
                let g2 = view2(g);
                Array2::from_shape_fn((r, c), |(_, j)| g2[[0, j]] / r as f64).into_dyn()
            })]
        })
    }

    /// Matrix transpose of a 2-d tensor.
    pub fn transpose2(&self) -> Tensor {
        let v = self.with(|a| view2(a).t().as_standard_layout().to_owned().into_dyn());
        make_node(v, vec![self.clone()], |g, m| {
            vec![m[0].then(|| view2(g).t().as_standard_layout().to_owned().into_dyn())]
        })
    }

    /// Matrix product of 2-d tensors.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let v = self.with(|a| {
            other.with(|b| {
                let (a2, b2) = (view2(a), view2(b));
                assert_eq!(a2.ncols(), b2.nrows(), "matmul: inner dimension mismatch");
                par_matmul(&a2, &b2).into_dyn()
            })
        });
        let (pa, pb) = (self.clone(), other.clone());
        make_node(v, vec![self.clone(), other.clone()], move |g, m| {
            let g2o = view2(g);
            vec![
                m[0].then(|| pb.with(|b| par_matmul(&g2o, &view2(b).t()).into_dyn())),
                m[1].then(|| pa.with(|a| par_matmul(&view2(a).t(), &g2o).into_dyn())),
            ]
        })
    }

    /// Adds a bias row vector to every row: `[R, M] + [M]`.
    pub fn add_bias_rows(&self, bias: &Tensor) -> Tensor {
        let v = self.with(|a| {
            bias.with(|b| {
                let a2 = view2(a);
                let b1 = b.view().into_dimensionality::<Ix1>().expect("1-d bias");
                assert_eq!(a2.ncols(), b1.len(), "bias length mismatch");
                (&a2 + &b1).into_dyn()
            })
        });
        make_node(v, vec![self.clone(), bias.clone()], |g, m| {
            let g2 = view2(g);
            vec![
                m[0].then(|| g.clone()),
                m[1].then(|| g2.sum_axis(Axis(0)).into_dyn()),
            ]
        })
    }

    /// Selects rows of a 2-d tensor. Duplicate indices accumulate on backward.
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let (r, c) = self.with(|a| view2(a).dim());
        for &i in idx {
            assert!(i < r, "gather_rows: index {i} out of range for {r} rows");
        }
        let idx_owned: Vec<usize> = idx.to_vec();
        let v = self.with(|a| view2(a).select(Axis(0), idx).into_dyn());
        make_node(v, vec![self.clone()], move |g, m| {
            vec![m[0].then(|| {
                let g2 = view2(g);
                let mut out = Array2::<f64>::zeros((r, c));
                for (k, &i) in idx_owned.iter().enumerate() {
                    let mut row = out.row_mut(i);
                    row += &g2.row(k);
                }
                out.into_dyn()
            })]
        })
    }

    /// Normalizes each row to unit Euclidean length. The norm is floored at
    /// 1e-12, so ordinary rows divide by their exact norm and degenerate
    /// all-zero rows stay zero instead of going non-finite.
    pub fn l2_normalize_rows(&self) -> Tensor {
        let (r, _c) = self.with(|a| view2(a).dim());
        let (v, norms) = self.with(|a| {
            let a2 = view2(a);
            let norms: Vec<f64> = a2
                .rows()
                .into_iter()
                .map(|row| row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12))
                .collect();
            let mut y = a2.to_owned();
            for (mut row, &n) in y.rows_mut().into_iter().zip(&norms) {
                row.mapv_inplace(|x| x / n);
            }
            (y.into_dyn(), norms)
        });
        let y = v.clone();
        make_node(v, vec![self.clone()], move |g, m| {
            vec![m[0].then(|| {
                let g2 = view2(g);
                let y2 = view2(&y);
                let mut out = Array2::<f64>::zeros(g2.dim());
                for i in 0..r {
                    let (gr, yr) = (g2.row(i), y2.row(i));
                    let dot = gr.dot(&yr);
                    let mut orow = out.row_mut(i);
                    for (o, (&gv, &yv)) in orow.iter_mut().zip(gr.iter().zip(yr.iter())) {
                        *o = (gv - dot * yv) / norms[i];
                    }
                }
                out.into_dyn()
            })]
        })
    }

    /// Per-row softmax cross-entropy against integer targets: `[R, C] -> [R]`.
    pub fn cross_entropy_rows(&self, targets: &[usize]) -> Tensor {
        let (r, c) = self.with(|a| view2(a).dim());
        assert_eq!(targets.len(), r, "one target per row");
        for &t in targets {
            assert!(t < c, "target {t} out of range for {c} classes");
        }
        let targets_owned: Vec<usize> = targets.to_vec();
        let (v, probs) = self.with(|a| {
            let a2 = view2(a);
            let mut probs = Array2::<f64>::zeros((r, c));
            let mut losses = Array1::<f64>::zeros(r);
            for i in 0..r {
                let row = a2.row(i);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (p, &z) in probs.row_mut(i).iter_mut().zip(row.iter()) {
                    *p = (z - mx).exp();
                    sum += *p;
                }
                probs.row_mut(i).mapv_inplace(|p| p / sum);
                losses[i] = sum.ln() - (row[targets_owned[i]] - mx);
            }
            (losses.into_dyn(), probs)
        });
        make_node(v, vec![self.clone()], move |g, m| {
            vec![m[0].then(|| {
                let g1 = g.view().into_dimensionality::<Ix1>().expect("1-d grad");
                let mut out = probs.clone();
                for i in 0..r {
                    let gi = g1[i];
                    let t = targets_owned[i];
                    let mut row = out.row_mut(i);
                    row.mapv_inplace(|p| p * gi);
                    row[t] -= gi;
                }
                out.into_dyn()
            })]
        })
    }

    /// Flattens spatial positions into rows: `[N, C, H, W] -> [N*H*W, C]`.
    pub fn spatial_to_rows(&self) -> Tensor {
        let (n, c, h, w) = self.with(|a| {
            a.view()
                .into_dimensionality::<Ix4>()
                .expect("4-d input")
                .dim()
        });
        let v = self.with(|a| {
            let a4 = a.view().into_dimensionality::<Ix4>().unwrap();
            let perm = a4.permuted_axes([0, 2, 3, 1]);
            perm.as_standard_layout()
                .to_owned()
                .into_shape_with_order((n * h * w, c))
                .unwrap()
                .into_dyn()
        });
        make_node(v, vec![self.clone()], move |g, m| {
            vec![m[0].then(|| {
                let g2 = view2(g).to_owned();
                let g4 = g2.into_shape_with_order((n, h, w, c)).unwrap();
                g4.permuted_axes([0, 3, 1, 2])
                    .as_standard_layout()
                    .to_owned()
                    .into_dyn()
            })]
        })
    }
}

/// Concatenates 2-d tensors along rows. All parts must share a column count.
pub fn concat_rows(parts: &[Tensor]) -> Tensor {
    assert!(!parts.is_empty(), "concat_rows of nothing");
    let row_counts: Vec<usize> = parts.iter().map(|p| p.with(|a| view2(a).nrows())).collect();
    let v = {
        let arrays: Vec<ArrayD<f64>> = parts.iter().map(|p| p.to_array()).collect();
        let views: Vec<ArrayView2<'_, f64>> = arrays.iter().map(|a| view2(a)).collect();
        ndarray::concatenate(Axis(0), &views)
            .expect("concat_rows: column mismatch")
            .into_dyn()
    };
    make_node(v, parts.to_vec(), move |g, m| {
        let g2 = view2(g);
        let mut out = Vec::with_capacity(row_counts.len());
        let mut offset = 0;
        for (i, &rc) in row_counts.iter().enumerate() {
            out.push(m[i].then(|| g2.slice(s![offset..offset + rc, ..]).to_owned().into_dyn()));
            offset += rc;
        }
        out
    })
}

/// Per-sample, per-channel normalization with learned scale and shift.
/// Statistics are computed over the spatial extent of each `(n, c)` plane.
pub fn instance_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let (n, c, h, w) = x.with(|a| {
        a.view()
            .into_dimensionality::<Ix4>()
            .expect("4-d input")
            .dim()
    });
    let m_spatial = (h * w) as f64;
    let (v, xh, inv_std) = x.with(|a| {
        gamma.with(|gm| {
            beta.with(|bt| {
                let a4 = a.view().into_dimensionality::<Ix4>().unwrap();
                let g1 = gm.view().into_dimensionality::<Ix1>().expect("1-d gamma");
                let b1 = bt.view().into_dimensionality::<Ix1>().expect("1-d beta");
                assert_eq!(g1.len(), c, "gamma length mismatch");
                assert_eq!(b1.len(), c, "beta length mismatch");
                let mut xh = Array4::<f64>::zeros((n, c, h, w));
                let mut out = Array4::<f64>::zeros((n, c, h, w));
                let mut inv_std = Array2::<f64>::zeros((n, c));
                for ni in 0..n {
                    for ci in 0..c {
                        let plane = a4.slice(s![ni, ci, .., ..]);
                        let mu = plane.sum() / m_spatial;
                        let var =
                            plane.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / m_spatial;
                        let inv = 1.0 / (var + eps).sqrt();
                        inv_std[[ni, ci]] = inv;
                        let mut xh_p = xh.slice_mut(s![ni, ci, .., ..]);
                        let mut out_p = out.slice_mut(s![ni, ci, .., ..]);
                        for ((xv, xh_v), out_v) in
                            plane.iter().zip(xh_p.iter_mut()).zip(out_p.iter_mut())
                        {
                            let norm = (xv - mu) * inv;
                            *xh_v = norm;
                            *out_v = g1[ci] * norm + b1[ci];
                        }
                    }
                }
                (out.into_dyn(), xh, inv_std)
            })
        })
    });
    let pg = gamma.clone();
    make_node(
        v,
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |g, m| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let dx = m[0].then(|| {
                pg.with(|gm| {
                    let g1 = gm.view().into_dimensionality::<Ix1>().unwrap();
                    let mut dx = Array4::<f64>::zeros((n, c, h, w));
                    for ni in 0..n {
                        for ci in 0..c {
                            let gp = g4.slice(s![ni, ci, .., ..]);
                            let xp = xh.slice(s![ni, ci, .., ..]);
                            let mean_g = gp.sum() / m_spatial;
                            let mean_gx = gp
                                .iter()
                                .zip(xp.iter())
                                .map(|(&gv, &xv)| gv * xv)
                                .sum::<f64>()
                                / m_spatial;
                            let scale = g1[ci] * inv_std[[ni, ci]];
                            let mut dp = dx.slice_mut(s![ni, ci, .., ..]);
                            for ((d, &gv), &xv) in dp.iter_mut().zip(gp.iter()).zip(xp.iter()) {
                                *d = scale * (gv - mean_g - xv * mean_gx);
                            }
                        }
                    }
                    dx.into_dyn()
                })
            });
            let dgamma = m[1].then(|| {
                let mut dg = Array1::<f64>::zeros(c);
                for ni in 0..n {
                    for ci in 0..c {
                        let gp = g4.slice(s![ni, ci, .., ..]);
                        let xp = xh.slice(s![ni, ci, .., ..]);
                        dg[ci] += gp
                            .iter()
                            .zip(xp.iter())
                            .map(|(&gv, &xv)| gv * xv)
                            .sum::<f64>();
                    }
                }
                dg.into_dyn()
            });
            let dbeta = m[2].then(|| {
                let mut db = Array1::<f64>::zeros(c);
                for ni in 0..n {
                    for ci in 0..c {
                        db[ci] += g4.slice(s![ni, ci, .., ..]).sum();
                    }
                }
                db.into_dyn()
            });
            vec![dx, dgamma, dbeta]
        },
    )
}
