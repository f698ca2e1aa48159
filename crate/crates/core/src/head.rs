//! The trainable embedding head: linear map, parameterless layer norm, then
//! L2 normalization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Matrix, LAYER_NORM_EPS, MIN_NORM};

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingHead {
    /// `F x D`, applied as `features . weight`.
    pub weight: Matrix,
    pub bias: Vec<f32>,
    pub eps: f32,
}

/// Per-row intermediate values of the forward pass, in `f64`.
struct RowTrace {
    /// Layer-norm output.
    normed: Vec<f64>,
    /// `sqrt(var + eps)`.
    scale: f64,
    /// Norm of `normed`.
    length: f64,
}

impl EmbeddingHead {
    /// Uniform weights in `(-1/sqrt(F), 1/sqrt(F))`, zero bias.
    pub fn init(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (in_dim as f64).sqrt();
        let data = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-bound..bound) as f32)
            .collect();
        EmbeddingHead {
            weight: Matrix::from_vec(in_dim, out_dim, data).expect("sized from dims"),
            bias: vec![0.0; out_dim],
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn from_parts(weight: Matrix, bias: Vec<f32>) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(Error::DimMismatch(format!(
                "bias has {} entries, weight has {} columns",
                bias.len(),
                weight.cols()
            )));
        }
        Ok(EmbeddingHead {
            weight,
            bias,
            eps: LAYER_NORM_EPS,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    fn check_input(&self, features: &Matrix) -> Result<()> {
        if features.cols() != self.in_dim() {
            return Err(Error::DimMismatch(format!(
                "features are {}-d, head expects {}-d",
                features.cols(),
                self.in_dim()
            )));
        }
        Ok(())
    }

    fn trace_row(&self, f: &[f32]) -> Result<RowTrace> {
        let d = self.out_dim();
        let mut z: Vec<f64> = self.bias.iter().map(|&b| f64::from(b)).collect();
        for (k, &fk) in f.iter().enumerate() {
            let fk = f64::from(fk);
            if fk == 0.0 {
                continue;
            }
            for (zj, &w) in z.iter_mut().zip(self.weight.row(k)) {
                *zj += fk * f64::from(w);
            }
        }
        let mean = z.iter().sum::<f64>() / d as f64;
        let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let scale = (var + f64::from(self.eps)).sqrt();
        let normed: Vec<f64> = z.iter().map(|v| (v - mean) / scale).collect();
        let length = normed.iter().map(|v| v * v).sum::<f64>().sqrt();
        if length.is_nan() || length < MIN_NORM {
            return Err(Error::ZeroNorm { norm: length });
        }
        Ok(RowTrace {
            normed,
            scale,
            length,
        })
    }

    /// Unit-norm embeddings, one per feature row.
    pub fn forward(&self, features: &Matrix) -> Result<Matrix> {
        self.check_input(features)?;
        let d = self.out_dim();
        let mut out = Matrix::zeros(features.rows(), d);
        for (i, f) in features.iter_rows().enumerate() {
            let t = self.trace_row(f)?;
            for (o, v) in out.row_mut(i).iter_mut().zip(&t.normed) {
                *o = (v / t.length) as f32;
            }
        }
        Ok(out)
    }

    /// Gradients of a scalar objective with respect to `weight` and `bias`,
    /// given its gradient with respect to the head's output.
    pub fn backward(
        &self,
        features: &Matrix,
        grad_embeddings: &Matrix,
    ) -> Result<(Matrix, Vec<f32>)> {
        self.check_input(features)?;
        let d = self.out_dim();
        if grad_embeddings.shape() != (features.rows(), d) {
            return Err(Error::DimMismatch(format!(
                "gradient is {:?}, expected ({}, {d})",
                grad_embeddings.shape(),
                features.rows()
            )));
        }
        let mut gw = vec![0.0f64; self.in_dim() * d];
        let mut gb = vec![0.0f64; d];
        let mut dz = vec![0.0f64; d];
        for (i, f) in features.iter_rows().enumerate() {
            let ge = grad_embeddings.row(i);
            if ge.iter().all(|&g| g == 0.0) {
                continue;
            }
            let t = self.trace_row(f)?;
            let dn = unit_backward(&t.normed, t.length, ge);
            layer_norm_backward(&t.normed, t.scale, &dn, &mut dz);
            for (b, &g) in gb.iter_mut().zip(&dz) {
                *b += g;
            }
            for (k, &fk) in f.iter().enumerate() {
                let fk = f64::from(fk);
                for (w, &g) in gw[k * d..(k + 1) * d].iter_mut().zip(&dz) {
                    *w += fk * g;
                }
            }
        }
        let gw = Matrix::from_vec(self.in_dim(), d, gw.into_iter().map(|v| v as f32).collect())
            .expect("sized from dims");
        Ok((gw, gb.into_iter().map(|v| v as f32).collect()))
    }
}

/// Backward of `e = v / |v|`: `(g - e (e . g)) / |v|`.
fn unit_backward(v: &[f64], length: f64, grad_out: &[f32]) -> Vec<f64> {
    let e_dot_g: f64 = v
        .iter()
        .zip(grad_out)
        .map(|(a, &g)| a / length * f64::from(g))
        .sum();
    v.iter()
        .zip(grad_out)
        .map(|(a, &g)| (f64::from(g) - a / length * e_dot_g) / length)
        .collect()
}

/// Backward of the parameterless layer norm `y = (x - mean) / scale`.
fn layer_norm_backward(y: &[f64], scale: f64, dy: &[f64], dx: &mut [f64]) {
    let n = y.len() as f64;
    let mean_dy = dy.iter().sum::<f64>() / n;
    let mean_dy_y = dy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
    for ((o, &g), &v) in dx.iter_mut().zip(dy).zip(y) {
        *o = (g - mean_dy - v * mean_dy_y) / scale;
    }
}

/// Backward of L2 normalization at input `v`: maps a gradient with respect to
/// `v / |v|` to a gradient with respect to `v`.
pub fn l2_normalize_backward(v: &[f32], grad_out: &[f32]) -> Result<Vec<f32>> {
    let v: Vec<f64> = v.iter().map(|&x| f64::from(x)).collect();
    let length = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if length.is_nan() || length < MIN_NORM {
        return Err(Error::ZeroNorm { norm: length });
    }
    Ok(unit_backward(&v, length, grad_out)
        .into_iter()
        .map(|g| g as f32)
        .collect())
}
