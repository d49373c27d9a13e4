use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{mismatch, DecoderError, DecoderWeights, POSE_DIM};

/// On-disk decoder weights: row-major nested arrays for matrices, flat
/// arrays for biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightFile {
    pub d_e: usize,
    pub d_h: usize,
    #[serde(rename = "W_latent")]
    pub w_latent: Vec<Vec<f64>>,
    pub b_latent: Vec<f64>,
    #[serde(rename = "W_state")]
    pub w_state: Vec<Vec<f64>>,
    pub b_state: Vec<f64>,
    #[serde(rename = "W_z")]
    pub w_z: Vec<Vec<f64>>,
    #[serde(rename = "U_z")]
    pub u_z: Vec<Vec<f64>>,
    pub b_z: Vec<f64>,
    #[serde(rename = "W_r")]
    pub w_r: Vec<Vec<f64>>,
    #[serde(rename = "U_r")]
    pub u_r: Vec<Vec<f64>>,
    pub b_r: Vec<f64>,
    #[serde(rename = "W_c")]
    pub w_c: Vec<Vec<f64>>,
    #[serde(rename = "U_c")]
    pub u_c: Vec<Vec<f64>>,
    pub b_c: Vec<f64>,
    #[serde(rename = "W_out")]
    pub w_out: Vec<Vec<f64>>,
    pub b_out: Vec<f64>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix(
    name: &str,
    data: &[Vec<f64>],
    nrows: usize,
    ncols: usize,
) -> Result<DMatrix<f64>, DecoderError> {
    if data.len() != nrows {
        return Err(mismatch(
            name,
            format!("{nrows} rows"),
            format!("{} rows", data.len()),
        ));
    }
    for (i, r) in data.iter().enumerate() {
        if r.len() != ncols {
            return Err(mismatch(
                &format!("{name} row {i}"),
                format!("{ncols} columns"),
                format!("{} columns", r.len()),
            ));
        }
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| data[i][j]))
}

fn vector(name: &str, data: &[f64], n: usize) -> Result<DVector<f64>, DecoderError> {
    if data.len() != n {
        return Err(mismatch(name, n, data.len()));
    }
    Ok(DVector::from_column_slice(data))
}

impl From<&DecoderWeights> for WeightFile {
    fn from(w: &DecoderWeights) -> Self {
        let v = |b: &DVector<f64>| b.iter().copied().collect::<Vec<_>>();
        WeightFile {
            d_e: w.d_e(),
            d_h: w.d_h(),
            w_latent: rows(&w.w_latent),
            b_latent: v(&w.b_latent),
            w_state: rows(&w.w_state),
            b_state: v(&w.b_state),
            w_z: rows(&w.w_z),
            u_z: rows(&w.u_z),
            b_z: v(&w.b_z),
            w_r: rows(&w.w_r),
            u_r: rows(&w.u_r),
            b_r: v(&w.b_r),
            w_c: rows(&w.w_c),
            u_c: rows(&w.u_c),
            b_c: v(&w.b_c),
            w_out: rows(&w.w_out),
            b_out: v(&w.b_out),
        }
    }
}

impl WeightFile {
    /// Converts to in-memory weights, checking every shape against `d_e`/`d_h`.
    pub fn to_weights(&self) -> Result<DecoderWeights, DecoderError> {
        let (d_e, d_h) = (self.d_e, self.d_h);
        if d_e == 0 || d_h == 0 {
            return Err(DecoderError::InvalidConfig(
                "d_e and d_h must be >= 1".into(),
            ));
        }
        let sq = |name, m: &[Vec<f64>]| matrix(name, m, d_h, d_h);
        let w = DecoderWeights {
            w_latent: matrix("W_latent", &self.w_latent, d_h, d_e)?,
            b_latent: vector("b_latent", &self.b_latent, d_h)?,
            w_state: sq("W_state", &self.w_state)?,
            b_state: vector("b_state", &self.b_state, d_h)?,
            w_z: sq("W_z", &self.w_z)?,
            u_z: sq("U_z", &self.u_z)?,
            b_z: vector("b_z", &self.b_z, d_h)?,
            w_r: sq("W_r", &self.w_r)?,
            u_r: sq("U_r", &self.u_r)?,
            b_r: vector("b_r", &self.b_r, d_h)?,
            w_c: sq("W_c", &self.w_c)?,
            u_c: sq("U_c", &self.u_c)?,
            b_c: vector("b_c", &self.b_c, d_h)?,
            w_out: matrix("W_out", &self.w_out, POSE_DIM, d_h)?,
            b_out: vector("b_out", &self.b_out, POSE_DIM)?,
        };
        w.validate()?;
        Ok(w)
    }
}
