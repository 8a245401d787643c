use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{predict, ModelKind, ModelParams, ShuffledDataset};
use crate::rng::{stream_rng, Stream};

/// Label noise level, either as a variance or as the signal-to-noise ratio
/// `|w|^2 / variance` of the drawn weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Noise {
    Variance(f64),
    Snr(f64),
}

impl Noise {
    fn variance(self, w: &DVector<f64>) -> Result<f64> {
        let v = match self {
            Noise::Variance(v) => v,
            Noise::Snr(s) if s > 0.0 => w.norm_squared() / s,
            Noise::Snr(s) => return Err(Error::InvalidConfig(format!("snr must be > 0, got {s}"))),
        };
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::InvalidConfig(format!("noise variance must be >= 0, got {v}")));
        }
        Ok(v)
    }
}

/// Training data, held-out data and the weights that generated them.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: ShuffledDataset,
    pub test: ShuffledDataset,
    pub w_true: DVector<f64>,
}

fn gaussian_matrix<R: Rng>(rng: &mut R, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn labels<R: Rng>(
    rng: &mut R,
    params: &ModelParams,
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    var: f64,
) -> Result<DVector<f64>> {
    let noise = Normal::new(0.0, var.sqrt()).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut y = DVector::zeros(x.nrows());
    for i in 0..x.nrows() {
        let xi: Vec<f64> = x.row(i).iter().copied().collect();
        let zi: Vec<f64> = z.row(i).iter().copied().collect();
        y[i] = predict(params, &xi, &zi)? + noise.sample(rng);
    }
    Ok(y)
}

/// Move row `i` of `z` to row `perm[i]`.
fn scatter_rows(z: &DMatrix<f64>, perm: &[usize]) -> DMatrix<f64> {
    let mut out = z.clone();
    for (i, &j) in perm.iter().enumerate() {
        out.set_row(j, &z.row(i));
    }
    out
}

/// Linear unlabeled sensing: `z_i, w ~ N(0, I_e)`, `y_i = z_i . w + noise`.
/// A uniformly chosen subset of `round(shuffle_frac * n)` rows of `z` is
/// permuted uniformly among itself. The test set has `n` fresh rows and no
/// shuffle.
pub fn gen_unlabeled_sensing(n: usize, e: usize, noise: Noise, shuffle_frac: f64, seed: u64) -> Result<Split> {
    if n == 0 || e == 0 {
        return Err(Error::InvalidConfig("n and e must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&shuffle_frac) {
        return Err(Error::InvalidConfig(format!("shuffle_frac must be in [0, 1], got {shuffle_frac}")));
    }
    let mut rng = stream_rng(seed, Stream::Data);
    let w = DVector::from_fn(e, |_, _| rng.sample(StandardNormal));
    let var = noise.variance(&w)?;
    let params = ModelParams::new(ModelKind::Linear, w.clone());
    let x = DMatrix::zeros(n, 0);

    let z = gaussian_matrix(&mut rng, n, e);
    let y = labels(&mut rng, &params, &x, &z, var)?;
    let mut split_rng = stream_rng(seed, Stream::Split);
    let k = (shuffle_frac * n as f64).round() as usize;
    let mut chosen = rand::seq::index::sample(&mut split_rng, n, k).into_vec();
    chosen.sort_unstable();
    let mut targets = chosen.clone();
    targets.shuffle(&mut split_rng);
    let mut perm: Vec<usize> = (0..n).collect();
    for (&i, &j) in chosen.iter().zip(&targets) {
        perm[i] = j;
    }
    let train = ShuffledDataset::new(x.clone(), y, scatter_rows(&z, &perm), Some(perm))?;

    let mut test_rng = stream_rng(seed, Stream::Test);
    let zt = gaussian_matrix(&mut test_rng, n, e);
    let yt = labels(&mut test_rng, &params, &x, &zt, var)?;
    let test = ShuffledDataset::new(x, yt, zt, Some((0..n).collect()))?;
    Ok(Split { train, test, w_true: w })
}

/// Two-platform sine regression: `x_i ~ N(0, I_d)`, `z_i ~ N(0, I_e)`,
/// `w ~ N(0, I_{d+e})`, `y_i = sum_k sin([x_i, z_i]_k w_k) + noise`. All `z`
/// rows are shuffled. Training keeps the first 80% of the `D1` rows (after a
/// random split) and every `z` row; the test set holds the remaining `D1` rows
/// together with all `z` rows and the true partners.
pub fn gen_nonlinear(n: usize, d: usize, e: usize, noise_var: f64, seed: u64) -> Result<Split> {
    if n == 0 || d == 0 || e == 0 {
        return Err(Error::InvalidConfig("n, d and e must be >= 1".into()));
    }
    let mut rng = stream_rng(seed, Stream::Data);
    let x = gaussian_matrix(&mut rng, n, d);
    let z = gaussian_matrix(&mut rng, n, e);
    let w = DVector::from_fn(d + e, |_, _| rng.sample(StandardNormal));
    let params = ModelParams::new(ModelKind::Sine, w.clone());
    let y = labels(&mut rng, &params, &x, &z, Noise::Variance(noise_var).variance(&w)?)?;

    let mut split_rng = stream_rng(seed, Stream::Split);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut split_rng);
    let zs = scatter_rows(&z, &perm);
    let mut rows: Vec<usize> = (0..n).collect();
    rows.shuffle(&mut split_rng);
    let n_train = ((0.8 * n as f64).round() as usize).clamp(1, n);
    let (tr, te) = rows.split_at(n_train);
    let mut tr = tr.to_vec();
    let mut te = te.to_vec();
    tr.sort_unstable();
    te.sort_unstable();
    let part = |idx: &[usize]| -> Result<ShuffledDataset> {
        let xs = x.select_rows(idx);
        let ys = DVector::from_iterator(idx.len(), idx.iter().map(|&i| y[i]));
        let p = idx.iter().map(|&i| perm[i]).collect();
        ShuffledDataset::new(xs, ys, zs.clone(), Some(p))
    };
    let train = part(&tr)?;
    let test = if te.is_empty() { train.clone() } else { part(&te)? };
    Ok(Split { train, test, w_true: w })
}
