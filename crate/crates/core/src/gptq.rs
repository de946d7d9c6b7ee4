//! Layer-wise MSE quantization with second-order error compensation.
//!
//! Each quantized linear layer is solved on its own: minimize
//! `‖Q(Ŵ)x − Wx‖²` over the calibration inputs. Columns are quantized left
//! to right; the rounding error of column `j` is spread over the remaining
//! columns through the upper Cholesky factor of `H⁻¹`. A dampening factor
//! grid plus a plain round-to-nearest candidate is searched per layer.
//!
//! Linear algebra runs in `f64`; the returned weights are `f32` values that
//! lie exactly on the quantizer grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{capture_layer_taps, LayerId, LayerTap, Parameters, Propagation, SequentialTaps};
use crate::par;
use crate::quant::{calibrate_model, fake_quantize, CalibratedQuantizer, ModelQuantizers, QuantFormat};
use crate::tensor::Tensor;

/// Second-order statistics `H = (2/n)·X·Xᵀ` of one layer, row-major `dim × dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct HessianState {
    pub layer: LayerId,
    dim: usize,
    h: Vec<f64>,
    n_columns: usize,
}

impl HessianState {
    pub fn from_matrix(layer: LayerId, dim: usize, h: Vec<f64>, n_columns: usize) -> Result<Self> {
        if h.len() != dim * dim || dim == 0 {
            return Err(Error::contract(
                "HessianState",
                format!("{} entries for dimension {dim}", h.len()),
            ));
        }
        Ok(Self {
            layer,
            dim,
            h,
            n_columns,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_columns(&self) -> usize {
        self.n_columns
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.h[i * self.dim + j]
    }

    pub fn matrix(&self) -> &[f64] {
        &self.h
    }

    pub fn mean_diagonal(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum::<f64>() / self.dim as f64
    }
}

/// Ordered candidate dampening factors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DampSearchSpace {
    factors: Vec<f64>,
}

impl Default for DampSearchSpace {
    fn default() -> Self {
        Self {
            factors: (-3..=4).map(|e| 10f64.powi(e)).collect(),
        }
    }
}

impl DampSearchSpace {
    pub fn new(factors: Vec<f64>) -> Result<Self> {
        let s = Self { factors };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.factors.is_empty() {
            return Err(Error::Config("damp grid is empty".into()));
        }
        if self.factors.iter().any(|&f| !(f > 0.0 && f.is_finite())) {
            return Err(Error::Config("damp factors must be positive".into()));
        }
        if self.factors.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("damp factors must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn factors(&self) -> &[f64] {
        &self.factors
    }
}

/// `H = (2/n)·X·Xᵀ` over all `n` captured columns of the tap.
pub fn accumulate_hessian(tap: &LayerTap) -> Result<HessianState> {
    let n = tap.n_columns();
    let d = tap.d_in();
    if n == 0 {
        return Err(Error::degenerate("accumulate_hessian", "tap has no columns"));
    }
    // columns are stored as rows of an n × d matrix A, so X·Xᵀ = Aᵀ·A
    let a: Vec<f64> = tap.columns().iter().map(|&v| v as f64).collect();
    let mut h = vec![0.0; d * d];
    crate::kernels::gemm(d, n, d, 2.0 / n as f64, &a, (1, d), &a, (d, 1), 0.0, &mut h, (d, 1));
    // exact symmetry regardless of summation order inside the kernel
    for i in 0..d {
        for j in 0..i {
            let s = 0.5 * (h[i * d + j] + h[j * d + i]);
            h[i * d + j] = s;
            h[j * d + i] = s;
        }
    }
    HessianState::from_matrix(tap.layer, d, h, n)
}

/// `H' = H + factor·mean(diag H)·I`.
pub fn damp(h: &HessianState, factor: f64) -> Result<HessianState> {
    if !(factor > 0.0) {
        return Err(Error::contract("damp", format!("factor {factor} must be positive")));
    }
    let mean = h.mean_diagonal();
    if mean <= 0.0 {
        return Err(Error::degenerate(
            "damp",
            format!("mean Hessian diagonal of {} is zero", h.layer),
        ));
    }
    let mut out = h.clone();
    let d = h.dim;
    for i in 0..d {
        out.h[i * d + i] += factor * mean;
    }
    Ok(out)
}

/// Lower-triangular `L` with `A = L·Lᵀ`.
pub fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut s = a[j * n + j];
        for k in 0..j {
            s -= l[j * n + k] * l[j * n + k];
        }
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::NotPositiveDefinite { pivot: j });
        }
        let d = s.sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    Ok(l)
}

/// Inverse of a symmetric positive-definite matrix via its Cholesky factor.
pub fn spd_inverse(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let l = cholesky(a, n)?;
    // M = L⁻¹ by forward substitution, then A⁻¹ = Mᵀ·M
    let mut m = vec![0.0; n * n];
    for col in 0..n {
        for i in col..n {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in col..i {
                s -= l[i * n + k] * m[k * n + col];
            }
            m[i * n + col] = s / l[i * n + i];
        }
    }
    let mut inv = vec![0.0; n * n];
    crate::kernels::gemm(n, n, n, 1.0, &m, (1, n), &m, (n, 1), 0.0, &mut inv, (n, 1));
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (inv[i * n + j] + inv[j * n + i]);
            inv[i * n + j] = s;
            inv[j * n + i] = s;
        }
    }
    Ok(inv)
}

/// Upper-triangular `U` with `H⁻¹ = Uᵀ·U`.
fn inverse_upper_factor(h: &HessianState) -> Result<Vec<f64>> {
    let n = h.dim;
    let inv = spd_inverse(&h.h, n)?;
    let l = cholesky(&inv, n)?;
    let mut u = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            u[i * n + j] = l[j * n + i];
        }
    }
    Ok(u)
}

/// Column-sequential quantization of `w` (`d_out × d_in`) against the damped Hessian.
pub fn gptq_quantize_layer(w: &Tensor, h: &HessianState, q: &CalibratedQuantizer) -> Result<Tensor> {
    let (rows, cols) = w.dims2("gptq_quantize_layer")?;
    if cols != h.dim {
        return Err(Error::contract(
            "gptq_quantize_layer",
            format!("weight has {cols} input columns, Hessian is {}×{}", h.dim, h.dim),
        ));
    }
    w.check_finite("gptq_quantize_layer")?;
    let u = inverse_upper_factor(h)?;
    let mut work: Vec<f64> = w.data().iter().map(|&v| v as f64).collect();
    let mut out = vec![0.0f32; rows * cols];
    for j in 0..cols {
        let ujj = u[j * cols + j];
        let tail = &u[j * cols + j + 1..(j + 1) * cols];
        for r in 0..rows {
            let row = &mut work[r * cols..(r + 1) * cols];
            let qv = q.apply(row[j] as f32);
            out[r * cols + j] = qv;
            let err = (row[j] - qv as f64) / ujj;
            for (x, &uk) in row[j + 1..].iter_mut().zip(tail) {
                *x -= err * uk;
            }
        }
    }
    let t = Tensor::new(w.shape().to_vec(), out)?;
    t.check_finite("gptq_quantize_layer")?;
    Ok(t)
}

fn weight_delta(w_hat: &Tensor, w: &Tensor, op: &'static str) -> Result<(usize, usize, Vec<f64>)> {
    if w_hat.shape() != w.shape() {
        return Err(Error::contract(
            op,
            format!("shapes {:?} and {:?}", w_hat.shape(), w.shape()),
        ));
    }
    let (rows, cols) = w.dims2(op)?;
    let delta = w_hat
        .data()
        .iter()
        .zip(w.data())
        .map(|(&a, &b)| a as f64 - b as f64)
        .collect();
    Ok((rows, cols, delta))
}

/// Mean over calibration columns of `‖Ŵx − Wx‖²`, computed directly from the tap.
pub fn layer_mse(w_hat: &Tensor, w: &Tensor, tap: &LayerTap) -> Result<f64> {
    let (rows, cols, delta) = weight_delta(w_hat, w, "layer_mse")?;
    if cols != tap.d_in() {
        return Err(Error::contract(
            "layer_mse",
            format!("tap d_in {} vs {cols} weight columns", tap.d_in()),
        ));
    }
    let n = tap.n_columns();
    if n == 0 {
        return Err(Error::degenerate("layer_mse", "tap has no columns"));
    }
    let x: Vec<f64> = tap.columns().iter().map(|&v| v as f64).collect();
    // E = X_colsᵀ·Δᵀ : n × rows
    let mut e = vec![0.0; n * rows];
    crate::kernels::gemm(
        n,
        cols,
        rows,
        1.0,
        &x,
        (cols, 1),
        &delta,
        (1, cols),
        0.0,
        &mut e,
        (rows, 1),
    );
    Ok(e.iter().map(|v| v * v).sum::<f64>() / n as f64)
}

/// The same quantity as [`layer_mse`] from undamped statistics: `½·Σ_rows δᵀHδ`.
pub fn layer_mse_from_hessian(w_hat: &Tensor, w: &Tensor, h: &HessianState) -> Result<f64> {
    let (rows, cols, delta) = weight_delta(w_hat, w, "layer_mse")?;
    if cols != h.dim {
        return Err(Error::contract(
            "layer_mse",
            format!("Hessian dim {} vs {cols} weight columns", h.dim),
        ));
    }
    let mut hd = vec![0.0; rows * cols];
    crate::kernels::gemm(
        rows,
        cols,
        cols,
        1.0,
        &delta,
        (cols, 1),
        &h.h,
        (cols, 1),
        0.0,
        &mut hd,
        (cols, 1),
    );
    let quad: f64 = hd.iter().zip(&delta).map(|(a, b)| a * b).sum();
    Ok((0.5 * quad).max(0.0))
}

/// Outcome of the per-layer candidate search.
#[derive(Clone, Debug)]
pub struct LayerChoice {
    pub weights: Tensor,
    /// `None` when the round-to-nearest candidate won.
    pub chosen_factor: Option<f64>,
    pub mse_rtn: f64,
    pub mse_gptq: f64,
    /// Every damped candidate failed its Cholesky factorization.
    pub all_failed: bool,
}

/// Runs every damp factor plus round-to-nearest and keeps the lowest layer MSE.
/// Round-to-nearest is the first candidate, so it wins ties.
pub fn gptq_select_layer(
    w: &Tensor,
    h: &HessianState,
    q: &CalibratedQuantizer,
    space: &DampSearchSpace,
) -> Result<LayerChoice> {
    let rtn = fake_quantize(w, q)?;
    let mse_rtn = layer_mse_from_hessian(&rtn, w, h)?;
    let mut best = (mse_rtn, None, rtn);
    let mut failures = 0;
    for &factor in space.factors() {
        let candidate = damp(h, factor).and_then(|hd| gptq_quantize_layer(w, &hd, q));
        match candidate {
            Ok(c) => {
                let mse = layer_mse_from_hessian(&c, w, h)?;
                if mse < best.0 {
                    best = (mse, Some(factor), c);
                }
            }
            Err(Error::NotPositiveDefinite { pivot }) => {
                log::debug!("{}: damp {factor:e} not positive definite at pivot {pivot}", h.layer);
                failures += 1;
            }
            Err(e) => return Err(e),
        }
    }
    let all_failed = failures == space.factors().len();
    if all_failed {
        log::warn!(
            "{}: every damp factor failed, falling back to round-to-nearest",
            h.layer
        );
    }
    Ok(LayerChoice {
        weights: best.2,
        chosen_factor: best.1,
        mse_rtn,
        mse_gptq: best.0,
        all_failed,
    })
}

/// One row of the per-layer dampening report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DampReportRow {
    pub layer: LayerId,
    pub chosen_factor: Option<f64>,
    pub mse_rtn: f64,
    pub mse_gptq: f64,
    pub fallback: bool,
}

pub struct GptqOutcome {
    /// Weights already on the quantizer grid.
    pub params: Parameters,
    pub quantizers: ModelQuantizers,
    pub report: Vec<DampReportRow>,
}

fn solve_group(
    original: &Parameters,
    quantizers: &ModelQuantizers,
    taps: &[LayerTap],
    space: &DampSearchSpace,
) -> Result<Vec<(LayerId, LayerChoice)>> {
    par::map(taps, |tap| {
        let h = accumulate_hessian(tap)?;
        let q = quantizers
            .get(tap.layer)
            .ok_or_else(|| Error::contract("gptq_quantize_model", format!("no quantizer for {}", tap.layer)))?;
        gptq_select_layer(original.linear_weight(tap.layer), &h, q, space).map(|c| (tap.layer, c))
    })
    .into_iter()
    .collect()
}

/// Quantizes every transformer-stack linear layer with GPTQ.
///
/// Scales are calibrated on the pretrained weights exactly as for
/// round-to-nearest. In sequential mode each layer group sees inputs produced
/// by the already GPTQ-quantized earlier layers.
pub fn gptq_quantize_model(
    params: &Parameters,
    calibration: &[&[u16]],
    space: &DampSearchSpace,
    format: QuantFormat,
    propagation: Propagation,
) -> Result<GptqOutcome> {
    space.validate()?;
    let quantizers = calibrate_model(params, format)?;
    let mut working = params.clone();
    let mut choices = Vec::new();
    match propagation {
        Propagation::FullPrecision => {
            let taps = capture_layer_taps(params, calibration, propagation, None)?;
            choices = solve_group(params, &quantizers, &taps, space)?;
        }
        Propagation::SequentialQuantized => {
            let mut session = SequentialTaps::new(params, calibration);
            while let Some(taps) = session.next_group(&working)? {
                for (layer, choice) in solve_group(params, &quantizers, &taps, space)? {
                    *working.linear_weight_mut(layer) = choice.weights.clone();
                    choices.push((layer, choice));
                }
            }
        }
    }
    let mut report = Vec::with_capacity(choices.len());
    for (layer, choice) in choices {
        report.push(DampReportRow {
            layer,
            chosen_factor: choice.chosen_factor,
            mse_rtn: choice.mse_rtn,
            mse_gptq: choice.mse_gptq,
            fallback: choice.all_failed,
        });
        *working.linear_weight_mut(layer) = choice.weights;
    }
    Ok(GptqOutcome {
        params: working,
        quantizers,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{LinearKind, ModelConfig};
    use nalgebra::{DMatrix, SymmetricEigen};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const L: LayerId = LayerId {
        block: 0,
        kind: LinearKind::Q,
    };

    fn int2(scale: f32) -> CalibratedQuantizer {
        CalibratedQuantizer::new(QuantFormat::new(2).unwrap(), scale).unwrap()
    }

    fn random_tap(rng: &mut ChaCha8Rng, d: usize, n: usize, correlated: bool) -> LayerTap {
        let mix: Vec<f32> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut cols = Vec::with_capacity(n * d);
        for _ in 0..n {
            let z: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for i in 0..d {
                let v = if correlated {
                    (0..d).map(|k| mix[i * d + k] * z[k]).sum::<f32>() + 0.9 * z[0]
                } else {
                    z[i]
                };
                cols.push(v);
            }
        }
        LayerTap::new(L, d, cols).unwrap()
    }

    fn random_weight(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(
            vec![rows, cols],
            (0..rows * cols).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        )
        .unwrap()
    }

    /// Exhaustive minimum of the layer MSE over every codeword on the grid of `q`.
    fn brute_force(w: &Tensor, tap: &LayerTap, q: &CalibratedQuantizer) -> f64 {
        let levels: Vec<f32> = crate::quant::quant_levels(q.format)
            .map(|k| k as f32 * q.scale)
            .collect();
        let n = w.len();
        let mut idx = vec![0usize; n];
        let mut best = f64::INFINITY;
        loop {
            let cand = Tensor::new(w.shape().to_vec(), idx.iter().map(|&i| levels[i]).collect()).unwrap();
            best = best.min(layer_mse(&cand, w, tap).unwrap());
            let mut k = 0;
            while k < n {
                idx[k] += 1;
                if idx[k] < levels.len() {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == n {
                return best;
            }
        }
    }

    #[test]
    fn identity_columns_give_identity_hessian() {
        let tap = LayerTap::new(L, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let h = accumulate_hessian(&tap).unwrap();
        assert_eq!(h.matrix(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn identical_columns_give_rank_one() {
        let tap = LayerTap::new(L, 3, [1.0f32, 2.0, -1.0].repeat(5)).unwrap();
        let h = accumulate_hessian(&tap).unwrap();
        let m = DMatrix::from_row_slice(3, 3, h.matrix());
        let eig = SymmetricEigen::new(m).eigenvalues;
        let nonzero = eig.iter().filter(|v| v.abs() > 1e-9).count();
        assert_eq!(nonzero, 1);
    }

    #[test]
    fn empty_tap_is_degenerate() {
        let tap = LayerTap::new(L, 3, vec![]).unwrap();
        assert!(matches!(accumulate_hessian(&tap), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn damp_adds_scaled_mean_diagonal() {
        let h = HessianState::from_matrix(L, 2, vec![2.0, 0.3, 0.3, 2.0], 1).unwrap();
        let d = damp(&h, 0.5).unwrap();
        assert_eq!(d.matrix(), &[3.0, 0.3, 0.3, 3.0]);
        let zero = HessianState::from_matrix(L, 2, vec![0.0; 4], 1).unwrap();
        assert!(matches!(damp(&zero, 1.0), Err(Error::Degenerate { .. })));
        assert!(damp(&h, 0.0).is_err());
    }

    #[test]
    fn huge_damp_is_diagonally_dominant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = accumulate_hessian(&random_tap(&mut rng, 6, 20, true)).unwrap();
        let d = damp(&h, 1e4).unwrap();
        for i in 0..6 {
            let off: f64 = (0..6).filter(|&j| j != i).map(|j| d.get(i, j).abs()).sum();
            assert!(d.get(i, i) > off);
        }
    }

    #[test]
    fn damp_space_validation() {
        assert_eq!(DampSearchSpace::default().factors().len(), 8);
        assert_eq!(DampSearchSpace::default().factors()[0], 1e-3);
        assert!(DampSearchSpace::new(vec![]).is_err());
        assert!(DampSearchSpace::new(vec![1.0, 1.0]).is_err());
        assert!(DampSearchSpace::new(vec![-1.0]).is_err());
    }

    #[test]
    fn correlated_pair_matches_brute_force() {
        let w = Tensor::from_rows(&[&[0.4f32, 0.4]]).unwrap();
        let tap = LayerTap::new(L, 2, vec![1.0, 1.0]).unwrap();
        let q = int2(1.0);
        let rtn = fake_quantize(&w, &q).unwrap();
        assert_eq!(rtn.data(), &[0.0, 0.0]);
        assert!((layer_mse(&rtn, &w, &tap).unwrap() - 0.64).abs() < 1e-6);
        let h = damp(&accumulate_hessian(&tap).unwrap(), 1e-3).unwrap();
        let g = gptq_quantize_layer(&w, &h, &q).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0]);
        let mse = layer_mse(&g, &w, &tap).unwrap();
        assert!((mse - 0.04).abs() < 1e-6);
        assert!((brute_force(&w, &tap, &q) - mse).abs() < 1e-12);
    }

    #[test]
    fn on_grid_weights_are_fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = CalibratedQuantizer::new(QuantFormat::new(3).unwrap(), 0.25).unwrap();
        let w = Tensor::new(
            vec![3, 5],
            (0..15).map(|_| rng.gen_range(-3i32..=3) as f32 * 0.25).collect(),
        )
        .unwrap();
        let h = damp(&accumulate_hessian(&random_tap(&mut rng, 5, 12, true)).unwrap(), 1e-2).unwrap();
        assert_eq!(gptq_quantize_layer(&w, &h, &q).unwrap(), w);
    }

    #[test]
    fn diagonal_hessian_reduces_to_rtn() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random_weight(&mut rng, 4, 5);
        let q = crate::quant::calibrate_scale(&w, QuantFormat::new(2).unwrap()).unwrap();
        let diag: Vec<f64> = (0..25).map(|i| if i % 6 == 0 { 1.0 + i as f64 } else { 0.0 }).collect();
        let h = HessianState::from_matrix(L, 5, diag, 1).unwrap();
        for factor in [1e-3, 1.0, 1e4] {
            let g = gptq_quantize_layer(&w, &damp(&h, factor).unwrap(), &q).unwrap();
            assert_eq!(g, fake_quantize(&w, &q).unwrap());
        }
    }

    #[test]
    fn large_damp_moves_toward_rtn() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut closer = 0;
        for _ in 0..20 {
            let w = random_weight(&mut rng, 6, 8);
            let q = crate::quant::calibrate_scale(&w, QuantFormat::new(3).unwrap()).unwrap();
            let h = accumulate_hessian(&random_tap(&mut rng, 8, 40, true)).unwrap();
            let rtn = fake_quantize(&w, &q).unwrap();
            let dist = |t: &Tensor| {
                t.data()
                    .iter()
                    .zip(rtn.data())
                    .map(|(a, b)| ((a - b) as f64).powi(2))
                    .sum::<f64>()
            };
            let lo = gptq_quantize_layer(&w, &damp(&h, 1e-3).unwrap(), &q).unwrap();
            let hi = gptq_quantize_layer(&w, &damp(&h, 1e4).unwrap(), &q).unwrap();
            assert!(dist(&hi) <= dist(&lo));
            closer += (dist(&hi) < dist(&lo)) as usize;
        }
        assert!(closer > 0);
    }

    #[test]
    fn cholesky_inverse_matches_eigen_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = damp(&accumulate_hessian(&random_tap(&mut rng, 7, 30, true)).unwrap(), 1e-2).unwrap();
        let inv = spd_inverse(h.matrix(), 7).unwrap();
        let m = DMatrix::from_row_slice(7, 7, h.matrix());
        let oracle = m.try_inverse().unwrap();
        for i in 0..7 {
            for j in 0..7 {
                assert!((inv[i * 7 + j] - oracle[(i, j)]).abs() < 1e-8 * oracle.amax());
            }
        }
        assert!(matches!(
            cholesky(&[1.0, 2.0, 2.0, 1.0], 2),
            Err(Error::NotPositiveDefinite { pivot: 1 })
        ));
    }

    #[test]
    fn gptq_output_is_on_grid_and_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = random_weight(&mut rng, 5, 9);
        let q = crate::quant::calibrate_scale(&w, QuantFormat::new(4).unwrap()).unwrap();
        let h = damp(&accumulate_hessian(&random_tap(&mut rng, 9, 50, true)).unwrap(), 1e-2).unwrap();
        let g = gptq_quantize_layer(&w, &h, &q).unwrap();
        assert_eq!(fake_quantize(&g, &q).unwrap(), g);
    }

    #[test]
    fn selection_never_worse_than_rtn() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let w = random_weight(&mut rng, 4, 6);
            let q = crate::quant::calibrate_scale(&w, QuantFormat::new(2).unwrap()).unwrap();
            let h = accumulate_hessian(&random_tap(&mut rng, 6, 24, true)).unwrap();
            let c = gptq_select_layer(&w, &h, &q, &DampSearchSpace::default()).unwrap();
            assert!(c.mse_gptq <= c.mse_rtn);
            assert!(!c.all_failed);
        }
    }

    #[test]
    fn tiny_layers_are_bracketed_by_brute_force_and_rtn() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for i in 0..30 {
            let (rows, cols) = [(1, 2), (1, 3), (2, 2), (2, 3), (1, 6), (3, 2)][i % 6];
            let w = random_weight(&mut rng, rows, cols);
            let q = crate::quant::calibrate_scale(&w, QuantFormat::new(2).unwrap()).unwrap();
            let tap = random_tap(&mut rng, cols, 16, true);
            let h = accumulate_hessian(&tap).unwrap();
            let c = gptq_select_layer(&w, &h, &q, &DampSearchSpace::default()).unwrap();
            let brute = brute_force(&w, &tap, &q);
            let gptq = layer_mse(&c.weights, &w, &tap).unwrap();
            let rtn = layer_mse(&fake_quantize(&w, &q).unwrap(), &w, &tap).unwrap();
            assert!(brute <= gptq + 1e-9 && gptq <= rtn + 1e-9, "{brute} {gptq} {rtn}");
        }
    }

    #[test]
    fn zero_delta_has_zero_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = random_weight(&mut rng, 3, 4);
        let tap = random_tap(&mut rng, 4, 10, false);
        assert_eq!(layer_mse(&w, &w, &tap).unwrap(), 0.0);
        let h = accumulate_hessian(&tap).unwrap();
        assert_eq!(layer_mse_from_hessian(&w, &w, &h).unwrap(), 0.0);
    }

    #[test]
    fn model_report_covers_every_layer() {
        let config = ModelConfig {
            seq_len: 8,
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_ff: 24,
            ..Default::default()
        };
        let p = Parameters::init(&config).unwrap();
        let blocks: Vec<Vec<u16>> = (0..3)
            .map(|s| (0..8).map(|i| (i * 7 + s * 31) % 256).collect())
            .collect();
        let refs: Vec<&[u16]> = blocks.iter().map(|b| b.as_slice()).collect();
        for prop in [Propagation::FullPrecision, Propagation::SequentialQuantized] {
            let out = gptq_quantize_model(
                &p,
                &refs,
                &DampSearchSpace::default(),
                QuantFormat::new(3).unwrap(),
                prop,
            )
            .unwrap();
            assert_eq!(out.report.len(), 12);
            assert!(out.report.iter().all(|r| r.mse_gptq <= r.mse_rtn));
            for layer in config.quantized_layers() {
                let wq = out.params.linear_weight(layer);
                assert_eq!(&fake_quantize(wq, out.quantizers.get(layer).unwrap()).unwrap(), wq);
            }
        }
    }

    proptest! {
        #[test]
        fn hessian_is_psd(seed in 0u64..200, d in 1usize..8, n in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = accumulate_hessian(&random_tap(&mut rng, d, n, seed % 2 == 0)).unwrap();
            let m = DMatrix::from_row_slice(d, d, h.matrix());
            prop_assert_eq!(m.transpose(), m.clone());
            let min = SymmetricEigen::new(m).eigenvalues.min();
            prop_assert!(min >= -1e-6, "min eigenvalue {}", min);
        }

        #[test]
        fn mse_routes_agree(seed in 0u64..200, rows in 1usize..6, cols in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random_weight(&mut rng, rows, cols);
            let w_hat = random_weight(&mut rng, rows, cols);
            let tap = random_tap(&mut rng, cols, 11, true);
            let direct = layer_mse(&w_hat, &w, &tap).unwrap();
            let via_h = layer_mse_from_hessian(&w_hat, &w, &accumulate_hessian(&tap).unwrap()).unwrap();
            // naive double loop
            let mut naive = 0.0;
            for c in 0..tap.n_columns() {
                let x = tap.column(c);
                for r in 0..rows {
                    let mut e = 0.0;
                    for k in 0..cols {
                        e += (w_hat.data()[r * cols + k] as f64 - w.data()[r * cols + k] as f64) * x[k] as f64;
                    }
                    naive += e * e;
                }
            }
            naive /= tap.n_columns() as f64;
            prop_assert!((direct - naive).abs() <= 1e-9 * naive.max(1.0));
            prop_assert!((via_h - naive).abs() <= 1e-6 * naive.max(1.0));
            let scaled = layer_mse(&w_hat, &w, &tap.scaled(3.0)).unwrap();
            prop_assert!((scaled - 9.0 * direct).abs() <= 1e-5 * direct.max(1.0));
        }
    }
}
