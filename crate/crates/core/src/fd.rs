//! Central finite differences, the reference every analytic gradient is checked against.

use crate::error::{Error, Result};
use crate::graph::GradientMap;
use crate::tensor::{Scalar, Tensor};

/// `(f(w + eps·e_i) − f(w − eps·e_i)) / (2·eps)` for every coordinate of every tensor.
pub fn finite_difference_gradient<T, F>(f: F, params: &[Tensor<T>], eps: f64) -> Result<GradientMap<T>>
where
    T: Scalar,
    F: Fn(&[Tensor<T>]) -> Result<f64>,
{
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(t, p)| (0..p.len()).map(move |i| (t, i)))
        .collect();
    let values = finite_difference_at(f, params, &coords, eps)?;
    let mut grads: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    for (&(t, i), v) in coords.iter().zip(values) {
        grads[t].data_mut()[i] = T::of_f64(v);
    }
    Ok(GradientMap::from_entries(grads.into_iter().enumerate().collect()))
}

/// Central differences at selected `(tensor, element)` coordinates only.
pub fn finite_difference_at<T, F>(f: F, params: &[Tensor<T>], coords: &[(usize, usize)], eps: f64) -> Result<Vec<f64>>
where
    T: Scalar,
    F: Fn(&[Tensor<T>]) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::contract("finite_difference_gradient", "eps must be positive"));
    }
    let mut work = params.to_vec();
    coords
        .iter()
        .map(|&(t, i)| {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = T::of_f64(orig.as_f64() + eps);
            let plus = f(&work)?;
            work[t].data_mut()[i] = T::of_f64(orig.as_f64() - eps);
            let minus = f(&work)?;
            work[t].data_mut()[i] = orig;
            Ok((plus - minus) / (2.0 * eps))
        })
        .collect()
}
