//! Seeded synthetic weight archives for fixtures and benchmarks.

use rand::Rng;

use crate::archive::TensorArchive;
use crate::error::{Error, Result};
use crate::rng::{layer_seed, stream_rng};
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Build the layer as an exact rank-`r` product (2- or 4-axis only).
    pub rank: Option<usize>,
}

impl LayerSpec {
    /// Parses `name=64x3x3x3` or `name=64x64@8`.
    pub fn parse(text: &str) -> Result<Self> {
        let bad =
            || Error::InvalidArgument(format!("layer spec {text:?}: expected NAME=DxDx..[@RANK]"));
        let (name, rest) = text.split_once('=').ok_or_else(bad)?;
        if name.is_empty() {
            return Err(bad());
        }
        let (dims, rank) = match rest.split_once('@') {
            Some((d, r)) => (d, Some(r.parse::<usize>().map_err(|_| bad())?)),
            None => (rest, None),
        };
        let shape = dims
            .split('x')
            .map(|d| d.parse::<usize>().ok().filter(|&d| d > 0))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(bad)?;
        Ok(Self {
            name: name.to_string(),
            shape,
            rank,
        })
    }
}

fn matrix_dims(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        &[m, n] => Ok((m, n)),
        &[co, ci, h, w] => Ok((co, ci * h * w)),
        other => Err(Error::Shape(format!(
            "exact-rank layers need 2 or 4 axes, got {other:?}"
        ))),
    }
}

/// Random layer: uniform on `[-1, 1)`, or for `rank = Some(r)` the product of
/// an `m x r` and an `r x n` matrix whose entries are multiples of 1/8 in
/// `[-1, 1]`. Those products are exact in `f32`, so the stored tensor has
/// rank exactly `r`.
pub fn generate_layer(spec: &LayerSpec, seed: u64) -> Result<DenseTensor> {
    let mut rng = stream_rng(layer_seed(seed, &spec.name), 0);
    let numel: usize = spec.shape.iter().product();
    let data = match spec.rank {
        None => (0..numel).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        Some(r) => {
            let (m, n) = matrix_dims(&spec.shape)?;
            if r == 0 || r > m.min(n) {
                return Err(Error::InvalidArgument(format!(
                    "layer {}: rank {r} outside 1..={}",
                    spec.name,
                    m.min(n)
                )));
            }
            let mut dyadic = |len: usize| -> Vec<f64> {
                (0..len)
                    .map(|_| f64::from(rng.random_range(-8i32..=8)) / 8.0)
                    .collect()
            };
            let a = dyadic(m * r);
            let b = dyadic(r * n);
            let mut data = vec![0.0f32; m * n];
            for i in 0..m {
                for j in 0..n {
                    let s: f64 = (0..r).map(|k| a[i * r + k] * b[k * n + j]).sum();
                    data[i * n + j] = s as f32;
                }
            }
            data
        }
    };
    DenseTensor::new(spec.shape.clone(), data)
}

pub fn generate_archive(specs: &[LayerSpec], seed: u64) -> Result<TensorArchive> {
    let mut archive = TensorArchive::new();
    for spec in specs {
        archive.push(spec.name.clone(), generate_layer(spec, seed)?)?;
    }
    Ok(archive)
}
