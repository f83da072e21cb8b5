//! Per-layer composition of pruning, truncated SVD and annealed factorization,
//! plus the parameter bookkeeping that goes into a [`CompressionReport`].
//!
//! Each configured layer runs its `stage_list` in order:
//!
//! * `prune` computes a retain mask on the current effective weights;
//! * `decompose` replaces the stored representation with truncated SVD factors
//!   of the current (masked, if pruning came first) weights;
//! * `factorize` replaces it with an annealed `W1 W2` fitted to the current
//!   weights, which after `decompose` is the truncated reconstruction.
//!
//! The stored artifact is whatever representation the last non-prune stage
//! produced (a masked dense tensor when only pruning ran) together with the
//! mask. Effective weights are `mask ⊙ representation`.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::archive::TensorArchive;
use crate::decompose::{reconstruct, svd_tensor, truncate, SvdFactors};
use crate::error::{Error, Result};
use crate::factorize::{anneal_factorize, compressed_matrix, AnnealConfig, FactorPair};
use crate::prune::{iterative_prune, PruneConfig};
use crate::rng::layer_seed;
use crate::tensor::{as_matrix, DenseTensor, RetainMask};

/// Tolerance on `recon_error_rel` when re-deriving a report from artifacts.
pub const RECON_TOLERANCE: f64 = 1e-6;
/// Relative tolerance on recomputed ratios.
pub const RATIO_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Prune,
    Decompose,
    Factorize,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Prune => "prune",
            Stage::Decompose => "decompose",
            Stage::Factorize => "factorize",
        })
    }
}

pub fn default_stage_list() -> Vec<Stage> {
    vec![Stage::Prune, Stage::Decompose, Stage::Factorize]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    #[serde(default)]
    pub layer_name: String,
    #[serde(default = "default_stage_list")]
    pub stage_list: Vec<Stage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prune: Option<PruneConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_svd: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anneal: Option<AnnealConfig>,
}

impl LayerConfig {
    pub fn new(layer_name: impl Into<String>, stage_list: Vec<Stage>) -> Self {
        Self {
            layer_name: layer_name.into(),
            stage_list,
            prune: None,
            rank_svd: None,
            anneal: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err =
            |msg: String| Err(Error::Config(format!("layer {:?}: {msg}", self.layer_name)));
        if self.stage_list.is_empty() {
            return cfg_err("stage_list is empty".into());
        }
        for (i, s) in self.stage_list.iter().enumerate() {
            if self.stage_list[..i].contains(s) {
                return cfg_err(format!("stage {s} listed twice"));
            }
        }
        for stage in &self.stage_list {
            match stage {
                Stage::Prune => match &self.prune {
                    None => return cfg_err("prune stage needs a prune section".into()),
                    Some(p) => p.validate().or_else(|e| cfg_err(e.to_string()))?,
                },
                Stage::Decompose => match self.rank_svd {
                    None | Some(0) => return cfg_err("decompose stage needs rank_svd >= 1".into()),
                    Some(_) => {}
                },
                Stage::Factorize => match &self.anneal {
                    None => return cfg_err("factorize stage needs an anneal section".into()),
                    Some(a) => a.validate().or_else(|e| cfg_err(e.to_string()))?,
                },
            }
        }
        Ok(())
    }

    /// Replaces every seed with `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        if let Some(p) = self.prune.as_mut() {
            p.seed = seed;
        }
        if let Some(a) = self.anneal.as_mut() {
            a.seed = seed;
        }
    }
}

/// `{"defaults": {...}, "layers": {"name": {...overrides}}}`. Overrides are
/// deep-merged into the defaults; only layers named under `layers` are
/// compressed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub defaults: Map<String, Value>,
    #[serde(default)]
    pub layers: BTreeMap<String, Map<String, Value>>,
}

fn merge(base: &mut Map<String, Value>, overrides: &Map<String, Value>) {
    for (k, v) in overrides {
        match (base.get_mut(k), v) {
            (Some(Value::Object(b)), Value::Object(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Fully resolved and validated per-layer configs, in name order.
    pub fn resolve(&self, seed_override: Option<u64>) -> Result<Vec<LayerConfig>> {
        self.layers
            .iter()
            .map(|(name, overrides)| {
                let mut merged = self.defaults.clone();
                merge(&mut merged, overrides);
                merged.insert("layer_name".into(), Value::String(name.clone()));
                let mut cfg: LayerConfig = serde_json::from_value(Value::Object(merged))
                    .map_err(|e| Error::Config(format!("layer {name:?}: {e}")))?;
                if let Some(seed) = seed_override {
                    cfg.override_seed(seed);
                }
                cfg.validate()?;
                Ok(cfg)
            })
            .collect()
    }
}

/// How a layer is stored after compression.
#[derive(Debug, Clone, PartialEq)]
pub enum Representation {
    /// Untouched input.
    PassThrough(DenseTensor),
    /// Pruned weights in the original shape; only the mask's survivors count.
    MaskedDense(DenseTensor),
    Svd(SvdFactors),
    Factors(FactorPair),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    PassThrough,
    MaskedDense,
    Svd,
    Factors,
}

impl fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArtifactKind::PassThrough => "pass",
            ArtifactKind::MaskedDense => "masked",
            ArtifactKind::Svd => "svd",
            ArtifactKind::Factors => "factors",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedLayer {
    pub name: String,
    pub original_shape: Vec<usize>,
    pub representation: Representation,
    pub mask: Option<RetainMask>,
}

impl CompressedLayer {
    pub fn kind(&self) -> ArtifactKind {
        match self.representation {
            Representation::PassThrough(_) => ArtifactKind::PassThrough,
            Representation::MaskedDense(_) => ArtifactKind::MaskedDense,
            Representation::Svd(_) => ArtifactKind::Svd,
            Representation::Factors(_) => ArtifactKind::Factors,
        }
    }

    /// Stored parameter count, excluding the mask.
    pub fn params_after(&self) -> usize {
        match &self.representation {
            Representation::PassThrough(t) => t.numel(),
            Representation::MaskedDense(t) => match &self.mask {
                Some(m) => m.retained(),
                None => t.numel(),
            },
            Representation::Svd(f) => f.param_count(),
            Representation::Factors(f) => f.param_count(),
        }
    }

    pub fn rank(&self) -> Option<usize> {
        match &self.representation {
            Representation::Svd(f) => Some(f.rank()),
            Representation::Factors(f) => Some(f.rank()),
            _ => None,
        }
    }

    pub fn mask_bits(&self) -> usize {
        self.mask.as_ref().map_or(0, RetainMask::len)
    }

    /// The representation's weights before masking, in the original shape.
    fn unmasked(&self) -> Result<DenseTensor> {
        match &self.representation {
            Representation::PassThrough(t) | Representation::MaskedDense(t) => Ok(t.clone()),
            Representation::Svd(f) => reconstruct(f),
            Representation::Factors(f) => {
                compressed_matrix(f)?.reshape(self.original_shape.clone())
            }
        }
    }

    /// `mask ⊙ representation`, in the original shape.
    pub fn effective_weights(&self) -> Result<DenseTensor> {
        masked(&self.unmasked()?, &self.mask)
    }

    pub fn push_into(&self, archive: &mut TensorArchive) -> Result<()> {
        let name = &self.name;
        match &self.representation {
            Representation::PassThrough(t) | Representation::MaskedDense(t) => {
                archive.push(name.clone(), t.clone())?
            }
            Representation::Svd(f) => f.push_into(archive, name)?,
            Representation::Factors(f) => f.push_into(archive, name)?,
        }
        if let Some(m) = &self.mask {
            archive.push(format!("{name}.mask"), m.to_tensor())?;
        }
        Ok(())
    }

    /// Rebuilds a layer from a compressed archive using its report row.
    pub fn from_archive(archive: &TensorArchive, row: &LayerReport) -> Result<Self> {
        let name = row.layer_name.as_str();
        let fetch = |entry: &str| {
            archive.get(entry).cloned().ok_or_else(|| {
                Error::InvalidArgument(format!("compressed archive lacks {entry:?}"))
            })
        };
        let representation = match row.kind {
            ArtifactKind::PassThrough => Representation::PassThrough(fetch(name)?),
            ArtifactKind::MaskedDense => Representation::MaskedDense(fetch(name)?),
            ArtifactKind::Svd => {
                Representation::Svd(SvdFactors::from_archive(archive, name, row.shape.clone())?)
            }
            ArtifactKind::Factors => {
                Representation::Factors(FactorPair::from_archive(archive, name)?)
            }
        };
        let mask = match archive.get(&format!("{name}.mask")) {
            Some(t) => Some(RetainMask::from_tensor(t)?),
            None => None,
        };
        let layer = Self {
            name: name.to_string(),
            original_shape: row.shape.clone(),
            representation,
            mask,
        };
        let numel: usize = row.shape.iter().product();
        if layer.effective_weights()?.numel() != numel {
            return Err(Error::Shape(format!(
                "{name}: artifacts do not rebuild shape {:?}",
                row.shape
            )));
        }
        Ok(layer)
    }
}

/// `||W - effective||_F / ||W||_F`; the absolute error when `W` is zero.
pub fn relative_error(original: &DenseTensor, approx: &DenseTensor) -> Result<f64> {
    if original.numel() != approx.numel() {
        return Err(Error::Shape(format!(
            "{:?} vs {:?}",
            original.shape(),
            approx.shape()
        )));
    }
    let err = original
        .data()
        .iter()
        .zip(approx.data())
        .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = original.frobenius_norm();
    Ok(if norm > 0.0 { err / norm } else { err })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerReport {
    pub layer_name: String,
    pub kind: ArtifactKind,
    pub shape: Vec<usize>,
    pub params_before: usize,
    pub params_after: usize,
    pub ratio: f64,
    pub recon_error_rel: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub achieved_sparsity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
    pub mask_bits: usize,
    /// Only recorded on request; timings would break byte-identical reports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_ms: Option<f64>,
}

impl LayerReport {
    fn new(layer: &CompressedLayer, original: &DenseTensor) -> Result<Self> {
        let params_after = layer.params_after();
        Ok(Self {
            layer_name: layer.name.clone(),
            kind: layer.kind(),
            shape: layer.original_shape.clone(),
            params_before: original.numel(),
            params_after,
            ratio: ratio(original.numel(), params_after),
            recon_error_rel: relative_error(original, &layer.effective_weights()?)?,
            rank: layer.rank(),
            achieved_sparsity: layer.mask.as_ref().map(RetainMask::sparsity),
            final_loss: match &layer.representation {
                Representation::Factors(f) => Some(f.final_loss),
                _ => None,
            },
            mask_bits: layer.mask_bits(),
            wall_time_ms: None,
        })
    }
}

fn ratio(before: usize, after: usize) -> f64 {
    if after == 0 {
        f64::INFINITY
    } else {
        before as f64 / after as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionReport {
    pub per_layer: Vec<LayerReport>,
    pub params_before: usize,
    pub params_after: usize,
    pub total_ratio: f64,
    pub mask_bits: usize,
    /// Resolved configuration of every compressed layer.
    pub config_echo: Vec<LayerConfig>,
}

impl CompressionReport {
    pub fn from_rows(per_layer: Vec<LayerReport>, config_echo: Vec<LayerConfig>) -> Self {
        let params_before = per_layer.iter().map(|r| r.params_before).sum();
        let params_after = per_layer.iter().map(|r| r.params_after).sum();
        let mask_bits = per_layer.iter().map(|r| r.mask_bits).sum();
        Self {
            total_ratio: if per_layer.is_empty() {
                1.0
            } else {
                ratio(params_before, params_after)
            },
            per_layer,
            params_before,
            params_after,
            mask_bits,
            config_echo,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

impl fmt::Display for CompressionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<24} {:<8} {:>12} {:>12} {:>8} {:>11} {:>10}",
            "layer", "kind", "params", "compressed", "ratio", "rel.error", "mask bits"
        )?;
        for r in &self.per_layer {
            writeln!(
                f,
                "{:<24} {:<8} {:>12} {:>12} {:>7.2}× {:>11.3e} {:>10}",
                r.layer_name,
                r.kind.to_string(),
                r.params_before,
                r.params_after,
                r.ratio,
                r.recon_error_rel,
                r.mask_bits
            )?;
        }
        write!(
            f,
            "{:<24} {:<8} {:>12} {:>12} {:>7.2}× {:>11} {:>10}",
            "total",
            "",
            self.params_before,
            self.params_after,
            self.total_ratio,
            "",
            self.mask_bits
        )
    }
}

/// Compresses one layer. Seeds in `cfg` are mixed with the layer name, so a
/// layer's result does not depend on which other layers are configured.
pub fn compress_layer(
    w: &DenseTensor,
    cfg: &LayerConfig,
) -> Result<(CompressedLayer, LayerReport)> {
    run_layer(w, cfg).map_err(|e| e.in_layer(&cfg.layer_name))
}

fn run_layer(w: &DenseTensor, cfg: &LayerConfig) -> Result<(CompressedLayer, LayerReport)> {
    cfg.validate()?;
    let started = Instant::now();
    let shape = w.shape().to_vec();
    // Validates the 2- or 4-axis requirement up front.
    as_matrix(w)?;

    let mut current = w.clone();
    let mut representation = Representation::MaskedDense(w.clone());
    let mut mask: Option<RetainMask> = None;

    for stage in &cfg.stage_list {
        match stage {
            Stage::Prune => {
                let mut pcfg = cfg.prune.clone().expect("validated");
                pcfg.seed = layer_seed(pcfg.seed, &cfg.layer_name);
                let result = iterative_prune(&masked(&current, &mask)?, &pcfg)?;
                if let Representation::MaskedDense(_) = representation {
                    representation = Representation::MaskedDense(result.pruned_weights.clone());
                    current = result.pruned_weights;
                }
                mask = Some(result.mask);
            }
            Stage::Decompose => {
                let r = cfg.rank_svd.expect("validated");
                let factors = truncate(&svd_tensor(&masked(&current, &mask)?)?, r)?;
                current = reconstruct(&factors)?;
                representation = Representation::Svd(factors);
            }
            Stage::Factorize => {
                let mut acfg = cfg.anneal.clone().expect("validated");
                acfg.seed = layer_seed(acfg.seed, &cfg.layer_name);
                let pair = anneal_factorize(&as_matrix(&masked(&current, &mask)?)?, &acfg)?;
                current = compressed_matrix(&pair)?.reshape(shape.clone())?;
                representation = Representation::Factors(pair);
            }
        }
    }

    let layer = CompressedLayer {
        name: cfg.layer_name.clone(),
        original_shape: shape,
        representation,
        mask,
    };
    let mut row = LayerReport::new(&layer, w)?;
    row.wall_time_ms = Some(started.elapsed().as_secs_f64() * 1e3);
    Ok((layer, row))
}

fn masked(w: &DenseTensor, mask: &Option<RetainMask>) -> Result<DenseTensor> {
    match mask {
        Some(m) => m.apply(w),
        None => Ok(w.clone()),
    }
}

#[derive(Debug, Clone, Default)]
pub struct CompressOptions {
    /// Replaces every configured seed.
    pub seed_override: Option<u64>,
    /// Worker threads; `0` lets rayon decide.
    pub jobs: usize,
    /// Keep per-layer wall times in the report.
    pub record_timings: bool,
}

/// Compresses every layer named in `config`; other layers pass through
/// unchanged and still count toward the totals.
pub fn compress_archive(
    archive: &TensorArchive,
    config: &PipelineConfig,
    opts: &CompressOptions,
) -> Result<(TensorArchive, CompressionReport)> {
    let layer_cfgs = config.resolve(opts.seed_override)?;
    let missing: Vec<String> = layer_cfgs
        .iter()
        .filter(|c| archive.get(&c.layer_name).is_none())
        .map(|c| c.layer_name.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::UnknownLayers(missing));
    }
    let by_name: BTreeMap<&str, &LayerConfig> = layer_cfgs
        .iter()
        .map(|c| (c.layer_name.as_str(), c))
        .collect();

    let work = |(name, w): &(String, DenseTensor)| -> Result<(CompressedLayer, LayerReport)> {
        match by_name.get(name.as_str()) {
            Some(cfg) => compress_layer(w, cfg),
            None => {
                let layer = CompressedLayer {
                    name: name.clone(),
                    original_shape: w.shape().to_vec(),
                    representation: Representation::PassThrough(w.clone()),
                    mask: None,
                };
                let row = LayerReport::new(&layer, w)?;
                Ok((layer, row))
            }
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let results: Vec<(CompressedLayer, LayerReport)> = pool.install(|| {
        archive
            .entries()
            .par_iter()
            .map(work)
            .collect::<Result<_>>()
    })?;

    let mut out = TensorArchive::new();
    let mut rows = Vec::with_capacity(results.len());
    for (layer, mut row) in results {
        layer.push_into(&mut out)?;
        if !opts.record_timings {
            row.wall_time_ms = None;
        }
        rows.push(row);
    }
    Ok((out, CompressionReport::from_rows(rows, layer_cfgs)))
}

fn mismatch(field: String, reported: impl fmt::Display, recomputed: impl fmt::Display) -> Error {
    Error::Mismatch {
        field,
        reported: reported.to_string(),
        recomputed: recomputed.to_string(),
    }
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    a == b || (a - b).abs() <= rel * a.abs().max(b.abs())
}

/// Re-derives every number in `report` from the archives and fails on the
/// first field that disagrees.
pub fn verify_report(
    original: &TensorArchive,
    compressed: &TensorArchive,
    report: &CompressionReport,
) -> Result<()> {
    let reported: Vec<&str> = report
        .per_layer
        .iter()
        .map(|r| r.layer_name.as_str())
        .collect();
    let actual: Vec<&str> = original.names().collect();
    if reported != actual {
        return Err(mismatch(
            "per_layer".into(),
            reported.join(","),
            actual.join(","),
        ));
    }

    let mut expected_entries = 0;
    for row in &report.per_layer {
        let name = &row.layer_name;
        let field = |f: &str| format!("{name}.{f}");
        let w = original.get(name).expect("names checked above");
        if row.shape != w.shape() {
            return Err(mismatch(
                field("shape"),
                format!("{:?}", row.shape),
                format!("{:?}", w.shape()),
            ));
        }
        if row.params_before != w.numel() {
            return Err(mismatch(
                field("params_before"),
                row.params_before,
                w.numel(),
            ));
        }
        let layer = CompressedLayer::from_archive(compressed, row)?;
        if let Representation::PassThrough(t) = &layer.representation {
            if !t.bit_eq(w) {
                return Err(mismatch(field("data"), "pass-through", "modified tensor"));
            }
        }
        expected_entries += match layer.kind() {
            ArtifactKind::PassThrough | ArtifactKind::MaskedDense => 1,
            ArtifactKind::Svd => 3,
            ArtifactKind::Factors => 2,
        } + usize::from(layer.mask.is_some());

        let after = layer.params_after();
        if row.params_after != after {
            return Err(mismatch(field("params_after"), row.params_after, after));
        }
        if !close(row.ratio, ratio(row.params_before, after), RATIO_TOLERANCE) {
            return Err(mismatch(
                field("ratio"),
                row.ratio,
                ratio(row.params_before, after),
            ));
        }
        if row.mask_bits != layer.mask_bits() {
            return Err(mismatch(
                field("mask_bits"),
                row.mask_bits,
                layer.mask_bits(),
            ));
        }
        if row.rank != layer.rank() {
            return Err(mismatch(
                field("rank"),
                format!("{:?}", row.rank),
                format!("{:?}", layer.rank()),
            ));
        }
        let err = relative_error(w, &layer.effective_weights()?)?;
        let drift = (row.recon_error_rel - err).abs();
        if drift.is_nan() || drift > RECON_TOLERANCE {
            return Err(mismatch(field("recon_error_rel"), row.recon_error_rel, err));
        }
    }
    if compressed.len() != expected_entries {
        return Err(mismatch(
            "entries".into(),
            expected_entries,
            compressed.len(),
        ));
    }

    let before: usize = report.per_layer.iter().map(|r| r.params_before).sum();
    let after: usize = report.per_layer.iter().map(|r| r.params_after).sum();
    if report.params_before != before {
        return Err(mismatch(
            "params_before".into(),
            report.params_before,
            before,
        ));
    }
    if report.params_after != after {
        return Err(mismatch("params_after".into(), report.params_after, after));
    }
    let total = if report.per_layer.is_empty() {
        1.0
    } else {
        ratio(before, after)
    };
    if !close(report.total_ratio, total, RATIO_TOLERANCE) {
        return Err(mismatch("total_ratio".into(), report.total_ratio, total));
    }
    let bits: usize = report.per_layer.iter().map(|r| r.mask_bits).sum();
    if report.mask_bits != bits {
        return Err(mismatch("mask_bits".into(), report.mask_bits, bits));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(rows: usize, cols: usize) -> DenseTensor {
        DenseTensor::matrix(
            rows,
            cols,
            (0..rows * cols)
                .map(|i| ((i * 7 % 13) as f32 - 6.0) / 6.0)
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn full_rank_decompose_is_lossless_but_not_smaller() {
        let w = ramp(6, 5);
        let mut cfg = LayerConfig::new("fc", vec![Stage::Decompose]);
        cfg.rank_svd = Some(5);
        let (layer, row) = compress_layer(&w, &cfg).unwrap();
        assert_eq!(layer.kind(), ArtifactKind::Svd);
        assert_eq!(row.params_after, 5 * (6 + 5 + 1));
        assert!(row.ratio < 1.0);
        assert!(row.recon_error_rel < 1e-5);
    }

    #[test]
    fn identity_factorizes_at_full_rank() {
        let w = DenseTensor::identity(8);
        let mut cfg = LayerConfig::new("eye", vec![Stage::Factorize]);
        cfg.anneal = Some(AnnealConfig::new(8));
        let (_, row) = compress_layer(&w, &cfg).unwrap();
        assert_eq!(row.params_after, 128);
        assert!(row.recon_error_rel < 1e-3, "{}", row.recon_error_rel);
    }

    #[test]
    fn prune_only_counts_survivors() {
        let w = ramp(4, 4);
        let mut cfg = LayerConfig::new("p", vec![Stage::Prune]);
        cfg.prune = Some(PruneConfig::new(0.25, 1, 0.0, 0));
        let (layer, row) = compress_layer(&w, &cfg).unwrap();
        assert_eq!(layer.kind(), ArtifactKind::MaskedDense);
        assert_eq!(row.params_after, 12);
        assert_eq!(row.mask_bits, 16);
        assert_eq!(row.achieved_sparsity, Some(0.25));
    }

    #[test]
    fn conv_layer_full_pipeline_keeps_shape() {
        let w = DenseTensor::new(
            vec![4, 2, 3, 3],
            (0..72)
                .map(|i| ((i * 31 % 17) as f32 - 8.0) / 8.0)
                .collect(),
        )
        .unwrap();
        let mut cfg = LayerConfig::new("conv", default_stage_list());
        cfg.prune = Some(PruneConfig::new(0.2, 2, 0.1, 9));
        cfg.rank_svd = Some(3);
        cfg.anneal = Some(AnnealConfig::new(3));
        let (layer, row) = compress_layer(&w, &cfg).unwrap();
        assert_eq!(layer.kind(), ArtifactKind::Factors);
        assert_eq!(layer.effective_weights().unwrap().shape(), &[4, 2, 3, 3]);
        assert_eq!(row.params_after, 3 * (4 + 18));
        assert!(row.recon_error_rel.is_finite());
    }

    #[test]
    fn stage_errors_name_the_layer() {
        let mut cfg = LayerConfig::new("tiny", vec![Stage::Decompose]);
        cfg.rank_svd = Some(9);
        let err = compress_layer(&ramp(3, 3), &cfg).unwrap_err();
        assert!(matches!(&err, Error::Layer { layer, .. } if layer == "tiny"));
        assert!(matches!(err.root(), Error::InvalidArgument(_)));

        let cfg = LayerConfig::new("bad", vec![Stage::Decompose, Stage::Decompose]);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = LayerConfig::new("bad", vec![Stage::Prune]);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn config_merge_and_seed_override() {
        let cfg = PipelineConfig::from_json(
            r#"{
                "defaults": {"prune": {"alpha": 0.1417, "stages": 3, "entangle_prob": 0.0},
                             "rank_svd": 41, "anneal": {"rank": 41}},
                "layers": {"a": {}, "b": {"prune": {"alpha": 0.3779}, "stage_list": ["prune"]}}
            }"#,
        )
        .unwrap();
        let layers = cfg.resolve(Some(99)).unwrap();
        assert_eq!(layers[0].layer_name, "a");
        assert_eq!(layers[0].stage_list, default_stage_list());
        let b = &layers[1];
        assert_eq!(b.stage_list, vec![Stage::Prune]);
        let p = b.prune.as_ref().unwrap();
        assert_eq!((p.alpha, p.stages, p.seed), (0.3779, 3, 99));
        assert_eq!(b.anneal.as_ref().unwrap().seed, 99);

        assert!(PipelineConfig::from_json(r#"{"defaults": {}, "extra": 1}"#).is_err());
        let typo = PipelineConfig::from_json(r#"{"layers": {"a": {"rank": 3}}}"#).unwrap();
        assert!(matches!(typo.resolve(None), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_layers_are_listed() {
        let mut a = TensorArchive::new();
        a.push("w", ramp(2, 2)).unwrap();
        let cfg = PipelineConfig::from_json(
            r#"{"defaults": {"stage_list": ["decompose"], "rank_svd": 1},
                "layers": {"w": {}, "x": {}, "y": {}}}"#,
        )
        .unwrap();
        match compress_archive(&a, &cfg, &CompressOptions::default()) {
            Err(Error::UnknownLayers(names)) => assert_eq!(names, vec!["x", "y"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_config_passes_everything_through() {
        let mut a = TensorArchive::new();
        a.push("w", ramp(3, 2)).unwrap();
        a.push("b", DenseTensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        let (out, report) =
            compress_archive(&a, &PipelineConfig::default(), &CompressOptions::default()).unwrap();
        assert!(out.bit_eq(&a));
        assert_eq!(report.total_ratio, 1.0);
        verify_report(&a, &out, &report).unwrap();
    }

    #[test]
    fn verify_catches_tampering() {
        let mut a = TensorArchive::new();
        a.push("w", ramp(6, 6)).unwrap();
        a.push("keep", ramp(2, 3)).unwrap();
        let cfg = PipelineConfig::from_json(
            r#"{"defaults": {"stage_list": ["prune", "decompose"], "rank_svd": 2,
                             "prune": {"alpha": 0.5, "entangle_prob": 0.0}},
                "layers": {"w": {}}}"#,
        )
        .unwrap();
        let (out, report) = compress_archive(&a, &cfg, &CompressOptions::default()).unwrap();
        verify_report(&a, &out, &report).unwrap();

        let mut bad = report.clone();
        bad.per_layer[0].ratio += 0.01;
        assert!(
            matches!(verify_report(&a, &out, &bad), Err(Error::Mismatch { field, .. }) if field == "w.ratio")
        );

        let mut bad = report.clone();
        bad.total_ratio = 2.0;
        assert!(
            matches!(verify_report(&a, &out, &bad), Err(Error::Mismatch { field, .. }) if field == "total_ratio")
        );

        let mut bad = report.clone();
        bad.per_layer[0].recon_error_rel *= 0.5;
        assert!(verify_report(&a, &out, &bad).is_err());
    }
    fn uniform(rows: usize, cols: usize, seed: u64) -> DenseTensor {
        use rand::Rng;
        let mut rng = crate::rng::seeded_rng(seed);
        DenseTensor::matrix(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn rank_41_row_is_reproducible() {
        let w = uniform(64, 64, 1);
        let mut cfg = LayerConfig::new("fc", default_stage_list());
        cfg.prune = Some(PruneConfig::new(0.1417, 3, 0.05, 7));
        cfg.rank_svd = Some(41);
        cfg.anneal = Some(AnnealConfig::new(41).with_seed(7));
        let (layer, mut row) = compress_layer(&w, &cfg).unwrap();
        let (again, mut row2) = compress_layer(&w, &cfg).unwrap();
        assert_eq!(layer, again);
        row.wall_time_ms = None;
        row2.wall_time_ms = None;
        assert_eq!(row, row2);
        assert_eq!(row.rank, Some(41));
        assert_eq!(row.params_after, 41 * 128);
        assert!(row.recon_error_rel.is_finite() && row.recon_error_rel < 1.0);
        assert!(row.achieved_sparsity.unwrap() >= 0.1417 - 3.0 / 4096.0);
    }

    #[test]
    fn halved_layers_total_by_hand() {
        let mut a = TensorArchive::new();
        a.push("a", uniform(8, 8, 2)).unwrap();
        a.push("b", uniform(4, 10, 3)).unwrap();
        a.push("c", uniform(5, 6, 4)).unwrap();
        let cfg = PipelineConfig::from_json(
            r#"{"defaults": {"stage_list": ["prune"], "prune": {"alpha": 0.5, "entangle_prob": 0.0}},
                "layers": {"a": {}, "b": {}}}"#,
        )
        .unwrap();
        let (out, report) = compress_archive(&a, &cfg, &CompressOptions::default()).unwrap();
        assert_eq!(
            (report.params_before, report.params_after),
            (134, 32 + 20 + 30)
        );
        assert_eq!(report.total_ratio, 134.0 / 82.0);
        assert!(out.get("c").unwrap().bit_eq(a.get("c").unwrap()));
        verify_report(&a, &out, &report).unwrap();
    }

    #[test]
    fn parallel_runs_match_serial() {
        let mut a = TensorArchive::new();
        for i in 0..6 {
            a.push(format!("l{i}"), uniform(12, 10, i)).unwrap();
        }
        let cfg = PipelineConfig::from_json(
            r#"{"defaults": {"prune": {"alpha": 0.3, "stages": 2, "entangle_prob": 0.2, "seed": 4},
                             "rank_svd": 5, "anneal": {"rank": 3, "max_iters": 100}},
                "layers": {"l0": {}, "l2": {}, "l3": {"stage_list": ["prune"]}, "l5": {}}}"#,
        )
        .unwrap();
        let run = |jobs| {
            let opts = CompressOptions {
                jobs,
                ..CompressOptions::default()
            };
            let (out, report) = compress_archive(&a, &cfg, &opts).unwrap();
            (out.to_bytes(), report.to_json())
        };
        let serial = run(1);
        assert_eq!(serial, run(3));
        assert_eq!(serial, run(0));
    }
}
