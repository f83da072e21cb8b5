//! Probabilistic magnitude pruning.
//!
//! Weights are scored by magnitude, the scores are turned into a softmax
//! distribution, and a threshold on that distribution is calibrated so that a
//! target fraction `alpha` of the weights falls below it. Pruning proceeds in
//! stages, each one re-normalizing the distribution over the surviving weights,
//! and after every stage pruned weights may drag their neighbours along with
//! probability `entangle_prob`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded_rng, stream_rng};
use crate::tensor::{DenseTensor, RetainMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    /// Target fraction of weights removed, in `[0, 1)`.
    pub alpha: f64,
    #[serde(default = "default_stages")]
    pub stages: usize,
    /// Probability that a retained neighbour of a pruned weight is pruned too.
    pub entangle_prob: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_stages() -> usize {
    1
}

impl PruneConfig {
    pub fn new(alpha: f64, stages: usize, entangle_prob: f64, seed: u64) -> Self {
        Self {
            alpha,
            stages,
            entangle_prob,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        check_prob(self.entangle_prob)?;
        if self.stages == 0 {
            return Err(Error::InvalidArgument("stages must be >= 1".into()));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "alpha must lie in [0, 1), got {alpha}"
        )));
    }
    Ok(())
}

fn check_prob(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "entangle_prob must lie in [0, 1], got {p}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneResult {
    pub mask: RetainMask,
    /// Original weights with pruned entries zeroed.
    pub pruned_weights: DenseTensor,
    pub achieved_sparsity: f64,
    /// Cumulative sparsity after each stage, entanglement included.
    pub per_stage_sparsity: Vec<f64>,
}

/// Element-wise magnitude.
pub fn importance(w: &DenseTensor) -> DenseTensor {
    let data = w.data().iter().map(|x| x.abs()).collect();
    DenseTensor::new(w.shape().to_vec(), data).expect("same shape")
}

/// Softmax of the importance scores, computed with max subtraction.
pub fn softmax_probs(imp: &DenseTensor) -> Result<DenseTensor> {
    if imp.numel() == 0 {
        return Err(Error::InvalidArgument("softmax of an empty tensor".into()));
    }
    if !imp.is_finite() {
        return Err(Error::NonFinite("importance scores"));
    }
    let scores: Vec<f64> = imp.data().iter().map(|&x| f64::from(x)).collect();
    let probs = masked_softmax(&scores, None);
    DenseTensor::new(
        imp.shape().to_vec(),
        probs.into_iter().map(|p| p as f32).collect(),
    )
}

/// Softmax restricted to `active` entries; inactive entries get probability 0
/// and take no part in the partition sum.
fn masked_softmax(scores: &[f64], active: Option<&[bool]>) -> Vec<f64> {
    let is_active = |i: usize| active.is_none_or(|a| a[i]);
    let max = scores
        .iter()
        .enumerate()
        .filter(|&(i, _)| is_active(i))
        .map(|(_, &s)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| if is_active(i) { (s - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = out.iter().sum();
    if z > 0.0 {
        out.iter_mut().for_each(|p| *p /= z);
    }
    out
}

/// Pruning threshold on the probability scale.
///
/// Entries with `p < lambda` are pruned. Entries with `p == lambda` are
/// pruned in ascending flat-index order until `tied_pruned` of them are gone,
/// which makes the pruned count exact even when probabilities tie.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    pub lambda: f64,
    pub tied_pruned: usize,
}

impl Threshold {
    /// Plain threshold without tie handling.
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            tied_pruned: 0,
        }
    }
}

/// Calibrates `lambda` so exactly `round(alpha * N)` entries are pruned.
pub fn calibrate_threshold(p: &DenseTensor, alpha: f64) -> Result<Threshold> {
    check_alpha(alpha)?;
    let probs: Vec<f64> = p.data().iter().map(|&x| f64::from(x)).collect();
    let k = (alpha * probs.len() as f64).round() as usize;
    Ok(calibrate_count(&probs, None, k))
}

fn calibrate_count(probs: &[f64], active: Option<&[bool]>, k: usize) -> Threshold {
    let mut order: Vec<usize> = (0..probs.len())
        .filter(|&i| active.is_none_or(|a| a[i]))
        .collect();
    // Stable sort keeps ascending index order among equal probabilities.
    order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]));
    if k >= order.len() {
        return Threshold::new(f64::INFINITY);
    }
    let lambda = probs[order[k]];
    let tied_pruned = order[..k].iter().filter(|&&i| probs[i] == lambda).count();
    Threshold {
        lambda,
        tied_pruned,
    }
}

/// Retain mask: 1 where `p >= lambda`, subject to the threshold's tie budget.
pub fn retain_mask(p: &DenseTensor, threshold: &Threshold) -> RetainMask {
    let probs: Vec<f64> = p.data().iter().map(|&x| f64::from(x)).collect();
    let bits = threshold_bits(&probs, None, threshold);
    RetainMask::new(p.shape().to_vec(), bits).expect("same shape")
}

fn threshold_bits(probs: &[f64], active: Option<&[bool]>, thr: &Threshold) -> Vec<bool> {
    let mut ties_left = thr.tied_pruned;
    probs
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            if active.is_some_and(|a| !a[i]) {
                return false;
            }
            if p < thr.lambda {
                false
            } else if p == thr.lambda && ties_left > 0 {
                ties_left -= 1;
                false
            } else {
                true
            }
        })
        .collect()
}

/// Flat indices adjacent to `i`: left/right along the last axis, plus up/down
/// in the trailing `H x W` plane for 4-axis tensors. Never wraps across rows.
fn neighbours(shape: &[usize], i: usize) -> impl Iterator<Item = usize> {
    let width = *shape.last().expect("non-empty shape");
    let x = i % width;
    let (height, y) = if shape.len() == 4 {
        (shape[2], (i / width) % shape[2])
    } else {
        (1, 0)
    };
    let left = (x > 0).then(|| i - 1);
    let right = (x + 1 < width).then(|| i + 1);
    let up = (y > 0).then(|| i - width);
    let down = (y + 1 < height).then(|| i + width);
    [left, right, up, down].into_iter().flatten()
}

/// One non-cascading entanglement pass: every weight pruned in `mask` gives
/// each of its retained neighbours an independent chance `entangle_prob` of
/// being pruned as well.
pub fn entangle(mask: &RetainMask, entangle_prob: f64, seed: u64) -> Result<RetainMask> {
    check_prob(entangle_prob)?;
    Ok(entangle_with(mask, entangle_prob, &mut seeded_rng(seed)))
}

fn entangle_with<R: Rng>(mask: &RetainMask, prob: f64, rng: &mut R) -> RetainMask {
    let mut out = mask.clone();
    if prob == 0.0 {
        return out;
    }
    let input = mask.bits();
    let shape = mask.shape();
    let out_bits = out.bits_mut();
    for i in (0..input.len()).filter(|&i| !input[i]) {
        for j in neighbours(shape, i) {
            if input[j] && rng.random::<f64>() < prob {
                out_bits[j] = false;
            }
        }
    }
    out
}

/// Staged pruning toward cumulative sparsity `alpha * t / stages` at stage
/// `t`. Stage `t` draws its entanglement randomness from ChaCha stream `t` of
/// `cfg.seed`.
pub fn iterative_prune(w: &DenseTensor, cfg: &PruneConfig) -> Result<PruneResult> {
    cfg.validate()?;
    if !w.is_finite() {
        return Err(Error::NonFinite("weights"));
    }
    let n = w.numel();
    let scores: Vec<f64> = importance(w).data().iter().map(|&x| f64::from(x)).collect();
    let mut mask = RetainMask::all_retained(w.shape());
    let mut per_stage_sparsity = Vec::with_capacity(cfg.stages);

    for t in 1..=cfg.stages {
        let fraction = if t == cfg.stages {
            cfg.alpha
        } else {
            cfg.alpha * t as f64 / cfg.stages as f64
        };
        let target = (fraction * n as f64).round() as usize;
        let extra = target.saturating_sub(mask.pruned());
        if extra > 0 {
            let active = mask.bits().to_vec();
            let probs = masked_softmax(&scores, Some(&active));
            let thr = calibrate_count(&probs, Some(&active), extra);
            let bits = threshold_bits(&probs, Some(&active), &thr);
            mask = RetainMask::new(w.shape().to_vec(), bits)?;
        }
        mask = entangle_with(
            &mask,
            cfg.entangle_prob,
            &mut stream_rng(cfg.seed, t as u64),
        );
        per_stage_sparsity.push(mask.sparsity());
    }

    Ok(PruneResult {
        pruned_weights: mask.apply(w)?,
        achieved_sparsity: mask.sparsity(),
        mask,
        per_stage_sparsity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec1(data: &[f32]) -> DenseTensor {
        DenseTensor::new(vec![data.len()], data.to_vec()).unwrap()
    }

    fn mask1(bits: &[u8]) -> RetainMask {
        RetainMask::new(vec![bits.len()], bits.iter().map(|&b| b == 1).collect()).unwrap()
    }

    #[test]
    fn importance_is_magnitude() {
        assert_eq!(
            importance(&vec1(&[1.0, -2.0, 0.0])).data(),
            &[1.0, 2.0, 0.0]
        );
        assert_eq!(importance(&vec1(&[0.0; 5])).data(), &[0.0; 5]);
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        for c in [-3.0f32, 0.0, 2.5, 40.0] {
            let p = softmax_probs(&vec1(&[c; 4])).unwrap();
            assert!(p.data().iter().all(|&x| (x - 0.25).abs() < 1e-7));
        }
        let p = softmax_probs(&vec1(&[0.0, 3f32.ln()])).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-7);
        assert!((p.data()[1] - 0.75).abs() < 1e-7);
    }

    #[test]
    fn softmax_survives_large_scores() {
        let p = softmax_probs(&vec1(&[1000.0, 1000.0])).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
        assert!(softmax_probs(&vec1(&[f32::NAN, 1.0])).is_err());
    }

    #[test]
    fn calibrate_examples() {
        let p = vec1(&[0.1, 0.2, 0.3, 0.4]);
        let thr = calibrate_threshold(&p, 0.25).unwrap();
        assert_eq!(thr.lambda, f64::from(0.2f32));
        assert_eq!(thr.tied_pruned, 0);
        assert_eq!(retain_mask(&p, &thr), mask1(&[0, 1, 1, 1]));

        let thr0 = calibrate_threshold(&p, 0.0).unwrap();
        assert!(thr0.lambda <= 0.1f32 as f64);
        assert_eq!(retain_mask(&p, &thr0).pruned(), 0);

        assert!(calibrate_threshold(&p, 1.0).is_err());
        assert!(calibrate_threshold(&p, -0.1).is_err());
    }

    #[test]
    fn calibrate_breaks_ties_by_index() {
        let p = vec1(&[0.125; 8]);
        let thr = calibrate_threshold(&p, 0.5).unwrap();
        assert_eq!(thr.tied_pruned, 4);
        assert_eq!(retain_mask(&p, &thr), mask1(&[0, 0, 0, 0, 1, 1, 1, 1]));
    }

    #[test]
    fn retain_mask_edges() {
        let p = vec1(&[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(
            retain_mask(&p, &Threshold::new(0.2f32 as f64)),
            mask1(&[0, 1, 1, 1])
        );
        assert_eq!(retain_mask(&p, &Threshold::new(0.0)).pruned(), 0);
        assert_eq!(retain_mask(&p, &Threshold::new(0.5)).retained(), 0);
    }

    #[test]
    fn entangle_examples() {
        let m = mask1(&[1, 0, 1, 1]);
        assert_eq!(entangle(&m, 0.0, 1).unwrap(), m);
        assert_eq!(entangle(&m, 1.0, 1).unwrap(), mask1(&[0, 0, 0, 1]));
        assert!(entangle(&m, 1.5, 1).is_err());
    }

    #[test]
    fn entangle_conv_neighbourhood_stays_in_plane() {
        // (1, 2, 3, 3): prune the centre of the first 3x3 plane.
        let mut bits = vec![true; 18];
        bits[4] = false;
        let m = RetainMask::new(vec![1, 2, 3, 3], bits).unwrap();
        let out = entangle(&m, 1.0, 0).unwrap();
        let pruned: Vec<usize> = (0..18).filter(|&i| !out.bits()[i]).collect();
        assert_eq!(pruned, vec![1, 3, 4, 5, 7]);

        // Corner of the second plane must not reach into the first.
        let mut bits = vec![true; 18];
        bits[9] = false;
        let m = RetainMask::new(vec![1, 2, 3, 3], bits).unwrap();
        let out = entangle(&m, 1.0, 0).unwrap();
        let pruned: Vec<usize> = (0..18).filter(|&i| !out.bits()[i]).collect();
        assert_eq!(pruned, vec![9, 10, 12]);
    }

    #[test]
    fn entangle_matrix_does_not_wrap_rows() {
        let mut bits = vec![true; 6];
        bits[2] = false;
        let m = RetainMask::new(vec![2, 3], bits).unwrap();
        let out = entangle(&m, 1.0, 0).unwrap();
        assert_eq!(out.bits(), &[true, false, false, true, true, true]);
    }

    #[test]
    fn prune_small_example() {
        let w = DenseTensor::matrix(1, 4, vec![1.0, -2.0, 3.0, -4.0]).unwrap();
        let r = iterative_prune(&w, &PruneConfig::new(0.5, 1, 0.0, 0)).unwrap();
        assert_eq!(r.mask.bits(), &[false, false, true, true]);
        assert_eq!(r.pruned_weights.data(), &[0.0, 0.0, 3.0, -4.0]);
        assert_eq!(r.achieved_sparsity, 0.5);
    }

    #[test]
    fn alpha_zero_is_identity() {
        let w = DenseTensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.0, 5.0, -6.0]).unwrap();
        for stages in [1, 4] {
            let r = iterative_prune(&w, &PruneConfig::new(0.0, stages, 0.7, 3)).unwrap();
            assert_eq!(r.mask.pruned(), 0);
            assert_eq!(r.achieved_sparsity, 0.0);
            assert!(r.pruned_weights.bit_eq(&w));
        }
    }

    #[test]
    fn stages_are_monotone_and_hit_the_target() {
        let w = DenseTensor::matrix(
            8,
            8,
            (0..64).map(|i| ((i * 37 % 64) as f32) - 31.5).collect(),
        )
        .unwrap();
        let r = iterative_prune(&w, &PruneConfig::new(0.5, 4, 0.0, 0)).unwrap();
        assert_eq!(
            r.per_stage_sparsity,
            vec![8.0 / 64.0, 16.0 / 64.0, 24.0 / 64.0, 0.5]
        );
        assert_eq!(r.mask.pruned(), 32);
    }

    #[test]
    fn config_validation() {
        assert!(PruneConfig::new(1.0, 1, 0.0, 0).validate().is_err());
        assert!(PruneConfig::new(0.5, 0, 0.0, 0).validate().is_err());
        assert!(PruneConfig::new(0.5, 1, -0.1, 0).validate().is_err());
        let cfg: PruneConfig =
            serde_json::from_str(r#"{"alpha":0.1417,"entangle_prob":0.0}"#).unwrap();
        assert_eq!(cfg.stages, 1);
        assert!(serde_json::from_str::<PruneConfig>(r#"{"alpha":0.1}"#).is_err());
    }
}
