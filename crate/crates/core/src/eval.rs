//! Absolute position error between an estimate and ground truth.

use serde::Serialize;

use crate::dataset::StampedPose;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ApeStats {
    pub rmse: f64,
    pub max: f64,
    pub mean: f64,
    /// Associated pose pairs.
    pub n: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    /// Largest allowed timestamp gap for an association, s.
    pub tolerance: f64,
    /// Move the estimate so its first associated pose matches ground truth.
    pub align_origin: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { tolerance: 0.01, align_origin: false }
    }
}

/// Index of the entry of time-sorted `poses` closest to `t`.
fn nearest(poses: &[StampedPose], t: f64) -> Option<usize> {
    let i = poses.partition_point(|p| p.t < t);
    let cands = [i.checked_sub(1), (i < poses.len()).then_some(i)];
    cands.into_iter().flatten().min_by(|&a, &b| (poses[a].t - t).abs().total_cmp(&(poses[b].t - t).abs()))
}

/// Pairs each estimate with its nearest ground-truth pose within tolerance.
pub fn associate(gt: &[StampedPose], est: &[StampedPose], tolerance: f64) -> Vec<(usize, usize)> {
    let mut sorted = gt.to_vec();
    let mut order: Vec<usize> = (0..gt.len()).collect();
    order.sort_by(|&a, &b| gt[a].t.total_cmp(&gt[b].t));
    for (k, &i) in order.iter().enumerate() {
        sorted[k] = gt[i];
    }
    est.iter()
        .enumerate()
        .filter_map(|(j, e)| {
            let k = nearest(&sorted, e.t)?;
            ((sorted[k].t - e.t).abs() <= tolerance).then_some((order[k], j))
        })
        .collect()
}

pub fn ape(gt: &[StampedPose], est: &[StampedPose], opts: &EvalOptions) -> Result<ApeStats> {
    let pairs = associate(gt, est, opts.tolerance);
    if pairs.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "only {} timestamps overlap within {} s; need at least 2",
            pairs.len(),
            opts.tolerance
        )));
    }
    let (rot_a, trans_a) = if opts.align_origin {
        let (g, e) = (&gt[pairs[0].0], &est[pairs[0].1]);
        let r = g.rot * e.rot.inverse();
        (r, g.pos - r * e.pos)
    } else {
        (Default::default(), Default::default())
    };
    let errs: Vec<f64> =
        pairs.iter().map(|&(i, j)| (gt[i].pos - (rot_a * est[j].pos + trans_a)).norm()).collect();
    let n = errs.len() as f64;
    Ok(ApeStats {
        rmse: (errs.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
        max: errs.iter().copied().fold(0.0, f64::max),
        mean: errs.iter().sum::<f64>() / n,
        n: errs.len(),
    })
}
