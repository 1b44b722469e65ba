//! 2-D loss-surface extraction around three parameter snapshots.
//!
//! Two orthonormal axes come from the Gram–Schmidt process on
//! `theta2 - theta1` and `theta3 - theta1`; the surface is the full-domain
//! loss at `theta1 + beta1 e1 + beta2 e2` over a square grid of
//! coefficients. Min-max-normalized grids from different domains are
//! compared with a mean pairwise RMS score: lower means more consistent
//! landscapes.

use alloc::format;
use alloc::vec::Vec;

use crate::diffmath::{ce_loss_value, forward_probs, Matrix, ModelKind, ParamSet};
use crate::domains::{one_hot, DomainDataset};
use crate::error::{Error, Result};

/// Norm below which a direction counts as degenerate.
const AXIS_EPS: f64 = 1e-9;

/// Which loss the surface evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurfaceLossKind {
    /// Cross-entropy against ground-truth one-hot labels.
    OneHot,
    /// Cross-entropy against supplied soft-label rows.
    SoftLabel,
}

/// Anchors and grid layout of one surface evaluation.
#[derive(Debug, Clone)]
pub struct SurfaceSpec {
    /// Center of the grid; by convention the well-trained model.
    pub anchor: ParamSet,
    /// Second snapshot; by convention a fresh random initialization.
    pub snapshot_b: ParamSet,
    /// Third snapshot; by convention another fresh random initialization.
    pub snapshot_c: ParamSet,
    /// Coefficient range per axis, default `(-2, 2)`.
    pub range: (f64, f64),
    /// Grid points per axis; odd counts place the anchor exactly on the grid.
    pub resolution: usize,
    pub loss_kind: SurfaceLossKind,
    pub domain_id: usize,
}

impl SurfaceSpec {
    pub fn new(
        anchor: ParamSet,
        snapshot_b: ParamSet,
        snapshot_c: ParamSet,
        loss_kind: SurfaceLossKind,
        domain_id: usize,
    ) -> Self {
        SurfaceSpec {
            anchor,
            snapshot_b,
            snapshot_c,
            range: (-2.0, 2.0),
            resolution: 41,
            loss_kind,
            domain_id,
        }
    }
}

/// Loss values over the coefficient grid; `losses[i][j]` pairs with
/// `(betas1[i], betas2[j])`.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceGrid {
    pub betas1: Vec<f64>,
    pub betas2: Vec<f64>,
    pub losses: Matrix,
    pub domain_id: usize,
    pub loss_kind: SurfaceLossKind,
    pub range: (f64, f64),
    pub resolution: usize,
}

/// Orthonormal axes from three snapshots:
/// `e1 = (theta2 - theta1) / ||.||`, `e2` the normalized remainder of
/// `theta3 - theta1` after removing its `e1` component.
pub fn gram_schmidt_axes(
    theta1: &ParamSet,
    theta2: &ParamSet,
    theta3: &ParamSet,
) -> Result<(ParamSet, ParamSet)> {
    let d1 = theta2.sub(theta1)?;
    let n1 = d1.l2_norm();
    if n1 < AXIS_EPS {
        return Err(Error::Degenerate("first axis direction has near-zero norm"));
    }
    let e1 = scale_set(&d1, 1.0 / n1)?;

    let d2 = theta3.sub(theta1)?;
    let proj = d2.dot(&e1)?;
    let residual = d2.add_scaled(&e1, -proj)?;
    let n2 = residual.l2_norm();
    if n2 < AXIS_EPS {
        return Err(Error::Degenerate(
            "snapshots are linearly dependent: second axis collapses",
        ));
    }
    let e2 = scale_set(&residual, 1.0 / n2)?;
    Ok((e1, e2))
}

fn scale_set(set: &ParamSet, s: f64) -> Result<ParamSet> {
    set.zeros_like().add_scaled(set, s)
}

/// Evenly spaced coefficients including both endpoints.
fn linspace(range: (f64, f64), n: usize) -> Vec<f64> {
    if n == 1 {
        return alloc::vec![range.0];
    }
    let span = range.1 - range.0;
    (0..n).map(|i| range.0 + span * i as f64 / (n - 1) as f64).collect()
}

/// Full-domain loss at every grid point `anchor + beta1 e1 + beta2 e2`.
///
/// `soft_labels` must be given (rows aligned with the dataset) for
/// [`SurfaceLossKind::SoftLabel`] and is ignored otherwise. Pure: the same
/// spec and data produce an identical grid.
pub fn evaluate_surface(
    spec: &SurfaceSpec,
    kind: ModelKind,
    dataset: &DomainDataset,
    n_classes: usize,
    soft_labels: Option<&Matrix>,
) -> Result<SurfaceGrid> {
    if spec.resolution == 0 {
        return Err(Error::Param("surface resolution must be > 0".into()));
    }
    if !(spec.range.0 < spec.range.1) {
        return Err(Error::Param(format!(
            "surface range ({}, {}) is empty",
            spec.range.0, spec.range.1
        )));
    }
    let targets = match spec.loss_kind {
        SurfaceLossKind::OneHot => one_hot(&dataset.labels, n_classes)?,
        SurfaceLossKind::SoftLabel => soft_labels
            .ok_or_else(|| Error::Param("soft-label surface needs soft label rows".into()))?
            .clone(),
    };
    if targets.rows() != dataset.len() {
        return Err(Error::Dim(format!(
            "surface targets: {} rows for {} samples",
            targets.rows(),
            dataset.len()
        )));
    }

    let (e1, e2) = gram_schmidt_axes(&spec.anchor, &spec.snapshot_b, &spec.snapshot_c)?;
    let betas1 = linspace(spec.range, spec.resolution);
    let betas2 = linspace(spec.range, spec.resolution);
    let mut losses = Matrix::zeros(spec.resolution, spec.resolution);
    for (i, b1) in betas1.iter().enumerate() {
        let along_e1 = spec.anchor.add_scaled(&e1, *b1)?;
        for (j, b2) in betas2.iter().enumerate() {
            let point = along_e1.add_scaled(&e2, *b2)?;
            let probs = forward_probs(kind, &point, &dataset.inputs)?;
            losses.set(i, j, ce_loss_value(&probs, &targets)?);
        }
    }
    Ok(SurfaceGrid {
        betas1,
        betas2,
        losses,
        domain_id: spec.domain_id,
        loss_kind: spec.loss_kind,
        range: spec.range,
        resolution: spec.resolution,
    })
}

/// Mean pairwise RMS difference between min-max-normalized loss grids.
/// Zero for identical shapes; affine rescalings of a grid score zero
/// against the original.
pub fn consistency_score(grids: &[SurfaceGrid]) -> Result<f64> {
    if grids.len() < 2 {
        return Err(Error::Param(format!(
            "consistency score needs >= 2 grids, got {}",
            grids.len()
        )));
    }
    let first = &grids[0];
    for g in &grids[1..] {
        if g.resolution != first.resolution || g.range != first.range {
            return Err(Error::Dim(format!(
                "grid mismatch: {}x{} over {:?} vs {}x{} over {:?}",
                g.resolution, g.resolution, g.range, first.resolution, first.resolution, first.range
            )));
        }
    }
    let normalized: Vec<Vec<f64>> = grids.iter().map(|g| min_max_normalize(&g.losses)).collect();
    let cells = (first.resolution * first.resolution) as f64;
    let mut total = 0.0;
    let mut pairs = 0.0;
    for i in 0..normalized.len() {
        for j in i + 1..normalized.len() {
            let mse: f64 = normalized[i]
                .iter()
                .zip(&normalized[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / cells;
            total += libm::sqrt(mse);
            pairs += 1.0;
        }
    }
    Ok(total / pairs)
}

fn min_max_normalize(losses: &Matrix) -> Vec<f64> {
    let min = losses.data().iter().fold(f64::INFINITY, |m, v| m.min(*v));
    let max = losses.data().iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let span = max - min;
    if span <= 0.0 {
        return alloc::vec![0.0; losses.data().len()];
    }
    losses.data().iter().map(|v| (v - min) / span).collect()
}
