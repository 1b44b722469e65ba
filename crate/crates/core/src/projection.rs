//! Exact KL-divergence minimization onto the ratio-constrained label space.
//!
//! For a true class k and ratio bound alpha, the feasible label space is
//! every probability vector q with `q_k >= alpha * q_j` for all `j != k`.
//! [`project`] returns the exact minimizer of `KL(q || p)` over that set via
//! an `O(N log N)` active-set sweep: constraints violated at `p` are sorted
//! by mass and greedily accumulated while the closed-form geometric-mean
//! value of the tight block keeps forcing the next candidate in. The solve
//! runs internally with `k = 0`; general k is handled by swapping categories
//! before and after.
//!
//! Two independent test oracles accompany it: exhaustive enumeration of all
//! candidate tight sets (exact, small N), and projected dual ascent with
//! feasibility repair (any N, approximate), which also serves as the
//! baseline for runtime benchmarks.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::diffmath::{ce_loss_graph, ce_loss_value, Matrix, Tape, Var, LOG_CLAMP};
use crate::error::{Error, Result};

/// Tolerance for declaring an input on the probability simplex.
pub const SIMPLEX_TOL: f64 = 1e-9;
/// Tolerance for a ratio constraint to count as tight in reported results.
pub const ACTIVE_TOL: f64 = 1e-9;

/// The ratio-constrained label space `C_k` for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelSpaceConstraint {
    true_class: usize,
    alpha: f64,
    n_classes: usize,
}

impl LabelSpaceConstraint {
    /// Requires `alpha >= 1` and `true_class < n_classes` (with at least two classes).
    pub fn new(true_class: usize, alpha: f64, n_classes: usize) -> Result<Self> {
        if !(alpha >= 1.0) || !alpha.is_finite() {
            return Err(Error::Param(format!("alpha must be finite and >= 1, got {alpha}")));
        }
        if n_classes < 2 {
            return Err(Error::Param(format!("need at least 2 classes, got {n_classes}")));
        }
        if true_class >= n_classes {
            return Err(Error::Param(format!(
                "true class {true_class} out of range for {n_classes} classes"
            )));
        }
        Ok(LabelSpaceConstraint { true_class, alpha, n_classes })
    }

    pub fn true_class(&self) -> usize {
        self.true_class
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }
}

/// Output of [`project`]: the optimal soft label, the set of classes whose
/// ratio constraint is tight, and the achieved KL value.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionResult {
    pub q_star: Vec<f64>,
    /// Tight-constraint class indices, ascending.
    pub active_set: Vec<usize>,
    pub kl_value: f64,
}

/// `KL(q || p)` with `0 ln 0 = 0` and `p` clamped away from zero.
pub fn kl_divergence(q: &[f64], p: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (qi, pi) in q.iter().zip(p) {
        if *qi > 0.0 {
            acc += qi * (libm::log(*qi) - libm::log(pi.max(LOG_CLAMP)));
        }
    }
    acc
}

fn validate_simplex(p: &[f64], n: usize) -> Result<()> {
    if p.len() != n {
        return Err(Error::Dim(format!("probability vector length {} vs {n} classes", p.len())));
    }
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("probability vector has non-finite entries".into()));
    }
    if p.iter().any(|v| *v < -SIMPLEX_TOL) {
        return Err(Error::Input("probability vector has negative entries".into()));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Input(format!("probability vector sums to {sum}, not 1")));
    }
    Ok(())
}

/// Clamp entries to at least [`LOG_CLAMP`] and renormalize.
fn clamp_normalize(p: &[f64]) -> Vec<f64> {
    let mut w: Vec<f64> = p.iter().map(|v| v.max(LOG_CLAMP)).collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Geometric-mean value of a tight block in log space:
/// `ln G(A) = (alpha ln p0 + sum_{j in A} ln(alpha p_j)) / (|A| + alpha)`.
struct BlockValue {
    log_p0_alpha: f64,
    log_alpha: f64,
    alpha: f64,
    acc: f64,
    size: usize,
}

impl BlockValue {
    fn new(p0: f64, alpha: f64) -> Self {
        BlockValue {
            log_p0_alpha: alpha * libm::log(p0),
            log_alpha: libm::log(alpha),
            alpha,
            acc: 0.0,
            size: 0,
        }
    }

    fn push(&mut self, pj: f64) {
        self.acc += self.log_alpha + libm::log(pj);
        self.size += 1;
    }

    fn log_g(&self) -> f64 {
        (self.log_p0_alpha + self.acc) / (self.size as f64 + self.alpha)
    }
}

/// Exact KL projection of `p` onto the label space of `c`.
///
/// `p` must lie on the simplex within [`SIMPLEX_TOL`]; entries are clamped
/// to [`LOG_CLAMP`] and renormalized before use. If `p` is already feasible
/// the (clamped) input passes through unchanged with an empty active set.
pub fn project(p: &[f64], c: &LabelSpaceConstraint) -> Result<ProjectionResult> {
    let n = c.n_classes;
    validate_simplex(p, n)?;
    let k = c.true_class;
    let alpha = c.alpha;

    let mut w = clamp_normalize(p);
    w.swap(0, k);

    // Violated constraints at p, by descending mass (ties keep ascending index).
    let mut b: Vec<usize> = (1..n).filter(|&j| alpha * w[j] > w[0]).collect();
    b.sort_by(|&i, &j| w[j].partial_cmp(&w[i]).unwrap());

    let mut q = w.clone();
    let mut active: Vec<usize> = Vec::new();
    if !b.is_empty() {
        let mut block = BlockValue::new(w[0], alpha);
        block.push(w[b[0]]);
        active.push(b[0]);
        for &j in &b[1..] {
            // Strict comparison: an exactly-equal candidate stays out of the
            // tight set (its multiplier would be zero).
            if block.log_g() < block.log_alpha + libm::log(w[j]) {
                block.push(w[j]);
                active.push(j);
            } else {
                break;
            }
        }
        let g = libm::exp(block.log_g());
        q[0] = g;
        for &j in &active {
            q[j] = g / alpha;
        }
        let z: f64 = q.iter().sum();
        for v in &mut q {
            *v /= z;
        }
    }

    let kl_value = kl_divergence(&q, &w).max(0.0);
    q.swap(0, k);
    let mut active_set: Vec<usize> = active
        .into_iter()
        .map(|j| if j == k { 0 } else { j })
        .collect();
    active_set.sort_unstable();

    Ok(ProjectionResult { q_star: q, active_set, kl_value })
}

/// Projects every row of `probs` with its own true class, shared alpha.
/// Returns the matrix of optimal soft labels.
pub fn project_rows(probs: &Matrix, labels: &[usize], alpha: f64) -> Result<Matrix> {
    if labels.len() != probs.rows() {
        return Err(Error::Dim(format!(
            "project_rows: {} labels for {} rows",
            labels.len(),
            probs.rows()
        )));
    }
    let n = probs.cols();
    let mut out = Matrix::zeros(probs.rows(), n);
    for (r, &label) in labels.iter().enumerate() {
        let c = LabelSpaceConstraint::new(label, alpha, n)?;
        let result = project(probs.row(r), &c)?;
        for (col, v) in result.q_star.iter().enumerate() {
            out.set(r, col, *v);
        }
    }
    Ok(out)
}

/// How [`oracle_project`] solves the problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMethod {
    /// Try all `2^(N-1)` candidate tight sets, solve each in closed form,
    /// keep the feasible minimum. Exact; refuses `N > 12`.
    Enumerate,
    /// Projected dual ascent on the constraint multipliers with a final
    /// feasibility repair. Approximate; any `N` up to 200.
    Descent { iters: usize },
}

/// Independent reference solver for testing and benchmarking.
pub fn oracle_project(p: &[f64], c: &LabelSpaceConstraint, method: OracleMethod) -> Result<Vec<f64>> {
    match method {
        OracleMethod::Enumerate => oracle_enumerate(p, c),
        OracleMethod::Descent { iters } => oracle_descent(p, c, iters),
    }
}

fn oracle_enumerate(p: &[f64], c: &LabelSpaceConstraint) -> Result<Vec<f64>> {
    let n = c.n_classes;
    if n > 12 {
        return Err(Error::Param(format!(
            "enumeration oracle is for testing only (N <= 12), got N = {n}"
        )));
    }
    validate_simplex(p, n)?;
    let alpha = c.alpha;
    let mut w = clamp_normalize(p);
    w.swap(0, c.true_class);

    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 0u32..(1 << (n - 1)) {
        let mut block = BlockValue::new(w[0], alpha);
        let mut members = Vec::new();
        for j in 1..n {
            if mask & (1 << (j - 1)) != 0 {
                block.push(w[j]);
                members.push(j);
            }
        }
        let mut q = w.clone();
        if !members.is_empty() {
            let g = libm::exp(block.log_g());
            q[0] = g;
            for &j in &members {
                q[j] = g / alpha;
            }
        }
        let z: f64 = q.iter().sum();
        for v in &mut q {
            *v /= z;
        }
        let feasible = (1..n).all(|j| alpha * q[j] - q[0] <= 1e-12);
        if !feasible {
            continue;
        }
        let kl = kl_divergence(&q, &w);
        if best.as_ref().is_none_or(|(b, _)| kl < *b) {
            best = Some((kl, q));
        }
    }
    let (_, mut q) = best.expect("the full tight set is always feasible");
    q.swap(0, c.true_class);
    Ok(q)
}

fn oracle_descent(p: &[f64], c: &LabelSpaceConstraint, iters: usize) -> Result<Vec<f64>> {
    let n = c.n_classes;
    if n > 200 {
        return Err(Error::Param(format!("descent oracle supports N <= 200, got N = {n}")));
    }
    validate_simplex(p, n)?;
    let alpha = c.alpha;
    let mut w = clamp_normalize(p);
    w.swap(0, c.true_class);
    let log_w: Vec<f64> = w.iter().map(|v| libm::log(*v)).collect();

    // Dual ascent: for fixed multipliers mu the inner minimizer over the
    // simplex is q ∝ w ⊙ exp(-c) with c_0 = -Σ mu, c_j = alpha mu_j; the
    // multiplier step follows the dual supergradient alpha q_j - q_0.
    let mut mu = vec![0.0f64; n];
    let mut q = vec![0.0f64; n];
    let primal = |mu: &[f64], q: &mut [f64]| {
        let s: f64 = mu[1..].iter().sum();
        q[0] = log_w[0] + s;
        for j in 1..n {
            q[j] = log_w[j] - alpha * mu[j];
        }
        let max = q.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let mut z = 0.0;
        for v in q.iter_mut() {
            *v = libm::exp(*v - max);
            z += *v;
        }
        for v in q.iter_mut() {
            *v /= z;
        }
    };

    for t in 0..iters {
        primal(&mu, &mut q);
        let step = 1.0 / (alpha * libm::sqrt((t + 1) as f64));
        for j in 1..n {
            mu[j] = (mu[j] + step * (alpha * q[j] - q[0])).max(0.0);
        }
    }
    primal(&mu, &mut q);

    // Feasibility repair: cap violating coordinates at q_0 / alpha, then
    // renormalize (rescaling preserves the ratios, so the result is exact).
    let cap = q[0] / alpha;
    for v in q.iter_mut().skip(1) {
        *v = v.min(cap);
    }
    let z: f64 = q.iter().sum();
    for v in q.iter_mut() {
        *v /= z;
    }
    q.swap(0, c.true_class);
    Ok(q)
}

fn validate_prob_rows(m: &Matrix, what: &str) -> Result<()> {
    for r in 0..m.rows() {
        let row = m.row(r);
        if row.iter().any(|v| !v.is_finite() || *v < -SIMPLEX_TOL) {
            return Err(Error::Input(format!("{what} row {r} is not a probability vector")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Input(format!("{what} row {r} sums to {sum}, not 1")));
        }
    }
    Ok(())
}

/// Projection cross-entropy as a tape node: `-(1/n) Σ_i q*_i · log ỹ_i`.
///
/// `targets` holds the projected soft labels q*, treated as constants for
/// the update; gradient flows through the refiner outputs only.
pub fn pce_loss_graph(tape: &mut Tape, refiner_probs: Var, targets: Var) -> Result<Var> {
    validate_prob_rows(tape.value(targets), "PCE target")?;
    ce_loss_graph(tape, refiner_probs, targets)
}

/// Value-only projection cross-entropy, mean-reduced over the batch.
pub fn pce_loss_value(refiner_probs: &Matrix, targets: &Matrix) -> Result<f64> {
    validate_prob_rows(refiner_probs, "PCE refiner output")?;
    validate_prob_rows(targets, "PCE target")?;
    ce_loss_value(refiner_probs, targets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constraint(k: usize, alpha: f64, n: usize) -> LabelSpaceConstraint {
        LabelSpaceConstraint::new(k, alpha, n).unwrap()
    }

    #[test]
    fn feasible_input_passes_through() {
        // p already dominates every class by any ratio: B is empty.
        let p = [1.0, 0.0, 0.0];
        for alpha in [1.0, 2.0, 1e6] {
            let r = project(&p, &constraint(0, alpha, 3)).unwrap();
            assert!(r.active_set.is_empty());
            for (qi, pi) in r.q_star.iter().zip(&p) {
                assert!((qi - pi).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn uniform_alpha_two_matches_smoothing_closed_form() {
        // Uniform input, N = 3, alpha = 2: the full tight set degenerates to
        // smoothed labels with s = N / (alpha - 1 + N) = 3/4, so
        // q = (1 - s + s/N, s/N, s/N) = (0.5, 0.25, 0.25).
        let p = [1.0 / 3.0; 3];
        let r = project(&p, &constraint(0, 2.0, 3)).unwrap();
        assert!((r.q_star[0] - 0.5).abs() < 1e-9);
        assert!((r.q_star[1] - 0.25).abs() < 1e-9);
        assert!((r.q_star[2] - 0.25).abs() < 1e-9);
        assert_eq!(r.active_set, vec![1, 2]);
        // and the tight constraint holds exactly
        assert!((r.q_star[0] - 2.0 * r.q_star[1]).abs() < 1e-12);
    }

    #[test]
    fn huge_alpha_approaches_one_hot() {
        let p = [0.2, 0.5, 0.3];
        let r = project(&p, &constraint(0, 1e6, 3)).unwrap();
        assert!((r.q_star[0] - 1.0).abs() < 1e-3);
        assert!(r.q_star[1] < 1e-3 && r.q_star[2] < 1e-3);
    }

    #[test]
    fn category_swap_consistency() {
        let p = [0.1, 0.2, 0.45, 0.25];
        for k in 0..4 {
            let r = project(&p, &constraint(k, 3.0, 4)).unwrap();
            // swap p so that class k sits at position 0, solve there, swap back
            let mut swapped = p;
            swapped.swap(0, k);
            let base = project(&swapped, &constraint(0, 3.0, 4)).unwrap();
            let mut expect = base.q_star.clone();
            expect.swap(0, k);
            for (a, b) in r.q_star.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn off_simplex_rejected() {
        let p = [0.5, 0.6, 0.2];
        assert!(matches!(project(&p, &constraint(0, 2.0, 3)), Err(Error::Input(_))));
    }

    #[test]
    fn alpha_below_one_rejected() {
        assert!(matches!(LabelSpaceConstraint::new(0, 0.5, 3), Err(Error::Param(_))));
    }

    #[test]
    fn alpha_one_pools_classes_above_target() {
        // alpha = 1 with p_k maximal: already feasible.
        let p = [0.5, 0.3, 0.2];
        let r = project(&p, &constraint(0, 1.0, 3)).unwrap();
        for (qi, pi) in r.q_star.iter().zip(&p) {
            assert!((qi - pi).abs() < 1e-12);
        }
        assert!(r.active_set.is_empty());
    }

    #[test]
    fn result_is_feasible_and_normalized() {
        let p = [0.05, 0.3, 0.25, 0.4];
        let c = constraint(0, 5.0, 4);
        let r = project(&p, &c).unwrap();
        let sum: f64 = r.q_star.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for j in 1..4 {
            assert!(r.q_star[0] >= 5.0 * r.q_star[j] - ACTIVE_TOL);
        }
        assert!(r.kl_value >= 0.0);
    }

    #[test]
    fn pce_loss_hand_example() {
        // one-hot target on class 1, prediction (0.25, 0.75): loss = -ln 0.75
        let probs = Matrix::from_vec(1, 2, vec![0.25, 0.75]).unwrap();
        let target = Matrix::from_vec(1, 2, vec![0.0, 1.0]).unwrap();
        let loss = pce_loss_value(&probs, &target).unwrap();
        assert!((loss - 0.2876820724517809).abs() < 1e-12);
    }

    #[test]
    fn pce_loss_at_equality_is_entropy() {
        // prediction equals target: cross-entropy reduces to the mean row entropy
        let q = Matrix::from_vec(2, 2, vec![0.5, 0.5, 0.25, 0.75]).unwrap();
        let loss = pce_loss_value(&q, &q).unwrap();
        let h = |p: &[f64]| -> f64 { -p.iter().map(|v| v * libm::log(*v)).sum::<f64>() };
        let expect = (h(&[0.5, 0.5]) + h(&[0.25, 0.75])) / 2.0;
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn pce_rejects_non_probability_rows() {
        let bad = Matrix::from_vec(1, 2, vec![0.9, 0.9]).unwrap();
        let target = Matrix::from_vec(1, 2, vec![0.5, 0.5]).unwrap();
        assert!(matches!(pce_loss_value(&bad, &target), Err(Error::Input(_))));
    }
}
