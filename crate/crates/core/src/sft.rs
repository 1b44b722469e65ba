//! Self-feedback training: alternating feedback and refinement phases, plus
//! ERM and SAM baselines run under the identical harness.
//!
//! Every step, all three algorithms draw the same domain pair and the same
//! minibatches from per-purpose random streams, so paired same-seed runs
//! differ only in the update rule. The feedback phase updates the model on
//! the sharpness-aware soft-label loss and measures the sharpness gap
//! between the trained and held-out domains; the refinement phase updates
//! the refiner on projection cross-entropy plus sharpness penalties.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use rand::Rng;

use crate::diffmath::{
    adam_step, forward_probs, forward_probs_graph, init_params, AdamConfig, AdamState, Matrix,
    ModelKind, ParamRole, ParamSet, Tape,
};
use crate::domains::{minibatch, one_hot, DGProblem, DomainDataset, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::projection::{pce_loss_graph, project_rows};
use crate::rng::{seeded_stream, streams, ChaCha8Rng};
use crate::sharpness::{
    ce_value_grad, ces_sl_graph, ces_sl_terms, sam_loss, sharpness_measure, SharpnessConfig,
    SoftSharpnessTerms,
};

/// Which update rule drives the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Erm,
    Sam,
    Sft,
}

/// Hyperparameters for one training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub model: ModelKind,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Perturbation radius; required > 0 for SAM and SFT. For ERM it only
    /// feeds the logged sharpness diagnostics.
    pub rho: f64,
    /// Weight of the sharpness penalty in the refinement loss.
    pub lambda1: f64,
    /// Weight of the sharpness-difference (feedback) penalty.
    pub lambda2: f64,
    /// Ratio bound of the projection label space.
    pub alpha: f64,
    pub seed: u64,
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn validate(&self, problem: &DGProblem) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be > 0".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be > 0".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if problem.training.len() < 2 {
            return Err(Error::Config(format!(
                "the feedback pair needs >= 2 training domains, got {}",
                problem.training.len()
            )));
        }
        let min_domain = problem.training.iter().map(|d| d.len()).min().unwrap_or(0);
        if self.batch_size == 0 || self.batch_size > min_domain {
            return Err(Error::Config(format!(
                "batch size {} invalid for smallest training domain of {min_domain}",
                self.batch_size
            )));
        }
        match self.algorithm {
            Algorithm::Erm => {
                if self.rho < 0.0 || !self.rho.is_finite() {
                    return Err(Error::Config(format!("rho must be >= 0, got {}", self.rho)));
                }
            }
            Algorithm::Sam | Algorithm::Sft => {
                if !(self.rho > 0.0) || !self.rho.is_finite() {
                    return Err(Error::Config(format!(
                        "rho must be > 0 for this algorithm, got {}",
                        self.rho
                    )));
                }
            }
        }
        if self.algorithm == Algorithm::Sft {
            if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
                return Err(Error::Config(format!(
                    "lambda weights must be >= 0, got ({}, {})",
                    self.lambda1, self.lambda2
                )));
            }
            if !(self.alpha >= 1.0) {
                return Err(Error::Config(format!("alpha must be >= 1, got {}", self.alpha)));
            }
        }
        Ok(())
    }
}

/// One log line per training step. Accuracy columns carry the most recent
/// evaluation (refreshed every `eval_every` steps and at the final step).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub train_loss: f64,
    pub sharpness_d: f64,
    pub sharpness_dp: f64,
    pub feedback: f64,
    pub pce: f64,
    pub refine: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

/// Full outcome of a run: the per-step log and final parameter snapshots.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub rows: Vec<LogRow>,
    pub final_model: ParamSet,
    /// Present only for self-feedback runs.
    pub final_refiner: Option<ParamSet>,
}

/// Per-purpose random streams of one run.
pub struct TrainRngs {
    pair: ChaCha8Rng,
    train_batch: ChaCha8Rng,
    feedback_d: ChaCha8Rng,
    feedback_dp: ChaCha8Rng,
}

impl TrainRngs {
    pub fn new(seed: u64) -> Self {
        TrainRngs {
            pair: seeded_stream(seed, streams::PAIR),
            train_batch: seeded_stream(seed, streams::TRAIN_BATCH),
            feedback_d: seeded_stream(seed, streams::FEEDBACK_D),
            feedback_dp: seeded_stream(seed, streams::FEEDBACK_DP),
        }
    }

    /// Uniform ordered pair of distinct training-domain indices.
    fn draw_pair(&mut self, p: usize) -> (usize, usize) {
        let d = self.pair.random_range(0..p);
        let offset = self.pair.random_range(0..p - 1);
        (d, (d + 1 + offset) % p)
    }
}

/// Everything the refinement phase reuses from the feedback phase of the
/// same iteration.
#[derive(Debug, Clone)]
pub struct FeedbackComponents {
    pub pair: (usize, usize),
    pub train_loss: f64,
    pub terms_d: SoftSharpnessTerms,
    pub terms_dp: SoftSharpnessTerms,
    /// `| CES-SL(d) - CES-SL(d') |` at the current refiner.
    pub feedback: f64,
}

/// Refinement-loss components of one step.
#[derive(Debug, Clone, Copy)]
pub struct RefineStats {
    pub pce: f64,
    pub refine: f64,
}

/// Feedback phase of one iteration: picks an ordered domain pair, updates
/// the model with one Adam step on the sharpness-aware soft-label loss over
/// a minibatch of the trained domain, then measures both domains' soft-label
/// sharpness on fresh minibatches. The refiner is read, never written.
pub fn feedback_phase(
    theta: &ParamSet,
    adam: &mut AdamState,
    phi: &ParamSet,
    problem: &DGProblem,
    cfg: &TrainConfig,
    rngs: &mut TrainRngs,
) -> Result<(ParamSet, FeedbackComponents)> {
    let p = problem.training.len();
    if p < 2 {
        return Err(Error::Config(format!("feedback phase needs >= 2 training domains, got {p}")));
    }
    let pair = rngs.draw_pair(p);
    let sharp_cfg = SharpnessConfig::new(cfg.rho)?;

    let (x, _) = minibatch(&problem.training[pair.0], cfg.batch_size, &mut rngs.train_batch)?;
    let soft = forward_probs(cfg.model, phi, &x)?;
    let (train_loss, grad) = sam_loss(cfg.model, theta, &x, &soft, &sharp_cfg)?;
    let updated = adam_step(adam, theta, &grad)?;

    let (xd, yd) = minibatch(&problem.training[pair.0], cfg.batch_size, &mut rngs.feedback_d)?;
    let (xdp, ydp) = minibatch(&problem.training[pair.1], cfg.batch_size, &mut rngs.feedback_dp)?;
    let soft_d = forward_probs(cfg.model, phi, &xd)?;
    let soft_dp = forward_probs(cfg.model, phi, &xdp)?;
    let terms_d = ces_sl_terms(cfg.model, &updated, &xd, &yd, &soft_d, &sharp_cfg)?;
    let terms_dp = ces_sl_terms(cfg.model, &updated, &xdp, &ydp, &soft_dp, &sharp_cfg)?;
    let feedback = (terms_d.value - terms_dp.value).abs();

    Ok((updated, FeedbackComponents { pair, train_loss, terms_d, terms_dp, feedback }))
}

/// Refinement phase of one iteration: one Adam step on
/// `PCE + lambda1 * CES-SL(d) + lambda2 * |CES-SL(d) - CES-SL(d')|`
/// with the model treated as constant. PCE targets are the projections of
/// the refiner's current outputs onto each sample's label space, estimated
/// on the union of the iteration's two feedback minibatches.
pub fn refinement_phase(
    theta: &ParamSet,
    phi: &ParamSet,
    adam: &mut AdamState,
    cfg: &TrainConfig,
    feedback: &FeedbackComponents,
) -> Result<(ParamSet, RefineStats)> {
    let _ = theta; // constant during this phase by construction
    let mut tape = Tape::new();
    let bound = tape.bind(phi)?;

    let xd = tape.constant(feedback.terms_d.inputs.clone());
    let xdp = tape.constant(feedback.terms_dp.inputs.clone());
    let probs_d = forward_probs_graph(&mut tape, &bound, cfg.model, xd)?;
    let probs_dp = forward_probs_graph(&mut tape, &bound, cfg.model, xdp)?;

    // q* from the current refiner outputs, constant for this update step.
    let targets_d = project_rows(tape.value(probs_d), &feedback.terms_d.labels, cfg.alpha)?;
    let targets_dp = project_rows(tape.value(probs_dp), &feedback.terms_dp.labels, cfg.alpha)?;
    let targets_d = tape.constant(targets_d);
    let targets_dp = tape.constant(targets_dp);
    let pce_d = pce_loss_graph(&mut tape, probs_d, targets_d)?;
    let pce_dp = pce_loss_graph(&mut tape, probs_dp, targets_dp)?;
    let pce_sum = tape.add(pce_d, pce_dp)?;
    let pce = tape.scale(pce_sum, 0.5);

    let ces_d = ces_sl_graph(&mut tape, probs_d, &feedback.terms_d)?;
    let ces_dp = ces_sl_graph(&mut tape, probs_dp, &feedback.terms_dp)?;
    let diff = tape.sub(ces_d, ces_dp)?;
    let signal = tape.abs(diff);

    let sharp_term = tape.scale(ces_d, cfg.lambda1);
    let consistency_term = tape.scale(signal, cfg.lambda2);
    let partial = tape.add(pce, sharp_term)?;
    let refine = tape.add(partial, consistency_term)?;

    let stats = RefineStats {
        pce: tape.value(pce).item()?,
        refine: tape.value(refine).item()?,
    };
    let grads = tape.backward(refine)?;
    let updated = adam_step(adam, phi, &grads)?;
    Ok((updated, stats))
}

/// Fraction of argmax-correct predictions; logit ties resolve to the lowest
/// class index.
pub fn evaluate(kind: ModelKind, params: &ParamSet, dataset: &DomainDataset) -> Result<f64> {
    let probs = forward_probs(kind, params, &dataset.inputs)?;
    let mut correct = 0usize;
    for (r, &label) in dataset.labels.iter().enumerate() {
        let row = probs.row(r);
        let mut best = 0usize;
        for (c, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = c;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Pooled accuracy across several domains.
pub fn evaluate_pooled(kind: ModelKind, params: &ParamSet, datasets: &[DomainDataset]) -> Result<f64> {
    let mut correct = 0.0;
    let mut total = 0.0;
    for ds in datasets {
        correct += evaluate(kind, params, ds)? * ds.len() as f64;
        total += ds.len() as f64;
    }
    Ok(correct / total)
}

/// Runs the configured algorithm for `cfg.steps` steps and logs one row per
/// step. Deterministic given the seed; a non-finite loss aborts with a
/// numerical error naming the last good step.
pub fn train(problem: &DGProblem, cfg: &TrainConfig) -> Result<RunRecord> {
    cfg.validate(problem)?;
    let n_classes = problem.n_classes;
    let mut theta = init_params(
        cfg.model,
        FEATURE_DIM,
        n_classes,
        ParamRole::Model,
        &mut seeded_stream(cfg.seed, streams::MODEL_INIT),
    );
    let mut phi = init_params(
        cfg.model,
        FEATURE_DIM,
        n_classes,
        ParamRole::Refiner,
        &mut seeded_stream(cfg.seed, streams::REFINER_INIT),
    );
    let mut adam_theta = AdamState::new(AdamConfig::with_lr(cfg.lr), &theta);
    let mut adam_phi = AdamState::new(AdamConfig::with_lr(cfg.lr), &phi);
    let mut rngs = TrainRngs::new(cfg.seed);

    let mut rows = Vec::with_capacity(cfg.steps);
    let mut train_acc = 0.0;
    let mut test_acc = 0.0;
    for step in 1..=cfg.steps as u64 {
        let row = match cfg.algorithm {
            Algorithm::Sft => {
                let (updated, fb) =
                    feedback_phase(&theta, &mut adam_theta, &phi, problem, cfg, &mut rngs)?;
                theta = updated;
                let (refined, stats) =
                    refinement_phase(&theta, &phi, &mut adam_phi, cfg, &fb)?;
                phi = refined;
                LogRow {
                    step,
                    train_loss: fb.train_loss,
                    sharpness_d: fb.terms_d.value,
                    sharpness_dp: fb.terms_dp.value,
                    feedback: fb.feedback,
                    pce: stats.pce,
                    refine: stats.refine,
                    train_acc,
                    test_acc,
                }
            }
            Algorithm::Erm | Algorithm::Sam => {
                baseline_step(&mut theta, &mut adam_theta, problem, cfg, &mut rngs, step)?
            }
        };
        let finite = row.train_loss.is_finite()
            && row.sharpness_d.is_finite()
            && row.sharpness_dp.is_finite()
            && row.refine.is_finite();
        if !finite {
            return Err(Error::Numeric {
                last_good_step: step - 1,
                message: "non-finite loss".to_string(),
            });
        }
        let eval_due = (step - 1) % cfg.eval_every as u64 == 0 || step == cfg.steps as u64;
        if eval_due {
            train_acc = evaluate_pooled(cfg.model, &theta, &problem.training)?;
            test_acc = evaluate_pooled(cfg.model, &theta, &problem.test)?;
        }
        rows.push(LogRow { train_acc, test_acc, ..row });
    }

    let final_refiner = (cfg.algorithm == Algorithm::Sft).then_some(phi);
    Ok(RunRecord { rows, final_model: theta, final_refiner })
}

/// One ERM or SAM step under the shared harness: same pair draw, same
/// minibatch streams, one-hot targets, and one-hot sharpness diagnostics.
fn baseline_step(
    theta: &mut ParamSet,
    adam: &mut AdamState,
    problem: &DGProblem,
    cfg: &TrainConfig,
    rngs: &mut TrainRngs,
    step: u64,
) -> Result<LogRow> {
    let pair = rngs.draw_pair(problem.training.len());
    let (x, labels) = minibatch(&problem.training[pair.0], cfg.batch_size, &mut rngs.train_batch)?;
    let targets = one_hot(&labels, problem.n_classes)?;
    let (train_loss, grad) = match cfg.algorithm {
        Algorithm::Erm => ce_value_grad(cfg.model, theta, &x, &targets)?,
        Algorithm::Sam => sam_loss(cfg.model, theta, &x, &targets, &SharpnessConfig::new(cfg.rho)?)?,
        Algorithm::Sft => unreachable!("sft handled by the phase functions"),
    };
    *theta = adam_step(adam, theta, &grad)?;

    let (xd, yd) = minibatch(&problem.training[pair.0], cfg.batch_size, &mut rngs.feedback_d)?;
    let (xdp, ydp) = minibatch(&problem.training[pair.1], cfg.batch_size, &mut rngs.feedback_dp)?;
    let (sharpness_d, sharpness_dp) = if cfg.rho > 0.0 {
        let sharp_cfg = SharpnessConfig::new(cfg.rho)?;
        let td = sharpness_measure(cfg.model, theta, &xd, &one_hot(&yd, problem.n_classes)?, &sharp_cfg)?;
        let tdp =
            sharpness_measure(cfg.model, theta, &xdp, &one_hot(&ydp, problem.n_classes)?, &sharp_cfg)?;
        (td.sharpness, tdp.sharpness)
    } else {
        (0.0, 0.0)
    };

    Ok(LogRow {
        step,
        train_loss,
        sharpness_d,
        sharpness_dp,
        feedback: (sharpness_d - sharpness_dp).abs(),
        pce: 0.0,
        refine: 0.0,
        train_acc: 0.0,
        test_acc: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::{generate_toy, table7_specs};
    use alloc::vec;

    fn toy_problem(seed: u64) -> DGProblem {
        generate_toy(&table7_specs(), 100, &mut seeded_stream(seed, 0)).unwrap()
    }

    fn sft_config(seed: u64) -> TrainConfig {
        TrainConfig {
            algorithm: Algorithm::Sft,
            model: ModelKind::Linear,
            lr: 5e-4,
            batch_size: 16,
            steps: 20,
            rho: 0.05,
            lambda1: 0.5,
            lambda2: 0.5,
            alpha: 10.0,
            seed,
            eval_every: 10,
        }
    }

    #[test]
    fn perfect_and_near_perfect_accuracy() {
        // A dataset whose labels the identity-logit model predicts exactly.
        let inputs = Matrix::from_vec(3, 2, vec![5.0, 0.0, 0.0, 5.0, 6.0, 1.0]).unwrap();
        let ds = DomainDataset::new(0, inputs, vec![0, 1, 0]).unwrap();
        let mut params = ParamSet::new(ParamRole::Model);
        params
            .insert("w", Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        params.insert("b", Matrix::zeros(1, 2)).unwrap();
        assert_eq!(evaluate(ModelKind::Linear, &params, &ds).unwrap(), 1.0);

        // One wrong label out of three.
        let ds_wrong = DomainDataset::new(0, ds.inputs.clone(), vec![0, 1, 1]).unwrap();
        let acc = evaluate(ModelKind::Linear, &params, &ds_wrong).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_params_tie_breaks_to_class_zero() {
        let inputs = Matrix::from_vec(4, 2, vec![1.0, 2.0, -1.0, 0.5, 3.0, 3.0, 0.0, 0.0]).unwrap();
        let ds = DomainDataset::new(0, inputs, vec![0, 1, 0, 2]).unwrap();
        let mut params = ParamSet::new(ParamRole::Model);
        params.insert("w", Matrix::zeros(2, 3)).unwrap();
        params.insert("b", Matrix::zeros(1, 3)).unwrap();
        // all logits equal → argmax picks class 0 → accuracy = class-0 fraction
        let acc = evaluate(ModelKind::Linear, &params, &ds).unwrap();
        assert!((acc - 0.5).abs() < 1e-15);
    }

    #[test]
    fn same_seed_runs_are_bit_identical() {
        let problem = toy_problem(1);
        let cfg = sft_config(7);
        let a = train(&problem, &cfg).unwrap();
        let b = train(&problem, &cfg).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.final_model, b.final_model);
        assert_eq!(a.final_refiner, b.final_refiner);
    }

    #[test]
    fn feedback_phase_ignores_lambda() {
        let problem = toy_problem(2);
        let mut cfg_a = sft_config(3);
        let mut cfg_b = sft_config(3);
        cfg_a.lambda1 = 0.0;
        cfg_a.lambda2 = 0.0;
        cfg_b.lambda1 = 2.0;
        cfg_b.lambda2 = 5.0;

        let theta = init_params(
            ModelKind::Linear,
            FEATURE_DIM,
            3,
            ParamRole::Model,
            &mut seeded_stream(3, streams::MODEL_INIT),
        );
        let phi = init_params(
            ModelKind::Linear,
            FEATURE_DIM,
            3,
            ParamRole::Refiner,
            &mut seeded_stream(3, streams::REFINER_INIT),
        );
        let run = |cfg: &TrainConfig| {
            let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &theta);
            let mut rngs = TrainRngs::new(cfg.seed);
            feedback_phase(&theta, &mut adam, &phi, &problem, cfg, &mut rngs).unwrap()
        };
        let (ta, fa) = run(&cfg_a);
        let (tb, fb) = run(&cfg_b);
        assert_eq!(ta, tb);
        assert_eq!(fa.pair, fb.pair);
        assert_eq!(fa.feedback, fb.feedback);
    }

    #[test]
    fn uniform_refiner_outputs_at_init() {
        // With near-zero weights the refiner's soft labels are near uniform.
        let phi = init_params(
            ModelKind::Linear,
            FEATURE_DIM,
            3,
            ParamRole::Refiner,
            &mut seeded_stream(11, streams::REFINER_INIT),
        );
        let problem = toy_problem(11);
        let soft = forward_probs(ModelKind::Linear, &phi, &problem.training[0].inputs).unwrap();
        for v in soft.data() {
            assert!((v - 1.0 / 3.0).abs() < 0.05, "soft label {v}");
        }
    }

    #[test]
    fn phases_alternate_and_leave_the_other_side_untouched() {
        let problem = toy_problem(4);
        let cfg = sft_config(5);
        let theta = init_params(
            ModelKind::Linear,
            FEATURE_DIM,
            3,
            ParamRole::Model,
            &mut seeded_stream(5, streams::MODEL_INIT),
        );
        let phi = init_params(
            ModelKind::Linear,
            FEATURE_DIM,
            3,
            ParamRole::Refiner,
            &mut seeded_stream(5, streams::REFINER_INIT),
        );
        let phi_before = phi.clone();
        let mut adam_t = AdamState::new(AdamConfig::with_lr(cfg.lr), &theta);
        let mut rngs = TrainRngs::new(cfg.seed);
        let (theta_after, fb) =
            feedback_phase(&theta, &mut adam_t, &phi, &problem, &cfg, &mut rngs).unwrap();
        assert_eq!(phi, phi_before, "feedback must not write the refiner");
        assert_ne!(theta_after, theta, "feedback must update the model");
        assert!(fb.feedback >= 0.0);

        let theta_snapshot = theta_after.clone();
        let mut adam_p = AdamState::new(AdamConfig::with_lr(cfg.lr), &phi);
        let (phi_after, stats) =
            refinement_phase(&theta_after, &phi, &mut adam_p, &cfg, &fb).unwrap();
        assert_eq!(theta_after, theta_snapshot, "refinement must not write the model");
        assert_ne!(phi_after, phi, "refinement must update the refiner");
        assert!(stats.pce.is_finite() && stats.refine.is_finite());
    }

    #[test]
    fn single_training_domain_rejected_before_step_zero() {
        let problem = toy_problem(6);
        let single = DGProblem {
            training: vec![problem.training[0].clone()],
            test: problem.test.clone(),
            n_classes: 3,
        };
        let cfg = sft_config(1);
        assert!(matches!(train(&single, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_lambda_rejected() {
        let problem = toy_problem(7);
        let mut cfg = sft_config(1);
        cfg.lambda2 = -0.1;
        assert!(matches!(train(&problem, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn all_logged_losses_finite_on_toy_defaults() {
        let problem = toy_problem(8);
        let mut cfg = sft_config(9);
        cfg.steps = 50;
        let record = train(&problem, &cfg).unwrap();
        assert_eq!(record.rows.len(), 50);
        for row in &record.rows {
            assert!(row.train_loss.is_finite());
            assert!(row.feedback >= 0.0);
            assert!(row.pce.is_finite() && row.refine.is_finite());
            assert!((0.0..=1.0).contains(&row.train_acc));
            assert!((0.0..=1.0).contains(&row.test_acc));
        }
        // rows strictly ordered by step
        for (i, row) in record.rows.iter().enumerate() {
            assert_eq!(row.step, i as u64 + 1);
        }
        assert!(record.final_refiner.is_some());
    }
}
