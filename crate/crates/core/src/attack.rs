//! FGSM adversarial examples and the evaluation metrics built on them.

use rayon::prelude::*;

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::network::{output_delta, MlpModel};
use crate::numerics::{one_hot, transpose_matvec};

/// Gradient of the cross-entropy loss with respect to the input, using the
/// model's hidden-activation derivative (the sigmoid surrogate for binary nets).
pub fn input_gradient(model: &MlpModel, x: &[f64], target: &[f64]) -> Vec<f64> {
    let trace = model.forward(x);
    let hid = model.hidden_delta(&trace, &output_delta(&trace, target));
    transpose_matvec(&model.w1, &hid)
}

/// `sgn` with `sgn(0) = 0`.
#[inline]
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `x + ε·sgn(g)`, optionally clipped back to `[0, 1]`.
pub fn perturb(x: &[f64], signs: &[f64], epsilon: f64, clip: bool) -> Vec<f64> {
    x.iter()
        .zip(signs)
        .map(|(&xi, &si)| {
            let v = xi + epsilon * si;
            if clip {
                v.clamp(0.0, 1.0)
            } else {
                v
            }
        })
        .collect()
}

fn gradient_signs(model: &MlpModel, x: &[f64], true_label: usize) -> Vec<f64> {
    let target = one_hot(true_label, model.shape().outputs);
    input_gradient(model, x, &target)
        .into_iter()
        .map(sign)
        .collect()
}

/// Untargeted FGSM against `model`, clipped to the pixel range.
pub fn fgsm(model: &MlpModel, x: &[f64], true_label: usize, epsilon: f64) -> Vec<f64> {
    fgsm_with(model, x, true_label, epsilon, true)
}

pub fn fgsm_with(
    model: &MlpModel,
    x: &[f64],
    true_label: usize,
    epsilon: f64,
    clip: bool,
) -> Vec<f64> {
    assert!(epsilon >= 0.0, "epsilon must be non-negative");
    if epsilon == 0.0 {
        return x.to_vec();
    }
    perturb(x, &gradient_signs(model, x, true_label), epsilon, clip)
}

/// Adversarial copies of a clean set, all at one ε.
#[derive(Debug, Clone)]
pub struct AdversarialBatch {
    pub adversarials: Vec<Vec<f64>>,
    pub ground_truth: Vec<usize>,
    pub epsilon: f64,
}

impl AdversarialBatch {
    /// FGSM against `model` for every item of `clean`.
    pub fn generate(model: &MlpModel, clean: &LabeledDataset, epsilon: f64, clip: bool) -> Self {
        let adversarials = (0..clean.len())
            .into_par_iter()
            .map(|i| fgsm_with(model, clean.image(i), clean.label(i), epsilon, clip))
            .collect();
        AdversarialBatch {
            adversarials,
            ground_truth: (0..clean.len()).map(|i| clean.label(i)).collect(),
            epsilon,
        }
    }

    pub fn len(&self) -> usize {
        self.adversarials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adversarials.is_empty()
    }
}

pub fn accuracy(model: &MlpModel, data: &LabeledDataset) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let correct = (0..data.len())
        .into_par_iter()
        .filter(|&i| model.predict(data.image(i)) == data.label(i))
        .count();
    correct as f64 / data.len() as f64
}

/// Accuracy on adversarial inputs divided by accuracy on the clean inputs.
pub fn relative_accuracy(
    model: &MlpModel,
    clean: &LabeledDataset,
    adv: &AdversarialBatch,
) -> Result<f64> {
    if adv.len() != clean.len() {
        return Err(Error::Dimension {
            context: "relative_accuracy batch",
            expected: clean.len(),
            found: adv.len(),
        });
    }
    let clean_acc = accuracy(model, clean);
    let adv_correct = adv
        .adversarials
        .par_iter()
        .zip(adv.ground_truth.par_iter())
        .filter(|(x, &l)| model.predict(x) == l)
        .count();
    ratio(adv_correct as f64 / adv.len().max(1) as f64, clean_acc)
}

fn ratio(adv_acc: f64, clean_acc: f64) -> Result<f64> {
    if clean_acc <= 0.0 {
        return Err(Error::UndefinedMetric(
            "relative accuracy with zero clean accuracy".into(),
        ));
    }
    Ok(adv_acc / clean_acc)
}

/// Labels needed for the transferability condition, for one test sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttackOutcome {
    pub oracle_clean: usize,
    pub oracle_adv: usize,
    pub surrogate_clean: usize,
    pub surrogate_adv: usize,
    pub ground_truth: usize,
}

impl AttackOutcome {
    /// Both models were right on the clean input and the attack fooled the surrogate.
    pub fn conditions(&self) -> bool {
        self.surrogate_clean == self.oracle_clean
            && self.oracle_clean == self.ground_truth
            && self.surrogate_adv != self.surrogate_clean
    }

    pub fn transferred(&self) -> bool {
        self.conditions() && self.oracle_adv != self.oracle_clean
    }
}

/// `Pr(l′ ≠ l | l̂′ ≠ l̂ ∧ l̂ = l = l_t)`; `None` when nothing meets the condition.
pub fn transferability(outcomes: &[AttackOutcome]) -> Option<f64> {
    let denom = outcomes.iter().filter(|o| o.conditions()).count();
    if denom == 0 {
        return None;
    }
    let num = outcomes.iter().filter(|o| o.transferred()).count();
    Some(num as f64 / denom as f64)
}

/// Metrics for one ε.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackRow {
    pub epsilon: f64,
    pub wb_rel_acc: f64,
    pub bb_rel_acc: f64,
    pub transferability: Option<f64>,
    pub clean_acc_oracle: f64,
    pub clean_acc_surrogate: f64,
}

/// White-box FGSM against the oracle: oracle relative accuracy per ε.
pub fn whitebox_rel_acc(
    oracle: &MlpModel,
    test: &LabeledDataset,
    epsilons: &[f64],
    clip: bool,
) -> Result<Vec<f64>> {
    let clean_acc = accuracy(oracle, test);
    let correct: Vec<Vec<bool>> = (0..test.len())
        .into_par_iter()
        .map(|i| {
            let x = test.image(i);
            let l = test.label(i);
            let signs = gradient_signs(oracle, x, l);
            epsilons
                .iter()
                .map(|&eps| {
                    if eps == 0.0 {
                        oracle.predict(x) == l
                    } else {
                        oracle.predict(&perturb(x, &signs, eps, clip)) == l
                    }
                })
                .collect()
        })
        .collect();
    (0..epsilons.len())
        .map(|e| {
            let n = correct.iter().filter(|c| c[e]).count();
            ratio(n as f64 / test.len() as f64, clean_acc)
        })
        .collect()
}

/// Black-box FGSM: adversarials crafted on the surrogate, scored on the oracle.
///
/// Returns per-ε `(bb_rel_acc, transferability)` plus the clean accuracies.
pub fn blackbox_eval(
    oracle: &MlpModel,
    surrogate: &MlpModel,
    test: &LabeledDataset,
    epsilons: &[f64],
    clip: bool,
) -> Result<(Vec<(f64, Option<f64>)>, f64, f64)> {
    let per_sample: Vec<Vec<AttackOutcome>> = (0..test.len())
        .into_par_iter()
        .map(|i| {
            let x = test.image(i);
            let l = test.label(i);
            let oracle_clean = oracle.predict(x);
            let surrogate_clean = surrogate.predict(x);
            let signs = gradient_signs(surrogate, x, l);
            epsilons
                .iter()
                .map(|&eps| {
                    let (oracle_adv, surrogate_adv) = if eps == 0.0 {
                        (oracle_clean, surrogate_clean)
                    } else {
                        let adv = perturb(x, &signs, eps, clip);
                        (oracle.predict(&adv), surrogate.predict(&adv))
                    };
                    AttackOutcome {
                        oracle_clean,
                        oracle_adv,
                        surrogate_clean,
                        surrogate_adv,
                        ground_truth: l,
                    }
                })
                .collect()
        })
        .collect();
    let n = test.len() as f64;
    let oracle_clean_acc = per_sample
        .iter()
        .filter(|o| o[0].oracle_clean == o[0].ground_truth)
        .count() as f64
        / n;
    let surrogate_clean_acc = per_sample
        .iter()
        .filter(|o| o[0].surrogate_clean == o[0].ground_truth)
        .count() as f64
        / n;
    let rows = (0..epsilons.len())
        .map(|e| {
            let outcomes: Vec<AttackOutcome> = per_sample.iter().map(|o| o[e]).collect();
            let adv_acc = outcomes
                .iter()
                .filter(|o| o.oracle_adv == o.ground_truth)
                .count() as f64
                / n;
            Ok((
                ratio(adv_acc, oracle_clean_acc)?,
                transferability(&outcomes),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((rows, oracle_clean_acc, surrogate_clean_acc))
}

/// Full per-ε table: white-box on the oracle, black-box from the surrogate.
pub fn run_attack_eval(
    oracle: &MlpModel,
    surrogate: &MlpModel,
    test: &LabeledDataset,
    epsilons: &[f64],
    clip: bool,
) -> Result<Vec<AttackRow>> {
    if test.is_empty() || epsilons.is_empty() {
        return Err(Error::Argument(
            "attack evaluation needs test samples and epsilons".into(),
        ));
    }
    let wb = whitebox_rel_acc(oracle, test, epsilons, clip)?;
    combine(&wb, oracle, surrogate, test, epsilons, clip)
}

/// Like [`run_attack_eval`] with the oracle's white-box column precomputed.
pub fn combine(
    wb: &[f64],
    oracle: &MlpModel,
    surrogate: &MlpModel,
    test: &LabeledDataset,
    epsilons: &[f64],
    clip: bool,
) -> Result<Vec<AttackRow>> {
    let (bb, clean_o, clean_s) = blackbox_eval(oracle, surrogate, test, epsilons, clip)?;
    Ok(epsilons
        .iter()
        .zip(wb)
        .zip(bb)
        .map(
            |((&epsilon, &wb_rel_acc), (bb_rel_acc, transferability))| AttackRow {
                epsilon,
                wb_rel_acc,
                bb_rel_acc,
                transferability,
                clean_acc_oracle: clean_o,
                clean_acc_surrogate: clean_s,
            },
        )
        .collect())
}
