//! Accuracy and loss metrics.
//!
//! Two quantities matter: each client's *local* accuracy, where the client
//! classifies every test sample using only its owned feature blocks, and the
//! *global* accuracy of the matched server model on full-feature samples.
//! Local accuracy is deliberately measured on all classes, including ones a
//! client never trained on.

use crate::data::{restrict_blocks, Sample};
use crate::error::{Error, Result};
use crate::nn::{loss_only, predict, Mlp};

/// Per-round metric snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub round: usize,
    pub local_acc_per_client: Vec<f64>,
    pub mean_local_acc: f64,
    pub global_acc: f64,
    pub global_loss: f64,
    /// Mean over clients of their local train loss.
    pub local_loss: f64,
}

impl EvalReport {
    pub fn new(
        round: usize,
        local_acc_per_client: Vec<f64>,
        global_acc: f64,
        global_loss: f64,
        local_loss: f64,
    ) -> Result<Self> {
        if local_acc_per_client.is_empty() {
            return Err(Error::invalid("report needs at least one client"));
        }
        for &acc in local_acc_per_client.iter().chain([&global_acc]) {
            if !(0.0..=1.0).contains(&acc) {
                return Err(Error::invalid(format!("accuracy {acc} outside [0, 1]")));
            }
        }
        let mean_local_acc =
            local_acc_per_client.iter().sum::<f64>() / local_acc_per_client.len() as f64;
        Ok(EvalReport {
            round,
            local_acc_per_client,
            mean_local_acc,
            global_acc,
            global_loss,
            local_loss,
        })
    }

    /// Key-value lines for the run summary.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("eval.round={}\n", self.round));
        for (m, acc) in self.local_acc_per_client.iter().enumerate() {
            out.push_str(&format!("eval.local_acc.client.{m}={acc}\n"));
        }
        out.push_str(&format!("eval.mean_local_acc={}\n", self.mean_local_acc));
        out.push_str(&format!("eval.global_acc={}\n", self.global_acc));
        out.push_str(&format!("eval.global_loss={}\n", self.global_loss));
        out.push_str(&format!("eval.mean_local_loss={}\n", self.local_loss));
        out
    }
}

/// Index of the largest score; ties go to the lowest class index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Accuracy of one client's partial-feature model over the full test set.
///
/// Test samples carry all blocks; the client reads only the blocks in its
/// feature set.
pub fn eval_local(
    extractors: &[Mlp],
    head: &Mlp,
    feature_set: &[usize],
    test_set: &[Sample],
) -> Result<f64> {
    if test_set.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    let mut correct = 0usize;
    for sample in test_set {
        let blocks = restrict_blocks(&sample.blocks, feature_set);
        let scores = predict(extractors, head, &blocks)?;
        if argmax(&scores) == sample.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_set.len() as f64)
}

/// Accuracy of the matched global model on full-feature samples.
pub fn eval_global(extractors: &[Mlp], head: &Mlp, test_set: &[Sample]) -> Result<f64> {
    if test_set.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    let mut correct = 0usize;
    for sample in test_set {
        let scores = predict(extractors, head, &sample.blocks)?;
        if argmax(&scores) == sample.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_set.len() as f64)
}

/// Mean cross-entropy of the global model over the test set.
pub fn global_loss(extractors: &[Mlp], head: &Mlp, test_set: &[Sample]) -> Result<f64> {
    if test_set.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    let mut total = 0.0;
    for sample in test_set {
        total += loss_only(extractors, head, &sample.blocks, sample.label)?;
    }
    Ok(total / test_set.len() as f64)
}
