//! Client-side state and local updates.
//!
//! A client owns its dataset, one feature extractor per owned block, and a
//! local inference head. Local training runs mini-batch SGD on the data loss,
//! optionally regularized toward the server's anchors: the owned global
//! extractors and the pattern-selected slice of the global head. Batch draws
//! come from a private per-client stream, so clients never need to coordinate
//! on samples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{ClientDataset, FeatureSchema};
use crate::error::{Error, Result};
use crate::matching::{embed_local_head, project_local_head};
use crate::nn::{loss_and_grad, loss_only, sgd_step, ClientGrads, Mlp};

/// One client's models, data, and private randomness.
#[derive(Debug, Clone)]
pub struct ClientState {
    dataset: ClientDataset,
    extractors: Vec<Mlp>,
    head: Mlp,
    rng: ChaCha8Rng,
}

impl ClientState {
    pub fn new(dataset: ClientDataset, extractors: Vec<Mlp>, head: Mlp, seed: u64) -> Result<Self> {
        if extractors.len() != dataset.feature_set().len() {
            return Err(Error::shape(format!(
                "client {}: {} extractors for {} owned blocks",
                dataset.client_id(),
                extractors.len(),
                dataset.feature_set().len()
            )));
        }
        let embed_total: usize = extractors.iter().map(|e| e.out_dim()).sum();
        if head.in_dim() != embed_total {
            return Err(Error::shape(format!(
                "client {}: head input {} does not match total embedding width {embed_total}",
                dataset.client_id(),
                head.in_dim()
            )));
        }
        Ok(ClientState {
            dataset,
            extractors,
            head,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn client_id(&self) -> usize {
        self.dataset.client_id()
    }

    pub fn dataset(&self) -> &ClientDataset {
        &self.dataset
    }

    pub fn feature_set(&self) -> &[usize] {
        self.dataset.feature_set()
    }

    /// Extractors in owned-block order.
    pub fn extractors(&self) -> &[Mlp] {
        &self.extractors
    }

    pub fn extractors_mut(&mut self) -> &mut [Mlp] {
        &mut self.extractors
    }

    pub fn head(&self) -> &Mlp {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut Mlp {
        &mut self.head
    }

    pub fn set_head(&mut self, head: Mlp) {
        self.head = head;
    }

    /// The local head lifted onto the global `D * E` input layout.
    pub fn embedded_head(&self, schema: &FeatureSchema) -> Result<Mlp> {
        embed_local_head(&self.head, self.dataset.feature_set(), schema)
    }

    /// Draw a mini-batch of sample indices (with replacement) from the
    /// client's private stream.
    pub fn draw_batch(&mut self, batch_size: usize) -> Vec<usize> {
        let n = self.dataset.len();
        (0..batch_size).map(|_| self.rng.random_range(0..n)).collect()
    }

    /// Mean cross-entropy of the current local model on the client's own
    /// training samples.
    pub fn mean_train_loss(&self) -> Result<f64> {
        let mut total = 0.0;
        for s in self.dataset.samples() {
            total += loss_only(&self.extractors, &self.head, &s.blocks, s.label)?;
        }
        Ok(total / self.dataset.len() as f64)
    }
}

/// Frozen server-side reference points for one client's local problem.
///
/// `head_embedded` is the pattern-selected slice of the global head in the
/// global input layout; `head_local` is the same anchor projected onto the
/// client's owned columns (the only coordinates its gradient can touch).
/// Before the first matching round no head anchor exists and the head
/// consensus term is simply absent.
#[derive(Debug, Clone)]
pub struct LocalAnchors {
    pub head_embedded: Option<Mlp>,
    pub head_local: Option<Mlp>,
    pub extractors: Vec<Mlp>,
}

impl LocalAnchors {
    pub fn new(
        head_embedded: Option<Mlp>,
        feature_set: &[usize],
        extractor_anchors: Vec<Mlp>,
        schema: &FeatureSchema,
    ) -> Result<Self> {
        let head_local = match &head_embedded {
            Some(embedded) => Some(project_local_head(embedded, feature_set, schema)?),
            None => None,
        };
        Ok(LocalAnchors {
            head_embedded,
            head_local,
            extractors: extractor_anchors,
        })
    }
}

/// Proximal coefficients applied during a local step.
#[derive(Debug, Clone, Copy)]
pub struct ProxWeights {
    /// Weight of the head-consensus term.
    pub mu: f64,
    /// Weight of the extractor-consensus terms.
    pub lambda_feat: f64,
}

/// Value of the client's local objective at the current parameters:
/// per-sample-averaged data loss, plus `mu * ||anchor - embed(head)||^2`,
/// plus `lambda_feat * sum_d ||extractor_d - anchor_d||^2`.
///
/// The head term is evaluated in the embedded space, matching the server's
/// matching objective; columns of unowned blocks contribute a constant the
/// client cannot influence.
pub fn local_objective(
    client: &ClientState,
    anchors: &LocalAnchors,
    weights: ProxWeights,
    schema: &FeatureSchema,
) -> Result<f64> {
    let mut total = 0.0;
    for s in client.dataset.samples() {
        total += loss_only(&client.extractors, &client.head, &s.blocks, s.label)?;
    }
    let mut objective = total / client.dataset.len() as f64;

    if let Some(anchor) = &anchors.head_embedded {
        let embedded = client.embedded_head(schema)?;
        objective += weights.mu * anchor.sq_distance(&embedded)?;
    }
    for (ext, anchor) in client.extractors.iter().zip(&anchors.extractors) {
        objective += weights.lambda_feat * ext.sq_distance(anchor)?;
    }
    Ok(objective)
}

/// One SGD step on an explicit mini-batch.
///
/// The data-term gradient is the batch mean of per-sample gradients; when
/// `prox` is set, the exact consensus gradients `2*lambda*(theta_d -
/// anchor_d)` and `2*mu*(head - head_anchor)` are added before the step.
pub fn local_step_on_batch(
    client: &mut ClientState,
    prox: Option<(&LocalAnchors, ProxWeights)>,
    lr: f64,
    batch: &[usize],
) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::invalid("empty mini-batch"));
    }
    let mut grads = ClientGrads::zeros_like(&client.extractors, &client.head);
    for &idx in batch {
        let sample = &client.dataset.samples()[idx];
        let (_, g) = loss_and_grad(&client.extractors, &client.head, &sample.blocks, sample.label)?;
        grads.accumulate(&g)?;
    }
    grads.scale(1.0 / batch.len() as f64);

    if let Some((anchors, weights)) = prox {
        for (d, anchor) in anchors.extractors.iter().enumerate() {
            grads.extractors[d].add_param_diff(
                &client.extractors[d],
                anchor,
                2.0 * weights.lambda_feat,
            )?;
        }
        if let Some(anchor) = &anchors.head_local {
            grads.head.add_param_diff(&client.head, anchor, 2.0 * weights.mu)?;
        }
    }

    for (ext, g) in client.extractors.iter_mut().zip(&grads.extractors) {
        sgd_step(ext, g, lr)?;
    }
    sgd_step(&mut client.head, &grads.head, lr)
}

/// Proximal local update: `local_steps` mini-batch SGD steps on the
/// regularized objective, with anchors frozen for the whole call.
pub fn local_update_prox(
    client: &mut ClientState,
    anchors: &LocalAnchors,
    weights: ProxWeights,
    local_steps: usize,
    batch_size: usize,
    lr: f64,
) -> Result<()> {
    for _ in 0..local_steps {
        let batch = client.draw_batch(batch_size);
        local_step_on_batch(client, Some((anchors, weights)), lr, &batch)?;
    }
    Ok(())
}

/// Plain local update: `local_steps` mini-batch SGD steps on the data loss
/// alone, no consensus terms.
pub fn local_update_avg(
    client: &mut ClientState,
    local_steps: usize,
    batch_size: usize,
    lr: f64,
) -> Result<()> {
    for _ in 0..local_steps {
        let batch = client.draw_batch(batch_size);
        local_step_on_batch(client, None, lr, &batch)?;
    }
    Ok(())
}
