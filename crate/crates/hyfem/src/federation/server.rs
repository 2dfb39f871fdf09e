//! Server-side state and aggregation.
//!
//! The server sees parameters only: per-client extractor and head weights
//! plus feature-block ownership. It holds one global extractor per block, the
//! matched global head, and the latest matching pattern per client. Nothing
//! in this module can reach a sample or a label.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::FeatureSchema;
use crate::error::{Error, Result};
use crate::matching::{
    match_client, matching_objective, update_global_head, GlobalHead, MatchingPattern,
};
use crate::nn::{Activation, DenseLayer, Mlp};
use crate::seeding;

/// Parameter-only view of one client handed to server operations.
#[derive(Debug, Clone, Copy)]
pub struct ClientModelView<'a> {
    pub client_id: usize,
    pub feature_set: &'a [usize],
    pub extractors: &'a [Mlp],
}

/// Widths of the models a simulation builds.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Hidden width of every per-block feature extractor.
    pub extractor_hidden: usize,
    /// Hidden width of every client inference head.
    pub head_hidden: usize,
    /// Hidden width of the global head; defaults to the client head width.
    pub global_head_hidden: Option<usize>,
    /// Whether extractor outputs pass through ReLU (the embedding
    /// activation); identity otherwise.
    pub extractor_output_relu: bool,
}

impl ModelConfig {
    pub fn global_hidden(&self) -> usize {
        self.global_head_hidden.unwrap_or(self.head_hidden)
    }

    pub fn embedding_activation(&self) -> Activation {
        if self.extractor_output_relu {
            Activation::Relu
        } else {
            Activation::Identity
        }
    }

    /// A fresh extractor for block `d`, drawn from `rng`.
    pub fn build_extractor<R: rand::Rng>(
        &self,
        schema: &FeatureSchema,
        block: usize,
        rng: &mut R,
    ) -> Result<Mlp> {
        Mlp::new(vec![
            DenseLayer::init(
                schema.block_width(block),
                self.extractor_hidden,
                Activation::Relu,
                rng,
            ),
            DenseLayer::init(
                self.extractor_hidden,
                schema.embed_width(),
                self.embedding_activation(),
                rng,
            ),
        ])
    }

    /// A fresh inference head over `num_blocks` owned blocks.
    pub fn build_head<R: rand::Rng>(
        &self,
        schema: &FeatureSchema,
        num_blocks: usize,
        rng: &mut R,
    ) -> Result<Mlp> {
        Mlp::new(vec![
            DenseLayer::init(
                num_blocks * schema.embed_width(),
                self.head_hidden,
                Activation::Relu,
                rng,
            ),
            DenseLayer::init(
                self.head_hidden,
                schema.num_classes(),
                Activation::Softmax,
                rng,
            ),
        ])
    }
}

/// Per-pass matching telemetry.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingPassRecord {
    pub round: usize,
    pub pass: usize,
    pub client_id: usize,
    /// Matching objective after this pass's pattern and head updates.
    pub objective: f64,
}

/// Global models and matching patterns. Holds parameters only, never data.
#[derive(Debug, Clone)]
pub struct ServerState {
    schema: FeatureSchema,
    extractors: Vec<Mlp>,
    head: GlobalHead,
    patterns: Vec<MatchingPattern>,
}

impl ServerState {
    /// Seeded initialization: one fresh extractor per block and an all-zero
    /// global head. The head stays zero until the first matching round
    /// bootstraps it from client heads.
    pub fn init(schema: &FeatureSchema, model: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(seed, 2));
        let extractors = (0..schema.num_blocks())
            .map(|d| model.build_extractor(schema, d, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(ServerState {
            head: GlobalHead::zeros(schema, model.global_hidden())?,
            extractors,
            schema: schema.clone(),
            patterns: Vec::new(),
        })
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn extractors(&self) -> &[Mlp] {
        &self.extractors
    }

    pub fn extractor(&self, block: usize) -> &Mlp {
        &self.extractors[block]
    }

    pub fn global_head(&self) -> &GlobalHead {
        &self.head
    }

    /// Latest matching patterns; empty until the first matching round.
    pub fn patterns(&self) -> &[MatchingPattern] {
        &self.patterns
    }

    pub fn pattern_for(&self, client_id: usize) -> Option<&MatchingPattern> {
        self.patterns.iter().find(|p| p.client_id() == client_id)
    }

    /// The pattern-selected slice of the global head for one client, in the
    /// embedded (full-input) layout. `None` before the client was ever
    /// matched.
    pub fn anchor_head(&self, client_id: usize) -> Result<Option<Mlp>> {
        let Some(pattern) = self.pattern_for(client_id) else {
            return Ok(None);
        };
        let global = self.head.mlp();
        let first = &global.layers()[0];
        let second = &global.layers()[1];
        let h_local = pattern.local_width();
        let mut sel_first = DenseLayer::zeros(first.in_dim(), h_local, first.activation());
        let mut sel_second = DenseLayer::zeros(h_local, second.out_dim(), second.activation());
        for (i, &j) in pattern.assignment().iter().enumerate() {
            sel_first.weight_row_mut(i).copy_from_slice(first.weight_row(j));
            sel_first.bias_mut()[i] = first.bias()[j];
            for r in 0..second.out_dim() {
                sel_second.weights_mut()[r * h_local + i] =
                    second.weights()[r * second.in_dim() + j];
            }
        }
        sel_second.bias_mut().copy_from_slice(second.bias());
        Ok(Some(Mlp::new(vec![sel_first, sel_second])?))
    }

    /// Consensus averaging of feature extractors: the global extractor of
    /// each block becomes the parameter-wise mean over the clients owning
    /// that block, the closed-form minimizer of the squared-distance
    /// consensus objective. Every block needs at least one owner.
    pub fn aggregate_extractors(&mut self, views: &[ClientModelView<'_>]) -> Result<()> {
        let aggregated = aggregate_extractors(views, &self.extractors)?;
        self.extractors = aggregated;
        Ok(())
    }

    /// Matching rounds: `passes` sequential block updates, each re-matching
    /// one client (drawn by cycling seeded permutations) and then rebuilding
    /// the global head for the current patterns. The matching objective is
    /// non-increasing across passes.
    ///
    /// On the first call the patterns are initialized by spreading clients
    /// across the global width (client `m` starts at slot `m * H_m`, wrapping
    /// when the global head is not wide enough), and the global head is
    /// bootstrapped from the round's local heads under those patterns before
    /// the first pass. Matching against the all-zero initial head would
    /// otherwise tie-break every client onto the same low slots.
    pub fn run_matching(
        &mut self,
        embedded_heads: &[Mlp],
        passes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<MatchingPassRecord>> {
        let clients = embedded_heads.len();
        if clients == 0 {
            return Err(Error::invalid("matching needs at least one client head"));
        }
        if self.patterns.is_empty() {
            let h_global = self.head.hidden_width();
            let mut offset = 0;
            self.patterns = embedded_heads
                .iter()
                .enumerate()
                .map(|(m, head)| {
                    let h_local = head.layers()[0].out_dim();
                    if h_local > h_global {
                        return Err(Error::Capacity(format!(
                            "client {m} head has {h_local} hidden neurons, global head only {h_global}"
                        )));
                    }
                    let assignment: Vec<usize> =
                        (0..h_local).map(|i| (offset + i) % h_global).collect();
                    offset = (offset + h_local) % h_global;
                    MatchingPattern::new(m, assignment, h_global)
                })
                .collect::<Result<Vec<_>>>()?;
            self.head = update_global_head(&self.patterns, embedded_heads, &self.head)?;
        }
        if self.patterns.len() != clients {
            return Err(Error::invalid(format!(
                "matching got {clients} heads but {} stored patterns",
                self.patterns.len()
            )));
        }

        let mut order: Vec<usize> = Vec::new();
        let mut records = Vec::with_capacity(passes);
        for pass in 0..passes {
            if order.is_empty() {
                order = random_permutation(rng, clients);
            }
            let m = order.pop().expect("refilled above");
            self.patterns[m] = match_client(&self.head, &embedded_heads[m], m)?;
            self.head = update_global_head(&self.patterns, embedded_heads, &self.head)?;
            records.push(MatchingPassRecord {
                round: 0,
                pass,
                client_id: m,
                objective: matching_objective(&self.head, &self.patterns, embedded_heads),
            });
        }
        Ok(records)
    }
}

/// Parameter-wise mean of each block's extractor over the block's owners.
/// Exposed standalone for direct use in tests and tools; `prev` supplies the
/// block count and shapes.
pub fn aggregate_extractors(views: &[ClientModelView<'_>], prev: &[Mlp]) -> Result<Vec<Mlp>> {
    let num_blocks = prev.len();
    let mut sums: Vec<Option<Mlp>> = vec![None; num_blocks];
    let mut counts = vec![0usize; num_blocks];
    for view in views {
        if view.extractors.len() != view.feature_set.len() {
            return Err(Error::shape(format!(
                "client {} exposes {} extractors for {} blocks",
                view.client_id,
                view.extractors.len(),
                view.feature_set.len()
            )));
        }
        for (pos, &d) in view.feature_set.iter().enumerate() {
            if d >= num_blocks {
                return Err(Error::invalid(format!(
                    "client {} claims unknown block {d}",
                    view.client_id
                )));
            }
            let ext = &view.extractors[pos];
            match &mut sums[d] {
                Some(acc) => acc.add_scaled(ext, 1.0)?,
                None => sums[d] = Some(ext.clone()),
            }
            counts[d] += 1;
        }
    }
    sums.into_iter()
        .zip(counts)
        .enumerate()
        .map(|(d, (sum, count))| match sum {
            Some(mut acc) => {
                acc.scale(1.0 / count as f64);
                Ok(acc)
            }
            None => Err(Error::invalid(format!(
                "block {d} has no owner; every block needs at least one client"
            ))),
        })
        .collect()
}

fn random_permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    use rand::Rng;
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}
