//! Client and server state machines plus the round orchestrator.
//!
//! Each communication round runs four phases: parallel local updates on every
//! client, consensus averaging of feature extractors, sequential matching
//! passes that rebuild the global head, and redistribution of the aggregated
//! models back to the clients. Everything is driven by one master seed, so a
//! run replays bit-for-bit at any worker count.

mod client;
mod server;

pub use client::{
    local_objective, local_step_on_batch, local_update_avg, local_update_prox, ClientState,
    LocalAnchors, ProxWeights,
};
pub use server::{
    aggregate_extractors, ClientModelView, MatchingPassRecord, ModelConfig, ServerState,
};

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{ClientDataset, FeatureSchema, Sample};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::matching::project_local_head;
use crate::nn::Mlp;
use crate::seeding;

/// Local update flavor: proximally regularized or plain SGD on the data loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Prox,
    Avg,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Prox => write!(f, "prox"),
            Mode::Avg => write!(f, "avg"),
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prox" => Ok(Mode::Prox),
            "avg" => Ok(Mode::Avg),
            other => Err(Error::invalid(format!(
                "unknown mode `{other}`, expected `prox` or `avg`"
            ))),
        }
    }
}

/// Knobs of the communication loop.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundConfig {
    /// Communication rounds `T` (zero runs nothing).
    pub rounds: usize,
    /// Local SGD steps `Q` per round.
    pub local_steps: usize,
    /// Matching passes `P` per round.
    pub matching_passes: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    /// Multiplicative decay applied every `lr_decay_every` rounds; 1 disables.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    /// Head-consensus weight.
    pub mu: f64,
    /// Extractor-consensus weight.
    pub lambda_feat: f64,
    pub mode: Mode,
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_steps == 0 || self.matching_passes == 0 || self.batch_size == 0 {
            return Err(Error::invalid(
                "local_steps, matching_passes, and batch_size must be >= 1",
            ));
        }
        if !(self.lr_init > 0.0 && self.lr_init.is_finite()) {
            return Err(Error::invalid(format!("lr {} must be positive", self.lr_init)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::invalid(format!(
                "lr_decay {} must lie in (0, 1]",
                self.lr_decay
            )));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::invalid("lr_decay_every must be >= 1"));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::invalid(format!("mu {} must be >= 0", self.mu)));
        }
        if !(self.lambda_feat >= 0.0 && self.lambda_feat.is_finite()) {
            return Err(Error::invalid(format!(
                "lambda_feat {} must be >= 0",
                self.lambda_feat
            )));
        }
        Ok(())
    }

    /// Stepwise-decayed learning rate for a round.
    pub fn lr_at(&self, round: usize) -> f64 {
        self.lr_init * self.lr_decay.powi((round / self.lr_decay_every) as i32)
    }

    pub fn prox_weights(&self) -> ProxWeights {
        ProxWeights {
            mu: self.mu,
            lambda_feat: self.lambda_feat,
        }
    }
}

/// One row of the per-round metric trace.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    pub lr: f64,
    pub mode: Mode,
    pub mu: f64,
    pub report: EvalReport,
    /// Matching objective after the round's final pass.
    pub matching_objective: f64,
}

/// Everything a run emits: the per-round trace and the per-pass matching
/// telemetry.
#[derive(Debug, Clone, Default)]
pub struct RunTrace {
    pub rounds: Vec<RoundRecord>,
    pub matching: Vec<MatchingPassRecord>,
}

/// A fully wired federation: server, clients, held-out test set, and the
/// round loop.
pub struct Simulation {
    schema: FeatureSchema,
    cfg: RoundConfig,
    server: ServerState,
    clients: Vec<ClientState>,
    test_set: Vec<Sample>,
    matching_rng: ChaCha8Rng,
    pool: rayon::ThreadPool,
}

impl Simulation {
    /// Build server and clients from partitioned data.
    ///
    /// Clients copy the server's freshly initialized extractors, so local and
    /// global extractors start in consensus; heads are initialized per client
    /// from derived seeds.
    pub fn new(
        schema: FeatureSchema,
        model: &ModelConfig,
        datasets: Vec<ClientDataset>,
        test_set: Vec<Sample>,
        cfg: RoundConfig,
        seed: u64,
        workers: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        if datasets.is_empty() {
            return Err(Error::invalid("need at least one client dataset"));
        }
        if model.head_hidden > model.global_hidden() {
            return Err(Error::Capacity(format!(
                "client heads of width {} cannot match into a global head of width {}",
                model.head_hidden,
                model.global_hidden()
            )));
        }
        let server = ServerState::init(&schema, model, seed)?;
        let clients = datasets
            .into_iter()
            .map(|dataset| {
                let id = dataset.client_id();
                let extractors = dataset
                    .feature_set()
                    .iter()
                    .map(|&d| server.extractor(d).clone())
                    .collect();
                let mut head_rng = ChaCha8Rng::seed_from_u64(seeding::derive(seed, 0x100 + id as u64));
                let head = model.build_head(&schema, dataset.feature_set().len(), &mut head_rng)?;
                ClientState::new(dataset, extractors, head, seeding::derive(seed, 0x1000 + id as u64))
            })
            .collect::<Result<Vec<_>>>()?;
        let workers = workers.max(1);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::invalid(format!("worker pool: {e}")))?;
        Ok(Simulation {
            matching_rng: ChaCha8Rng::seed_from_u64(seeding::derive(seed, 3)),
            schema,
            cfg,
            server,
            clients,
            test_set,
            pool,
        })
    }

    /// Worker count honoring the hardware, capped at the client count.
    pub fn default_workers(num_clients: usize) -> usize {
        let hw = std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1);
        num_clients.clamp(1, hw)
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn server_mut(&mut self) -> &mut ServerState {
        &mut self.server
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn clients_mut(&mut self) -> &mut [ClientState] {
        &mut self.clients
    }

    pub fn config(&self) -> &RoundConfig {
        &self.cfg
    }

    /// The sequential stream driving client selection in matching rounds;
    /// exposed so custom round loops stay on the seeded path.
    pub fn matching_rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.matching_rng
    }

    /// Split borrows for custom round loops: server, clients, and the
    /// matching stream at once.
    pub fn parts_mut(&mut self) -> (&mut ServerState, &mut [ClientState], &mut ChaCha8Rng) {
        (&mut self.server, &mut self.clients, &mut self.matching_rng)
    }

    /// Run all configured rounds and collect the metric trace.
    pub fn run(&mut self) -> Result<RunTrace> {
        let mut trace = RunTrace::default();
        for t in 0..self.cfg.rounds {
            let (record, passes) = self.round(t)?;
            trace.rounds.push(record);
            trace.matching.extend(passes);
        }
        Ok(trace)
    }

    /// One communication round: local updates, extractor aggregation,
    /// matching passes, distribution, evaluation.
    pub fn round(&mut self, t: usize) -> Result<(RoundRecord, Vec<MatchingPassRecord>)> {
        let lr = self.cfg.lr_at(t);
        let weights = self.cfg.prox_weights();

        // Frozen anchors for this round's local problems.
        let anchors = match self.cfg.mode {
            Mode::Prox => {
                let mut list = Vec::with_capacity(self.clients.len());
                for client in &self.clients {
                    let head_anchor = self.server.anchor_head(client.client_id())?;
                    let extractor_anchors = client
                        .feature_set()
                        .iter()
                        .map(|&d| self.server.extractor(d).clone())
                        .collect();
                    list.push(LocalAnchors::new(
                        head_anchor,
                        client.feature_set(),
                        extractor_anchors,
                        &self.schema,
                    )?);
                }
                Some(list)
            }
            Mode::Avg => None,
        };

        // Local updates are independent; run them on the worker pool and
        // rejoin in client order.
        let cfg = &self.cfg;
        self.pool.install(|| -> Result<()> {
            match &anchors {
                Some(anchor_list) => self
                    .clients
                    .par_iter_mut()
                    .zip(anchor_list.par_iter())
                    .try_for_each(|(client, anchor)| {
                        local_update_prox(
                            client,
                            anchor,
                            weights,
                            cfg.local_steps,
                            cfg.batch_size,
                            lr,
                        )
                    }),
                None => self.clients.par_iter_mut().try_for_each(|client| {
                    local_update_avg(client, cfg.local_steps, cfg.batch_size, lr)
                }),
            }
        })?;

        // Local models are scored right after training, before aggregation
        // overwrites them: that is the model a client would deploy.
        let (local_accs, train_loss) = self.evaluate_local()?;

        // Server phases see parameters only.
        let views: Vec<ClientModelView<'_>> = self
            .clients
            .iter()
            .map(|c| ClientModelView {
                client_id: c.client_id(),
                feature_set: c.feature_set(),
                extractors: c.extractors(),
            })
            .collect();
        self.server.aggregate_extractors(&views)?;

        let embedded_heads = self
            .clients
            .iter()
            .map(|c| c.embedded_head(&self.schema))
            .collect::<Result<Vec<_>>>()?;
        let mut passes =
            self.server
                .run_matching(&embedded_heads, self.cfg.matching_passes, &mut self.matching_rng)?;
        for record in &mut passes {
            record.round = t;
        }
        let matching_objective = passes.last().map(|p| p.objective).unwrap_or(0.0);

        let (global_acc, global_loss) = self.evaluate_global()?;

        distribute(&self.server, &mut self.clients, &self.schema)?;

        let report = EvalReport::new(t, local_accs, global_acc, global_loss, train_loss)?;
        Ok((
            RoundRecord {
                round: t,
                lr,
                mode: self.cfg.mode,
                mu: self.cfg.mu,
                report,
                matching_objective,
            },
            passes,
        ))
    }

    /// Per-client accuracy of the current local models over the full test
    /// set, plus mean local train loss.
    pub fn evaluate_local(&self) -> Result<(Vec<f64>, f64)> {
        let mut local_accs = Vec::with_capacity(self.clients.len());
        let mut train_loss = 0.0;
        for client in &self.clients {
            local_accs.push(eval::eval_local(
                client.extractors(),
                client.head(),
                client.feature_set(),
                &self.test_set,
            )?);
            train_loss += client.mean_train_loss()?;
        }
        Ok((local_accs, train_loss / self.clients.len() as f64))
    }

    /// Accuracy and loss of the current matched global model on the test set.
    pub fn evaluate_global(&self) -> Result<(f64, f64)> {
        Ok((
            eval::eval_global(
                self.server.extractors(),
                self.server.global_head().mlp(),
                &self.test_set,
            )?,
            eval::global_loss(
                self.server.extractors(),
                self.server.global_head().mlp(),
                &self.test_set,
            )?,
        ))
    }

    /// Snapshot of the current state's metrics (local models as they stand,
    /// global model as it stands).
    pub fn evaluate(&self, round: usize) -> Result<EvalReport> {
        let (local_accs, train_loss) = self.evaluate_local()?;
        let (global_acc, global_loss) = self.evaluate_global()?;
        EvalReport::new(round, local_accs, global_acc, global_loss, train_loss)
    }
}

/// Redistribute the aggregated models: every client's head becomes its
/// pattern-selected slice of the global head projected onto its owned
/// columns, and every owned extractor becomes the block's global extractor.
pub fn distribute(
    server: &ServerState,
    clients: &mut [ClientState],
    schema: &FeatureSchema,
) -> Result<()> {
    for client in clients.iter_mut() {
        if let Some(anchor) = server.anchor_head(client.client_id())? {
            let head = project_local_head(&anchor, client.feature_set(), schema)?;
            client.set_head(head);
        }
        let owned: Vec<usize> = client.feature_set().to_vec();
        for (pos, d) in owned.into_iter().enumerate() {
            client.extractors_mut()[pos] = server.extractor(d).clone();
        }
    }
    Ok(())
}

/// Embedded heads of all clients, in client order.
pub fn embedded_heads(clients: &[ClientState], schema: &FeatureSchema) -> Result<Vec<Mlp>> {
    clients.iter().map(|c| c.embedded_head(schema)).collect()
}
