//! Round-based federated transfer learning.
//!
//! Each round the server picks `K` participants at random, sends each of
//! them either the full model (base and head, the first time a client takes
//! part) or only the head, lets them train locally, collects their updated
//! heads and aggregates. Only heads travel back; the base never changes.
//!
//! Messages go through a [`Transport`]. [`InMemoryTransport`] is the only
//! implementation; the trait is the seam for a networked one.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::Serialize;

use crate::aggregate::{Aggregator, GssConfig, LocalUpdate};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{multiclass_metrics, ConfusionMatrix, MetricReport};
use crate::model::{local_update, ClassifierHead, FeatureSet, FrozenBase, HeadShape, LocalTraining};
use crate::param::ParamVector;
use crate::rng::{SeededRng, Stream};

pub type ClientId = usize;

#[derive(Debug, Clone)]
pub enum Message {
    FullModel {
        base: Arc<FrozenBase>,
        head: ParamVector,
    },
    HeadOnly {
        head: ParamVector,
    },
    Update(LocalUpdate),
}

#[derive(Debug, Clone)]
pub struct Envelope {
    pub client: ClientId,
    pub message: Message,
}

/// Server/client message channel.
pub trait Transport {
    fn send_to_client(&mut self, envelope: Envelope) -> Result<()>;
    fn receive_at_client(&mut self, client: ClientId) -> Option<Message>;
    fn send_to_server(&mut self, envelope: Envelope) -> Result<()>;
    /// All uploads received so far, in arrival order.
    fn drain_at_server(&mut self) -> Vec<Envelope>;
}

#[derive(Debug, Default)]
pub struct InMemoryTransport {
    down: BTreeMap<ClientId, VecDeque<Message>>,
    up: VecDeque<Envelope>,
}

impl Transport for InMemoryTransport {
    fn send_to_client(&mut self, envelope: Envelope) -> Result<()> {
        self.down
            .entry(envelope.client)
            .or_default()
            .push_back(envelope.message);
        Ok(())
    }

    fn receive_at_client(&mut self, client: ClientId) -> Option<Message> {
        self.down.get_mut(&client)?.pop_front()
    }

    fn send_to_server(&mut self, envelope: Envelope) -> Result<()> {
        self.up.push_back(envelope);
        Ok(())
    }

    fn drain_at_server(&mut self) -> Vec<Envelope> {
        self.up.drain(..).collect()
    }
}

/// A participant holding a private shard.
#[derive(Debug, Clone)]
pub struct ClientNode {
    id: ClientId,
    shard: Dataset,
    base: Option<Arc<FrozenBase>>,
    features: Option<FeatureSet>,
    local_head: Option<ParamVector>,
    bases_received: usize,
}

impl ClientNode {
    pub fn new(id: ClientId, shard: Dataset) -> Result<Self> {
        if shard.is_empty() {
            return Err(Error::Argument(format!("client {id} has an empty shard")));
        }
        Ok(Self {
            id,
            shard,
            base: None,
            features: None,
            local_head: None,
            bases_received: 0,
        })
    }

    pub fn id(&self) -> ClientId {
        self.id
    }

    pub fn shard(&self) -> &Dataset {
        &self.shard
    }

    pub fn has_base(&self) -> bool {
        self.base.is_some()
    }

    pub fn bases_received(&self) -> usize {
        self.bases_received
    }

    pub fn local_head(&self) -> Option<&ParamVector> {
        self.local_head.as_ref()
    }

    /// Installs a downloaded model. The received head replaces the local one.
    pub fn receive(&mut self, message: Message) -> Result<()> {
        match message {
            Message::FullModel { base, head } => {
                let features = base.features(self.shard.features().view())?;
                self.features = Some(FeatureSet::new(features, self.shard.labels().to_vec())?);
                self.base = Some(base);
                self.bases_received += 1;
                self.local_head = Some(head);
                Ok(())
            }
            Message::HeadOnly { head } => {
                if self.base.is_none() {
                    return Err(Error::Protocol(format!(
                        "client {} received a head before the base model",
                        self.id
                    )));
                }
                self.local_head = Some(head);
                Ok(())
            }
            Message::Update(_) => Err(Error::Protocol(format!(
                "client {} received an upload message",
                self.id
            ))),
        }
    }

    /// Trains the received head on the local shard.
    pub fn train(&mut self, shape: &HeadShape, cfg: &LocalTraining, rng: &mut SeededRng) -> Result<LocalUpdate> {
        let (Some(features), Some(head)) = (&self.features, &self.local_head) else {
            return Err(Error::Protocol(format!(
                "client {} has no model to train",
                self.id
            )));
        };
        let head = ClassifierHead::new(shape.clone(), head.clone())?;
        let (params, samples) = local_update(&head, features, cfg, rng)?;
        self.local_head = Some(params.clone());
        Ok(LocalUpdate {
            client_id: self.id,
            head: params,
            samples,
        })
    }
}

/// Builds one client per partition shard, ids `0..K`.
pub fn clients_from_plan(train: &Dataset, plan: &crate::data::PartitionPlan) -> Result<Vec<ClientNode>> {
    plan.assignments()
        .iter()
        .enumerate()
        .map(|(id, idx)| ClientNode::new(id, train.select(idx)))
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ClientRecord {
    pub has_full_model: bool,
    pub rounds_participated: usize,
}

/// Per-round settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundConfig {
    pub participants: usize,
    pub local: LocalTraining,
    pub aggregator: Aggregator,
    pub gss: GssConfig,
    /// Run participants' local training on the rayon pool.
    pub parallel: bool,
}

impl RoundConfig {
    pub fn validate(&self, clients: usize) -> Result<()> {
        if self.participants == 0 || self.participants > clients {
            return Err(Error::Argument(format!(
                "participants per round ({}) must be between 1 and the client count ({clients})",
                self.participants
            )));
        }
        if self.local.epochs == 0 {
            return Err(Error::Argument("local epochs must be at least 1".into()));
        }
        if !self.local.learning_rate.is_finite() || self.local.learning_rate < 0.0 {
            return Err(Error::Argument(format!(
                "learning rate {} must be finite and nonnegative",
                self.local.learning_rate
            )));
        }
        if self.local.batch_size == 0 {
            return Err(Error::Argument("batch size must be positive".into()));
        }
        if self.aggregator == Aggregator::Fta {
            self.gss.validate()?;
        }
        Ok(())
    }
}

/// What happened in one round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    pub t: usize,
    pub participants: Vec<ClientId>,
    /// Clients that received the base this round.
    pub full_model_to: Vec<ClientId>,
    pub sigma: f64,
    pub val_loss_before: Option<f64>,
    pub val_loss_after: Option<f64>,
    pub objective_evaluations: usize,
    pub gss_iterations: usize,
    pub test_accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
}

/// Server state.
#[derive(Debug, Clone)]
pub struct FederationState {
    seed: u64,
    base: Arc<FrozenBase>,
    shape: HeadShape,
    global_head: ParamVector,
    round: usize,
    registry: BTreeMap<ClientId, ClientRecord>,
    validation: Option<FeatureSet>,
    test: Option<FeatureSet>,
}

impl FederationState {
    pub fn new(seed: u64, base: FrozenBase, head: ClassifierHead) -> Result<Self> {
        Error::check_len(base.feature_dim(), head.shape().fan_in())?;
        Ok(Self {
            seed,
            base: Arc::new(base),
            shape: head.shape().clone(),
            global_head: head.params().clone(),
            round: 0,
            registry: BTreeMap::new(),
            validation: None,
            test: None,
        })
    }

    pub fn register(&mut self, ids: impl IntoIterator<Item = ClientId>) {
        for id in ids {
            self.registry.entry(id).or_default();
        }
    }

    /// Server-held validation set used for the fine-tuning objective.
    pub fn with_validation(mut self, data: &Dataset) -> Result<Self> {
        self.validation = Some(self.encode(data)?);
        Ok(self)
    }

    pub fn with_test(mut self, data: &Dataset) -> Result<Self> {
        self.test = Some(self.encode(data)?);
        Ok(self)
    }

    fn encode(&self, data: &Dataset) -> Result<FeatureSet> {
        if data.is_empty() {
            return Err(Error::Argument("evaluation set is empty".into()));
        }
        FeatureSet::new(self.base.features(data.features().view())?, data.labels().to_vec())
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn base(&self) -> &FrozenBase {
        &self.base
    }

    pub fn shape(&self) -> &HeadShape {
        &self.shape
    }

    pub fn global_head(&self) -> &ParamVector {
        &self.global_head
    }

    pub fn head(&self) -> ClassifierHead {
        ClassifierHead::new(self.shape.clone(), self.global_head.clone()).expect("shape checked")
    }

    /// Completed rounds.
    pub fn round(&self) -> usize {
        self.round
    }

    pub fn registry(&self) -> &BTreeMap<ClientId, ClientRecord> {
        &self.registry
    }

    pub fn client_ids(&self) -> Vec<ClientId> {
        self.registry.keys().copied().collect()
    }

    pub fn validation_loss(&self, head: &ParamVector) -> Result<Option<f64>> {
        let Some(val) = &self.validation else {
            return Ok(None);
        };
        let head = ClassifierHead::new(self.shape.clone(), head.clone())?;
        head.loss(&val.batch()?).map(Some)
    }

    /// Confusion matrix and macro report of the global head on the test set.
    pub fn evaluate_test(&self) -> Result<Option<(ConfusionMatrix, MetricReport)>> {
        let Some(test) = &self.test else {
            return Ok(None);
        };
        let predicted = self.head().predict(test.features.view())?;
        let cm = ConfusionMatrix::from_predictions(&test.labels, &predicted, self.shape.classes())?;
        let report = multiclass_metrics(&cm)?;
        Ok(Some((cm, report)))
    }

    /// Message for `client` in the upcoming round. A client that never
    /// received the base (and every client in round 1) gets the full model.
    pub fn dispatch_model(&mut self, client: ClientId) -> Result<Message> {
        let t = self.round + 1;
        let record = self
            .registry
            .get_mut(&client)
            .ok_or_else(|| Error::Protocol(format!("unknown client {client}")))?;
        let head = self.global_head.clone();
        if t == 1 || !record.has_full_model {
            record.has_full_model = true;
            Ok(Message::FullModel {
                base: Arc::clone(&self.base),
                head,
            })
        } else {
            Ok(Message::HeadOnly { head })
        }
    }
}

/// `k` distinct ids drawn uniformly without replacement, sorted ascending.
/// The draw depends only on `(seed, t)` and the pool.
pub fn select_participants(seed: u64, t: usize, pool: &[ClientId], k: usize) -> Result<Vec<ClientId>> {
    if k > pool.len() {
        return Err(Error::Argument(format!(
            "cannot select {k} participants from {} clients",
            pool.len()
        )));
    }
    let mut rng = SeededRng::stream(seed, Stream::Selection, &[t as u64]);
    let mut chosen: Vec<ClientId> = sample(&mut rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Random stream for `client`'s local training in round `t`.
pub fn client_rng(seed: u64, client: ClientId, t: usize) -> SeededRng {
    SeededRng::stream(seed, Stream::Client, &[client as u64, t as u64])
}

/// Runs one round over `clients` (indexed by id) with an in-memory transport.
pub fn run_round(state: &mut FederationState, clients: &mut [ClientNode], cfg: &RoundConfig) -> Result<RoundRecord> {
    run_round_with(state, clients, cfg, &mut InMemoryTransport::default())
}

pub fn run_round_with(
    state: &mut FederationState,
    clients: &mut [ClientNode],
    cfg: &RoundConfig,
    transport: &mut impl Transport,
) -> Result<RoundRecord> {
    cfg.validate(clients.len())?;
    if cfg.aggregator == Aggregator::Fta && state.validation.is_none() {
        return Err(Error::Argument("FTA needs a server-held validation set".into()));
    }
    for (i, c) in clients.iter().enumerate() {
        if c.id != i || !state.registry.contains_key(&c.id) {
            return Err(Error::Protocol(format!(
                "client at position {i} has id {} or is not registered",
                c.id
            )));
        }
    }
    let t = state.round + 1;
    let participants = select_participants(state.seed, t, &state.client_ids(), cfg.participants)?;

    let mut full_model_to = Vec::new();
    for &id in &participants {
        let message = state.dispatch_model(id)?;
        if matches!(message, Message::FullModel { .. }) {
            full_model_to.push(id);
        }
        transport.send_to_client(Envelope { client: id, message })?;
    }

    let mut inbox = Vec::with_capacity(participants.len());
    for &id in &participants {
        let message = transport
            .receive_at_client(id)
            .ok_or_else(|| Error::Protocol(format!("client {id}: no model delivered")))?;
        inbox.push((id, message));
    }

    let shape = state.shape.clone();
    let seed = state.seed;
    let work = |client: &mut ClientNode, message: Message| -> Result<LocalUpdate> {
        client.receive(message)?;
        let mut rng = client_rng(seed, client.id, t);
        client.train(&shape, &cfg.local, &mut rng)
    };
    let mut selected: Vec<(&mut ClientNode, Message)> = Vec::with_capacity(inbox.len());
    let mut inbox = inbox.into_iter().peekable();
    for client in clients.iter_mut() {
        if inbox.peek().is_some_and(|(id, _)| *id == client.id) {
            let (_, message) = inbox.next().expect("peeked");
            selected.push((client, message));
        }
    }
    let outcomes: Vec<(ClientId, Result<LocalUpdate>)> = if cfg.parallel {
        selected
            .into_par_iter()
            .map(|(c, m)| (c.id, work(c, m)))
            .collect()
    } else {
        selected.into_iter().map(|(c, m)| (c.id, work(c, m))).collect()
    };
    for (id, outcome) in outcomes {
        let update = outcome.map_err(|e| Error::Protocol(format!("client {id} failed: {e}")))?;
        transport.send_to_server(Envelope {
            client: id,
            message: Message::Update(update),
        })?;
    }

    let mut updates = Vec::with_capacity(participants.len());
    for env in transport.drain_at_server() {
        match env.message {
            Message::Update(u) if u.client_id == env.client => updates.push(u),
            _ => {
                return Err(Error::Protocol(format!(
                    "unexpected upload from client {}",
                    env.client
                )))
            }
        }
    }
    updates.sort_by_key(|u| u.client_id);

    let val_loss_before = state.validation_loss(&state.global_head)?;
    let result = {
        let state_ref = &*state;
        cfg.aggregator.aggregate(
            &state.global_head,
            &updates,
            |candidate| {
                state_ref
                    .validation_loss(candidate)?
                    .ok_or_else(|| Error::Argument("no validation set".into()))
            },
            &cfg.gss,
        )?
    };
    state.global_head = result.new_head;
    state.round = t;
    for &id in &participants {
        if let Some(r) = state.registry.get_mut(&id) {
            r.rounds_participated += 1;
        }
    }
    let val_loss_after = state.validation_loss(&state.global_head)?;
    let test = state.evaluate_test()?;
    Ok(RoundRecord {
        t,
        participants,
        full_model_to,
        sigma: result.sigma,
        val_loss_before,
        val_loss_after,
        objective_evaluations: result.evaluations.len(),
        gss_iterations: result.iterations,
        test_accuracy: test.as_ref().and_then(|(_, r)| r.accuracy),
        macro_f1: test.as_ref().and_then(|(_, r)| r.class_mean_f1),
    })
}

/// Records of a full training run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingHistory {
    pub records: Vec<RoundRecord>,
    pub final_head: ParamVector,
    pub final_confusion: Option<ConfusionMatrix>,
    pub final_report: Option<MetricReport>,
}

impl TrainingHistory {
    /// First round whose test accuracy reaches `target`, or `T + 1`.
    pub fn rounds_to_target(&self, target: f64) -> usize {
        self.records
            .iter()
            .find(|r| r.test_accuracy.is_some_and(|a| a >= target))
            .map_or(self.records.len() + 1, |r| r.t)
    }
}

/// `rounds` sequential rounds. The final model is the state's base plus
/// [`TrainingHistory::final_head`].
pub fn run_training(
    state: &mut FederationState,
    clients: &mut [ClientNode],
    cfg: &RoundConfig,
    rounds: usize,
) -> Result<TrainingHistory> {
    if rounds == 0 {
        return Err(Error::Argument("need at least one round".into()));
    }
    let mut records = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let round = state.round + 1;
        let record = run_round(state, clients, cfg).map_err(|e| Error::Round {
            round,
            source: Box::new(e),
        })?;
        records.push(record);
    }
    let test = state.evaluate_test()?;
    let (final_confusion, final_report) = match test {
        Some((cm, r)) => (Some(cm), Some(r)),
        None => (None, None),
    };
    Ok(TrainingHistory {
        records,
        final_head: state.global_head.clone(),
        final_confusion,
        final_report,
    })
}
