//! Round loop: local client training, the aggregation barrier, and
//! per-round ACC/ASR/drift evaluation over benign clients.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{
    self, apply_trigger, average_trigger_sets, AttackConfig, AttackKind, LocalTraining,
    MaliciousRound, TargetMap, Trigger, TriggerSet,
};
use crate::data::{self, ClientShard, Dataset, PartitionConfig};
use crate::diffnet::{Activation, Model};
use crate::error::{Error, Result};
use crate::proto::{
    aggregate, class_means, combined_loss_and_grads, local_prototypes, nearest_prototype_classify,
    proto_drift, ClassPrototype, PrototypeBank,
};
use crate::rng::{tags, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs {
        #[serde(default = "default_blob_classes")]
        num_classes: usize,
        #[serde(default = "default_blob_dim")]
        input_dim: usize,
        #[serde(default = "default_blob_per_class")]
        per_class: usize,
        #[serde(default = "default_blob_spread")]
        spread: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        /// Keep at most this many samples of each class.
        #[serde(default)]
        per_class_limit: Option<usize>,
    },
}

fn default_blob_classes() -> usize {
    10
}
fn default_blob_dim() -> usize {
    16
}
fn default_blob_per_class() -> usize {
    200
}
fn default_blob_spread() -> f64 {
    0.1
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Blobs {
            num_classes: default_blob_classes(),
            input_dim: default_blob_dim(),
            per_class: default_blob_per_class(),
            spread: default_blob_spread(),
        }
    }
}

impl DatasetSpec {
    pub fn load(&self, seed: u64) -> Result<Dataset> {
        match self {
            DatasetSpec::Blobs {
                num_classes,
                input_dim,
                per_class,
                spread,
            } => data::make_blobs(*num_classes, *input_dim, *per_class, *spread, seed),
            DatasetSpec::Idx {
                images,
                labels,
                per_class_limit,
            } => {
                let ds = data::load_idx(images, labels)?;
                Ok(match per_class_limit {
                    Some(n) => ds.truncate_per_class(*n),
                    None => ds,
                })
            }
        }
    }

    /// Makes relative file paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        if let DatasetSpec::Idx { images, labels, .. } = self {
            for p in [images, labels] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }
}

/// Partitioner settings; the seed comes from the experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub p: f64,
    pub q: f64,
    pub std: f64,
    pub test_fraction: f64,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        let d = PartitionConfig::default();
        Self {
            num_clients: d.num_clients,
            p: d.p,
            q: d.q,
            std: d.std,
            test_fraction: d.test_fraction,
        }
    }
}

impl PartitionSpec {
    pub fn with_seed(&self, seed: u64) -> PartitionConfig {
        PartitionConfig {
            num_clients: self.num_clients,
            p: self.p,
            q: self.q,
            std: self.std,
            test_fraction: self.test_fraction,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    /// Extractor layer widths; the last one is the embedding size.
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden: vec![128, 64],
            activation: Activation::Relu,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Predictions from the client's decision head.
    Head,
    /// Nearest global prototype to the client's embedding.
    NearestPrototype,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub partition: PartitionSpec,
    pub model: ModelSpec,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the prototype alignment term in benign training.
    pub lambda: f64,
    pub attack: AttackConfig,
    pub seed: u64,
    /// Evaluate every this many rounds; the last round is always evaluated.
    pub eval_every: usize,
    pub eval_mode: EvalMode,
    /// Worker threads for client execution; 0 picks the machine default.
    pub threads: usize,
    pub out_dir: PathBuf,
    pub dump_prototypes: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            partition: PartitionSpec::default(),
            model: ModelSpec::default(),
            rounds: 200,
            local_epochs: 1,
            batch_size: 4,
            lr: 0.01,
            lambda: 1.0,
            attack: AttackConfig::default(),
            seed: 0,
            eval_every: 1,
            eval_mode: EvalMode::Head,
            threads: 1,
            out_dir: PathBuf::from("runs/latest"),
            dump_prototypes: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.rounds == 0 {
            return bad("rounds must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be a non-negative number");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be a non-negative number");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1");
        }
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return bad("model.hidden must list positive widths");
        }
        self.partition.with_seed(self.seed).validate()?;
        self.attack.validate()
    }

    pub fn malicious_count(&self) -> usize {
        if self.attack.kind == AttackKind::None {
            return 0;
        }
        (self.attack.attack_rate * self.partition.num_clients as f64).round() as usize
    }

    fn training(&self) -> LocalTraining {
        LocalTraining {
            epochs: self.local_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Benign,
    Malicious,
}

pub struct ClientState {
    pub client_id: usize,
    pub role: Role,
    pub model: Model,
    pub shard: ClientShard,
    /// The adversary's learned triggers (malicious clients running trigger
    /// learning only).
    pub triggers: Option<TriggerSet>,
    pub rounds_played: usize,
    /// `(rank, count)` among malicious clients.
    pub position: (usize, usize),
    rng: Stream,
}

impl ClientState {
    pub fn new(client_id: usize, role: Role, model: Model, shard: ClientShard, seed: u64) -> Self {
        Self {
            client_id,
            role,
            model,
            shard,
            triggers: None,
            rounds_played: 0,
            position: (0, 1),
            rng: Stream::derived(seed, tags::CLIENT, client_id as u64),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientMetrics {
    pub client_id: usize,
    pub acc: Option<f64>,
    pub asr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub acc_mean: Option<f64>,
    pub asr_mean: Option<f64>,
    pub proto_drift: Option<f64>,
    pub per_client: Vec<ClientMetrics>,
    pub wall_time: f64,
}

/// Shared, read-only inputs of a round.
pub struct RoundContext<'a> {
    pub dataset: &'a Dataset,
    pub cfg: &'a ExperimentConfig,
}

fn train_benign(
    state: &mut ClientState,
    dataset: &Dataset,
    global: &PrototypeBank,
    cfg: &ExperimentConfig,
) -> Result<Vec<ClassPrototype>> {
    let train = &state.shard.train;
    for _ in 0..cfg.local_epochs {
        let mut order = train.clone();
        state.rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&[f64], usize)> = chunk.iter().map(|&i| (dataset.x(i), dataset.y(i))).collect();
            let (loss, grads) = combined_loss_and_grads(&state.model, &batch, global, cfg.lambda)?;
            if !loss.is_finite() {
                return Err(Error::Divergence("non-finite training loss".into()));
            }
            state.model.sgd_step(&grads, cfg.lr)?;
        }
    }
    local_prototypes(&state.model, &state.shard, dataset)
}

fn client_round(state: &mut ClientState, global: &PrototypeBank, ctx: &RoundContext<'_>) -> Result<Vec<ClassPrototype>> {
    let upload = match state.role {
        Role::Benign => train_benign(state, ctx.dataset, global, ctx.cfg)?,
        Role::Malicious => {
            let mut triggers = state.triggers.take().unwrap_or_default();
            let round = MaliciousRound {
                dataset: ctx.dataset,
                shard: &state.shard,
                global,
                cfg: &ctx.cfg.attack,
                training: ctx.cfg.training(),
                position: state.position,
            };
            let pretrain = state.rounds_played == 0;
            let upload = attack::malicious_round(&mut state.model, &mut triggers, pretrain, &round, &mut state.rng);
            state.triggers = Some(triggers);
            upload?
        }
    };
    state.rounds_played += 1;
    Ok(upload)
}

/// One round of local work on every client against the snapshot `global`.
/// Uploads are returned in client id order.
pub fn run_round(
    states: &mut [ClientState],
    global: &PrototypeBank,
    ctx: &RoundContext<'_>,
    pool: Option<&rayon::ThreadPool>,
) -> Result<Vec<(usize, Vec<ClassPrototype>)>> {
    let work = |s: &mut ClientState| {
        client_round(s, global, ctx)
            .map(|u| (s.client_id, u))
            .map_err(|e| e.in_client(s.client_id))
    };
    let mut uploads: Vec<(usize, Vec<ClassPrototype>)> = match pool {
        Some(pool) => pool.install(|| states.par_iter_mut().map(work).collect::<Result<Vec<_>>>())?,
        None => states.iter_mut().map(work).collect::<Result<Vec<_>>>()?,
    };
    uploads.sort_by_key(|(id, _)| *id);
    Ok(uploads)
}

fn predict(model: &Model, x: &[f64], global: &PrototypeBank, mode: EvalMode) -> Result<usize> {
    match mode {
        EvalMode::Head => model.predict(x),
        EvalMode::NearestPrototype => nearest_prototype_classify(&model.embed(x)?, global),
    }
}

/// Clean accuracy and attack success rate (both in percent) on the
/// client's test set. Samples whose target equals their label, or whose
/// target has no trigger, do not count toward ASR.
pub fn eval_client(
    model: &Model,
    test: &[usize],
    dataset: &Dataset,
    global: &PrototypeBank,
    triggers: &TriggerSet,
    target_map: TargetMap,
    mode: EvalMode,
) -> Result<(Option<f64>, Option<f64>)> {
    let mut correct = 0usize;
    let mut hits = 0usize;
    let mut eligible = 0usize;
    for &i in test {
        let (x, y) = (dataset.x(i), dataset.y(i));
        if predict(model, x, global, mode)? == y {
            correct += 1;
        }
        let t = target_map.target(y, dataset.num_classes);
        if t == y {
            continue;
        }
        if let Some(trigger) = triggers.get(&t) {
            eligible += 1;
            if predict(model, &apply_trigger(trigger, x)?, global, mode)? == t {
                hits += 1;
            }
        }
    }
    let pct = |a: usize, n: usize| (n > 0).then(|| 100.0 * a as f64 / n as f64);
    Ok((pct(correct, test.len()), pct(hits, eligible)))
}

/// Distance between a benign client's clean prototypes and the prototypes of
/// its triggered training data.
fn client_drift(
    state: &ClientState,
    clean: &[ClassPrototype],
    dataset: &Dataset,
    triggers: &TriggerSet,
    target_map: TargetMap,
) -> Result<Option<f64>> {
    let mut triggered = Vec::new();
    for &i in &state.shard.train {
        let y = dataset.y(i);
        let t = target_map.target(y, dataset.num_classes);
        if t == y {
            continue;
        }
        if let Some(trigger) = triggers.get(&t) {
            triggered.push((apply_trigger(trigger, dataset.x(i))?, y));
        }
    }
    let trig = class_means(&state.model, triggered.iter().map(|(x, y)| (x.as_slice(), *y)))?;
    Ok(proto_drift(clean, &trig))
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// A running experiment, advanced one round at a time.
pub struct Simulation {
    cfg: ExperimentConfig,
    dataset: Dataset,
    states: Vec<ClientState>,
    global: PrototypeBank,
    /// Learned triggers shared by the adversary's clients.
    adversary: Option<TriggerSet>,
    patch: TriggerSet,
    pool: Option<rayon::ThreadPool>,
    round: usize,
}

impl Simulation {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let dataset = cfg.dataset.load(cfg.seed)?;
        Self::with_dataset(cfg, dataset)
    }

    pub fn with_dataset(cfg: &ExperimentConfig, dataset: Dataset) -> Result<Self> {
        cfg.validate()?;
        let shards = data::partition_pq(&dataset, &cfg.partition.with_seed(cfg.seed))?;
        let n = shards.len();
        let n_mal = cfg.malicious_count();
        let mut malicious = Stream::derived(cfg.seed, tags::ROLES, 0).choose_distinct(n, n_mal);
        malicious.sort_unstable();

        let mut init_rng = Stream::derived(cfg.seed, tags::MODEL_INIT, 0);
        let init = Model::init(
            dataset.input_dim,
            &cfg.model.hidden,
            dataset.num_classes,
            cfg.model.activation,
            &mut init_rng,
        )?;

        let mut states: Vec<ClientState> = shards
            .into_iter()
            .map(|shard| {
                let id = shard.client_id;
                let role = if malicious.binary_search(&id).is_ok() {
                    Role::Malicious
                } else {
                    Role::Benign
                };
                ClientState::new(id, role, init.clone(), shard, cfg.seed)
            })
            .collect();
        if states.iter().all(|s| s.role == Role::Malicious) {
            return Err(Error::Config("no benign clients left to evaluate".into()));
        }

        let adversary = if !malicious.is_empty() && cfg.attack.learns_triggers() {
            let spaces: Vec<BTreeSet<usize>> = states
                .iter()
                .filter(|s| s.role == Role::Benign)
                .map(|s| s.shard.label_space.clone())
                .collect();
            let targets = attack::build_target_set(&spaces, cfg.attack.target_map, dataset.num_classes)?;
            Some(
                targets
                    .into_iter()
                    .map(|t| (t, Trigger::new(t, dataset.input_dim, cfg.attack.trigger_init_mask_logit)))
                    .collect(),
            )
        } else {
            None
        };
        for (rank, &id) in malicious.iter().enumerate() {
            let s = &mut states[id];
            s.position = (rank, malicious.len());
            s.triggers = adversary.clone();
        }

        let patch = (0..dataset.num_classes)
            .map(|t| {
                (
                    t,
                    Trigger::corner_patch(t, dataset.input_dim, dataset.image_shape, cfg.attack.patch_size, None),
                )
            })
            .collect();

        let pool = if cfg.threads == 1 {
            None
        } else {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(cfg.threads)
                    .build()
                    .map_err(|e| Error::Config(format!("thread pool: {e}")))?,
            )
        };

        Ok(Self {
            cfg: cfg.clone(),
            dataset,
            states,
            global: PrototypeBank::new(),
            adversary,
            patch,
            pool,
            round: 0,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn states(&self) -> &[ClientState] {
        &self.states
    }

    pub fn global(&self) -> &PrototypeBank {
        &self.global
    }

    pub fn round(&self) -> usize {
        self.round
    }

    /// Triggers ASR and drift are measured with.
    pub fn eval_triggers(&self) -> &TriggerSet {
        self.adversary.as_ref().unwrap_or(&self.patch)
    }

    /// Runs the next round; returns its metrics when the round is evaluated.
    pub fn step(&mut self) -> Result<Option<RoundMetrics>> {
        let started = Instant::now();
        self.round += 1;
        let round = self.round;
        let uploads = self.advance().map_err(|e| e.in_round(round))?;
        if !round.is_multiple_of(self.cfg.eval_every) && round != self.cfg.rounds {
            return Ok(None);
        }
        let mut metrics = self.evaluate(&uploads).map_err(|e| e.in_round(round))?;
        metrics.wall_time = started.elapsed().as_secs_f64();
        Ok(Some(metrics))
    }

    /// Local training, then aggregation with carry-forward of absent classes.
    fn advance(&mut self) -> Result<Vec<(usize, Vec<ClassPrototype>)>> {
        let ctx = RoundContext {
            dataset: &self.dataset,
            cfg: &self.cfg,
        };
        let uploads = run_round(&mut self.states, &self.global, &ctx, self.pool.as_ref())?;
        self.global = aggregate(&uploads)?.carry_forward(&self.global);

        if self.adversary.is_some() {
            let copies: Vec<&TriggerSet> = self.states.iter().filter_map(|s| s.triggers.as_ref()).collect();
            let merged = average_trigger_sets(&copies);
            for s in self.states.iter_mut().filter(|s| s.triggers.is_some()) {
                s.triggers = Some(merged.clone());
            }
            self.adversary = Some(merged);
        }
        Ok(uploads)
    }

    fn evaluate(&self, uploads: &[(usize, Vec<ClassPrototype>)]) -> Result<RoundMetrics> {
        let triggers = self.eval_triggers();
        let target_map = self.cfg.attack.target_map;
        let mut per_client = Vec::new();
        let mut drifts = Vec::new();
        for (state, (_, upload)) in self.states.iter().zip(uploads) {
            if state.role != Role::Benign {
                continue;
            }
            let (acc, asr) = eval_client(
                &state.model,
                &state.shard.test,
                &self.dataset,
                &self.global,
                triggers,
                target_map,
                self.cfg.eval_mode,
            )
            .map_err(|e| e.in_client(state.client_id))?;
            per_client.push(ClientMetrics {
                client_id: state.client_id,
                acc,
                asr,
            });
            drifts.push(
                client_drift(state, upload, &self.dataset, triggers, target_map)
                    .map_err(|e| e.in_client(state.client_id))?,
            );
        }
        Ok(RoundMetrics {
            round: self.round,
            acc_mean: mean(per_client.iter().map(|c| c.acc)),
            asr_mean: mean(per_client.iter().map(|c| c.asr)),
            proto_drift: mean(drifts.into_iter()),
            per_client,
            wall_time: 0.0,
        })
    }
}

/// Runs every round of `cfg`, calling `observer` after each evaluated round
/// with its metrics and the global bank.
pub fn run_experiment_with<F>(cfg: &ExperimentConfig, mut observer: F) -> Result<Vec<RoundMetrics>>
where
    F: FnMut(&RoundMetrics, &PrototypeBank) -> Result<()>,
{
    let mut sim = Simulation::new(cfg)?;
    let mut out = Vec::new();
    for _ in 0..cfg.rounds {
        if let Some(m) = sim.step()? {
            log::info!(
                "round {:>4}  acc {}  asr {}  drift {}",
                m.round,
                fmt_opt(m.acc_mean),
                fmt_opt(m.asr_mean),
                fmt_opt(m.proto_drift)
            );
            observer(&m, sim.global())?;
            out.push(m);
        }
    }
    Ok(out)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RoundMetrics>> {
    run_experiment_with(cfg, |_, _| Ok(()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"))
}
