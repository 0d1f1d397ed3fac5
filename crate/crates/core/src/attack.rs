//! Adversarial machinery: triggers and their optimization, attack-value
//! sample selection, prototype flipping, the backdoor training loss, and the
//! baseline attacks used for comparison.
//!
//! A trigger blends a pattern into the input through a mask,
//! `T(x) = (1 - M) * x + M * delta`, with `M = logistic(mask_logits)` and
//! `delta = logistic(delta_params)` so both stay in range while being
//! optimized by plain gradient descent.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{ClientShard, Dataset};
use crate::diffnet::{ce_with_grad, distance, distance_with_grad, dot, Gradients, Model};
use crate::error::{Error, Result};
use crate::proto::{class_means, local_prototypes, ClassPrototype, PrototypeBank};
use crate::rng::Stream;

/// Logit used for mask/pattern entries that should be exactly on or off.
const SATURATED: f64 = 50.0;

#[inline]
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trigger {
    pub target_label: usize,
    pub delta_params: Vec<f64>,
    pub mask_logits: Vec<f64>,
}

/// One trigger per target label.
pub type TriggerSet = BTreeMap<usize, Trigger>;

impl Trigger {
    pub fn new(target_label: usize, input_dim: usize, mask_logit: f64) -> Self {
        Self {
            target_label,
            delta_params: vec![0.0; input_dim],
            mask_logits: vec![mask_logit; input_dim],
        }
    }

    /// White square patch in the bottom-right corner of the image (or the
    /// last `size * size` features when the input is not an image). With
    /// `fragment = Some((part, parts))` only every `parts`-th patch pixel
    /// starting at `part` is kept.
    pub fn corner_patch(
        target_label: usize,
        input_dim: usize,
        image_shape: Option<(usize, usize)>,
        size: usize,
        fragment: Option<(usize, usize)>,
    ) -> Self {
        let pixels = patch_pixels(input_dim, image_shape, size);
        let keep: Vec<usize> = match fragment {
            Some((_, parts)) if parts <= 1 => pixels,
            Some((part, parts)) => {
                let mine: Vec<usize> = pixels
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| j % parts == part % parts)
                    .map(|(_, &p)| p)
                    .collect();
                if mine.is_empty() {
                    vec![pixels[part % pixels.len()]]
                } else {
                    mine
                }
            }
            None => pixels,
        };
        let mut t = Self {
            target_label,
            delta_params: vec![SATURATED; input_dim],
            mask_logits: vec![-SATURATED; input_dim],
        };
        for p in keep {
            t.mask_logits[p] = SATURATED;
        }
        t
    }

    pub fn mask(&self) -> Vec<f64> {
        self.mask_logits.iter().map(|&z| logistic(z)).collect()
    }

    pub fn pattern(&self) -> Vec<f64> {
        self.delta_params.iter().map(|&z| logistic(z)).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.mask_logits.len()
    }
}

fn patch_pixels(input_dim: usize, image_shape: Option<(usize, usize)>, size: usize) -> Vec<usize> {
    match image_shape {
        Some((rows, cols)) if rows >= size && cols >= size && rows * cols == input_dim => {
            let mut px = Vec::with_capacity(size * size);
            for r in rows - size..rows {
                for c in cols - size..cols {
                    px.push(r * cols + c);
                }
            }
            px
        }
        _ => (input_dim.saturating_sub(size * size)..input_dim).collect(),
    }
}

/// `(1 - M) * x + M * delta`.
pub fn apply_trigger(trigger: &Trigger, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != trigger.input_dim() || trigger.delta_params.len() != trigger.input_dim() {
        return Err(Error::Input(format!(
            "trigger width {} does not match input width {}",
            trigger.input_dim(),
            x.len()
        )));
    }
    Ok(x.iter()
        .zip(&trigger.mask_logits)
        .zip(&trigger.delta_params)
        .map(|((&xi, &m), &d)| {
            let m = logistic(m);
            (1.0 - m) * xi + m * logistic(d)
        })
        .collect())
}

/// Triggers with the same target label are combined by averaging their
/// parameters; sets are visited in the given order.
pub fn average_trigger_sets(sets: &[&TriggerSet]) -> TriggerSet {
    let mut sums: TriggerSet = BTreeMap::new();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for set in sets {
        for (k, t) in set.iter() {
            *counts.entry(*k).or_insert(0) += 1;
            match sums.get_mut(k) {
                Some(acc) => {
                    for (a, b) in acc.delta_params.iter_mut().zip(&t.delta_params) {
                        *a += b;
                    }
                    for (a, b) in acc.mask_logits.iter_mut().zip(&t.mask_logits) {
                        *a += b;
                    }
                }
                None => {
                    sums.insert(*k, t.clone());
                }
            }
        }
    }
    for (k, t) in sums.iter_mut() {
        let n = counts[k] as f64;
        t.delta_params.iter_mut().for_each(|v| *v /= n);
        t.mask_logits.iter_mut().for_each(|v| *v /= n);
    }
    sums
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    StaticTrigger,
    DbaFragments,
    ProtoScale,
    Bapfl,
}

impl std::str::FromStr for AttackKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown attack kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipStrategy {
    /// Reflection about the projection onto the global prototype.
    Pfs,
    /// Negation through the origin.
    Obf,
    /// Point reflection through the global prototype.
    Gpf,
}

impl std::str::FromStr for FlipStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_lowercase()))
            .map_err(|_| Error::Config(format!("unknown flip strategy `{s}`")))
    }
}

/// Maps a true label to the attacker's target label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMap {
    /// `y -> (num_classes - 1) - y`, i.e. `9 - y` for ten classes.
    Mirror,
    Constant(usize),
}

impl TargetMap {
    pub fn target(&self, y: usize, num_classes: usize) -> usize {
        match *self {
            TargetMap::Mirror => num_classes - 1 - y,
            TargetMap::Constant(t) => t,
        }
    }
}

/// How many attack-value-ranked samples to poison.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopK {
    /// `ceil(alpha * |D|)`.
    Auto,
    Count(usize),
    Fraction(f64),
}

impl TopK {
    pub fn resolve(&self, alpha: f64, local_size: usize) -> usize {
        let k = match *self {
            TopK::Auto => (alpha * local_size as f64).ceil() as usize,
            TopK::Count(n) => n,
            TopK::Fraction(f) => (f * local_size as f64).ceil() as usize,
        };
        k.max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// Fraction of clients under adversary control.
    pub attack_rate: f64,
    /// Weight of the backdoor term in the malicious training loss.
    pub alpha: f64,
    pub target_map: TargetMap,
    pub top_k: TopK,
    pub flip_strategy: FlipStrategy,
    /// Learn one trigger per target label. When false the fixed corner
    /// patch is used instead (prototype poisoning without trigger learning).
    pub tom: bool,
    pub trigger_pretrain_steps: usize,
    pub trigger_steps_per_round: usize,
    pub trigger_lr: f64,
    pub trigger_init_mask_logit: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// `proto_scale` multiplier.
    pub scale_factor: f64,
    /// Multiplier on the counts malicious clients report. 1 means honest.
    pub count_amplification: f64,
    pub patch_size: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            kind: AttackKind::None,
            attack_rate: 0.2,
            alpha: 0.75,
            target_map: TargetMap::Mirror,
            top_k: TopK::Auto,
            flip_strategy: FlipStrategy::Pfs,
            tom: true,
            trigger_pretrain_steps: 50,
            trigger_steps_per_round: 1,
            trigger_lr: 200.0,
            trigger_init_mask_logit: -3.0,
            lambda1: 0.1,
            lambda2: 0.01,
            lambda3: 0.001,
            scale_factor: 5.0,
            count_amplification: 1.0,
            patch_size: 3,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("attack.{m}")));
        if !(0.0..1.0).contains(&self.attack_rate) {
            return bad("attack_rate must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if [self.lambda1, self.lambda2, self.lambda3]
            .iter()
            .any(|l| !(*l >= 0.0 && l.is_finite()))
        {
            return bad("lambda1..lambda3 must be non-negative");
        }
        if !(self.trigger_lr >= 0.0 && self.trigger_lr.is_finite()) {
            return bad("trigger_lr must be non-negative");
        }
        if !self.scale_factor.is_finite() {
            return bad("scale_factor must be finite");
        }
        if !(self.count_amplification >= 1.0 && self.count_amplification.is_finite()) {
            return bad("count_amplification must be at least 1");
        }
        match self.top_k {
            TopK::Count(0) => return bad("top_k count must be at least 1"),
            TopK::Fraction(f) if !(f > 0.0 && f <= 1.0) => {
                return bad("top_k fraction must lie in (0, 1]")
            }
            _ => {}
        }
        if self.patch_size == 0 {
            return bad("patch_size must be positive");
        }
        Ok(())
    }

    pub fn stealth(&self) -> StealthWeights {
        StealthWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
        }
    }

    /// Whether malicious clients learn their triggers.
    pub fn learns_triggers(&self) -> bool {
        self.kind == AttackKind::Bapfl && self.tom
    }
}

/// Target label set: the union of the benign label spaces restricted to
/// labels the target map can produce.
pub fn build_target_set(
    benign_label_spaces: &[BTreeSet<usize>],
    target_map: TargetMap,
    num_classes: usize,
) -> Result<BTreeSet<usize>> {
    let union: BTreeSet<usize> = benign_label_spaces.iter().flatten().copied().collect();
    let reachable: BTreeSet<usize> = (0..num_classes)
        .map(|y| target_map.target(y, num_classes))
        .collect();
    let set: BTreeSet<usize> = union.intersection(&reachable).copied().collect();
    if set.is_empty() {
        return Err(Error::AttackConfig(
            "no target label is held by any benign client".into(),
        ));
    }
    Ok(set)
}

/// Distance between the triggered sample's embedding and the global
/// prototype of its true class; `+inf` when that prototype does not exist.
pub fn attack_value(
    model: &Model,
    x_triggered: &[f64],
    global: &PrototypeBank,
    y_true: usize,
) -> Result<f64> {
    match global.get(y_true) {
        Some(p) => Ok(distance(&model.embed(x_triggered)?, p)),
        None => Ok(f64::INFINITY),
    }
}

/// Ids of the `k` largest values, ties broken toward the lower id.
pub fn select_top_k(values: &[(usize, f64)], k: usize) -> Vec<usize> {
    let mut sorted: Vec<(usize, f64)> = values.to_vec();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    sorted.into_iter().take(k).map(|(id, _)| id).collect()
}

/// Poisoned prototype for one class. Without a usable global prototype
/// (absent, or zero under PFS) the origin flip is used.
pub fn flip_prototype(p_tr: &[f64], p_bar: Option<&[f64]>, strategy: FlipStrategy) -> Vec<f64> {
    let obf = || p_tr.iter().map(|v| -v).collect::<Vec<f64>>();
    match (strategy, p_bar) {
        (FlipStrategy::Obf, _) => obf(),
        (_, None) => {
            log::debug!("no global prototype for flip; using origin flip");
            obf()
        }
        (FlipStrategy::Gpf, Some(g)) => g.iter().zip(p_tr).map(|(g, t)| 2.0 * g - t).collect(),
        (FlipStrategy::Pfs, Some(g)) => {
            let gg = dot(g, g);
            if gg == 0.0 {
                log::debug!("zero global prototype under PFS; using origin flip");
                return obf();
            }
            let coef = dot(g, p_tr) / gg;
            g.iter().zip(p_tr).map(|(g, t)| 2.0 * coef * g - t).collect()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StealthWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriggerGrads {
    pub delta_params: Vec<f64>,
    pub mask_logits: Vec<f64>,
}

/// Trigger objective for a frozen model:
/// `mean_x [CE(f(T(x)), t) + l1 * ||phi(T(x)) - P[t]||] + l2 * ||M||_1 + l3 * ||delta||_2`.
/// The alignment term is skipped when the global bank has no prototype for
/// the target.
pub fn trigger_loss_and_grads(
    model: &Model,
    trigger: &Trigger,
    batch: &[&[f64]],
    global: &PrototypeBank,
    weights: StealthWeights,
) -> Result<(f64, TriggerGrads)> {
    if batch.is_empty() {
        return Err(Error::Input("empty trigger batch".into()));
    }
    let dim = trigger.input_dim();
    let target = trigger.target_label;
    let mask = trigger.mask();
    let pattern = trigger.pattern();
    let proto = global.get(target);
    let scale = 1.0 / batch.len() as f64;

    let mut loss = 0.0;
    let mut d_mask = vec![0.0; dim];
    let mut d_pattern = vec![0.0; dim];
    let zero_embed = vec![0.0; model.embed_dim()];
    let mut d_input = Vec::with_capacity(dim);
    for &x in batch {
        let triggered = apply_trigger(trigger, x)?;
        let trace = model.forward(&triggered)?;
        let (ce, mut d_logits) = ce_with_grad(&trace.logits, target)?;
        loss += ce;
        d_logits.iter_mut().for_each(|d| *d *= scale);
        let d_embed = match proto {
            Some(p) if weights.lambda1 > 0.0 => {
                let (dist, mut g) = distance_with_grad(trace.embedding(), p);
                loss += weights.lambda1 * dist;
                g.iter_mut().for_each(|v| *v *= weights.lambda1 * scale);
                g
            }
            _ => zero_embed.clone(),
        };
        model.backward_into(&trace, &d_logits, &d_embed, None, Some(&mut d_input))?;
        for i in 0..dim {
            d_mask[i] += d_input[i] * (pattern[i] - x[i]);
            d_pattern[i] += d_input[i] * mask[i];
        }
    }
    loss *= scale;

    let mask_l1: f64 = mask.iter().sum();
    let pattern_norm = pattern.iter().map(|v| v * v).sum::<f64>().sqrt();
    loss += weights.lambda2 * mask_l1 + weights.lambda3 * pattern_norm;

    let mask_logits = (0..dim)
        .map(|i| (d_mask[i] + weights.lambda2) * mask[i] * (1.0 - mask[i]))
        .collect();
    let delta_params = (0..dim)
        .map(|i| {
            let reg = if pattern_norm > 0.0 {
                weights.lambda3 * pattern[i] / pattern_norm
            } else {
                0.0
            };
            (d_pattern[i] + reg) * pattern[i] * (1.0 - pattern[i])
        })
        .collect();
    Ok((
        loss,
        TriggerGrads {
            delta_params,
            mask_logits,
        },
    ))
}

/// Loss trajectory of one trigger during [`train_triggers`].
#[derive(Clone, Debug, PartialEq)]
pub struct TriggerTrace {
    pub target_label: usize,
    pub losses: Vec<f64>,
}

/// `steps` full-batch gradient steps per trigger. Each trigger is trained on
/// the local samples whose label differs from its target.
pub fn train_triggers(
    model: &Model,
    global: &PrototypeBank,
    triggers: &mut TriggerSet,
    samples: &[(&[f64], usize)],
    steps: usize,
    lr: f64,
    weights: StealthWeights,
) -> Result<Vec<TriggerTrace>> {
    let mut traces = Vec::with_capacity(triggers.len());
    for (&target, trigger) in triggers.iter_mut() {
        let batch: Vec<&[f64]> = samples
            .iter()
            .filter(|(_, y)| *y != target)
            .map(|(x, _)| *x)
            .collect();
        let mut losses = Vec::with_capacity(steps);
        if batch.is_empty() {
            traces.push(TriggerTrace {
                target_label: target,
                losses,
            });
            continue;
        }
        for _ in 0..steps {
            let (loss, grads) = trigger_loss_and_grads(model, trigger, &batch, global, weights)?;
            if !loss.is_finite()
                || grads
                    .delta_params
                    .iter()
                    .chain(&grads.mask_logits)
                    .any(|g| !g.is_finite())
            {
                return Err(Error::Divergence(format!(
                    "trigger for target label {target} produced a non-finite loss"
                )));
            }
            for (p, g) in trigger.delta_params.iter_mut().zip(&grads.delta_params) {
                *p -= lr * g;
            }
            for (p, g) in trigger.mask_logits.iter_mut().zip(&grads.mask_logits) {
                *p -= lr * g;
            }
            losses.push(loss);
        }
        traces.push(TriggerTrace {
            target_label: target,
            losses,
        });
    }
    Ok(traces)
}

/// A triggered training sample: input, poisoned label, original class.
#[derive(Clone, Debug, PartialEq)]
pub struct PoisonedSample {
    pub x: Vec<f64>,
    pub target: usize,
    pub clean_class: usize,
}

/// `(1 - alpha) * mean CE(clean) + alpha * mean CE(poisoned)`, gradients with
/// respect to the model only.
pub fn backdoor_loss_and_grads(
    model: &Model,
    clean: &[(&[f64], usize)],
    poisoned: &[PoisonedSample],
    alpha: f64,
) -> Result<(f64, Gradients)> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::AttackConfig(format!("alpha {alpha} outside [0, 1]")));
    }
    if alpha > 0.0 && poisoned.is_empty() {
        return Err(Error::AttackConfig(
            "poisoning ratio is positive but no samples were selected".into(),
        ));
    }
    if alpha < 1.0 && clean.is_empty() {
        return Err(Error::Input("empty clean batch".into()));
    }
    let mut grads = Gradients::zeros_like(model);
    let mut loss = 0.0;
    let zero_embed = vec![0.0; model.embed_dim()];
    let mut accumulate = |x: &[f64], y: usize, weight: f64| -> Result<f64> {
        let trace = model.forward(x)?;
        let (ce, mut d_logits) = ce_with_grad(&trace.logits, y)?;
        d_logits.iter_mut().for_each(|d| *d *= weight);
        model.backward_into(&trace, &d_logits, &zero_embed, Some(&mut grads), None)?;
        Ok(ce * weight)
    };
    if alpha < 1.0 {
        let w = (1.0 - alpha) / clean.len() as f64;
        for &(x, y) in clean {
            loss += accumulate(x, y, w)?;
        }
    }
    if alpha > 0.0 {
        let w = alpha / poisoned.len() as f64;
        for p in poisoned {
            loss += accumulate(&p.x, p.target, w)?;
        }
    }
    Ok((loss, grads))
}

/// Triggered versions of the given training samples. Samples whose target
/// equals their label, or whose target has no trigger, are skipped.
pub fn poison_samples(
    dataset: &Dataset,
    ids: &[usize],
    triggers: &TriggerSet,
    target_map: TargetMap,
) -> Result<Vec<(usize, PoisonedSample)>> {
    let mut out = Vec::with_capacity(ids.len());
    for &i in ids {
        let y = dataset.y(i);
        let t = target_map.target(y, dataset.num_classes);
        if t == y {
            continue;
        }
        if let Some(trigger) = triggers.get(&t) {
            out.push((
                i,
                PoisonedSample {
                    x: apply_trigger(trigger, dataset.x(i))?,
                    target: t,
                    clean_class: y,
                },
            ));
        }
    }
    Ok(out)
}

/// Backdoor objective over a whole shard: every training sample is clean
/// data, `selected_ids` (dataset indices) are poisoned.
pub fn backdoor_loss_for_shard(
    model: &Model,
    dataset: &Dataset,
    shard: &ClientShard,
    triggers: &TriggerSet,
    alpha: f64,
    target_map: TargetMap,
    selected_ids: &[usize],
) -> Result<(f64, Gradients)> {
    let clean: Vec<(&[f64], usize)> = shard.train.iter().map(|&i| (dataset.x(i), dataset.y(i))).collect();
    let poisoned: Vec<PoisonedSample> = poison_samples(dataset, selected_ids, triggers, target_map)?
        .into_iter()
        .map(|(_, p)| p)
        .collect();
    backdoor_loss_and_grads(model, &clean, &poisoned, alpha)
}

/// Trigger prototypes per clean class, flipped against the global bank.
pub fn poisoned_prototypes(
    model: &Model,
    groups: &BTreeMap<usize, Vec<Vec<f64>>>,
    global: &PrototypeBank,
    strategy: FlipStrategy,
) -> Result<Vec<ClassPrototype>> {
    let samples = groups
        .iter()
        .flat_map(|(&k, xs)| xs.iter().map(move |x| (x.as_slice(), k)));
    let trigger_protos = class_means(model, samples)?;
    Ok(trigger_protos
        .into_iter()
        .map(|p| {
            if strategy != FlipStrategy::Obf && global.get(p.class_id).is_none() {
                log::debug!("class {} has no global prototype; origin flip", p.class_id);
            }
            ClassPrototype {
                vector: flip_prototype(&p.vector, global.get(p.class_id), strategy),
                ..p
            }
        })
        .collect())
}

/// Local training hyperparameters shared by benign and malicious clients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

/// Everything a malicious client sees during one local round.
pub struct MaliciousRound<'a> {
    pub dataset: &'a Dataset,
    pub shard: &'a ClientShard,
    pub global: &'a PrototypeBank,
    pub cfg: &'a AttackConfig,
    pub training: LocalTraining,
    /// `(rank, count)` of this client among the malicious ones.
    pub position: (usize, usize),
}

/// Runs one local round for a compromised client and returns its upload.
/// `triggers` holds the adversary's learned triggers for `bapfl` with trigger
/// learning enabled; other attacks use the fixed corner patch.
pub fn malicious_round(
    model: &mut Model,
    triggers: &mut TriggerSet,
    pretrain: bool,
    ctx: &MaliciousRound<'_>,
    rng: &mut Stream,
) -> Result<Vec<ClassPrototype>> {
    let cfg = ctx.cfg;
    let ds = ctx.dataset;
    let num_classes = ds.num_classes;
    let local: Vec<(&[f64], usize)> = ctx.shard.train.iter().map(|&i| (ds.x(i), ds.y(i))).collect();

    let patch_triggers = |fragment: Option<(usize, usize)>| -> TriggerSet {
        (0..num_classes)
            .map(|t| {
                (
                    t,
                    Trigger::corner_patch(t, ds.input_dim, ds.image_shape, cfg.patch_size, fragment),
                )
            })
            .collect()
    };

    let active: TriggerSet = match cfg.kind {
        AttackKind::None => {
            return Err(Error::AttackConfig("malicious client with attack kind none".into()))
        }
        AttackKind::Bapfl if cfg.tom => {
            if pretrain && cfg.trigger_pretrain_steps > 0 {
                train_triggers(
                    model,
                    ctx.global,
                    triggers,
                    &local,
                    cfg.trigger_pretrain_steps,
                    cfg.trigger_lr,
                    cfg.stealth(),
                )?;
            }
            train_triggers(
                model,
                ctx.global,
                triggers,
                &local,
                cfg.trigger_steps_per_round,
                cfg.trigger_lr,
                cfg.stealth(),
            )?;
            triggers.clone()
        }
        AttackKind::DbaFragments => patch_triggers(Some(ctx.position)),
        _ => patch_triggers(None),
    };

    // Candidate pool: every training position whose sample can be poisoned.
    let candidates = poison_samples(ds, &ctx.shard.train, &active, cfg.target_map)?;
    let k = cfg
        .top_k
        .resolve(cfg.alpha, ctx.shard.train.len())
        .min(candidates.len());

    let selected: Vec<PoisonedSample> = if candidates.is_empty() || cfg.alpha == 0.0 {
        Vec::new()
    } else if cfg.kind == AttackKind::Bapfl {
        let values = candidates
            .iter()
            .enumerate()
            .map(|(pos, (_, p))| Ok((pos, attack_value(model, &p.x, ctx.global, p.clean_class)?)))
            .collect::<Result<Vec<_>>>()?;
        select_top_k(&values, k)
            .into_iter()
            .map(|pos| candidates[pos].1.clone())
            .collect()
    } else {
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        rng.shuffle(&mut order);
        order.truncate(k);
        order.sort_unstable();
        order.into_iter().map(|pos| candidates[pos].1.clone()).collect()
    };

    let alpha = if selected.is_empty() { 0.0 } else { cfg.alpha };
    train_backdoor(model, &local, &selected, alpha, ctx.training, rng)?;

    let mut upload = match cfg.kind {
        AttackKind::Bapfl => {
            let mut groups: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
            for p in &selected {
                groups.entry(p.clean_class).or_default().push(p.x.clone());
            }
            poisoned_prototypes(model, &groups, ctx.global, cfg.flip_strategy)?
        }
        AttackKind::ProtoScale => {
            let mut protos = local_prototypes(model, ctx.shard, ds)?;
            for p in protos.iter_mut() {
                p.vector.iter_mut().for_each(|v| *v *= cfg.scale_factor);
            }
            protos
        }
        _ => local_prototypes(model, ctx.shard, ds)?,
    };
    if cfg.count_amplification > 1.0 {
        for p in upload.iter_mut() {
            p.count = (p.count as f64 * cfg.count_amplification).round() as usize;
        }
    }
    Ok(upload)
}

/// Minibatch SGD on the backdoor objective. Clean batches follow a shuffled
/// pass over the local data; each is paired with an equally sized slice of
/// the poisoned set, cycled.
fn train_backdoor(
    model: &mut Model,
    local: &[(&[f64], usize)],
    poisoned: &[PoisonedSample],
    alpha: f64,
    training: LocalTraining,
    rng: &mut Stream,
) -> Result<()> {
    if local.is_empty() {
        return Ok(());
    }
    let mut poison_order: Vec<usize> = (0..poisoned.len()).collect();
    let mut cursor = 0;
    for _ in 0..training.epochs {
        let mut order: Vec<usize> = (0..local.len()).collect();
        rng.shuffle(&mut order);
        rng.shuffle(&mut poison_order);
        for chunk in order.chunks(training.batch_size) {
            let clean: Vec<(&[f64], usize)> = chunk.iter().map(|&i| local[i]).collect();
            let mut batch_poison = Vec::with_capacity(chunk.len());
            if !poisoned.is_empty() {
                for _ in 0..chunk.len() {
                    batch_poison.push(poisoned[poison_order[cursor % poisoned.len()]].clone());
                    cursor += 1;
                }
            }
            let (loss, grads) = backdoor_loss_and_grads(model, &clean, &batch_poison, alpha)?;
            if !loss.is_finite() {
                return Err(Error::Divergence("non-finite backdoor loss".into()));
            }
            model.sgd_step(&grads, training.lr)?;
        }
    }
    Ok(())
}
