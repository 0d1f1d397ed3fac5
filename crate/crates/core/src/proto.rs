//! Class prototypes: local means, count-weighted aggregation, the
//! prototype-regularized training loss and nearest-prototype classification.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{ClientShard, Dataset};
use crate::diffnet::{ce_with_grad, distance, distance_with_grad, Gradients, Model};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototype {
    pub class_id: usize,
    pub count: usize,
    pub vector: Vec<f64>,
}

/// Global prototypes, at most one per class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrototypeBank {
    entries: BTreeMap<usize, ClassPrototype>,
}

impl PrototypeBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_prototypes(protos: impl IntoIterator<Item = ClassPrototype>) -> Result<Self> {
        let mut bank = Self::new();
        for p in protos {
            bank.insert(p)?;
        }
        Ok(bank)
    }

    pub fn insert(&mut self, proto: ClassPrototype) -> Result<()> {
        if let Some(dim) = self.dim() {
            if proto.vector.len() != dim {
                return Err(Error::Input(format!(
                    "prototype for class {} has dimension {}, bank uses {dim}",
                    proto.class_id,
                    proto.vector.len()
                )));
            }
        }
        self.entries.insert(proto.class_id, proto);
        Ok(())
    }

    pub fn get(&self, class_id: usize) -> Option<&[f64]> {
        self.entries.get(&class_id).map(|p| p.vector.as_slice())
    }

    pub fn count(&self, class_id: usize) -> Option<usize> {
        self.entries.get(&class_id).map(|p| p.count)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.values().next().map(|p| p.vector.len())
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ClassPrototype> {
        self.entries.values()
    }

    /// This round's bank with classes nobody uploaded carried over from
    /// `previous`.
    pub fn carry_forward(mut self, previous: &PrototypeBank) -> Self {
        for (k, p) in &previous.entries {
            self.entries.entry(*k).or_insert_with(|| p.clone());
        }
        self
    }

    /// One JSON object per class: `{"round", "class_id", "count", "vector"}`.
    pub fn write_jsonl<W: Write>(&self, out: &mut W, round: usize) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            round: usize,
            class_id: usize,
            count: usize,
            vector: &'a [f64],
        }
        for p in self.entries.values() {
            let line = Line {
                round,
                class_id: p.class_id,
                count: p.count,
                vector: &p.vector,
            };
            serde_json::to_writer(&mut *out, &line).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Per-class mean embedding of `(input, class)` pairs, classes ascending.
pub fn class_means<'a, I>(model: &Model, samples: I) -> Result<Vec<ClassPrototype>>
where
    I: IntoIterator<Item = (&'a [f64], usize)>,
{
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (x, k) in samples {
        let e = model.embed(x)?;
        let entry = sums
            .entry(k)
            .or_insert_with(|| (vec![0.0; e.len()], 0));
        for (s, v) in entry.0.iter_mut().zip(&e) {
            *s += v;
        }
        entry.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(class_id, (sum, count))| ClassPrototype {
            class_id,
            count,
            vector: sum.into_iter().map(|s| s / count as f64).collect(),
        })
        .collect())
}

/// Mean embedding of each class in the shard's training data.
pub fn local_prototypes(
    model: &Model,
    shard: &ClientShard,
    dataset: &Dataset,
) -> Result<Vec<ClassPrototype>> {
    class_means(model, shard.train.iter().map(|&i| (dataset.x(i), dataset.y(i))))
}

/// Count-weighted mean of the uploaded prototypes, per class. Uploads are
/// summed in ascending client id, so the result does not depend on the order
/// they were received in.
pub fn aggregate(uploads: &[(usize, Vec<ClassPrototype>)]) -> Result<PrototypeBank> {
    let mut ordered: Vec<&(usize, Vec<ClassPrototype>)> = uploads.iter().collect();
    ordered.sort_by_key(|(client, _)| *client);

    let mut dim = None;
    let mut totals: BTreeMap<usize, usize> = BTreeMap::new();
    for (client, protos) in &ordered {
        for p in protos {
            let d = *dim.get_or_insert(p.vector.len());
            if p.vector.len() != d {
                return Err(Error::Aggregation {
                    client: *client,
                    message: format!(
                        "class {} prototype has dimension {}, expected {d}",
                        p.class_id,
                        p.vector.len()
                    ),
                });
            }
            if p.count == 0 {
                return Err(Error::Aggregation {
                    client: *client,
                    message: format!("class {} prototype has zero count", p.class_id),
                });
            }
            *totals.entry(p.class_id).or_insert(0) += p.count;
        }
    }

    let d = dim.unwrap_or(0);
    let mut sums: BTreeMap<usize, Vec<f64>> = totals.keys().map(|&k| (k, vec![0.0; d])).collect();
    for (_, protos) in &ordered {
        let mut sorted: Vec<&ClassPrototype> = protos.iter().collect();
        sorted.sort_by_key(|p| p.class_id);
        for p in sorted {
            let w = p.count as f64 / totals[&p.class_id] as f64;
            for (s, v) in sums.get_mut(&p.class_id).expect("class totalled").iter_mut().zip(&p.vector) {
                *s += w * v;
            }
        }
    }
    PrototypeBank::from_prototypes(sums.into_iter().map(|(class_id, vector)| ClassPrototype {
        class_id,
        count: totals[&class_id],
        vector,
    }))
}

/// Mean over the batch of `CE(f(x), y) + lambda * ||phi(x) - P[y]||`. Samples
/// whose class has no global prototype contribute only the CE term.
pub fn combined_loss_and_grads(
    model: &Model,
    batch: &[(&[f64], usize)],
    global: &PrototypeBank,
    lambda: f64,
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = Gradients::zeros_like(model);
    let mut loss = 0.0;
    let zero_embed = vec![0.0; model.embed_dim()];
    for &(x, y) in batch {
        let trace = model.forward(x)?;
        let (ce, mut d_logits) = ce_with_grad(&trace.logits, y)?;
        loss += ce;
        d_logits.iter_mut().for_each(|d| *d *= scale);
        let d_embed = match global.get(y) {
            Some(proto) if lambda > 0.0 => {
                let (dist, mut g) = distance_with_grad(trace.embedding(), proto);
                loss += lambda * dist;
                g.iter_mut().for_each(|v| *v *= lambda * scale);
                g
            }
            _ => zero_embed.clone(),
        };
        model.backward_into(&trace, &d_logits, &d_embed, Some(&mut grads), None)?;
    }
    Ok((loss * scale, grads))
}

/// Class of the closest prototype in Euclidean distance, lowest id on ties.
pub fn nearest_prototype_classify(embedding: &[f64], bank: &PrototypeBank) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for p in bank.iter() {
        let d = distance(embedding, &p.vector);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((p.class_id, d));
        }
    }
    best.map(|(k, _)| k)
        .ok_or_else(|| Error::Evaluation("nearest-prototype classification with an empty bank".into()))
}

/// Mean distance between benign and trigger prototypes over the classes both
/// sides have; `None` when they share no class.
pub fn proto_drift(benign: &[ClassPrototype], trigger: &[ClassPrototype]) -> Option<f64> {
    let trig: BTreeMap<usize, &[f64]> = trigger
        .iter()
        .map(|p| (p.class_id, p.vector.as_slice()))
        .collect();
    let dists: Vec<f64> = benign
        .iter()
        .filter_map(|b| trig.get(&b.class_id).map(|t| distance(&b.vector, t)))
        .collect();
    if dists.is_empty() {
        None
    } else {
        Some(dists.iter().sum::<f64>() / dists.len() as f64)
    }
}
