//! Datasets and the heterogeneous p-way q-shot client partitioner.

use std::collections::BTreeSet;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{tags, Stream};

const LABELS_MAGIC: u32 = 0x0000_0801;
const IMAGES_MAGIC: u32 = 0x0000_0803;

/// Labelled samples with features in `[0, 1]`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    pub input_dim: usize,
    pub num_classes: usize,
    /// `(rows, cols)` when the features are an image.
    pub image_shape: Option<(usize, usize)>,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        input_dim: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 {
            return Err(Error::Input("dataset dimensions must be positive".into()));
        }
        if features.len() != labels.len() * input_dim {
            return Err(Error::Input(format!(
                "{} feature values do not form {} samples of width {input_dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Input(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        if features.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("feature values must lie in [0, 1]".into()));
        }
        Ok(Self {
            features,
            labels,
            input_dim,
            num_classes,
            image_shape: None,
        })
    }

    pub fn with_image_shape(mut self, rows: usize, cols: usize) -> Self {
        if rows * cols == self.input_dim {
            self.image_shape = Some((rows, cols));
        }
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn y(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Sample indices grouped by class, in dataset order.
    pub fn class_pools(&self) -> Vec<Vec<usize>> {
        let mut pools = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            pools[y].push(i);
        }
        pools
    }

    /// Keep at most `per_class` samples of each class, preserving order.
    pub fn truncate_per_class(&self, per_class: usize) -> Dataset {
        let mut seen = vec![0usize; self.num_classes];
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..self.len() {
            let y = self.y(i);
            if seen[y] < per_class {
                seen[y] += 1;
                features.extend_from_slice(self.x(i));
                labels.push(y);
            }
        }
        Dataset {
            features,
            labels,
            ..self.clone()
        }
    }
}

fn read_maybe_gz(path: &Path, field: &'static str) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::Ingest {
        field,
        message: format!("{}: {e}", path.display()),
    })?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Ingest {
                field,
                message: format!("{}: bad gzip stream: {e}", path.display()),
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, field: &'static str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Ingest {
            field,
            message: "file truncated inside the header".into(),
        })
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "labels magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Ingest {
            field: "labels magic",
            message: format!("expected 0x{LABELS_MAGIC:08x}, found 0x{magic:08x}"),
        });
    }
    let count = be_u32(bytes, 4, "labels count")? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::Ingest {
            field: "labels count",
            message: format!("header declares {count} labels, file holds {}", body.len()),
        });
    }
    Ok(body[..count].to_vec())
}

/// Parses an IDX3 image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, "images magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Ingest {
            field: "images magic",
            message: format!("expected 0x{IMAGES_MAGIC:08x}, found 0x{magic:08x}"),
        });
    }
    let count = be_u32(bytes, 4, "images count")? as usize;
    let rows = be_u32(bytes, 8, "images rows")? as usize;
    let cols = be_u32(bytes, 12, "images cols")? as usize;
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Ingest {
            field: "images pixels",
            message: format!("expected {need} pixel bytes, file holds {}", body.len()),
        });
    }
    Ok((count, rows, cols, body[..need].to_vec()))
}

/// Loads an IDX image/label pair (plain or gzip-compressed), scaling pixels
/// to `[0, 1]`. The class count is one more than the largest label.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let labels = parse_idx_labels(&read_maybe_gz(labels_path, "labels file")?)?;
    let (count, rows, cols, pixels) = parse_idx_images(&read_maybe_gz(images_path, "images file")?)?;
    if count != labels.len() {
        return Err(Error::Ingest {
            field: "count",
            message: format!("{count} images but {} labels", labels.len()),
        });
    }
    if rows * cols == 0 {
        return Err(Error::Ingest {
            field: "images rows",
            message: "zero-sized images".into(),
        });
    }
    let num_classes = labels.iter().copied().max().map_or(1, |m| m as usize + 1);
    let features = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels = labels.into_iter().map(usize::from).collect();
    Ok(Dataset::new(features, labels, rows * cols, num_classes)?.with_image_shape(rows, cols))
}

/// Gaussian blobs: one seeded random center per class in `[0, 1]^d`,
/// samples drawn isotropically around it and clipped to `[0, 1]`.
pub fn make_blobs(
    num_classes: usize,
    input_dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || input_dim == 0 || per_class == 0 {
        return Err(Error::Config("blob counts must be positive".into()));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::Config("blob spread must be a non-negative number".into()));
    }
    let mut rng = Stream::derived(seed, tags::BLOBS, 0);
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..input_dim).map(|_| rng.uniform()).collect())
        .collect();
    let mut features = Vec::with_capacity(num_classes * per_class * input_dim);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for (k, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            features.extend(center.iter().map(|&c| rng.normal(c, spread).clamp(0.0, 1.0)));
            labels.push(k);
        }
    }
    let side = (input_dim as f64).sqrt().round() as usize;
    Ok(Dataset::new(features, labels, input_dim, num_classes)?.with_image_shape(side, side))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub num_clients: usize,
    /// Mean number of classes per client.
    pub p: f64,
    /// Mean number of samples drawn per class (train and test together).
    pub q: f64,
    pub std: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            num_clients: 20,
            p: 5.0,
            q: 100.0,
            std: 2.0,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::Config("partition.num_clients must be at least 1".into()));
        }
        if !self.p.is_finite() || !self.q.is_finite() {
            return Err(Error::Config("partition.p and partition.q must be finite".into()));
        }
        if !(self.std >= 0.0 && self.std.is_finite()) {
            return Err(Error::Config("partition.std must be non-negative".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config("partition.test_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// One client's slice of the dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    pub label_space: BTreeSet<usize>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// p-way q-shot partition. Client `c` draws `p_c = clamp(round(N(p, std)), 1, K)`
/// and `q_c = max(round(N(q, std)), 1)`, picks `p_c` distinct classes, and for
/// each of them draws `q_c` samples without replacement (topping up with
/// replacement from its own training picks once the class pool runs out).
/// `floor(q_c * test_fraction)` of the distinct picks become test data.
pub fn partition_pq(dataset: &Dataset, cfg: &PartitionConfig) -> Result<Vec<ClientShard>> {
    cfg.validate()?;
    let pools = dataset.class_pools();
    if let Some(k) = pools.iter().position(Vec::is_empty) {
        return Err(Error::Partition(format!("class {k} has no samples")));
    }
    let num_classes = dataset.num_classes;
    let mut rng = Stream::derived(cfg.seed, tags::PARTITION, 0);
    let mut shards = Vec::with_capacity(cfg.num_clients);

    for client_id in 0..cfg.num_clients {
        let p_c = (rng.normal(cfg.p, cfg.std).round().max(1.0) as usize).min(num_classes);
        let q_c = rng.normal(cfg.q, cfg.std).round().max(1.0) as usize;
        let mut classes = rng.choose_distinct(num_classes, p_c);
        classes.sort_unstable();

        let mut train = Vec::new();
        let mut test = Vec::new();
        for &k in &classes {
            let pool = &pools[k];
            let distinct = q_c.min(pool.len());
            let picks: Vec<usize> = rng
                .choose_distinct(pool.len(), distinct)
                .into_iter()
                .map(|j| pool[j])
                .collect();
            let n_test = ((q_c as f64 * cfg.test_fraction).floor() as usize).min(distinct - 1);
            let (class_test, class_train) = picks.split_at(n_test);
            test.extend_from_slice(class_test);
            train.extend_from_slice(class_train);
            for _ in distinct..q_c {
                train.push(class_train[rng.below(class_train.len())]);
            }
        }
        shards.push(ClientShard {
            client_id,
            label_space: classes.into_iter().collect(),
            train,
            test,
        });
    }
    Ok(shards)
}
