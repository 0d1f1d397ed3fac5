use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use protofl::attack::{train_triggers, AttackConfig, AttackKind, Trigger, TriggerSet};
use protofl::data::{load_idx, make_blobs, partition_pq, PartitionConfig};
use protofl::diffnet::{Activation, Model};
use protofl::proto::{aggregate, local_prototypes, PrototypeBank};
use protofl::rng::Stream;
use protofl::sim::{
    run_experiment, run_round, DatasetSpec, ExperimentConfig, ModelSpec, PartitionSpec, RoundContext, Simulation,
};

fn blobs(rounds: usize) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSpec::Blobs { num_classes: 10, input_dim: 64, per_class: 200, spread: 0.1 },
        partition: PartitionSpec { num_clients: 20, p: 5.0, q: 30.0, std: 2.0, test_fraction: 0.2 },
        model: ModelSpec { hidden: vec![32, 16], activation: Activation::Relu },
        rounds,
        ..ExperimentConfig::default()
    }
}

#[test]
fn one_round_smoke() {
    let mut cfg = blobs(1);
    cfg.attack.kind = AttackKind::None;
    let m = run_experiment(&cfg).unwrap();
    assert_eq!(m.len(), 1);
    assert!(m[0].acc_mean.unwrap().is_finite());
}

#[test]
fn separable_blobs_are_learned() {
    let cfg = blobs(30);
    let m = run_experiment(&cfg).unwrap();
    let acc = m.last().unwrap().acc_mean.unwrap();
    assert!(acc >= 90.0, "final accuracy {acc}");
}

#[test]
fn runs_are_deterministic_across_thread_counts() {
    let mut cfg = blobs(3);
    cfg.attack.kind = AttackKind::Bapfl;
    cfg.attack.trigger_pretrain_steps = 2;
    let strip = |v: Vec<protofl::sim::RoundMetrics>| {
        v.into_iter()
            .map(|mut m| {
                m.wall_time = 0.0;
                m
            })
            .collect::<Vec<_>>()
    };
    let a = strip(run_experiment(&cfg).unwrap());
    let b = strip(run_experiment(&cfg).unwrap());
    cfg.threads = 4;
    let c = strip(run_experiment(&cfg).unwrap());
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn zero_attack_rate_matches_no_attack() {
    let mut with = blobs(3);
    with.attack = AttackConfig { kind: AttackKind::Bapfl, attack_rate: 0.0, ..AttackConfig::default() };
    let mut without = blobs(3);
    without.attack.kind = AttackKind::None;
    let strip = |cfg: &ExperimentConfig| {
        run_experiment(cfg)
            .unwrap()
            .into_iter()
            .map(|mut m| {
                m.wall_time = 0.0;
                m
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&with), strip(&without));
}

#[test]
fn global_bank_stays_in_the_hull_of_each_round() {
    let mut cfg = blobs(1);
    cfg.attack.kind = AttackKind::Bapfl;
    cfg.attack.trigger_pretrain_steps = 1;
    let mut sim = Simulation::new(&cfg).unwrap();
    let mut global = PrototypeBank::new();
    let dataset = cfg.dataset.load(cfg.seed).unwrap();
    for _ in 0..3 {
        let _ = sim.step().unwrap();
    }
    // Direct round over fresh states: every aggregated class sits inside its uploads' box.
    let mut states = Vec::new();
    let shards = partition_pq(&dataset, &cfg.partition.with_seed(cfg.seed)).unwrap();
    let mut rng = Stream::new(1);
    let model = Model::init(64, &[32, 16], 10, Activation::Relu, &mut rng).unwrap();
    for s in shards {
        let id = s.client_id;
        states.push(protofl::sim::ClientState::new(id, protofl::sim::Role::Benign, model.clone(), s, 9));
    }
    let ctx = RoundContext { dataset: &dataset, cfg: &cfg };
    for _ in 0..2 {
        let uploads = run_round(&mut states, &global, &ctx, None).unwrap();
        let bank = aggregate(&uploads).unwrap();
        for p in bank.iter() {
            let members: Vec<&Vec<f64>> =
                uploads.iter().flat_map(|(_, u)| u.iter()).filter(|q| q.class_id == p.class_id).map(|q| &q.vector).collect();
            for d in 0..p.vector.len() {
                let lo = members.iter().map(|v| v[d]).fold(f64::INFINITY, f64::min);
                let hi = members.iter().map(|v| v[d]).fold(f64::NEG_INFINITY, f64::max);
                assert!(p.vector[d] >= lo - 1e-12 && p.vector[d] <= hi + 1e-12);
            }
        }
        global = bank.carry_forward(&global);
    }
    assert!(!sim.global().is_empty());
}

fn trained_blob_model() -> (protofl::data::Dataset, Model, Vec<usize>) {
    let ds = make_blobs(4, 16, 40, 0.05, 11).unwrap();
    let mut rng = Stream::new(2);
    let mut model = Model::init(16, &[12, 8], 4, Activation::Relu, &mut rng).unwrap();
    let ids: Vec<usize> = (0..ds.len()).collect();
    for _ in 0..20 {
        for chunk in ids.chunks(8) {
            let batch: Vec<(&[f64], usize)> = chunk.iter().map(|&i| (ds.x(i), ds.y(i))).collect();
            let (_, g) = protofl::attack::backdoor_loss_and_grads(&model, &batch, &[], 0.0).unwrap();
            model.sgd_step(&g, 0.1).unwrap();
        }
    }
    (ds, model, ids)
}

#[test]
fn trigger_training_lowers_the_target_loss() {
    let (ds, model, ids) = trained_blob_model();
    let samples: Vec<(&[f64], usize)> = ids.iter().map(|&i| (ds.x(i), ds.y(i))).collect();
    let cfg = AttackConfig::default();
    let mut triggers: TriggerSet = [(2, Trigger::new(2, 16, cfg.trigger_init_mask_logit))].into();
    let traces = train_triggers(&model, &PrototypeBank::new(), &mut triggers, &samples, 30, cfg.trigger_lr, cfg.stealth()).unwrap();
    let losses = &traces[0].losses;
    assert_eq!(losses.len(), 30);
    assert!(losses.last().unwrap() < losses.first().unwrap(), "{losses:?}");

    let mut again: TriggerSet = [(2, Trigger::new(2, 16, cfg.trigger_init_mask_logit))].into();
    train_triggers(&model, &PrototypeBank::new(), &mut again, &samples, 30, cfg.trigger_lr, cfg.stealth()).unwrap();
    assert_eq!(again, triggers);
}

#[test]
fn benign_uploads_are_honest_when_nobody_attacks() {
    let mut cfg = blobs(1);
    cfg.attack.attack_rate = 0.0;
    cfg.attack.kind = AttackKind::Bapfl;
    let mut sim = Simulation::new(&cfg).unwrap();
    sim.step().unwrap();
    let honest: Vec<_> = sim
        .states()
        .iter()
        .map(|s| (s.client_id, local_prototypes(&s.model, &s.shard, sim.dataset()).unwrap()))
        .collect();
    assert_eq!(sim.global(), &aggregate(&honest).unwrap());
}

fn mnist_subset() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-5k")
}

#[test]
fn bundled_mnist_subset_loads() {
    let dir = mnist_subset();
    let ds = load_idx(&dir.join("images-idx3-ubyte.gz"), &dir.join("labels-idx1-ubyte.gz")).unwrap();
    assert_eq!(ds.len(), 5000);
    assert_eq!(ds.num_classes, 10);
    assert_eq!(ds.input_dim, 784);
    assert!(ds.labels().iter().all(|&y| y < 10));
    assert!((0..ds.len()).all(|i| ds.x(i).iter().all(|v| (0.0..=1.0).contains(v))));
}

#[test]
fn mnist_partition_covers_every_class() {
    let dir = mnist_subset();
    let ds = load_idx(&dir.join("images-idx3-ubyte.gz"), &dir.join("labels-idx1-ubyte.gz")).unwrap();
    for seed in 0..10 {
        let shards = partition_pq(&ds, &PartitionConfig { seed, ..PartitionConfig::default() }).unwrap();
        let union: BTreeSet<usize> = shards.iter().flat_map(|s| s.label_space.iter().copied()).collect();
        assert_eq!(union.len(), 10, "seed {seed}");
    }
    let exact = partition_pq(&ds, &PartitionConfig { std: 0.0, seed: 1, ..PartitionConfig::default() }).unwrap();
    assert!(exact.iter().all(|s| s.label_space.len() == 5));
}

/// Full MNIST training files, when `PROTOFL_MNIST_DIR` points at them.
#[test]
fn full_mnist_training_set() {
    let Some(dir) = std::env::var_os("PROTOFL_MNIST_DIR").map(PathBuf::from) else {
        eprintln!("PROTOFL_MNIST_DIR not set; skipping");
        return;
    };
    let pick = |names: &[&str]| {
        names.iter().map(|n| dir.join(n)).find(|p| p.exists()).expect("MNIST training file present")
    };
    let images = pick(&["train-images-idx3-ubyte", "train-images-idx3-ubyte.gz", "train-images.idx3-ubyte"]);
    let labels = pick(&["train-labels-idx1-ubyte", "train-labels-idx1-ubyte.gz", "train-labels.idx1-ubyte"]);
    let ds = load_idx(&images, &labels).unwrap();
    assert_eq!(ds.len(), 60000);
    assert_eq!(ds.num_classes, 10);
}
