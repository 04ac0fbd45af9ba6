use home_equiv_core::data::{Dataset, DatasetConfig, Split};
use home_equiv_core::geometry::Homography;
use home_equiv_core::home_loss::NeighborGraph;
use home_equiv_core::tensor::Tensor;
use home_equiv_core::trainer::{
    evaluate, pretrain, pretrain_supervised_aux, train, Checkpoint, CheckpointKind, EpochMetrics,
    Regime, Task, TrainConfig, Trainer,
};
use home_equiv_core::Error;

fn dataset(count: usize, seed: u64) -> Dataset {
    Dataset::generate(&DatasetConfig {
        seed,
        count,
        ..Default::default()
    })
    .unwrap()
}

fn small_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        finetune_epochs: epochs,
        batch_size: 8,
        encoder_hidden: vec![32],
        n_dim: 8,
        decoder_hidden: [16, 16, 8],
        seed: 3,
        ..Default::default()
    }
}

fn strip_clock(h: &[EpochMetrics]) -> Vec<EpochMetrics> {
    h.iter()
        .map(|m| EpochMetrics {
            wallclock_ms: 0,
            ..m.clone()
        })
        .collect()
}

fn entries_with_prefix(ck: &Checkpoint, prefixes: &[&str]) -> Vec<(String, Tensor)> {
    ck.archive()
        .iter()
        .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect()
}

#[test]
fn pretraining_is_deterministic() {
    let ds = dataset(40, 1);
    let cfg = small_config(3);
    let a = pretrain(&ds, &cfg).unwrap();
    let b = pretrain(&ds, &cfg).unwrap();
    assert_eq!(strip_clock(&a.history), strip_clock(&b.history));
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert!(a
        .history
        .iter()
        .all(|m| m.val_acc.is_none() && m.regime == "pretrain"));
}

#[test]
fn pretraining_default_config_reduces_loss_twentyfold() {
    let ds = dataset(200, 2);
    let out = pretrain(&ds, &TrainConfig::default()).unwrap();
    let first = out.history[0].train_loss;
    let last = out.history.last().unwrap().train_loss;
    assert!(last <= 0.05 * first, "{last} vs {first}");
}

#[test]
fn reachable_zero_is_approached() {
    // Every sample is the same image and the graph carries identity maps, so
    // any encoder that ignores the view difference has zero loss.
    let mut ds = dataset(40, 3);
    let first = ds.samples[0].clone();
    for s in ds.samples.iter_mut() {
        s.views = first.views.clone();
    }
    ds.graph = NeighborGraph::chain(&[Homography::IDENTITY, Homography::IDENTITY]).unwrap();
    let out = pretrain(&ds, &small_config(150)).unwrap();
    let first = out.history[0].train_loss;
    let last = out.history.last().unwrap().train_loss;
    assert!(last < 1e-4 * first, "{last} vs {first}");
}

#[test]
fn best_validation_loss_is_non_increasing() {
    let ds = dataset(40, 4);
    let out = pretrain(&ds, &small_config(6)).unwrap();
    let mut best = f64::INFINITY;
    let mut best_epoch = 0;
    for m in &out.history {
        if m.val_loss < best {
            best = m.val_loss;
            best_epoch = m.epoch;
        }
    }
    let mut t = Trainer::new(Task::Pretrain, &ds, &small_config(6), None).unwrap();
    t.run(Some(best_epoch + 1), |_| {}).unwrap();
    assert_eq!(t.model(), &out.checkpoint.model().unwrap());
}

#[test]
fn frozen_regimes_keep_encoder_bytes() {
    let ds = dataset(40, 5);
    let cfg = small_config(3);
    let pre = pretrain(&ds, &cfg).unwrap().checkpoint;
    let aux = pretrain_supervised_aux(&ds, &cfg).unwrap().checkpoint;
    assert_eq!(aux.kind().unwrap(), CheckpointKind::SupervisedAux);
    for (regime, from) in [(Regime::HomeTl, &pre), (Regime::SupTl, &aux)] {
        let out = train(regime, &ds, &cfg, Some(from)).unwrap();
        let before = entries_with_prefix(from, &["enc/", "vn/"]);
        let after = entries_with_prefix(&out.checkpoint, &["enc/", "vn/"]);
        assert_eq!(before, after, "{regime}");
        let dec_before = entries_with_prefix(&Checkpoint::random(&ds, &cfg).unwrap(), &["dec/"]);
        assert_ne!(dec_before, entries_with_prefix(&out.checkpoint, &["dec/"]));
        assert!(out.history.iter().all(|m| m.encoder_source.is_some()));
    }
}

#[test]
fn home_fine_tunes_encoder() {
    let ds = dataset(40, 6);
    let cfg = small_config(3);
    let pre = pretrain(&ds, &cfg).unwrap().checkpoint;
    let out = train(Regime::Home, &ds, &cfg, Some(&pre)).unwrap();
    assert_ne!(
        entries_with_prefix(&pre, &["enc/"]),
        entries_with_prefix(&out.checkpoint, &["enc/"])
    );
    assert_eq!(
        entries_with_prefix(&pre, &["vn/"]),
        entries_with_prefix(&out.checkpoint, &["vn/"])
    );
    assert!(out.history.iter().all(|m| m.lr == cfg.finetune_lr));
}

#[test]
fn joint_with_zero_alpha_equals_supervised() {
    let ds = dataset(40, 7);
    let cfg = TrainConfig {
        alpha: 0.0,
        ..small_config(4)
    };
    let sup = train(Regime::Sup, &ds, &cfg, None).unwrap();
    let jo = train(Regime::HomeJo, &ds, &cfg, None).unwrap();
    let rename = |h: &[EpochMetrics]| -> Vec<EpochMetrics> {
        strip_clock(h)
            .into_iter()
            .map(|m| EpochMetrics {
                regime: String::new(),
                ..m
            })
            .collect()
    };
    assert_eq!(rename(&sup.history), rename(&jo.history));
    assert_eq!(
        sup.checkpoint.model().unwrap(),
        jo.checkpoint.model().unwrap()
    );

    let jo_real = train(
        Regime::HomeJo,
        &ds,
        &TrainConfig { alpha: 0.1, ..cfg },
        None,
    )
    .unwrap();
    assert_ne!(rename(&sup.history), rename(&jo_real.history));
}

#[test]
fn resume_is_bit_exact() {
    let ds = dataset(40, 8);
    let cfg = small_config(5);
    for task in [
        Task::Pretrain,
        Task::Train(Regime::HomeJo),
        Task::Train(Regime::Sup),
    ] {
        let mut whole = Trainer::new(task, &ds, &cfg, None).unwrap();
        let full = whole.run(None, |_| {}).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.homt");
        let mut first = Trainer::new(task, &ds, &cfg, None).unwrap();
        let mut history = first.run(Some(2), |_| {}).unwrap();
        first.checkpoint().save(&path).unwrap();
        let ck = Checkpoint::load(&path).unwrap();
        assert_eq!(ck.epoch(), Some(2));
        let mut second = Trainer::resume(task, &ds, &cfg, &ck).unwrap();
        history.extend(second.run(None, |_| {}).unwrap());

        assert_eq!(strip_clock(&history), strip_clock(&full), "{task:?}");
        assert_eq!(
            second.checkpoint().to_bytes(),
            whole.checkpoint().to_bytes(),
            "{task:?}"
        );
    }
}

#[test]
fn resume_rejects_changed_config_or_task() {
    let ds = dataset(40, 9);
    let cfg = small_config(3);
    let mut t = Trainer::new(Task::Pretrain, &ds, &cfg, None).unwrap();
    t.run(Some(1), |_| {}).unwrap();
    let ck = t.checkpoint();
    let other = TrainConfig {
        lr_start: 0.02,
        ..cfg.clone()
    };
    assert!(matches!(
        Trainer::resume(Task::Pretrain, &ds, &other, &ck),
        Err(Error::BadConfig(_))
    ));
    assert!(Trainer::resume(Task::Train(Regime::Sup), &ds, &cfg, &ck).is_err());
}

#[test]
fn regime_prerequisites() {
    let ds = dataset(40, 10);
    let cfg = small_config(1);
    let pre = pretrain(&ds, &cfg).unwrap().checkpoint;
    let aux = pretrain_supervised_aux(&ds, &cfg).unwrap().checkpoint;
    for r in [Regime::SupTl, Regime::HomeTl, Regime::Home] {
        assert!(
            matches!(train(r, &ds, &cfg, None), Err(Error::MissingCheckpoint(_))),
            "{r}"
        );
    }
    for r in [Regime::Sup, Regime::HomeJo] {
        assert!(
            matches!(
                train(r, &ds, &cfg, Some(&pre)),
                Err(Error::RegimePrereqViolation(_))
            ),
            "{r}"
        );
    }
    assert!(matches!(
        train(Regime::SupTl, &ds, &cfg, Some(&pre)),
        Err(Error::RegimePrereqViolation(_))
    ));
    assert!(matches!(
        train(Regime::HomeTl, &ds, &cfg, Some(&aux)),
        Err(Error::RegimePrereqViolation(_))
    ));
    let clf = train(Regime::Sup, &ds, &cfg, None).unwrap().checkpoint;
    assert!(matches!(
        train(Regime::Home, &ds, &cfg, Some(&clf)),
        Err(Error::RegimePrereqViolation(_))
    ));
    let random = Checkpoint::random(&ds, &cfg).unwrap();
    assert!(train(Regime::HomeTl, &ds, &cfg, Some(&random)).is_ok());
}

#[test]
fn evaluation_contracts() {
    let ds = dataset(24, 11);
    let cfg = TrainConfig {
        epochs: 100,
        lr_start: 1e-3,
        lr_end: 1e-3,
        batch_size: 8,
        seed: 3,
        ..Default::default()
    };
    let mut t = Trainer::new(Task::Train(Regime::Sup), &ds, &cfg, None).unwrap();
    t.run(None, |_| {}).unwrap();
    let model = t.model().clone();
    let out = Checkpoint::from_model(&model, CheckpointKind::Classifier);
    let ev = evaluate(&model, &ds, Split::Train, 1).unwrap();
    assert_eq!(ev.accuracy, 1.0, "{ev:?}");
    assert_eq!(ev.confusion.iter().flatten().sum::<usize>(), ev.total);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.homt");
    out.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap().model().unwrap();
    for split in [Split::Train, Split::Val, Split::Test] {
        let a = evaluate(&model, &ds, split, 1).unwrap();
        assert_eq!(a, evaluate(&loaded, &ds, split, 1).unwrap());
        assert_eq!(a, evaluate(&model, &ds, split, 3).unwrap());
    }

    // Zero output layer: every logit ties, so class 0 is always predicted.
    let mut constant = model.clone();
    let last = constant.decoder.0.layers().len() - 1;
    let mut layers = constant.decoder.0.layers().to_vec();
    layers[last].w = Tensor::zeros(layers[last].w.shape());
    layers[last].b = Tensor::zeros(layers[last].b.shape());
    constant.decoder =
        home_equiv_core::models::Decoder::new(home_equiv_core::models::Mlp::new(layers).unwrap())
            .unwrap();
    let ev = evaluate(&constant, &ds, Split::Train, 1).unwrap();
    let idx = ds.split_indices(Split::Train);
    let zeros = idx.iter().filter(|&&i| ds.samples[i].label == 0).count();
    assert_eq!(ev.accuracy, zeros as f64 / idx.len() as f64);
}

#[test]
fn empty_split_rejected() {
    let ds = dataset(4, 12);
    let model = Checkpoint::random(&ds, &small_config(1))
        .unwrap()
        .model()
        .unwrap();
    assert!(ds.split_indices(Split::Val).len() <= 1);
    let mut empty = ds.clone();
    for s in empty.manifest.samples.iter_mut() {
        s.split = Split::Train;
    }
    assert!(matches!(
        evaluate(&model, &empty, Split::Test, 1),
        Err(Error::EmptySplit(_))
    ));
    assert!(matches!(
        train(Regime::Sup, &empty, &small_config(1), None),
        Err(Error::EmptySplit(_))
    ));
}

#[test]
fn metrics_lines_have_the_documented_fields() {
    let ds = dataset(40, 13);
    let out = train(Regime::Sup, &ds, &small_config(1), None).unwrap();
    let v: serde_json::Value = serde_json::from_str(&out.history[0].to_json_line()).unwrap();
    let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
    for k in [
        "epoch",
        "lr",
        "train_loss",
        "val_loss",
        "val_acc",
        "regime",
        "seed",
        "wallclock_ms",
    ] {
        assert!(keys.iter().any(|x| x == k), "{k}");
    }
}
