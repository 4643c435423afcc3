//! Epoch-loop contracts on a tiny model: determinism, resume, and the
//! zero-epoch identity.

use std::collections::BTreeSet;

use cropforge::autograd::{Checkpoint, CheckpointMeta};
use cropforge::boxgeom::MosaicLayout;
use cropforge::dataset::{generate_split, Dataset, GeneratorParams, SchemaKind};
use cropforge::decoder::{DecoderConfig, DecoderModel};
use cropforge::encoder::{ConceptVocabulary, EncoderConfig, SyntheticEncoder};
use cropforge::querying::{default_concepts, QueryMode};
use cropforge::training::{sample_mosaic, train, EpochLog, TrainConfig, TrainState, TrainingData};
use cropforge::util::rng_from;

struct Fixture {
    encoder: SyntheticEncoder,
    lexicon: BTreeSet<String>,
    train: Dataset,
    val: Dataset,
}

fn fixture() -> Fixture {
    let concepts = default_concepts();
    let p = GeneratorParams::default();
    let enc_cfg = EncoderConfig {
        grid: 6,
        dim: 16,
        ..EncoderConfig::default()
    };
    let vocab = ConceptVocabulary::new(&concepts, enc_cfg.dim, enc_cfg.seed).unwrap();
    Fixture {
        encoder: SyntheticEncoder::new(enc_cfg, vocab).unwrap(),
        lexicon: concepts.iter().cloned().collect(),
        train: generate_split("train", 12, &concepts, 1, SchemaKind::Both, &p).unwrap(),
        val: generate_split("val", 3, &concepts, 1, SchemaKind::Both, &p).unwrap(),
    }
}

fn model() -> DecoderModel {
    let cfg = DecoderConfig {
        num_queries: 4,
        num_layers: 1,
        model_dim: 16,
        num_heads: 2,
        mlp_hidden: 24,
        offset_scale: 0.5,
    };
    DecoderModel::init(cfg, 5).unwrap()
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        lr_max: 1e-3,
        seed: 9,
        ..TrainConfig::default()
    }
}

fn run(f: &Fixture, cfg: &TrainConfig, state: TrainState) -> (TrainState, Vec<EpochLog>) {
    let data = TrainingData {
        encoder: &f.encoder,
        lexicon: &f.lexicon,
        train: &f.train,
        probe: Some(&f.val),
    };
    let mut logs = Vec::new();
    let st = train(data, cfg, state, |l, _| {
        logs.push(l.clone());
        Ok(())
    })
    .unwrap();
    (st, logs)
}

fn checkpoint(st: &TrainState) -> String {
    let meta = CheckpointMeta {
        config_hash: String::new(),
        epoch: st.epoch as u64,
        seed: 0,
        config: serde_json::json!({ "decoder": st.model.config() }),
    };
    st.model.to_checkpoint(meta, Some(&st.optimizer)).to_json()
}

#[test]
fn zero_epochs_leave_the_initialization() {
    let f = fixture();
    let (st, logs) = run(&f, &cfg(0), TrainState::fresh(model()));
    assert!(logs.is_empty());
    assert_eq!(st.model, model());
    assert_eq!(st.optimizer.step, 0);
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let f = fixture();
    let (a, la) = run(&f, &cfg(2), TrainState::fresh(model()));
    let (b, lb) = run(&f, &cfg(2), TrainState::fresh(model()));
    assert_eq!(checkpoint(&a), checkpoint(&b));
    assert_eq!(la, lb);
    assert_ne!(a.model, model());
    assert_eq!(a.optimizer.step, 2 * 3);
    let mut other = cfg(2);
    other.seed = 10;
    let (c, _) = run(&f, &other, TrainState::fresh(model()));
    assert_ne!(checkpoint(&a), checkpoint(&c));
}

#[test]
fn resume_continues_bit_identically() {
    let f = fixture();
    let (full, full_logs) = run(&f, &cfg(3), TrainState::fresh(model()));
    let (first, _) = {
        // stop after one epoch of the same three-epoch schedule
        let data = TrainingData {
            encoder: &f.encoder,
            lexicon: &f.lexicon,
            train: &f.train,
            probe: Some(&f.val),
        };
        let mut snapshot = None;
        let _ = train(data, &cfg(3), TrainState::fresh(model()), |l, st| {
            if l.epoch == 1 {
                snapshot = Some(st.clone());
                return Err(cropforge::training::TrainError::Data("stop".into()));
            }
            Ok(())
        });
        (snapshot.unwrap(), ())
    };
    // through a serialized checkpoint, as the CLI does
    let ckpt = Checkpoint::from_json(&checkpoint(&first)).unwrap();
    let restored = TrainState {
        model: DecoderModel::from_checkpoint(&ckpt, None).unwrap(),
        optimizer: ckpt.optimizer_state().unwrap().unwrap(),
        epoch: ckpt.metadata.epoch as usize,
    };
    let (resumed, logs) = run(&f, &cfg(3), restored);
    assert_eq!(logs.iter().map(|l| l.epoch).collect::<Vec<_>>(), vec![2, 3]);
    assert_eq!(logs[..], full_logs[1..]);
    assert_eq!(checkpoint(&resumed), checkpoint(&full));
}

#[test]
fn every_query_mode_trains() {
    let f = fixture();
    for mode in [QueryMode::Both, QueryMode::Main, QueryMode::Key, QueryMode::None] {
        for mosaic in [true, false] {
            let c = TrainConfig {
                query_mode: mode,
                mosaic_enabled: mosaic,
                ..cfg(1)
            };
            let (_, logs) = run(&f, &c, TrainState::fresh(model()));
            assert!(logs[0].total.is_finite(), "{mode} {mosaic}");
            if !mosaic || mode == QueryMode::None {
                assert_eq!(logs[0].fallback_filter_count, 0);
            }
        }
    }
}

#[test]
fn image_mode_is_rejected_for_training() {
    let f = fixture();
    let data = TrainingData {
        encoder: &f.encoder,
        lexicon: &f.lexicon,
        train: &f.train,
        probe: None,
    };
    let c = TrainConfig {
        query_mode: QueryMode::Image,
        ..cfg(1)
    };
    assert!(train(data, &c, TrainState::fresh(model()), |_, _| Ok(())).is_err());
}

#[test]
fn mosaic_grid_frequencies_are_uniform() {
    let f = fixture();
    let mut rng = rng_from(0, &[b"frequencies"]);
    let mut counts = [0usize; 3];
    let n = 30_000;
    for _ in 0..n {
        let m = sample_mosaic(&f.train, &mut rng, 0.5).unwrap();
        counts[m.layout.grid() - 1] += 1;
    }
    for c in counts {
        let p = c as f64 / n as f64;
        assert!((0.323..=0.343).contains(&p), "{counts:?}");
    }
}

#[test]
fn mosaic_mapping_example() {
    let layout = MosaicLayout::new(2, (1, 0)).unwrap();
    let g = layout.to_global((1, 0), &cropforge::boxgeom::BBox::new(0.5, 0.5, 0.2, 0.2)).unwrap();
    assert_eq!(g.to_array(), [0.25, 0.75, 0.1, 0.1]);
}
