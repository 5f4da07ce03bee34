mod common;

use afusion_core::config::{FoldSelection, Monitor, RunConfig};
use afusion_core::datapipe::{FeatureStats, Normalizer};
use afusion_core::metrics::CccReport;
use afusion_core::params::ParamStore;
use afusion_core::train::checkpoint::SECTIONS;
use afusion_core::train::{Adam, AdamConfig, Checkpoint, Phase, Scheduler, SchedulerConfig};
use afusion_core::{Error, Tensor};
use common::{events, flat, plateau_then_jump, rising, scheduler_oracle, scheduler_trace};
use proptest::prelude::*;

#[test]
fn rising_validation_never_decays() {
    let trace = scheduler_trace(&rising());
    assert_eq!(trace, scheduler_oracle(&rising()));
    assert_eq!(trace.len(), 100);
    assert!(trace.iter().all(|r| r.decade == 0 && r.groups == 1));
    assert!(trace.last().unwrap().stop);
}

#[test]
fn flat_validation_walks_the_decade_ladder() {
    let trace = scheduler_trace(&flat());
    assert_eq!(trace, scheduler_oracle(&flat()));
    let (decays, unfreezes) = events(&trace);
    assert_eq!(decays, [11, 17, 23, 35, 41, 47, 59, 65, 71]);
    assert_eq!(unfreezes, [(28, 2), (52, 3)]);
    // groups run out at 76; twenty stale epochs later the run stops
    assert_eq!(trace.last().unwrap().epoch, 96);
    assert!(trace.last().unwrap().stop);
}

#[test]
fn a_late_jump_restarts_the_counters() {
    let trace = scheduler_trace(&plateau_then_jump());
    assert_eq!(trace, scheduler_oracle(&plateau_then_jump()));
    let (decays, unfreezes) = events(&trace);
    assert_eq!(decays, [11, 17, 23, 36, 42, 48, 60, 66, 72]);
    assert_eq!(unfreezes, [(28, 2), (53, 3)]);
    assert_eq!(trace.last().unwrap().epoch, 97);
}

#[test]
fn warmup_ramps_each_batch_and_unfreeze_rewarms() {
    let mut s = Scheduler::new(SchedulerConfig::default()).unwrap();
    for e in 0..5 {
        assert_eq!(s.phase(), Phase::Warmup, "epoch {e}");
        assert_eq!(s.batch_lr(0, 4), 1e-8 + (1e-5 - 1e-8) * 0.25);
        assert_eq!(s.batch_lr(3, 4), 1e-5);
        s.tick(0.1).unwrap();
    }
    assert_eq!(s.phase(), Phase::Plateau);
    assert_eq!(s.batch_lr(0, 4), 1e-5);

    let mut s = Scheduler::new(SchedulerConfig::default()).unwrap();
    let vals = flat();
    for &v in &vals[..29] {
        s.tick(v).unwrap();
    }
    assert_eq!((s.current_group, s.lr, s.phase()), (2, 1e-5, Phase::Warmup));
}

#[test]
fn tick_after_stop_is_rejected() {
    let mut s = Scheduler::new(SchedulerConfig {
        max_epoch: 2,
        ..SchedulerConfig::default()
    })
    .unwrap();
    s.tick(0.1).unwrap();
    assert!(s.tick(0.2).unwrap().stop);
    assert!(matches!(s.tick(0.3), Err(Error::SchedulerStopped)));
}

fn store() -> ParamStore<f32> {
    let mut s = ParamStore::new();
    s.add("head.w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap(), None);
    s.add(
        "stage0.w",
        Tensor::new(vec![3], vec![0.5, 0.25, -1.0]).unwrap(),
        Some(3),
    );
    s.add("stage2.w", Tensor::new(vec![1], vec![1.0]).unwrap(), Some(1));
    s
}

fn set_grads(s: &mut ParamStore<f32>, f: impl Fn(&str, f32) -> f32) {
    for p in s.iter_mut() {
        let name = p.name.clone();
        let grads: Vec<f32> = p.value.data().iter().map(|&v| f(&name, v)).collect();
        p.grad = grads;
    }
}

#[test]
fn zero_gradient_without_decay_changes_nothing() {
    let mut s = store();
    let before = s.values();
    let mut adam = Adam::new(AdamConfig {
        weight_decay: 0.0,
        ..AdamConfig::default()
    });
    set_grads(&mut s, |_, _| 0.0);
    adam.step(&mut s, 3, 1e-3).unwrap();
    assert_eq!(s.values(), before);
}

#[test]
fn first_step_moves_by_the_learning_rate() {
    // grad of theta^2 / 2 is theta; bias correction makes the first step lr
    let mut s = ParamStore::new();
    s.add("theta", Tensor::new(vec![1], vec![1.0f32]).unwrap(), None);
    let mut adam = Adam::new(AdamConfig {
        weight_decay: 0.0,
        ..AdamConfig::default()
    });
    set_grads(&mut s, |_, v| v);
    adam.step(&mut s, 1, 1e-3).unwrap();
    let theta = f64::from(s.iter().next().unwrap().value.data()[0]);
    assert!((1.0 - theta - 1e-3).abs() < 1e-6, "{theta}");

    let mut s = ParamStore::new();
    s.add("theta", Tensor::new(vec![1], vec![1.0f32]).unwrap(), None);
    let mut adam = Adam::new(AdamConfig::default());
    set_grads(&mut s, |_, v| v);
    adam.step(&mut s, 1, 1e-3).unwrap();
    let theta = f64::from(s.iter().next().unwrap().value.data()[0]);
    assert!((1.0 - theta - 1e-3 * (1.0 + 0.001)).abs() < 1e-6, "{theta}");
}

#[test]
fn frozen_groups_stay_bit_identical() {
    let mut s = store();
    let frozen_before = s.iter().find(|p| p.name == "stage0.w").unwrap().value.clone();
    let mut adam = Adam::new(AdamConfig::default());
    for _ in 0..10 {
        set_grads(&mut s, |_, v| 2.0 * v + 0.3);
        adam.step(&mut s, 1, 1e-2).unwrap();
    }
    let p = s.iter().find(|p| p.name == "stage0.w").unwrap();
    assert_eq!(p.value, frozen_before);
    assert!(!adam.state.contains_key("stage0.w"));
    assert_eq!(adam.state["head.w"].step, 10);
    assert_ne!(s.iter().find(|p| p.name == "stage2.w").unwrap().value.data(), [1.0]);
}

#[test]
fn non_finite_gradient_aborts_before_any_update() {
    let mut s = store();
    let before = s.values();
    let mut adam = Adam::new(AdamConfig::default());
    set_grads(&mut s, |n, v| if n == "stage2.w" { f32::NAN } else { v });
    match adam.step(&mut s, 3, 1e-3) {
        Err(Error::NonFiniteGradient { name, step }) => assert_eq!((name.as_str(), step), ("stage2.w", 1)),
        other => panic!("{other:?}"),
    }
    assert_eq!(s.values(), before);
    assert!(adam.state.is_empty());
}

fn checkpoint() -> Checkpoint {
    let mut s = store();
    let mut adam = Adam::new(AdamConfig::default());
    set_grads(&mut s, |_, v| v - 0.1);
    adam.step(&mut s, 2, 1e-3).unwrap();
    let mut sched = Scheduler::new(SchedulerConfig::default()).unwrap();
    for &v in &flat()[..13] {
        sched.tick(v).unwrap();
    }
    Checkpoint {
        config_text: RunConfig::default().to_text(),
        fold: 3,
        seed: 42,
        tensors: Checkpoint::tensors_from(&s),
        optimizer: adam,
        scheduler: sched,
        normalizer: Normalizer {
            logmel: FeatureStats {
                mean: vec![-4.5],
                std: vec![2.25],
            },
            linguistic: FeatureStats {
                mean: vec![0.1, 0.2, 0.3],
                std: vec![1.0, 0.0, 3.5],
            },
        },
        best: Some(CccReport::new(0.625, 0.3125)),
    }
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let c = checkpoint();
    let bytes = c.encode();
    let back = Checkpoint::decode(&bytes).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.encode(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ackp");
    c.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(Checkpoint::load(&path).unwrap(), c);

    let mut s = store();
    for p in s.iter_mut() {
        p.value = Tensor::zeros(p.value.shape());
    }
    c.restore_params(&mut s).unwrap();
    assert_eq!(Checkpoint::tensors_from(&s), c.tensors);
}

/// Byte offset of each section tag.
fn section_offsets(bytes: &[u8]) -> Vec<usize> {
    let mut at = 8;
    let mut out = Vec::new();
    while at < bytes.len() {
        out.push(at);
        let len = u64::from_le_bytes(bytes[at + 4..at + 12].try_into().unwrap()) as usize;
        at += 12 + len;
    }
    out
}

#[test]
fn truncation_names_the_damaged_section() {
    let bytes = checkpoint().encode();
    let offsets = section_offsets(&bytes);
    assert_eq!(offsets.len(), SECTIONS.len());
    for (i, &off) in offsets.iter().enumerate() {
        let name = String::from_utf8_lossy(SECTIONS[i]).into_owned();
        let missing = Checkpoint::decode(&bytes[..off]).unwrap_err().to_string();
        assert!(missing.contains(&format!("missing section {name}")), "{missing}");
        let cut = Checkpoint::decode(&bytes[..off + 13]).unwrap_err().to_string();
        assert!(cut.contains(&name) && cut.contains("truncated"), "{cut}");
    }
}

#[test]
fn unknown_version_and_magic_are_rejected() {
    let mut bytes = checkpoint().encode();
    bytes[4] = 2;
    let e = Checkpoint::decode(&bytes).unwrap_err().to_string();
    assert!(e.contains("version 2"), "{e}");
    bytes[0] = b'Z';
    assert!(matches!(
        Checkpoint::decode(&bytes),
        Err(Error::Decode { offset: 0, .. })
    ));
}

#[test]
fn config_text_round_trips_and_rejects_unknown_keys() {
    let mut c = RunConfig::default();
    c.apply_text("model = lfan\nmodalities = visual, linguistic # comment\nfold = all\nseeds = 1,2,3\nlr = 2e-4\nmonitor = arousal\n")
        .unwrap();
    assert_eq!(c.fold, FoldSelection::All);
    assert_eq!(c.seeds, [1, 2, 3]);
    assert_eq!(c.monitor, Monitor::Arousal);
    c.validate().unwrap();
    assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);

    let d = RunConfig::default();
    assert_eq!((d.window, d.hop, d.batch, d.lr, d.min_lr), (300, 200, 12, 1e-5, 1e-8));
    assert_eq!(
        (d.weight_decay, d.patience, d.factor, d.max_epoch, d.early_stop),
        (0.001, 5, 0.1, 100, 20)
    );

    for bad in [
        "colour = red",
        "window 300",
        "hop = 400",
        "seeds =",
        "model = rnn",
        "fold = 6",
    ] {
        let e = RunConfig::from_text(bad).unwrap_err();
        assert!(e.is_validation(), "{bad}: {e}");
    }
}

proptest! {
    #[test]
    fn scheduler_matches_oracle_on_random_sequences(
        vals in prop::collection::vec(prop_oneof![Just(0.3), 0.0f64..1.0], 1..150),
    ) {
        prop_assert_eq!(scheduler_trace(&vals), scheduler_oracle(&vals));
    }

    #[test]
    fn lr_stays_on_the_decade_grid(vals in prop::collection::vec(0.0f64..1.0, 1..150)) {
        let mut s = Scheduler::new(SchedulerConfig::default()).unwrap();
        let mut last = (s.lr, s.current_group);
        for v in vals {
            if s.tick(v).unwrap().stop {
                break;
            }
            prop_assert!((1e-8..=1e-5).contains(&s.lr));
            if s.current_group == last.1 {
                prop_assert!(s.lr <= last.0);
            }
            last = (s.lr, s.current_group);
        }
    }

    #[test]
    fn checkpoint_decode_never_panics(cut in 0usize..4000, flip in any::<(usize, u8)>()) {
        let bytes = checkpoint().encode();
        let _ = Checkpoint::decode(&bytes[..cut.min(bytes.len())]);
        let mut damaged = bytes.clone();
        let i = flip.0 % damaged.len();
        damaged[i] ^= flip.1 | 1;
        let _ = Checkpoint::decode(&damaged);
    }
}
