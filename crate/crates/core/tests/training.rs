use fewframe_core::dataio::{generate_dataset, split, GenSpec, VideoRecord};
use fewframe_core::encoders::{EncoderConfig, Model};
use fewframe_core::losses::{Combo, LossTerm, RepMode};
use fewframe_core::metrics::evaluate;
use fewframe_core::sampling::{SamplerKind, SamplerSpec};
use fewframe_core::training::*;

fn data(n: usize, seed: u64) -> (Vec<VideoRecord>, Vec<VideoRecord>) {
    let all = generate_dataset(&GenSpec { num_videos: n, seed, ..GenSpec::default() }).unwrap();
    let (train, val, _) = split(all, [0.7, 0.2, 0.1], seed).unwrap();
    (train, val)
}

fn desk() -> (Vec<VideoRecord>, Vec<VideoRecord>) {
    let all = generate_dataset(&GenSpec { num_videos: 2400, ..GenSpec::default() }).unwrap();
    let (train, val, _) = split(all, [2000.0 / 2400.0, 200.0 / 2400.0, 200.0 / 2400.0], 1).unwrap();
    (train, val)
}

fn small_cfg(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch: 8, lr0: 1e-2, seed: 3, ..TrainConfig::default() }
}

fn bits(model: &Model) -> Vec<(String, Vec<u64>)> {
    model.params().iter().map(|(n, t)| (n.to_string(), t.data().iter().map(|x| x.to_bits()).collect())).collect()
}

fn head_bits(model: &Model) -> Vec<(String, Vec<u64>)> {
    bits(model).into_iter().filter(|(n, _)| Model::is_head_param(n)).collect()
}

fn encoders() -> Vec<EncoderConfig> {
    let mut n = EncoderConfig::nextvlad(16, 8);
    n.dropout = 0.0;
    vec![EncoderConfig::hrnn(16, 8), EncoderConfig::netvlad(16, 8), n]
}

#[test]
fn one_epoch_gives_one_history_entry() {
    let all = generate_dataset(&GenSpec { num_videos: 12, ..GenSpec::default() }).unwrap();
    let (train, val) = (all[..10].to_vec(), all[10..].to_vec());
    let b = train_teacher(&train, &val, &EncoderConfig::hrnn(16, 8), &small_cfg(1)).unwrap();
    assert_eq!(b.history.len(), 1);
    assert_eq!(b.history[0].epoch, 0);
    assert_eq!(b.history[0].role, Role::Teacher);
    assert_eq!(b.best_epoch, 0);
}

#[test]
fn same_seed_gives_bit_identical_parameters() {
    let (train, val) = data(60, 2);
    for enc in encoders() {
        let a = train_teacher(&train, &val, &enc, &small_cfg(2)).unwrap();
        let b = train_teacher(&train, &val, &enc, &small_cfg(2)).unwrap();
        assert_eq!(bits(&a.model), bits(&b.model));
        assert_eq!(a.history, b.history);
        let c = train_teacher(&train, &val, &enc, &TrainConfig { seed: 4, ..small_cfg(2) }).unwrap();
        assert_ne!(bits(&a.model), bits(&c.model));
    }
}

#[test]
fn uniform_baseline_over_all_frames_equals_teacher() {
    let (train, val) = data(60, 5);
    for enc in encoders() {
        let t = train_teacher(&train, &val, &enc, &small_cfg(2)).unwrap();
        let b = train_baseline(&train, &val, &enc, &small_cfg(2), &SamplerSpec::uniform(20)).unwrap();
        assert_eq!(bits(&t.model), bits(&b.model), "{}", enc.kind_name());
        assert_eq!(b.role, Role::Baseline);
        let gaps = |h: &[EpochRecord]| h.iter().map(|r| r.val_gap).collect::<Vec<_>>();
        assert_eq!(gaps(&t.history), gaps(&b.history));
    }
}

#[test]
fn serial_training_never_touches_the_teacher() {
    let (train, val) = data(60, 6);
    let teacher = train_teacher(&train, &val, &EncoderConfig::hrnn(16, 8), &small_cfg(1)).unwrap();
    let before = bits(&teacher.model);
    for combo in Combo::ALL {
        let s = train_student_serial(&teacher, &train, &val, &DistillConfig::new(combo, 5), &small_cfg(1)).unwrap();
        assert_eq!(bits(&teacher.model), before, "combo {}", combo.name());
        assert_eq!(s.role, Role::Student);
        assert_eq!(s.sampler, Some(SamplerSpec { seed: 3, ..SamplerSpec::uniform(5) }));
        let expected_epochs = if combo == Combo::A { 2 } else { 1 };
        assert_eq!(s.history.len(), expected_epochs);
    }
}

#[test]
fn prediction_only_student_keeps_the_teacher_head() {
    let (train, val) = data(60, 7);
    for enc in encoders() {
        let teacher = train_teacher(&train, &val, &enc, &small_cfg(1)).unwrap();
        let s = train_student_serial(&teacher, &train, &val, &DistillConfig::new(Combo::C, 5), &small_cfg(2)).unwrap();
        assert_eq!(head_bits(&s.model), head_bits(&teacher.model));
        assert_ne!(bits(&s.model), bits(&Model::new(s.model.config().clone(), 3).unwrap()));
        let s = train_student_serial(&teacher, &train, &val, &DistillConfig::new(Combo::D, 5), &small_cfg(2)).unwrap();
        assert_ne!(head_bits(&s.model), head_bits(&teacher.model));
    }
}

#[test]
fn distillation_terms_leave_the_parallel_teacher_on_its_own_trajectory() {
    // Without a cross-entropy term the student never writes the shared head
    // back, so the teacher must follow exactly the serial teacher's updates.
    let (train, val) = data(60, 8);
    let enc = EncoderConfig::hrnn(16, 8);
    let serial = train_teacher(&train, &val, &enc, &small_cfg(2)).unwrap();
    let (t, s) = train_parallel(&train, &val, &enc, &DistillConfig::new(Combo::C, 5), &small_cfg(2)).unwrap();
    assert_eq!(bits(&t.model), bits(&serial.model));
    assert_eq!(t.history, serial.history);
    assert_eq!(s.history.len(), 2);
}

#[test]
fn parallel_step_counts() {
    let (train, val) = data(50, 9);
    let cfg = TrainConfig { epochs: 3, batch: 8, seed: 1, ..TrainConfig::default() };
    let (t, s) =
        train_parallel(&train, &val, &EncoderConfig::netvlad(16, 8), &DistillConfig::new(Combo::E, 5), &cfg).unwrap();
    let per_epoch = train.len().div_ceil(8) as u64;
    assert_eq!(t.updates, 3 * per_epoch);
    assert_eq!(s.updates, 3 * per_epoch);
    assert_eq!(t.history.len(), 3);
    assert_eq!(s.history.len(), 3);
    assert!(t.history.iter().all(|r| r.role == Role::Teacher));
    assert!(s.history.iter().all(|r| r.role == Role::Student));
}

#[test]
fn combo_a_runs_two_stages_serially_and_is_rejected_in_parallel() {
    let (train, val) = data(40, 10);
    let enc = EncoderConfig::hrnn(16, 8);
    let teacher = train_teacher(&train, &val, &enc, &small_cfg(1)).unwrap();
    let s = train_student_serial(&teacher, &train, &val, &DistillConfig::new(Combo::A, 5), &small_cfg(2)).unwrap();
    assert_eq!(s.history.len(), 4);
    assert_eq!(s.updates, 4 * train.len().div_ceil(8) as u64);
    let stage1: Vec<_> = s.history[..2].iter().map(|r| r.terms.iter().map(|(t, _)| *t).collect::<Vec<_>>()).collect();
    assert!(stage1.iter().all(|t| t == &[LossTerm::Rep]));
    assert!(s.history[2..].iter().all(|r| r.terms.iter().map(|(t, _)| *t).eq([LossTerm::Ce])));
    let err = train_parallel(&train, &val, &enc, &DistillConfig::new(Combo::A, 5), &small_cfg(1)).unwrap_err();
    assert!(matches!(err, TrainError::Config(_)), "{err}");
}

#[test]
fn configuration_errors_are_reported() {
    let (train, val) = data(30, 11);
    let enc = EncoderConfig::netvlad(16, 8);
    assert!(matches!(train_teacher(&[], &val, &enc, &small_cfg(1)), Err(TrainError::Config(_))));
    assert!(matches!(train_teacher(&train, &[], &enc, &small_cfg(1)), Err(TrainError::Config(_))));
    let bad = TrainConfig { lr0: 0.0, ..small_cfg(1) };
    assert!(matches!(train_teacher(&train, &val, &enc, &bad), Err(TrainError::Config(_))));
    let wrong_dim = EncoderConfig::netvlad(12, 8);
    assert!(matches!(train_teacher(&train, &val, &wrong_dim, &small_cfg(1)), Err(TrainError::Config(_))));
    let too_few_classes = EncoderConfig::netvlad(16, 2);
    assert!(train_teacher(&train, &val, &too_few_classes, &small_cfg(1)).is_err());

    let teacher = train_teacher(&train, &val, &enc, &small_cfg(1)).unwrap();
    let mut inter = DistillConfig::new(Combo::B, 5);
    inter.rep_mode = RepMode::Intermediate;
    assert!(matches!(train_student_serial(&teacher, &train, &val, &inter, &small_cfg(1)), Err(TrainError::Config(_))));
    let baseline = train_baseline(&train, &val, &enc, &small_cfg(1), &SamplerSpec::uniform(5)).unwrap();
    let err = train_student_serial(&baseline, &train, &val, &DistillConfig::new(Combo::E, 5), &small_cfg(1));
    assert!(matches!(err, Err(TrainError::Config(_))));
    assert!(train_baseline(&train, &val, &enc, &small_cfg(1), &SamplerSpec::uniform(0)).is_err());
}

#[test]
fn best_epoch_has_the_maximum_validation_gap() {
    let (train, val) = data(80, 12);
    for enc in encoders() {
        let b = train_teacher(&train, &val, &enc, &TrainConfig { lr0: 0.05, ..small_cfg(6) }).unwrap();
        let max = b.history.iter().map(|r| r.val_gap).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(b.best().unwrap().val_gap, max);
        assert_eq!(b.history[b.best_epoch].val_gap, max);
        // the returned parameters are the best epoch's, not the last epoch's
        assert_eq!(evaluate(&b.model, &val, None).unwrap().gap, max);
    }
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let (train, val) = data(40, 13);
    for enc in encoders() {
        let b = train_baseline(&train, &val, &enc, &small_cfg(1), &SamplerSpec::new(SamplerKind::Random, 4)).unwrap();
        let mut buf = Vec::new();
        b.save(&mut buf).unwrap();
        let back = ModelBundle::load(&buf[..]).unwrap();
        assert_eq!(bits(&back.model), bits(&b.model));
        assert_eq!(back.model.config(), b.model.config());
        assert_eq!(back.role, Role::Baseline);
        assert_eq!(back.sampler, b.sampler);
        let mut again = Vec::new();
        back.save(&mut again).unwrap();
        assert_eq!(buf, again);
    }
}

#[test]
fn history_is_ndjson() {
    let (train, val) = data(30, 14);
    let b = train_teacher(&train, &val, &EncoderConfig::netvlad(16, 8), &small_cfg(2)).unwrap();
    let mut out = Vec::new();
    b.write_history(&mut out).unwrap();
    let lines: Vec<serde_json::Value> =
        String::from_utf8(out).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["epoch"], i);
        assert_eq!(l["role"], "teacher");
        assert!(l["loss"].is_f64() && l["val_gap"].is_f64());
    }
}

#[test]
fn heavy_training_memorizes_ten_videos() {
    let all = generate_dataset(&GenSpec { num_videos: 10, seed: 21, ..GenSpec::default() }).unwrap();
    let cfg = TrainConfig { epochs: 60, batch: 5, lr0: 1e-2, decay: 1.0, l2: 0.0, seed: 2, ..TrainConfig::default() };
    let b = train_teacher(&all, &all, &EncoderConfig::hrnn(16, 8), &cfg).unwrap();
    assert_eq!(evaluate(&b.model, &all, None).unwrap().gap, 1.0);
}

#[test]
fn representation_loss_decreases_over_epochs() {
    let (train, val) = desk();
    let cfg = TrainConfig { lr0: 1e-2, seed: 1, ..TrainConfig::default() };
    let teacher = train_teacher(&train, &val, &EncoderConfig::hrnn(16, 8), &cfg).unwrap();
    let s = train_student_serial(&teacher, &train, &val, &DistillConfig::new(Combo::B, 5), &cfg).unwrap();
    let rep: Vec<f64> =
        s.history.iter().map(|r| r.terms.iter().find(|(t, _)| *t == LossTerm::Rep).unwrap().1).collect();
    assert_eq!(rep.len(), 5);
    let rises = rep.windows(2).filter(|w| w[1] >= w[0]).count();
    assert!(rises <= 1, "{rep:?}");
}

#[test]
fn teacher_reaches_the_skyline_reference_stably() {
    let (train, val) = desk();
    let gaps: Vec<f64> = (1..=3)
        .map(|seed| {
            let cfg = TrainConfig { seed, ..TrainConfig::default() };
            train_teacher(&train, &val, &EncoderConfig::hrnn(16, 8), &cfg).unwrap().best().unwrap().val_gap
        })
        .collect();
    let mean = gaps.iter().sum::<f64>() / 3.0;
    for g in &gaps {
        assert!(*g > 0.85, "{gaps:?}");
        assert!((g - mean).abs() <= 0.03, "{gaps:?}");
    }
}
