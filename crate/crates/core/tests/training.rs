//! Training-loop contracts on tiny in-memory samples.

use stagematte::dataset::{Role, Sample};
use stagematte::image::{AlphaMask, Image, ScribbleLabel, ScribbleMap};
use stagematte::net::{Checkpoint, Network, ParamSet, REFINER_PREFIX};
use stagematte::training::{
    finetune_student, finetune_student_direct, finetune_teacher, train_base, TrainConfig,
};
use stagematte::Error;

const N: usize = 16;

fn sample(id: &str, role: Role, k: usize) -> Sample {
    let c = 4.0 + k as f64;
    let alpha = AlphaMask::from_fn(N, N, |x, y| {
        let d = ((x as f64 - c).powi(2) + (y as f64 - 8.0).powi(2)).sqrt();
        (4.5 - d).clamp(0.0, 1.0)
    })
    .unwrap();
    let background = Image::from_fn(N, N, |x, y| [0.2 + 0.02 * x as f64, 0.3, 0.1 + 0.03 * y as f64]).unwrap();
    let image = Image::from_fn(N, N, |x, y| {
        let a = alpha.get(x, y);
        let b = background.pixel(x, y);
        [a * 0.9 + (1.0 - a) * b[0], a * 0.8 + (1.0 - a) * b[1], a * 0.1 + (1.0 - a) * b[2]]
    })
    .unwrap();
    let mut scribbles = ScribbleMap::unlabeled(N, N).unwrap();
    scribbles.set(c as usize, 8, ScribbleLabel::Foreground);
    scribbles.set(c as usize + 1, 8, ScribbleLabel::Foreground);
    scribbles.set(0, 0, ScribbleLabel::Background);
    scribbles.set(15, 15, ScribbleLabel::Background);
    Sample {
        id: id.into(),
        role,
        image,
        background,
        pseudo_label: Some(alpha.clone()),
        alpha: Some(alpha),
        scribbles: Some(scribbles),
    }
}

fn samples(role: Role, n: usize) -> Vec<Sample> {
    (0..n).map(|k| sample(&format!("{}-{k}", role.as_str()), role, k)).collect()
}

fn cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        iterations: 3,
        lr_initial: 1e-3,
        lr_after: 1e-3,
        coarse_epochs: 1,
        joint_epochs: 1,
        ..TrainConfig::default()
    }
}

fn refiner(p: &ParamSet) -> Vec<(String, Vec<f64>)> {
    p.iter()
        .filter(|(n, _)| n.starts_with(REFINER_PREFIX))
        .map(|(n, t)| (n.to_string(), t.data.clone()))
        .collect()
}

fn coarse(p: &ParamSet) -> Vec<(String, Vec<f64>)> {
    p.iter()
        .filter(|(n, _)| !n.starts_with(REFINER_PREFIX))
        .map(|(n, t)| (n.to_string(), t.data.clone()))
        .collect()
}

#[test]
fn training_is_reproducible() {
    let base = samples(Role::Base, 3);
    let scr = samples(Role::CaptureStage, 2);
    let run = || {
        let ck = Checkpoint::init(Network::teacher(), 5).unwrap();
        let (ck, log) = train_base(ck, &base, &cfg()).unwrap();
        let (ck, log2) = finetune_teacher(ck, &base, &scr, &cfg()).unwrap();
        (ck.to_bytes().unwrap(), log, log2)
    };
    let (a, la, la2) = run();
    let (b, lb, lb2) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert_eq!(la2, lb2);
    assert!(la[2].base_loss.unwrap() < la[0].base_loss.unwrap() * 2.0);
}

#[test]
fn student_coarse_phase_keeps_refiner() {
    let pseudo = samples(Role::Unlabeled, 3);
    let ck = Checkpoint::init(Network::student(), 5).unwrap();
    let before = ck.params.clone();
    let only_coarse = TrainConfig {
        joint_epochs: 0,
        ..cfg()
    };
    let (after, log) = finetune_student(ck.clone(), &pseudo, &only_coarse).unwrap();
    assert!(log.iter().all(|l| l.phase == "coarse"));
    assert_eq!(refiner(&after.params), refiner(&before));
    assert_ne!(coarse(&after.params), coarse(&before));

    let (joint, _) = finetune_student(ck, &pseudo, &cfg()).unwrap();
    assert_ne!(refiner(&joint.params), refiner(&before));
}

#[test]
fn direct_student_freeze_contract() {
    let base = samples(Role::Base, 3);
    let scr = samples(Role::CaptureStage, 2);
    let ck = Checkpoint::init(Network::student(), 5).unwrap();
    let before = ck.params.clone();
    let (frozen, _) = finetune_student_direct(ck.clone(), &base, &scr, &cfg(), true).unwrap();
    assert_eq!(refiner(&frozen.params), refiner(&before));
    assert_ne!(coarse(&frozen.params), coarse(&before));
    let (again, _) = finetune_student_direct(ck.clone(), &base, &scr, &cfg(), true).unwrap();
    assert_eq!(again.to_bytes().unwrap(), frozen.to_bytes().unwrap());

    let (both, log) = finetune_student_direct(ck, &base, &scr, &cfg(), false).unwrap();
    assert!(log.iter().any(|l| l.phase == "refiner"));
    assert_eq!(coarse(&both.params), coarse(&frozen.params));
    assert_ne!(refiner(&both.params), refiner(&before));
}

#[test]
fn validation_records_are_rejected() {
    let base = samples(Role::Base, 2);
    let val = samples(Role::Validation, 1);
    let mixed: Vec<Sample> = base.iter().cloned().chain(val.iter().cloned()).collect();
    let teacher = Checkpoint::init(Network::teacher(), 1).unwrap();
    let student = Checkpoint::init(Network::student(), 1).unwrap();
    let is_val = |r: Result<_, Error>| matches!(r, Err(Error::ValidationRecord { .. }));
    assert!(is_val(train_base(teacher.clone(), &mixed, &cfg()).map(|_| ())));
    assert!(is_val(finetune_teacher(teacher, &base, &val, &cfg()).map(|_| ())));
    assert!(is_val(finetune_student(student.clone(), &val, &cfg()).map(|_| ())));
    assert!(is_val(finetune_student_direct(student, &mixed, &[], &cfg(), true).map(|_| ())));
}

#[test]
fn all_base_finetune_without_scribbles_is_continued_base_training() {
    let base = samples(Role::Base, 3);
    let c = TrainConfig {
        base_fraction: 1.0,
        noise_sigma_max: 0.0,
        ..cfg()
    };
    let ck = Checkpoint::init(Network::teacher(), 2).unwrap();
    let (a, _) = finetune_teacher(ck.clone(), &base, &[], &c).unwrap();
    let (b, _) = train_base(ck, &base, &c).unwrap();
    assert_eq!(a.params, b.params);
}
