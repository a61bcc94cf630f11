use std::collections::BTreeSet;

use pivl_core::eval::Experiment;
use pivl_core::pipeline::{train_student, AblationFlags, Stage1Output, TrainingLog};
use pivl_core::{RunConfig, SynthConfig, TrainConfig};

fn tiny() -> RunConfig {
    RunConfig {
        data: SynthConfig {
            train_identities: 6,
            test_identities: 3,
            instances_per_identity: 6,
            cameras: 2,
            ..SynthConfig::default()
        },
        train: TrainConfig {
            stage1_id_epochs: 2,
            stage1_part_epochs: 1,
            stage2_epochs: 1,
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    }
}

fn logged_terms(log: &TrainingLog) -> BTreeSet<String> {
    log.entries().iter().flat_map(|e| e.terms.keys().cloned()).collect()
}

#[test]
fn warmup_loss_starts_at_uniform_softmax_estimate() {
    // a huge temperature flattens every softmax, leaving log(batch) per direction
    let mut cfg = tiny();
    cfg.loss.tau = 1e4;
    let exp = Experiment::prepare(&cfg).unwrap();
    let mut log = TrainingLog::in_memory();
    exp.stage1(&mut log).unwrap();
    let first = log.entries()[0].terms["clip_pair"];
    let batch = cfg.train.batch_size() as f64;
    assert!((first - 2.0 * batch.ln()).abs() < 1e-3, "{first}");
}

#[test]
fn stage1_is_deterministic_and_leaves_encoders_frozen() {
    let exp = Experiment::prepare(&tiny()).unwrap();
    let enc = exp.encoder.params().digest().unwrap();
    let text = exp.text.params().digest().unwrap();
    let a = exp.stage1(&mut TrainingLog::in_memory()).unwrap();
    let b = exp.stage1(&mut TrainingLog::in_memory()).unwrap();
    assert_eq!(a.part.params().digest().unwrap(), b.part.params().digest().unwrap());
    assert_ne!(a.warmup.params().digest().unwrap(), a.part.params().digest().unwrap());
    assert_eq!(exp.encoder.params().digest().unwrap(), enc);
    assert_eq!(exp.text.params().digest().unwrap(), text);
}

#[test]
fn stage1_output_roundtrips_through_disk() {
    let exp = Experiment::prepare(&tiny()).unwrap();
    let s1 = exp.stage1(&mut TrainingLog::in_memory()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = s1.save(dir.path()).unwrap();
    assert!(files.iter().all(|f| f.exists()));
    let back = Stage1Output::load(dir.path()).unwrap();
    assert_eq!(back.warmup.params().digest().unwrap(), s1.warmup.params().digest().unwrap());
    assert_eq!(back.part.params().digest().unwrap(), s1.part.params().digest().unwrap());
}

#[test]
fn stage2_logs_the_terms_of_each_variant() {
    let exp = Experiment::prepare(&tiny()).unwrap();
    let s1 = exp.stage1(&mut TrainingLog::in_memory()).unwrap();
    let terms = |flags| {
        let mut log = TrainingLog::in_memory();
        exp.stage2(&s1, flags, &mut log).unwrap();
        logged_terms(&log)
    };
    let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
    assert_eq!(terms(AblationFlags::B), names(&["id", "triplet", "i2tce"]));
    assert_eq!(terms(AblationFlags::BPF), names(&["id", "triplet", "i2tce", "align"]));
    assert_eq!(terms(AblationFlags::BH), names(&["id", "triplet", "i2tce", "align"]));
    assert!("H,P".parse::<AblationFlags>().is_err());
}

#[test]
fn student_is_smaller_and_its_baseline_sees_no_text() {
    let cfg = tiny();
    let exp = Experiment::prepare(&cfg).unwrap();
    let s1 = exp.stage1(&mut TrainingLog::in_memory()).unwrap();
    let mut log = TrainingLog::in_memory();
    let runs = train_student(&exp.data, &cfg, &s1, &exp.text, &mut log).unwrap();
    let teacher = exp.encoder.deployed_param_count();
    assert!(runs.with_prompts.encoder.deployed_param_count() < teacher);
    assert_eq!(
        runs.with_prompts.encoder.deployed_param_count(),
        runs.baseline.encoder.deployed_param_count()
    );
    let steps = log.entries().len() / 2;
    let baseline: BTreeSet<String> = log.entries()[steps..].iter().flat_map(|e| e.terms.keys().cloned()).collect();
    assert_eq!(baseline, ["id", "triplet"].iter().map(|s| s.to_string()).collect());
}
