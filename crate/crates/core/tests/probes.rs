//! Capability probes against pretrained and untrained encoders.

use mce_core::model::{FrozenUnimodal, ModelConfig, MultiModalModel};
use mce_core::synth::{generate_split, Dataset, SynthConfig};
use mce_core::trainer::{frozen_accuracy, pretrain_unimodal, probe_capability, probe_frozen, PretrainConfig, ProbeConfig};

fn data(seed: u64) -> (Dataset, Dataset) {
    let cfg = SynthConfig { samples: 1000, seed, ..SynthConfig::default() };
    generate_split(&cfg, 500).unwrap()
}

#[test]
fn probe_of_a_pretrained_encoder_recovers_its_accuracy() {
    let (train, test) = data(11);
    let mc = ModelConfig::default();
    for m in 0..3 {
        let frozen = pretrain_unimodal(&train, m, &mc, &PretrainConfig::default(), 11).unwrap();
        let before = frozen.params().fingerprint();
        let own = frozen_accuracy(&frozen, &test).unwrap();
        let probe = probe_frozen(&frozen, &train, &test, &ProbeConfig::default(), 11).unwrap();
        assert!((probe - own).abs() <= 0.05, "modality {m}: probe {probe}, own {own}");
        assert_eq!(frozen.params().fingerprint(), before);
    }
}

#[test]
fn random_encoder_sits_between_chance_and_ceiling() {
    let mc = ModelConfig::default();
    let m = 1;
    let (mut random, mut ceiling) = (0.0, 0.0);
    let seeds = [21, 22, 23];
    for &seed in &seeds {
        let (train, test) = data(seed);
        let untrained = FrozenUnimodal::init(&mc, m, seed).unwrap();
        random += probe_frozen(&untrained, &train, &test, &ProbeConfig::default(), seed).unwrap();
        let trained = pretrain_unimodal(&train, m, &mc, &PretrainConfig::default(), seed).unwrap();
        ceiling += probe_frozen(&trained, &train, &test, &ProbeConfig::default(), seed).unwrap();
    }
    let (random, ceiling) = (random / seeds.len() as f64, ceiling / seeds.len() as f64);
    assert!(random > 0.25 && random < ceiling, "random {random}, ceiling {ceiling}");
}

#[test]
fn probing_the_joint_model_leaves_it_untouched() {
    let (train, test) = data(31);
    let model = MultiModalModel::new(&ModelConfig::default(), 31).unwrap();
    let before = model.params().fingerprint();
    let a = probe_capability(&model, 2, &train, &test, &ProbeConfig::default(), 31).unwrap();
    let b = probe_capability(&model, 2, &train, &test, &ProbeConfig::default(), 31).unwrap();
    assert_eq!(a, b);
    assert_eq!(model.params().fingerprint(), before);
}
