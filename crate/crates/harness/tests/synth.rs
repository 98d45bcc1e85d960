use hypca_harness::synth::default_patterns;
use hypca_harness::{linear_probe, synth_dataset, ProbeConfig, SynthSpec, SyntheticDataset};

fn small() -> SynthSpec {
    SynthSpec {
        samples: 40,
        image_size: 8,
        ..SynthSpec::default()
    }
}

#[test]
fn noiseless_samples_of_a_class_are_identical() {
    let spec = SynthSpec {
        noise: vec![0.0, 0.0],
        ..small()
    };
    let ds = synth_dataset(&spec).unwrap();
    for j in 0..2 {
        assert_eq!(ds.sample(1, j), ds.sample(5, j));
        assert_ne!(ds.sample(1, j), ds.sample(2, j));
    }
}

#[test]
fn regeneration_is_byte_identical() {
    let a = synth_dataset(&small()).unwrap();
    let b = synth_dataset(&small()).unwrap();
    let (mut ba, mut bb) = (Vec::new(), Vec::new());
    a.write(&mut ba).unwrap();
    b.write(&mut bb).unwrap();
    assert_eq!(ba, bb);
    let other = synth_dataset(&SynthSpec { seed: 8, ..small() }).unwrap();
    assert_ne!(a.images, other.images);
}

#[test]
fn samples_do_not_depend_on_dataset_size() {
    let a = synth_dataset(&small()).unwrap();
    let b = synth_dataset(&SynthSpec { samples: 60, ..small() }).unwrap();
    assert_eq!(a.sample(17, 1), b.sample(17, 1));
}

#[test]
fn split_is_80_10_10_disjoint_and_balanced() {
    let spec = SynthSpec { samples: 1000, ..small() };
    let (tr, va, te) = spec.split();
    assert_eq!((tr.len(), va.len(), te.len()), (800, 100, 100));
    assert_eq!((tr.end, va.end, te.end), (va.start, te.start, 1000));
    let ds = synth_dataset(&spec).unwrap();
    for range in [tr, va, te] {
        let len = range.len();
        let mut counts = [0usize; 4];
        range.for_each(|i| counts[ds.labels[i]] += 1);
        assert!(counts.iter().all(|&c| c == len / 4), "{counts:?}");
    }
}

#[test]
fn labels_cycle_through_classes() {
    let ds = synth_dataset(&small()).unwrap();
    assert!(ds.labels.iter().enumerate().all(|(i, &l)| l == i % 4));
}

#[test]
fn batch_packs_modalities_as_nchw() {
    let ds = synth_dataset(&small()).unwrap();
    let b = ds.batch::<f64>(&[3, 7]);
    assert_eq!(b.len(), 2);
    assert_eq!(b[1].shape(), [2, 3, 8, 8]);
    assert_eq!(&b[1].data()[192..], ds.sample(7, 1));
    let b32 = ds.batch::<f32>(&[3]);
    assert_eq!(b32[0].data()[0], ds.sample(3, 0)[0] as f32);
}

#[test]
fn file_roundtrip_and_bad_magic() {
    let ds = synth_dataset(&small()).unwrap();
    let mut bytes = Vec::new();
    ds.write(&mut bytes).unwrap();
    assert_eq!(SyntheticDataset::read(&mut bytes.as_slice()).unwrap(), ds);
    bytes[0] ^= 1;
    assert!(SyntheticDataset::read(&mut bytes.as_slice()).is_err());
}

#[test]
fn invalid_specs_are_rejected() {
    let bad = [
        SynthSpec { classes: 1, ..small() },
        SynthSpec { modalities: 1, noise: vec![1.0], contrast: vec![1.0], ..small() },
        SynthSpec { noise: vec![1.0], ..small() },
        SynthSpec { noise: vec![-1.0, 1.0], ..small() },
        SynthSpec { samples: 5, ..small() },
        SynthSpec { patterns: Some(default_patterns(3)), ..small() },
    ];
    for spec in bad {
        assert!(synth_dataset(&spec).is_err(), "{spec:?}");
    }
}

#[test]
fn linear_probe_separates_the_default_spec() {
    let ds = synth_dataset(&SynthSpec::default()).unwrap();
    let m = linear_probe(&ds, ProbeConfig::default()).unwrap();
    assert!(m.accuracy >= 0.9, "probe accuracy {}", m.accuracy);
}

#[test]
fn linear_probe_is_at_chance_without_signal() {
    let spec = SynthSpec {
        contrast: vec![0.0, 0.0],
        ..SynthSpec::default()
    };
    let ds = synth_dataset(&spec).unwrap();
    let m = linear_probe(&ds, ProbeConfig::default()).unwrap();
    // 100 balanced test samples: 3σ of a binomial at p = 1/4 is about 0.13.
    assert!((m.accuracy - 0.25).abs() < 0.13, "probe accuracy {}", m.accuracy);
}
