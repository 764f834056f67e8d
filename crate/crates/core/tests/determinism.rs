use std::fs;
use std::path::Path;

use textspot_core::dataset::{generate_dataset, Dataset, Sample};
use textspot_core::synth::{generate_document, GenConfig};
use textspot_core::{Alphabet, Config, Trainer};

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn generation_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = GenConfig::default();
    let alphabet = Alphabet::default();
    generate_dataset(&tmp.path().join("a"), 12, 5, &cfg, &alphabet).unwrap();
    generate_dataset(&tmp.path().join("b"), 12, 5, &cfg, &alphabet).unwrap();
    generate_dataset(&tmp.path().join("c"), 12, 6, &cfg, &alphabet).unwrap();
    let (a, b, c) = (files(&tmp.path().join("a")), files(&tmp.path().join("b")), files(&tmp.path().join("c")));
    assert_eq!(a.len(), 25);
    assert_eq!(a, b);
    assert_ne!(a, c);
    let ds = Dataset::load(&tmp.path().join("a")).unwrap();
    assert_eq!(ds.len(), 12);
    assert!(ds.samples.iter().all(|s| (1..=3).contains(&s.boxes.len())));
}

#[test]
fn training_is_bit_identical() {
    let mut cfg = Config::default();
    cfg.model.backbone.fpn_channels = 8;
    cfg.model.rpn.head_hidden = 8;
    cfg.train.seed = 3;
    cfg.train.checkpoint_every = 0;
    let gen = GenConfig { height: 64, width: 64, font_size: (10.0, 12.0), lines: (1, 2), ..GenConfig::default() };
    let data: Vec<Sample> = (0..5)
        .map(|i| Sample::from_document(i.to_string(), generate_document(&gen, &Alphabet::default(), i).unwrap()))
        .collect();
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: u64| {
        let mut c = cfg.clone();
        c.train.seed = seed;
        let path = tmp.path().join(name);
        Trainer::new(c).unwrap().train(&data, 2, None, Some(&path), |_| {}).unwrap();
        fs::read(path).unwrap()
    };
    let (a, b, c) = (run("a.ckpt", 3), run("b.ckpt", 3), run("c.ckpt", 4));
    assert_eq!(a, b);
    assert_ne!(a, c);
}
