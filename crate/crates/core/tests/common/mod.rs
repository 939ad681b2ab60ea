#![allow(dead_code)]

use polyinter_core::config::Config;
use polyinter_core::scene::{generate_dataset, Dataset, Extent};
use polyinter_core::training::{pretrain_all, Checkpoint};

pub fn desk() -> Config {
    let text = std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/../../configs/desk.toml"
    ))
    .unwrap();
    toml::from_str(&text).unwrap()
}

/// Desk roles and encoders on a 16×8 m world with short schedules.
pub fn small() -> Config {
    let mut c = desk();
    c.data.extent = Extent::new(0.0, 16.0, 0.0, 8.0).unwrap();
    c.data.scenes = 40;
    c.data.val_scenes = 4;
    c.data.test_scenes = 8;
    c.data.objects = 3;
    c.pretrain.steps = 40;
    c.interpreter.d_k = 32;
    c.interpreter.sampling_n = 4;
    c.phase1.steps = 20;
    c.phase2.steps = 20;
    c.sweep.grid.retain(|&(r, _)| r <= 8);
    c.validate().unwrap();
    c
}

pub fn data(cfg: &Config) -> Dataset {
    generate_dataset(&cfg.dataset_spec()).unwrap()
}

pub fn pretrained(cfg: &Config, data: &Dataset) -> Checkpoint {
    pretrain_all(cfg, data, 1).unwrap()
}
