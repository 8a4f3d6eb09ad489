//! Shared trained fixtures for integration tests.
//!
//! Datasets and checkpoints live under target/uvflow-fixtures and are only
//! rebuilt when missing or stale. The first build trains the detector and
//! both flow checkpoints at the default budget, which takes on the order of
//! ninety minutes of desktop CPU time; every later run reuses the cache and
//! starts immediately.

#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use uvflow::editkit::disentangle_train;
use uvflow::flowdit::{self, FlowModel, ModelConfig, TrainConfig, TrainSample};
use uvflow::landmarks::{
    self, image_to_array, train_detector, Detector, DetectorConfig, DetectorTrainConfig,
};
use uvflow::toyfaces::{dataset_gen, load_dataset, DatasetConfig, LoadedSample, Portrait};

pub const TRAIN_N: usize = 256;
pub const TRAIN_SEED: u64 = 1;
pub const HELDOUT_N: usize = 200;
pub const HELDOUT_SEED: u64 = 2;
pub const MODEL_SEED: u64 = 0;
pub const DIS_P: f64 = 0.3;
/// The fine-tune reseeds the data stream so it draws fresh (t, noise) pairs
/// instead of replaying the base run's.
pub const DIS_SEED: u64 = 1;

pub struct Fixtures {
    pub train_dir: PathBuf,
    pub heldout_dir: PathBuf,
    pub detector: PathBuf,
    pub model: PathBuf,
    pub model_dis: PathBuf,
}

pub fn fixtures_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/uvflow-fixtures/v1")
}

/// Builds whatever is missing and returns the fixture paths. Each artifact
/// is written to a temp name and renamed, so an interrupted build never
/// leaves a checkpoint that passes the staleness checks.
pub fn ensure_fixtures() -> Fixtures {
    let root = fixtures_root();
    fs::create_dir_all(&root).expect("create fixture root");
    let fx = Fixtures {
        train_dir: root.join("data_train"),
        heldout_dir: root.join("data_heldout"),
        detector: root.join("detector.ckpt"),
        model: root.join("model.ckpt"),
        model_dis: root.join("model_dis.ckpt"),
    };
    ensure_dataset(&fx.train_dir, TRAIN_N, TRAIN_SEED);
    ensure_dataset(&fx.heldout_dir, HELDOUT_N, HELDOUT_SEED);
    ensure_detector(&fx);
    ensure_model(&fx);
    ensure_disentangled(&fx);
    fx
}

pub fn portrait_of(s: &LoadedSample) -> Portrait {
    Portrait {
        pixels: s.portrait.clone(),
        pose_shift: s.pose_shift,
        occluders: s.occluders.clone(),
    }
}

pub fn train_samples(data: &[LoadedSample], layered: bool) -> Vec<TrainSample<f32>> {
    data.iter()
        .map(|s| TrainSample {
            x0: image_to_array(&s.texture),
            cond: image_to_array(&s.portrait),
            t_skin: layered.then(|| image_to_array(&s.t_skin)),
            t_skin_mouth: layered.then(|| image_to_array(&s.t_skin_mouth)),
        })
        .collect()
}

fn dataset_ok(dir: &Path, n: usize) -> bool {
    dir.join("manifest.tsv").exists()
        && load_dataset(dir).map(|s| s.len() == n).unwrap_or(false)
}

fn ensure_dataset(dir: &Path, n: usize, seed: u64) {
    if dataset_ok(dir, n) {
        return;
    }
    if dir.exists() {
        fs::remove_dir_all(dir).expect("clear stale dataset");
    }
    eprintln!("[fixtures] generating {n} samples into {}", dir.display());
    dataset_gen(&DatasetConfig::new(n, seed), dir).expect("dataset generation");
}

fn ensure_detector(fx: &Fixtures) {
    if Detector::<f32>::load(&fx.detector).is_ok() {
        return;
    }
    let data = load_dataset(&fx.train_dir).expect("load train data");
    let samples: Vec<_> = data
        .iter()
        .map(|s| (image_to_array::<f32>(&s.texture), s.landmarks.clone()))
        .collect();
    let mut det = Detector::new(DetectorConfig::default());
    let tcfg = DetectorTrainConfig::default();
    eprintln!("[fixtures] training landmark detector for {} steps", tcfg.steps);
    let t0 = Instant::now();
    let losses = train_detector(&mut det, &samples, &tcfg).expect("detector training");
    let l2: f64 = data
        .iter()
        .take(32)
        .map(|s| landmarks::landmark_l2(&det.detect(&image_to_array::<f32>(&s.texture)), &s.landmarks))
        .sum::<f64>()
        / 32.0;
    eprintln!(
        "[fixtures] detector done in {:.0}s, loss {:.4} -> {:.4}, train landmark l2 {l2:.3} px",
        t0.elapsed().as_secs_f64(),
        losses[0],
        losses[losses.len() - 1],
    );
    commit(&fx.detector, |tmp| det.save(tmp).expect("save detector"));
}

fn model_ok(path: &Path, want_dis: bool, want_steps: u64) -> bool {
    match FlowModel::<f32>::load_checkpoint(path) {
        Ok(m) => {
            *m.cfg() == ModelConfig::default()
                && m.disentangled() == want_dis
                && m.train_state().map(|s| s.step) == Some(want_steps)
        }
        Err(_) => false,
    }
}

fn ensure_model(fx: &Fixtures) {
    let tcfg = TrainConfig::default();
    if model_ok(&fx.model, false, tcfg.steps) {
        return;
    }
    let data = load_dataset(&fx.train_dir).expect("load train data");
    let samples = train_samples(&data, false);
    let mut model = FlowModel::<f32>::new(ModelConfig::default(), MODEL_SEED).expect("model init");
    eprintln!(
        "[fixtures] training flow model for {} steps (slow; cached for later runs)",
        tcfg.steps
    );
    let t0 = Instant::now();
    flowdit::train(&mut model, &samples, &tcfg, None, |step, loss| {
        if step % 25 == 0 || step + 1 == tcfg.steps {
            eprintln!(
                "[fixtures] model step {step}/{} loss {loss:.5} elapsed {:.0}s",
                tcfg.steps,
                t0.elapsed().as_secs_f64()
            );
        }
    })
    .expect("model training");
    commit(&fx.model, |tmp| {
        model.save_checkpoint(tmp, None).expect("save model");
    });
}

fn ensure_disentangled(fx: &Fixtures) {
    let base_steps = TrainConfig::default().steps;
    if model_ok(&fx.model_dis, true, base_steps * 2) {
        return;
    }
    let data = load_dataset(&fx.train_dir).expect("load train data");
    let samples = train_samples(&data, true);
    let mut model = FlowModel::<f32>::load_checkpoint(&fx.model).expect("load base model");
    let tcfg = TrainConfig { seed: DIS_SEED, ..TrainConfig::default() };
    eprintln!(
        "[fixtures] group-truncation fine-tune for {} steps at p = {DIS_P}",
        tcfg.steps
    );
    let t0 = Instant::now();
    disentangle_train(&mut model, &samples, &tcfg, DIS_P, |step, loss| {
        if step % 25 == 0 || step + 1 == tcfg.steps {
            eprintln!(
                "[fixtures] fine-tune step {step}/{} loss {loss:.5} elapsed {:.0}s",
                tcfg.steps,
                t0.elapsed().as_secs_f64()
            );
        }
    })
    .expect("fine-tune");
    commit(&fx.model_dis, |tmp| {
        model.save_checkpoint(tmp, None).expect("save fine-tuned model");
    });
}

fn commit(path: &Path, write: impl FnOnce(&Path)) {
    let tmp = path.with_extension("tmp");
    write(&tmp);
    fs::rename(&tmp, path).expect("commit fixture");
}
