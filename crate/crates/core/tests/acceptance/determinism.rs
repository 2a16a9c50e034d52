use std::fs;
use std::path::Path;

use stvisit_core::data::{generate_synthetic, inverse_transform, log_transform, save_bundle};
use stvisit_core::model::Batch;
use stvisit_core::pipeline::{prepare, train_variant};
use stvisit_core::training::{write_history, Checkpoint};

use crate::support::{rand_vec, rng, serial, small_run, verdict};

struct Artifacts {
    data: Vec<(String, Vec<u8>)>,
    history: Vec<u8>,
    checkpoint: Vec<u8>,
}

fn produce(seed: u64, dir: &Path) -> Artifacts {
    let run = small_run(seed);
    let bundle = generate_synthetic(&run.data).unwrap();
    let data_dir = dir.join("data");
    save_bundle(&bundle, &run.window, &data_dir).unwrap();
    let mut files: Vec<_> = fs::read_dir(&data_dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    let data = files
        .iter()
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(p).unwrap(),
            )
        })
        .collect();

    let prepared = prepare(&bundle, &run).unwrap();
    let (model, outcome) = train_variant(&bundle, &prepared, &run, run.variant).unwrap();
    let mut history = Vec::new();
    write_history(&outcome.history, &mut history).unwrap();
    let ckpt = Checkpoint::capture(
        &model,
        &outcome,
        serde_json::from_str(&run.to_json().unwrap()).unwrap(),
    );
    let path = dir.join("checkpoint.bin");
    ckpt.save(&model, &path).unwrap();
    Artifacts {
        data,
        history,
        checkpoint: fs::read(path).unwrap(),
    }
}

#[test]
fn criterion_09_determinism_and_round_trip() {
    let _serial = serial();
    let (a_dir, b_dir) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let a = produce(11, a_dir.path());
    let b = produce(11, b_dir.path());
    let data_same = a.data == b.data;
    let history_same = a.history == b.history;
    let checkpoint_same = a.checkpoint == b.checkpoint;

    // reload and compare every head output bit for bit
    let run = small_run(11);
    let bundle = generate_synthetic(&run.data).unwrap();
    let prepared = prepare(&bundle, &run).unwrap();
    let (model, _) = train_variant(&bundle, &prepared, &run, run.variant).unwrap();
    let reloaded = Checkpoint::load(&a_dir.path().join("checkpoint.bin"))
        .unwrap()
        .model()
        .unwrap();
    let idx: Vec<usize> = prepared.splits.test.clone().collect();
    let batch = Batch::from_windows(&prepared.windows, &idx).unwrap();
    let before = model.eval_outputs(&prepared.ctx, &batch).unwrap();
    let after = reloaded.eval_outputs(&prepared.ctx, &batch).unwrap();
    let reload_same = before.len() == after.len()
        && before
            .iter()
            .zip(&after)
            .all(|(x, y)| x.to_bits() == y.to_bits());

    let mut r = rng(99);
    let mut counts = rand_vec(&mut r, 2000, 0.0, 1e6);
    counts.extend([0.0, 1.0, 1e-9, 1e12]);
    let back = inverse_transform(&log_transform(&counts).unwrap());
    let round_trip = counts
        .iter()
        .zip(&back)
        .map(|(x, y)| (x - y).abs() / x.abs().max(1.0))
        .fold(0.0, f64::max);

    let pass = data_same && history_same && checkpoint_same && reload_same && round_trip <= 1e-12;
    verdict(
        9,
        "determinism and round trip",
        pass,
        &format!(
            "data identical {} ({} files), history identical {}, checkpoint identical {} ({} bytes), reload bit-identical {} ({} outputs), log round trip {:.1e} (tol 1e-12)",
            data_same,
            a.data.len(),
            history_same,
            checkpoint_same,
            a.checkpoint.len(),
            reload_same,
            before.len(),
            round_trip
        ),
    );
    assert!(pass);
}
