use std::fs;
use std::path::Path;

use ogdr_core::vae::{train_loop, Checkpoint, Mode, TrainConfig, LOG_HEADER, METRICS_HEADER};
use ogdr_core::Error;

fn small(mode: Mode) -> TrainConfig {
    TrainConfig {
        mode,
        total_steps: 20,
        batch_size: 4,
        hidden: 4,
        image_size: 16,
        train_images: 24,
        val_images: 6,
        eval_interval: 5,
        checkpoint_interval: 10,
        ..TrainConfig::default()
    }
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|rec| rec.unwrap().iter().map(str::to_string).collect())
        .collect()
}

#[test]
fn identical_configs_give_identical_bytes() {
    for mode in [Mode::Vq, Mode::Gdr, Mode::Ogdr] {
        let cfg = small(mode);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ra = train_loop(&cfg, a.path(), None).unwrap();
        let rb = train_loop(&cfg, b.path(), None).unwrap();
        assert_eq!(ra.dir.file_name(), rb.dir.file_name());
        for f in ["metrics.csv", "train_log.csv", "ckpt-000010.ckpt", "final.ckpt", "config.json"] {
            assert_eq!(read(&ra.dir.join(f)), read(&rb.dir.join(f)), "{mode:?} {f}");
        }
    }
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let cfg = small(Mode::Ogdr);
    let full = tempfile::tempdir().unwrap();
    let reference = train_loop(&cfg, full.path(), None).unwrap();

    // Resume inside a copy of the run directory and in an empty one.
    let copy = tempfile::tempdir().unwrap();
    let copied_dir = copy.path().join(reference.dir.file_name().unwrap());
    fs::create_dir_all(&copied_dir).unwrap();
    for f in ["metrics.csv", "train_log.csv", "ckpt-000010.ckpt"] {
        fs::copy(reference.dir.join(f), copied_dir.join(f)).unwrap();
    }
    let resumed = train_loop(&cfg, copy.path(), Some(&copied_dir.join("ckpt-000010.ckpt"))).unwrap();
    for f in ["metrics.csv", "train_log.csv", "final.ckpt"] {
        assert_eq!(read(&reference.dir.join(f)), read(&resumed.dir.join(f)), "{f}");
    }

    let fresh = tempfile::tempdir().unwrap();
    let again = train_loop(&cfg, fresh.path(), Some(&reference.dir.join("ckpt-000010.ckpt"))).unwrap();
    assert_eq!(read(&reference.dir.join("final.ckpt")), read(&again.dir.join("final.ckpt")));
    assert_eq!(rows(&again.dir.join("train_log.csv")).len(), 10);
}

#[test]
fn resume_rejects_other_configs() {
    let cfg = small(Mode::Gdr);
    let dir = tempfile::tempdir().unwrap();
    let run = train_loop(&cfg, dir.path(), None).unwrap();
    let other = TrainConfig { seed: 9, ..cfg };
    let err = train_loop(&other, dir.path(), Some(&run.dir.join("ckpt-000010.ckpt"))).unwrap_err();
    assert!(matches!(err, Error::Input(_)), "{err}");
}

#[test]
fn csv_layout_and_row_counts() {
    let cfg = small(Mode::Ogdr);
    let dir = tempfile::tempdir().unwrap();
    let run = train_loop(&cfg, dir.path(), None).unwrap();
    let mut m = csv::Reader::from_path(run.dir.join("metrics.csv")).unwrap();
    assert_eq!(m.headers().unwrap().iter().collect::<Vec<_>>(), METRICS_HEADER);
    let mut l = csv::Reader::from_path(run.dir.join("train_log.csv")).unwrap();
    assert_eq!(l.headers().unwrap().iter().collect::<Vec<_>>(), LOG_HEADER);

    let metrics = rows(&run.dir.join("metrics.csv"));
    let steps: Vec<&str> = metrics.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(steps, ["0", "5", "10", "15", "20"]);
    let log = rows(&run.dir.join("train_log.csv"));
    assert_eq!(log.len(), 20);
    assert!(log.iter().enumerate().all(|(i, r)| r[0] == i.to_string()));
    let last: f64 = metrics[4][9].parse().unwrap();
    assert_eq!(last, run.final_val_mse);
    assert!(run.final_val_mse < run.initial_val_mse);
}

#[test]
fn checkpoint_records_step_and_state() {
    let cfg = small(Mode::Ogdr);
    let dir = tempfile::tempdir().unwrap();
    let run = train_loop(&cfg, dir.path(), None).unwrap();
    let mid = Checkpoint::load(&run.dir.join("ckpt-000010.ckpt")).unwrap();
    let end = Checkpoint::load(&run.final_checkpoint).unwrap();
    assert_eq!((mid.step, end.step), (10, 20));
    assert_eq!(end.adam.step, 20);
    assert_eq!(end.config, cfg);
    assert_eq!(end.model.organizer().unwrap().step, 20);
    assert_ne!(mid.model, end.model);
}

#[test]
fn non_finite_loss_stops_with_last_good_state() {
    let cfg = TrainConfig {
        lr0: 1e38,
        warmup_frac: 0.0,
        ..small(Mode::Gdr)
    };
    let dir = tempfile::tempdir().unwrap();
    match train_loop(&cfg, dir.path(), None) {
        Err(Error::NonFinite { step, dump }) => {
            let ck = Checkpoint::load(&dump).unwrap();
            assert_eq!(ck.step, step);
            assert!(ck.model.params().iter().all(|p| p.all_finite()));
            let log = rows(&dump.parent().unwrap().join("train_log.csv"));
            assert_eq!(log.len() as u64, step);
        }
        other => panic!("expected a non-finite stop, got {other:?}"),
    }
}
