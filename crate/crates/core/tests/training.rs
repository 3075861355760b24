use std::fs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skyalign::config::Config;
use skyalign::dataset::{generate_toy_dataset, sample_batch, Dataset, ImageSample};
use skyalign::experiment::run;
use skyalign::retrieval::Protocol;
use skyalign::training::checkpoint::{self, load_model};
use skyalign::training::{
    alpha_at, checkpoint_name, discriminator_only_step, snapshot_trainable, train, train_in_memory, train_step,
    StepSettings, TrainOptions, TrainState, Variant, FINAL_CHECKPOINT, LOG_FILE,
};
use skyalign::Error;

fn small() -> Config {
    let mut c = Config::toy();
    for o in [
        "toy.num_locations=6",
        "toy.eval_locations=3",
        "toy.uav_per_location=3",
        "train.batch_size=8",
        "train.steps_per_epoch=3",
        "train.epochs=3",
    ] {
        c.apply_override(o).unwrap();
    }
    c.resolved()
}

fn train_data(c: &Config) -> Dataset {
    generate_toy_dataset(&c.toy_config()).unwrap().train
}

#[test]
fn resume_reproduces_the_remaining_epochs() {
    let mut c = small();
    c.train.checkpoint_every = 1;
    let data = train_data(&c);
    let dir = tempfile::tempdir().unwrap();
    let full_dir = dir.path().join("full");
    let full = train(&c, &data, &TrainOptions { out_dir: Some(full_dir.clone()), resume: None }).unwrap();
    assert_eq!(full.checkpoints.len(), 2);

    let resumed_dir = dir.path().join("resumed");
    let ckpt = full_dir.join(checkpoint_name(2));
    let resumed = train(&c, &data, &TrainOptions { out_dir: Some(resumed_dir.clone()), resume: Some(ckpt) }).unwrap();
    let tail: Vec<_> = full.log.rows.iter().filter(|r| r.epoch == 2).cloned().collect();
    assert_eq!(resumed.log.rows, tail);

    let (mut a, _, _) = load_model(&full_dir.join(FINAL_CHECKPOINT)).unwrap();
    let (mut b, _, _) = load_model(&resumed_dir.join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(a.snapshot(), b.snapshot());
}

#[test]
fn resume_in_the_same_directory_keeps_earlier_log_rows() {
    let mut c = small();
    c.train.checkpoint_every = 1;
    let data = train_data(&c);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_path_buf();
    let full = train(&c, &data, &TrainOptions { out_dir: Some(out.clone()), resume: None }).unwrap();
    let before = fs::read_to_string(out.join(LOG_FILE)).unwrap();
    let opts = TrainOptions { out_dir: Some(out.clone()), resume: Some(out.join(checkpoint_name(1))) };
    let again = train(&c, &data, &opts).unwrap();
    assert_eq!(again.log.rows, full.log.rows);
    assert_eq!(fs::read_to_string(out.join(LOG_FILE)).unwrap(), before);
}

#[test]
fn checkpoint_round_trip_preserves_state() {
    let c = small();
    let data = train_data(&c);
    let mut out = train_in_memory(&c, &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ckpt");
    checkpoint::save(&path, &mut out.state, &c).unwrap();
    let mut back = checkpoint::load_state(&path, &c).unwrap();
    assert_eq!(back.model.snapshot(), out.state.model.snapshot());
    assert_eq!(back.epoch, out.state.epoch);
    assert_eq!(back.global_step, out.state.global_step);
    use rand::RngCore;
    assert_eq!(back.rng.next_u64(), out.state.rng.next_u64());
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ckpt");
    fs::write(&path, b"not a checkpoint").unwrap();
    assert!(matches!(checkpoint::read(&path), Err(Error::Checkpoint(_))));
}

#[test]
fn shape_mismatch_on_resume_is_fatal() {
    let c = small();
    let data = train_data(&c);
    let mut out = train_in_memory(&c, &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ckpt");
    checkpoint::save(&path, &mut out.state, &c).unwrap();
    let mut wide = c.clone();
    wide.apply_override("model.d_embed=8").unwrap();
    assert!(matches!(checkpoint::load_state(&path, &wide), Err(Error::Shape(_))));
}

#[test]
fn zero_alpha_matches_training_without_the_discriminator() {
    let mut with = small();
    with.schedule.alpha_init = 0.0;
    with.schedule.alpha_step = 0.0;
    let mut without = with.clone();
    without.train.use_discriminator = false;
    let data = train_data(&with);
    let mut a = train_in_memory(&with, &data).unwrap();
    let mut b = train_in_memory(&without, &data).unwrap();
    let loc = |o: &skyalign::training::TrainOutcome| o.log.rows.iter().map(|r| r.report.location_loss).collect::<Vec<_>>();
    assert_eq!(loc(&a), loc(&b));
    assert_eq!(snapshot_trainable(&mut a.state.model.encoder, ""), snapshot_trainable(&mut b.state.model.encoder, ""));
    assert!(b.log.rows.iter().all(|r| r.report.view_loss == 0.0));
}

#[test]
fn repeated_discriminator_updates_reduce_the_view_loss() {
    let c = small();
    let data = train_data(&c);
    let mut state = TrainState::new(&c, data.num_locations).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch: Vec<&ImageSample> = sample_batch(&data, 8, &mut rng).unwrap();
    let losses: Vec<f64> = (0..5).map(|_| discriminator_only_step(&mut state, &batch, 0.002).unwrap()).collect();
    assert!(losses[4] < losses[0], "{losses:?}");
}

#[test]
fn batch_without_both_views_is_rejected() {
    let c = small();
    let data = train_data(&c);
    let mut state = TrainState::new(&c, data.num_locations).unwrap();
    let uav: Vec<&ImageSample> = data.samples.iter().filter(|s| s.view == skyalign::dataset::View::Uav).take(4).collect();
    let settings = StepSettings::for_epoch(0, &c);
    assert!(matches!(train_step(&mut state, &uav, None, &settings), Err(Error::Data(_))));
}

#[test]
fn log_echoes_the_schedule() {
    let mut c = small();
    c.train.epochs = 4;
    c.train.steps_per_epoch = Some(1);
    c.schedule.alpha_period_epochs = 2;
    c.schedule.lr_decay_epochs_within_cycle = vec![1];
    c.schedule.variant = Variant::ConstantAlpha;
    let data = train_data(&c);
    let out = train_in_memory(&c, &data).unwrap();
    for row in &out.log.rows {
        assert_eq!(row.report.alpha, alpha_at(row.epoch, &c.schedule));
        assert_eq!(row.report.alpha, c.schedule.alpha_init);
        assert_eq!(row.lrs, out.state.lrs(row.epoch, &c.schedule));
    }
    let text = out.log.to_csv();
    assert!(text.starts_with("# variant=CONSTANT_ALPHA"));
}

#[test]
fn two_epoch_smoke_run_reports_valid_metrics() {
    let mut c = small();
    c.train.epochs = 2;
    let out = run(&c, &TrainOptions::default(), true).unwrap();
    assert_eq!(out.summary.epochs, 2);
    assert_eq!(out.summary.steps, 6);
    for p in Protocol::ALL {
        let m = out.summary.metrics_for(p).unwrap();
        for v in [m.r1, m.r5, m.r10, m.ap] {
            assert!((0.0..=1.0).contains(&v));
        }
        assert!(m.r1 <= m.r5 && m.r5 <= m.r10);
    }
    let probe = out.summary.view_probe_accuracy.unwrap();
    assert!((0.0..=1.0).contains(&probe));
}

#[test]
fn png_tree_loads_with_sorted_ids_and_skips_broken_files() {
    use skyalign::dataset::{load_university1652, Direction, LoadOptions, Split};
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    for (sub, classes) in [("train/drone", ["b", "a"]), ("train/satellite", ["a", "b"])] {
        for class in classes {
            let d = root.join(sub).join(class);
            fs::create_dir_all(&d).unwrap();
            image::RgbImage::from_pixel(12, 10, image::Rgb([200, 10, 10])).save(d.join("x.png")).unwrap();
        }
    }
    fs::write(root.join("train/drone/a/broken.png"), b"nope").unwrap();
    let opts = LoadOptions { image_size: 8, direction: Direction::UavToSatellite, eager: true };
    let (data, report) = load_university1652(root, Split::Train, &opts).unwrap();
    assert_eq!(data.class_names, vec!["a", "b"]);
    assert_eq!(data.len(), 4);
    assert_eq!(report.skipped.len(), 1);
    let px = data.samples[0].image().unwrap();
    assert_eq!(px.dim(), (8, 8, 3));
    assert!((px[[0, 0, 0]] - 200.0 / 255.0).abs() < 1e-12);

    fs::create_dir_all(root.join("train/satellite/c")).unwrap();
    match load_university1652(root, Split::Train, &opts) {
        Err(Error::Data(msg)) => assert!(msg.contains("train/satellite/c"), "{msg}"),
        other => panic!("expected a data error, got {other:?}"),
    }
}
