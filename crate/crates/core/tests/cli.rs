use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use automap_ct::cli::{exit_code, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC};
use automap_ct::formats::{encode_pgm, read_image, read_sinogram, write_image, Gray8, KeyValues};
use automap_ct::model::{init_params, save_params, AutomapConfig, Preset};
use automap_ct::radon::{AngleSet, Domain, ImageGrid};
use automap_ct::Error;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_automap-ct"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn digit_image(dir: &Path) -> PathBuf {
    let path = dir.join("img.img");
    let values = (0..64 * 64).map(|i| if (i / 64 + i % 64) % 9 < 3 { 0.8 } else { 0.0 }).collect();
    write_image(&path, &ImageGrid::new(64, 5.0, values, Domain::Normalized).unwrap()).unwrap();
    path
}

#[test]
fn help_and_bad_flags() {
    let o = run(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("make-phantoms"));
    assert_eq!(run(&["project", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn project_row_counts_and_fbp() {
    let dir = tempfile::tempdir().unwrap();
    let img = digit_image(dir.path());
    let four = dir.path().join("four.sino");
    let two = dir.path().join("two.sino");
    assert!(run(&["project", "--image", s(&img), "--angles", "four_view", "--out", s(&four)]).status.success());
    assert!(run(&["project", "--image", s(&img), "--angles", "two_view", "--out", s(&two)]).status.success());
    let sino = read_sinogram(&four).unwrap();
    assert_eq!((sino.angles_deg().len(), sino.bins()), (4, 64));
    assert_eq!(read_sinogram(&two).unwrap().angles_deg(), &[0.0, 90.0]);

    let custom = dir.path().join("custom.sino");
    assert!(run(&["project", "--image", s(&img), "--angles", "0,30,60", "--out", s(&custom)]).status.success());
    assert_eq!(read_sinogram(&custom).unwrap().angles_deg().len(), 3);

    let out = dir.path().join("rec.img");
    assert!(run(&["fbp", "--sino", s(&four), "--out", s(&out)]).status.success());
    let rec = read_image(&out, 5.0).unwrap();
    assert_eq!((rec.n(), rec.domain()), (64, Domain::Normalized));
    let hu = dir.path().join("rec_hu.img");
    assert!(run(&["fbp", "--sino", s(&four), "--out", s(&hu), "--domain", "hu"]).status.success());
    assert_eq!(read_image(&hu, 5.0).unwrap().domain(), Domain::Hounsfield);
    assert_eq!(run(&["fbp", "--sino", s(&four), "--out", s(&hu), "--domain", "kelvin"]).status.code(), Some(2));
}

#[test]
fn project_accepts_pgm() {
    let dir = tempfile::tempdir().unwrap();
    let pgm = dir.path().join("x.pgm");
    std::fs::write(&pgm, encode_pgm(&Gray8 { width: 8, height: 8, pixels: vec![128; 64] })).unwrap();
    let out = dir.path().join("x.sino");
    assert!(run(&["project", "--image", s(&pgm), "--out", s(&out), "--pitch-mm", "2"]).status.success());
    let sino = read_sinogram(&out).unwrap();
    assert_eq!((sino.bins(), sino.pitch_mm()), (8, 2.0));
}

#[test]
fn missing_and_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.img");
    let o = run(&["project", "--image", s(&missing), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(EXIT_IO));
    assert!(stderr(&o).contains(s(&missing)), "{}", stderr(&o));

    let img = digit_image(dir.path());
    let o = run(&["project", "--image", s(&img), "--angles", "three_view", "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));

    let junk = dir.path().join("junk.sino");
    std::fs::write(&junk, b"SINOjunk").unwrap();
    assert_eq!(run(&["fbp", "--sino", s(&junk), "--out", s(&dir.path().join("o"))]).status.code(), Some(EXIT_IO));

    let o = run(&["train-oracle", "--data", s(&dir.path().join("mnist")), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(EXIT_IO));
    assert!(stderr(&o).contains("mnist"));
}

#[test]
fn config_errors_exit_with_code_two_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "experiment = \"phantom\"\nlearning_rat = 0.1\n").unwrap();
    let o = run(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rat"), "{}", stderr(&o));

    std::fs::write(&cfg, "experiment = \"mnist_random\"\ndata_dir = \"/no/such/dir\"\n").unwrap();
    let o = run(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/no/such/dir"));

    std::fs::write(&cfg, "experiment = \"phantom\"\nbatch_size = 0\n").unwrap();
    assert_eq!(run(&["train", "--config", s(&cfg)]).status.code(), Some(2));

    let o = run(&["train", "--config", s(&dir.path().join("absent.toml"))]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("absent.toml"));
}

#[test]
fn make_phantoms_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert!(run(&["make-phantoms", "--count", "3", "--seed", "7", "--out", s(out)]).status.success());
    }
    for i in 0..3 {
        let name = format!("phantom_{i:04}.img");
        let bytes = std::fs::read(a.join(&name)).unwrap();
        assert_eq!(bytes, std::fs::read(b.join(&name)).unwrap());
        assert_eq!(read_image(&a.join(&name), 5.0).unwrap().domain(), Domain::Hounsfield);
    }
    assert!(!a.join("phantom_0003.img").exists());
}

fn phantom_config(dir: &Path, out: &Path) -> PathBuf {
    let cfg = dir.join("phantom.toml");
    std::fs::write(
        &cfg,
        format!(
            "experiment = \"phantom\"\npreset = \"small\"\nepochs = 2\nbatch_size = 3\nlearning_rate = 1e-4\n\
             train_limit = 6\ntest_limit = 2\nseed = 3\ncheckpoint_every = 1\noutput_dir = \"{}\"\n",
            out.display()
        ),
    )
    .unwrap();
    cfg
}

const ARTIFACTS: [&str; 4] = ["weights.amap", "loss.csv", "train_report.txt", "eval_report.txt"];

fn train_and_eval(cfg: &Path) -> PathBuf {
    let o = run(&["train", "--config", s(cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run_dir = PathBuf::from(String::from_utf8(o.stdout).unwrap().trim());
    let weights = run_dir.join("weights.amap");
    let o = run(&["eval", "--weights", s(&weights), "--config", s(cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = KeyValues::parse(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert!(report.get("hu_rmse_mean").is_some());
    run_dir
}

#[test]
fn phantom_train_and_eval_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let first = train_and_eval(&phantom_config(dir.path(), &dir.path().join("out1")));
    let bytes: Vec<Vec<u8>> = ARTIFACTS.iter().map(|f| std::fs::read(first.join(f)).unwrap()).collect();
    assert!(first.join("grid.pgm").exists() && first.join("timing.txt").exists());
    let log = String::from_utf8(bytes[1].clone()).unwrap();
    assert_eq!(log.lines().count(), 1 + 2 * 2);

    // Fresh output directory: identical artifacts.
    let other = tempfile::tempdir().unwrap();
    let second = train_and_eval(&phantom_config(other.path(), &other.path().join("out2")));
    assert_eq!(first.file_name(), second.file_name(), "run id depends only on the model fields");
    for (f, want) in ARTIFACTS.iter().zip(&bytes) {
        assert_eq!(&std::fs::read(second.join(f)).unwrap(), want, "{f} differs");
    }

    // Same directory again: resumes from the final checkpoint and rewrites
    // the same bytes.
    train_and_eval(&phantom_config(dir.path(), &dir.path().join("out1")));
    for (f, want) in ARTIFACTS.iter().zip(&bytes) {
        assert_eq!(&std::fs::read(first.join(f)).unwrap(), want, "{f} changed on rerun");
    }

    // Command-line overrides change the run id.
    let o = run(&["train", "--config", s(&phantom_config(dir.path(), &dir.path().join("out1"))), "--epochs", "1"]);
    assert!(o.status.success());
    assert_ne!(PathBuf::from(String::from_utf8(o.stdout).unwrap().trim()), first);
}

#[test]
fn eval_of_untrained_weights_completes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = phantom_config(dir.path(), &dir.path().join("out"));
    let weights = dir.path().join("init.amap");
    save_params(&init_params(&AutomapConfig::preset(Preset::Small, &AngleSet::FourView), 0).unwrap(), &weights).unwrap();
    let o = run(&["eval", "--weights", s(&weights), "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = KeyValues::parse(&String::from_utf8(o.stdout).unwrap()).unwrap();
    let rmse: f64 = report.get("rmse_mean").unwrap().parse().unwrap();
    // Untrained output is close to zero, so the error is roughly the RMS of
    // the normalized phantom itself.
    assert!(rmse > 0.05 && rmse < 0.6, "rmse {rmse}");

    let wrong = dir.path().join("two.amap");
    save_params(&init_params(&AutomapConfig::preset(Preset::Small, &AngleSet::TwoView), 0).unwrap(), &wrong).unwrap();
    assert_eq!(run(&["eval", "--weights", s(&wrong), "--config", s(&cfg)]).status.code(), Some(2));
}

#[test]
fn error_kinds_map_to_exit_codes() {
    assert_eq!(exit_code(&Error::Config("x".into())), EXIT_CONFIG);
    assert_eq!(exit_code(&Error::NonFinite("loss".into())), EXIT_NUMERIC);
    assert_eq!(
        exit_code(&Error::Io {
            path: "p".into(),
            source: std::io::Error::other("x")
        }),
        EXIT_IO
    );
}
