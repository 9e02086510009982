use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ectn_core::{Dims, EctnModel, ParamHandle};
use tempfile::TempDir;

fn ectn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ectn"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = ectn(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    ectn(dir, args).status.code().expect("exited normally")
}

fn read(path: impl AsRef<Path>) -> String {
    fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

/// (rmse, mae, count) of the row named `set` in a metrics CSV.
fn metrics_row(text: &str, set: &str) -> (f64, f64, usize) {
    let line = text
        .lines()
        .find(|l| l.starts_with(&format!("{set},")))
        .unwrap_or_else(|| panic!("no {set} row in {text}"));
    let f: Vec<&str> = line.split(',').collect();
    (f[1].parse().unwrap(), f[2].parse().unwrap(), f[3].parse().unwrap())
}

fn synthetic_manifest(dir: &Path, repeats: usize, noise: f64, out: &str) -> String {
    let text = format!(
        r#"ratios = [0.7, 0.1, 0.2]
repeats = {repeats}
seed = 3
output_dir = "{out}"

[data]
kind = "synthetic"
dims = [12, 15, 6]
rank = 2
expansion = 2
density = 0.4
noise_sigma = {noise}
bias_scale = 0.5
seed = 11

[train]
rank = 2
expansion = 2
lambda = 0.4
tol = 1e-5
max_epochs = 60
init_scale = 0.1
workers = 1
"#
    );
    let path = dir.join(format!("{out}.toml"));
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

fn gen_log(dir: &Path, noise: &str) {
    ok(
        dir,
        &["gen-synth", "--dims", "12,15,6", "--density", "0.4", "--noise", noise, "--seed", "5", "-o", "d.txt"],
    );
}

#[test]
fn synthetic_run_directory_contents() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let manifest = synthetic_manifest(dir, 1, 0.0, "syn");
    ok(dir, &["train", "--manifest", &manifest]);
    let run = dir.join("syn/run_000");
    for f in ["model.bin", "split.txt", "loss.csv", "metrics.csv", "timing.csv"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    for f in ["manifest.toml", "summary.csv", "aggregate.csv"] {
        assert!(dir.join("syn").join(f).is_file(), "missing {f}");
    }
    let summary = read(dir.join("syn/summary.csv"));
    let epochs: usize = summary.lines().nth(1).unwrap().split(',').nth(2).unwrap().parse().unwrap();
    let loss = read(run.join("loss.csv"));
    // header, initial objective, one row per epoch
    assert_eq!(loss.lines().count(), epochs + 2);
    let split = read(run.join("split.txt"));
    assert!(split.starts_with("# seed=3 "));
    let (rmse, mae, count) = metrics_row(&read(run.join("metrics.csv")), "test");
    assert!(mae <= rmse && rmse.is_finite());
    // 432 entries: 302 train, 43 validation, the rest test
    assert_eq!(count, 432 - 302 - 43);
}

#[test]
fn aggregate_is_the_mean_of_per_run_metrics() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let manifest = synthetic_manifest(dir, 10, 0.1, "agg");
    ok(dir, &["train", "--manifest", &manifest]);
    let (mut rmse, mut mae, mut count) = (0.0, 0.0, 0);
    for r in 0..10 {
        let (a, b, c) = metrics_row(&read(dir.join(format!("agg/run_{r:03}/metrics.csv"))), "test");
        rmse += a;
        mae += b;
        count += c;
    }
    let (a, b, c) = metrics_row(&read(dir.join("agg/aggregate.csv")), "test");
    assert!((a - rmse / 10.0).abs() < 1e-12);
    assert!((b - mae / 10.0).abs() < 1e-12);
    assert_eq!(c, count);
    assert_eq!(read(dir.join("agg/summary.csv")).lines().count(), 11);
}

#[test]
fn same_manifest_reproduces_identical_outputs() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let manifest = synthetic_manifest(dir, 2, 0.1, "first");
    ok(dir, &["train", "--manifest", &manifest]);
    // re-run from the copy written into the run directory
    ok(dir, &["train", "--manifest", "first/manifest.toml", "-o", "second"]);
    for f in ["summary.csv", "aggregate.csv"] {
        assert_eq!(read(dir.join("first").join(f)), read(dir.join("second").join(f)), "{f}");
    }
    for f in ["metrics.csv", "loss.csv", "split.txt", "model.bin"] {
        let a = fs::read(dir.join("first/run_001").join(f)).unwrap();
        let b = fs::read(dir.join("second/run_001").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn eval_matches_the_metrics_written_by_train() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    gen_log(dir, "0.05");
    ok(
        dir,
        &["train", "-d", "d.txt", "--ratios", "0.6,0.2,0.2", "--repeats", "1", "-r", "2", "-m", "3", "--max-epochs", "80", "-o", "out"],
    );
    ok(
        dir,
        &["eval", "--model", "out/run_000/model.bin", "-d", "d.txt", "--split", "out/run_000/split.txt", "-o", "eval.csv"],
    );
    let written = read(dir.join("out/run_000/metrics.csv"));
    let evaluated = read(dir.join("eval.csv"));
    assert_eq!(metrics_row(&written, "test"), metrics_row(&evaluated, "test"));
    let line = |t: &str| t.lines().find(|l| l.starts_with("test,")).unwrap().to_owned();
    assert_eq!(line(&written), line(&evaluated));

    // the validation row as well, reading the data through the manifest
    ok(
        dir,
        &["eval", "--model", "out/run_000/model.bin", "--manifest", "out/manifest.toml", "--split", "out/run_000/split.txt", "--set", "validation", "-o", "val.csv"],
    );
    assert_eq!(
        metrics_row(&written, "validation"),
        metrics_row(&read(dir.join("val.csv")), "validation")
    );
}

#[test]
fn eval_on_a_hand_built_two_entry_dataset() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("two.txt"), "# dims: 1 1 2\n0 0 0 1.0\n0 0 1 4.0\n").unwrap();
    fs::write(dir.join("split.txt"), "# seed=0 ratios=0,0,1\n[train]\n[validation]\n[test]\n0\n1\n").unwrap();
    let mut model = EctnModel::zeros(Dims::new(1, 1, 2), 1, 1).unwrap();
    model.set(ParamHandle::D(0), 1.0).unwrap();
    let mut bytes = Vec::new();
    model.write_to(&mut bytes).unwrap();
    fs::write(dir.join("m.bin"), bytes).unwrap();
    ok(dir, &["eval", "--model", "m.bin", "-d", "two.txt", "--split", "split.txt", "-o", "e.csv"]);
    // residuals 0 and 3
    let (rmse, mae, count) = metrics_row(&read(dir.join("e.csv")), "test");
    assert_eq!(count, 2);
    assert_eq!(mae, 1.5);
    assert!((rmse - 4.5f64.sqrt()).abs() < 1e-15);
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    assert_eq!(code(dir, &[]), 1);
    assert_eq!(code(dir, &["train"]), 1);
    assert_eq!(code(dir, &["train", "--no-such-flag"]), 1);
    assert_eq!(code(dir, &["--help"]), 0);
    assert_eq!(code(dir, &["train", "-d", "missing.txt"]), 2);

    fs::write(dir.join("bad.txt"), "0 0 0 1.0\n0 0 oops 2.0\n").unwrap();
    assert_eq!(code(dir, &["train", "-d", "bad.txt"]), 2);

    gen_log(dir, "0.0");
    assert_eq!(code(dir, &["train", "-d", "d.txt", "--ratios", "0.5,0.5,0.5"]), 1);
    assert_eq!(code(dir, &["train", "-d", "d.txt", "--lambda", "-1"]), 1);
    assert_eq!(code(dir, &["train", "-d", "d.txt", "--dims", "2,2,2"]), 2);

    // values near the top of the f64 range overflow the update terms
    fs::write(dir.join("huge.txt"), "0 0 0 1e300\n0 1 0 1e300\n1 0 1 1e300\n1 1 1 1e300\n").unwrap();
    let out = ectn(
        dir,
        &["train", "-d", "huge.txt", "--ratios", "0.5,0,0.5", "--repeats", "1", "--init-scale", "1", "-o", "h"],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}

#[test]
fn grid_of_one_value_selects_it() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let manifest = synthetic_manifest(dir, 1, 0.1, "g");
    let stdout = ok(dir, &["grid-lambda", "--manifest", &manifest, "--grid", "0.7"]);
    assert!(stdout.contains("best lambda 0.7"), "{stdout}");
    assert_eq!(read(dir.join("g/grid.csv")).lines().count(), 2);
    assert!(read(dir.join("g/best.toml")).contains("lambda = 0.7"));
}

#[test]
fn default_grid_has_ten_rows() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let manifest = synthetic_manifest(dir, 1, 0.1, "g");
    ok(dir, &["grid-lambda", "--manifest", &manifest, "--max-epochs", "10"]);
    let grid = read(dir.join("g/grid.csv"));
    let lambdas: Vec<&str> = grid.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(lambdas, ["0.1", "0.2", "0.3", "0.4", "0.5", "0.6", "0.7", "0.8", "0.9", "1"]);
}

#[test]
fn heavy_noise_selects_positive_lambda() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let manifest = synthetic_manifest(dir, 2, 1.5, "noisy");
    let stdout = ok(
        dir,
        &["grid-lambda", "--manifest", &manifest, "--grid", "0,0.2,0.4,0.8", "-r", "4", "-m", "4", "--max-epochs", "300"],
    );
    // exhaustive check against the table itself
    let grid = read(dir.join("noisy/grid.csv"));
    let rows: Vec<(f64, f64)> = grid
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap())
        })
        .collect();
    let best = rows.iter().fold(rows[0], |b, r| if r.1 < b.1 { *r } else { b });
    assert!(best.0 > 0.0, "{grid}");
    assert!(stdout.contains(&format!("best lambda {}", best.0)), "{stdout}");
}

#[test]
fn bench_scaling_rows() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let common = ["bench-scaling", "--dims", "10,10,10", "--density", "0.2", "--epochs", "2", "--repeats", "1"];
    let table = ok(dir, &[&common[..], &["--factors", "1"]].concat());
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "factor,entries,rank,expansion,seconds_per_epoch");
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[1].split(',').nth(1), lines[2].split(',').nth(1));

    let table = ok(dir, &[&common[..], &["--factors", "2,4"]].concat());
    let entries: Vec<usize> = table.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(entries, [200, 400, 800]);

    let table = ok(dir, &[&common[..], &["--factors", "2", "--scale", "rank-expansion"]].concat());
    let m: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').nth(3).unwrap()).collect();
    assert_eq!(m, ["5", "10"]);

    assert_eq!(code(dir, &[&common[..], &["--factors", "0.5"]].concat()), 1);
}

#[test]
fn gen_synth_writes_log_and_truth() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    ok(dir, &["gen-synth", "--dims", "4,5,6", "--density", "0.5", "-o", "s.txt", "--truth", "t.bin"]);
    let text = read(dir.join("s.txt"));
    assert_eq!(text.lines().next(), Some("# dims: 4 5 6"));
    assert_eq!(text.lines().count(), 1 + 60);
    let truth = EctnModel::read_from(fs::File::open(dir.join("t.bin")).unwrap()).unwrap();
    assert_eq!(truth.dims(), Dims::new(4, 5, 6));
    // noiseless values are the truth model's predictions
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(' ').collect();
        let (i, j, k): (usize, usize, usize) = (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap());
        assert_eq!(f[3].parse::<f64>().unwrap(), truth.predict(i, j, k).unwrap());
    }
}

#[test]
fn rank_reproduces_reference_mean_ranks() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let table = "case,M1,M2,M3,M4,M5
D1.1 RMSE,3.2854,3.3557,3.4119,3.3866,5.0858
D1.1 MAE,1.5707,1.5826,1.6759,1.6757,2.8785
D1.2 RMSE,3.0483,3.0963,3.1385,3.0919,4.9605
D1.2 MAE,1.4277,1.4485,1.4913,1.4487,2.8499
D2.1 RMSE,30.8957,31.7075,37.3340,36.8164,48.7248
D2.1 MAE,5.3708,5.4546,7.2519,6.6160,10.3816
D2.2 RMSE,24.8050,25.5490,26.2637,26.5888,48.1808
D2.2 MAE,4.2463,4.3556,4.7116,4.6798,10.0175
";
    fs::write(dir.join("t.csv"), table).unwrap();
    let out = ok(dir, &["rank", "t.csv"]);
    assert_eq!(out.lines().last(), Some("F-Rank,1,2.125,3.875,3,5"));
}
