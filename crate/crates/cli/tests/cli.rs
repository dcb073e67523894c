use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "scene.width=8",
    "scene.height=8",
    "scene.train_views=3",
    "scene.test_views=2",
    "scene.gt_samples=16",
    "rays_per_batch=32",
    "samples_per_ray=8",
    "eval_samples=8",
    "steps=3",
    "log_every=1",
    "occupancy_grid=4",
    "occupancy_supersample=1",
    "field.hidden=[8]",
    "continuous.hidden=[8]",
];

fn ngf(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ngf"))
        .args(args)
        .env("NGF_OUT_DIR", out)
        .output()
        .expect("binary runs")
}

fn with_tiny<'a>(mut args: Vec<&'a str>, extra: &[&'a str]) -> Vec<&'a str> {
    for o in TINY.iter().chain(extra) {
        args.push("--override");
        args.push(o);
    }
    args
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The single run directory under `root`.
fn only_run(root: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs[0].clone()
}

fn files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

fn train_tiny(root: &Path, extra: &[&str]) -> PathBuf {
    let o = ngf(&with_tiny(vec!["train"], extra), root);
    assert!(o.status.success(), "{}", stderr(&o));
    only_run(root)
}

#[test]
fn missing_config_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ngf(&["train", "--config", "/nonexistent/cfg.json"], tmp.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("/nonexistent/cfg.json"), "{}", stderr(&o));
}

#[test]
fn invalid_override_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ngf(&["train", "--override", "no_such_key=1"], tmp.path());
    assert!(!o.status.success());
    assert!(!stderr(&o).is_empty());
}

#[test]
fn zero_steps_writes_only_the_initial_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = train_tiny(tmp.path(), &["steps=0"]);
    assert_eq!(files(&dir), ["checkpoint.ngf", "config.json"]);
}

#[test]
fn train_writes_artifacts_and_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let da = train_tiny(a.path(), &[]);
    let db = train_tiny(b.path(), &[]);
    assert_eq!(da.file_name(), db.file_name(), "run directory is named by config hash");
    let names = files(&da);
    for f in ["checkpoint.ngf", "config.json", "eval.csv", "metrics.csv", "preview_00.ppm", "preview_01.ppm"] {
        assert!(names.iter().any(|n| n == f), "missing {f} in {names:?}");
    }
    let ma = fs::read(da.join("metrics.csv")).unwrap();
    assert_eq!(ma, fs::read(db.join("metrics.csv")).unwrap());
    assert_eq!(String::from_utf8(ma).unwrap().lines().count(), 4);
}

#[test]
fn timestamp_flag_extends_the_directory_name() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ngf(&with_tiny(vec!["train", "--timestamp"], &["steps=0"]), tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let name = only_run(tmp.path()).file_name().unwrap().to_string_lossy().into_owned();
    let (hash, stamp) = name.split_once('-').expect("hash-timestamp");
    assert_eq!(hash.len(), 16);
    assert!(stamp.parse::<u64>().is_ok());
}

#[test]
fn out_flag_overrides_env_root() {
    let env_root = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let o = ngf(
        &with_tiny(vec!["train", "--out", out.path().to_str().unwrap()], &["steps=0"]),
        env_root.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(files(env_root.path()).is_empty());
    only_run(out.path());
}

#[test]
fn eval_reports_each_view_and_the_mean() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = train_tiny(tmp.path(), &[]);
    let ckpt = dir.join("checkpoint.ngf");
    let evals = tempfile::tempdir().unwrap();
    let o = ngf(
        &["eval", ckpt.to_str().unwrap(), "--out", evals.path().to_str().unwrap()],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(evals.path().join("eval.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2 + 1);
    assert!(rows[2].starts_with("mean,"));
    // Same numbers as the evaluation written at the end of training.
    assert_eq!(csv, fs::read_to_string(dir.join("eval.csv")).unwrap());
    assert!(stdout(&o).contains("mean"));
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ngf(
        &with_tiny(vec!["eval", "--ground-truth", "--out", tmp.path().to_str().unwrap()], &[]),
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(tmp.path().join("eval.csv")).unwrap();
    let mean: f64 = csv.lines().last().unwrap().strip_prefix("mean,").unwrap().parse().unwrap();
    assert_eq!(mean, 100.0);
}

#[test]
fn eval_rejects_a_truncated_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = train_tiny(tmp.path(), &["steps=0"]);
    let ckpt = dir.join("checkpoint.ngf");
    let bytes = fs::read(&ckpt).unwrap();
    fs::write(&ckpt, &bytes[..2]).unwrap();
    let o = ngf(&["eval", ckpt.to_str().unwrap()], tmp.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("bad magic"), "{}", stderr(&o));
}

/// Width and height from a binary PPM header.
fn ppm_size(path: &Path) -> (usize, usize) {
    let bytes = fs::read(path).unwrap();
    let head = String::from_utf8_lossy(&bytes[..bytes.len().min(64)]).into_owned();
    let mut it = head.split_whitespace().skip(1);
    let w = it.next().unwrap().parse().unwrap();
    let h = it.next().unwrap().parse().unwrap();
    (w, h)
}

#[test]
fn viz_gauge_continuous_writes_splat_and_heat_map() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = train_tiny(tmp.path(), &[]);
    let ckpt = dir.join("checkpoint.ngf");
    let run = |out: &Path| {
        let o = ngf(
            &["viz-gauge", ckpt.to_str().unwrap(), "--size", "32", "--out", out.to_str().unwrap()],
            tmp.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("occupancy"));
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run(a.path());
    run(b.path());
    for f in ["gauge.ppm", "occupancy.ppm"] {
        assert_eq!(ppm_size(&a.path().join(f)), (32, 32));
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
    }
}

#[test]
fn viz_gauge_discrete_draws_one_bar_per_entry() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = train_tiny(
        tmp.path(),
        &["gauge=\"discrete\"", "discrete.resolutions=[4]", "discrete.entries=12", "discrete.dim=4"],
    );
    let o = ngf(&["viz-gauge", dir.join("checkpoint.ngf").to_str().unwrap()], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("of 12 entries"), "{}", stdout(&o));
    let (w, _) = ppm_size(&dir.join("gauge_histogram.ppm"));
    assert_eq!(w, 12 * 5);
}

#[test]
fn viz_gauge_without_visualization_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = train_tiny(tmp.path(), &["gauge=\"grid\"", "steps=0"]);
    let o = ngf(&["viz-gauge", dir.join("checkpoint.ngf").to_str().unwrap()], tmp.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no visualization"), "{}", stderr(&o));
}

#[test]
fn unknown_preset_lists_valid_names() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ngf(&["experiment", "no-such-preset"], tmp.path());
    assert!(!o.status.success());
    let err = stderr(&o);
    for name in ["collapse-continuous", "reg-compare", "topk-sweep", "infoinv-gain"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn experiment_prints_table_and_writes_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let args = with_tiny(vec!["experiment", "reg-compare", "--seed", "0", "--serial"], &["steps=2", "log_every=1"]);
    let o = ngf(&args, tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    for label in ["none", "structural", "cycle", "inforeg"] {
        assert!(table.contains(label), "{table}");
    }
    let dir = only_run(tmp.path());
    assert!(dir.file_name().unwrap().to_string_lossy().starts_with("reg-compare-"));
    let csv = fs::read_to_string(dir.join("summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);

    let again = tempfile::tempdir().unwrap();
    let o2 = ngf(&args, again.path());
    assert!(o2.status.success());
    assert_eq!(stdout(&o).lines().next(), stdout(&o2).lines().next());
    assert_eq!(csv, fs::read_to_string(only_run(again.path()).join("summary.csv")).unwrap());
}

#[test]
fn collapsed_gauge_splats_into_one_cell() {
    let tmp = tempfile::tempdir().unwrap();
    // A zero output layer maps every point to the square's center.
    let dir = train_tiny(tmp.path(), &["steps=0", "continuous.out_scale=0"]);
    let o = ngf(&["viz-gauge", dir.join("checkpoint.ngf").to_str().unwrap()], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("occupancy 0.0625 "), "{}", stdout(&o));
}
