use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scinet_core::data::{load_csv, synthetic_frame};
use scinet_core::eval::MetricReport;
use scinet_core::train::{read_manifest, MANIFEST_FILE, TENSOR_FILE};

fn scinet() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_scinet"));
    cmd.env_remove("SCINET_SEED");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Fixture {
    dir: tempfile::TempDir,
    data: PathBuf,
}

impl Fixture {
    fn new(rows: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("series.csv");
        synthetic_frame(rows, 2, 3).unwrap().write_csv(&data).unwrap();
        Self { dir, data }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self, extra: &str) -> PathBuf {
        let path = self.path("run.conf");
        fs::write(
            &path,
            format!(
                "# small fixture run\ndata={}\nlookback=16\nhorizon=4\nlevels=2\nstacks=2\n\
                 epochs=2\nbatch_size=16\n{extra}",
                self.data.display()
            ),
        )
        .unwrap();
        path
    }

    fn train(&self, output: &str, args: &[&str]) -> Output {
        let conf = self.config("");
        let out_path = self.path(output);
        let o = run(scinet()
            .args(["train", "--config"])
            .arg(&conf)
            .arg("--output")
            .arg(&out_path)
            .args(args));
        assert!(o.status.success(), "train failed: {}", stderr(&o));
        o
    }
}

#[test]
fn missing_data_file_exits_2_and_names_path() {
    let o = run(scinet().args(["train", "--data", "/no/such/series.csv"]));
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("/no/such/series.csv"), "{err}");
    assert_eq!(err.trim().lines().count(), 1, "single-line cause: {err}");
}

#[test]
fn indivisible_lookback_is_config_error() {
    let fx = Fixture::new(300);
    let o = run(scinet()
        .args(["train", "--lookback", "48", "--levels", "5", "--data"])
        .arg(&fx.data));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("T not divisible by 2^L"), "{}", stderr(&o));
}

#[test]
fn unknown_key_exits_2() {
    let fx = Fixture::new(300);
    let conf = fx.config("learning_rate=0.1\n");
    let o = run(scinet().args(["train", "--config"]).arg(conf));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"));
}

#[test]
fn train_writes_checkpoint_and_reports_losses() {
    let fx = Fixture::new(300);
    let o = fx.train("ckpt", &[]);
    let text = stdout(&o);
    assert!(text.contains("epoch=1 "), "{text}");
    assert!(text.contains("train_stack1="), "{text}");
    assert!(text.contains("test.mse="));
    assert!(fx.path("ckpt").join(MANIFEST_FILE).exists());
    assert!(fx.path("ckpt").join(TENSOR_FILE).exists());
    let manifest = read_manifest(&fx.path("ckpt")).unwrap();
    assert_eq!(manifest.seed, 42);
    assert_eq!(manifest.history.len(), 2);
}

#[test]
fn seed_precedence_on_the_command_line() {
    let fx = Fixture::new(300);
    let seed_of = |name: &str, env: Option<&str>, flag: Option<&str>| -> u64 {
        let mut cmd = scinet();
        cmd.args(["train", "--config"])
            .arg(fx.config(""))
            .arg("--output")
            .arg(fx.path(name));
        if let Some(s) = env {
            cmd.env("SCINET_SEED", s);
        }
        if let Some(s) = flag {
            cmd.args(["--seed", s]);
        }
        let o = run(&mut cmd);
        assert!(o.status.success(), "{}", stderr(&o));
        read_manifest(&fx.path(name)).unwrap().seed
    };
    assert_eq!(seed_of("a", Some("11"), None), 11);
    assert_eq!(seed_of("b", Some("11"), Some("12")), 12);
}

#[test]
fn eval_report_is_reparseable() {
    let fx = Fixture::new(300);
    fx.train("ckpt", &[]);
    let report_path = fx.path("metrics.txt");
    let o = run(scinet()
        .args(["eval", "--checkpoint"])
        .arg(fx.path("ckpt"))
        .arg("--output")
        .arg(&report_path));
    assert!(o.status.success(), "{}", stderr(&o));
    let report: MetricReport = fs::read_to_string(&report_path).unwrap().parse().unwrap();
    assert_eq!(report.horizon, 4);
    assert_eq!(report.variates, 2);
    assert!(stdout(&o).contains(&format!("mse={:?}", report.mse)));

    let again = run(scinet()
        .args(["eval", "--checkpoint"])
        .arg(fx.path("ckpt"))
        .arg("--output")
        .arg(fx.path("metrics2.txt")));
    assert!(again.status.success());
    assert_eq!(
        fs::read(&report_path).unwrap(),
        fs::read(fx.path("metrics2.txt")).unwrap()
    );
}

fn predict(fx: &Fixture, data: &Path, emit: &str, extra: &[&str]) -> String {
    let o = run(scinet()
        .args(["predict", "--checkpoint"])
        .arg(fx.path("ckpt"))
        .arg("--data")
        .arg(data)
        .arg("--emit")
        .arg(fx.path(emit))
        .args(extra));
    assert!(o.status.success(), "{}", stderr(&o));
    fs::read_to_string(fx.path(emit)).unwrap()
}

#[test]
fn predict_one_window_round_trips_truth() {
    let fx = Fixture::new(300);
    fx.train("ckpt", &[]);
    // exactly one look-back plus one horizon of rows
    let full = load_csv(&fx.data, None).unwrap();
    let lines: Vec<String> = fs::read_to_string(&fx.data)
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    let one = fx.path("one.csv");
    fs::write(&one, lines[..1 + 20].join("\n") + "\n").unwrap();

    let csv = predict(&fx, &one, "pred.csv", &["--segment", "all", "--original-scale"]);
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "window_id,step,variate,truth,prediction");
    assert_eq!(rows.len() - 1, 4 * 2);
    for row in &rows[1..] {
        let f: Vec<&str> = row.split(',').collect();
        let (step, variate): (usize, usize) = (f[1].parse().unwrap(), f[2].parse().unwrap());
        let truth: f64 = f[3].parse().unwrap();
        assert_eq!(f[0], "0");
        assert_eq!(truth, full.row(16 + step - 1)[variate]);
    }

    let emitted = load_csv(&fx.path("pred.csv"), None).unwrap();
    assert_eq!(emitted.len(), 8);
    assert_eq!(predict(&fx, &one, "pred2.csv", &["--segment", "all", "--original-scale"]), csv);
}

#[test]
fn predict_test_segment_counts_rows() {
    let fx = Fixture::new(300);
    fx.train("ckpt", &[]);
    let csv = predict(&fx, &fx.data, "pred.csv", &[]);
    // test segment: 60 rows -> 60 - 16 - 4 + 1 windows
    assert_eq!(csv.lines().count() - 1, 41 * 4 * 2);
}

#[test]
fn pe_with_and_without_checkpoint() {
    let fx = Fixture::new(300);
    let o = run(scinet().args(["pe", "--m", "4", "--data"]).arg(&fx.data));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("pe_original_mean="));
    assert!(!stdout(&o).contains("pe_enhanced"));

    fx.train("ckpt", &[]);
    let o = run(scinet().args(["pe", "--checkpoint"]).arg(fx.path("ckpt")));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("pe_enhanced_mean="));
}

#[test]
fn ablate_single_variant_prints_pairs() {
    let fx = Fixture::new(300);
    let o = run(scinet()
        .args(["ablate", "--variant", "no_residual", "--config"])
        .arg(fx.config("")));
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("variant=full "));
    assert!(text.contains("variant=no_residual "));
    let bad = run(scinet()
        .args(["ablate", "--variant", "nope", "--config"])
        .arg(fx.config("")));
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn sweep_skips_unsupported_depths() {
    let fx = Fixture::new(300);
    let o = run(scinet()
        .args(["sweep", "--levels", "2,5", "--stacks", "1", "--config"])
        .arg(fx.config("epochs=1\n")));
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("levels=2 stacks=1 params="), "{text}");
    assert!(text.contains("levels=5 stacks=1 skipped="), "{text}");
}

#[test]
fn bad_subcommand_is_usage_error() {
    assert_eq!(run(scinet().arg("frobnicate")).status.code(), Some(2));
}
