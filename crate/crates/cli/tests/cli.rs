use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn pilotkit(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pilotkit"))
        .args(args)
        .env("PILOTKIT_ROOT", root)
        .output()
        .expect("run pilotkit")
}

fn workload(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../workloads").join(name)
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

const HEADER: &str = "scenario,backend,partitions,reducers,iteration,phase,wall_ms,bytes_moved";

#[test]
fn validate_is_silent_on_good_files() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["demo.toml", "yarn.toml"] {
        let o = pilotkit(dir.path(), &["validate", workload(name).to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{name}");
        assert!(o.stdout.is_empty() && o.stderr.is_empty(), "{name}");
    }
}

#[test]
fn validation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(workload("demo.toml")).unwrap();
    for (from, to) in [
        ("spec_version = 1", "spec_version = 7"),
        ("n_clusters = 8", "n_clusters = 8\nshape = 1"),
        ("n_clusters = 8", "n_clusters = 0"),
        ("space = \"scratch\"", "space = \"elsewhere\""),
    ] {
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, text.replace(from, to)).unwrap();
        for cmd in ["validate", "run"] {
            let o = pilotkit(dir.path(), &[cmd, path.to_str().unwrap()]);
            assert_eq!(o.status.code(), Some(1), "{cmd} with {to}");
            assert!(!o.stderr.is_empty());
        }
    }
    let o = pilotkit(dir.path(), &["validate", "/nonexistent/spec.toml"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn usage_errors_print_help_and_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&[][..], &["frobnicate"], &["kmeans", "--points", "10"], &["kmeans", "--points", "x", "--clusters", "1"]] {
        let o = pilotkit(dir.path(), args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("Usage:"), "{args:?}");
    }
    let o = pilotkit(dir.path(), &["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("bench-io"));
}

#[test]
fn kmeans_writes_csv_to_stdout_or_file() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "kmeans", "--points", "500", "--clusters", "4", "--backend", "file", "--partitions", "2", "--reducers", "3",
        "--seed", "9", "--max-iter", "3",
    ];
    let o = pilotkit(dir.path(), &args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], HEADER);
    assert_eq!(lines.len(), 1 + 1 + 4 * 3);
    assert!(lines[1].starts_with("kmeans-500x4x2,file,2,3,0,load,"));
    assert!(!text.contains('\r'));

    let out = dir.path().join("r.csv");
    let mut with_out = args.to_vec();
    with_out.extend(["--out", out.to_str().unwrap()]);
    let o = pilotkit(dir.path(), &with_out);
    assert_eq!(o.status.code(), Some(0));
    assert!(o.stdout.is_empty());
    let strip = |s: &str| -> Vec<String> {
        s.lines()
            .map(|l| {
                let mut f: Vec<&str> = l.split(',').collect();
                f[6] = "";
                f.join(",")
            })
            .collect()
    };
    assert_eq!(strip(&std::fs::read_to_string(&out).unwrap()), strip(&text));
}

#[test]
fn kmeans_rejects_bad_arguments() {
    let dir = tempfile::tempdir().unwrap();
    let o = pilotkit(dir.path(), &["kmeans", "--points", "3", "--clusters", "5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("n_clusters"));
    let o = pilotkit(dir.path(), &["kmeans", "--points", "3", "--clusters", "1", "--backend", "tape"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bench_io_reports_three_phases_per_backend() {
    let dir = tempfile::tempdir().unwrap();
    let o = pilotkit(dir.path(), &["bench-io", "--sizes", "1,2", "--backends", "memory,file", "--workers", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2 * 2 * 3);
    assert_eq!(rows[0][..6], ["io-1mb", "memory", "2", "0", "0", "put"]);
    assert_eq!(rows[11][..6], ["io-2mb", "file", "2", "0", "0", "parallel_read"]);
    assert_eq!(rows[11][7], (2 << 20).to_string());
}

#[test]
fn run_executes_units_and_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let o = pilotkit(dir.path(), &["run", workload("demo.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unit hello"));
    let text = stdout(&o);
    assert_eq!(text.lines().next(), Some(HEADER));
    assert_eq!(text.lines().count(), 1 + 1 + 4 * 5);
    let left: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert!(left.is_empty(), "scratch directories left behind");
}

#[test]
fn failing_units_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(workload("demo.toml"))
        .unwrap()
        .replace("\"/bin/echo\"", "\"/bin/false\"");
    let path = dir.path().join("fails.toml");
    std::fs::write(&path, text).unwrap();
    let o = pilotkit(dir.path(), &["run", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("FAILED"));
}
