use std::path::Path;
use std::process::{Command, Output};

fn loco(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_loco"))
        .args(args)
        .current_dir(dir)
        .env("LOCO_THREADS", "2")
        .output()
        .expect("spawn loco")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn theorem1_default_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = loco(dir.path(), &["theorem1", "--out", "res"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("res/theorem1.csv")).unwrap();
    assert!(csv.starts_with("# meta "));
    assert_eq!(csv.lines().count(), 5);
    assert!(String::from_utf8_lossy(&out.stdout).contains("theorem1.csv"));
}

#[test]
fn same_seed_same_bytes_across_processes() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let out = loco(
            dir.path(),
            &["rank-curve", "--seed", "11", "--n-samples", "3", "--out", name],
        );
        assert_eq!(code(&out), 0);
    }
    let a = std::fs::read(dir.path().join("a/rank.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/rank.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn thread_count_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    let run = |threads: &str, name: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_loco"))
            .args(["subspace-curve", "--n-samples", "4", "--out", name])
            .current_dir(dir.path())
            .env("LOCO_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(code(&out), 0);
        std::fs::read(dir.path().join(name).join("subspace.csv")).unwrap()
    };
    assert_eq!(run("1", "one"), run("4", "four"));
}

#[test]
fn every_curve_command_writes_its_file() {
    let dir = tempfile::tempdir().unwrap();
    for (cmd, file) in [
        ("rank-curve", "rank.csv"),
        ("linearity-curve", "linearity.csv"),
        ("symmetry-curve", "symmetry.csv"),
        ("subspace-curve", "subspace.csv"),
        ("epsrank-curve", "epsrank.csv"),
        ("roundtrip", "roundtrip.csv"),
        ("gpm-check", "gpm.csv"),
    ] {
        let out = loco(
            dir.path(),
            &[cmd, "--dim", "12", "--ranks", "2,1", "--n-samples", "2", "--steps", "20", "--out", "o"],
        );
        assert_eq!(code(&out), 0, "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(dir.path().join("o").join(file).exists(), "{cmd}");
    }
}

#[test]
fn edit_writes_direction() {
    let dir = tempfile::tempdir().unwrap();
    let out = loco(
        dir.path(),
        &["edit", "--layout", "blocks", "--dim", "16", "--lambda", "8", "--steps", "50", "--out", "dir.txt"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("dir.txt")).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("16 "));
    assert_eq!(lines.next().unwrap(), "0,1,2,3,4,5,6,7");
    assert_eq!(lines.count(), 16);
}

#[test]
fn edit_with_blind_mask_is_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    // One rank-2 component on coordinates 0 and 1 of R^6.
    std::fs::write(
        dir.path().join("model.txt"),
        "6 1 2\n1 0 0 0 0 0\n0 1 0 0 0 0\n",
    )
    .unwrap();
    let out = loco(
        dir.path(),
        &["edit", "--model-file", "model.txt", "--mask", "3,4,5", "--r", "2", "--pick", "1"],
    );
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("degenerate"));
}

#[test]
fn usage_and_io_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["dance"],
        vec!["rank-curve", "--eta", "1.5"],
        vec!["rank-curve", "--steps", "zero"],
        vec!["rank-curve", "--model-file", "missing.txt"],
        vec!["rank-curve", "--config", "missing.cfg"],
        vec!["edit", "--mask", "99"],
    ] {
        let out = loco(dir.path(), &args);
        assert_eq!(code(&out), 2, "{args:?}");
    }
    let out = Command::new(env!("CARGO_BIN_EXE_loco"))
        .arg("theorem1")
        .current_dir(dir.path())
        .env("LOCO_THREADS", "lots")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn config_file_unknown_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), "eta = 0.9\nwarp = 9\n").unwrap();
    let out = loco(dir.path(), &["rank-curve", "--config", "run.cfg"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("warp"));
}

#[test]
fn config_file_values_reach_the_table() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("run.cfg"),
        "# small run\ndim = 10\nranks = 1,1\nt_grid = 0.3,0.6\nn_samples = 2\nout = cfg_out\n",
    )
    .unwrap();
    let out = loco(dir.path(), &["rank-curve", "--config", "run.cfg", "--seed", "4"]);
    assert_eq!(code(&out), 0);
    let csv = std::fs::read_to_string(dir.path().join("cfg_out/rank.csv")).unwrap();
    let meta = csv.lines().next().unwrap();
    assert!(meta.contains("d=10") && meta.contains("seed=4") && meta.contains("t_grid=0.3,0.6"));
    assert_eq!(csv.lines().count(), 4);
}
