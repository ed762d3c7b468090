//! End-to-end checks of the command-line surface through `reggan_cli::run`.

use std::path::Path;

use reggan_cli::run;
use reggan_core::harness::warp_mask;
use reggan_core::imaging::{load_field, load_image, save_image};
use reggan_core::metrics::dice;
use reggan_core::synthdata::read_case;
use reggan_core::Image;

fn reggan(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("reggan").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_dataset(dir: &Path) {
    let (code, _, err) = reggan(&[
        "simulate",
        "--seed",
        "3",
        "--phantoms",
        "2",
        "--deformations",
        "3",
        "--width",
        "32",
        "--height",
        "32",
        "--out",
        s(dir),
    ]);
    assert_eq!(code, 0, "{err}");
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn simulate_writes_one_directory_per_case() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    let (code, out, _) = reggan(&[
        "simulate",
        "--seed",
        "7",
        "--phantoms",
        "10",
        "--deformations",
        "20",
        "--out",
        s(&d),
    ]);
    assert_eq!(code, 0);
    assert!(out.contains("200 cases"), "{out}");
    assert_eq!(std::fs::read_dir(d.join("cases")).unwrap().count(), 200);
}

#[test]
fn simulate_is_reproducible_with_force() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    tiny_dataset(&d);
    let first = tree_bytes(&d);
    assert_eq!(reggan(&["simulate", "--seed", "3", "--out", s(&d)]).0, 2);
    let (code, _, err) = reggan(&[
        "simulate",
        "--seed",
        "3",
        "--phantoms",
        "2",
        "--deformations",
        "3",
        "--width",
        "32",
        "--height",
        "32",
        "--out",
        s(&d),
        "--force",
    ]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(tree_bytes(&d), first);
}

#[test]
fn unknown_config_keys_are_usage_errors() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("run.toml");
    std::fs::write(&cfg, "seed = 1\nphantom_count = 4\n").unwrap();
    let (code, _, err) = reggan(&[
        "--config",
        s(&cfg),
        "simulate",
        "--out",
        s(&t.path().join("d")),
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("phantom_count"), "{err}");
    std::fs::write(&cfg, "[train]\nlearning_rate = 0.1\n").unwrap();
    let (code, _, err) = reggan(&["--config", s(&cfg), "train", "--dry-run"]);
    assert_eq!(code, 2);
    assert!(err.contains("learning_rate"), "{err}");
}

#[test]
fn flags_override_config_values() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("run.toml");
    std::fs::write(&cfg, "seed = 5\n[train]\nbatch_size = 2\ngan_iters = 9\n").unwrap();
    let (code, out, _) = reggan(&[
        "--config",
        s(&cfg),
        "train",
        "--dry-run",
        "--gan-iters",
        "11",
    ]);
    assert_eq!(code, 0);
    assert!(
        out.contains("batch_size=2") && out.contains("gan_iters=11") && out.contains("seed=5"),
        "{out}"
    );
}

#[test]
fn seed_falls_back_to_the_environment() {
    // The only test that touches the process environment.
    std::env::set_var(reggan_cli::SEED_ENV, "42");
    let (_, with_env, _) = reggan(&["train", "--dry-run"]);
    let (_, flag, _) = reggan(&["train", "--dry-run", "--seed", "9"]);
    std::env::remove_var(reggan_cli::SEED_ENV);
    assert!(with_env.contains("seed=42"), "{with_env}");
    assert!(flag.contains("seed=9"), "{flag}");
}

#[test]
fn dry_runs_write_nothing() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    let (code, out, _) = reggan(&["simulate", "--out", s(&d), "--dry-run"]);
    assert_eq!(code, 0);
    assert!(out.contains("cases=200"));
    assert!(!d.exists());
    let (code, out, _) = reggan(&[
        "train",
        "--preset",
        "paper",
        "--dry-run",
        "--out",
        s(&t.path().join("m")),
    ]);
    assert_eq!(code, 0);
    assert!(
        out.contains("beta1=0.93") && out.contains("lambda=10") && out.contains("iters=100000"),
        "{out}"
    );
    assert_eq!(std::fs::read_dir(t.path()).unwrap().count(), 0);
}

#[test]
fn ncyc_preset_disables_the_cycle_term() {
    let (_, out, _) = reggan(&["train", "--preset", "ncyc", "--dry-run"]);
    assert!(out.contains("lambda=0 "), "{out}");
}

#[test]
fn train_without_dataset_is_a_usage_error() {
    let t = tempfile::tempdir().unwrap();
    let (code, _, _) = reggan(&[
        "train",
        "--data",
        s(&t.path().join("none")),
        "--out",
        s(&t.path().join("m")),
    ]);
    assert_eq!(code, 2);
    assert_eq!(reggan(&["train", "--out", s(&t.path().join("m"))]).0, 2);
}

#[test]
fn train_register_evaluate_report() {
    let t = tempfile::tempdir().unwrap();
    let (d, m, r, e) = (
        t.path().join("d"),
        t.path().join("m"),
        t.path().join("r"),
        t.path().join("e"),
    );
    tiny_dataset(&d);
    let (code, _, err) = reggan(&[
        "train",
        "--data",
        s(&d),
        "--out",
        s(&m),
        "--pretrain-iters",
        "3",
        "--gan-iters",
        "2",
    ]);
    assert_eq!(code, 0, "{err}");
    let log = std::fs::read_to_string(m.join("trainlog.csv")).unwrap();
    assert!(log.starts_with("iteration,phase,"), "{log}");
    let ckpt = m.join("generator.rgpt");

    let case = d.join("cases/p000_d0000");
    let (code, out, err) = reggan(&[
        "register",
        "--checkpoint",
        s(&ckpt),
        "--ref",
        s(&case.join("ref.rimg")),
        "--flt",
        s(&case.join("ref.rimg")),
        "--out",
        s(&r),
    ]);
    assert_eq!(code, 0, "{err}");
    let line = out.trim();
    let secs = line.strip_prefix("time_s=").expect(line);
    assert_eq!(secs.split('.').nth(1).map(str::len), Some(3), "{line}");
    let field = load_field(r.join("field.rfld")).unwrap();
    assert_eq!(field.dims(), (32, 32));
    assert!(field.max_magnitude() <= 10.0 * 2f64.sqrt() + 1e-9);
    assert_eq!(load_image(r.join("trans.rimg")).unwrap().dims(), (32, 32));

    let small = t.path().join("small.rimg");
    save_image(&Image::constant(16, 16, 0.5).unwrap(), &small).unwrap();
    let (code, _, _) = reggan(&[
        "register",
        "--checkpoint",
        s(&ckpt),
        "--ref",
        s(&case.join("ref.rimg")),
        "--flt",
        s(&small),
        "--out",
        s(&r),
    ]);
    assert_eq!(code, 2);

    let (code, out, err) = reggan(&[
        "evaluate",
        "--data",
        s(&d),
        "--out",
        s(&e),
        "--split",
        "all",
        "--methods",
        "gan_reg,before",
        "--gan-reg",
        s(&ckpt),
        "--save-fields",
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("before registration"));
    let agg = std::fs::read_to_string(e.join("aggregate.csv")).unwrap();
    let methods: Vec<&str> = agg
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(methods, ["before", "gan_reg"]);

    // Dice recomputed from the serialized field and masks.
    let mut rdr = csv::Reader::from_path(e.join("cases.csv")).unwrap();
    let mut checked = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        if &rec[1] != "gan_reg" {
            continue;
        }
        let c = read_case(&d, &rec[0]).unwrap();
        let f = load_field(e.join("fields/gan_reg").join(format!("{}.rfld", &rec[0]))).unwrap();
        let expect = dice(&c.mask_ref, &warp_mask(&c.mask_flt, &f).unwrap()).unwrap();
        assert_eq!(rec[2].parse::<f64>().unwrap(), expect);
        checked += 1;
    }
    assert_eq!(checked, 6);

    let (code, out, _) = reggan(&[
        "report",
        "--cases",
        s(&e.join("cases.csv")),
        "--format",
        "csv",
    ]);
    assert_eq!(code, 0);
    assert_eq!(
        out.lines().next().unwrap(),
        "method,dice,err_def,hd95,mad,mse,time_s"
    );
    assert_eq!(
        reggan(&[
            "report",
            "--cases",
            s(&e.join("cases.csv")),
            "--format",
            "yaml"
        ])
        .0,
        2
    );
}

#[test]
fn evaluate_before_needs_no_checkpoint_and_parallel_runs_agree() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    tiny_dataset(&d);
    let run_eval = |dir: &Path, jobs: &str| {
        let (code, _, err) = reggan(&[
            "evaluate",
            "--data",
            s(&d),
            "--out",
            s(dir),
            "--split",
            "all",
            "--methods",
            "before,baseline_nmi",
            "--baseline-iters",
            "9",
            "--jobs",
            jobs,
        ]);
        assert_eq!(code, 0, "{err}");
        let text = std::fs::read_to_string(dir.join("cases.csv")).unwrap();
        // Drop the timing column.
        text.lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect::<Vec<_>>()
    };
    let a = run_eval(&t.path().join("e1"), "1");
    let b = run_eval(&t.path().join("e2"), "3");
    assert_eq!(a.len(), 13);
    assert_eq!(a, b);
    assert_eq!(
        reggan(&[
            "evaluate",
            "--data",
            s(&d),
            "--out",
            s(&t.path().join("e3")),
            "--methods",
            "gan_reg"
        ])
        .0,
        2
    );
    let missing = t.path().join("nope.rgpt");
    assert_eq!(
        reggan(&[
            "evaluate",
            "--data",
            s(&d),
            "--out",
            s(&t.path().join("e3")),
            "--methods",
            "gan_reg",
            "--gan-reg",
            s(&missing)
        ])
        .0,
        2
    );
}
