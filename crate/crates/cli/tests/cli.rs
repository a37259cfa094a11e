use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use quick_xml::events::Event;
use quick_xml::Reader;
use serde_json::Value;
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_subscale"))
        .args(args)
        .env_remove("SUBSCALE_THREADS")
        .output()
        .expect("spawn subscale")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

struct Work(TempDir);

impl Work {
    fn new() -> Self {
        Work(tempfile::tempdir().unwrap())
    }

    fn path(&self, name: &str) -> String {
        self.0.path().join(name).display().to_string()
    }

    fn file(&self, name: &str) -> PathBuf {
        self.0.path().join(name)
    }

    fn write(&self, name: &str, text: &str) -> String {
        fs::write(self.file(name), text).unwrap();
        self.path(name)
    }

    fn json(&self, name: &str) -> Value {
        serde_json::from_str(&fs::read_to_string(self.file(name)).unwrap()).unwrap()
    }

    fn synth(&self, preset: &str, dir: &str, extra: &[&str]) {
        let out_dir = self.path(dir);
        let mut args = vec!["synth", "--preset", preset, "-o", &out_dir];
        args.extend(extra);
        let out = run(&args);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
}

fn assert_well_formed_svg(path: &Path) {
    let text = fs::read_to_string(path).unwrap();
    assert!(!text.contains("href"), "{} references something", path.display());
    assert!(!text.contains("<image"), "{}", path.display());
    let mut reader = Reader::from_str(&text);
    let mut root = None;
    loop {
        match reader.read_event() {
            Ok(Event::Eof) => break,
            Ok(Event::Start(e)) if root.is_none() => {
                root = Some(String::from_utf8(e.name().as_ref().to_vec()).unwrap())
            }
            Ok(_) => {}
            Err(e) => panic!("{}: {e}", path.display()),
        }
    }
    assert_eq!(root.as_deref(), Some("svg"));
}

const SYMMETRIC: &str =
    r#"{"family":"chinchilla","e_irreducible":1.0,"lambda_n":400,"alpha_n":0.3,"lambda_d":400,"alpha_d":0.3}"#;

#[test]
fn fit_recovers_power_generator() {
    let w = Work::new();
    w.synth("power-grid", "syn", &[]);
    let runs = w.path("syn/runs.csv");
    let out = run(&["fit", "-i", &runs, "-f", "power", "-o", &w.path("fit")]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let result = w.json("fit/fit_result.json");
    let params = &result["params"];
    assert_eq!(params["family"], "power");
    assert!(
        (params["lambda"].as_f64().unwrap() / 30.0 - 1.0).abs() < 1e-6,
        "{params}"
    );
    assert!(
        (params["alpha"].as_f64().unwrap() / 0.05 - 1.0).abs() < 1e-6,
        "{params}"
    );
    assert_eq!(result["converged"], true);
    let residuals = fs::read_to_string(w.file("fit/residuals.csv")).unwrap();
    assert_eq!(residuals.lines().count(), 1 + 330);
    assert_well_formed_svg(&w.file("fit/fit.svg"));
    let manifest = w.json("fit/manifest.json");
    let names: Vec<&str> = manifest["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|o| o["name"].as_str().unwrap())
        .collect();
    assert_eq!(
        names,
        ["fit_result.json", "residuals.csv", "fit_summary.csv", "fit.svg"]
    );
    assert_eq!(manifest["command"]["command"], "fit");
}

#[test]
fn malformed_csv_names_the_row() {
    let w = Work::new();
    let bad = w.write("bad.csv", "run_id,model_size,tokens,loss\na,10,100,3.0\na,10,abc,2.0\n");
    let out = run(&["fit", "-i", &bad, "-f", "power", "-o", &w.path("out")]);
    assert_eq!(code(&out), 1);
    let err = stderr(&out);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(err.contains("row 3"), "{err}");
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(code(&run(&["fit", "--bogus"])), 1);
    assert_eq!(code(&run(&["nonsense"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
}

#[test]
fn missing_family_is_a_usage_error() {
    let w = Work::new();
    w.synth("power-grid", "syn", &[]);
    let out = run(&["fit", "-i", &w.path("syn/runs.csv"), "-o", &w.path("fit")]);
    assert_eq!(code(&out), 1);
}

#[test]
fn two_families_give_sorted_comparison() {
    let w = Work::new();
    w.synth("suboptimal-grid", "syn", &[]);
    let runs = w.path("syn/runs.csv");
    let out = run(&[
        "fit",
        "-i",
        &runs,
        "-f",
        "chinchilla",
        "-f",
        "suboptimal",
        "--split",
        "0.25",
        "-o",
        &w.path("cmp"),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = fs::read_to_string(w.file("cmp/comparison.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "family,mape_fit,mape_pred,converged,params...");
    assert!(rows[1].starts_with("suboptimal,"));
    assert!(rows[2].starts_with("chinchilla,"));
    let json = w.json("cmp/comparison.json");
    let m: Vec<f64> = json
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["mape_pred"].as_f64().unwrap())
        .collect();
    assert!(m[0] < m[1]);
    assert_well_formed_svg(&w.file("cmp/fit.svg"));

    // `compare` defaults to the same two families.
    let out = run(&["compare", "-i", &runs, "-o", &w.path("cmp2")]);
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read_to_string(w.file("cmp2/comparison.csv")).unwrap(), table);
}

#[test]
fn unconverged_fit_exits_two() {
    let w = Work::new();
    w.synth("suboptimal-grid", "syn", &[]);
    let out = run(&[
        "fit",
        "-i",
        &w.path("syn/runs.csv"),
        "-f",
        "suboptimal",
        "--max-iters",
        "1",
        "-o",
        &w.path("nc"),
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    // Outputs are still written for inspection.
    assert_eq!(w.json("nc/fit_result.json")["converged"], false);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let w = Work::new();
    w.synth("suboptimal-grid", "syn", &[]);
    let cfg = w.write("cfg.json", r#"{"max_iters": 1, "seed": 3}"#);
    let runs = w.path("syn/runs.csv");
    let out = run(&["fit", "-i", &runs, "-f", "suboptimal", "-c", &cfg, "-o", &w.path("a")]);
    assert_eq!(code(&out), 2);
    let out = run(&[
        "fit",
        "-i",
        &runs,
        "-f",
        "suboptimal",
        "-c",
        &cfg,
        "--max-iters",
        "500",
        "-o",
        &w.path("b"),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(w.json("b/manifest.json")["seed"], 3);
    let out = run(&[
        "--seed",
        "9",
        "fit",
        "-i",
        &runs,
        "-f",
        "suboptimal",
        "-c",
        &cfg,
        "--max-iters",
        "500",
        "-o",
        &w.path("c"),
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(w.json("c/manifest.json")["seed"], 9);
    let bad = w.write("bad.json", r#"{"tolerance": -1}"#);
    assert_eq!(
        code(&run(&[
            "fit",
            "-i",
            &runs,
            "-f",
            "power",
            "-c",
            &bad,
            "-o",
            &w.path("d")
        ])),
        1
    );
}

#[test]
fn predict_with_fitted_params() {
    let w = Work::new();
    w.synth("power-grid", "syn", &[]);
    let runs = w.path("syn/runs.csv");
    assert_eq!(
        code(&run(&["fit", "-i", &runs, "-f", "power", "-o", &w.path("fit")])),
        0
    );
    let out = run(&[
        "predict",
        "-p",
        &w.path("fit/fit_result.json"),
        "-i",
        &runs,
        "-o",
        &w.path("pred"),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(w.json("pred/predict.json")["mape"].as_f64().unwrap() < 1e-9);
    assert_well_formed_svg(&w.file("pred/predict.svg"));
}

#[test]
fn alloc_symmetric_law_prints_unit_otr() {
    let w = Work::new();
    let law = w.write("sym.json", SYMMETRIC);
    let out = run(&["alloc", "-p", &law, "-b", "1e21"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let plan: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((plan["otr_star"].as_f64().unwrap() - 1.0).abs() < 1e-5);
}

#[test]
fn alloc_sweep_writes_table_and_plot() {
    let w = Work::new();
    let law = w.write(
        "law.json",
        r#"{"family":"suboptimal","e_irreducible":1.372,"lambda_n":61.929,"alpha_n":0.272,"lambda_d":455.345,"alpha_d":0.289,"k1":0.0081,"k2":0.00114}"#,
    );
    let out = run(&["alloc", "-p", &law, "-b", "1e20", "--sweep", "-o", &w.path("al")]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let plan = w.json("al/allocation.json");
    let n_star = plan["n_star"].as_f64().unwrap();
    let sweep = fs::read_to_string(w.file("al/sweep.csv")).unwrap();
    let mut best = (f64::INFINITY, 0.0);
    for line in sweep.lines().skip(1) {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        if cols[3] < best.0 {
            best = (cols[3], cols[1]);
        }
    }
    // The sweep's best OTR sits within one sweep step of the optimum.
    assert!((best.1 / n_star).ln().abs() < 0.2, "{} vs {n_star}", best.1);
    assert!(best.0 >= plan["predicted_loss"].as_f64().unwrap() - 1e-12);
    assert_well_formed_svg(&w.file("al/sweep.svg"));
    assert_eq!(code(&run(&["alloc", "-p", &law, "-b", "1e20", "--sweep"])), 1);
}

#[test]
fn alloc_exit_codes() {
    let w = Work::new();
    let law = w.write("sym.json", SYMMETRIC);
    let out = run(&["alloc", "-p", &law, "-b", "0"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("budget"));
    let edge = w.write(
        "edge.json",
        r#"{"family":"chinchilla","e_irreducible":1.0,"lambda_n":1e6,"alpha_n":0.5,"lambda_d":1,"alpha_d":0.01}"#,
    );
    let out = run(&["alloc", "-p", &edge, "-b", "1e20"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("edge"));
    let missing = w.path("nope.json");
    assert_eq!(code(&run(&["alloc", "-p", &missing, "-b", "1e20"])), 1);
}

#[test]
fn density_two_blobs_orders_by_spread() {
    let w = Work::new();
    w.synth("two-blobs", "blobs", &[]);
    let emb = w.path("blobs/embeddings.emb");
    let out = run(&["density", "-i", &emb, "-k", "2", "-o", &w.path("den")]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = w.json("den/density.json");
    assert_eq!(report["k"], 2);
    let mut clusters: Vec<(f64, f64)> = report["per_cluster"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| (c["radius"].as_f64().unwrap(), c["log_density"].as_f64().unwrap()))
        .collect();
    clusters.sort_by(|a, b| a.0.total_cmp(&b.0));
    assert!(clusters[0].1 > clusters[1].1, "{clusters:?}");
    let rows = fs::read_to_string(w.file("den/clustering.csv")).unwrap();
    assert_eq!(rows.lines().count(), 601);
    assert_well_formed_svg(&w.file("den/density.svg"));
}

#[test]
fn select_fraction_one_keeps_everything() {
    let w = Work::new();
    w.synth("two-blobs", "blobs", &[]);
    let emb = w.path("blobs/embeddings.emb");
    let out = run(&[
        "select",
        "-i",
        &emb,
        "-k",
        "2",
        "--fraction",
        "1.0",
        "-o",
        &w.path("sel"),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ids = fs::read_to_string(w.file("sel/retained_ids.txt")).unwrap();
    let expected: Vec<String> = (0..600).map(|i| i.to_string()).collect();
    assert_eq!(ids.lines().collect::<Vec<_>>(), expected);
}

#[test]
fn selection_lowers_density() {
    let w = Work::new();
    w.synth("populous-blob", "blobs", &[]);
    let emb = w.path("blobs/embeddings.emb");
    let out = run(&[
        "select",
        "-i",
        &emb,
        "-k",
        "2",
        "--fraction",
        "0.5",
        "-o",
        &w.path("sel"),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let sel = w.json("sel/selection.json");
    let before = sel["log_density_before"].as_f64().unwrap();
    let after = sel["log_density_after"].as_f64().unwrap();
    assert!(after <= before);
    assert_eq!(
        fs::read_to_string(w.file("sel/retained_ids.txt"))
            .unwrap()
            .lines()
            .count(),
        550
    );
    assert_well_formed_svg(&w.file("sel/selection.svg"));
    // select without a target is a usage error.
    assert_eq!(code(&run(&["select", "-i", &emb, "-k", "2", "-o", &w.path("x")])), 1);
}

#[test]
fn density_exit_codes() {
    let w = Work::new();
    let same = w.write("same.csv", "id,v0,v1\na,1,1\nb,1,1\nc,1,1\nd,1,1\n");
    let out = run(&["density", "-i", &same, "-k", "2", "-o", &w.path("d")]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let junk = w.write("junk.emb", "not an embedding file");
    assert_eq!(code(&run(&["density", "-i", &junk, "-k", "2", "-o", &w.path("e")])), 1);
    let tiny = w.write("tiny.csv", "id,v0\na,1\nb,2\n");
    assert_eq!(code(&run(&["density", "-i", &tiny, "-k", "5", "-o", &w.path("f")])), 1);
}

#[test]
fn stability_sweep_and_frontier() {
    let w = Work::new();
    w.synth("suboptimal-grid", "syn", &["--noise", "0.01"]);
    let runs = w.path("syn/runs.csv");
    let out = run(&[
        "sweep",
        "-i",
        &runs,
        "--edges",
        "50,120,240,480,960,1700",
        "-o",
        &w.path("sw"),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = w.json("sw/stability.json");
    assert_eq!(report["bins"].as_array().unwrap().len(), 5);
    assert_well_formed_svg(&w.file("sw/stability.svg"));

    // Runs without a learning-rate column cannot form a frontier.
    let out = run(&[
        "sweep",
        "-i",
        &runs,
        "--knob",
        "lr",
        "--targets",
        "3.0",
        "-o",
        &w.path("fr"),
    ]);
    assert_eq!(code(&out), 1);

    let mut csv = String::from("run_id,model_size,tokens,loss,step,batch_size,learning_rate\n");
    for (i, lr) in [1e-4, 3e-4, 1e-3].iter().enumerate() {
        for s in 1..=20u64 {
            let tokens = s * 1_000_000;
            let loss = 2.0 + 5.0 * (lr * 1e3 * tokens as f64 / 1e6).powf(-0.5);
            csv.push_str(&format!("r{i},1000000,{tokens},{loss},{s},,{lr}\n"));
        }
    }
    let lr_runs = w.write("lr.csv", &csv);
    let out = run(&[
        "sweep",
        "-i",
        &lr_runs,
        "--knob",
        "lr",
        "--targets",
        "4.0,3.5",
        "--window",
        "1",
        "-o",
        &w.path("fr"),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let frontier = w.json("fr/frontier.json");
    let points = frontier["points"].as_array().unwrap();
    assert_eq!(points.len(), 2);
    assert!(points.iter().all(|p| p["knob_value"] == 1e-3));
    assert_well_formed_svg(&w.file("fr/frontier.svg"));
}

#[test]
fn ingest_smooths_and_converts() {
    let w = Work::new();
    w.synth("suboptimal-grid", "syn", &["--noise", "0.02"]);
    let out = run(&[
        "ingest",
        "-i",
        &w.path("syn/runs.csv"),
        "-o",
        &w.path("smooth.jsonl"),
        "--smooth",
        "5",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(w.file("smooth.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 330);
    let first: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["run_id"], "n20000000");
}

#[test]
fn synth_seed_override_changes_noise_only_when_given() {
    let w = Work::new();
    w.synth("suboptimal-grid", "a", &["--noise", "0.01"]);
    w.synth("suboptimal-grid", "b", &["--noise", "0.01"]);
    w.synth("suboptimal-grid", "c", &["--noise", "0.01", "--seed", "4"]);
    let read = |d: &str| fs::read(w.file(&format!("{d}/runs.csv"))).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
    assert_eq!(w.json("c/manifest.json")["seed"], 4);
    assert_eq!(w.json("c/spec.json")["seed"], 4);

    let spec = w.write(
        "spec.json",
        r#"{"kind":"blobs","dim":2,"seed":1,"clusters":[{"n_samples":5,"centroid":[0,0],"spread":1},{"n_samples":5,"centroid":[5,5],"spread":1}]}"#,
    );
    let out = run(&["synth", "--spec", &spec, "-o", &w.path("s")]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read_to_string(w.file("s/labels.csv")).unwrap().lines().count(), 11);
}

#[test]
fn report_reproduces_and_detects_tampering() {
    let w = Work::new();
    w.synth("two-blobs", "blobs", &[]);
    let emb = w.path("blobs/embeddings.emb");
    let out = run(&[
        "--seed",
        "11",
        "select",
        "-i",
        &emb,
        "-k",
        "2",
        "--fraction",
        "0.7",
        "-o",
        &w.path("sel"),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let manifest = w.path("sel/manifest.json");
    let out = run(&["report", "-m", &manifest, "-o", &w.path("again")]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert_eq!(
        stdout.lines().filter(|l| l.starts_with("identical")).count(),
        6,
        "{stdout}"
    );
    assert!(!stdout.contains("differs"));

    fs::write(w.file("sel/retained_ids.txt"), "tampered\n").unwrap();
    let out = run(&["report", "-m", &manifest, "-o", &w.path("third")]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("retained_ids.txt"));

    assert_eq!(code(&run(&["report", "-m", &manifest, "-o", &w.path("sel")])), 1);
    assert_eq!(
        code(&run(&["report", "-m", &w.path("missing.json"), "-o", &w.path("x")])),
        1
    );
}

#[test]
fn thread_count_does_not_change_compare_outputs() {
    let w = Work::new();
    w.synth("suboptimal-grid", "syn", &["--noise", "0.01"]);
    let runs = w.path("syn/runs.csv");
    for (threads, dir) in [("1", "t1"), ("5", "t5")] {
        let out = run(&[
            "--threads",
            threads,
            "compare",
            "-i",
            &runs,
            "--random-starts",
            "4",
            "-o",
            &w.path(dir),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    for name in ["comparison.csv", "comparison.json", "fit.svg"] {
        assert_eq!(
            fs::read(w.file(&format!("t1/{name}"))).unwrap(),
            fs::read(w.file(&format!("t5/{name}"))).unwrap()
        );
    }
}
