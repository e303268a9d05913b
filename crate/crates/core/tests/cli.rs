use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_metapoison"))
}

const SMALL: &[&str] = &["--sbm", "120,2,0.12,0.01,0.1,4", "--inner-steps", "20", "--labeled-fraction", "0.2"];

fn run(args: &[&str], out: &Path) -> std::process::Output {
    let o = bin().args(args).args(SMALL).arg("--out").arg(out).output().unwrap();
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn attack_writes_every_artifact_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let args = ["attack", "--method", "meta-self", "--budget-frac", "0.05", "--seed", "3"];
    run(&args, &a);
    run(&args, &b);
    for f in ["perturbations.csv", "poisoned_edges.txt", "steps.csv", "split.txt", "attack.json"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f} differs");
    }
    let csv = String::from_utf8(read(&a.join("perturbations.csv"))).unwrap();
    let summary: serde_json::Value = serde_json::from_slice(&read(&a.join("attack.json"))).unwrap();
    let budget = (0.05 * summary["clean_edges"].as_f64().unwrap()).round() as usize;
    assert_eq!(csv.lines().count(), budget + 1);
    assert!(csv.lines().skip(1).all(|l| !l.ends_with(',')));

    // The echoed config re-executes to the same outputs.
    let c = dir.path().join("c");
    let o = bin().args(["attack", "--config"]).arg(a.join("config.txt")).arg("--out").arg(&c).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read(&a.join("perturbations.csv")), read(&c.join("perturbations.csv")));
}

#[test]
fn no_degree_check_leaves_statistic_empty() {
    let dir = tempfile::tempdir().unwrap();
    run(&["attack", "--method", "a-meta-self", "--no-degree-check"], dir.path());
    let csv = String::from_utf8(read(&dir.path().join("perturbations.csv"))).unwrap();
    assert!(csv.lines().count() > 1);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(',')));
}

#[test]
fn evaluate_report_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let args = [
        "evaluate",
        "--method",
        "clean,dice,a-meta-self",
        "--budget-frac",
        "0.01,0.05",
        "--splits",
        "2",
        "--trainings",
        "2",
        "--victim-epochs",
        "50",
        "--bootstrap-resamples",
        "500",
    ];
    let out = run(&args, &a);
    run(&args, &b);
    assert_eq!(read(&a.join("report.json")), read(&b.join("report.json")));
    assert_eq!(read(&a.join("curves.csv")), read(&b.join("curves.csv")));
    let report: serde_json::Value = serde_json::from_slice(&read(&a.join("report.json"))).unwrap();
    assert_eq!(report["cells"].as_array().unwrap().len(), 6);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("a-meta-self") && table.contains("features-only"));
}

#[test]
fn single_trial_report_has_no_interval() {
    let dir = tempfile::tempdir().unwrap();
    run(&["evaluate", "--method", "clean", "--splits", "1", "--trainings", "1", "--victim-epochs", "20"], dir.path());
    let report: serde_json::Value = serde_json::from_slice(&read(&dir.path().join("report.json"))).unwrap();
    let cell = &report["cells"][0];
    assert!(cell["ci_low"].is_null() && cell["ci_high"].is_null());
    assert_eq!(cell["trials"].as_array().unwrap().len(), 1);
}

#[test]
fn analyze_handles_empty_and_mismatched_lists() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "step,kind,u,v,score,lambda_stat\n").unwrap();
    let out = dir.path().join("an");
    let o = run(&["analyze", "--perturbations", empty.to_str().unwrap()], &out);
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["anatomy"]["total"], 0);

    // Attack, then replay the list twice in a row: the repeated edit fails.
    let atk = dir.path().join("atk");
    run(&["attack", "--method", "dice"], &atk);
    let csv = String::from_utf8(read(&atk.join("perturbations.csv"))).unwrap();
    let first = csv.lines().nth(1).unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, format!("step,kind,u,v,score,lambda_stat\n{first}\n{first}\n")).unwrap();
    let o = bin()
        .args(["analyze", "--perturbations", bad.to_str().unwrap()])
        .args(SMALL)
        .arg("--out")
        .arg(dir.path().join("bad"))
        .output()
        .unwrap();
    assert!(!o.status.success());
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "replay");
    assert_eq!(err["step"], 1);
}

#[test]
fn failures_exit_nonzero_with_structured_error() {
    let o = bin().args(["attack", "--method", "meta-self", "--budget-frac", "2"]).output().unwrap();
    assert!(!o.status.success());
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "config");
    let o = bin()
        .args(["attack", "--dataset-edges", "/nonexistent/e", "--dataset-features", "/nonexistent/f"])
        .args(["--dataset-labels", "/nonexistent/l"])
        .output()
        .unwrap();
    assert!(!o.status.success());
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "io");
}

#[test]
fn generated_files_load_back() {
    let dir = tempfile::tempdir().unwrap();
    run(&["generate"], dir.path());
    let p = |f: &str| dir.path().join(f);
    let o = bin()
        .args(["attack", "--method", "dice", "--budget-frac", "0.02", "--dataset-edges"])
        .arg(p("edges.txt"))
        .arg("--dataset-features")
        .arg(p("features.txt"))
        .arg("--dataset-labels")
        .arg(p("labels.txt"))
        .arg("--split")
        .arg(p("split.txt"))
        .arg("--out")
        .arg(p("atk"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}
