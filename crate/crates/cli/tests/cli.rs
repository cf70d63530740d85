use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn scaforge(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scaforge")).arg("--out").arg(out).args(args).output().expect("binary runs")
}

fn run_dir(o: &Output) -> PathBuf {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    PathBuf::from(String::from_utf8(o.stdout.clone()).unwrap().trim())
}

#[test]
fn experiment_rows_are_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture("small.toml");
    let args = ["--config", cfg.to_str().unwrap(), "--seed", "7", "experiment", "similarity"];
    let a = run_dir(&scaforge(tmp.path(), &args));
    let b = run_dir(&scaforge(tmp.path(), &args));
    assert_ne!(a, b);
    let ra = std::fs::read(a.join("report.csv")).unwrap();
    let rb = std::fs::read(b.join("report.csv")).unwrap();
    assert!(ra.len() > 200);
    assert_eq!(ra, rb);

    let other = run_dir(&scaforge(tmp.path(), &["--config", cfg.to_str().unwrap(), "--seed", "8", "experiment", "similarity"]));
    assert_ne!(std::fs::read(other.join("report.csv")).unwrap(), ra);
}

#[test]
fn run_directories_are_numbered_and_never_reused() {
    let tmp = tempfile::tempdir().unwrap();
    let rows = fixture("rows.csv");
    let first = run_dir(&scaforge(tmp.path(), &["report", rows.to_str().unwrap()]));
    let marker = first.join("summary.csv");
    let before = std::fs::read(&marker).unwrap();
    let second = run_dir(&scaforge(tmp.path(), &["report", rows.to_str().unwrap()]));
    assert!(first.ends_with("0001-report"));
    assert!(second.ends_with("0002-report"));
    assert_eq!(std::fs::read(&marker).unwrap(), before);
}

#[test]
fn missing_config_exits_one_and_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere/config.toml");
    let o = scaforge(tmp.path(), &["--config", missing.to_str().unwrap(), "synth"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains(missing.to_str().unwrap()));
    assert!(!tmp.path().join("runs").exists());
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [&["frobnicate"][..], &["synth", "--bogus-flag"], &["experiment", "nonsense"], &["craft", "--arch", "Conv9x10-Softmax"], &[]] {
        let o = scaforge(tmp.path(), args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(!o.stderr.is_empty());
    }
}

#[test]
fn bad_config_key_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, "seed = 1\n[zoo]\nn_trains = 4\n").unwrap();
    let o = scaforge(tmp.path(), &["--config", cfg.to_str().unwrap(), "synth"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("n_trains"));
}

#[test]
fn runtime_failure_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    // Valid inputs that fail only once the model sees them: an empty trace.
    std::fs::write(&cfg, "seed = 1\n[zoo]\nn_train = 2\nn_val = 1\nn_heldout = 1\n[attack.train]\nepochs = 1\n").unwrap();
    let traces = tmp.path().join("t.jsonl");
    std::fs::write(&traces, "{\"readouts\":[],\"label\":[22],\"seed\":1,\"params_checksum\":\"x\"}\n").unwrap();
    let o = scaforge(tmp.path(), &["--config", cfg.to_str().unwrap(), "attack", traces.to_str().unwrap(), "--model", "0"]);
    assert_eq!(o.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

/// Group means recomputed straight from the fixture text.
fn spreadsheet_means(text: &str) -> BTreeMap<String, (usize, f64, Option<f64>, Option<f64>)> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let mut groups: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
    for l in lines {
        let f: Vec<String> = l.split(',').map(str::to_string).collect();
        let key = [col("experiment"), col("defense"), col("budget"), col("attacker"), col("eta")].map(|i| f[i].clone()).join("|");
        groups.entry(key).or_default().push(f);
    }
    let avg = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    groups
        .into_iter()
        .map(|(k, rows)| {
            let num = |r: &Vec<String>, c: usize| r[c].parse::<f64>().ok();
            let ler = avg(rows.iter().filter_map(|r| num(r, col("ler_to_label"))).collect()).unwrap();
            let tgt = avg(rows.iter().filter_map(|r| num(r, col("ler_to_target"))).collect());
            let acc = avg(rows
                .iter()
                .filter(|r| !r[col("proxy_acc_victim")].is_empty())
                .map(|r| num(r, col("proxy_acc_extracted")).unwrap_or(0.25))
                .collect());
            (k, (rows.len(), ler, tgt, acc))
        })
        .collect()
}

#[test]
fn report_means_match_an_independent_aggregation() {
    let tmp = tempfile::tempdir().unwrap();
    let rows = fixture("rows.csv");
    let dir = run_dir(&scaforge(tmp.path(), &["report", rows.to_str().unwrap()]));
    let expected = spreadsheet_means(&std::fs::read_to_string(&rows).unwrap());

    let summary = std::fs::read_to_string(dir.join("summary.csv")).unwrap();
    let mut lines = summary.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let mut seen = 0;
    for l in lines {
        let f: Vec<&str> = l.split(',').collect();
        let eta: f64 = f[col("eta")].parse().unwrap();
        let key = format!("{}|{}|{}|{}|{:.1}", f[col("experiment")], f[col("defense")], f[col("budget")], f[col("attacker")], eta);
        let (n, ler, tgt, acc) = expected[&key];
        assert_eq!(f[col("rows")].parse::<usize>().unwrap(), n, "{key}");
        assert!((f[col("mean_ler_to_label")].parse::<f64>().unwrap() - ler).abs() < 1e-12, "{key}");
        let opt = |s: &str| s.parse::<f64>().ok();
        match (opt(f[col("mean_ler_to_target")]), tgt) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12, "{key}"),
            (a, b) => assert_eq!(a, b, "{key}"),
        }
        match (opt(f[col("mean_proxy_acc_extracted")]), acc) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12, "{key}"),
            (a, b) => assert_eq!(a, b, "{key}"),
        }
        seen += 1;
    }
    assert_eq!(seen, expected.len());
    assert!(dir.join("index.html").exists());
    assert!(std::fs::read_dir(&dir).unwrap().any(|e| e.unwrap().path().extension().is_some_and(|x| x == "svg")));
}

#[test]
fn synth_then_attack_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture("small.toml");
    let c = cfg.to_str().unwrap();
    let synth = run_dir(&scaforge(tmp.path(), &["--config", c, "synth", "--split", "val", "--per-arch", "2"]));
    let traces = synth.join("traces.jsonl");
    let text = std::fs::read_to_string(&traces).unwrap();
    assert_eq!(text.lines().count(), 4);
    let attack = run_dir(&scaforge(tmp.path(), &["--config", c, "attack", traces.to_str().unwrap()]));
    let decoded = std::fs::read_to_string(attack.join("decoded.csv")).unwrap();
    assert_eq!(decoded.lines().count(), 5);
    assert!(decoded.starts_with("seed,label,decoded,ler"));
}
