use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn efl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_efl"))
        .args(args)
        .env_remove("EFL_WORKERS")
        .output()
        .expect("run efl")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn synth(dir: &Path, extra: &[&str]) {
    let out_dir = dir.to_str().unwrap();
    let mut args = vec!["synth", "--out", out_dir];
    args.extend_from_slice(extra);
    let out = efl(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn manifest(dir: &Path) -> String {
    dir.join("manifest.json").to_str().unwrap().to_string()
}

#[test]
fn synth_analyze_verify_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(
        &data,
        &[
            "--kind", "sink", "--len", "48", "--d-h", "8", "--count", "4", "--seed", "10",
        ],
    );
    assert!(data.join("sink_seed13.eft").exists());
    let out = tmp.path().join("out");
    let run = efl(&[
        "analyze",
        "--manifest",
        &manifest(&data),
        "--out",
        out.to_str().unwrap(),
        "--format",
        "json,csv",
    ]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let heads: Vec<_> = fs::read_dir(out.join("heads")).unwrap().collect();
    assert_eq!(heads.len(), 4);
    let agg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("aggregate.json")).unwrap()).unwrap();
    assert_eq!(agg["heads"], 4);
    assert_eq!(agg["checks"]["row_sum"]["pass"], 4);
    let csv = fs::read_to_string(out.join("heads.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("index,model_id,layer"));

    let verify = efl(&["verify", "--manifest", &manifest(&data)]);
    assert_eq!(code(&verify), 0);
    let text = stdout(&verify);
    assert!(text.contains("verify: all checks passed on 4 heads"), "{text}");
    assert!(text
        .lines()
        .any(|l| l.starts_with("delocalization_kappa") && l.contains("(informational)")));
}

#[test]
fn analysis_is_byte_identical_across_worker_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(
        &data,
        &["--kind", "low-rank-noise", "--len", "40", "--d-h", "6", "--count", "5"],
    );
    let mut outputs = Vec::new();
    for workers in ["1", "2", "1"] {
        let out = tmp.path().join(format!("out{}", outputs.len()));
        let run = efl(&[
            "--workers",
            workers,
            "analyze",
            "--manifest",
            &manifest(&data),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&run), 0);
        let mut files: Vec<_> = fs::read_dir(out.join("heads"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        files.sort();
        // The recorded run config names the worker count and output path.
        let mut agg: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join("aggregate.json")).unwrap()).unwrap();
        agg.as_object_mut().unwrap().remove("config");
        let mut all = agg.to_string().into_bytes();
        for f in files {
            all.extend(fs::read(f).unwrap());
        }
        outputs.push(all);
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
}

#[test]
fn corrupt_dump_exits_one_and_keeps_the_rest() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &["--len", "24", "--d-h", "4", "--count", "10"]);
    let victim = data.join("gaussian_seed3.eft");
    let bytes = fs::read(&victim).unwrap();
    fs::write(&victim, &bytes[..bytes.len() / 2]).unwrap();
    let out = tmp.path().join("out");
    let run = efl(&[
        "analyze",
        "--manifest",
        &manifest(&data),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 1);
    assert_eq!(fs::read_dir(out.join("heads")).unwrap().count(), 10);
    let agg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("aggregate.json")).unwrap()).unwrap();
    assert_eq!(agg["failed_heads"], 1);
    assert_eq!(agg["overall"]["heads"], 9);
    assert!(String::from_utf8_lossy(&run.stderr).contains("0003"));
}

#[test]
fn missing_manifest_exits_one() {
    let run = efl(&[
        "analyze",
        "--manifest",
        "/nonexistent/manifest.json",
        "--out",
        "/tmp/unused",
    ]);
    assert_eq!(code(&run), 1);
}

#[test]
fn injected_row_sum_fault_exits_two() {
    let run = efl(&["verify", "--len", "32", "--d-h", "4", "--inject-rowsum-bug"]);
    assert_eq!(code(&run), 2);
    assert!(stdout(&run).contains("FAILED"));
    let clean = efl(&["verify", "--len", "32", "--d-h", "4"]);
    assert_eq!(code(&clean), 0);
}

#[test]
fn single_token_context_is_skipped() {
    let run = efl(&["verify", "--len", "1", "--d-h", "4"]);
    assert_eq!(code(&run), 0);
    let text = stdout(&run);
    let bridge = text.lines().find(|l| l.starts_with("bridge")).unwrap();
    assert!(bridge.contains("skipped=1"), "{bridge}");
}

#[test]
fn two_hundred_seed_batch_passes() {
    let run = efl(&[
        "verify", "--len", "32", "--d-h", "8", "--count", "200", "--seed", "1000",
    ]);
    assert_eq!(code(&run), 0, "{}", stdout(&run));
    assert!(stdout(&run).contains("on 200 heads"));
    let row_sum = stdout(&run)
        .lines()
        .find(|l| l.starts_with("row_sum"))
        .unwrap()
        .to_string();
    assert!(row_sum.contains("pass=200"), "{row_sum}");
}

#[test]
fn monitor_alerts_on_concentrated_record() {
    let mut child = Command::new(env!("CARGO_BIN_EXE_efl"))
        .args(["monitor", "--mu-k-threshold", "5"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(
            b"{\"head_id\":\"gpt2/L3/H7\",\"step\":9,\"L\":256,\"max_row_norm_sq\":26.0,\"frob_sq\":256.0}\n\
              {\"head_id\":\"gpt2/L3/H8\",\"step\":9,\"L\":256,\"max_row_norm_sq\":1.5,\"frob_sq\":256.0}\n\
              garbage\n",
        )
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert_eq!(code(&out), 0);
    let alerts: Vec<serde_json::Value> = stdout(&out).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(alerts.len(), 1);
    assert_eq!(alerts[0]["head_id"], "gpt2/L3/H7");
    assert_eq!(alerts[0]["mu_k"], 26.0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("2 records, 1 alerts, 1 skipped"));
}

#[test]
fn plotdata_bridge_endpoints_close_at_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &["--kind", "sink", "--len", "64", "--d-h", "8", "--count", "2"]);
    let out = tmp.path().join("plots");
    let run = efl(&[
        "plotdata",
        "--manifest",
        &manifest(&data),
        "--out",
        out.to_str().unwrap(),
        "--head",
        "1",
    ]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let name = |kind: &str| out.join(format!("0001_synth-sink_L0_H1_{kind}.csv"));
    let bridge = fs::read_to_string(name("bridge_endpoints")).unwrap();
    let rows: Vec<&str> = bridge.lines().skip(1).collect();
    assert_eq!(rows.len(), 20);
    let last: Vec<&str> = rows[19].split(',').collect();
    assert_eq!(last[0], (64 * 65 / 2 - 1).to_string());
    assert!(last[1].parse::<f64>().unwrap().abs() < 1e-9);
    let contour = fs::read_to_string(name("field_contour")).unwrap();
    assert_eq!(contour.lines().count(), 1 + 64 * 65 / 2);
    // The sink column sits in the calibrated band.
    let col0: Vec<f64> = contour
        .lines()
        .skip(1)
        .filter_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[1] == "0" && f[0] != "0").then(|| f[2].parse().unwrap())
        })
        .collect();
    let mean = col0.iter().sum::<f64>() / col0.len() as f64;
    assert!((5.0..=7.0).contains(&mean), "sink mean {mean}");
    assert!(name("wavelet_spectrum").exists() && name("fidelity_curves").exists());
    let mu = fs::read_to_string(out.join("mu_k_vs_size.csv")).unwrap();
    assert!(mu.contains("synth-sink,2,"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&efl(&["analyze"])), 1);
    assert_eq!(code(&efl(&["no-such-command"])), 1);
    assert_eq!(code(&efl(&["verify", "--len", "8"])), 1);
    assert_eq!(
        code(&efl(&["verify", "--len", "8", "--d-h", "2", "--fidelity-rs", "0"])),
        1
    );
    assert_eq!(code(&efl(&["--help"])), 0);
}
