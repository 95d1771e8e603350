use std::io::Write;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--vocab-size",
    "50",
    "--d-model",
    "32",
    "--d-ff",
    "48",
    "--layers",
    "3",
    "--heads",
    "2",
    "--visual-dim",
    "8",
    "--visual",
    "40",
    "--prompt",
    "6",
    "--output-len",
    "8",
    "--steps",
    "4",
    "--merge-layer",
    "1",
];

fn d3tom(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_d3tom"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tiny(cmd: &str, extra: &[&str]) -> Output {
    let mut args = vec![cmd];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    d3tom(&args)
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn tflops(row: &[String]) -> f64 {
    row[4].parse::<f64>().unwrap() / 1e12
}

#[test]
fn flops_table_for_the_8b_preset() {
    let o = d3tom(&["flops", "--preset", "lavida-8b"]);
    let out = stdout(&o);
    assert_eq!(
        out.lines().next().unwrap(),
        "method,retain_pct,alpha_or_R,l_star_or_K,flops_mac,flops_rel"
    );
    let expect: &[(&str, [f64; 5])] = &[
        ("d3tom", [159.42, 125.73, 109.12, 92.61, 79.35]),
        ("d3tom-t", [160.03, 125.99, 109.27, 92.68, 79.37]),
        ("fastv", [158.10, 124.01, 107.22, 90.54, 77.14]),
        ("pdrop", [187.18, 137.13, 119.57, 105.87, 97.16]),
        ("visionzip", [143.57, 104.74, 85.62, 66.62, 51.36]),
    ];
    let table = rows(&out);
    for (method, want) in expect {
        let got: Vec<&Vec<String>> = table.iter().filter(|r| r[0] == *method).collect();
        assert_eq!(got.len(), 5, "{method}");
        for (r, w) in got.iter().zip(want) {
            let rel = (tflops(r) - w).abs() / w;
            assert!(rel < 0.005, "{method} at {}%: {} vs {w}", r[1], tflops(r));
        }
    }
    let base: Vec<&Vec<String>> = table.iter().filter(|r| r[0] == "baseline").collect();
    assert!(base.iter().all(|r| r[4] == "262599132315648" && r[5] == "100"));
    let d = table.iter().find(|r| r[0] == "d3tom" && r[1] == "10").unwrap();
    assert_eq!((d[2].as_str(), d[3].as_str()), ("0.9", "3"));
    let p = table.iter().find(|r| r[0] == "pdrop").unwrap();
    assert_eq!(p[3], "");
}

#[test]
fn flops_empty_method_list_prints_header_only() {
    let out = stdout(&d3tom(&["flops", "--methods", ""]));
    assert_eq!(out.lines().count(), 1);
}

#[test]
fn flops_rejects_bad_input_with_usage_status() {
    assert_eq!(d3tom(&["flops", "--methods", "nope"]).status.code(), Some(2));
    assert_eq!(d3tom(&["flops", "--retain", "0"]).status.code(), Some(2));
    assert_eq!(d3tom(&["flops", "--retain", "abc"]).status.code(), Some(2));
    assert_eq!(d3tom(&["flops", "--preset", "huge"]).status.code(), Some(2));
}

#[test]
fn sweep_grid() {
    let out = stdout(&d3tom(&[
        "sweep", "--preset", "lavida-8b", "--l-star", "0,3,15", "--alpha", "0,0.75,0.9",
    ]));
    let t = rows(&out);
    assert_eq!(t.len(), 9);
    assert!(t.iter().filter(|r| r[1] == "0").all(|r| r[3] == "100"));
    let cell = |l: &str, a: &str| t.iter().find(|r| r[0] == l && r[1] == a).unwrap()[2].parse::<f64>().unwrap() / 1e12;
    for (l, a, want) in [("0", "0.75", 93.05), ("15", "0.75", 173.41), ("0", "0.9", 60.16), ("15", "0.9", 156.09)] {
        assert!((cell(l, a) - want).abs() / want < 0.005, "l*={l} α={a}");
    }
}

#[test]
fn sweep_is_monotone_in_merge_layer() {
    let out = stdout(&d3tom(&["sweep", "--preset", "lavida-8b", "--l-star", "0,1,2,3,7,11,15,31", "--alpha", "0.5,0.9"]));
    for a in ["0.5", "0.9"] {
        let rel: Vec<f64> = rows(&out).iter().filter(|r| r[1] == a).map(|r| r[3].parse().unwrap()).collect();
        assert!(rel.windows(2).all(|w| w[0] <= w[1]), "{rel:?}");
    }
}

#[test]
fn sweep_usage_errors() {
    assert_eq!(d3tom(&["sweep", "--l-star", ""]).status.code(), Some(2));
    assert_eq!(d3tom(&["sweep", "--alpha", ""]).status.code(), Some(2));
    assert_eq!(d3tom(&["sweep", "--l-star", "8"]).status.code(), Some(2));
    assert_eq!(d3tom(&["sweep", "--method", "baseline"]).status.code(), Some(2));
}

#[test]
fn sweep_measure_adds_time_column() {
    let out = stdout(&tiny("sweep", &["--l-star", "0,1", "--alpha", "0.5", "--measure"]));
    assert_eq!(out.lines().next().unwrap(), "l_star,alpha,flops_mac,flops_rel,time_ms");
    assert!(rows(&out).iter().all(|r| r[4].parse::<f64>().unwrap() > 0.0));
}

#[test]
fn decode_is_reproducible() {
    let a = stdout(&tiny("decode", &["--method", "baseline", "--seed", "42"]));
    let b = stdout(&tiny("decode", &["--method", "baseline", "--seed", "42"]));
    assert_eq!(a, b);
    assert!(a.starts_with("tokens: "));
    assert_eq!(a.lines().next().unwrap().split_whitespace().count(), 1 + 8);
    assert_eq!(a.lines().count(), 1 + 4);
}

#[test]
fn decode_reports_merge_counts() {
    let out = stdout(&tiny("decode", &["--alpha", "0.75"]));
    let merging: Vec<&str> = out.lines().filter(|l| l.contains("kept=10 merged=30")).collect();
    assert_eq!(merging.len(), 3, "{out}");
    assert!(out.lines().nth(1).unwrap().contains("kept=- merged=-"));
}

#[test]
fn decode_step_trace_shows_rising_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("steps.csv");
    let p = path.to_str().unwrap();
    stdout(&tiny(
        "decode",
        &["--method", "d3tom-t", "--alpha-min", "0.5", "--alpha-max", "0.9", "--trace", p],
    ));
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), "step,t,alpha,n_deciders,kept,merged");
    let t = rows(&text);
    assert_eq!(t.len(), 4);
    assert_eq!(t[0][2], "");
    let alphas: Vec<f64> = t.iter().filter(|r| !r[2].is_empty()).map(|r| r[2].parse().unwrap()).collect();
    assert_eq!(alphas.first(), Some(&0.5));
    assert_eq!(alphas.last(), Some(&0.9));
    assert!(alphas.windows(2).all(|w| w[0] < w[1]), "{alphas:?}");
}

#[test]
fn decode_rejects_bad_schedule_bounds() {
    let o = tiny("decode", &["--method", "d3tom-t", "--alpha-min", "0.9", "--alpha-max", "0.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(tiny("decode", &["--alpha", "1.5"]).status.code(), Some(2));
}

#[test]
fn decode_with_zero_ratio_matches_baseline() {
    let first = |o: String| o.lines().next().unwrap().to_string();
    let base = first(stdout(&tiny("decode", &["--method", "baseline"])));
    let zero = first(stdout(&tiny("decode", &["--method", "d3tom", "--alpha", "0"])));
    assert_eq!(base, zero);
}

#[test]
fn decode_with_cache() {
    for mode in ["sum", "average"] {
        let out = stdout(&tiny("decode", &["--kv-cache", "--cache-mode", mode, "--alpha", "0.5"]));
        assert!(out.contains("kept=20 merged=20"), "{out}");
    }
}

#[test]
fn decode_refuses_wide_models_without_force() {
    assert_eq!(d3tom(&["decode", "--preset", "lavida-8b"]).status.code(), Some(2));
    assert_eq!(d3tom(&["decode", "--d-model", "2048", "--heads", "8"]).status.code(), Some(2));
}

#[test]
fn config_file_sits_between_preset_and_flags() {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    writeln!(
        f,
        "# tiny model\nvocab_size = 50\nd_model = 32\nd_ff = 48\nn_layers = 3\nn_heads = 2\n\
         visual_dim = 8\nn_visual = 40\nn_prompt = 6\nn_output = 8\nn_steps = 4\nmerge_layer = 1\nseed = 1"
    )
    .unwrap();
    let path = f.path().to_str().unwrap();
    let from_file = stdout(&d3tom(&["decode", "--config", path, "--seed", "7"]));
    let from_flags = stdout(&tiny("decode", &["--seed", "7"]));
    assert_eq!(from_file, from_flags);

    let mut bad = tempfile::NamedTempFile::new().unwrap();
    writeln!(bad, "wat = 3").unwrap();
    let o = d3tom(&["decode", "--config", bad.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn weight_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.bin");
    let p = path.to_str().unwrap();
    let saved = stdout(&tiny("decode", &["--save-weights", p]));
    let loaded = stdout(&d3tom(&["decode", "--weights", p]));
    assert_eq!(saved, loaded);
    let missing = dir.path().join("none.bin");
    assert_eq!(d3tom(&["decode", "--weights", missing.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn trace_rows() {
    let out = stdout(&tiny("trace", &["--alpha", "0.75"]));
    assert_eq!(out.lines().next().unwrap(), "step,visual_index,score,kept_flag,step_argmax");
    let t = rows(&out);
    assert_eq!(t.len(), 3 * 40);
    for step in ["2", "3", "4"] {
        let s: Vec<&Vec<String>> = t.iter().filter(|r| r[0] == step).collect();
        assert_eq!(s.iter().filter(|r| r[3] == "1").count(), 10);
        let argmax: usize = s[0][4].parse().unwrap();
        assert_eq!(s[argmax][3], "1");
        let best = s.iter().map(|r| r[2].parse::<f64>().unwrap()).fold(f64::MIN, f64::max);
        assert_eq!(s[argmax][2].parse::<f64>().unwrap(), best);
    }
    assert!(t.iter().all(|r| r[0] != "1"));
}

#[test]
fn trace_scores_are_bounded_by_decider_count() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("steps.csv");
    let p = path.to_str().unwrap();
    stdout(&tiny("decode", &["--alpha", "0.6", "--trace", p]));
    let steps = rows(&std::fs::read_to_string(&path).unwrap());
    let scores = rows(&stdout(&tiny("trace", &["--alpha", "0.6"])));
    for st in steps.iter().filter(|r| !r[2].is_empty()) {
        let deciders: f64 = st[3].parse().unwrap();
        let mass: f64 = scores.iter().filter(|r| r[0] == st[0]).map(|r| r[2].parse::<f64>().unwrap()).sum();
        assert!(mass <= deciders + 1e-5, "step {}: {mass} > {deciders}", st[0]);
    }
}

#[test]
fn trace_of_baseline_is_a_usage_error() {
    assert_eq!(tiny("trace", &["--method", "baseline"]).status.code(), Some(2));
}

#[test]
fn bench_table() {
    let out = stdout(&tiny("bench", &["--repeat", "3", "--methods", "baseline,d3tom,d3tom-t", "--retain", "50,10"]));
    assert_eq!(
        out.lines().next().unwrap(),
        "method,retain_pct,time_ms_median,time_ms_min,time_rel"
    );
    let t = rows(&out);
    assert_eq!(t.len(), 5);
    assert_eq!((t[0][0].as_str(), t[0][1].as_str(), t[0][4].as_str()), ("baseline", "100", "100"));
    for r in &t {
        let median: f64 = r[2].parse().unwrap();
        let min: f64 = r[3].parse().unwrap();
        assert!(min > 0.0 && min <= median);
    }
}

#[test]
fn bench_usage_errors() {
    assert_eq!(tiny("bench", &["--repeat", "2"]).status.code(), Some(2));
    assert_eq!(tiny("bench", &["--methods", "fastv"]).status.code(), Some(2));
}

#[test]
fn output_file_option() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.csv");
    let o = d3tom(&["flops", "--methods", "baseline", "--retain", "50", "-o", path.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(o.stdout.is_empty());
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 2);
}

#[test]
fn help_and_version_exit_zero() {
    assert!(d3tom(&["--help"]).status.success());
    assert!(d3tom(&["--version"]).status.success());
    assert_eq!(d3tom(&[]).status.code(), Some(2));
}
