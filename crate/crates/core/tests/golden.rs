//! Golden outputs. Regenerate with `UPDATE_GOLDEN=1 cargo test --test golden`.

use std::path::PathBuf;

use anoncount::counting::infer_anonymities;
use anoncount::engine::{run, GraphKind, RunConfig, SchedulerSpec, Trace};
use anoncount::harness::{run_experiment, write_csv};
use anoncount::history_tree::{build_ground_truth, extract_view, InputLabel};

fn check(name: &str, actual: &str) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("testdata").join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(actual, expected, "{name} differs from the golden file");
}

#[test]
fn star_inference_dump() {
    let n = 3;
    let trace = Trace::new(n, 1, vec![GraphKind::Star.build(n); 4]);
    let inputs = [InputLabel::Leader, InputLabel::Value(0), InputLabel::Value(0)];
    let gt = build_ground_truth(&trace, &inputs, 4).unwrap();
    let view = extract_view(&gt.tree, gt.node_of(4, 0)).unwrap();
    check("star3_inference.golden", &infer_anonymities(&view).unwrap().dump(&view.tree));
}

#[test]
fn leader_vht_after_path_run() {
    let report = run(&RunConfig::new(4, SchedulerSpec::Static(GraphKind::Path))).unwrap();
    check("path4_leader_vht.golden", &report.states[0].vht.dump());
}

#[test]
fn recorded_trace() {
    let config = RunConfig::new(3, SchedulerSpec::PathThenStar { switch: 6 }).record_trace(true).budget(12);
    let report = run(&config).unwrap();
    let text = report.trace.unwrap().to_text();
    assert_eq!(Trace::from_text(&text).unwrap().to_text(), text);
    check("path_then_star3.trace", &text);
}

#[test]
fn sweep_rows() {
    let mut rows = Vec::new();
    for n in 1..=4 {
        for seed in 0..2 {
            let config = RunConfig::new(n, SchedulerSpec::RandomConnected).seed(seed);
            rows.push(run_experiment(&config, false).unwrap().row);
        }
    }
    let mut out = Vec::new();
    write_csv(&rows, &mut out).unwrap();
    check("random_connected.csv", &String::from_utf8(out).unwrap());
}
