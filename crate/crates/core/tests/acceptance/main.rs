//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any criterion fails. Pass criterion numbers as
//! arguments to run a subset.

mod counts;
mod grad;
mod oracles;
mod pipeline;

use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn f1_anchors() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for (p, r, want) in [(0.9529, 0.9625, 0.9576), (0.9484, 0.9586, 0.9534)] {
        let got = fpc_core::metrics::f1_score(p, r);
        ok &= (got - want).abs() <= 5e-4;
        lines.push(format!("P={p} R={r} -> {got:.5} (want {want})"));
    }
    check(ok, lines.join("; "))
}

fn split_anchors() -> Outcome {
    use fpc_core::io::Record;
    use fpc_core::training::stratified_split;
    let table = [(711, 569, 142), (3092, 2474, 618), (1040, 832, 208), (1718, 1374, 344), (1626, 1301, 325), (4213, 3370, 843)];
    let labels: Vec<String> = (0..table.len()).map(|c| format!("c{c}")).collect();
    let mut records = Vec::new();
    for (c, &(n, _, _)) in table.iter().enumerate() {
        for i in 0..n {
            records.push(Record {
                image_path: format!("c{c}/{i}.png"),
                label: labels[c].clone(),
                patient_id: format!("p{}", i % 97),
            });
        }
    }
    let (train, test) = stratified_split(&records, &labels, 0.8, 0, false).map_err(|e| e.to_string())?;
    let mut ok = true;
    let mut got = Vec::new();
    for (c, &(n, tr, te)) in table.iter().enumerate() {
        let a = train.iter().filter(|r| r.label == labels[c]).count();
        let b = test.iter().filter(|r| r.label == labels[c]).count();
        ok &= (a, b) == (tr, te);
        got.push(format!("{n}->{a}/{b}"));
    }
    check(ok, got.join(" "))
}

fn gradient_suite() -> Outcome {
    let results = grad::suite().map_err(|e| e.to_string())?;
    let worst = results.iter().cloned().fold(("", 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    let failed: Vec<String> = results
        .iter()
        .filter(|(_, e)| !(*e < grad::TOL))
        .map(|(n, e)| format!("{n}: {e:.2e}"))
        .collect();
    let detail = format!(
        "{} checks x {} seeds, worst {:.2e} ({})",
        results.len(),
        grad::SEEDS,
        worst.1,
        worst.0
    );
    if failed.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; failing: {}", failed.join(", ")))
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("F1 arithmetic anchors", f1_anchors),
        ("stratified split anchors", split_anchors),
        ("parameter counts", counts::parameter_counts),
        ("gradient checks", gradient_suite),
        ("attention reductions", oracles::attention_reductions),
        ("metric oracles", oracles::metric_oracles),
        ("end-to-end synthetic run", pipeline::end_to_end),
        ("attention ablation", pipeline::ablation),
        ("Grad-CAM suite", pipeline::gradcam_suite),
        ("persistence", pipeline::persistence),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS {id:>2} {name} [{secs:.1}s]: {d}"),
            Err(d) => {
                failures += 1;
                println!("FAIL {id:>2} {name} [{secs:.1}s]: {d}");
            }
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
