//! Release gate: the full end-to-end criteria battery.
//!
//! Trains the complete study fleet (hours on a cold cache), so trained runs
//! persist under target/tmp and are reused across invocations. Run with
//! `--nocapture` to watch the per-criterion lines.

use std::collections::BTreeMap;
use std::path::Path;

use booster_core::data::{self, SynthConfig};
use booster_core::harness::{self, Profile};

/// Criterion banner per numeric row prefix.
const CRITERIA: [(u32, &str); 10] = [
    (1, "gradients match finite differences"),
    (2, "attacks stay in budget and PGD beats FGSM"),
    (3, "frame injection never alters image interiors"),
    (4, "width-0 trainer reproduces plain adversarial training"),
    (5, "booster lifts robust accuracy without a natural-accuracy cost"),
    (6, "booster shrinks interior input gradients"),
    (7, "width 4 does not regress against width 1"),
    (8, "tiny subsets do not beat large ones"),
    (9, "loss surface is flatter around boosted inputs"),
    (10, "reruns are bit-identical and resume is bit-exact"),
];

fn prefix(name: &str) -> u32 {
    name.chars()
        .take_while(char::is_ascii_digit)
        .collect::<String>()
        .parse()
        .unwrap()
}

#[test]
fn acceptance() {
    let scratch = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&scratch).unwrap();
    let data_dir = scratch.join("data");
    if !data_dir.join("train-images-idx3-ubyte").exists() {
        data::write_synth_corpus(&data_dir, 6000, 1000, 0, &SynthConfig::default()).unwrap();
    }

    let rows = harness::run_acceptance(&data_dir, &scratch, Profile::Full).unwrap();
    harness::write_report(&scratch.join("report.csv"), &rows).unwrap();

    let mut groups: BTreeMap<u32, Vec<&harness::CheckReport>> = BTreeMap::new();
    for r in &rows {
        groups.entry(prefix(&r.name)).or_default().push(r);
    }

    let mut failed = Vec::new();
    for (num, label) in CRITERIA {
        let members = groups
            .get(&num)
            .unwrap_or_else(|| panic!("no rows for criterion {num}"));
        let ok = members.iter().all(|r| r.pass);
        println!("criterion {num:>2} [{}] {label}", if ok { "PASS" } else { "FAIL" });
        for r in members {
            println!(
                "    {:<24} measured {:.6} vs {:.6} ({:.1}s)",
                r.name,
                r.measured,
                r.threshold,
                r.runtime.as_secs_f64()
            );
            if !r.pass {
                failed.push(r.name.clone());
            }
        }
    }
    assert!(failed.is_empty(), "failed checks: {}", failed.join(", "));
}
