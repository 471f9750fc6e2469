//! The self-check battery must pass on a fresh build, with one row per
//! registered check and stable results across runs.

use std::collections::HashSet;

use booster_core::harness::run_unit_properties;
use booster_core::verify::GRADCHECK_NAMES;

#[test]
fn battery_passes_and_registers_every_check_once() {
    let rows = run_unit_properties();
    let expected = GRADCHECK_NAMES.len() + 3 /* attack */ + 2 /* injection */ + 4 /* parsers */;
    assert_eq!(rows.len(), expected);

    let names: HashSet<&str> = rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names.len(), rows.len(), "duplicate check names");

    for row in &rows {
        assert!(
            row.pass,
            "{} failed: measured {} vs {}",
            row.name, row.measured, row.threshold
        );
    }
}

#[test]
fn battery_is_deterministic() {
    let a = run_unit_properties();
    let b = run_unit_properties();
    for (ra, rb) in a.iter().zip(&b) {
        assert_eq!(ra.name, rb.name);
        assert_eq!(ra.pass, rb.pass);
        assert_eq!(ra.measured.to_bits(), rb.measured.to_bits(), "{} moved", ra.name);
    }
}
