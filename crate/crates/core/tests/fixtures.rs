//! Pins the bundled campaign data so an accidental edit to a table is caught.

use seqoed::io;

/// Size and integer column sums (l·1e6, l'·1e4, P'·10, v·1e4, T·100) per stage.
const GOLDEN: [(&str, usize, i64, i64, i64, i64, i64); 9] = [
    ("init", 6, 3112500, 37679, 11998316, 39200, 232159),
    ("fed0", 5, 2500000, 31253, 9998816, 32470, 193345),
    ("fed1", 9, 4500000, 49389, 17997532, 52349, 348988),
    ("fed2", 15, 7500000, 75167, 29995964, 81402, 581697),
    ("fed3", 27, 13500000, 132451, 53992828, 144034, 1047268),
    ("oed1", 9, 4445833, 49808, 18997848, 53461, 349843),
    ("oed2", 12, 5890277, 64189, 21997548, 68633, 460450),
    ("oed3", 15, 6890277, 75040, 28997448, 81488, 578272),
    ("tot", 36, 17277777, 169812, 70991960, 186322, 1393381),
];

fn column_sum(values: impl Iterator<Item = f64>, scale: f64) -> i64 {
    values.map(|x| (x * scale).round() as i64).sum()
}

#[test]
fn stage_tables_match_their_checksums() {
    for (id, n, l, la, pa, v, t) in GOLDEN {
        let rows = io::fixture(id).unwrap();
        assert_eq!(rows.len(), n, "{id}");
        assert_eq!(column_sum(rows.iter().map(|r| r.l_planned), 1e6), l, "{id} l");
        assert_eq!(column_sum(rows.iter().map(|r| r.l_actual), 1e4), la, "{id} l'");
        assert_eq!(column_sum(rows.iter().map(|r| r.p_actual), 10.0), pa, "{id} P'");
        assert_eq!(column_sum(rows.iter().map(|r| r.v), 1e4), v, "{id} v");
        assert_eq!(column_sum(rows.iter().map(|r| r.t), 100.0), t, "{id} T");
        assert!(rows.iter().all(|r| r.sigma_v == 0.0015 && r.sigma_t == 0.03), "{id}");
    }
}

#[test]
fn planned_pressures_sit_on_the_three_levels() {
    for r in io::fixture("tot").unwrap() {
        assert!([1e5, 2e5, 3e5].contains(&r.p_planned), "{}", r.p_planned);
    }
}

#[test]
fn parameter_fixtures_are_exact() {
    let theta = io::theta_tot_fixture().to_dvector();
    assert_eq!(theta.as_slice(), &[9.396525, -10.305843, -786.446701, 1510.352034, 0.01]);
    let json: serde_json::Value = serde_json::from_str(io::antoine_fixture_json()).unwrap();
    let coeffs: Vec<(f64, f64, f64)> = json["components"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| (c["A"].as_f64().unwrap(), c["B"].as_f64().unwrap(), c["C"].as_f64().unwrap()))
        .collect();
    assert_eq!(coeffs, vec![(4.65413, 1292.869, -91.992), (3.84871, 1088.392, -90.571)]);
}
