use eo1_core::synth::truth::*;

fn small(seed: u64) -> TruthParams {
    TruthParams { seed, steps: 3, rows: 16, cols: 32, ..TruthParams::default() }
}

#[test]
fn deterministic_in_seed() {
    let a = gen_truth(small(5)).unwrap();
    let b = gen_truth(small(5)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, gen_truth(small(6)).unwrap());
}

#[test]
fn zero_speed_is_static() {
    let f = gen_truth(TruthParams { speeds: vec![0.0; 3], ..small(1) }).unwrap();
    assert_eq!(f.step_slice(0), f.step_slice(2));
}

#[test]
fn advection_shifts_whole_columns() {
    // dlon = 11.25 deg on a 32-column lattice; v*dt = 2 columns
    let p = TruthParams { n_bumps: 1, speeds: vec![22.5 / 6.0; 3], ..small(9) };
    let f = gen_truth(p).unwrap();
    for c in 0..3 {
        for i in 0..16 {
            for j in 0..32 {
                let prev = f.at(0, c, i, (j + 32 - 2) % 32);
                assert!((f.at(1, c, i, j) - prev).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn interp_exact_on_nodes() {
    let f = gen_truth(small(2)).unwrap();
    let (lon, lat) = f.grid.center(5, 7);
    assert_eq!(f.interp(1, lon, lat), f.vector_at(1, 5, 7));
}

#[test]
fn rejects_bad_params() {
    assert!(gen_truth(TruthParams { steps: 0, ..small(0) }).is_err());
    assert!(gen_truth(TruthParams { rows: 8, ..small(0) }).is_err());
}
