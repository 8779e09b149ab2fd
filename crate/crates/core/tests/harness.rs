use eo1_core::error::Error;
use eo1_core::harness::metrics::{
    elevation_regression, equal_bins, percentile, smooth, station_mae, station_rmse, threshold_skill,
};
use eo1_core::harness::plots::{plot_scaling, plot_trace};
use eo1_core::harness::scaling::fit_power_law;
use eo1_core::harness::RunConfig;
use proptest::prelude::*;

#[test]
fn station_mae_examples() {
    let mae = station_mae(&[1.0, 2.0], &[1.0, 2.0], &[true, true], 1).unwrap();
    assert_eq!(mae, vec![Some(0.0)]);
    let mae = station_mae(&[1.0, -3.0], &[0.0, 0.0], &[true, true], 1).unwrap();
    assert_eq!(mae, vec![Some(2.0)]);
}

#[test]
fn station_metrics_with_missing_entries_match_hand_sums() {
    // three stations, two variables; station-major layout
    let pred = [1.0, 5.0, 2.0, 7.0, 4.0, -1.0];
    let truth = [0.0, 4.0, 4.0, 0.0, 3.5, 1.0];
    let present = [true, true, true, false, false, true];
    let mae = station_mae(&pred, &truth, &present, 2).unwrap();
    assert_eq!(mae, vec![Some((1.0 + 2.0) / 2.0), Some((1.0 + 2.0) / 2.0)]);
    let rmse = station_rmse(&pred, &truth, &present, 2).unwrap();
    assert_eq!(rmse[0], Some(((1.0 + 4.0) / 2.0_f64).sqrt()));
    assert_eq!(rmse[1], Some(((1.0 + 4.0) / 2.0_f64).sqrt()));
    let none = station_mae(&pred, &truth, &[false; 6], 2).unwrap();
    assert_eq!(none, vec![None, None]);
    assert!(station_mae(&pred, &truth, &present, 4).is_err());
}

#[test]
fn elevation_regression_examples() {
    let bins = [(-500.0, 500.0), (500.0, 1500.0)];
    let fit = elevation_regression(&[1.0, 1.3], &[0.0, 1000.0], &bins).unwrap();
    assert!((fit.slope - 0.0003).abs() < 1e-15, "slope {}", fit.slope);
    assert!((fit.intercept - 1.0).abs() < 1e-12);

    let flat = elevation_regression(
        &[0.7; 6],
        &[10.0, 20.0, 600.0, 700.0, 1200.0, 1400.0],
        &equal_bins(0.0, 1500.0, 3).unwrap(),
    )
    .unwrap();
    assert_eq!(flat.slope, 0.0);

    let single = elevation_regression(&[1.0, 2.0], &[5.0, 6.0], &[(0.0, 10.0)]);
    assert!(matches!(single, Err(Error::InvalidInput(_))));
}

#[test]
fn elevation_bins_are_half_open_with_closed_last_bin() {
    let bins = [(0.0, 1.0), (1.0, 2.0)];
    let fit = elevation_regression(&[1.0, 3.0, 5.0], &[0.5, 1.0, 2.0], &bins).unwrap();
    assert_eq!(fit.bins[0].count, 1);
    assert_eq!(fit.bins[1].count, 2);
    assert_eq!(fit.bins[1].mae, Some(4.0));
    assert!(elevation_regression(&[1.0], &[0.5], &[(0.0, 1.0), (0.5, 2.0)]).is_err());
}

#[test]
fn threshold_skill_four_cell_contingency() {
    // 2x2 field, window 1 (no smoothing), p50 of [0,1,3,4] = 2
    let truth = [4.0, 3.0, 1.0, 0.0];
    let pred = [4.0, 1.0, 3.0, 0.0];
    let s = threshold_skill(&pred, &truth, 2, 2, 50.0, 1).unwrap();
    assert_eq!(s.threshold, 2.0);
    assert_eq!((s.table.tp, s.table.fn_, s.table.fp, s.table.tn), (1, 1, 1, 1));
    assert_eq!(s.miss, Some(0.5));
    assert_eq!(s.false_alarm, Some(0.5));
}

#[test]
fn threshold_skill_identity_and_missed_maximum() {
    let truth = [0.1, 0.9, 0.3, 0.4, 0.2, 0.7, 0.6, 0.5, 0.8];
    let s = threshold_skill(&truth, &truth, 3, 3, 80.0, 3).unwrap();
    assert_eq!(s.miss, Some(0.0));
    assert_eq!(s.false_alarm, Some(0.0));

    let truth = [0.0, 0.0, 9.0, 0.0];
    let pred = [0.0, 0.0, 0.0, 0.0];
    let s = threshold_skill(&pred, &truth, 2, 2, 100.0, 1).unwrap();
    assert_eq!(s.miss, Some(1.0));
    assert_eq!(s.false_alarm, Some(0.0));
}

#[test]
fn smoothing_window_must_be_odd() {
    assert!(smooth(&[1.0; 4], 2, 2, 2).is_err());
    assert!(smooth(&[1.0; 4], 2, 2, 0).is_err());
    let s = smooth(&[0.0, 3.0, 6.0, 9.0], 2, 2, 3).unwrap();
    assert_eq!(s, vec![4.5; 4]);
}

#[test]
fn power_law_recovers_data_scaling_coefficients() {
    let pts: Vec<(f64, f64)> = [5e4, 1e5, 1.5e5, 2e5].iter().map(|&d: &f64| (d, 6.5284 * d.powf(-0.1441))).collect();
    let fit = fit_power_law(&pts).unwrap();
    assert!((fit.a - 6.5284).abs() < 1e-6, "a {}", fit.a);
    assert!((fit.b + 0.1441).abs() < 1e-6, "b {}", fit.b);
    assert!((fit.r2 - 1.0).abs() < 1e-9);
}

#[test]
fn power_law_recovers_model_scaling_exponent() {
    let pts: Vec<(f64, f64)> = [5e7, 2e8, 6e8, 1.3e9].iter().map(|&n: &f64| (n, 3.3370 * n.powf(-0.0511))).collect();
    let fit = fit_power_law(&pts).unwrap();
    assert!((fit.a - 3.3370).abs() < 1e-6, "a {}", fit.a);
    assert!((fit.b + 0.0511).abs() < 1e-6, "b {}", fit.b);
}

#[test]
fn power_law_edge_cases() {
    let two = fit_power_law(&[(10.0, 2.0), (100.0, 1.0)]).unwrap();
    assert_eq!(two.r2, 1.0);
    assert!((two.predict(10.0) - 2.0).abs() < 1e-12);
    assert!((two.predict(100.0) - 1.0).abs() < 1e-12);
    assert!(fit_power_law(&[(10.0, 2.0)]).is_err());
    assert!(fit_power_law(&[(10.0, 2.0), (10.0, 3.0)]).is_err());
    assert!(fit_power_law(&[(10.0, 2.0), (0.0, 3.0)]).is_err());
}

#[test]
fn config_parses_overrides_and_rejects_unknown_keys() {
    let cfg = RunConfig::parse(
        "# toy run\nseed = 3\nsynth.steps = 12  # short\nmmae.lr = 5e-4\nmmae.clip_norm = none\neval.percentiles = 75, 95\nscale.widths = 4,8\nscale.repeats = 2\nscale.lr = 3e-3\n",
    )
    .unwrap();
    assert_eq!(cfg.seed, 3);
    assert_eq!(cfg.synth.steps, 12);
    assert_eq!(cfg.mmae.train.lr, 5e-4);
    assert_eq!(cfg.mmae.train.clip_norm, None);
    assert_eq!(cfg.eval.percentiles, vec![75.0, 95.0]);
    assert_eq!(cfg.scale.widths, vec![4, 8]);
    assert_eq!((cfg.scale.repeats, cfg.scale.lr), (2, 3e-3));

    assert!(RunConfig::parse("mmae.colour = red").is_err());
    assert!(RunConfig::parse("seed 3").is_err());
    assert!(RunConfig::parse("synth.steps = 7").is_err());
    assert!(RunConfig::parse("eval.smooth_window = 4").is_err());
    assert!(RunConfig::parse("tok.lr = fast").is_err());
    assert!(RunConfig::parse("scale.repeats = 0").is_err());
}

#[test]
fn stage_seeds_differ_by_tag_and_follow_the_root_seed() {
    let a = RunConfig::default();
    let b = RunConfig { seed: 1, ..RunConfig::default() };
    assert_ne!(a.stage_seed("mmae"), a.stage_seed("forecast"));
    assert_ne!(a.stage_seed("mmae"), b.stage_seed("mmae"));
    assert_eq!(a.stage_seed("mmae"), RunConfig::default().stage_seed("mmae"));
}

#[test]
fn trace_plot_csv_has_one_row_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let trace: Vec<Vec<f64>> = (0..25).map(|i| vec![1.0 / (i + 1) as f64, 0.5]).collect();
    let files = plot_trace(dir.path(), "loss", &["total", "aux"], &trace).unwrap();
    assert_eq!(files.len(), 2);
    assert!(files.iter().all(|f| f.exists()));
    let mut r = csv::Reader::from_path(dir.path().join("loss.csv")).unwrap();
    assert_eq!(r.headers().unwrap().iter().collect::<Vec<_>>(), ["step", "total", "aux"]);
    assert_eq!(r.records().count(), 25);
}

#[test]
fn scaling_plot_csv_carries_size_loss_and_fit() {
    let dir = tempfile::tempdir().unwrap();
    let fit = fit_power_law(&[(16.0, 1.0), (32.0, 0.8), (64.0, 0.7)]).unwrap();
    plot_scaling(dir.path(), "data", &fit, "D").unwrap();
    let mut r = csv::Reader::from_path(dir.path().join("data.csv")).unwrap();
    assert_eq!(r.headers().unwrap().iter().collect::<Vec<_>>(), ["size", "loss", "fitted"]);
    for (rec, p) in r.records().zip(&fit.points) {
        let rec = rec.unwrap();
        let v: Vec<f64> = rec.iter().map(|x| x.parse().unwrap()).collect();
        assert_eq!((v[0], v[1]), *p);
        assert!((v[2] - fit.predict(p.0)).abs() < 1e-12);
    }
}

#[test]
fn empty_plot_input_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("plots");
    assert!(plot_trace(&out, "loss", &["total"], &[]).is_err());
    assert!(!out.exists() || std::fs::read_dir(&out).unwrap().next().is_none());
}

fn brute_percentile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (s.len() - 1) as f64;
    let i = pos.floor() as usize;
    if i + 1 >= s.len() {
        s[i]
    } else {
        s[i] * (1.0 - (pos - i as f64)) + s[i + 1] * (pos - i as f64)
    }
}

proptest! {
    #[test]
    fn threshold_skill_matches_scalar_oracle(
        (rows, cols, truth, pred) in (1usize..=4, 1usize..=4).prop_flat_map(|(r, c)| (
            Just(r), Just(c),
            prop::collection::vec(0i32..6, r * c),
            prop::collection::vec(0i32..6, r * c),
        )),
        pct in 0.0f64..=100.0,
        win in prop::sample::select(vec![1usize, 3, 5]),
    ) {
        let truth: Vec<f64> = truth.into_iter().map(f64::from).collect();
        let pred: Vec<f64> = pred.into_iter().map(f64::from).collect();
        let s = threshold_skill(&pred, &truth, rows, cols, pct, win).unwrap();
        let sm = |f: &[f64]| -> Vec<f64> {
            let r = (win / 2) as i64;
            let mut out = Vec::new();
            for i in 0..rows as i64 {
                for j in 0..cols as i64 {
                    let mut vals = Vec::new();
                    for a in (i - r).max(0)..=(i + r).min(rows as i64 - 1) {
                        for b in (j - r).max(0)..=(j + r).min(cols as i64 - 1) {
                            vals.push(f[(a * cols as i64 + b) as usize]);
                        }
                    }
                    out.push(vals.iter().sum::<f64>() / vals.len() as f64);
                }
            }
            out
        };
        let (ps, ts) = (sm(&pred), sm(&truth));
        let thr = brute_percentile(&ts, pct);
        prop_assert!((s.threshold - thr).abs() < 1e-12);
        let (mut tp, mut fn_, mut fp, mut tn) = (0, 0, 0, 0);
        for k in 0..ps.len() {
            match (ps[k] >= s.threshold, ts[k] >= s.threshold) {
                (true, true) => tp += 1,
                (false, true) => fn_ += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
            }
        }
        prop_assert_eq!((s.table.tp, s.table.fn_, s.table.fp, s.table.tn), (tp, fn_, fp, tn));
        for r in [s.miss, s.false_alarm].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn percentile_lies_within_the_data(v in prop::collection::vec(-1e3f64..1e3, 1..16), q in 0.0f64..=100.0) {
        let p = percentile(&v, q).unwrap();
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(p >= lo - 1e-9 && p <= hi + 1e-9);
    }

    #[test]
    fn station_mae_matches_scalar_oracle(
        data in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, any::<bool>()), 1..16),
    ) {
        let pred: Vec<f64> = data.iter().map(|d| d.0).collect();
        let truth: Vec<f64> = data.iter().map(|d| d.1).collect();
        let present: Vec<bool> = data.iter().map(|d| d.2).collect();
        let mae = station_mae(&pred, &truth, &present, 1).unwrap();
        let (mut s, mut n) = (0.0, 0);
        for d in &data {
            if d.2 {
                s += (d.0 - d.1).abs();
                n += 1;
            }
        }
        prop_assert_eq!(mae[0], (n > 0).then(|| s / n as f64));
    }

    #[test]
    fn power_law_fit_is_exact_on_noiseless_data(
        a in 0.1f64..20.0,
        b in -1.0f64..-0.01,
        sizes in prop::collection::btree_set(1u32..100_000, 2..6),
    ) {
        let pts: Vec<(f64, f64)> = sizes.iter().map(|&s| (s as f64, a * (s as f64).powf(b))).collect();
        let fit = fit_power_law(&pts).unwrap();
        prop_assert!((fit.a - a).abs() <= 1e-9 * a.max(1.0));
        prop_assert!((fit.b - b).abs() <= 1e-9);
        prop_assert!((fit.r2 - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn elevation_bins_never_overlap(lo in -100.0f64..100.0, span in 1.0f64..5000.0, n in 1usize..10) {
        let bins = equal_bins(lo, lo + span, n).unwrap();
        prop_assert_eq!(bins.len(), n);
        for w in bins.windows(2) {
            prop_assert!(w[0].1 <= w[1].0);
        }
        prop_assert_eq!(bins[n - 1].1, lo + span);
    }
}
