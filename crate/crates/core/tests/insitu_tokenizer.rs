mod support;

use eo1_autograd::{Tape, Tensor};
use eo1_core::geo::{haversine_km, BBox, GeoPoint};
use eo1_core::insitu_tokenizer::{
    insitu_joint_loss, insitu_joint_loss_on_tape, setconv_weights, EncoderInput, InSituTokenizer, MetaQuery,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::insitu::*;

#[test]
fn point_attention_matches_formula_oracle() {
    let (s, pa, mut rng) = setup_pa(4, 1);
    for _ in 0..5 {
        let fa = rand_vec(&mut rng, 4);
        let fj: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut rng, 4)).collect();
        let rel: Vec<[f64; 2]> = (0..3).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let got = run_pa(&s, &pa, &fa, &fj, &rel);
        let want = pa_oracle(&s, &pa, &fa, &fj, &rel);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-9, "{g} vs {w}");
        }
    }
}

#[test]
fn point_attention_single_neighbour_is_value_plus_delta() {
    let (s, pa, mut rng) = setup_pa(4, 2);
    let fa = rand_vec(&mut rng, 4);
    let f1 = rand_vec(&mut rng, 4);
    let rel = [0.3, -0.2];
    let got = run_pa(&s, &pa, &fa, std::slice::from_ref(&f1), &[rel]);
    let al = lin(&s, &pa.alpha, &f1);
    let de = mlp(&s, &pa.theta, &rel);
    for c in 0..4 {
        assert!((got[c] - (al[c] + de[c])).abs() < 1e-12);
    }
}

#[test]
fn point_attention_is_order_invariant() {
    let (s, pa, mut rng) = setup_pa(6, 3);
    let fa = rand_vec(&mut rng, 6);
    let fj: Vec<Vec<f64>> = (0..5).map(|_| rand_vec(&mut rng, 6)).collect();
    let rel: Vec<[f64; 2]> = (0..5).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    let a = run_pa(&s, &pa, &fa, &fj, &rel);
    let order = [3, 0, 4, 2, 1];
    let fp: Vec<Vec<f64>> = order.iter().map(|&i| fj[i].clone()).collect();
    let rp: Vec<[f64; 2]> = order.iter().map(|&i| rel[i]).collect();
    let b = run_pa(&s, &pa, &fa, &fp, &rp);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-6);
    }
}

#[test]
fn point_attention_gradient_matches_finite_differences() {
    let (s, pa, mut rng) = setup_pa(4, 4);
    let d = 4;
    let fa = Tensor::new(&[2, d], rand_vec(&mut rng, 2 * d)).unwrap();
    let fj = Tensor::new(&[3, d], rand_vec(&mut rng, 3 * d)).unwrap();
    let idx = vec![vec![0, 1, 2], vec![2, 0, 1]];
    let rel = Tensor::new(&[6, 2], rand_vec(&mut rng, 12)).unwrap();
    let wts = Tensor::new(&[2, d], rand_vec(&mut rng, 2 * d)).unwrap();
    let f = |a: &Tensor, n: &Tensor| {
        let mut t = Tape::new();
        let av = t.input(a.clone());
        let nv = t.input(n.clone());
        let y = pa.forward(&mut t, &s, av, nv, &idx, &rel);
        let y = t.mul_const(y, wts.clone());
        let l = t.sum(y);
        let v = t.value(l).item();
        let g = t.backward(l);
        (v, g.wrt(av).unwrap().clone(), g.wrt(nv).unwrap().clone())
    };
    let (_, ga, gn) = f(&fa, &fj);
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for k in 0..fa.numel() {
        let (mut p, mut q) = (fa.clone(), fa.clone());
        p.data_mut()[k] += eps;
        q.data_mut()[k] -= eps;
        let fd = (f(&p, &fj).0 - f(&q, &fj).0) / (2.0 * eps);
        worst = worst.max(rel_err(fd, ga.data()[k]));
    }
    for k in 0..fj.numel() {
        let (mut p, mut q) = (fj.clone(), fj.clone());
        p.data_mut()[k] += eps;
        q.data_mut()[k] -= eps;
        let fd = (f(&fa, &p).0 - f(&fa, &q).0) / (2.0 * eps);
        worst = worst.max(rel_err(fd, gn.data()[k]));
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn encoder_output_aligns_with_satellite_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let st = station_set(&mut rng, 30, 3);
    let tok = InSituTokenizer::new(cfg(16, 4)).unwrap();
    let tf = tok.encode_stations(&st, &bbox(), &mut rng).unwrap();
    assert_eq!((tf.h, tf.w), (4, 4));
    assert_eq!(tf.dim, 8);
    assert!(tf.all_finite());
    assert!(tf.n_valid() > 0);
}

#[test]
fn empty_window_yields_all_invalid_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let st = station_set(&mut rng, 10, 3);
    let tok = InSituTokenizer::new(cfg(16, 4)).unwrap();
    let far = BBox::new(-90.0, -45.0, -45.0, 0.0).unwrap();
    let tf = tok.encode_stations(&st, &far, &mut rng).unwrap();
    assert_eq!(tf.n_valid(), 0);
    assert!(tf.all_finite());
}

#[test]
fn sampling_with_all_stations_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let st = station_set(&mut rng, 20, 3);
    let tok = InSituTokenizer::new(cfg(20, 4)).unwrap();
    let a = tok.encode_stations(&st, &bbox(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = tok.encode_stations(&st, &bbox(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn encoder_is_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..5 {
        let st = station_set(&mut rng, 25, 3);
        let tok = InSituTokenizer::new(cfg(25, 4)).unwrap();
        let mut order: Vec<usize> = (0..25).collect();
        for i in (1..25).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let a = tok.encode(&EncoderInput::all(&st, &bbox())).unwrap();
        let b = tok.encode(&EncoderInput::all(&st.select(&order), &bbox())).unwrap();
        assert_eq!(a.valid, b.valid);
        for (x, y) in a.tokens.iter().zip(&b.tokens) {
            assert!((x - y).abs() <= 1e-6);
        }
    }
}

#[test]
fn duplicating_every_station_changes_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let st = station_set(&mut rng, 6, 3);
    let dup = st.select(&(0..12).map(|i| i % 6).collect::<Vec<_>>());
    // every station is a neighbour of every anchor
    let a = InSituTokenizer::new(cfg(6, 12)).unwrap();
    let b = InSituTokenizer::new(cfg(12, 12)).unwrap();
    let ta = a.encode_stations(&st, &bbox(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let tb = b.encode_stations(&dup, &bbox(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    for (x, y) in ta.tokens.iter().zip(&tb.tokens) {
        assert!((x - y).abs() <= 1e-6);
    }
}

#[test]
fn setconv_weights_match_hand_computed_gaussians() {
    let grid = [GeoPoint::new(0.0, 0.0).unwrap(), GeoPoint::new(3.0, 0.0).unwrap(), GeoPoint::new(0.0, 4.0).unwrap()];
    let q = [MetaQuery { x: 1.0, y: 1.0, z: 0.0 }];
    let l = 300.0;
    let w = setconv_weights(&q, &grid, l).unwrap();
    let k: Vec<f64> = grid
        .iter()
        .map(|g| {
            let d = haversine_km(1.0, 1.0, g.lon, g.lat);
            (-d * d / (2.0 * l * l)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for i in 0..3 {
        assert!((w.data()[i] - k[i] / sum).abs() <= 1e-9);
    }
}

#[test]
fn setconv_weights_sum_to_one_and_fall_back() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let grid: Vec<GeoPoint> =
        (0..16).map(|_| GeoPoint::new(rng.random_range(0.0..45.0), rng.random_range(0.0..45.0)).unwrap()).collect();
    let qs: Vec<MetaQuery> = (0..50)
        .map(|_| MetaQuery { x: rng.random_range(-10.0..55.0), y: rng.random_range(-10.0..55.0), z: 0.0 })
        .collect();
    let w = setconv_weights(&qs, &grid, 500.0).unwrap();
    for row in w.data().chunks(16) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
    // far beyond the lengthscale every weight underflows: one-hot on the nearest node
    let far = [MetaQuery { x: 170.0, y: -60.0, z: 0.0 }];
    let w = setconv_weights(&far, &grid, 10.0).unwrap();
    let near = (0..16)
        .min_by(|&a, &b| {
            haversine_km(170.0, -60.0, grid[a].lon, grid[a].lat).total_cmp(&haversine_km(
                170.0,
                -60.0,
                grid[b].lon,
                grid[b].lat,
            ))
        })
        .unwrap();
    for (i, v) in w.data().iter().enumerate() {
        assert_eq!(*v, if i == near { 1.0 } else { 0.0 });
    }
    // query on a node with a tiny lengthscale picks that node
    let on = [MetaQuery { x: grid[3].lon, y: grid[3].lat, z: 0.0 }];
    let w = setconv_weights(&on, &grid, 1e-3).unwrap();
    assert_eq!(w.data()[3], 1.0);
}

#[test]
fn far_queries_approach_the_nearest_node() {
    let grid = [GeoPoint::new(0.0, 0.0).unwrap(), GeoPoint::new(5.0, 0.0).unwrap()];
    let mut prev = 0.0;
    for lon in [10.0, 20.0, 40.0, 80.0] {
        let w = setconv_weights(&[MetaQuery { x: lon, y: 0.0, z: 0.0 }], &grid, 400.0).unwrap();
        assert!(w.data()[1] >= prev);
        prev = w.data()[1];
    }
    assert!(prev > 1.0 - 1e-6);
}

fn readout(
    tok: &InSituTokenizer,
    feats: &Tensor,
    grid: &[GeoPoint],
    qs: &[MetaQuery],
    z: &Tensor,
) -> (Tape, eo1_autograd::Var, eo1_autograd::Var, eo1_autograd::Var) {
    let mut t = Tape::new();
    let f = t.input(feats.clone());
    let zv = t.input(z.clone());
    let y = tok.readout(&mut t, f, grid, qs, zv).unwrap();
    (t, y, f, zv)
}

#[test]
fn uniform_grid_features_give_query_independent_features() {
    let tok = InSituTokenizer::new(cfg(8, 4)).unwrap();
    let grid: Vec<GeoPoint> = (0..4).map(|i| GeoPoint::new(10.0 * i as f64, 5.0).unwrap()).collect();
    let row: Vec<f64> = (0..16).map(|i| 0.1 * i as f64 - 0.5).collect();
    let feats = Tensor::new(&[4, 16], row.repeat(4)).unwrap();
    let qs: Vec<MetaQuery> = [2.0, 13.0, 29.0].iter().map(|&x| MetaQuery { x, y: 3.0, z: 500.0 }).collect();
    let (t, y, _, _) = readout(&tok, &feats, &grid, &qs, &Tensor::full(&[3, 1], 500.0));
    let out = t.value(y).data();
    for q in 1..3 {
        for c in 0..3 {
            assert!((out[q * 3 + c] - out[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn decode_gradient_matches_finite_differences() {
    let tok = InSituTokenizer::new(cfg(8, 4)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let grid: Vec<GeoPoint> = (0..4).map(|i| GeoPoint::new(3.0 * i as f64, 2.0 * (i % 2) as f64).unwrap()).collect();
    let feats = Tensor::new(&[4, 16], rand_vec(&mut rng, 64)).unwrap();
    let qs: Vec<MetaQuery> =
        (0..3).map(|i| MetaQuery { x: 1.0 + 2.5 * i as f64, y: 1.0, z: 300.0 * i as f64 }).collect();
    let z = Tensor::new(&[3, 1], qs.iter().map(|q| q.z).collect()).unwrap();
    let wts = Tensor::new(&[3, 3], rand_vec(&mut rng, 9)).unwrap();
    let f = |fe: &Tensor, z: &Tensor| {
        let (mut t, y, fv, zv) = readout(&tok, fe, &grid, &qs, z);
        let y = t.mul_const(y, wts.clone());
        let l = t.sum(y);
        let g = t.backward(l);
        (t.value(l).item(), g.wrt(fv).unwrap().clone(), g.wrt(zv).unwrap().clone())
    };
    let (_, gf, gz) = f(&feats, &z);
    let mut worst: f64 = 0.0;
    let eps = 1e-6;
    for k in 0..feats.numel() {
        let (mut p, mut q) = (feats.clone(), feats.clone());
        p.data_mut()[k] += eps;
        q.data_mut()[k] -= eps;
        worst = worst.max(rel_err((f(&p, &z).0 - f(&q, &z).0) / (2.0 * eps), gf.data()[k]));
    }
    for k in 0..3 {
        let (mut p, mut q) = (z.clone(), z.clone());
        p.data_mut()[k] += 1e-3;
        q.data_mut()[k] -= 1e-3;
        worst = worst.max(rel_err((f(&feats, &p).0 - f(&feats, &q).0) / 2e-3, gz.data()[k]));
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn altitude_conditioning_switch() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let st = station_set(&mut rng, 20, 3);
    let mut tok = InSituTokenizer::new(cfg(20, 4)).unwrap();
    let tf = tok.encode(&EncoderInput::all(&st, &bbox())).unwrap();
    let qs = [MetaQuery { x: 20.0, y: 20.0, z: 0.0 }, MetaQuery { x: 20.0, y: 20.0, z: 1500.0 }];
    let y = tok.decode_at(&tf, &qs).unwrap();
    assert!(y[0].iter().zip(&y[1]).any(|(a, b)| a != b));
    tok.zero_conditioning();
    let y = tok.decode_at(&tf, &qs).unwrap();
    assert_eq!(y[0], y[1]);
}

#[test]
fn joint_loss_examples() {
    let y = [1.0, 2.0, 3.0, 4.0];
    assert_eq!(insitu_joint_loss(&y, &y, &[true; 4]).unwrap(), 0.0);
    assert_eq!(insitu_joint_loss(&[1.0], &[1.5], &[true]).unwrap(), 0.5);
    let yh = [1.5, 0.0, 2.0, 10.0];
    let pres = [true, false, true, true];
    let want = (0.5 + 1.0 + 6.0) / 3.0;
    assert!((insitu_joint_loss(&y, &yh, &pres).unwrap() - want).abs() < 1e-15);
    let mut t = Tape::new();
    let v = t.constant(Tensor::new(&[2, 2], yh.to_vec()).unwrap());
    let l = insitu_joint_loss_on_tape(&mut t, &y, v, &pres);
    assert!((t.value(l).item() - want).abs() < 1e-15);
    assert!(insitu_joint_loss(&y, &yh[..3], &pres[..3]).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let st = station_set(&mut rng, 10, 3);
    let tok = InSituTokenizer::new(cfg(10, 4)).unwrap();
    let ck = tok.checkpoint(0).unwrap();
    let back = InSituTokenizer::from_checkpoint(
        &eo1_core::checkpoint::Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap(),
    )
    .unwrap();
    let a = tok.encode(&EncoderInput::all(&st, &bbox())).unwrap();
    let b = back.encode(&EncoderInput::all(&st, &bbox())).unwrap();
    for (x, y) in a.tokens.iter().zip(&b.tokens) {
        assert!((x - y).abs() < 1e-4);
    }
}
