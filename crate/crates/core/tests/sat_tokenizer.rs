mod support;

use eo1_autograd::{Tape, Tensor};
use eo1_core::geo::BinaryMask;
use eo1_core::sat_tokenizer::{
    attention_mask, kl_divergence, reconstruction_mask, selection_mask, train_sat_tokenizer, vae_loss,
    vae_loss_on_tape, SatSample, SatTokenizer, SatTokenizerConfig,
};
use eo1_core::train::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::sat::*;

#[test]
fn token_lattice_shape_law() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (c, h, w, p) in [(1, 8, 8, 2), (2, 16, 8, 4), (3, 12, 6, 3), (1, 4, 4, 1)] {
        let tok = SatTokenizer::new(small_cfg(c, h, w, p)).unwrap();
        let f = random_frame(&mut rng, c, h, w, 0.8);
        let tf = tok.encode(&f).unwrap();
        assert_eq!(tf.shape(), (4 * c, h / p, w / p));
        assert_eq!(tf.channel_major().len(), 4 * c * (h / p) * (w / p));
        assert!(tf.all_finite());
        let rec = tok.decode(&tf).unwrap();
        assert_eq!(rec.shape(), &[c, h, w]);
    }
}

#[test]
fn bad_dims_are_rejected() {
    assert!(SatTokenizer::new(small_cfg(2, 10, 8, 4)).is_err());
    let tok = SatTokenizer::new(small_cfg(2, 8, 8, 4)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    assert!(tok.encode(&random_frame(&mut rng, 2, 8, 12, 0.5)).is_err());
    assert!(tok.encode(&random_frame(&mut rng, 3, 8, 8, 0.5)).is_err());
}

#[test]
fn empty_mask_selects_nothing() {
    let tok = SatTokenizer::new(small_cfg(2, 8, 8, 2)).unwrap();
    let f = frame(2, 8, 8, vec![0.0; 128], BinaryMask::zeros(8, 8));
    let tf = tok.encode(&f).unwrap();
    assert_eq!(tf.n_valid(), 0);
    assert!(tf.all_finite());
}

#[test]
fn selection_matches_brute_force_erosion() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..50 {
        let (h, w, p) = (4 * rng.random_range(1..5), 4 * rng.random_range(1..5), [1, 2, 4][trial % 3]);
        let m = BinaryMask::from_fn(h, w, |_, _| rng.random_bool(0.7));
        let r = rng.random_range(0..3i64);
        let sel = selection_mask(&m, p, 0.5, r).unwrap();
        let (th, tw) = (h / p, w / p);
        // token fraction then binarize then erode, all by definition
        let attn: Vec<bool> = (0..th * tw)
            .map(|k| {
                let (ti, tj) = (k / tw, k % tw);
                let mut ones = 0;
                for a in 0..p {
                    for b in 0..p {
                        ones += m.get(ti * p + a, tj * p + b) as usize;
                    }
                }
                ones as f64 / (p * p) as f64 >= 0.5
            })
            .collect();
        for i in 0..th as i64 {
            for j in 0..tw as i64 {
                let mut keep = true;
                for di in -r..=r {
                    for dj in -r..=r {
                        let (a, b) = (i + di, j + dj);
                        let inside = a >= 0 && b >= 0 && a < th as i64 && b < tw as i64;
                        if !inside || !attn[(a * tw as i64 + b) as usize] {
                            keep = false;
                        }
                    }
                }
                assert_eq!(sel.get(i as usize, j as usize), keep);
            }
        }
        assert!(sel.is_subset_of(&attention_mask(&m, p, 0.5).unwrap()));
    }
}

#[test]
fn vae_loss_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let (c, h, w) = (rng.random_range(1..3), rng.random_range(1..5), rng.random_range(1..5));
        let ntok = rng.random_range(1..5);
        let d = rng.random_range(1..4);
        let x = rand_tensor(&mut rng, &[c, h, w], 2.0);
        let xh = rand_tensor(&mut rng, &[c, h, w], 2.0);
        let mu = rand_tensor(&mut rng, &[ntok, d], 1.5);
        let lv = rand_tensor(&mut rng, &[ntok, d], 1.5);
        let m = BinaryMask::from_fn(h, w, |_, _| rng.random_bool(0.6));
        let beta = rng.random_range(0.0..2.0);
        let got = vae_loss(&x, &xh, &m, &mu, &lv, beta).unwrap();
        let want = vae_loss_oracle(x.data(), xh.data(), m.data(), c, mu.data(), lv.data(), ntok, beta);
        assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "{got} vs {want}");
    }
}

#[test]
fn vae_loss_closed_form_examples() {
    let x = Tensor::new(&[1, 2, 2], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
    let m = BinaryMask::ones(2, 2);
    let zero = Tensor::zeros(&[1, 1]);
    assert_eq!(vae_loss(&x, &x, &m, &zero, &zero, 1e-6).unwrap(), 0.0);
    let one = Tensor::ones(&[1, 1]);
    let l = vae_loss(&x, &x, &m, &one, &zero, 1e-6).unwrap();
    assert!((l - 1e-6 * 0.5).abs() < 1e-18);

    // changes under m_rec = 0 are invisible
    let part = BinaryMask::new(2, 2, vec![1, 0, 1, 0]).unwrap();
    let mut xh = x.clone();
    xh.data_mut()[1] += 7.0;
    xh.data_mut()[3] -= 2.0;
    assert_eq!(vae_loss(&x, &xh, &part, &one, &zero, 1e-6).unwrap(), l);

    // empty m_rec: KL term alone
    let mut far = x.clone();
    far.data_mut()[0] = 100.0;
    let lz = vae_loss(&x, &far, &BinaryMask::zeros(2, 2), &one, &zero, 1e-6).unwrap();
    assert_eq!(lz, l);
}

#[test]
fn kl_closed_form_on_random_tensors() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let (n, d) = (rng.random_range(1..6), rng.random_range(1..6));
        let mu = rand_tensor(&mut rng, &[n, d], 3.0);
        let lv = rand_tensor(&mut rng, &[n, d], 3.0);
        let mut s = 0.0;
        for i in 0..n * d {
            let (m, l) = (mu.data()[i], lv.data()[i]);
            s += m * m + l.exp() - 1.0 - l;
        }
        let want = 0.5 * s / n as f64;
        assert!((kl_divergence(&mu, &lv) - want).abs() <= 1e-9 * want.max(1.0));
        // the loss with identical reconstruction is beta·KL
        let x = Tensor::zeros(&[1, 2, 2]);
        let got = vae_loss(&x, &x, &BinaryMask::ones(2, 2), &mu, &lv, 1.0).unwrap();
        assert!((got - want).abs() <= 1e-9 * want.max(1.0));
    }
}

#[test]
fn vae_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (c, h, w, ntok, d) = (4, 8, 8, 4, 3);
    let x = rand_tensor(&mut rng, &[c, h, w], 1.0);
    let xh0 = rand_tensor(&mut rng, &[c, h, w], 1.0);
    let mu0 = rand_tensor(&mut rng, &[ntok, d], 1.0);
    let lv0 = rand_tensor(&mut rng, &[ntok, d], 0.5);
    let m = BinaryMask::from_fn(h, w, |i, j| (i + 2 * j) % 3 != 0);
    let beta = 0.3;
    let eval = |xh: &Tensor, mu: &Tensor| vae_loss(&x, xh, &m, mu, &lv0, beta).unwrap();

    let mut t = Tape::new();
    let xv = t.input(xh0.clone());
    let muv = t.input(mu0.clone());
    let lvv = t.constant(lv0.clone());
    let loss = vae_loss_on_tape(&mut t, &x, xv, &m, muv, lvv, beta);
    let g = t.backward(loss);
    let (gx, gmu) = (g.wrt(xv).unwrap().clone(), g.wrt(muv).unwrap().clone());

    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for k in 0..xh0.numel() {
        // keep clear of the |·| kink
        if (xh0.data()[k] - x.data()[k]).abs() < 1e-3 {
            continue;
        }
        let (mut p, mut q) = (xh0.clone(), xh0.clone());
        p.data_mut()[k] += eps;
        q.data_mut()[k] -= eps;
        let fd = (eval(&p, &mu0) - eval(&q, &mu0)) / (2.0 * eps);
        worst = worst.max((fd - gx.data()[k]).abs() / fd.abs().max(gx.data()[k].abs()).max(1e-3));
    }
    for k in 0..mu0.numel() {
        let (mut p, mut q) = (mu0.clone(), mu0.clone());
        p.data_mut()[k] += eps;
        q.data_mut()[k] -= eps;
        let fd = (eval(&xh0, &p) - eval(&xh0, &q)) / (2.0 * eps);
        worst = worst.max((fd - gmu.data()[k]).abs() / fd.abs().max(gmu.data()[k].abs()).max(1e-3));
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn encoder_is_local_to_the_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let tok = SatTokenizer::new(small_cfg(2, 16, 16, 4)).unwrap();
    for _ in 0..20 {
        let f = random_frame(&mut rng, 2, 16, 16, 0.75);
        let mut g = f.clone();
        for k in 0..g.values.len() {
            if g.mask.data()[k % 256] == 0 {
                g.values[k] = rng.random_range(-50.0..50.0);
            }
        }
        let (a, b) = (tok.encode(&f).unwrap(), tok.encode(&g).unwrap());
        let attn = attention_mask(&f.mask, 4, 0.5).unwrap();
        let d = a.dim;
        let (ma, mb) = (a.mu.as_ref().unwrap(), b.mu.as_ref().unwrap());
        let (la, lb) = (a.logvar.as_ref().unwrap(), b.logvar.as_ref().unwrap());
        for k in 0..a.len() {
            if attn.data()[k] == 1 {
                for c in 0..d {
                    let i = k * d + c;
                    assert!((ma[i] - mb[i]).abs() <= 1e-6 * ma[i].abs().max(1.0));
                    assert!((la[i] - lb[i]).abs() <= 1e-6 * la[i].abs().max(1.0));
                }
            }
        }
        let sa = SatSample { selection: a.valid.clone(), frame: f };
        let sb = SatSample { selection: b.valid.clone(), frame: g };
        let (l1, l2) = (tok.masked_l1(&sa).unwrap(), tok.masked_l1(&sb).unwrap());
        assert!((l1 - l2).abs() <= 1e-6 * l1.abs().max(1e-12));
    }
}

#[test]
fn decode_with_no_valid_tokens_ignores_the_tokens() {
    let tok = SatTokenizer::new(small_cfg(1, 8, 8, 2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = tok.encode(&random_frame(&mut rng, 1, 8, 8, 0.0)).unwrap();
    let mut b = a.clone();
    for v in b.tokens.iter_mut() {
        *v = rng.random_range(-3.0..3.0);
    }
    assert_eq!(tok.decode(&a).unwrap(), tok.decode(&b).unwrap());
}

#[test]
fn reconstruction_mask_is_selection_and_cells() {
    let sel = BinaryMask::new(2, 2, vec![1, 0, 0, 1]).unwrap();
    let cells = BinaryMask::from_fn(4, 4, |i, j| i != j);
    let m = reconstruction_mask(&sel, &cells, 2);
    let want = BinaryMask::from_fn(4, 4, |i, j| i != j && ((i < 2) == (j < 2)));
    assert_eq!(m, want);
}

fn toy_samples(n: usize, seed: u64) -> Vec<SatSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let f = random_frame(&mut rng, 2, 8, 8, 0.9);
            SatSample { selection: BinaryMask::ones(4, 4), frame: f }
        })
        .collect()
}

#[test]
fn training_is_deterministic_and_beta_is_negligible_early() {
    let samples = toy_samples(4, 9);
    let cfg = small_cfg(2, 8, 8, 2);
    let tr = TrainConfig { steps: 101, batch: 2, seed: 11, ..TrainConfig::default() };
    let a = train_sat_tokenizer(&samples, &cfg, &tr).unwrap();
    let b = train_sat_tokenizer(&samples, &cfg, &tr).unwrap();
    assert_eq!(a.trace, b.trace);
    let zero = SatTokenizerConfig { beta: 0.0, ..cfg };
    let c = train_sat_tokenizer(&samples, &zero, &tr).unwrap();
    assert!((a.trace[100] - c.trace[100]).abs() <= 1e-3);
    assert_ne!(a.trace, c.trace);
}

#[test]
fn checkpoint_round_trip_preserves_encodings() {
    let samples = toy_samples(2, 10);
    let cfg = small_cfg(2, 8, 8, 2);
    let tr = TrainConfig { steps: 5, ..TrainConfig::default() };
    let run = train_sat_tokenizer(&samples, &cfg, &tr).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tok.ckpt");
    run.model.checkpoint(5).unwrap().save(&path).unwrap();
    let back = SatTokenizer::from_checkpoint(&eo1_core::checkpoint::Checkpoint::load(&path).unwrap()).unwrap();
    let a = run.model.encode(&samples[0].frame).unwrap();
    let b = back.encode(&samples[0].frame).unwrap();
    // parameters are stored as f32
    for (x, y) in a.tokens.iter().zip(&b.tokens) {
        assert!((x - y).abs() < 1e-4);
    }
}
