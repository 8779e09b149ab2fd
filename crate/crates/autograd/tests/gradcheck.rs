use std::rc::Rc;

use eo1_autograd::nn::{normal_init, Block, TokenMask};
use eo1_autograd::{ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Central-difference check of d f / d inputs.
fn check(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) {
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.input(x.clone())).collect();
    let out = f(&mut t, &vars);
    let grads = t.backward(out);
    let h = 1e-6;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        for k in 0..x.numel() {
            let eval = |delta: f64| {
                let mut xs = inputs.to_vec();
                xs[i].data_mut()[k] += delta;
                let mut t = Tape::new();
                let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
                let o = f(&mut t, &vs);
                t.value(o).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[k];
            let err = (a - fd).abs() / (1e-6 + a.abs().max(fd.abs()));
            assert!(err < 1e-5, "input {i} elem {k}: analytic {a} vs fd {fd}");
        }
    }
}

fn rnd(seed: u64, shape: &[usize]) -> Tensor {
    normal_init(&mut ChaCha8Rng::seed_from_u64(seed), shape, 1.0)
}

#[test]
fn elementwise_and_reductions() {
    check(&[rnd(1, &[3, 4]), rnd(2, &[3, 4])], |t, v| {
        let a = t.mul(v[0], v[1]);
        let b = t.sub(a, v[1]);
        let c = t.gelu(b);
        let d = t.tanh(c);
        let e = t.softplus(d);
        let f = t.add(e, v[0]);
        let g = t.tanh(f);
        let g = t.square(g);
        let h = t.silu(g);
        let s = t.sum_axis(h, 1);
        let s = t.scale(s, 0.1);
        let s = t.exp(s);
        t.mean(s)
    });
}

#[test]
fn abs_and_sigmoid() {
    check(&[rnd(3, &[5])], |t, v| {
        let a = t.abs(v[0]);
        let b = t.sigmoid(v[0]);
        let c = t.mul(a, b);
        t.sum(c)
    });
}

#[test]
fn matmul_both_forms() {
    check(&[rnd(4, &[2, 3, 4]), rnd(5, &[4, 5])], |t, v| {
        let y = t.matmul(v[0], v[1]);
        let y = t.square(y);
        t.sum(y)
    });
    check(&[rnd(6, &[2, 3, 4]), rnd(7, &[2, 4, 2])], |t, v| {
        let y = t.matmul(v[0], v[1]);
        let y = t.tanh(y);
        t.sum(y)
    });
}

#[test]
fn softmax_layernorm_rows() {
    check(&[rnd(8, &[3, 5]), rnd(9, &[5]), rnd(10, &[5])], |t, v| {
        let a = t.layer_norm(v[0], 1e-5);
        let a = t.mul_row(a, v[1]);
        let a = t.add_row(a, v[2]);
        let s = t.softmax(a);
        let w = t.constant(rnd(11, &[3, 5]));
        let p = t.mul(s, w);
        t.sum(p)
    });
}

#[test]
fn shape_ops() {
    check(&[rnd(12, &[2, 3, 4]), rnd(13, &[2, 2, 4])], |t, v| {
        let p = t.permute(v[0], &[2, 0, 1]);
        let p = t.reshape(p, &[4, 2, 3]);
        let p = t.permute(p, &[1, 2, 0]);
        let c = t.concat(&[p, v[1]], 1);
        let n = t.narrow(c, 1, 1, 3);
        let g = t.gather_rows(n, Rc::new(vec![Some(1), None, Some(0), Some(1)]));
        let g = t.square(g);
        let w = t.constant(rnd(14, &[4, 3, 4]));
        let g = t.mul(g, w);
        t.sum(g)
    });
}

#[test]
fn transformer_block_params_and_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut store = ParamStore::new();
    let blk = Block::new(&mut store, "blk", 4, 2, 2, &mut rng);
    let mask = TokenMask::new(vec![true, true, false]);
    let x = rnd(22, &[3, 4]);
    check(&[x], |t, v| {
        let y = blk.forward(t, &store, v[0], Some(&mask));
        let y = t.square(y);
        t.sum(y)
    });
    // parameter gradient of the qkv weight against finite differences
    let run = |s: &ParamStore| {
        let mut t = Tape::new();
        let xv = t.constant(rnd(22, &[3, 4]));
        let y = blk.forward(&mut t, s, xv, Some(&mask));
        let y = t.square(y);
        let l = t.sum(y);
        (t, l)
    };
    let (t, l) = run(&store);
    let grads = t.backward(l);
    let wid = blk.attn.qkv.w;
    let g = grads.param(&store, wid).unwrap().clone();
    let loss = |s: &ParamStore| {
        let (t, l) = run(s);
        t.value(l).item()
    };
    for k in [0, 5, 17, 40] {
        let mut sp = store.clone();
        sp.get_mut(wid).data_mut()[k] += 1e-6;
        let mut sm = store.clone();
        sm.get_mut(wid).data_mut()[k] -= 1e-6;
        let fd = (loss(&sp) - loss(&sm)) / 2e-6;
        let a = g.data()[k];
        assert!((a - fd).abs() / (1e-6 + a.abs().max(fd.abs())) < 1e-5, "{a} vs {fd}");
    }
}

#[test]
fn frozen_store_has_no_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let blk = Block::new(&mut store, "blk", 4, 1, 1, &mut rng);
    store.set_trainable(false);
    let mut t = Tape::new();
    let x = t.input(rnd(2, &[2, 4]));
    let y = blk.forward(&mut t, &store, x, None);
    let l = t.sum(y);
    let g = t.backward(l);
    assert_eq!(g.store_sq_norm(&store), 0.0);
    assert!(g.wrt(x).is_some());
}

#[test]
fn each_unary() {
    type UnaryOp = fn(&mut Tape, Var) -> Var;
    let ops: Vec<(&str, UnaryOp)> = vec![
        ("gelu", |t, v| t.gelu(v)),
        ("tanh", |t, v| t.tanh(v)),
        ("softplus", |t, v| t.softplus(v)),
        ("silu", |t, v| t.silu(v)),
        ("exp", |t, v| t.exp(v)),
        ("square", |t, v| t.square(v)),
    ];
    for (name, op) in ops {
        eprintln!("{name}");
        check(&[rnd(30, &[6])], |t, v| {
            let y = op(t, v[0]);
            t.sum(y)
        });
    }
}
