use eo1_autograd::nn::*;
use eo1_autograd::{ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn masked_attention_ignores_invalid_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut s = ParamStore::new();
    let blk = Block::new(&mut s, "b", 8, 2, 2, &mut rng);
    let mask = TokenMask::new(vec![true, false, true, false]);
    let x0 = normal_init(&mut rng, &[4, 8], 1.0);
    let mut x1 = x0.clone();
    for j in 0..8 {
        x1.data_mut()[8 + j] += 5.0;
        x1.data_mut()[24 + j] -= 3.0;
    }
    let run = |x: &Tensor| {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let y = blk.forward(&mut t, &s, xv, Some(&mask));
        t.value(y).clone()
    };
    let (y0, y1) = (run(&x0), run(&x1));
    for r in [0, 2] {
        for j in 0..8 {
            assert_eq!(y0.data()[r * 8 + j], y1.data()[r * 8 + j]);
        }
    }
}
