use eo1_autograd::Tensor;
use eo1_core::geo::{BBox, BinaryMask};
use eo1_core::sat_tokenizer::SatTokenizerConfig;
use eo1_core::synth::SwathFrame;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn small_cfg(channels: usize, rows: usize, cols: usize, patch: usize) -> SatTokenizerConfig {
    SatTokenizerConfig { rows, cols, patch, width: 16, heads: 2, ..SatTokenizerConfig::new(channels) }
}

pub fn random_frame(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, density: f64) -> SwathFrame {
    let mask = BinaryMask::from_fn(h, w, |_, _| rng.random_bool(density));
    let mut values = vec![0f32; c * h * w];
    for k in 0..c * h * w {
        if mask.data()[k % (h * w)] == 1 {
            values[k] = rng.random_range(-2.0..2.0);
        }
    }
    frame(c, h, w, values, mask)
}

pub fn frame(c: usize, h: usize, w: usize, values: Vec<f32>, mask: BinaryMask) -> SwathFrame {
    let coverage = mask.fraction();
    SwathFrame {
        instrument_id: "t".into(),
        step: 0,
        time: 0.0,
        bbox: BBox::new(0.0, 10.0, 0.0, 10.0).unwrap(),
        channels: c,
        rows: h,
        cols: w,
        values,
        mask,
        coverage,
        node_lon: None,
    }
}

/// Scalar evaluation of the objective, written independently of the library.
#[allow(clippy::too_many_arguments)]
pub fn vae_loss_oracle(
    x: &[f64],
    xh: &[f64],
    mrec: &[u8],
    c: usize,
    mu: &[f64],
    lv: &[f64],
    ntok: usize,
    beta: f64,
) -> f64 {
    let hw = mrec.len();
    let mut num = 0.0;
    let mut cnt = 0usize;
    for ch in 0..c {
        for k in 0..hw {
            if mrec[k] == 1 {
                num += (x[ch * hw + k] - xh[ch * hw + k]).abs();
                cnt += 1;
            }
        }
    }
    let rec = if cnt == 0 { 0.0 } else { num / cnt as f64 };
    let mut kl = 0.0;
    for i in 0..mu.len() {
        kl += mu[i] * mu[i] + lv[i].exp() - 1.0 - lv[i];
    }
    rec + beta * 0.5 * kl / ntok as f64
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], s: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-s..s)).collect()).unwrap()
}
