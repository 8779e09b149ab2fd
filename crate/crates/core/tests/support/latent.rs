use eo1_core::forecast::LatentWindow;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_window(rng: &mut ChaCha8Rng, t: usize, h: usize, w: usize, dims: &[usize]) -> LatentWindow {
    let data = dims.iter().map(|d| (0..h * w * t * d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    LatentWindow::complete(t, h, w, dims.to_vec(), 0, data).unwrap()
}

/// Scalar evaluation of the prediction loss.
pub fn pred_loss_oracle(truth: &LatentWindow, pred: &LatentWindow, strict: bool) -> f64 {
    let mut acc = 0.0;
    for m in 0..truth.dims.len() {
        let mut sse = 0.0;
        for pos in 0..truth.h * truth.w {
            for s in 0..truth.t {
                let (a, b) = (truth.token(m, s, pos), pred.token(m, s, pos));
                for c in 0..a.len() {
                    sse += (a[c] - b[c]) * (a[c] - b[c]);
                }
            }
        }
        acc += if strict { sse } else { sse / (truth.t * truth.dims[m]) as f64 };
    }
    acc / (truth.dims.len() * truth.h * truth.w) as f64
}
