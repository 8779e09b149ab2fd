use eo1_autograd::nn::{Linear, Mlp};
use eo1_autograd::{ParamStore, Tape, Tensor};
use eo1_core::geo::{BBox, GeoPoint};
use eo1_core::insitu_tokenizer::{InSituConfig, PointAttention};
use eo1_core::synth::StationSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn lin(s: &ParamStore, l: &Linear, x: &[f64]) -> Vec<f64> {
    let w = s.get(l.w).data();
    let mut y: Vec<f64> = match l.b {
        Some(b) => s.get(b).data().to_vec(),
        None => vec![0.0; l.dout],
    };
    for (o, yo) in y.iter_mut().enumerate() {
        for (i, xi) in x.iter().enumerate() {
            *yo += xi * w[i * l.dout + o];
        }
    }
    y
}

pub fn mlp(s: &ParamStore, m: &Mlp, x: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = lin(s, &m.fc1, x).into_iter().map(gelu).collect();
    lin(s, &m.fc2, &h)
}

/// Step-by-step evaluation of the point-attention formula for one anchor.
pub fn pa_oracle(s: &ParamStore, pa: &PointAttention, fa: &[f64], fj: &[Vec<f64>], rel: &[[f64; 2]]) -> Vec<f64> {
    let d = fa.len();
    let phi = lin(s, &pa.phi, fa);
    let mut logits = Vec::new();
    let mut vals = Vec::new();
    for (f, r) in fj.iter().zip(rel) {
        let delta = mlp(s, &pa.theta, r);
        let psi = lin(s, &pa.psi, f);
        let pre: Vec<f64> = (0..d).map(|c| phi[c] - psi[c] + delta[c]).collect();
        logits.push(mlp(s, &pa.gamma, &pre));
        let al = lin(s, &pa.alpha, f);
        vals.push((0..d).map(|c| al[c] + delta[c]).collect::<Vec<_>>());
    }
    (0..d)
        .map(|c| {
            let m = logits.iter().map(|l| l[c]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l[c] - m).exp()).sum();
            logits.iter().zip(&vals).map(|(l, v)| (l[c] - m).exp() / z * v[c]).sum()
        })
        .collect()
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn run_pa(s: &ParamStore, pa: &PointAttention, fa: &[f64], fj: &[Vec<f64>], rel: &[[f64; 2]]) -> Vec<f64> {
    let d = fa.len();
    let mut t = Tape::new();
    let a = t.constant(Tensor::new(&[1, d], fa.to_vec()).unwrap());
    let n = t.constant(Tensor::new(&[fj.len(), d], fj.concat()).unwrap());
    let rel_t = Tensor::new(&[rel.len(), 2], rel.iter().flatten().copied().collect()).unwrap();
    let idx = vec![(0..fj.len()).collect::<Vec<_>>()];
    let y = pa.forward(&mut t, s, a, n, &idx, &rel_t);
    t.value(y).data().to_vec()
}

pub fn setup_pa(d: usize, seed: u64) -> (ParamStore, PointAttention, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let pa = PointAttention::new(&mut s, "pa", d, &mut rng);
    (s, pa, rng)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

pub fn bbox() -> BBox {
    BBox::new(0.0, 45.0, 0.0, 45.0).unwrap()
}

pub fn station_set(rng: &mut ChaCha8Rng, n: usize, channels: usize) -> StationSet {
    let points = (0..n)
        .map(|_| {
            GeoPoint::with_alt(rng.random_range(0.5..44.5), rng.random_range(0.5..44.5), rng.random_range(0.0..2000.0))
                .unwrap()
        })
        .collect();
    let present: Vec<bool> = (0..n * channels).map(|_| rng.random_bool(0.85)).collect();
    let values = present.iter().map(|&p| if p { rng.random_range(-2.0f32..2.0) } else { 0.0 }).collect();
    StationSet { time: 6.0, step: 1, points, channels, values, present }
}

pub fn cfg(n: usize, k: usize) -> InSituConfig {
    InSituConfig { n, k, width: 16, ..InSituConfig::new(3) }
}
