//! Set-to-lattice encoder and lattice-to-point decoder for station data.

use std::rc::Rc;

use eo1_autograd::nn::{normal_init, Block, LayerNorm, Linear, Mlp};
use eo1_autograd::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{invalid, Error, Result};
use crate::geo::{grid_anchors, haversine_km, knn, BBox, BinaryMask, GeoPoint};
use crate::synth::StationSet;
use crate::tokens::TokenField;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InSituConfig {
    /// Anchor grid side.
    pub l: usize,
    /// Stations sampled per window.
    pub n: usize,
    /// Neighbours per anchor.
    pub k: usize,
    pub channels: usize,
    pub width: usize,
    pub token_dim: usize,
    /// Token lattice side; `l` must be this times a power of two.
    pub token_side: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub kernel_lengthscale_km: f64,
    pub impute_value: f64,
    pub seed: u64,
}

impl InSituConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            l: 8,
            n: 64,
            k: 4,
            channels,
            width: 32,
            token_dim: 8,
            token_side: 4,
            heads: 2,
            mlp_ratio: 2,
            kernel_lengthscale_km: 400.0,
            impute_value: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.l == 0 || self.n == 0 || self.k == 0 || self.channels == 0 {
            return Err(invalid("L, N, K and channel count must be >= 1"));
        }
        if !(self.kernel_lengthscale_km > 0.0) {
            return Err(invalid("kernel lengthscale must be > 0"));
        }
        if self.token_side == 0
            || !self.l.is_multiple_of(self.token_side)
            || !(self.l / self.token_side).is_power_of_two()
        {
            return Err(invalid(format!(
                "anchor side {} must be the token side {} times a power of two",
                self.l, self.token_side
            )));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(invalid("width must be a multiple of heads"));
        }
        Ok(())
    }

    fn stages(&self) -> usize {
        (self.l / self.token_side).trailing_zeros() as usize
    }
}

/// Decoding location: lon, lat in degrees, altitude in metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaQuery {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl MetaQuery {
    pub fn validate(&self) -> Result<()> {
        if self.x.is_finite() && self.y.is_finite() && self.z.is_finite() {
            Ok(())
        } else {
            Err(invalid(format!("non-finite meta query {self:?}")))
        }
    }

    pub fn from_stations(s: &StationSet) -> Vec<MetaQuery> {
        s.points.iter().map(|p| MetaQuery { x: p.lon, y: p.lat, z: p.alt }).collect()
    }
}

/// Point attention of anchors over their neighbour sets.
#[derive(Debug, Clone)]
pub struct PointAttention {
    pub phi: Linear,
    pub psi: Linear,
    pub alpha: Linear,
    pub theta: Mlp,
    pub gamma: Mlp,
}

impl PointAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, width: usize, rng: &mut R) -> Self {
        Self {
            phi: Linear::new(store, &format!("{name}.phi"), width, width, rng),
            psi: Linear::new(store, &format!("{name}.psi"), width, width, rng),
            alpha: Linear::new(store, &format!("{name}.alpha"), width, width, rng),
            theta: Mlp::new(store, &format!("{name}.theta"), 2, width, width, rng),
            gamma: Mlp::new(store, &format!("{name}.gamma"), width, width, width, rng),
        }
    }

    /// `anchors: [A, d]`, `neigh: [M, d]`, `idx[a]`: the same number `K` of
    /// neighbour rows for every anchor, `rel: [A·K, 2]` relative positions.
    /// Returns `[A, d]`.
    pub fn forward(
        &self,
        t: &mut Tape,
        s: &ParamStore,
        anchors: Var,
        neigh: Var,
        idx: &[Vec<usize>],
        rel: &Tensor,
    ) -> Var {
        let a = idx.len();
        let k = idx.first().map_or(0, |v| v.len());
        assert!(k > 0 && idx.iter().all(|v| v.len() == k), "every anchor needs the same K >= 1");
        let d = t.shape(anchors)[1];
        let rep: Vec<Option<usize>> = (0..a).flat_map(|i| std::iter::repeat_n(Some(i), k)).collect();
        let nb: Vec<Option<usize>> = idx.iter().flatten().map(|&j| Some(j)).collect();
        let nb = Rc::new(nb);
        let phi = self.phi.forward(t, s, anchors);
        let phi = t.gather_rows(phi, Rc::new(rep));
        let psi = self.psi.forward(t, s, neigh);
        let psi = t.gather_rows(psi, nb.clone());
        let al = self.alpha.forward(t, s, neigh);
        let al = t.gather_rows(al, nb);
        let rel = t.constant(rel.clone());
        let delta = self.theta.forward(t, s, rel);
        let pre = t.sub(phi, psi);
        let pre = t.add(pre, delta);
        let logits = self.gamma.forward(t, s, pre);
        let logits = t.reshape(logits, &[a, k, d]);
        let logits = t.permute(logits, &[0, 2, 1]);
        let rho = t.softmax(logits);
        let rho = t.permute(rho, &[0, 2, 1]);
        let val = t.add(al, delta);
        let val = t.reshape(val, &[a, k, d]);
        let out = t.mul(rho, val);
        t.sum_axis(out, 1)
    }
}

/// LayerNorm whose scale and shift are affine maps of an altitude embedding.
#[derive(Debug, Clone)]
pub struct CondLayerNorm {
    pub enc: Linear,
    pub scale: Linear,
    pub shift: Linear,
}

impl CondLayerNorm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, width: usize, rng: &mut R) -> Self {
        Self {
            enc: Linear::new(store, &format!("{name}.enc"), 1, width, rng),
            scale: Linear::new(store, &format!("{name}.scale"), width, width, rng),
            shift: Linear::new(store, &format!("{name}.shift"), width, width, rng),
        }
    }

    /// `x: [n, d]`, `z: [n, 1]` altitude in metres.
    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var, z: Var) -> Var {
        let zk = t.scale(z, 1e-3);
        let e = self.enc.forward(t, s, zk);
        let e = t.gelu(e);
        let sc = self.scale.forward(t, s, e);
        let sh = self.shift.forward(t, s, e);
        let n = t.layer_norm(x, 1e-5);
        let ns = t.mul(n, sc);
        let y = t.add(n, ns);
        t.add(y, sh)
    }

    fn conditioning_ids(&self) -> Vec<ParamId> {
        [&self.scale, &self.shift].iter().flat_map(|l| std::iter::once(l.w).chain(l.b)).collect()
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    ln: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl ResBlock {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, width: usize, rng: &mut R) -> Self {
        Self {
            ln: LayerNorm::new(store, &format!("{name}.ln"), width),
            fc1: Linear::new(store, &format!("{name}.fc1"), width, width, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), width, width, rng),
        }
    }

    fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Var {
        let h = self.ln.forward(t, s, x);
        let h = self.fc1.forward(t, s, h);
        let h = t.gelu(h);
        let h = self.fc2.forward(t, s, h);
        t.add(x, h)
    }
}

#[derive(Debug, Clone)]
struct DownStage {
    res: ResBlock,
    attn: Block,
    merge: Linear,
}

#[derive(Debug, Clone)]
struct UpStage {
    up: Linear,
    attn: Block,
}

/// `[side², d]` row-major → `[(side/2)², 4d]`.
fn space_to_depth(t: &mut Tape, x: Var, side: usize, d: usize) -> Var {
    let h = side / 2;
    let x = t.reshape(x, &[h, 2, h, 2, d]);
    let x = t.permute(x, &[0, 2, 1, 3, 4]);
    t.reshape(x, &[h * h, 4 * d])
}

/// `[side², 4d]` → `[(2·side)², d]`.
fn depth_to_space(t: &mut Tape, x: Var, side: usize, d: usize) -> Var {
    let x = t.reshape(x, &[side, side, 2, 2, d]);
    let x = t.permute(x, &[0, 2, 1, 3, 4]);
    t.reshape(x, &[4 * side * side, d])
}

/// Squared haversine distances `[Q, G]`, each row shifted by its minimum.
fn shifted_sq_dist(queries: &[MetaQuery], grid: &[GeoPoint]) -> Result<Tensor> {
    if grid.is_empty() {
        return Err(invalid("setconv needs at least one grid node"));
    }
    let g = grid.len();
    let mut out = Vec::with_capacity(queries.len() * g);
    for q in queries {
        q.validate()?;
        let d2: Vec<f64> = grid.iter().map(|p| haversine_km(q.x, q.y, p.lon, p.lat).powi(2)).collect();
        let m = d2.iter().copied().fold(f64::INFINITY, f64::min);
        out.extend(d2.iter().map(|v| v - m));
    }
    Ok(Tensor::new(&[queries.len(), g], out)?)
}

/// Normalised Gaussian kernel weights `[Q, G]` on haversine distance.
///
/// Computed as `exp(-(d² - d²_min) / 2ℓ²)` normalised, which equals the plain
/// normalised Gaussian but cannot underflow to an all-zero row: when every
/// other weight underflows the nearest node receives weight 1.
pub fn setconv_weights(queries: &[MetaQuery], grid: &[GeoPoint], lengthscale_km: f64) -> Result<Tensor> {
    if !(lengthscale_km > 0.0) {
        return Err(invalid("kernel lengthscale must be > 0"));
    }
    let mut w = shifted_sq_dist(queries, grid)?;
    let g = grid.len();
    let c = 1.0 / (2.0 * lengthscale_km * lengthscale_km);
    for row in w.data_mut().chunks_mut(g) {
        for v in row.iter_mut() {
            *v = (-*v * c).exp();
        }
        let s: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Ok(w)
}

/// Mean absolute error over present entries; 0 when nothing is present.
pub fn insitu_joint_loss(y: &[f64], yhat: &[f64], presence: &[bool]) -> Result<f64> {
    if y.len() != yhat.len() || y.len() != presence.len() {
        return Err(invalid("insitu_joint_loss: length mismatch"));
    }
    let (mut s, mut n) = (0.0, 0usize);
    for i in 0..y.len() {
        if presence[i] {
            s += (y[i] - yhat[i]).abs();
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { s / n as f64 })
}

/// Tape form of [`insitu_joint_loss`]; `yhat: [Q, C]`.
pub fn insitu_joint_loss_on_tape(t: &mut Tape, y: &[f64], yhat: Var, presence: &[bool]) -> Var {
    let shape = t.shape(yhat).to_vec();
    let n = presence.iter().filter(|p| **p).count();
    if n == 0 {
        return t.constant(Tensor::scalar(0.0));
    }
    let yv = t.constant(Tensor::new(&shape, y.to_vec()).expect("target shape"));
    let d = t.sub(yhat, yv);
    let d = t.abs(d);
    let gate = presence.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect();
    let d = t.mul_const(d, Tensor::new(&shape, gate).expect("presence shape"));
    let s = t.sum(d);
    t.scale(s, 1.0 / n as f64)
}

/// Stations fed to the encoder after sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    pub stations: StationSet,
    pub bbox: BBox,
}

impl EncoderInput {
    /// Drops stations outside `bbox`, then samples `n` of them: without
    /// replacement when `n ≤ |stations|`, with replacement otherwise.
    pub fn sample(stations: &StationSet, bbox: &BBox, n: usize, rng: &mut ChaCha8Rng) -> Self {
        let inside = stations.within(bbox);
        let m = inside.len();
        let picked = if m == 0 {
            inside
        } else if n <= m {
            let idx = rand::seq::index::sample(rng, m, n).into_vec();
            inside.select(&idx)
        } else {
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
            inside.select(&idx)
        };
        Self { stations: picked, bbox: *bbox }
    }

    /// Every station inside `bbox`, in input order.
    pub fn all(stations: &StationSet, bbox: &BBox) -> Self {
        Self { stations: stations.within(bbox), bbox: *bbox }
    }
}

/// Tape handles for an encoded station set.
#[derive(Debug, Clone)]
pub struct InSituEncoded {
    pub tokens: Var,
    pub valid: BinaryMask,
}

#[derive(Debug, Clone)]
pub struct InSituTokenizer {
    pub cfg: InSituConfig,
    pub store: ParamStore,
    anchor_ffn: Mlp,
    station_in: Linear,
    station_cln: CondLayerNorm,
    pa: PointAttention,
    down: Vec<DownStage>,
    tok_block: Block,
    tok_norm: LayerNorm,
    tok_out: Linear,
    dec_in: Linear,
    dec_pos: ParamId,
    dec_block: Block,
    up: Vec<UpStage>,
    dec_cln: CondLayerNorm,
    log_ls: ParamId,
    heads: Vec<Mlp>,
}

impl InSituTokenizer {
    pub fn new(cfg: InSituConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let r = &mut rng;
        let mut store = ParamStore::new();
        let st = &mut store;
        let (w, c) = (cfg.width, cfg.channels);
        let down = (0..cfg.stages())
            .map(|i| DownStage {
                res: ResBlock::new(st, &format!("down{i}.res"), w, r),
                attn: Block::new(st, &format!("down{i}.attn"), w, cfg.heads, cfg.mlp_ratio, r),
                merge: Linear::new(st, &format!("down{i}.merge"), 4 * w, w, r),
            })
            .collect();
        let up = (0..cfg.stages())
            .map(|i| UpStage {
                up: Linear::new(st, &format!("up{i}.lin"), w, 4 * w, r),
                attn: Block::new(st, &format!("up{i}.attn"), w, cfg.heads, cfg.mlp_ratio, r),
            })
            .collect();
        let ts = cfg.token_side;
        Ok(Self {
            anchor_ffn: Mlp::new(st, "anchor", 2, w, w, r),
            station_in: Linear::new(st, "station.in", 2 * c, w, r),
            station_cln: CondLayerNorm::new(st, "station.cln", w, r),
            pa: PointAttention::new(st, "pa", w, r),
            down,
            tok_block: Block::new(st, "tok.blk", w, cfg.heads, cfg.mlp_ratio, r),
            tok_norm: LayerNorm::new(st, "tok.norm", w),
            tok_out: Linear::new(st, "tok.out", w, cfg.token_dim, r),
            dec_in: Linear::new(st, "dec.in", cfg.token_dim, w, r),
            dec_pos: st.add("dec.pos", normal_init(r, &[ts * ts, w], 0.02)),
            dec_block: Block::new(st, "dec.blk", w, cfg.heads, cfg.mlp_ratio, r),
            up,
            dec_cln: CondLayerNorm::new(st, "dec.cln", w, r),
            log_ls: st.add("dec.log_lengthscale", Tensor::scalar(cfg.kernel_lengthscale_km.ln())),
            heads: (0..c).map(|i| Mlp::new(st, &format!("head{i}"), w, w, 1, r)).collect(),
            cfg,
            store,
        })
    }

    /// Current setconv lengthscale in km.
    pub fn lengthscale_km(&self) -> f64 {
        self.store.get(self.log_ls).data()[0].exp()
    }

    /// Setconv weights at the current lengthscale.
    pub fn kernel_weights(&self, queries: &[MetaQuery], grid: &[GeoPoint]) -> Result<Tensor> {
        setconv_weights(queries, grid, self.lengthscale_km())
    }

    /// Zeroes the altitude-conditioning maps of both conditional norms.
    pub fn zero_conditioning(&mut self) {
        let ids: Vec<ParamId> =
            self.station_cln.conditioning_ids().into_iter().chain(self.dec_cln.conditioning_ids()).collect();
        for id in ids {
            for v in self.store.get_mut(id).data_mut() {
                *v = 0.0;
            }
        }
    }

    fn anchor_features(&self, t: &mut Tape, bbox: &BBox) -> Result<(Var, Vec<GeoPoint>)> {
        let anchors = grid_anchors(bbox, self.cfg.l)?;
        let mut pos = Vec::with_capacity(anchors.len() * 2);
        for a in &anchors {
            pos.push(2.0 * (a.lon - bbox.lon_min) / bbox.width() - 1.0);
            pos.push(2.0 * (a.lat - bbox.lat_min) / bbox.height() - 1.0);
        }
        let pos = t.constant(Tensor::new(&[anchors.len(), 2], pos)?);
        Ok((self.anchor_ffn.forward(t, &self.store, pos), anchors))
    }

    /// Token-cell occupancy of the input stations.
    pub fn occupancy(&self, input: &EncoderInput) -> BinaryMask {
        let ts = self.cfg.token_side;
        let mut m = BinaryMask::zeros(ts, ts);
        for p in &input.stations.points {
            let k = self.cell_index(&input.bbox, p);
            m.set(k / ts, k % ts, true);
        }
        m
    }

    /// Row-major token cell containing `p`.
    pub fn cell_index(&self, b: &BBox, p: &GeoPoint) -> usize {
        let ts = self.cfg.token_side;
        let i = (((b.lat_max - p.lat) / b.height() * ts as f64).floor().max(0.0) as usize).min(ts - 1);
        let j = (((p.lon - b.lon_min) / b.width() * ts as f64).floor().max(0.0) as usize).min(ts - 1);
        i * ts + j
    }

    pub fn encode_on_tape(&self, t: &mut Tape, input: &EncoderInput) -> Result<InSituEncoded> {
        let cfg = &self.cfg;
        let ts = cfg.token_side;
        let st = &input.stations;
        if st.channels != cfg.channels {
            return Err(invalid(format!(
                "station set has {} channels, tokenizer expects {}",
                st.channels, cfg.channels
            )));
        }
        if st.is_empty() {
            let z = t.constant(Tensor::zeros(&[ts * ts, cfg.token_dim]));
            return Ok(InSituEncoded { tokens: z, valid: BinaryMask::zeros(ts, ts) });
        }
        let s = &self.store;
        let c = cfg.channels;
        let mut feat = Vec::with_capacity(st.len() * 2 * c);
        for i in 0..st.len() {
            for ch in 0..c {
                feat.push(st.value(i, ch).map_or(cfg.impute_value, |v| v as f64));
            }
            for ch in 0..c {
                feat.push(if st.present[i * c + ch] { 1.0 } else { 0.0 });
            }
        }
        let x = t.constant(Tensor::new(&[st.len(), 2 * c], feat)?);
        let x = self.station_in.forward(t, s, x);
        let alt = t.constant(Tensor::new(&[st.len(), 1], st.points.iter().map(|p| p.alt).collect())?);
        let fs = self.station_cln.forward(t, s, x, alt);

        let (fg, anchors) = self.anchor_features(t, &input.bbox)?;
        let idx = knn(&anchors, &st.points, cfg.k)?;
        let mut rel = Vec::new();
        for (a, nb) in anchors.iter().zip(&idx) {
            for &j in nb {
                rel.push((a.lon - st.points[j].lon) / 10.0);
                rel.push((a.lat - st.points[j].lat) / 10.0);
            }
        }
        let kk = idx[0].len();
        let rel = Tensor::new(&[anchors.len() * kk, 2], rel)?;
        let agg = self.pa.forward(t, s, fg, fs, &idx, &rel);
        let mut x = t.add(fg, agg);
        let mut side = cfg.l;
        for stage in &self.down {
            x = stage.res.forward(t, s, x);
            x = stage.attn.forward(t, s, x, None);
            let m = space_to_depth(t, x, side, cfg.width);
            x = stage.merge.forward(t, s, m);
            side /= 2;
        }
        let x = self.tok_block.forward(t, s, x, None);
        let x = self.tok_norm.forward(t, s, x);
        let tokens = self.tok_out.forward(t, s, x);
        Ok(InSituEncoded { tokens, valid: self.occupancy(input) })
    }

    pub fn encode(&self, input: &EncoderInput) -> Result<TokenField> {
        let mut t = Tape::new();
        let e = self.encode_on_tape(&mut t, input)?;
        let ts = self.cfg.token_side;
        TokenField::new(
            self.cfg.token_dim,
            ts,
            ts,
            t.value(e.tokens).data().to_vec(),
            e.valid,
            input.bbox,
            input.stations.time,
        )
    }

    /// Samples `cfg.n` stations inside `bbox` and encodes them.
    pub fn encode_stations(&self, stations: &StationSet, bbox: &BBox, rng: &mut ChaCha8Rng) -> Result<TokenField> {
        self.encode(&EncoderInput::sample(stations, bbox, self.cfg.n, rng))
    }

    /// Token lattice → anchor-resolution feature grid `[L², width]`.
    pub fn grid_features(&self, t: &mut Tape, tokens: Var) -> Var {
        let s = &self.store;
        let x = self.dec_in.forward(t, s, tokens);
        let pos = t.param(s, self.dec_pos);
        let mut x = t.add(x, pos);
        x = self.dec_block.forward(t, s, x, None);
        let mut side = self.cfg.token_side;
        for stage in &self.up {
            let u = stage.up.forward(t, s, x);
            x = depth_to_space(t, u, side, self.cfg.width);
            side *= 2;
            x = stage.attn.forward(t, s, x, None);
        }
        x
    }

    /// Setconv readout of grid features at the queries, then altitude
    /// conditioning and per-variable heads. `z: [Q, 1]` in metres.
    pub fn readout(
        &self,
        t: &mut Tape,
        grid_feats: Var,
        grid: &[GeoPoint],
        queries: &[MetaQuery],
        z: Var,
    ) -> Result<Var> {
        let d2 = t.constant(shifted_sq_dist(queries, grid)?);
        let ll = t.param(&self.store, self.log_ls);
        let inv = t.scale(ll, -2.0);
        let inv = t.exp(inv);
        let inv = t.broadcast_rows(inv, grid.len());
        let inv = t.reshape(inv, &[grid.len()]);
        let logits = t.mul_row(d2, inv);
        let logits = t.scale(logits, -0.5);
        let w = t.softmax(logits);
        let f = t.matmul(w, grid_feats);
        let f = self.dec_cln.forward(t, &self.store, f, z);
        let outs: Vec<Var> = self.heads.iter().map(|h| h.forward(t, &self.store, f)).collect();
        Ok(t.concat(&outs, 1))
    }

    /// `tokens: [token_side², token_dim]` → `[Q, C]`.
    pub fn decode_on_tape(&self, t: &mut Tape, tokens: Var, bbox: &BBox, queries: &[MetaQuery]) -> Result<Var> {
        let grid = grid_anchors(bbox, self.cfg.l)?;
        let g = self.grid_features(t, tokens);
        let z = t.constant(Tensor::new(&[queries.len(), 1], queries.iter().map(|q| q.z).collect())?);
        self.readout(t, g, &grid, queries, z)
    }

    /// Per-query variable vectors.
    pub fn decode_at(&self, tf: &TokenField, queries: &[MetaQuery]) -> Result<Vec<Vec<f64>>> {
        let ts = self.cfg.token_side;
        if tf.h != ts || tf.w != ts || tf.dim != self.cfg.token_dim {
            return Err(invalid("token field does not match the in-situ lattice"));
        }
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let mut t = Tape::new();
        let z = t.constant(tf.as_tensor());
        let y = self.decode_on_tape(&mut t, z, &tf.bbox, queries)?;
        Ok(t.value(y).data().chunks(self.cfg.channels).map(|c| c.to_vec()).collect())
    }

    pub fn checkpoint(&self, step: u64) -> Result<Checkpoint> {
        Ok(Checkpoint::new("insitu-tokenizer", serde_json::to_value(&self.cfg)?, step)
            .with_store("insitu", &self.store))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: InSituConfig = match ck.kind.as_str() {
            "insitu-tokenizer" => serde_json::from_value(ck.config.clone())?,
            "mmae" => serde_json::from_value(ck.config["insitu"].clone())?,
            other => return Err(Error::Integrity(format!("no in-situ tokenizer in a '{other}' checkpoint"))),
        };
        let mut m = Self::new(cfg)?;
        ck.load_store("insitu", &mut m.store)?;
        Ok(m)
    }
}
