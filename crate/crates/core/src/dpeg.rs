//! Dual-branch predicate embedding generator.
//!
//! Per clip, every subject–object pair in every frame is one row. The local
//! stage attends only within a frame: a head branch encodes the projected
//! pair features directly, a tail branch encodes them after the frequency
//! correction, and a fusion gate blends the two,
//! `G = σ([H ∥ T ∥ f]·W + b)`, `Z = G ⊙ H + (1 − G) ⊙ T`.
//!
//! The global stage adds sinusoidal positional encoding of the absolute
//! frame index and attends across frames along each pair's track. It runs
//! once per sliding window over the clip's frame sequence; a row's refined
//! embedding is the weighted mean of its outputs over the windows that
//! contain its frame.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::freqgate::{frequency_correct, FrequencyGate, FrequencyPrior};
use crate::numcore::{Graph, Linear, ParamId, ParamStore, Rng, Tensor, Var, LAYER_NORM_EPS};

/// Additive value for disallowed attention logits; `exp` of it underflows to 0.
const MASKED: f64 = -1e9;

/// One subject–object pair in one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEmbedding {
    pub frame: usize,
    pub subj: usize,
    pub obj: usize,
    pub feat: Vec<f64>,
}

pub fn write_clip_jsonl<W: Write>(mut out: W, clip: &[PairEmbedding]) -> std::io::Result<()> {
    for p in clip {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_clip_jsonl<R: BufRead>(input: R) -> Result<Vec<PairEmbedding>> {
    let mut clip = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::parse("clip jsonl", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let p = serde_json::from_str(&line)
            .map_err(|e| Error::parse(format!("clip jsonl line {}", n + 1), e))?;
        clip.push(p);
    }
    Ok(clip)
}

// ── attention masks and clip layout ─────────────────────────────────────

/// Additive `[n, n]` attention mask (0 allowed, large negative blocked).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub n: usize,
    pub additive: Vec<f64>,
}

impl AttentionMask {
    pub fn full(n: usize) -> Self {
        Self {
            n,
            additive: vec![0.0; n * n],
        }
    }

    /// Row `i` may attend to row `j` iff `allow(i, j)`; the diagonal is
    /// always allowed so every softmax row has a finite maximum.
    pub fn from_fn(n: usize, allow: impl Fn(usize, usize) -> bool) -> Self {
        let mut additive = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j && !allow(i, j) {
                    additive[i * n + j] = MASKED;
                }
            }
        }
        Self { n, additive }
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.additive[i * self.n + j] == 0.0
    }
}

/// Sliding-window weighting across overlapping windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowMode {
    Average,
    Triangular,
}

impl std::str::FromStr for WindowMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "average" => Ok(Self::Average),
            "triangular" => Ok(Self::Triangular),
            other => Err(format!(
                "unknown window mode {other:?} (average|triangular)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub length: usize,
    pub stride: usize,
    pub mode: WindowMode,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            length: 3,
            stride: 2,
            mode: WindowMode::Average,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::contract("window length must be at least 1"));
        }
        if self.stride == 0 {
            return Err(Error::contract("window stride must be at least 1"));
        }
        if self.stride > self.length {
            return Err(Error::contract(format!(
                "window stride {} exceeds length {}; positions would be skipped",
                self.stride, self.length
            )));
        }
        Ok(())
    }
}

/// Half-open `[start, end)` windows covering `0..len`.
///
/// Windows start at multiples of the stride; the sweep stops at the first
/// window that reaches the end of the sequence.
pub fn window_spans(len: usize, cfg: &WindowConfig) -> Result<Vec<(usize, usize)>> {
    cfg.validate()?;
    if len == 0 {
        return Err(Error::contract("cannot window an empty sequence"));
    }
    let mut spans = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + cfg.length).min(len);
        spans.push((start, end));
        if end == len {
            break;
        }
        start += cfg.stride;
    }
    Ok(spans)
}

/// Per-window, per-position aggregation weights; each position's weights
/// over the windows containing it sum to one, and are zero elsewhere.
pub fn window_weights(len: usize, cfg: &WindowConfig) -> Result<Vec<Vec<f64>>> {
    let spans = window_spans(len, cfg)?;
    let mut raw: Vec<Vec<f64>> = spans
        .iter()
        .map(|&(a, b)| {
            (0..len)
                .map(|p| {
                    if p < a || p >= b {
                        return 0.0;
                    }
                    match cfg.mode {
                        WindowMode::Average => 1.0,
                        WindowMode::Triangular => {
                            let n = (b - a) as f64;
                            let center = (a + b - 1) as f64 / 2.0;
                            (n + 1.0) / 2.0 - (p as f64 - center).abs()
                        }
                    }
                })
                .collect()
        })
        .collect();
    for p in 0..len {
        let total: f64 = raw.iter().map(|w| w[p]).sum();
        for w in raw.iter_mut() {
            w[p] /= total;
        }
    }
    Ok(raw)
}

/// Aggregates per-window values into one `[len, d]` embedding.
///
/// `windows[w]` holds the `[end − start, d]` outputs for span `w` of
/// [`window_spans`].
pub fn aggregate_windows(windows: &[Tensor], len: usize, cfg: &WindowConfig) -> Result<Tensor> {
    let spans = window_spans(len, cfg)?;
    if windows.len() != spans.len() {
        return Err(Error::contract(format!(
            "{} window tensors for {} windows",
            windows.len(),
            spans.len()
        )));
    }
    let d = windows[0].last_dim();
    let weights = window_weights(len, cfg)?;
    let mut out = vec![0.0; len * d];
    for (w, ((a, b), t)) in spans.iter().zip(windows).enumerate() {
        if t.rows() != b - a || t.last_dim() != d {
            return Err(Error::shape(format!(
                "window {w} expects [{}, {d}], got {:?}",
                b - a,
                t.shape()
            )));
        }
        for p in *a..*b {
            let wt = weights[w][p];
            for (o, v) in out[p * d..(p + 1) * d].iter_mut().zip(t.row(p - a)) {
                *o += wt * v;
            }
        }
    }
    Tensor::matrix(len, d, out)
}

/// Row bookkeeping for one clip: frame, temporal position and track.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipLayout {
    /// Absolute frame index per row.
    pub frames: Vec<usize>,
    /// Position of the row's frame within the clip's sorted frame list.
    pub positions: Vec<usize>,
    /// Track id per row; rows sharing `(subj, obj)` share a track.
    pub tracks: Vec<usize>,
    /// Number of distinct frames.
    pub len: usize,
}

impl ClipLayout {
    /// `keys[r] = (frame, subj, obj)` for row `r`; keys must be unique.
    pub fn new(keys: &[(usize, usize, usize)]) -> Result<Self> {
        if keys.is_empty() {
            return Err(Error::contract("empty clip"));
        }
        let unique: BTreeSet<_> = keys.iter().collect();
        if unique.len() != keys.len() {
            return Err(Error::contract("duplicate (frame, subj, obj) in clip"));
        }
        let frame_set: BTreeSet<usize> = keys.iter().map(|k| k.0).collect();
        let pos: BTreeMap<usize, usize> =
            frame_set.iter().enumerate().map(|(i, &f)| (f, i)).collect();
        let mut track_ids = BTreeMap::new();
        let tracks = keys
            .iter()
            .map(|&(_, s, o)| {
                let next = track_ids.len();
                *track_ids.entry((s, o)).or_insert(next)
            })
            .collect();
        Ok(Self {
            frames: keys.iter().map(|k| k.0).collect(),
            positions: keys.iter().map(|k| pos[&k.0]).collect(),
            tracks,
            len: frame_set.len(),
        })
    }

    pub fn from_pairs(pairs: &[PairEmbedding]) -> Result<Self> {
        let keys: Vec<_> = pairs.iter().map(|p| (p.frame, p.subj, p.obj)).collect();
        Self::new(&keys)
    }

    pub fn rows(&self) -> usize {
        self.frames.len()
    }

    /// Attention restricted to rows of the same frame.
    pub fn local_mask(&self) -> AttentionMask {
        AttentionMask::from_fn(self.rows(), |i, j| self.frames[i] == self.frames[j])
    }

    /// One mask per window (same track, both rows inside the window) and the
    /// matching per-row aggregation weights.
    pub fn window_masks(&self, cfg: &WindowConfig) -> Result<(Vec<AttentionMask>, Vec<Vec<f64>>)> {
        let spans = window_spans(self.len, cfg)?;
        let pos_weights = window_weights(self.len, cfg)?;
        let masks = spans
            .iter()
            .map(|&(a, b)| {
                let inside = |r: usize| (a..b).contains(&self.positions[r]);
                AttentionMask::from_fn(self.rows(), |i, j| {
                    inside(i) && inside(j) && self.tracks[i] == self.tracks[j]
                })
            })
            .collect();
        let row_weights = pos_weights
            .iter()
            .map(|w| self.positions.iter().map(|&p| w[p]).collect())
            .collect();
        Ok((masks, row_weights))
    }
}

/// Sinusoidal encoding: `PE(p, 2i) = sin(p / 10000^(2i/d))`, `PE(p, 2i+1) = cos(·)`.
pub fn positional_encoding(positions: &[usize], d: usize) -> Result<Tensor> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::contract(format!(
            "positional encoding needs an even width, got {d}"
        )));
    }
    if positions.is_empty() {
        return Err(Error::contract("positional encoding of an empty sequence"));
    }
    let mut out = Vec::with_capacity(positions.len() * d);
    for &p in positions {
        for i in 0..d / 2 {
            let angle = p as f64 / 10000f64.powf((2 * i) as f64 / d as f64);
            out.push(angle.sin());
            out.push(angle.cos());
        }
    }
    Tensor::matrix(positions.len(), d, out)
}

/// `[L, d]` encoding of positions `0..L`.
pub fn positional_encoding_len(len: usize, d: usize) -> Result<Tensor> {
    positional_encoding(&(0..len).collect::<Vec<_>>(), d)
}

// ── encoder layer ───────────────────────────────────────────────────────

/// One post-norm transformer encoder layer with a GELU feed-forward block.
///
/// `y = LN(x + MHA(x))`, `out = LN(y + FFN(y))`, both norms parameter-free.
#[derive(Clone, Copy, Debug)]
pub struct BranchEncoder {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub ff1: Linear,
    pub ff2: Linear,
    pub dim: usize,
    pub heads: usize,
}

impl BranchEncoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        ffn: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::contract(format!(
                "width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{prefix}/q"), dim, dim, false, rng)?,
            k: Linear::new(store, &format!("{prefix}/k"), dim, dim, false, rng)?,
            v: Linear::new(store, &format!("{prefix}/v"), dim, dim, false, rng)?,
            out: Linear::new(store, &format!("{prefix}/o"), dim, dim, true, rng)?,
            ff1: Linear::new(store, &format!("{prefix}/ff1"), dim, ffn, true, rng)?,
            ff2: Linear::new(store, &format!("{prefix}/ff2"), ffn, dim, true, rng)?,
            dim,
            heads,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [self.q, self.k, self.v, self.out, self.ff1, self.ff2]
            .iter()
            .flat_map(|l| std::iter::once(l.weight).chain(l.bias))
            .collect()
    }

    /// Zeroes the attention output projection and the feed-forward block,
    /// leaving only the residual path: `out = LN(LN(x))`.
    pub fn make_residual_only(&self, store: &mut ParamStore) {
        self.out.zero(store);
        self.ff1.zero(store);
        self.ff2.zero(store);
    }

    /// Copies every parameter value from `other`.
    pub fn copy_from(&self, store: &mut ParamStore, other: &BranchEncoder) {
        for (dst, src) in self.param_ids().into_iter().zip(other.param_ids()) {
            let data = store.get(src).data().to_vec();
            store.get_mut(dst).data_mut().copy_from_slice(&data);
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mask: &AttentionMask,
    ) -> Result<Var> {
        Ok(self
            .forward_multi(g, store, x, std::slice::from_ref(mask))?
            .remove(0))
    }

    /// Runs the layer once per mask, sharing the query/key/value projections.
    pub fn forward_multi(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        masks: &[AttentionMask],
    ) -> Result<Vec<Var>> {
        let n = g.rows(x);
        if g.cols(x) != self.dim {
            return Err(Error::shape(format!(
                "encoder width {} given {} columns",
                self.dim,
                g.cols(x)
            )));
        }
        if let Some(m) = masks.iter().find(|m| m.n != n) {
            return Err(Error::shape(format!(
                "mask for {} rows applied to {n}",
                m.n
            )));
        }
        let q = self.q.forward(g, store, x)?;
        let k = self.k.forward(g, store, x)?;
        let v = self.v.forward(g, store, x)?;
        let dk = self.dim / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let per_head: Vec<(Var, Var, Var)> = (0..self.heads)
            .map(|h| {
                Ok((
                    g.slice_cols(q, h * dk, dk)?,
                    g.slice_cols(k, h * dk, dk)?,
                    g.slice_cols(v, h * dk, dk)?,
                ))
            })
            .collect::<Result<_>>()?;

        let mut outputs = Vec::with_capacity(masks.len());
        for mask in masks {
            let m = g.constant_vec(vec![n, n], mask.additive.clone())?;
            let mut heads = Vec::with_capacity(self.heads);
            for &(qh, kh, vh) in &per_head {
                let scores = g.matmul_t(qh, kh)?;
                let scores = g.scale(scores, scale);
                let scores = g.add(scores, m)?;
                let attn = g.softmax_last(scores)?;
                heads.push(g.matmul(attn, vh)?);
            }
            let cat = if heads.len() == 1 {
                heads[0]
            } else {
                g.concat_cols(&heads)?
            };
            let a = self.out.forward(g, store, cat)?;
            let y = g.add(x, a)?;
            let y = g.layer_norm(y, LAYER_NORM_EPS)?;
            let hdn = self.ff1.forward(g, store, y)?;
            let hdn = g.gelu(hdn);
            let f = self.ff2.forward(g, store, hdn)?;
            let z = g.add(y, f)?;
            outputs.push(g.layer_norm(z, LAYER_NORM_EPS)?);
        }
        Ok(outputs)
    }
}

// ── fusion gate ─────────────────────────────────────────────────────────

/// `W_loc: [2d + |R|, d]`, zero-initialised bias.
#[derive(Clone, Copy, Debug)]
pub struct FusionGate {
    pub linear: Linear,
    pub dim: usize,
    pub classes: usize,
}

impl FusionGate {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        classes: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let fan_in = 2 * dim + classes;
        let w = store.insert_uniform(
            format!("{prefix}/w"),
            &[fan_in, dim],
            0.05 / (fan_in as f64).sqrt(),
            rng,
        )?;
        let b = store.insert_const(format!("{prefix}/b"), &[dim], 0.0)?;
        Ok(Self {
            linear: Linear {
                weight: w,
                bias: Some(b),
                fan_in,
                fan_out: dim,
            },
            dim,
            classes,
        })
    }

    /// Gate values `G = σ([H ∥ T ∥ f]·W + b)`.
    pub fn gate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h: Var,
        t: Var,
        f: &[f64],
    ) -> Result<Var> {
        if f.len() != self.classes {
            return Err(Error::contract(format!(
                "fusion gate expects {} frequencies, got {}",
                self.classes,
                f.len()
            )));
        }
        let fv = g.constant_vec(vec![f.len()], f.to_vec())?;
        let fb = g.broadcast_rows(fv, g.rows(h))?;
        let cat = g.concat_cols(&[h, t, fb])?;
        let pre = self.linear.forward(g, store, cat)?;
        Ok(g.sigmoid(pre))
    }
}

/// `Z = G ⊙ H + (1 − G) ⊙ T`.
pub fn fuse_local(
    g: &mut Graph,
    store: &ParamStore,
    h: Var,
    t: Var,
    f: &[f64],
    gate: &FusionGate,
) -> Result<Var> {
    if g.shape(h) != g.shape(t) {
        return Err(Error::shape(format!(
            "H {:?} and T {:?} differ",
            g.shape(h),
            g.shape(t)
        )));
    }
    let gv = gate.gate(g, store, h, t, f)?;
    let keep = g.one_minus(gv);
    let a = g.mul(gv, h)?;
    let b = g.mul(keep, t)?;
    g.add(a, b)
}

// ── the generator ───────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpegConfig {
    pub input_dim: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn: usize,
    pub window: WindowConfig,
    pub dual_branch: bool,
    pub frequency: bool,
}

#[derive(Clone, Debug)]
pub struct TailBranch {
    pub gate: Option<FrequencyGate>,
    pub encoder: BranchEncoder,
    pub fusion: FusionGate,
}

/// Input projection, local head/tail branches, fusion and global branch.
#[derive(Clone, Debug)]
pub struct Dpeg {
    pub cfg: DpegConfig,
    pub classes: usize,
    pub input: Linear,
    pub head: BranchEncoder,
    pub tail: Option<TailBranch>,
    pub global: BranchEncoder,
}

/// Intermediate tensors of one forward pass.
#[derive(Clone, Debug)]
pub struct DpegOutput {
    pub projected: Var,
    pub h_loc: Var,
    pub t_loc: Option<Var>,
    pub z_loc: Var,
    pub windows: Vec<Var>,
    pub embedding: Var,
}

impl Dpeg {
    /// `classes` is the length of the frequency vector this generator consumes.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: DpegConfig,
        classes: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.window.validate()?;
        if cfg.dim % 2 != 0 {
            return Err(Error::contract(format!(
                "embedding width {} must be even",
                cfg.dim
            )));
        }
        let input = Linear::new(
            store,
            &format!("{prefix}/input"),
            cfg.input_dim,
            cfg.dim,
            true,
            rng,
        )?;
        let head = BranchEncoder::new(
            store,
            &format!("{prefix}/head"),
            cfg.dim,
            cfg.heads,
            cfg.ffn,
            rng,
        )?;
        let tail = if cfg.dual_branch {
            let gate = if cfg.frequency {
                Some(FrequencyGate::new(
                    store,
                    &format!("{prefix}/freq_gate"),
                    classes,
                    cfg.dim,
                    rng,
                )?)
            } else {
                None
            };
            Some(TailBranch {
                gate,
                encoder: BranchEncoder::new(
                    store,
                    &format!("{prefix}/tail"),
                    cfg.dim,
                    cfg.heads,
                    cfg.ffn,
                    rng,
                )?,
                fusion: FusionGate::new(store, &format!("{prefix}/fusion"), cfg.dim, classes, rng)?,
            })
        } else {
            None
        };
        let global = BranchEncoder::new(
            store,
            &format!("{prefix}/global"),
            cfg.dim,
            cfg.heads,
            cfg.ffn,
            rng,
        )?;
        Ok(Self {
            cfg,
            classes,
            input,
            head,
            tail,
            global,
        })
    }

    /// Frequency vector fed to the fusion gate; uniform when frequency
    /// guidance is off.
    pub fn fusion_frequencies(&self, prior: &FrequencyPrior) -> Vec<f64> {
        if self.cfg.frequency {
            prior.f.clone()
        } else {
            vec![1.0 / self.classes as f64; self.classes]
        }
    }

    /// Head branch: within-frame attention over projected pair features.
    pub fn encode_local_head(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        layout: &ClipLayout,
    ) -> Result<Var> {
        self.head.forward(g, store, x, &layout.local_mask())
    }

    /// Tail branch: frequency correction, then its own encoder.
    pub fn encode_local_tail(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        layout: &ClipLayout,
        prior: &FrequencyPrior,
    ) -> Result<Var> {
        let tail = self
            .tail
            .as_ref()
            .ok_or_else(|| Error::contract("tail branch is disabled"))?;
        let gate = match &tail.gate {
            Some(gate) => gate.forward(g, store, prior)?,
            None => g.constant_vec(vec![self.cfg.dim], vec![0.5; self.cfg.dim])?,
        };
        let corrected = frequency_correct(g, x, gate)?;
        tail.encoder
            .forward(g, store, corrected, &layout.local_mask())
    }

    /// Global branch over each track, one pass per window.
    pub fn encode_global(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z_loc: Var,
        layout: &ClipLayout,
    ) -> Result<(Vec<Var>, Vec<Vec<f64>>)> {
        let pe = positional_encoding(&layout.frames, self.cfg.dim)?;
        let pe = g.constant(&pe);
        let zp = g.add(z_loc, pe)?;
        let (masks, weights) = layout.window_masks(&self.cfg.window)?;
        let outs = self.global.forward_multi(g, store, zp, &masks)?;
        Ok((outs, weights))
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        raw: Var,
        layout: &ClipLayout,
        prior: &FrequencyPrior,
    ) -> Result<DpegOutput> {
        if g.rows(raw) != layout.rows() {
            return Err(Error::shape(format!(
                "{} feature rows for {} layout rows",
                g.rows(raw),
                layout.rows()
            )));
        }
        if prior.num_classes() != self.classes {
            return Err(Error::contract(format!(
                "prior covers {} classes, generator expects {}",
                prior.num_classes(),
                self.classes
            )));
        }
        let x = self.input.forward(g, store, raw)?;
        let h_loc = self.encode_local_head(g, store, x, layout)?;
        let (t_loc, z_loc) = match &self.tail {
            Some(tail) => {
                let t = self.encode_local_tail(g, store, x, layout, prior)?;
                let f = self.fusion_frequencies(prior);
                let z = fuse_local(g, store, h_loc, t, &f, &tail.fusion)?;
                (Some(t), z)
            }
            None => (None, h_loc),
        };
        let (windows, weights) = self.encode_global(g, store, z_loc, layout)?;
        let embedding = aggregate_rows(g, &windows, &weights)?;
        Ok(DpegOutput {
            projected: x,
            h_loc,
            t_loc,
            z_loc,
            windows,
            embedding,
        })
    }
}

/// `Σ_w diag(weights[w]) · outs[w]`.
pub fn aggregate_rows(g: &mut Graph, outs: &[Var], weights: &[Vec<f64>]) -> Result<Var> {
    if outs.len() != weights.len() || outs.is_empty() {
        return Err(Error::contract(
            "one weight vector per window output required",
        ));
    }
    if outs.len() == 1 && weights[0].iter().all(|&w| w == 1.0) {
        return Ok(outs[0]);
    }
    let mut acc: Option<Var> = None;
    for (&o, w) in outs.iter().zip(weights) {
        let wv = g.constant_vec(vec![w.len()], w.clone())?;
        let term = g.mul_col(o, wv)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("non-empty"))
}
