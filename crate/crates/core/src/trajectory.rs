//! Token fields, trajectories across the temporal window and token selection
//! along them.
//!
//! Trajectory coordinates are 1-based feature-pixel positions `(x, y)` with
//! `x` the row in `[1, H]` and `y` the column in `[1, W]`. The centre of token
//! `(tr, tc)` of size `ts` is `(tr·ts + (ts+1)/2, tc·ts + (ts+1)/2)`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{Conv2d, Linear, ModelConfig, ResBlock, Similarity, Tensor};
use crate::par;

#[derive(Debug, Clone, PartialEq)]
pub struct TokenField {
    pub frame: usize,
    pub ht: usize,
    pub wt: usize,
    /// `[ht·wt, C]`, tokens in row-major grid order.
    pub tokens: Tensor,
}

impl TokenField {
    pub fn new(frame: usize, ht: usize, wt: usize, tokens: Tensor) -> Result<Self> {
        let (n, _) = tokens.dims2()?;
        if n != ht * wt {
            return invalid(format!("{n} tokens do not fill a {ht}x{wt} grid"));
        }
        Ok(TokenField {
            frame,
            ht,
            wt,
            tokens,
        })
    }

    pub fn len(&self) -> usize {
        self.ht * self.wt
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.tokens.dims()[1]
    }

    pub fn token(&self, i: usize) -> &[f32] {
        let c = self.channels();
        &self.tokens.data()[i * c..(i + 1) * c]
    }
}

/// Weights of the token generator: a convolution, residual blocks and the
/// patch projection.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerWeights {
    pub conv_in: Conv2d,
    pub res_blocks: Vec<ResBlock>,
    /// `C·ts² → C`.
    pub proj: Linear,
}

impl TokenizerWeights {
    pub fn zeros(config: &ModelConfig, in_channels: usize) -> Self {
        let c = config.channels;
        TokenizerWeights {
            conv_in: Conv2d::zeros(in_channels, c, 3),
            res_blocks: (0..config.n1_res_blocks).map(|_| ResBlock::zeros(c)).collect(),
            proj: Linear::zeros(c * config.token_size * config.token_size, c),
        }
    }
}

/// Cuts `[C, H, W]` into `ts × ts` patches, each flattened channel-major:
/// `[N, C·ts²]`.
pub fn patchify(feature: &Tensor, ts: usize) -> Result<Tensor> {
    let (c, h, w) = feature.dims3()?;
    if ts == 0 || h % ts != 0 || w % ts != 0 {
        return invalid(format!("{h}x{w} feature is not divisible into {ts}x{ts} patches"));
    }
    let (ht, wt) = (h / ts, w / ts);
    let d = c * ts * ts;
    let src = feature.data();
    let mut out = vec![0.0f32; ht * wt * d];
    for (i, row) in out.chunks_mut(d).enumerate() {
        let (tr, tc) = (i / wt, i % wt);
        for ch in 0..c {
            for dy in 0..ts {
                for dx in 0..ts {
                    row[ch * ts * ts + dy * ts + dx] =
                        src[(ch * h + tr * ts + dy) * w + tc * ts + dx];
                }
            }
        }
    }
    Tensor::new(vec![ht * wt, d], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, channels: usize, ht: usize, wt: usize, ts: usize) -> Result<Tensor> {
    let (n, d) = patches.dims2()?;
    if n != ht * wt || d != channels * ts * ts {
        return invalid(format!(
            "patch tensor [{n}, {d}] does not match a {ht}x{wt} grid of {channels}x{ts}x{ts} patches"
        ));
    }
    let (h, w) = (ht * ts, wt * ts);
    let src = patches.data();
    let mut out = vec![0.0f32; channels * h * w];
    for i in 0..n {
        let (tr, tc) = (i / wt, i % wt);
        for ch in 0..channels {
            for dy in 0..ts {
                for dx in 0..ts {
                    out[(ch * h + tr * ts + dy) * w + tc * ts + dx] =
                        src[i * d + ch * ts * ts + dy * ts + dx];
                }
            }
        }
    }
    Tensor::new(vec![channels, h, w], out)
}

/// Runs the feature extractor on one frame and projects its patches to tokens.
pub fn generate_tokens(
    frame: &Tensor,
    frame_index: usize,
    config: &ModelConfig,
    weights: &TokenizerWeights,
) -> Result<(Tensor, TokenField)> {
    let (_, h, w) = frame.dims3()?;
    let ts = config.token_size;
    if ts == 0 || h % ts != 0 || w % ts != 0 {
        return invalid(format!("frame {h}x{w} is not divisible into {ts}x{ts} tokens"));
    }
    let mut feat = weights.conv_in.forward(frame)?;
    for blk in &weights.res_blocks {
        feat = blk.forward(&feat)?;
    }
    let tokens = weights.proj.forward(&patchify(&feat, ts)?)?;
    let field = TokenField::new(frame_index, h / ts, w / ts, tokens)?;
    Ok((feat, field))
}

pub fn token_center(index: usize, ts: usize) -> f32 {
    (index * ts) as f32 + (ts as f32 + 1.0) / 2.0
}

/// Nearest token index along one axis for a 1-based coordinate.
pub fn nearest_token(coord: f32, ts: usize, count: usize) -> usize {
    let u = ((coord - (ts as f32 + 1.0) / 2.0) / ts as f32).round();
    u.clamp(0.0, (count - 1) as f32) as usize
}

/// Per-point coordinate histories over `slots` consecutive frames ending at
/// `end_frame`. Slot `slots - 1` is the current frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySet {
    /// Point grid (token grid for LR trajectories).
    pub rows: usize,
    pub cols: usize,
    /// Spatial extent in pixels.
    pub height: usize,
    pub width: usize,
    pub slots: usize,
    pub end_frame: usize,
    /// `coords[p * slots + k] = (x, y)`.
    pub coords: Vec<[f32; 2]>,
}

impl TrajectorySet {
    /// Trajectories that stand still at their token centres: the cold start
    /// where earlier frames are copies of the first one.
    pub fn stationary(
        rows: usize,
        cols: usize,
        token_size: usize,
        slots: usize,
        end_frame: usize,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 || slots == 0 || token_size == 0 {
            return invalid("trajectory set needs a non-empty grid and at least one slot");
        }
        let mut coords = Vec::with_capacity(rows * cols * slots);
        for p in 0..rows * cols {
            let c = [token_center(p / cols, token_size), token_center(p % cols, token_size)];
            coords.extend(std::iter::repeat_n(c, slots));
        }
        Ok(TrajectorySet {
            rows,
            cols,
            height: rows * token_size,
            width: cols * token_size,
            slots,
            end_frame,
            coords,
        })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coord(&self, point: usize, slot: usize) -> [f32; 2] {
        self.coords[point * self.slots + slot]
    }

    pub fn in_bounds(&self) -> bool {
        self.coords.iter().all(|&[x, y]| {
            x >= 1.0 && x <= self.height as f32 && y >= 1.0 && y <= self.width as f32
        })
    }

    /// True when every endpoint sits on its token centre.
    pub fn anchored(&self, token_size: usize) -> bool {
        (0..self.len()).all(|p| {
            self.coord(p, self.slots - 1)
                == [
                    token_center(p / self.cols, token_size),
                    token_center(p % self.cols, token_size),
                ]
        })
    }
}

fn bilinear(plane: &[f32], h: usize, w: usize, r: f32, c: f32) -> f32 {
    let r = r.clamp(0.0, (h - 1) as f32);
    let c = c.clamp(0.0, (w - 1) as f32);
    let (r0, c0) = (r.floor() as usize, c.floor() as usize);
    let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
    let (fr, fc) = (r - r0 as f32, c - c0 as f32);
    let top = plane[r0 * w + c0] * (1.0 - fc) + plane[r0 * w + c1] * fc;
    let bot = plane[r1 * w + c0] * (1.0 - fc) + plane[r1 * w + c1] * fc;
    top * (1.0 - fr) + bot * fr
}

/// Advances trajectories by one frame.
///
/// `flow` is `[2, H, W]` (row then column displacement) pointing from frame
/// `t` into frame `t - 1`. Each new endpoint is a token centre; it is displaced
/// by the flow sampled there, and the older history is read from `prev` at the
/// displaced point by bilinear interpolation of the stored offsets from token
/// centres (edge tokens extend outward), then clamped to the frame.
pub fn propagate_trajectories(
    prev: &TrajectorySet,
    flow: &Tensor,
    token_size: usize,
) -> Result<TrajectorySet> {
    let (two, h, w) = flow.dims3()?;
    if two != 2 || h != prev.height || w != prev.width {
        return invalid(format!(
            "flow dims {:?} do not match a {}x{} frame",
            flow.dims(),
            prev.height,
            prev.width
        ));
    }
    if prev.height != prev.rows * token_size || prev.width != prev.cols * token_size {
        return invalid("trajectory grid does not match the token size");
    }
    let (rows, cols, slots) = (prev.rows, prev.cols, prev.slots);
    let fr = &flow.data()[..h * w];
    let fc = &flow.data()[h * w..];
    let half = (token_size as f32 + 1.0) / 2.0;
    let tsf = token_size as f32;
    // offsets of stored coordinates from their own token centre, per slot
    let mut off_x = vec![0.0f32; slots * rows * cols];
    let mut off_y = vec![0.0f32; slots * rows * cols];
    for p in 0..rows * cols {
        let cx = token_center(p / cols, token_size);
        let cy = token_center(p % cols, token_size);
        for k in 0..slots {
            let [x, y] = prev.coord(p, k);
            off_x[k * rows * cols + p] = x - cx;
            off_y[k * rows * cols + p] = y - cy;
        }
    }
    let per_point = par::map_range(rows * cols, |p| {
        let cx = token_center(p / cols, token_size);
        let cy = token_center(p % cols, token_size);
        let dx = bilinear(fr, h, w, cx - 1.0, cy - 1.0);
        let dy = bilinear(fc, h, w, cx - 1.0, cy - 1.0);
        let (px, py) = (cx + dx, cy + dy);
        let (u, v) = ((px - half) / tsf, (py - half) / tsf);
        let mut hist = Vec::with_capacity(slots);
        for k in 0..slots - 1 {
            let plane = (k + 1) * rows * cols..(k + 2) * rows * cols;
            let ox = bilinear(&off_x[plane.clone()], rows, cols, u, v);
            let oy = bilinear(&off_y[plane], rows, cols, u, v);
            hist.push([
                (px + ox).clamp(1.0, h as f32),
                (py + oy).clamp(1.0, w as f32),
            ]);
        }
        hist.push([cx, cy]);
        hist
    });
    Ok(TrajectorySet {
        rows,
        cols,
        height: h,
        width: w,
        slots,
        end_frame: prev.end_frame + 1,
        coords: per_point.into_iter().flatten().collect(),
    })
}

const BM_PATCH: isize = 8;

/// Exhaustive block matching. For every pixel of `b` returns the displacement
/// `(dy, dx)` into `a` whose 8×8 patch (rows `y-4..y+3`, edge clamped) has the
/// smallest sum of absolute differences. Ties prefer the shorter displacement,
/// then the lexicographically smaller `(dy, dx)`.
pub fn block_matching_flow(a: &Tensor, b: &Tensor, radius: usize) -> Result<Tensor> {
    a.same_dims(b)?;
    let (c, h, w) = a.dims3()?;
    let r = radius as isize;
    let (hi, wi) = (h as isize, w as isize);
    let at = |img: &[f32], ch: usize, y: isize, x: isize| {
        img[(ch * h + y.clamp(0, hi - 1) as usize) * w + x.clamp(0, wi - 1) as usize]
    };
    let mut offsets: Vec<(isize, isize)> = Vec::with_capacity((2 * radius + 1).pow(2));
    for dy in -r..=r {
        for dx in -r..=r {
            offsets.push((dy, dx));
        }
    }
    offsets.sort_by_key(|&(dy, dx)| (dy * dy + dx * dx, dy, dx));
    let (ad, bd) = (a.data(), b.data());
    let best = par::map_range(h * w, |p| {
        let (y, x) = ((p / w) as isize, (p % w) as isize);
        let mut best = (f64::INFINITY, 0isize, 0isize);
        for &(dy, dx) in &offsets {
            let mut sad = 0.0f64;
            for ch in 0..c {
                for py in -BM_PATCH / 2..BM_PATCH / 2 {
                    for px in -BM_PATCH / 2..BM_PATCH / 2 {
                        let vb = at(bd, ch, y + py, x + px);
                        let va = at(ad, ch, y + dy + py, x + dx + px);
                        sad += (vb - va).abs() as f64;
                    }
                }
            }
            if sad < best.0 {
                best = (sad, dy, dx);
            }
        }
        (best.1 as f32, best.2 as f32)
    });
    let mut out = vec![0.0f32; 2 * h * w];
    for (p, &(dy, dx)) in best.iter().enumerate() {
        out[p] = dy;
        out[h * w + p] = dx;
    }
    Tensor::new(vec![2, h, w], out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub s: usize,
    pub channels: usize,
    /// Per token, frame offsets `h_j = t - k` in ranking order.
    pub indices: Vec<Vec<usize>>,
    /// Per token, similarity scores aligned with `indices`.
    pub scores: Vec<Vec<f64>>,
    /// Per token, the token index inside each selected frame.
    pub source_tokens: Vec<Vec<usize>>,
    /// `[N, s, C]`, selected token vectors in ranking order.
    #[serde(skip)]
    pub tokens: Option<Tensor>,
}

impl SelectionResult {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Selected vectors reordered oldest frame first: `[N, s, C]`.
    pub fn context_by_frame(&self) -> Result<Tensor> {
        let (n, s, c) = (self.len(), self.s, self.channels);
        let src = match &self.tokens {
            Some(t) => t,
            None if s == 0 => return Ok(Tensor::zeros(&[n, 0, c])),
            None => return invalid("selection carries no token vectors"),
        };
        let mut out = vec![0.0f32; n * s * c];
        for i in 0..n {
            for (slot, j) in self.frame_order(i).into_iter().enumerate() {
                out[(i * s + slot) * c..(i * s + slot + 1) * c]
                    .copy_from_slice(&src.data()[(i * s + j) * c..(i * s + j + 1) * c]);
            }
        }
        Tensor::new(vec![n, s, c], out)
    }

    /// Ranking positions of token `i`'s selections, oldest frame first.
    pub fn frame_order(&self, i: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.indices[i].len()).collect();
        order.sort_by_key(|&j| std::cmp::Reverse(self.indices[i][j]));
        order
    }
}

fn dot_norms(q: &[f32], v: &[f32]) -> (f64, f64, f64) {
    let (mut d, mut nq, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in q.iter().zip(v) {
        d += a as f64 * b as f64;
        nq += a as f64 * a as f64;
        nv += b as f64 * b as f64;
    }
    (d, nq, nv)
}

pub fn similarity(q: &[f32], v: &[f32], mode: Similarity) -> f64 {
    let (d, nq, nv) = dot_norms(q, v);
    if nq == 0.0 || nv == 0.0 {
        return 0.0;
    }
    match mode {
        Similarity::Cosine => d / (nq.sqrt() * nv.sqrt()),
        Similarity::SquaredNorm => d / (nq * nv),
    }
}

/// Picks, for every token of `q`, the `s` most similar tokens met along its
/// trajectory in the previous frames.
///
/// `pool` lists the previous frames oldest first and must hold exactly
/// `traj.slots - 1` fields; pool entry `j` lies on trajectory slot `j` and has
/// frame offset `h = pool.len() - j`. Ties go to the more recent frame.
pub fn select_tokens(
    q: &TokenField,
    pool: &[TokenField],
    traj: &TrajectorySet,
    s: usize,
    mode: Similarity,
) -> Result<SelectionResult> {
    let t = pool.len();
    if traj.slots != t + 1 {
        return invalid(format!(
            "trajectories cover {} frames but the pool has {t} previous frames",
            traj.slots
        ));
    }
    if s > t {
        return invalid(format!("cannot select {s} tokens from {t} previous frames"));
    }
    if traj.rows != q.ht || traj.cols != q.wt {
        return invalid("trajectory grid does not match the token grid");
    }
    let c = q.channels();
    for f in pool {
        if f.ht != q.ht || f.wt != q.wt || f.channels() != c {
            return invalid("token fields in the pool differ in shape");
        }
    }
    if q.ht == 0 || q.wt == 0 {
        return invalid("empty token field");
    }
    let ts = (traj.height / q.ht).max(1);
    let per_token = par::map_range(q.len(), |i| {
        let qv = q.token(i);
        let mut cands: Vec<(f64, usize, usize)> = pool
            .iter()
            .enumerate()
            .map(|(j, f)| {
                let [x, y] = traj.coord(i, j);
                let tok = nearest_token(x, ts, q.ht) * q.wt + nearest_token(y, ts, q.wt);
                (similarity(qv, f.token(tok), mode), t - j, tok)
            })
            .collect();
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        cands.truncate(s);
        cands
    });
    let n = q.len();
    let mut out = SelectionResult {
        s,
        channels: c,
        indices: Vec::with_capacity(n),
        scores: Vec::with_capacity(n),
        source_tokens: Vec::with_capacity(n),
        tokens: None,
    };
    let mut vecs = vec![0.0f32; n * s * c];
    for (i, cands) in per_token.into_iter().enumerate() {
        for (j, &(_, h, tok)) in cands.iter().enumerate() {
            vecs[(i * s + j) * c..(i * s + j + 1) * c].copy_from_slice(pool[t - h].token(tok));
        }
        out.indices.push(cands.iter().map(|x| x.1).collect());
        out.scores.push(cands.iter().map(|x| x.0).collect());
        out.source_tokens.push(cands.iter().map(|x| x.2).collect());
    }
    out.tokens = Some(Tensor::new(vec![n, s, c], vecs)?);
    Ok(out)
}
