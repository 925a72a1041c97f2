//! Selective scan (S6) with its reverse pass, the interleaved spatio-temporal
//! sequence builder and the windowed SSM block.
//!
//! Per step `ℓ` with input `u` (width `C`):
//!
//! ```text
//! Δ = softplus(W_Δ u + b_Δ)          (C)
//! B = W_B u,  Cₒ = W_C u             (N each)
//! h[c,n] = exp(Δ[c]·A[c,n])·h[c,n] + Δ[c]·B[n]·u[c]
//! y[c]   = Σₙ Cₒ[n]·h[c,n] + D[c]·u[c]
//! ```

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{LayerNorm, Tensor};
use crate::par;
use crate::scanorder::Cell;

#[derive(Debug, Clone, PartialEq)]
pub struct SelectiveScanParams<F = f32> {
    pub channels: usize,
    pub state: usize,
    /// `[C, C]`
    pub w_delta: Vec<F>,
    /// `[C]`
    pub b_delta: Vec<F>,
    /// `[N, C]`
    pub w_b: Vec<F>,
    /// `[N, C]`
    pub w_c: Vec<F>,
    /// `[C, N]`
    pub a: Vec<F>,
    /// `[C]`
    pub d: Vec<F>,
}

impl<F: Float> SelectiveScanParams<F> {
    pub fn zeros(channels: usize, state: usize) -> Self {
        let z = F::zero();
        SelectiveScanParams {
            channels,
            state,
            w_delta: vec![z; channels * channels],
            b_delta: vec![z; channels],
            w_b: vec![z; state * channels],
            w_c: vec![z; state * channels],
            a: vec![z; channels * state],
            d: vec![z; channels],
        }
    }

    /// `A[c, n] = -(n + 1)`.
    pub fn init_a(&mut self) {
        for c in 0..self.channels {
            for n in 0..self.state {
                self.a[c * self.state + n] = -F::from(n + 1).unwrap();
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.w_delta.len() + self.b_delta.len() + self.w_b.len() + self.w_c.len() + self.a.len() + self.d.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (c, n) = (self.channels, self.state);
        let shapes = [
            ("w_delta", self.w_delta.len(), c * c),
            ("b_delta", self.b_delta.len(), c),
            ("w_b", self.w_b.len(), n * c),
            ("w_c", self.w_c.len(), n * c),
            ("a", self.a.len(), c * n),
            ("d", self.d.len(), c),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return invalid(format!("{name} has {got} values, expected {want}"));
            }
        }
        let finite = [
            &self.w_delta,
            &self.b_delta,
            &self.w_b,
            &self.w_c,
            &self.a,
            &self.d,
        ]
        .iter()
        .all(|v| v.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::InvalidArgument("non-finite selective-scan parameter".into()));
        }
        Ok(())
    }

    pub fn cast<G: Float>(&self) -> SelectiveScanParams<G> {
        let cv = |v: &Vec<F>| v.iter().map(|x| G::from(*x).unwrap()).collect();
        SelectiveScanParams {
            channels: self.channels,
            state: self.state,
            w_delta: cv(&self.w_delta),
            b_delta: cv(&self.b_delta),
            w_b: cv(&self.w_b),
            w_c: cv(&self.w_c),
            a: cv(&self.a),
            d: cv(&self.d),
        }
    }
}

impl SelectiveScanParams<f32> {
    /// Small random projections, `A = -(1..N)`, `D = 1`.
    pub fn random(channels: usize, state: usize, rng: &mut impl Rng) -> Self {
        let mut p = SelectiveScanParams::zeros(channels, state);
        let bound = 1.0 / (channels as f32).sqrt();
        for v in p
            .w_delta
            .iter_mut()
            .chain(p.w_b.iter_mut())
            .chain(p.w_c.iter_mut())
        {
            *v = rng.random_range(-bound..bound);
        }
        for v in p.b_delta.iter_mut() {
            *v = rng.random_range(-1.0..0.0);
        }
        p.init_a();
        p.d.fill(1.0);
        p
    }

    pub fn seeded(channels: usize, state: usize, seed: u64) -> Self {
        Self::random(channels, state, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub const TENSOR_NAMES: [&'static str; 6] = ["w_delta", "b_delta", "w_b", "w_c", "a", "d"];

    pub fn tensor_dims(channels: usize, state: usize) -> [Vec<usize>; 6] {
        let (c, n) = (channels, state);
        [vec![c, c], vec![c], vec![n, c], vec![n, c], vec![c, n], vec![c]]
    }

    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        let dims = Self::tensor_dims(self.channels, self.state);
        let vals = [&self.w_delta, &self.b_delta, &self.w_b, &self.w_c, &self.a, &self.d];
        Self::TENSOR_NAMES
            .iter()
            .zip(dims)
            .zip(vals)
            .map(|((n, d), v)| (n.to_string(), Tensor::new(d, v.clone()).expect("consistent dims")))
            .collect()
    }

    /// Inverse of [`Self::to_tensors`]; tensors in `TENSOR_NAMES` order.
    pub fn from_tensors(t: &[Tensor]) -> Result<Self> {
        if t.len() != 6 {
            return invalid("selective-scan parameters need 6 tensors");
        }
        let (c, n) = t[4].dims2()?;
        for (k, d) in Self::tensor_dims(c, n).iter().enumerate() {
            if t[k].dims() != d.as_slice() {
                return Err(Error::Format(format!(
                    "`{}` has dims {:?}, expected {d:?}",
                    Self::TENSOR_NAMES[k],
                    t[k].dims()
                )));
            }
        }
        let p = SelectiveScanParams {
            channels: c,
            state: n,
            w_delta: t[0].data().to_vec(),
            b_delta: t[1].data().to_vec(),
            w_b: t[2].data().to_vec(),
            w_c: t[3].data().to_vec(),
            a: t[4].data().to_vec(),
            d: t[5].data().to_vec(),
        };
        p.validate()?;
        Ok(p)
    }
}

fn softplus<F: Float>(z: F) -> F {
    if z > F::from(20.0).unwrap() {
        z
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid<F: Float>(z: F) -> F {
    F::one() / (F::one() + (-z).exp())
}

/// Intermediate values of a forward pass, needed by the reverse pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanCache<F = f32> {
    pub len: usize,
    /// `[L, C]` pre-activation of Δ.
    pub z: Vec<F>,
    /// `[L, C]`
    pub delta: Vec<F>,
    /// `[L, N]`
    pub b: Vec<F>,
    /// `[L, N]`
    pub c: Vec<F>,
    /// `[L + 1, C, N]`, `h[0] = 0`.
    pub h: Vec<F>,
}

fn matvec<F: Float>(w: &[F], x: &[F], rows: usize, cols: usize, out: &mut [F]) {
    for r in 0..rows {
        let mut acc = F::zero();
        for k in 0..cols {
            acc = acc + w[r * cols + k] * x[k];
        }
        out[r] = acc;
    }
}

fn scan_impl<F: Float>(
    p: &SelectiveScanParams<F>,
    u: &[F],
    len: usize,
    keep: bool,
) -> Result<(Vec<F>, Option<ScanCache<F>>)> {
    p.validate()?;
    let (ch, ns) = (p.channels, p.state);
    if u.len() != len * ch {
        return invalid(format!(
            "sequence has {} values, expected {len} x {ch}",
            u.len()
        ));
    }
    let mut y = vec![F::zero(); len * ch];
    let mut h = vec![F::zero(); ch * ns];
    let mut cache = keep.then(|| ScanCache {
        len,
        z: vec![F::zero(); len * ch],
        delta: vec![F::zero(); len * ch],
        b: vec![F::zero(); len * ns],
        c: vec![F::zero(); len * ns],
        h: vec![F::zero(); (len + 1) * ch * ns],
    });
    let mut z = vec![F::zero(); ch];
    let mut bv = vec![F::zero(); ns];
    let mut cv = vec![F::zero(); ns];
    for l in 0..len {
        let ul = &u[l * ch..(l + 1) * ch];
        matvec(&p.w_delta, ul, ch, ch, &mut z);
        matvec(&p.w_b, ul, ns, ch, &mut bv);
        matvec(&p.w_c, ul, ns, ch, &mut cv);
        let yl = &mut y[l * ch..(l + 1) * ch];
        for c in 0..ch {
            z[c] = z[c] + p.b_delta[c];
            let dt = softplus(z[c]);
            let mut acc = F::zero();
            for n in 0..ns {
                let abar = (dt * p.a[c * ns + n]).exp();
                let hv = abar * h[c * ns + n] + dt * bv[n] * ul[c];
                h[c * ns + n] = hv;
                acc = acc + cv[n] * hv;
            }
            yl[c] = acc + p.d[c] * ul[c];
            if let Some(k) = cache.as_mut() {
                k.z[l * ch + c] = z[c];
                k.delta[l * ch + c] = dt;
            }
        }
        if let Some(k) = cache.as_mut() {
            k.b[l * ns..(l + 1) * ns].copy_from_slice(&bv);
            k.c[l * ns..(l + 1) * ns].copy_from_slice(&cv);
            k.h[(l + 1) * ch * ns..(l + 2) * ch * ns].copy_from_slice(&h);
        }
    }
    Ok((y, cache))
}

pub fn scan_forward<F: Float>(p: &SelectiveScanParams<F>, u: &[F], len: usize) -> Result<(Vec<F>, ScanCache<F>)> {
    let (y, cache) = scan_impl(p, u, len, true)?;
    Ok((y, cache.expect("cache requested")))
}

/// Forward pass without keeping intermediates.
pub fn scan_apply<F: Float>(p: &SelectiveScanParams<F>, u: &[F], len: usize) -> Result<Vec<F>> {
    Ok(scan_impl(p, u, len, false)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanGrads<F = f32> {
    /// `[L, C]`
    pub du: Vec<F>,
    pub params: SelectiveScanParams<F>,
}

pub fn scan_backward<F: Float>(
    p: &SelectiveScanParams<F>,
    u: &[F],
    cache: &ScanCache<F>,
    dy: &[F],
) -> Result<ScanGrads<F>> {
    let (ch, ns, len) = (p.channels, p.state, cache.len);
    if u.len() != len * ch || dy.len() != len * ch || cache.h.len() != (len + 1) * ch * ns {
        return invalid("cache, input and upstream gradient lengths disagree");
    }
    let mut g = SelectiveScanParams::zeros(ch, ns);
    let mut du = vec![F::zero(); len * ch];
    let mut dh = vec![F::zero(); ch * ns];
    let mut ddelta = vec![F::zero(); ch];
    let mut db = vec![F::zero(); ns];
    let mut dc = vec![F::zero(); ns];
    for l in (0..len).rev() {
        let ul = &u[l * ch..(l + 1) * ch];
        let dyl = &dy[l * ch..(l + 1) * ch];
        let bl = &cache.b[l * ns..(l + 1) * ns];
        let cl = &cache.c[l * ns..(l + 1) * ns];
        let h_now = &cache.h[(l + 1) * ch * ns..(l + 2) * ch * ns];
        let h_prev = &cache.h[l * ch * ns..(l + 1) * ch * ns];
        let dul = &mut du[l * ch..(l + 1) * ch];
        ddelta.fill(F::zero());
        db.fill(F::zero());
        dc.fill(F::zero());
        for c in 0..ch {
            let dt = cache.delta[l * ch + c];
            g.d[c] = g.d[c] + dyl[c] * ul[c];
            dul[c] = dul[c] + dyl[c] * p.d[c];
            for n in 0..ns {
                let i = c * ns + n;
                dc[n] = dc[n] + dyl[c] * h_now[i];
                let dhi = dh[i] + dyl[c] * cl[n];
                let abar = (dt * p.a[i]).exp();
                let dabar = dhi * h_prev[i];
                ddelta[c] = ddelta[c] + dabar * abar * p.a[i] + dhi * bl[n] * ul[c];
                g.a[i] = g.a[i] + dabar * abar * dt;
                db[n] = db[n] + dhi * dt * ul[c];
                dul[c] = dul[c] + dhi * dt * bl[n];
                dh[i] = dhi * abar;
            }
        }
        for (c, &dd) in ddelta.iter().enumerate() {
            let dz = dd * sigmoid(cache.z[l * ch + c]);
            g.b_delta[c] = g.b_delta[c] + dz;
            for k in 0..ch {
                g.w_delta[c * ch + k] = g.w_delta[c * ch + k] + dz * ul[k];
                dul[k] = dul[k] + p.w_delta[c * ch + k] * dz;
            }
        }
        for n in 0..ns {
            for k in 0..ch {
                g.w_b[n * ch + k] = g.w_b[n * ch + k] + db[n] * ul[k];
                g.w_c[n * ch + k] = g.w_c[n * ch + k] + dc[n] * ul[k];
                dul[k] = dul[k] + p.w_b[n * ch + k] * db[n] + p.w_c[n * ch + k] * dc[n];
            }
        }
    }
    Ok(ScanGrads { du, params: g })
}

/// `sequence` is `[L, C]`.
pub fn selective_scan_forward(
    params: &SelectiveScanParams<f32>,
    sequence: &Tensor,
) -> Result<(Tensor, ScanCache<f32>)> {
    let (len, c) = sequence.dims2()?;
    if len == 0 || c != params.channels {
        return invalid(format!(
            "sequence [{len}, {c}] does not fit a {}-channel scan",
            params.channels
        ));
    }
    let (y, cache) = scan_forward(params, sequence.data(), len)?;
    Ok((Tensor::new(vec![len, c], y)?, cache))
}

pub fn selective_scan_backward(
    params: &SelectiveScanParams<f32>,
    sequence: &Tensor,
    cache: &ScanCache<f32>,
    upstream: &Tensor,
) -> Result<ScanGrads<f32>> {
    sequence.same_dims(upstream)?;
    scan_backward(params, sequence.data(), cache, upstream.data())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub instances: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compares the reverse pass against central differences on random
/// instances. Everything runs in f64.
pub fn grad_check(instances: usize, len: usize, seed: u64, step: f64, tolerance: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for _ in 0..instances {
        let ch = rng.random_range(1..=4usize);
        let ns = rng.random_range(1..=4usize);
        let mut p = SelectiveScanParams::<f64>::zeros(ch, ns);
        for v in p
            .w_delta
            .iter_mut()
            .chain(p.w_b.iter_mut())
            .chain(p.w_c.iter_mut())
            .chain(p.b_delta.iter_mut())
            .chain(p.d.iter_mut())
        {
            *v = rng.random_range(-0.8..0.8);
        }
        for v in p.a.iter_mut() {
            *v = -rng.random_range(0.2..2.0);
        }
        let u: Vec<f64> = (0..len * ch).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gy: Vec<f64> = (0..len * ch).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |p: &SelectiveScanParams<f64>, u: &[f64]| -> Result<f64> {
            let y = scan_apply(p, u, len)?;
            Ok(y.iter().zip(&gy).map(|(a, b)| a * b).sum())
        };
        let (_, cache) = scan_forward(&p, &u, len)?;
        let grads = scan_backward(&p, &u, &cache, &gy)?;

        let mut compare = |analytic: f64, numeric: f64| {
            worst = worst.max(relative_error(analytic, numeric));
            checked += 1;
        };
        for i in 0..u.len() {
            let mut up = u.clone();
            up[i] += step;
            let mut dn = u.clone();
            dn[i] -= step;
            let num = (objective(&p, &up)? - objective(&p, &dn)?) / (2.0 * step);
            compare(grads.du[i], num);
        }
        type Field = fn(&mut SelectiveScanParams<f64>) -> &mut Vec<f64>;
        let fields: [(Field, &Vec<f64>); 6] = [
            (|q| &mut q.w_delta, &grads.params.w_delta),
            (|q| &mut q.b_delta, &grads.params.b_delta),
            (|q| &mut q.w_b, &grads.params.w_b),
            (|q| &mut q.w_c, &grads.params.w_c),
            (|q| &mut q.a, &grads.params.a),
            (|q| &mut q.d, &grads.params.d),
        ];
        for (field, analytic) in fields {
            for (i, &a) in analytic.iter().enumerate() {
                let mut up = p.clone();
                field(&mut up)[i] += step;
                let mut dn = p.clone();
                field(&mut dn)[i] -= step;
                let num = (objective(&up, &u)? - objective(&dn, &u)?) / (2.0 * step);
                compare(a, num);
            }
        }
    }
    Ok(GradCheckReport {
        instances,
        checked,
        max_rel_error: worst,
        tolerance,
        pass: worst < tolerance,
    })
}

/// Interleaved visit order of one window: for every spatial cell, the `s`
/// selected tokens oldest first, then the current token (slot `s`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanSequence {
    pub s: usize,
    /// `(token-grid cell, slot)` per sequence position.
    pub ordering: Vec<(Cell, usize)>,
    /// `(token index, slot)` per sequence position.
    pub provenance: Vec<(usize, usize)>,
}

impl ScanSequence {
    pub fn len(&self) -> usize {
        self.ordering.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ordering.is_empty()
    }

    pub fn is_bijection(&self) -> bool {
        let mut seen = std::collections::HashSet::with_capacity(self.len());
        self.ordering.iter().all(|&(cell, slot)| slot <= self.s && seen.insert((cell, slot)))
    }
}

pub fn ss3d_ordering(cells: &[Cell], wt: usize, s: usize) -> ScanSequence {
    let mut ordering = Vec::with_capacity(cells.len() * (s + 1));
    let mut provenance = Vec::with_capacity(cells.len() * (s + 1));
    for &cell in cells {
        for slot in 0..=s {
            ordering.push((cell, slot));
            provenance.push((cell.0 * wt + cell.1, slot));
        }
    }
    ScanSequence {
        s,
        ordering,
        provenance,
    }
}

/// Collects `[L, C]` from current tokens `q` (`[N, C]`) and context `ctx`
/// (`[N, s, C]`, oldest frame first).
pub fn gather(seq: &ScanSequence, q: &Tensor, ctx: &Tensor) -> Result<Tensor> {
    let (n, c) = q.dims2()?;
    let (cn, s, cc) = ctx.dims3()?;
    if cn != n || cc != c || s != seq.s {
        return invalid(format!(
            "context {:?} does not match {n} tokens of width {c} with s = {}",
            ctx.dims(),
            seq.s
        ));
    }
    let mut out = Vec::with_capacity(seq.len() * c);
    for &(tok, slot) in &seq.provenance {
        if tok >= n {
            return invalid(format!("sequence refers to token {tok} of {n}"));
        }
        let row = if slot == s {
            &q.data()[tok * c..(tok + 1) * c]
        } else {
            &ctx.data()[(tok * s + slot) * c..(tok * s + slot + 1) * c]
        };
        out.extend_from_slice(row);
    }
    Tensor::new(vec![seq.len(), c], out)
}

/// Writes sequence rows back to their origin, into `q` and `ctx`.
pub fn scatter_into(seq: &ScanSequence, data: &Tensor, q: &mut Tensor, ctx: &mut Tensor) -> Result<()> {
    let (len, c) = data.dims2()?;
    if len != seq.len() {
        return invalid("sequence length mismatch");
    }
    let s = seq.s;
    for (pos, &(tok, slot)) in seq.provenance.iter().enumerate() {
        let row = &data.data()[pos * c..(pos + 1) * c];
        if slot == s {
            q.data_mut()[tok * c..(tok + 1) * c].copy_from_slice(row);
        } else {
            ctx.data_mut()[(tok * s + slot) * c..(tok * s + slot + 1) * c].copy_from_slice(row);
        }
    }
    Ok(())
}

/// Sequence of one window with its gathered rows.
pub fn build_ss3d_sequence(
    cells: &[Cell],
    wt: usize,
    q: &Tensor,
    selection: &crate::trajectory::SelectionResult,
) -> Result<(ScanSequence, Tensor)> {
    let (n, _) = q.dims2()?;
    if selection.len() != n {
        return invalid(format!(
            "selection covers {} tokens, the field has {n}",
            selection.len()
        ));
    }
    let ctx = selection.context_by_frame()?;
    let seq = ss3d_ordering(cells, wt, selection.s);
    let data = gather(&seq, q, &ctx)?;
    Ok((seq, data))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsmBlockParams {
    pub norm: LayerNorm,
    pub scan: SelectiveScanParams<f32>,
}

impl SsmBlockParams {
    pub fn zeros(channels: usize, state: usize) -> Self {
        SsmBlockParams {
            norm: LayerNorm::identity(channels),
            scan: SelectiveScanParams::zeros(channels, state),
        }
    }

    pub fn param_count(&self) -> usize {
        self.norm.gamma.len() + self.norm.beta.len() + self.scan.param_count()
    }
}

/// LN, per-window interleaved scan, current-token outputs added back to the
/// input. `plan` lists each window's token cells in scan order and must cover
/// the `[N, C]` grid of width `wt` exactly once.
pub fn ssm_block(
    tokens: &Tensor,
    ctx: &Tensor,
    plan: &[Vec<Cell>],
    wt: usize,
    params: &SsmBlockParams,
) -> Result<Tensor> {
    let (n, c) = tokens.dims2()?;
    let (_, s, _) = ctx.dims3()?;
    if plan.iter().map(Vec::len).sum::<usize>() != n {
        return invalid("scan plan does not cover the token grid");
    }
    let qn = params.norm.forward(tokens)?;
    let cn = if s > 0 {
        params.norm.forward(ctx)?
    } else {
        ctx.clone()
    };
    let per_window = par::map_slice(plan, |cells| -> Result<Vec<(usize, Vec<f32>)>> {
        let seq = ss3d_ordering(cells, wt, s);
        let data = gather(&seq, &qn, &cn)?;
        let y = scan_apply(&params.scan, data.data(), seq.len())?;
        Ok(seq
            .provenance
            .iter()
            .enumerate()
            .filter(|(_, &(_, slot))| slot == s)
            .map(|(pos, &(tok, _))| (tok, y[pos * c..(pos + 1) * c].to_vec()))
            .collect())
    });
    let mut out = tokens.clone();
    let mut seen = vec![false; n];
    for window in per_window {
        for (tok, row) in window? {
            if seen[tok] {
                return invalid(format!("token {tok} is scanned twice"));
            }
            seen[tok] = true;
            for (o, v) in out.data_mut()[tok * c..(tok + 1) * c].iter_mut().zip(row) {
                *o += v;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scanorder::{window_plan, ScanVariant, ShiftSpec};

    // Straightforward per-channel, per-state recurrence.
    fn naive(p: &SelectiveScanParams<f32>, u: &[f32], len: usize) -> Vec<f32> {
        let (ch, ns) = (p.channels, p.state);
        let mut y = vec![0.0; len * ch];
        for c in 0..ch {
            for n in 0..ns {
                let mut h = 0.0f32;
                for l in 0..len {
                    let ul = &u[l * ch..(l + 1) * ch];
                    let z: f32 = (0..ch).map(|k| p.w_delta[c * ch + k] * ul[k]).sum::<f32>() + p.b_delta[c];
                    let dt = if z > 20.0 { z } else { z.exp().ln_1p() };
                    let b: f32 = (0..ch).map(|k| p.w_b[n * ch + k] * ul[k]).sum();
                    let cc: f32 = (0..ch).map(|k| p.w_c[n * ch + k] * ul[k]).sum();
                    h = (dt * p.a[c * ns + n]).exp() * h + dt * b * ul[c];
                    y[l * ch + c] += cc * h;
                }
            }
            for l in 0..len {
                y[l * ch + c] += p.d[c] * u[l * ch + c];
            }
        }
        y
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = SelectiveScanParams::random(4, 8, &mut rng);
        let y = scan_apply(&p, &[0.0; 40], 10).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_closed_form() {
        let mut p = SelectiveScanParams::<f64>::zeros(1, 2);
        p.w_delta = vec![0.3];
        p.b_delta = vec![0.1];
        p.w_b = vec![0.5, -0.2];
        p.w_c = vec![0.7, 0.4];
        p.init_a();
        p.d = vec![1.5];
        let u = 0.8f64;
        let dt = (0.3 * u + 0.1f64).exp().ln_1p();
        let b = [0.5 * u, -0.2 * u];
        let c = [0.7 * u, 0.4 * u];
        let want = c[0] * dt * b[0] * u + c[1] * dt * b[1] * u + 1.5 * u;
        let y = scan_apply(&p, &[u], 1).unwrap();
        assert!((y[0] - want).abs() < 1e-12);
    }

    #[test]
    fn matches_naive_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = SelectiveScanParams::random(4, 8, &mut rng);
        let u: Vec<f32> = (0..32 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = scan_apply(&p, &u, 32).unwrap();
        let r = naive(&p, &u, 32);
        let err = y.iter().zip(&r).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn rejects_non_finite() {
        let mut p = SelectiveScanParams::<f32>::zeros(2, 2);
        p.a[0] = f32::NAN;
        assert!(scan_apply(&p, &[0.0; 4], 2).is_err());
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = SelectiveScanParams::random(3, 4, &mut rng);
        let u: Vec<f32> = (0..8 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, cache) = scan_forward(&p, &u, 8).unwrap();
        let g = scan_backward(&p, &u, &cache, &[0.0; 24]).unwrap();
        assert!(g.du.iter().all(|&v| v == 0.0));
        assert!(g.params.a.iter().chain(&g.params.w_delta).all(|&v| v == 0.0));
    }

    #[test]
    fn grad_d_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = SelectiveScanParams::random(3, 4, &mut rng).cast::<f64>();
        let u: Vec<f64> = (0..6 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gy: Vec<f64> = (0..6 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, cache) = scan_forward(&p, &u, 6).unwrap();
        let g = scan_backward(&p, &u, &cache, &gy).unwrap();
        for c in 0..3 {
            let want: f64 = (0..6).map(|l| gy[l * 3 + c] * u[l * 3 + c]).sum();
            assert!((g.params.d[c] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn finite_difference_check() {
        let r = grad_check(4, 16, 9, 1e-3, 1e-4).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn long_sequence_stays_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = SelectiveScanParams::random(4, 8, &mut rng);
        let len = 4096;
        let u: Vec<f32> = (0..len * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (y, cache) = scan_forward(&p, &u, len).unwrap();
        assert!(y.iter().all(|v| v.is_finite()));
        let (ch, ns) = (4, 8);
        let mut max_in = 0.0f32;
        let mut max_abar = 0.0f32;
        for l in 0..len {
            for c in 0..ch {
                let dt = cache.delta[l * ch + c];
                for n in 0..ns {
                    max_in = max_in.max((dt * cache.b[l * ns + n] * u[l * ch + c]).abs());
                    max_abar = max_abar.max((dt * p.a[c * ns + n]).exp());
                }
            }
        }
        let bound = max_in / (1.0 - max_abar);
        assert!(cache.h.iter().all(|h| h.abs() <= bound * (1.0 + 1e-4)));
    }

    #[test]
    fn ss3d_lengths_and_roundtrip() {
        let plan = window_plan(ScanVariant::Scan1, 8, 8, 8, None).unwrap();
        let seq = ss3d_ordering(&plan[0], 8, 3);
        assert_eq!(seq.len(), 256);
        assert!(seq.is_bijection());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = Tensor::from_fn(&[64, 5], |_| rng.random_range(-1.0..1.0));
        let ctx = Tensor::from_fn(&[64, 3, 5], |_| rng.random_range(-1.0..1.0));
        let data = gather(&seq, &q, &ctx).unwrap();
        let mut q2 = Tensor::zeros(&[64, 5]);
        let mut c2 = Tensor::zeros(&[64, 3, 5]);
        scatter_into(&seq, &data, &mut q2, &mut c2).unwrap();
        assert_eq!((q2, c2), (q.clone(), ctx));

        let s0 = ss3d_ordering(&plan[0], 8, 0);
        let cells: Vec<Cell> = s0.ordering.iter().map(|x| x.0).collect();
        assert_eq!(cells, plan[0]);
    }

    #[test]
    fn zero_params_block_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = Tensor::from_fn(&[64, 4], |_| rng.random_range(-1.0..1.0));
        let ctx = Tensor::from_fn(&[64, 2, 4], |_| rng.random_range(-1.0..1.0));
        let plan = window_plan(ScanVariant::Scan2, 8, 8, 4, None).unwrap();
        let out = ssm_block(&q, &ctx, &plan, 8, &SsmBlockParams::zeros(4, 4)).unwrap();
        assert_eq!(out, q);
    }

    #[test]
    fn memoryless_scan_is_order_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut params = SsmBlockParams::zeros(4, 4);
        params.scan = SelectiveScanParams::random(4, 4, &mut rng);
        params.scan.a.fill(-1e30);
        let q = Tensor::from_fn(&[64, 4], |_| rng.random_range(-1.0..1.0));
        let ctx = Tensor::zeros(&[64, 0, 4]);
        let std_plan = window_plan(ScanVariant::Scan1, 8, 8, 4, None).unwrap();
        let shifted = window_plan(ScanVariant::Scan3, 8, 8, 4, Some(ShiftSpec::new(-1, 0))).unwrap();
        let a = ssm_block(&q, &ctx, &std_plan, 8, &params).unwrap();
        let b = ssm_block(&q, &ctx, &shifted, 8, &params).unwrap();
        assert_eq!(a, b);
        let mut pa: Vec<usize> = std_plan.iter().flat_map(|w| ss3d_ordering(w, 8, 0).provenance).map(|x| x.0).collect();
        let mut pb: Vec<usize> = shifted.iter().flat_map(|w| ss3d_ordering(w, 8, 0).provenance).map(|x| x.0).collect();
        assert_ne!(pa, pb);
        pa.sort_unstable();
        pb.sort_unstable();
        assert_eq!(pa, pb);
    }
}
