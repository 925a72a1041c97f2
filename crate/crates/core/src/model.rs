//! The full forward pass: tokens and trajectories, token selection, the
//! two-path shifted SSM aggregation, reconstruction and the bicubic skip. Also
//! the two training losses and parameter/MAC accounting.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{
    bicubic_upsample, pixel_shuffle, read_tstf, write_tstf, Conv2d, LayerNorm, Linear, ModelConfig, ResBlock,
    Tensor,
};
use crate::par;
use crate::scanorder::{window_plan, Cell, ScanVariant, ShiftSpec};
use crate::ssm::{relative_error, ssm_block, GradCheckReport, SsmBlockParams};
use crate::trajectory::{
    block_matching_flow, generate_tokens, patchify, propagate_trajectories, select_tokens, unpatchify,
    SelectionResult, TokenField, TokenizerWeights, TrajectorySet,
};

/// Second pass of a shifted branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub shift: ShiftSpec,
    pub second: ScanVariant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathConfig {
    pub standard: ScanVariant,
    /// Intra-window compensation branch.
    pub intra: Option<BranchSpec>,
    /// Inter-window compensation branch.
    pub inter: Option<BranchSpec>,
}

impl PathConfig {
    pub fn branch_count(&self) -> usize {
        self.intra.is_some() as usize + self.inter.is_some() as usize
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// LN and a pointwise linear layer over the concatenated paths.
    #[default]
    Pointwise,
    /// Deformable attention after the fusion layer; not available.
    DeformableAttention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TsmaConfig {
    pub path1: PathConfig,
    pub path2: PathConfig,
    pub fusion: Fusion,
}

impl Default for TsmaConfig {
    fn default() -> Self {
        let branch = |shift: ShiftSpec, second| Some(BranchSpec { shift, second });
        TsmaConfig {
            path1: PathConfig {
                standard: ScanVariant::Scan1,
                intra: branch(ShiftSpec::new(-1, 0), ScanVariant::Scan3),
                inter: branch(ShiftSpec::new(-3, -3), ScanVariant::Scan3),
            },
            path2: PathConfig {
                standard: ScanVariant::Scan2,
                intra: branch(ShiftSpec::new(0, -1), ScanVariant::Scan4),
                inter: branch(ShiftSpec::new(-3, -3), ScanVariant::Scan4),
            },
            fusion: Fusion::Pointwise,
        }
    }
}

impl TsmaConfig {
    pub fn paths(&self) -> [&PathConfig; 2] {
        [&self.path1, &self.path2]
    }

    /// Width of the concatenated path outputs, in multiples of `C`.
    pub fn fused_width(&self) -> usize {
        self.paths().iter().map(|p| 1 + p.branch_count()).sum()
    }
}

/// Ablation variants of the network.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    #[default]
    #[serde(rename = "full")]
    Full,
    /// Without trajectories: no feature extractor, no token selection.
    #[serde(rename = "v1.1")]
    V1_1,
    /// Without the trajectory loss; the network is unchanged.
    #[serde(rename = "v1.2")]
    V1_2,
    #[serde(rename = "v1.3")]
    V1_3,
    #[serde(rename = "v1.4")]
    V1_4,
    #[serde(rename = "v1.5")]
    V1_5,
    /// Intra-window branches without their U(1)/L(1) shifts.
    #[serde(rename = "v1.6")]
    V1_6,
    /// Inter-window branches without their UL(3) shifts.
    #[serde(rename = "v1.7")]
    V1_7,
    #[serde(rename = "v1.8")]
    V1_8,
}

impl Ablation {
    pub const ALL: [Ablation; 9] = [
        Ablation::Full,
        Ablation::V1_1,
        Ablation::V1_2,
        Ablation::V1_3,
        Ablation::V1_4,
        Ablation::V1_5,
        Ablation::V1_6,
        Ablation::V1_7,
        Ablation::V1_8,
    ];

    pub fn architecture(self) -> Architecture {
        let mut a = Architecture::default();
        let paths = |a: &mut Architecture, f: &dyn Fn(&mut PathConfig)| {
            f(&mut a.tsma.path1);
            f(&mut a.tsma.path2);
        };
        let unshift = |b: &mut Option<BranchSpec>| {
            if let Some(b) = b {
                b.shift = ShiftSpec::IDENTITY;
            }
        };
        match self {
            Ablation::Full | Ablation::V1_2 => {}
            Ablation::V1_1 => a.use_trajectory = false,
            Ablation::V1_3 => paths(&mut a, &|p| p.intra = None),
            Ablation::V1_4 => paths(&mut a, &|p| p.inter = None),
            Ablation::V1_5 => paths(&mut a, &|p| {
                p.intra = None;
                p.inter = None;
            }),
            Ablation::V1_6 => paths(&mut a, &|p| unshift(&mut p.intra)),
            Ablation::V1_7 => paths(&mut a, &|p| unshift(&mut p.inter)),
            Ablation::V1_8 => paths(&mut a, &|p| {
                unshift(&mut p.intra);
                unshift(&mut p.inter);
            }),
        }
        a
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub tsma: TsmaConfig,
    /// Feature extractor, trajectories and token selection.
    pub use_trajectory: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            tsma: TsmaConfig::default(),
            use_trajectory: true,
        }
    }
}

/// Model hyper-parameters plus the ablation variant, as read from JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    pub ablation: Ablation,
}

fn shuffle_factors(config: &ModelConfig) -> Vec<usize> {
    let s = config.scale;
    if s == 1 {
        Vec::new()
    } else if config.single_stage_shuffle || !s.is_power_of_two() {
        vec![s]
    } else {
        vec![2; s.trailing_zeros() as usize]
    }
}

/// Ordered list of the modules a forward pass runs through.
pub fn module_graph(arch: &Architecture, config: &ModelConfig) -> Vec<String> {
    let mut g = Vec::new();
    if arch.use_trajectory {
        g.push("G.conv_in".to_string());
        for i in 0..config.n1_res_blocks {
            g.push(format!("G.res{i}"));
        }
        g.push("G.proj".into());
        g.push("trajectory".into());
        g.push("selection".into());
    } else {
        g.push("embed.proj".into());
    }
    for (k, p) in arch.tsma.paths().iter().enumerate() {
        g.push(format!("tsma.path{}.trunk[{}]", k + 1, p.standard));
        if let Some(b) = p.intra {
            g.push(format!("tsma.path{}.intra[{}->{}->{}]", k + 1, p.standard, b.shift, b.second));
        }
        if let Some(b) = p.inter {
            g.push(format!("tsma.path{}.inter[{}->{}->{}]", k + 1, p.standard, b.shift, b.second));
        }
    }
    g.push(format!("tsma.fusion[{}C->C]", arch.tsma.fused_width()));
    g.push("untokenize".into());
    g.push("R.conv_in".into());
    for i in 0..config.n2_res_blocks {
        g.push(format!("R.res{i}"));
    }
    let f = shuffle_factors(config);
    for (i, &s) in f.iter().enumerate().take(f.len().saturating_sub(1)) {
        g.push(format!("R.up{i}+shuffle{s}"));
    }
    match f.last() {
        Some(s) => g.push(format!("R.conv_out+shuffle{s}")),
        None => g.push("R.conv_out".into()),
    }
    g.push("U.bicubic".into());
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathWeights {
    pub trunk: SsmBlockParams,
    pub intra: Option<SsmBlockParams>,
    pub inter: Option<SsmBlockParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsmaWeights {
    pub paths: [PathWeights; 2],
    pub fusion_norm: LayerNorm,
    pub fusion: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconWeights {
    pub conv_in: Conv2d,
    pub res_blocks: Vec<ResBlock>,
    pub up: Vec<Conv2d>,
    pub conv_out: Conv2d,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Embedding {
    /// Feature extractor and patch projection.
    Tokenizer(TokenizerWeights),
    /// Patch projection of the raw frame only.
    Patch(Linear),
}

impl Embedding {
    pub fn proj(&self) -> &Linear {
        match self {
            Embedding::Tokenizer(t) => &t.proj,
            Embedding::Patch(l) => l,
        }
    }
}

/// Callback receiving `(name, dims, values)` of one weight tensor.
pub type TensorVisitor<'a> = dyn FnMut(&str, &[usize], &mut [f32]) -> Result<()> + 'a;

#[derive(Debug, Clone, PartialEq)]
pub struct TsMambaWeights {
    pub embedding: Embedding,
    pub tsma: TsmaWeights,
    pub recon: ReconWeights,
}

pub const IMAGE_CHANNELS: usize = 3;

impl TsMambaWeights {
    pub fn zeros(config: &ModelConfig, arch: &Architecture) -> Self {
        let c = config.channels;
        let ts2 = config.token_size * config.token_size;
        let (embedding, feat_c) = if arch.use_trajectory {
            (Embedding::Tokenizer(TokenizerWeights::zeros(config, IMAGE_CHANNELS)), c)
        } else {
            (Embedding::Patch(Linear::zeros(IMAGE_CHANNELS * ts2, c)), IMAGE_CHANNELS)
        };
        let block = || SsmBlockParams::zeros(c, config.state_dim);
        let path = |p: &PathConfig| PathWeights {
            trunk: block(),
            intra: p.intra.map(|_| block()),
            inter: p.inter.map(|_| block()),
        };
        let fw = arch.tsma.fused_width() * c;
        let factors = shuffle_factors(config);
        let up = factors
            .iter()
            .take(factors.len().saturating_sub(1))
            .map(|&f| Conv2d::zeros(c, c * f * f, 3))
            .collect();
        let last = factors.last().copied().unwrap_or(1);
        TsMambaWeights {
            embedding,
            tsma: TsmaWeights {
                paths: [path(&arch.tsma.path1), path(&arch.tsma.path2)],
                fusion_norm: LayerNorm::identity(fw),
                fusion: Linear::zeros(fw, c),
            },
            recon: ReconWeights {
                conv_in: Conv2d::zeros(feat_c, c, 3),
                res_blocks: (0..config.n2_res_blocks).map(|_| ResBlock::zeros(c)).collect(),
                up,
                conv_out: Conv2d::zeros(c, IMAGE_CHANNELS * last * last, 3),
            },
        }
    }

    /// Calls `f(name, dims, values)` for every weight tensor in a fixed order.
    pub fn visit_mut(&mut self, f: &mut TensorVisitor<'_>) -> Result<()> {
        fn conv(f: &mut TensorVisitor<'_>, name: &str, c: &mut Conv2d) -> Result<()> {
            let dims = c.weight.dims().to_vec();
            f(&format!("{name}.weight"), &dims, c.weight.data_mut())?;
            let n = c.bias.len();
            f(&format!("{name}.bias"), &[n], &mut c.bias)
        }
        fn linear(f: &mut TensorVisitor<'_>, name: &str, l: &mut Linear) -> Result<()> {
            let dims = l.weight.dims().to_vec();
            f(&format!("{name}.weight"), &dims, l.weight.data_mut())?;
            let n = l.bias.len();
            f(&format!("{name}.bias"), &[n], &mut l.bias)
        }
        fn norm(f: &mut TensorVisitor<'_>, name: &str, n: &mut LayerNorm) -> Result<()> {
            let c = n.gamma.len();
            f(&format!("{name}.gamma"), &[c], &mut n.gamma)?;
            f(&format!("{name}.beta"), &[c], &mut n.beta)
        }
        fn block(f: &mut TensorVisitor<'_>, name: &str, b: &mut SsmBlockParams) -> Result<()> {
            norm(f, &format!("{name}.ln"), &mut b.norm)?;
            let (c, n) = (b.scan.channels, b.scan.state);
            let s = &mut b.scan;
            f(&format!("{name}.ssm.w_delta"), &[c, c], &mut s.w_delta)?;
            f(&format!("{name}.ssm.b_delta"), &[c], &mut s.b_delta)?;
            f(&format!("{name}.ssm.w_b"), &[n, c], &mut s.w_b)?;
            f(&format!("{name}.ssm.w_c"), &[n, c], &mut s.w_c)?;
            f(&format!("{name}.ssm.a"), &[c, n], &mut s.a)?;
            f(&format!("{name}.ssm.d"), &[c], &mut s.d)
        }
        match &mut self.embedding {
            Embedding::Tokenizer(t) => {
                conv(f, "g.conv_in", &mut t.conv_in)?;
                for (i, r) in t.res_blocks.iter_mut().enumerate() {
                    conv(f, &format!("g.res{i}.conv1"), &mut r.conv1)?;
                    conv(f, &format!("g.res{i}.conv2"), &mut r.conv2)?;
                }
                linear(f, "g.proj", &mut t.proj)?;
            }
            Embedding::Patch(l) => linear(f, "embed.proj", l)?,
        }
        for (k, p) in self.tsma.paths.iter_mut().enumerate() {
            block(f, &format!("tsma.path{}.trunk", k + 1), &mut p.trunk)?;
            if let Some(b) = p.intra.as_mut() {
                block(f, &format!("tsma.path{}.intra", k + 1), b)?;
            }
            if let Some(b) = p.inter.as_mut() {
                block(f, &format!("tsma.path{}.inter", k + 1), b)?;
            }
        }
        norm(f, "tsma.fusion.ln", &mut self.tsma.fusion_norm)?;
        linear(f, "tsma.fusion.linear", &mut self.tsma.fusion)?;
        conv(f, "r.conv_in", &mut self.recon.conv_in)?;
        for (i, r) in self.recon.res_blocks.iter_mut().enumerate() {
            conv(f, &format!("r.res{i}.conv1"), &mut r.conv1)?;
            conv(f, &format!("r.res{i}.conv2"), &mut r.conv2)?;
        }
        for (i, u) in self.recon.up.iter_mut().enumerate() {
            conv(f, &format!("r.up{i}"), u)?;
        }
        conv(f, "r.conv_out", &mut self.recon.conv_out)
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.clone()
            .visit_mut(&mut |_, _, v| {
                n += v.len();
                Ok(())
            })
            .expect("counting cannot fail");
        n
    }

    /// Seeded random initialization: uniform `±1/√fan_in` weights, zero biases,
    /// identity norms, `A = -(1..N)`, `D = 1`.
    pub fn random(config: &ModelConfig, arch: &Architecture, seed: u64) -> Self {
        let mut w = TsMambaWeights::zeros(config, arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        w.visit_mut(&mut |name, dims, v| {
            let leaf = name.rsplit('.').next().unwrap_or(name);
            match leaf {
                "weight" | "w_delta" | "w_b" | "w_c" => {
                    let fan_in: usize = dims[1..].iter().product();
                    let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
                    v.iter_mut().for_each(|x| *x = rng.random_range(-bound..bound));
                }
                "gamma" | "d" => v.fill(1.0),
                "b_delta" => v.iter_mut().for_each(|x| *x = rng.random_range(-1.0..0.0)),
                "a" => {
                    let n = dims[1];
                    v.iter_mut().enumerate().for_each(|(i, x)| *x = -((i % n) as f32 + 1.0));
                }
                _ => v.fill(0.0),
            }
            Ok(())
        })
        .expect("initialization cannot fail");
        w
    }

    /// Named tensors in visiting order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.clone()
            .visit_mut(&mut |name, dims, v| {
                out.push((name.to_string(), Tensor::new(dims.to_vec(), v.to_vec())?));
                Ok(())
            })
            .expect("weights are well-formed");
        out
    }

    pub fn zero_recon_output(&mut self) {
        self.recon.conv_out.weight.data_mut().fill(0.0);
        self.recon.conv_out.bias.fill(0.0);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format: String,
    pub version: u32,
    /// Layer tensor name to file name, relative to the bundle directory.
    pub tensors: BTreeMap<String, String>,
}

/// Writes one TSTF file per tensor plus a `manifest.json` naming them.
pub fn save_tensor_bundle(dir: impl AsRef<Path>, tensors: &[(String, Tensor)]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut files = BTreeMap::new();
    for (name, t) in tensors {
        let file = format!("{name}.tstf");
        write_tstf(dir.join(&file), t)?;
        files.insert(name.clone(), file);
    }
    let manifest = BundleManifest {
        format: "tstf-bundle".into(),
        version: 1,
        tensors: files,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<BundleManifest> {
    let m: BundleManifest = serde_json::from_slice(&fs::read(dir.as_ref().join("manifest.json"))?)?;
    if m.version != 1 {
        return Err(Error::Format(format!("unsupported bundle version {}", m.version)));
    }
    Ok(m)
}

/// Reads the named tensors of a bundle; a name absent from the manifest is
/// [`Error::MissingLayer`].
pub fn load_tensors(dir: impl AsRef<Path>, names: &[&str]) -> Result<Vec<Tensor>> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    names
        .iter()
        .map(|&name| {
            let file = manifest
                .tensors
                .get(name)
                .ok_or_else(|| Error::MissingLayer(name.to_string()))?;
            read_tstf(dir.join(file))
        })
        .collect()
}

pub fn save_bundle(dir: impl AsRef<Path>, weights: &TsMambaWeights) -> Result<()> {
    save_tensor_bundle(dir, &weights.named_tensors())
}

pub fn load_bundle(dir: impl AsRef<Path>, config: &ModelConfig, arch: &Architecture) -> Result<TsMambaWeights> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let mut w = TsMambaWeights::zeros(config, arch);
    w.visit_mut(&mut |name, dims, v| {
        let file = manifest
            .tensors
            .get(name)
            .ok_or_else(|| Error::MissingLayer(name.to_string()))?;
        let t = read_tstf(dir.join(file))?;
        if t.dims() != dims {
            return Err(Error::Format(format!(
                "layer `{name}` has dims {:?}, expected {dims:?}",
                t.dims()
            )));
        }
        v.copy_from_slice(t.data());
        Ok(())
    })?;
    Ok(w)
}

/// Source frame of each of the `window` temporal slots when `available`
/// frames exist: the last `window` of them, front-padded with the first.
pub fn temporal_slots(available: usize, window: usize) -> Vec<usize> {
    (0..window).map(|j| (j + available).saturating_sub(window)).collect()
}

/// Propagates trajectories through the temporal slots. `flow(a, b)` returns
/// the field from frame `b` back into frame `a`; repeated slots get zero flow.
pub fn trajectories_over(
    slots: &[usize],
    (ht, wt): (usize, usize),
    token_size: usize,
    mut flow: impl FnMut(usize, usize) -> Result<Tensor>,
) -> Result<TrajectorySet> {
    let (h, w) = (ht * token_size, wt * token_size);
    let mut traj = TrajectorySet::stationary(ht, wt, token_size, slots.len(), 0)?;
    for j in 1..slots.len() {
        let (a, b) = (slots[j - 1], slots[j]);
        let f = if a == b { Tensor::zeros(&[2, h, w]) } else { flow(a, b)? };
        traj = propagate_trajectories(&traj, &f, token_size)?;
    }
    Ok(traj)
}

fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let (n, _) = parts[0].dims2()?;
    let widths: Vec<usize> = parts.iter().map(|p| p.dims()[1]).collect();
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(n * total);
    for i in 0..n {
        for (p, &w) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
        }
    }
    Tensor::new(vec![n, total], out)
}

type PathPlans = (Vec<Vec<Cell>>, Option<Vec<Vec<Cell>>>, Option<Vec<Vec<Cell>>>);

/// Scan plans of one path: trunk, then the branches that exist.
fn path_plans(
    p: &PathConfig,
    ht: usize,
    wt: usize,
    window: usize,
) -> Result<PathPlans> {
    let trunk = window_plan(p.standard, ht, wt, window, None)?;
    let branch = |b: &Option<BranchSpec>| {
        b.map(|b| window_plan(b.second, ht, wt, window, Some(b.shift)))
            .transpose()
    };
    Ok((trunk, branch(&p.intra)?, branch(&p.inter)?))
}

/// Aggregates current tokens `q` (`[N, C]`) with their selected context
/// (`[N, s, C]`, oldest first) into `[N, C]`.
pub fn tsma_apply(
    q: &Tensor,
    ctx: &Tensor,
    ht: usize,
    wt: usize,
    tsma: &TsmaConfig,
    weights: &TsmaWeights,
    config: &ModelConfig,
) -> Result<Tensor> {
    if tsma.fusion == Fusion::DeformableAttention {
        return invalid("deformable attention fusion is not available; use the pointwise fusion");
    }
    let (n, _) = q.dims2()?;
    if n != ht * wt {
        return invalid(format!("{n} tokens do not fill a {ht}x{wt} grid"));
    }
    let mut parts = Vec::new();
    for (p, w) in tsma.paths().iter().zip(&weights.paths) {
        let (trunk_plan, intra_plan, inter_plan) = path_plans(p, ht, wt, config.window_size)?;
        let trunk = ssm_block(q, ctx, &trunk_plan, wt, &w.trunk)?;
        let run = |plan: Option<Vec<Vec<Cell>>>, params: &Option<SsmBlockParams>| -> Result<Option<Tensor>> {
            match (plan, params) {
                (Some(plan), Some(params)) => Ok(Some(ssm_block(&trunk, ctx, &plan, wt, params)?)),
                (None, None) => Ok(None),
                _ => invalid("branch weights do not match the configuration"),
            }
        };
        let intra = run(intra_plan, &w.intra)?;
        let inter = run(inter_plan, &w.inter)?;
        parts.push(trunk);
        parts.extend(intra);
        parts.extend(inter);
    }
    let cat = concat_rows(&parts.iter().collect::<Vec<_>>())?;
    let fused = weights.fusion.forward(&weights.fusion_norm.forward(&cat)?)?;
    fused.add(q)
}

pub fn tsma_forward(
    q: &TokenField,
    selection: &SelectionResult,
    tsma: &TsmaConfig,
    weights: &TsmaWeights,
    config: &ModelConfig,
) -> Result<Tensor> {
    if selection.len() != q.len() {
        return invalid("selection does not cover every token");
    }
    let ctx = selection.context_by_frame()?;
    tsma_apply(&q.tokens, &ctx, q.ht, q.wt, tsma, weights, config)
}

/// Reconstruction network on an un-tokenized feature map.
pub fn reconstruct(feat: &Tensor, weights: &ReconWeights, config: &ModelConfig) -> Result<Tensor> {
    let mut x = weights.conv_in.forward(feat)?;
    for b in &weights.res_blocks {
        x = b.forward(&x)?;
    }
    let factors = shuffle_factors(config);
    for (conv, &f) in weights.up.iter().zip(&factors) {
        x = pixel_shuffle(&conv.forward(&x)?, f)?;
    }
    x = weights.conv_out.forward(&x)?;
    if let Some(&f) = factors.last() {
        x = pixel_shuffle(&x, f)?;
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub sr: Tensor,
    pub aggregated: Tensor,
    pub selection: Option<SelectionResult>,
    pub trajectories: Option<TrajectorySet>,
}

/// Super-resolves the last of `frames` (oldest first, each `[3, H, W]`).
///
/// Only the last `temporal_window` frames are used; a shorter history is
/// padded at the front with copies of the first frame. `flows`, if given,
/// holds one `[2, H, W]` field per consecutive pair of the supplied frames,
/// pointing from the later frame into the earlier; otherwise block matching
/// estimates them.
pub fn ts_mamba_forward(
    frames: &[Tensor],
    flows: Option<&[Tensor]>,
    weights: &TsMambaWeights,
    config: &ModelConfig,
    arch: &Architecture,
) -> Result<ForwardOutput> {
    config.validate()?;
    let Some(current) = frames.last() else {
        return invalid("no frames given");
    };
    let (ch, h, w) = current.dims3()?;
    if ch != IMAGE_CHANNELS {
        return invalid(format!("frames must have {IMAGE_CHANNELS} channels, got {ch}"));
    }
    for f in frames {
        current.same_dims(f)?;
    }
    if let Some(fl) = flows {
        if fl.len() + 1 != frames.len() {
            return invalid(format!(
                "{} frames need {} flow fields, got {}",
                frames.len(),
                frames.len() - 1,
                fl.len()
            ));
        }
        for f in fl {
            if f.dims() != [2, h, w] {
                return invalid(format!("flow dims {:?} do not match [2, {h}, {w}]", f.dims()));
            }
        }
    }
    let (ht, wt) = config.check_frame(h, w)?;
    let ts = config.token_size;
    let c = config.channels;
    let tw = config.temporal_window;

    // source frame index of each temporal slot
    let slots = temporal_slots(frames.len(), tw);

    let (q, ctx, selection, trajectories) = match &weights.embedding {
        Embedding::Tokenizer(tok) => {
            if !arch.use_trajectory {
                return invalid("weights carry a feature extractor but the architecture has none");
            }
            let used: Vec<usize> = {
                let mut u = slots.clone();
                u.dedup();
                u
            };
            let fields = par::map_slice(&used, |&k| generate_tokens(&frames[k], k, config, tok).map(|x| x.1));
            let mut by_frame = BTreeMap::new();
            for (k, f) in used.iter().zip(fields) {
                by_frame.insert(*k, f?);
            }
            let traj = trajectories_over(&slots, (ht, wt), ts, |a, b| match flows {
                Some(fl) => Ok(fl[b - 1].clone()),
                None => block_matching_flow(&frames[a], &frames[b], config.flow_radius),
            })?;
            let pool: Vec<TokenField> = slots[..tw - 1].iter().map(|k| by_frame[k].clone()).collect();
            let q = by_frame[&slots[tw - 1]].clone();
            let sel = select_tokens(&q, &pool, &traj, config.s_selected, config.similarity)?;
            let ctx = sel.context_by_frame()?;
            (q, ctx, Some(sel), Some(traj))
        }
        Embedding::Patch(proj) => {
            if arch.use_trajectory {
                return invalid("the architecture needs a feature extractor the weights lack");
            }
            let tokens = proj.forward(&patchify(current, ts)?)?;
            let q = TokenField::new(slots[tw - 1], ht, wt, tokens)?;
            (q, Tensor::zeros(&[ht * wt, 0, c]), None, None)
        }
    };

    let aggregated = tsma_apply(&q.tokens, &ctx, ht, wt, &arch.tsma, &weights.tsma, config)?;
    let proj = weights.embedding.proj();
    let patches = proj.transpose_forward(&aggregated)?;
    let feat_c = proj.in_dim() / (ts * ts);
    let feat = unpatchify(&patches, feat_c, ht, wt, ts)?;
    let residual = reconstruct(&feat, &weights.recon, config)?;
    let sr = residual.add(&bicubic_upsample(current, config.scale)?)?;
    Ok(ForwardOutput {
        sr,
        aggregated,
        selection,
        trajectories,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub epsilon: f64,
    pub lambda: f64,
    pub scale: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            epsilon: 1e-4,
            lambda: 0.1,
            scale: 4,
        }
    }
}

/// Mean of `sqrt(d² + ε²)` over all elements, evaluated as
/// `ε + mean(d² / (sqrt(d² + ε²) + ε))` so that equal inputs give exactly ε.
pub fn charbonnier_loss(sr: &Tensor, hr: &Tensor, epsilon: f64) -> Result<f64> {
    sr.same_dims(hr)?;
    if epsilon <= 0.0 {
        return invalid("epsilon must be positive");
    }
    if sr.numel() == 0 {
        return invalid("loss of empty tensors");
    }
    let e2 = epsilon * epsilon;
    let s: f64 = sr
        .data()
        .iter()
        .zip(hr.data())
        .map(|(&a, &b)| {
            let d2 = (a as f64 - b as f64).powi(2);
            d2 / ((d2 + e2).sqrt() + epsilon)
        })
        .sum();
    Ok(epsilon + s / sr.numel() as f64)
}

/// Gradient of [`charbonnier_loss`] with respect to `sr`.
pub fn charbonnier_grad(sr: &Tensor, hr: &Tensor, epsilon: f64) -> Result<Vec<f64>> {
    sr.same_dims(hr)?;
    let n = sr.numel() as f64;
    let e2 = epsilon * epsilon;
    Ok(sr
        .data()
        .iter()
        .zip(hr.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d / (d * d + e2).sqrt() / n
        })
        .collect())
}

fn charbonnier_f64(sr: &[f64], hr: &[f64], epsilon: f64) -> f64 {
    let s: f64 = sr
        .iter()
        .zip(hr)
        .map(|(a, b)| ((a - b).powi(2) + epsilon * epsilon).sqrt())
        .sum();
    s / sr.len() as f64
}

/// Checks [`charbonnier_grad`] against central differences on random inputs.
pub fn charbonnier_grad_check(instances: usize, seed: u64, epsilon: f64, tolerance: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = 1e-6;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for _ in 0..instances {
        let n = rng.random_range(1..=48usize);
        let sr = Tensor::from_fn(&[n], |_| rng.random_range(0.0..1.0));
        let hr = Tensor::from_fn(&[n], |_| rng.random_range(0.0..1.0));
        let g = charbonnier_grad(&sr, &hr, epsilon)?;
        let a: Vec<f64> = sr.data().iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = hr.data().iter().map(|&v| v as f64).collect();
        for i in 0..n {
            let mut up = a.clone();
            up[i] += step;
            let mut dn = a.clone();
            dn[i] -= step;
            let num = (charbonnier_f64(&up, &b, epsilon) - charbonnier_f64(&dn, &b, epsilon)) / (2.0 * step);
            worst = worst.max(relative_error(g[i], num));
            checked += 1;
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

/// Mean L1 distance between LR trajectories and HR trajectories subsampled
/// every `scale` points per grid axis with coordinates divided by `scale`.
pub fn trajectory_loss(lr: &TrajectorySet, hr: &TrajectorySet, scale: usize) -> Result<f64> {
    if scale == 0 {
        return invalid("scale must be positive");
    }
    let rows = hr.rows.div_ceil(scale);
    let cols = hr.cols.div_ceil(scale);
    if rows != lr.rows || cols != lr.cols || hr.slots != lr.slots {
        return invalid(format!(
            "subsampled HR trajectories ({rows}x{cols}, {} slots) do not match LR ({}x{}, {} slots)",
            hr.slots, lr.rows, lr.cols, lr.slots
        ));
    }
    if lr.is_empty() {
        return invalid("empty trajectory set");
    }
    let s = scale as f64;
    let mut total = 0.0f64;
    for r in 0..rows {
        for c in 0..cols {
            let hp = (r * scale) * hr.cols + c * scale;
            let lp = r * cols + c;
            for k in 0..lr.slots {
                let [hx, hy] = hr.coord(hp, k);
                let [lx, ly] = lr.coord(lp, k);
                total += (lx as f64 - hx as f64 / s).abs() + (ly as f64 - hy as f64 / s).abs();
            }
        }
    }
    Ok(total / (rows * cols * lr.slots) as f64)
}

pub fn total_loss(spa: f64, trj: f64, lambda: f64) -> f64 {
    spa + lambda * trj
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Complexity {
    pub lr_height: usize,
    pub lr_width: usize,
    pub channels: usize,
    pub state_dim: usize,
    pub layers: Vec<LayerCost>,
    pub params: u64,
    pub macs: u64,
}

pub fn conv_cost(name: &str, cin: usize, cout: usize, k: usize, h: usize, w: usize) -> LayerCost {
    LayerCost {
        name: name.to_string(),
        params: (cout * cin * k * k + cout) as u64,
        macs: (cout * cin * k * k * h * w) as u64,
    }
}

/// Closed-form parameter and multiply-accumulate counts for one forward pass
/// on an `h × w` LR frame. The feature extractor is counted for the current
/// frame only (earlier frames are cached in the online setting); the SSM
/// recurrence costs `3·C·N` per step.
pub fn count_params_macs(config: &ModelConfig, arch: &Architecture, lr: (usize, usize)) -> Complexity {
    let (h, w) = lr;
    let c = config.channels;
    let ns = config.state_dim;
    let ts = config.token_size;
    let n = (h / ts) * (w / ts);
    let s = if arch.use_trajectory { config.s_selected } else { 0 };
    let mut layers = Vec::new();
    let feat_c = if arch.use_trajectory {
        layers.push(conv_cost("G.conv_in", IMAGE_CHANNELS, c, 3, h, w));
        for i in 0..config.n1_res_blocks {
            let mut l = conv_cost(&format!("G.res{i}"), c, c, 3, h, w);
            l.params *= 2;
            l.macs *= 2;
            layers.push(l);
        }
        layers.push(LayerCost {
            name: "G.proj".into(),
            params: (c * ts * ts * c + c) as u64,
            macs: (n * c * ts * ts * c) as u64,
        });
        layers.push(LayerCost {
            name: "selection".into(),
            params: 0,
            macs: (n * (config.temporal_window - 1) * c) as u64,
        });
        c
    } else {
        layers.push(LayerCost {
            name: "embed.proj".into(),
            params: (IMAGE_CHANNELS * ts * ts * c + c) as u64,
            macs: (n * IMAGE_CHANNELS * ts * ts * c) as u64,
        });
        IMAGE_CHANNELS
    };
    let steps = n * (s + 1);
    let block = |name: String| LayerCost {
        name,
        params: (2 * c + c * c + c + 2 * ns * c + c * ns + c) as u64,
        macs: (steps * (c * c + 2 * ns * c + 3 * c * ns + c)) as u64,
    };
    for (k, p) in arch.tsma.paths().iter().enumerate() {
        layers.push(block(format!("tsma.path{}.trunk", k + 1)));
        if p.intra.is_some() {
            layers.push(block(format!("tsma.path{}.intra", k + 1)));
        }
        if p.inter.is_some() {
            layers.push(block(format!("tsma.path{}.inter", k + 1)));
        }
    }
    let fw = arch.tsma.fused_width() * c;
    layers.push(LayerCost {
        name: "tsma.fusion".into(),
        params: (2 * fw + fw * c + c) as u64,
        macs: (n * fw * c) as u64,
    });
    layers.push(LayerCost {
        name: "untokenize".into(),
        params: 0,
        macs: (n * c * feat_c * ts * ts) as u64,
    });
    layers.push(conv_cost("R.conv_in", feat_c, c, 3, h, w));
    for i in 0..config.n2_res_blocks {
        let mut l = conv_cost(&format!("R.res{i}"), c, c, 3, h, w);
        l.params *= 2;
        l.macs *= 2;
        layers.push(l);
    }
    let factors = shuffle_factors(config);
    let (mut hh, mut ww) = (h, w);
    for (i, &f) in factors.iter().enumerate().take(factors.len().saturating_sub(1)) {
        layers.push(conv_cost(&format!("R.up{i}"), c, c * f * f, 3, hh, ww));
        hh *= f;
        ww *= f;
    }
    let last = factors.last().copied().unwrap_or(1);
    layers.push(conv_cost("R.conv_out", c, IMAGE_CHANNELS * last * last, 3, hh, ww));
    Complexity {
        lr_height: h,
        lr_width: w,
        channels: c,
        state_dim: ns,
        params: layers.iter().map(|l| l.params).sum(),
        macs: layers.iter().map(|l| l.macs).sum(),
        layers,
    }
}

pub const PAPER_PARAMS: u64 = 3_000_000;
pub const PAPER_GMACS: f64 = 112.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub channels: usize,
    pub params: u64,
    pub macs: u64,
    pub gmacs: f64,
    pub target_params: u64,
    pub paper_gmacs: f64,
    pub lr_height: usize,
    pub lr_width: usize,
}

/// Sweeps `C` over `16..=128` for the width whose parameter count is closest
/// to `target_params`.
pub fn calibrate_channels(config: &ModelConfig, arch: &Architecture, lr: (usize, usize), target_params: u64) -> Calibration {
    let best = (16..=128)
        .map(|c| {
            let cfg = ModelConfig {
                channels: c,
                ..config.clone()
            };
            (c, count_params_macs(&cfg, arch, lr))
        })
        .min_by_key(|(c, r)| (r.params.abs_diff(target_params), *c))
        .expect("non-empty sweep");
    Calibration {
        channels: best.0,
        params: best.1.params,
        macs: best.1.macs,
        gmacs: best.1.macs as f64 / 1e9,
        target_params,
        paper_gmacs: PAPER_GMACS,
        lr_height: lr.0,
        lr_width: lr.1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig {
            channels: 8,
            n1_res_blocks: 1,
            n2_res_blocks: 2,
            window_size: 4,
            temporal_window: 4,
            state_dim: 4,
            flow_radius: 2,
            ..ModelConfig::default()
        }
    }

    fn frames(n: usize, h: usize, w: usize) -> Vec<Tensor> {
        (0..n)
            .map(|k| {
                Tensor::from_fn(&[3, h, w], |i| {
                    let (c, p) = (i / (h * w), i % (h * w));
                    let (r, x) = (p / w, (p % w + k) % w);
                    (((r * 7 + x * 3 + c * 5) % 17) as f32) / 16.0
                })
            })
            .collect()
    }

    #[test]
    fn tsma_shape_and_zero_weights() {
        let cfg = ModelConfig {
            channels: 32,
            ..ModelConfig::default()
        };
        let arch = Architecture::default();
        let w = TsMambaWeights::zeros(&cfg, &arch);
        let q = Tensor::from_fn(&[64, 32], |i| (i % 13) as f32 * 0.1);
        let ctx = Tensor::from_fn(&[64, 3, 32], |i| (i % 7) as f32 * 0.1);
        let out = tsma_apply(&q, &ctx, 8, 8, &arch.tsma, &w.tsma, &cfg).unwrap();
        assert_eq!(out, q);
    }

    #[test]
    fn ablation_graphs() {
        let cfg = ModelConfig::default();
        let count = |a: Ablation, pat: &str| {
            module_graph(&a.architecture(), &cfg)
                .iter()
                .filter(|n| n.contains(pat))
                .count()
        };
        assert_eq!(count(Ablation::Full, ".intra["), 2);
        assert_eq!(count(Ablation::Full, ".inter["), 2);
        assert_eq!(count(Ablation::V1_3, ".intra["), 0);
        assert_eq!(count(Ablation::V1_3, ".inter["), 2);
        assert_eq!(count(Ablation::V1_4, ".inter["), 0);
        assert_eq!(count(Ablation::V1_5, ".intra["), 0);
        assert_eq!(count(Ablation::V1_5, ".inter["), 0);
        assert_eq!(count(Ablation::V1_5, ".trunk["), 2);
        assert_eq!(count(Ablation::V1_1, "selection"), 0);
        assert_eq!(count(Ablation::V1_1, "G."), 0);
        assert_eq!(count(Ablation::V1_6, "->U(1)->"), 0);
        assert_eq!(count(Ablation::V1_6, "->UL(3)->"), 2);
        assert_eq!(count(Ablation::V1_7, "->UL(3)->"), 0);
        assert_eq!(count(Ablation::V1_8, "->(0, 0)->"), 4);
        assert_eq!(
            module_graph(&Ablation::V1_2.architecture(), &cfg),
            module_graph(&Ablation::Full.architecture(), &cfg)
        );
        let g = module_graph(&Architecture::default(), &cfg);
        assert!(g.contains(&"tsma.path1.intra[Scan-1->U(1)->Scan-3]".to_string()));
        assert!(g.contains(&"tsma.path2.inter[Scan-2->UL(3)->Scan-4]".to_string()));
        assert!(g.contains(&"R.up0+shuffle2".to_string()));
    }

    #[test]
    fn forward_dims_and_skip_isolation() {
        let cfg = small_config();
        let arch = Architecture::default();
        let mut w = TsMambaWeights::random(&cfg, &arch, 3);
        let fr = frames(3, 16, 16);
        let out = ts_mamba_forward(&fr, None, &w, &cfg, &arch).unwrap();
        assert_eq!(out.sr.dims(), &[3, 64, 64]);
        assert!(out.sr.is_finite());
        w.zero_recon_output();
        let out = ts_mamba_forward(&fr, None, &w, &cfg, &arch).unwrap();
        assert_eq!(out.sr, bicubic_upsample(&fr[2], 4).unwrap());
    }

    #[test]
    fn static_sequence_matches_single_frame() {
        let cfg = small_config();
        let arch = Architecture::default();
        let w = TsMambaWeights::random(&cfg, &arch, 5);
        let f = frames(1, 16, 16).remove(0);
        let many = ts_mamba_forward(&vec![f.clone(); 4], None, &w, &cfg, &arch).unwrap();
        let one = ts_mamba_forward(&[f], None, &w, &cfg, &arch).unwrap();
        assert!(many.sr.max_abs_diff(&one.sr) <= 1e-5);
        let sel = one.selection.unwrap();
        assert!(sel.scores.iter().flatten().all(|&s| (s - 1.0).abs() < 1e-9));
    }

    #[test]
    fn ablated_architectures_run() {
        let cfg = small_config();
        for a in Ablation::ALL {
            let arch = a.architecture();
            let w = TsMambaWeights::random(&cfg, &arch, 1);
            let out = ts_mamba_forward(&frames(2, 16, 16), None, &w, &cfg, &arch).unwrap();
            assert_eq!(out.sr.dims(), &[3, 64, 64], "{a:?}");
            assert_eq!(w.param_count() as u64, count_params_macs(&cfg, &arch, (16, 16)).params, "{a:?}");
        }
    }

    #[test]
    fn bundle_roundtrip_and_missing_layer() {
        let cfg = small_config();
        let arch = Architecture::default();
        let w = TsMambaWeights::random(&cfg, &arch, 9);
        let dir = tempfile::tempdir().unwrap();
        save_bundle(dir.path(), &w).unwrap();
        assert_eq!(load_bundle(dir.path(), &cfg, &arch).unwrap(), w);
        let mpath = dir.path().join("manifest.json");
        let mut m: BundleManifest = serde_json::from_slice(&fs::read(&mpath).unwrap()).unwrap();
        m.tensors.remove("tsma.path2.inter.ssm.a");
        fs::write(&mpath, serde_json::to_string(&m).unwrap()).unwrap();
        match load_bundle(dir.path(), &cfg, &arch) {
            Err(Error::MissingLayer(name)) => assert_eq!(name, "tsma.path2.inter.ssm.a"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn charbonnier_examples() {
        let a = Tensor::from_fn(&[1, 4, 4], |i| i as f32 / 16.0);
        assert_eq!(charbonnier_loss(&a, &a, 1e-4).unwrap(), 1e-4);
        let x = Tensor::new(vec![1], vec![3e-4]).unwrap();
        let y = Tensor::new(vec![1], vec![0.0]).unwrap();
        let l = charbonnier_loss(&x, &y, 1e-4).unwrap();
        assert!((l - 1e-4 * 10f64.sqrt()).abs() < 1e-9);
        assert!(charbonnier_loss(&a, &x, 1e-4).is_err());
    }

    #[test]
    fn charbonnier_gradient_matches_differences() {
        let r = charbonnier_grad_check(10, 0, 1e-4, 1e-5).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn trajectory_loss_examples() {
        let hr = TrajectorySet {
            rows: 1,
            cols: 1,
            height: 16,
            width: 16,
            slots: 1,
            end_frame: 0,
            coords: vec![[4.0, 8.0]],
        };
        let mut lr = hr.clone();
        lr.coords = vec![[2.0, 2.0]];
        assert_eq!(trajectory_loss(&lr, &hr, 4).unwrap(), 1.0);
        lr.coords = vec![[1.0, 2.0]];
        assert_eq!(trajectory_loss(&lr, &hr, 4).unwrap(), 0.0);
        let big = TrajectorySet::stationary(8, 8, 4, 3, 0).unwrap();
        let small = TrajectorySet::stationary(3, 2, 4, 3, 0).unwrap();
        assert!(trajectory_loss(&small, &big, 4).is_err());
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.2, 0.0, 0.1), 0.2);
        assert!((total_loss(0.2, 0.5, 0.1) - 0.25).abs() < 1e-15);
        assert_eq!(total_loss(0.2, 123.0, 0.0), 0.2);
    }

    #[test]
    fn conv_cost_closed_form() {
        let l = conv_cost("c", 1, 1, 3, 4, 4);
        assert_eq!((l.params, l.macs), (10, 144));
    }

    #[test]
    fn conv_macs_scale_quadratically() {
        let arch = Architecture::default();
        let conv_total = |c| {
            let cfg = ModelConfig {
                channels: c,
                ..ModelConfig::default()
            };
            count_params_macs(&cfg, &arch, (180, 320))
                .layers
                .iter()
                .filter(|l| l.name.starts_with("R.res") || l.name.starts_with("G.res"))
                .map(|l| l.macs)
                .sum::<u64>() as f64
        };
        let ratio = conv_total(64) / conv_total(32);
        assert!((ratio - 4.0).abs() / 4.0 < 0.05);
    }
}
