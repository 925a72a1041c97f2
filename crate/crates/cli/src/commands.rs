use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::Serialize;
use serde_json::json;

use tsm_core::discontinuity::{
    annotate_svg, degree_of_indices, elimination_with, pin_orientations, search_procedures, EliminationOptions,
    EliminationRule, RegionClassing, CSV_HEADER,
};
use tsm_core::model::{
    calibrate_channels, charbonnier_grad_check, charbonnier_loss, count_params_macs, load_bundle, load_tensors,
    module_graph, save_bundle, save_tensor_bundle, temporal_slots, total_loss, trajectories_over,
    trajectory_loss, ts_mamba_forward, Embedding, PipelineConfig, TsMambaWeights, IMAGE_CHANNELS, PAPER_PARAMS,
};
use tsm_core::numerics::{read_image, write_image, Tensor};
use tsm_core::scanorder::{compose_scan_shift_scan, generate_scan, ScanOrder, ScanVariant, ShiftSpec, WindowPartition};
use tsm_core::ssm::{grad_check as ssm_grad_check, scan_apply, SelectiveScanParams};
use tsm_core::trajectory::{block_matching_flow, generate_tokens, select_tokens, TokenField, TrajectorySet};

use crate::report::{list_files, write_out, CliError, Inputs, ReportEnvelope};

type CmdResult = Result<ReportEnvelope, CliError>;

fn usage<T>(msg: impl Into<String>) -> Result<T, CliError> {
    Err(CliError::Usage(msg.into()))
}

fn parse_json<T: serde::de::DeserializeOwned>(bytes: &[u8], what: &Path) -> Result<T, CliError> {
    serde_json::from_slice(bytes).map_err(|e| CliError::Usage(format!("{}: {e}", what.display())))
}

fn tstf(inputs: &mut Inputs, path: &Path) -> Result<Tensor, CliError> {
    Ok(Tensor::from_tstf_bytes(&inputs.read(path)?)?)
}

fn save_tstf(path: &Path, t: &Tensor) -> Result<(), CliError> {
    write_out(path, &t.to_tstf_bytes())
}

#[derive(Args, Debug)]
pub struct ScanGenArgs {
    #[arg(long)]
    variant: ScanVariant,
    #[arg(long)]
    size: usize,
    /// Order JSON output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// SVG polyline output.
    #[arg(long)]
    svg: Option<PathBuf>,
    #[arg(long, default_value_t = 24)]
    cell_px: usize,
}

pub fn scan_gen(a: ScanGenArgs) -> CmdResult {
    let order = generate_scan(a.variant, a.size)?;
    if let Some(p) = &a.out {
        let text = serde_json::to_string(&order).map_err(|e| CliError::Internal(e.to_string()))?;
        write_out(p, (text + "\n").as_bytes())?;
    }
    if let Some(p) = &a.svg {
        write_out(p, order.to_svg(a.cell_px).as_bytes())?;
    }
    ReportEnvelope::new("scan gen", Inputs::default(), &order)
}

#[derive(Args, Debug)]
pub struct ScanCheckArgs {
    /// Order JSON as written by `scan gen`.
    #[arg(long)]
    order: PathBuf,
    /// Report but do not fail on non-adjacent consecutive cells.
    #[arg(long)]
    allow_gaps: bool,
}

#[derive(Serialize)]
struct ScanCheckPayload {
    variant: String,
    size: usize,
    len: usize,
    bijection: bool,
    continuous: bool,
    aligned_blocks_consecutive: bool,
    pass: bool,
}

pub fn scan_check(a: ScanCheckArgs) -> CmdResult {
    let mut inputs = Inputs::default();
    let order: ScanOrder = parse_json(&inputs.read(&a.order)?, &a.order)?;
    let bijection = order.is_bijection();
    let continuous = bijection && order.is_continuous();
    let aligned = bijection && aligned_blocks_consecutive(&order);
    let pass = bijection && aligned && (continuous || a.allow_gaps);
    let payload = ScanCheckPayload {
        variant: order.label.clone(),
        size: order.size,
        len: order.order.len(),
        bijection,
        continuous,
        aligned_blocks_consecutive: aligned,
        pass,
    };
    if !pass {
        eprintln!("{}", serde_json::to_string(&payload).unwrap_or_default());
        return Err(CliError::Invariant(format!("scan order {} fails its checks", a.order.display())));
    }
    ReportEnvelope::new("scan check", inputs, payload)
}

fn aligned_blocks_consecutive(order: &ScanOrder) -> bool {
    let n = order.size;
    if n < 2 {
        return true;
    }
    let ranks = order.ranks();
    (0..n / 2).all(|br| {
        (0..n / 2).all(|bc| {
            let (r, c) = (2 * br, 2 * bc);
            degree_of_indices([
                ranks[r * n + c],
                ranks[r * n + c + 1],
                ranks[(r + 1) * n + c],
                ranks[(r + 1) * n + c + 1],
            ]) == 0
        })
    })
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Classing {
    First,
    Shifted,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Rule {
    Partial,
    FullOnly,
}

#[derive(Args, Debug)]
struct ElimArgs {
    /// Windows that classify a region as intra or inter.
    #[arg(long, value_enum, default_value = "first")]
    classing: Classing,
    /// Per-region elimination rule.
    #[arg(long, value_enum, default_value = "partial")]
    rule: Rule,
}

impl ElimArgs {
    fn options(&self) -> EliminationOptions {
        EliminationOptions {
            classing: match self.classing {
                Classing::First => RegionClassing::FirstWindows,
                Classing::Shifted => RegionClassing::ShiftedWindows,
            },
            rule: match self.rule {
                Rule::Partial => EliminationRule::Partial,
                Rule::FullOnly => EliminationRule::FullOnly,
            },
        }
    }
}

#[derive(Args, Debug)]
pub struct DiscAnalyzeArgs {
    #[arg(long)]
    first: ScanVariant,
    #[arg(long, allow_hyphen_values = true)]
    shift: ShiftSpec,
    #[arg(long)]
    second: ScanVariant,
    #[arg(long, default_value_t = 8)]
    grid: usize,
    #[arg(long, default_value_t = 4)]
    window: usize,
    #[command(flatten)]
    elim: ElimArgs,
    /// Report JSON output (the same object as the payload).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Annotated SVG output.
    #[arg(long)]
    svg: Option<PathBuf>,
    #[arg(long, default_value_t = 40)]
    cell_px: usize,
}

pub fn disc_analyze(a: DiscAnalyzeArgs) -> CmdResult {
    let first = generate_scan(a.first, a.grid)?;
    let second = generate_scan(a.second, a.grid)?;
    let proc_ = compose_scan_shift_scan(&first, a.shift, &second)?;
    let part = WindowPartition::new(a.grid, a.window)?;
    let report = elimination_with(&proc_, &part, a.elim.options())?;
    if !report.is_consistent() {
        return Err(CliError::Invariant("elimination totals are inconsistent".into()));
    }
    if let Some(p) = &a.out {
        let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Internal(e.to_string()))?;
        write_out(p, (text + "\n").as_bytes())?;
    }
    if let Some(p) = &a.svg {
        write_out(p, annotate_svg(&proc_, &report, a.cell_px).as_bytes())?;
    }
    ReportEnvelope::new("disc analyze", Inputs::default(), &report)
}

#[derive(Args, Debug)]
pub struct DiscSearchArgs {
    #[arg(long, default_value_t = 8)]
    grid: usize,
    #[arg(long, default_value_t = 4)]
    window: usize,
    /// Comma-separated shifts (default: the 24 directional shifts of size 1..3).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    shifts: Vec<ShiftSpec>,
    #[command(flatten)]
    elim: ElimArgs,
    /// CSV output with every ranked procedure.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Rows of the ranking echoed in the report.
    #[arg(long, default_value_t = 10)]
    top: usize,
}

#[derive(Serialize)]
struct SearchRow {
    procedure: String,
    delta_intra: u32,
    delta_inter: u32,
    delta: u32,
}

pub fn disc_search(a: DiscSearchArgs) -> CmdResult {
    if a.grid > 64 {
        return usage("--grid above 64 is outside the exhaustive search range");
    }
    let shifts = if a.shifts.is_empty() {
        ShiftSpec::default_set()
    } else {
        a.shifts.clone()
    };
    let reports = search_procedures(a.grid, a.window, &shifts, a.elim.options())?;
    if let Some(p) = &a.out {
        let mut csv = String::from(CSV_HEADER);
        csv.push('\n');
        for r in &reports {
            csv.push_str(&r.csv_row());
            csv.push('\n');
        }
        write_out(p, csv.as_bytes())?;
    }
    let row = |r: &tsm_core::discontinuity::DiscontinuityReport| SearchRow {
        procedure: r.procedure.clone(),
        delta_intra: r.delta_intra,
        delta_inter: r.delta_inter,
        delta: r.delta,
    };
    let payload = json!({
        "grid": a.grid,
        "window": a.window,
        "shifts": shifts.iter().map(|s| s.key()).collect::<Vec<_>>(),
        "count": reports.len(),
        "max_delta": reports.iter().map(|r| r.delta).max().unwrap_or(0),
        "max_delta_intra": reports.iter().map(|r| r.delta_intra).max().unwrap_or(0),
        "max_delta_inter": reports.iter().map(|r| r.delta_inter).max().unwrap_or(0),
        "top": reports.iter().take(a.top).map(row).collect::<Vec<_>>(),
    });
    ReportEnvelope::new("disc search", Inputs::default(), payload)
}

#[derive(Args, Debug)]
pub struct DiscPinArgs {
    #[command(flatten)]
    elim: ElimArgs,
}

pub fn disc_pin(a: DiscPinArgs) -> CmdResult {
    let r = pin_orientations(a.elim.options())?;
    let payload = json!({
        "best_cost": r.best_cost,
        "optimal": r.optimal.iter().map(|o| o.map(|d| d.0)).collect::<Vec<_>>(),
        "pinned": r.pinned().map(|d| d.0),
    });
    ReportEnvelope::new("disc pin", Inputs::default(), payload)
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Model configuration JSON (hyper-parameters plus `ablation`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Weight bundle directory; seeded random weights when absent.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ModelArgs {
    fn config(&self, inputs: &mut Inputs) -> Result<PipelineConfig, CliError> {
        let cfg: PipelineConfig = match &self.config {
            Some(p) => parse_json(&inputs.read(p)?, p)?,
            None => PipelineConfig::default(),
        };
        cfg.model.validate()?;
        Ok(cfg)
    }

    fn weights(&self, inputs: &mut Inputs, cfg: &PipelineConfig) -> Result<TsMambaWeights, CliError> {
        let arch = cfg.ablation.architecture();
        match &self.weights {
            Some(dir) => {
                inputs.read_dir(dir)?;
                Ok(load_bundle(dir, &cfg.model, &arch)?)
            }
            None => Ok(TsMambaWeights::random(&cfg.model, &arch, self.seed)),
        }
    }
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("pgm" | "ppm" | "pnm")
    )
}

fn is_tstf(p: &Path) -> bool {
    p.extension().and_then(|e| e.to_str()) == Some("tstf")
}

fn frame_files(dir: &Path, keep: impl Fn(&Path) -> bool) -> Result<Vec<PathBuf>, CliError> {
    let files: Vec<PathBuf> = list_files(dir)?.into_iter().filter(|p| keep(p)).collect();
    if files.is_empty() {
        return usage(format!("{}: no frames found", dir.display()));
    }
    Ok(files)
}

/// Reads a PGM/PPM or `[3, H, W]` TSTF frame; grey frames are replicated
/// to three channels.
fn load_frame(inputs: &mut Inputs, p: &Path) -> Result<Tensor, CliError> {
    let t = if is_image(p) {
        inputs.read(p)?;
        read_image(p)?
    } else {
        tstf(inputs, p)?
    };
    let (c, h, w) = t.dims3()?;
    match c {
        IMAGE_CHANNELS => Ok(t),
        1 => {
            let mut data = Vec::with_capacity(3 * h * w);
            for _ in 0..3 {
                data.extend_from_slice(t.data());
            }
            Ok(Tensor::new(vec![3, h, w], data)?)
        }
        _ => usage(format!("{}: frames need 1 or 3 channels, got {c}", p.display())),
    }
}

fn load_flows(inputs: &mut Inputs, dir: Option<&PathBuf>) -> Result<Option<Vec<Tensor>>, CliError> {
    dir.map(|d| {
        frame_files(d, is_tstf)?
            .iter()
            .map(|p| tstf(inputs, p))
            .collect::<Result<Vec<_>, _>>()
    })
    .transpose()
}

#[derive(Args, Debug)]
pub struct TrajSelectArgs {
    /// Directory of PGM/PPM frames, or of `[Ht, Wt, C]` TSTF token fields,
    /// oldest first by file name.
    #[arg(long)]
    frames: PathBuf,
    /// Directory of `[2, H, W]` TSTF flows, one per consecutive frame pair.
    #[arg(long)]
    flows: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    /// Writes `selected.tstf` (`[N, s, C]`) and `trajectories.tstf`
    /// (`[Ht, Wt, T, 2]`) here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn trajectory_tensor(t: &TrajectorySet) -> Result<Tensor, CliError> {
    let data = t.coords.iter().flat_map(|c| c.iter().copied()).collect();
    Ok(Tensor::new(vec![t.rows, t.cols, t.slots, 2], data)?)
}

pub fn traj_select(a: TrajSelectArgs) -> CmdResult {
    let mut inputs = Inputs::default();
    let cfg = a.model.config(&mut inputs)?;
    let mc = &cfg.model;
    let files = frame_files(&a.frames, |p| is_image(p) || is_tstf(p))?;
    let images = files.iter().all(|p| is_image(p));
    if !images && files.iter().any(|p| is_image(p)) {
        return usage("--frames mixes images and token fields");
    }
    let ts = mc.token_size;
    let slots = temporal_slots(files.len(), mc.temporal_window);
    let mut used = slots.clone();
    used.dedup();

    let (fields, frames, flow_source) = if images {
        let arch = cfg.ablation.architecture();
        if !arch.use_trajectory {
            return usage("the configured ablation has no trajectories");
        }
        let weights = a.model.weights(&mut inputs, &cfg)?;
        let Embedding::Tokenizer(tok) = &weights.embedding else {
            return usage("weights carry no feature extractor");
        };
        let mut frames = vec![None; files.len()];
        let mut fields = vec![None; files.len()];
        for &k in &used {
            let f = load_frame(&mut inputs, &files[k])?;
            fields[k] = Some(generate_tokens(&f, k, mc, tok)?.1);
            frames[k] = Some(f);
        }
        let src = if a.flows.is_some() { "given" } else { "block_matching" };
        (fields, frames, src)
    } else {
        let mut fields = vec![None; files.len()];
        for &k in &used {
            let t = tstf(&mut inputs, &files[k])?;
            let [ht, wt, c] = t.dims()[..] else {
                return usage(format!("{}: token fields are [Ht, Wt, C]", files[k].display()));
            };
            fields[k] = Some(TokenField::new(k, ht, wt, t.reshape(&[ht * wt, c])?)?);
        }
        let src = if a.flows.is_some() { "given" } else { "zero" };
        (fields, vec![None; files.len()], src)
    };
    let flows = load_flows(&mut inputs, a.flows.as_ref())?;
    if let Some(f) = &flows {
        if f.len() + 1 != files.len() {
            return usage(format!("{} frames need {} flows, got {}", files.len(), files.len() - 1, f.len()));
        }
    }
    let q = fields[slots[slots.len() - 1]].clone().expect("current frame loaded");
    for f in fields.iter().flatten() {
        if (f.ht, f.wt, f.channels()) != (q.ht, q.wt, q.channels()) {
            return usage("token fields differ in shape");
        }
    }
    let traj = trajectories_over(&slots, (q.ht, q.wt), ts, |a_, b| match (&flows, &frames[a_], &frames[b]) {
        (Some(fl), _, _) => Ok(fl[b - 1].clone()),
        (None, Some(fa), Some(fb)) => block_matching_flow(fa, fb, mc.flow_radius),
        _ => Ok(Tensor::zeros(&[2, q.ht * ts, q.wt * ts])),
    })?;
    let pool: Vec<TokenField> = slots[..slots.len() - 1]
        .iter()
        .map(|&k| fields[k].clone().expect("pool frame loaded"))
        .collect();
    let sel = select_tokens(&q, &pool, &traj, mc.s_selected, mc.similarity)?;
    if let Some(dir) = &a.out_dir {
        fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))?;
        save_tstf(&dir.join("selected.tstf"), &sel.context_by_frame()?)?;
        save_tstf(&dir.join("trajectories.tstf"), &trajectory_tensor(&traj)?)?;
    }
    let payload = json!({
        "frames": files.len(),
        "slots": slots,
        "flow_source": flow_source,
        "token_grid": [q.ht, q.wt],
        "trajectories": {
            "rows": traj.rows,
            "cols": traj.cols,
            "slots": traj.slots,
            "in_bounds": traj.in_bounds(),
            "anchored": traj.anchored(ts),
        },
        "selection": sel,
    });
    ReportEnvelope::new("traj select", inputs, payload)
}

#[derive(Args, Debug)]
pub struct SsmRunArgs {
    /// `[L, C]` TSTF sequence.
    #[arg(long)]
    input: PathBuf,
    /// Bundle directory holding w_delta, b_delta, w_b, w_c, a, d; seeded
    /// random parameters when absent.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    state: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the parameters used as a bundle.
    #[arg(long)]
    write_params: Option<PathBuf>,
}

pub fn ssm_run(a: SsmRunArgs) -> CmdResult {
    let mut inputs = Inputs::default();
    let u = tstf(&mut inputs, &a.input)?;
    let (len, c) = u.dims2()?;
    let params = match &a.params {
        Some(dir) => {
            inputs.read_dir(dir)?;
            let p = SelectiveScanParams::from_tensors(&load_tensors(dir, &SelectiveScanParams::TENSOR_NAMES)?)?;
            if p.channels != c {
                return usage(format!("parameters are for {} channels, input has {c}", p.channels));
            }
            p
        }
        None => {
            if a.state == 0 {
                return usage("--state must be positive");
            }
            SelectiveScanParams::seeded(c, a.state, a.seed)
        }
    };
    let y = Tensor::new(vec![len, c], scan_apply(&params, u.data(), len)?)?;
    if !y.is_finite() {
        return Err(CliError::Invariant("selective scan produced non-finite values".into()));
    }
    save_tstf(&a.out, &y)?;
    if let Some(dir) = &a.write_params {
        save_tensor_bundle(dir, &params.to_tensors())?;
    }
    let payload = json!({
        "len": len,
        "channels": c,
        "state": params.state,
        "params_source": if a.params.is_some() { "bundle" } else { "seeded" },
        "max_abs_output": y.data().iter().fold(0.0f32, |m, v| m.max(v.abs())),
        "output_sha256": crate::report::sha256_hex(&y.to_tstf_bytes()),
    });
    ReportEnvelope::new("ssm run", inputs, payload)
}

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 12)]
    len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 1e-5)]
    loss_tolerance: f64,
}

pub fn grad_check(a: GradCheckArgs) -> CmdResult {
    if a.instances == 0 || a.len == 0 || a.step <= 0.0 {
        return usage("--instances, --len and --step must be positive");
    }
    let scan = ssm_grad_check(a.instances, a.len, a.seed, a.step, a.tolerance)?;
    let loss = charbonnier_grad_check(a.instances, a.seed, 1e-4, a.loss_tolerance)?;
    let pass = scan.pass && loss.pass;
    let payload = json!({ "selective_scan": scan, "charbonnier": loss, "pass": pass });
    eprintln!(
        "selective scan: max relative error {:.3e} ({}); charbonnier: {:.3e} ({})",
        scan.max_rel_error,
        if scan.pass { "pass" } else { "FAIL" },
        loss.max_rel_error,
        if loss.pass { "pass" } else { "FAIL" }
    );
    if !pass {
        eprintln!("{}", serde_json::to_string(&payload).unwrap_or_default());
        return Err(CliError::Invariant("gradient check failed".into()));
    }
    ReportEnvelope::new("grad check", Inputs::default(), payload)
}

#[derive(Args, Debug)]
pub struct ModelForwardArgs {
    /// Directory of PGM/PPM or `[3, H, W]` TSTF frames, oldest first by name.
    #[arg(long)]
    frames: PathBuf,
    /// Directory of `[2, H, W]` TSTF flows; block matching when absent.
    #[arg(long)]
    flows: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    /// Output image (`.ppm`/`.pgm`) or tensor (`.tstf`).
    #[arg(long)]
    out: PathBuf,
    /// Zero the last reconstruction convolution.
    #[arg(long)]
    zero_recon: bool,
}

pub fn model_forward(a: ModelForwardArgs) -> CmdResult {
    let mut inputs = Inputs::default();
    let cfg = a.model.config(&mut inputs)?;
    let arch = cfg.ablation.architecture();
    let mut weights = a.model.weights(&mut inputs, &cfg)?;
    if a.zero_recon {
        weights.zero_recon_output();
    }
    let files = frame_files(&a.frames, |p| is_image(p) || is_tstf(p))?;
    let frames = files
        .iter()
        .map(|p| load_frame(&mut inputs, p))
        .collect::<Result<Vec<_>, _>>()?;
    let flows = load_flows(&mut inputs, a.flows.as_ref())?;
    let out = ts_mamba_forward(&frames, flows.as_deref(), &weights, &cfg.model, &arch)?;
    if !out.sr.is_finite() {
        return Err(CliError::Invariant("forward pass produced non-finite values".into()));
    }
    if is_tstf(&a.out) {
        save_tstf(&a.out, &out.sr)?;
    } else if is_image(&a.out) {
        write_image(&a.out, &out.sr)?;
    } else {
        return usage("--out must end in .tstf, .ppm or .pgm");
    }
    let (_, h, w) = frames[0].dims3()?;
    let payload = json!({
        "frames": frames.len(),
        "ablation": cfg.ablation,
        "lr": [h, w],
        "sr": out.sr.dims(),
        "params": weights.param_count(),
        "flow_source": if a.flows.is_some() { "given" } else { "block_matching" },
        "zero_recon": a.zero_recon,
        "sr_sha256": crate::report::sha256_hex(&out.sr.to_tstf_bytes()),
    });
    ReportEnvelope::new("model forward", inputs, payload)
}

#[derive(Args, Debug)]
pub struct ModelCountArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 180)]
    height: usize,
    #[arg(long, default_value_t = 320)]
    width: usize,
    /// Parameter count the channel sweep aims for.
    #[arg(long, default_value_t = PAPER_PARAMS)]
    target_params: u64,
}

pub fn model_count(a: ModelCountArgs) -> CmdResult {
    let mut inputs = Inputs::default();
    let cfg: PipelineConfig = match &a.config {
        Some(p) => parse_json(&inputs.read(p)?, p)?,
        None => PipelineConfig::default(),
    };
    cfg.model.validate()?;
    if a.height == 0 || a.width == 0 {
        return usage("--height and --width must be positive");
    }
    let arch = cfg.ablation.architecture();
    let complexity = count_params_macs(&cfg.model, &arch, (a.height, a.width));
    let calibration = calibrate_channels(&cfg.model, &arch, (a.height, a.width), a.target_params);
    let payload = json!({
        "ablation": cfg.ablation,
        "modules": module_graph(&arch, &cfg.model),
        "complexity": complexity,
        "calibration": calibration,
    });
    ReportEnvelope::new("model count", inputs, payload)
}

#[derive(Args, Debug)]
pub struct ModelInitArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Bundle directory to create.
    #[arg(long)]
    out: PathBuf,
}

pub fn model_init(a: ModelInitArgs) -> CmdResult {
    let mut inputs = Inputs::default();
    let cfg: PipelineConfig = match &a.config {
        Some(p) => parse_json(&inputs.read(p)?, p)?,
        None => PipelineConfig::default(),
    };
    cfg.model.validate()?;
    let w = TsMambaWeights::random(&cfg.model, &cfg.ablation.architecture(), a.seed);
    save_bundle(&a.out, &w)?;
    let payload = json!({
        "ablation": cfg.ablation,
        "seed": a.seed,
        "tensors": w.named_tensors().len(),
        "params": w.param_count(),
    });
    ReportEnvelope::new("model init", inputs, payload)
}

#[derive(Args, Debug)]
pub struct LossEvalArgs {
    /// Super-resolved frame (TSTF).
    #[arg(long)]
    sr: PathBuf,
    /// Ground-truth frame (TSTF).
    #[arg(long)]
    hr: PathBuf,
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    /// LR trajectories, `[Ht, Wt, T, 2]` TSTF.
    #[arg(long, requires = "hr_traj")]
    lr_traj: Option<PathBuf>,
    /// HR trajectories, `[Ht, Wt, T, 2]` TSTF.
    #[arg(long, requires = "lr_traj")]
    hr_traj: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    scale: usize,
}

fn read_trajectories(inputs: &mut Inputs, p: &Path) -> Result<TrajectorySet, CliError> {
    let t = tstf(inputs, p)?;
    let [rows, cols, slots, 2] = t.dims()[..] else {
        return usage(format!("{}: trajectories are [Ht, Wt, T, 2]", p.display()));
    };
    let coords = t.data().chunks_exact(2).map(|c| [c[0], c[1]]).collect();
    Ok(TrajectorySet {
        rows,
        cols,
        height: rows,
        width: cols,
        slots,
        end_frame: 0,
        coords,
    })
}

pub fn loss_eval(a: LossEvalArgs) -> CmdResult {
    if a.lambda < 0.0 || a.lambda.is_nan() {
        return usage("--lambda must be non-negative");
    }
    let mut inputs = Inputs::default();
    let sr = tstf(&mut inputs, &a.sr)?;
    let hr = tstf(&mut inputs, &a.hr)?;
    let spatial = charbonnier_loss(&sr, &hr, a.epsilon)?;
    let trajectory = match (&a.lr_traj, &a.hr_traj) {
        (Some(l), Some(h)) => {
            let lt = read_trajectories(&mut inputs, l)?;
            let ht = read_trajectories(&mut inputs, h)?;
            Some(trajectory_loss(&lt, &ht, a.scale)?)
        }
        _ => None,
    };
    let payload = json!({
        "epsilon": a.epsilon,
        "lambda": a.lambda,
        "spatial": spatial,
        "trajectory": trajectory,
        "total": total_loss(spatial, trajectory.unwrap_or(0.0), a.lambda),
    });
    ReportEnvelope::new("loss eval", inputs, payload)
}
