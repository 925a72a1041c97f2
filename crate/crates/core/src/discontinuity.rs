//! Discontinuity degree of 2×2 regions and the elimination value of a
//! scan-shift-scan procedure.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::par;
use crate::scanorder::{
    compose_scan_shift_scan, fmt_num, generate_scan, grid_lines, hilbert_curve, shift_cell, Cell,
    Dihedral, Procedure, ScanOrder, ScanVariant, ShiftSpec, WindowPartition,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    IntraWindow,
    InterWindow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub anchor: Cell,
    pub kind: RegionKind,
}

impl Region {
    pub fn cells(&self) -> [Cell; 4] {
        let (r, c) = self.anchor;
        [(r, c), (r, c + 1), (r + 1, c), (r + 1, c + 1)]
    }
}

/// Number of gaps in the sorted visit indices of four cells.
pub fn degree_of_indices(mut idx: [usize; 4]) -> u8 {
    idx.sort_unstable();
    idx.windows(2).filter(|w| w[1] - w[0] > 1).count() as u8
}

pub fn region_degree(order: &ScanOrder, region: &Region) -> Result<u8> {
    let (r, c) = region.anchor;
    if r + 1 >= order.size || c + 1 >= order.size {
        return invalid(format!(
            "region at ({r},{c}) exceeds the {0}x{0} grid",
            order.size
        ));
    }
    let ranks = order.ranks();
    Ok(degree_from_ranks(&ranks, order.size, region.anchor))
}

fn degree_from_ranks(ranks: &[usize], size: usize, anchor: Cell) -> u8 {
    let (r, c) = anchor;
    degree_of_indices([
        ranks[r * size + c],
        ranks[r * size + c + 1],
        ranks[(r + 1) * size + c],
        ranks[(r + 1) * size + c + 1],
    ])
}

fn kind_under(partition: &WindowPartition, cells: &[Cell; 4]) -> RegionKind {
    let w = partition.window_of(cells[0]);
    if cells.iter().all(|&x| partition.window_of(x) == w) {
        RegionKind::IntraWindow
    } else {
        RegionKind::InterWindow
    }
}

pub fn enumerate_regions(grid_size: usize, partition: &WindowPartition) -> Result<Vec<Region>> {
    if grid_size < 2 {
        return invalid("grid size must be at least 2");
    }
    if partition.grid_size != grid_size {
        return invalid(format!(
            "partition is for a {} grid, not {grid_size}",
            partition.grid_size
        ));
    }
    let mut out = Vec::with_capacity((grid_size - 1) * (grid_size - 1));
    for r in 0..grid_size - 1 {
        for c in 0..grid_size - 1 {
            let mut region = Region {
                anchor: (r, c),
                kind: RegionKind::IntraWindow,
            };
            region.kind = kind_under(partition, &region.cells());
            out.push(region);
        }
    }
    Ok(out)
}

/// Which windows decide whether a region is intra- or inter-window.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionClassing {
    /// The unshifted windows of the first scan.
    #[default]
    FirstWindows,
    /// The windows of the shifted grid that the second scan runs on.
    ShiftedWindows,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EliminationRule {
    /// `max(0, d_first - d_second)`.
    #[default]
    Partial,
    /// `d_first` when the second scan makes the region consecutive, else 0.
    FullOnly,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EliminationOptions {
    pub classing: RegionClassing,
    pub rule: EliminationRule,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub anchor: Cell,
    pub kind: RegionKind,
    pub d_first: u8,
    pub d_second: u8,
    pub eliminated: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscontinuityReport {
    pub procedure: String,
    pub first: String,
    pub shift: String,
    pub second: String,
    pub grid_size: usize,
    pub window_size: usize,
    pub regions: Vec<RegionRecord>,
    pub delta_intra: u32,
    pub delta_inter: u32,
    pub delta: u32,
}

impl DiscontinuityReport {
    pub fn is_consistent(&self) -> bool {
        let (mut intra, mut inter) = (0u32, 0u32);
        for r in &self.regions {
            if r.eliminated > r.d_first || r.d_first > 3 || r.d_second > 3 {
                return false;
            }
            match r.kind {
                RegionKind::IntraWindow => intra += r.eliminated as u32,
                RegionKind::InterWindow => inter += r.eliminated as u32,
            }
        }
        intra == self.delta_intra && inter == self.delta_inter && self.delta == intra + inter
    }

    /// CSV row `first,shift,second,delta_intra,delta_inter,delta`.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.first, self.shift, self.second, self.delta_intra, self.delta_inter, self.delta
        )
    }
}

pub const CSV_HEADER: &str = "first,shift,second,delta_intra,delta_inter,delta";

pub fn elimination(procedure: &Procedure, partition: &WindowPartition) -> Result<DiscontinuityReport> {
    elimination_with(procedure, partition, EliminationOptions::default())
}

pub fn elimination_with(
    procedure: &Procedure,
    partition: &WindowPartition,
    opts: EliminationOptions,
) -> Result<DiscontinuityReport> {
    let size = procedure.size();
    if partition.grid_size != size {
        return invalid(format!(
            "procedure grid {size} does not match partition grid {}",
            partition.grid_size
        ));
    }
    let first_ranks = procedure.first.ranks();
    let second_ranks = procedure.shifted_second_order.ranks();
    let mut regions = enumerate_regions(size, partition)?;
    if opts.classing == RegionClassing::ShiftedWindows {
        for region in &mut regions {
            let moved = region.cells().map(|x| shift_cell(procedure.shift, size, x));
            region.kind = kind_under(partition, &moved);
        }
    }
    let mut records = Vec::with_capacity(regions.len());
    let (mut intra, mut inter) = (0u32, 0u32);
    for region in regions {
        let d_first = degree_from_ranks(&first_ranks, size, region.anchor);
        let d_second = degree_from_ranks(&second_ranks, size, region.anchor);
        let eliminated = match opts.rule {
            EliminationRule::Partial => d_first.saturating_sub(d_second),
            EliminationRule::FullOnly if d_second == 0 => d_first,
            EliminationRule::FullOnly => 0,
        };
        match region.kind {
            RegionKind::IntraWindow => intra += eliminated as u32,
            RegionKind::InterWindow => inter += eliminated as u32,
        }
        records.push(RegionRecord {
            anchor: region.anchor,
            kind: region.kind,
            d_first,
            d_second,
            eliminated,
        });
    }
    Ok(DiscontinuityReport {
        procedure: procedure.label(),
        first: procedure.first.label.clone(),
        shift: procedure.shift.key(),
        second: procedure.second.label.clone(),
        grid_size: size,
        window_size: partition.window_size,
        regions: records,
        delta_intra: intra,
        delta_inter: inter,
        delta: intra + inter,
    })
}

/// Convenience wrapper building the procedure from scan variants.
pub fn analyze(
    first: ScanVariant,
    shift: ShiftSpec,
    second: ScanVariant,
    grid_size: usize,
    window_size: usize,
) -> Result<DiscontinuityReport> {
    let a = generate_scan(first, grid_size)?;
    let b = generate_scan(second, grid_size)?;
    let p = compose_scan_shift_scan(&a, shift, &b)?;
    elimination(&p, &WindowPartition::new(grid_size, window_size)?)
}

fn rank_key(r: &DiscontinuityReport) -> (std::cmp::Reverse<u32>, std::cmp::Reverse<u32>, String) {
    (
        std::cmp::Reverse(r.delta),
        std::cmp::Reverse(r.delta_inter),
        r.procedure.clone(),
    )
}

/// Evaluates every (first, shift, second) triple over the four variants and
/// returns the reports ranked by δ, then δ_inter, then label.
pub fn search_procedures(
    grid_size: usize,
    window_size: usize,
    shifts: &[ShiftSpec],
    opts: EliminationOptions,
) -> Result<Vec<DiscontinuityReport>> {
    if shifts.is_empty() {
        return invalid("shift list is empty");
    }
    let partition = WindowPartition::new(grid_size, window_size)?;
    let scans: Vec<ScanOrder> = ScanVariant::ALL
        .iter()
        .map(|&v| generate_scan(v, grid_size))
        .collect::<Result<_>>()?;
    let mut triples = Vec::with_capacity(16 * shifts.len());
    for i in 0..4 {
        for &s in shifts {
            for j in 0..4 {
                triples.push((i, s, j));
            }
        }
    }
    let mut reports = par::map_slice(&triples, |&(i, s, j)| {
        let p = compose_scan_shift_scan(&scans[i], s, &scans[j])?;
        elimination_with(&p, &partition, opts)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    reports.sort_by_cached_key(rank_key);
    Ok(reports)
}

/// Outcome of the exhaustive orientation search.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PinningResult {
    pub best_cost: u32,
    /// Every assignment of dihedral curves to Scan-1..Scan-4 that reaches
    /// `best_cost`, in lexicographic order.
    pub optimal: Vec<[Dihedral; 4]>,
}

impl PinningResult {
    pub fn pinned(&self) -> [Dihedral; 4] {
        self.optimal[0]
    }
}

/// Deviation of an orientation assignment from the published elimination
/// values on an 8×8 grid with 4×4 windows: δ_intra = 18 and δ_inter = 0 for
/// Scan-1→U(1)→Scan-3, δ_inter = 6 for the UL(3) and UR(3) variants of that
/// procedure, δ = 18 for the three symmetric optima, and equal δ for UL(k) and
/// UR(k), k = 1..3.
pub fn orientation_cost(assign: [Dihedral; 4], opts: EliminationOptions) -> Result<u32> {
    let (grid, window) = (8, 4);
    let partition = WindowPartition::new(grid, window)?;
    let scans: Vec<ScanOrder> = assign
        .iter()
        .map(|&d| hilbert_curve(d, grid))
        .collect::<Result<_>>()?;
    let report = |i: usize, shift: &str, j: usize| -> Result<DiscontinuityReport> {
        let s: ShiftSpec = shift.parse()?;
        elimination_with(&compose_scan_shift_scan(&scans[i], s, &scans[j])?, &partition, opts)
    };
    let dev = |v: u32, target: u32| v.abs_diff(target);
    let u1 = report(0, "U1", 2)?;
    let mut cost = dev(u1.delta_intra, 18) + dev(u1.delta_inter, 0);
    cost += dev(report(0, "UL3", 2)?.delta_inter, 6);
    cost += dev(report(0, "UR3", 2)?.delta_inter, 6);
    cost += dev(report(1, "L1", 3)?.delta, 18);
    cost += dev(report(2, "D1", 0)?.delta, 18);
    cost += dev(report(3, "R1", 1)?.delta, 18);
    for k in 1..=3 {
        let ul = report(0, &format!("UL{k}"), 2)?.delta;
        let ur = report(0, &format!("UR{k}"), 2)?.delta;
        cost += dev(ul, ur);
    }
    Ok(cost)
}

/// Brute force over all 8·7·6·5 assignments of distinct dihedral curves.
pub fn pin_orientations(opts: EliminationOptions) -> Result<PinningResult> {
    let mut assigns = Vec::with_capacity(1680);
    for a in 0..8u8 {
        for b in 0..8u8 {
            for c in 0..8u8 {
                for d in 0..8u8 {
                    let set = [a, b, c, d];
                    if (0..4).all(|i| (i + 1..4).all(|j| set[i] != set[j])) {
                        assigns.push(set.map(Dihedral));
                    }
                }
            }
        }
    }
    let costs = par::map_slice(&assigns, |&a| orientation_cost(a, opts))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let best_cost = *costs.iter().min().expect("non-empty search space");
    let optimal = assigns
        .into_iter()
        .zip(costs)
        .filter(|&(_, c)| c == best_cost)
        .map(|(a, _)| a)
        .collect();
    Ok(PinningResult { best_cost, optimal })
}

/// Both scans over the grid, window boundaries, and a circle on every region
/// with eliminated discontinuity (green, red, gray for 1, 2, 3).
pub fn annotate_svg(procedure: &Procedure, report: &DiscontinuityReport, cell_px: usize) -> String {
    let size = procedure.size();
    let side = size * cell_px;
    let px = |v: usize| v as f64 * cell_px as f64 + cell_px as f64 / 2.0;
    let polyline = |order: &ScanOrder, color: &str, dash: &str| {
        let pts: Vec<String> = order
            .order
            .iter()
            .map(|&(r, c)| format!("{},{}", fmt_num(px(c)), fmt_num(px(r))))
            .collect();
        format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"{dash} points=\"{}\"/>\n",
            pts.join(" ")
        )
    };
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{side}\" height=\"{side}\" viewBox=\"0 0 {side} {side}\">\n"
    );
    svg.push_str(&grid_lines(size, cell_px));
    if report.window_size > 0 {
        for i in (0..=size).step_by(report.window_size) {
            let p = i * cell_px;
            svg.push_str(&format!(
                "<line x1=\"0\" y1=\"{p}\" x2=\"{side}\" y2=\"{p}\" stroke=\"#000000\" stroke-width=\"2\"/>\n"
            ));
            svg.push_str(&format!(
                "<line x1=\"{p}\" y1=\"0\" x2=\"{p}\" y2=\"{side}\" stroke=\"#000000\" stroke-width=\"2\"/>\n"
            ));
        }
    }
    svg.push_str(&polyline(&procedure.first, "#1f4e9c", ""));
    svg.push_str(&polyline(
        &procedure.shifted_second_order,
        "#d98c1f",
        " stroke-dasharray=\"4 3\"",
    ));
    for rec in &report.regions {
        let color = match rec.eliminated {
            0 => continue,
            1 => "#2ca02c",
            2 => "#d62728",
            _ => "#7f7f7f",
        };
        let cx = (rec.anchor.1 + 1) * cell_px;
        let cy = (rec.anchor.0 + 1) * cell_px;
        svg.push_str(&format!(
            "<circle cx=\"{cx}\" cy=\"{cy}\" r=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            cell_px / 3
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
