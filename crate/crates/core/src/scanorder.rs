//! Hilbert scan variants, cyclic shifts and scan-shift-scan composition.
//!
//! Grids are square with a power-of-two side. Cells are `(row, col)` pairs,
//! row 0 at the top. A [`ScanOrder`] lists every cell exactly once in visit
//! order.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub type Cell = (usize, usize);

/// One of the eight symmetries of the square, applied to the base curve.
///
/// Index `k` means: rotate `k % 4` quarter turns clockwise, then mirror the
/// columns when `k >= 4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Dihedral(pub u8);

impl Dihedral {
    pub const ALL: [Dihedral; 8] = [
        Dihedral(0),
        Dihedral(1),
        Dihedral(2),
        Dihedral(3),
        Dihedral(4),
        Dihedral(5),
        Dihedral(6),
        Dihedral(7),
    ];

    pub fn apply(self, cell: Cell, size: usize) -> Cell {
        let (mut r, mut c) = cell;
        for _ in 0..(self.0 % 4) {
            let nr = c;
            let nc = size - 1 - r;
            r = nr;
            c = nc;
        }
        if self.0 >= 4 {
            c = size - 1 - c;
        }
        (r, c)
    }
}

/// Orientation of Scan-1..Scan-4, pinned by exhaustive search over all
/// assignments of the eight dihedral curves (see
/// [`crate::discontinuity::pin_orientations`]). Scan-1 opens to the bottom,
/// Scan-2 to the right, Scan-3 to the top and Scan-4 to the left. Reversing
/// any of the four paths gives an equally good assignment.
pub const PINNED_ORIENTATIONS: [Dihedral; 4] = [Dihedral(3), Dihedral(2), Dihedral(1), Dihedral(0)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanVariant {
    Scan1,
    Scan2,
    Scan3,
    Scan4,
}

impl ScanVariant {
    pub const ALL: [ScanVariant; 4] = [
        ScanVariant::Scan1,
        ScanVariant::Scan2,
        ScanVariant::Scan3,
        ScanVariant::Scan4,
    ];

    pub fn index(self) -> usize {
        match self {
            ScanVariant::Scan1 => 0,
            ScanVariant::Scan2 => 1,
            ScanVariant::Scan3 => 2,
            ScanVariant::Scan4 => 3,
        }
    }

    pub fn orientation(self) -> Dihedral {
        PINNED_ORIENTATIONS[self.index()]
    }

    /// Short machine name, e.g. `scan1`.
    pub fn key(self) -> &'static str {
        match self {
            ScanVariant::Scan1 => "scan1",
            ScanVariant::Scan2 => "scan2",
            ScanVariant::Scan3 => "scan3",
            ScanVariant::Scan4 => "scan4",
        }
    }
}

impl fmt::Display for ScanVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Scan-{}", self.index() + 1)
    }
}

impl FromStr for ScanVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| !matches!(c, '-' | '_' | ' '))
            .collect::<String>()
            .to_ascii_lowercase();
        match norm.as_str() {
            "scan1" | "1" => Ok(ScanVariant::Scan1),
            "scan2" | "2" => Ok(ScanVariant::Scan2),
            "scan3" | "3" => Ok(ScanVariant::Scan3),
            "scan4" | "4" => Ok(ScanVariant::Scan4),
            _ => invalid(format!("unknown scan variant `{s}`")),
        }
    }
}

/// A visit order over all cells of a `size × size` grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanOrder {
    #[serde(rename = "variant")]
    pub label: String,
    pub size: usize,
    pub order: Vec<Cell>,
}

impl ScanOrder {
    pub fn new(label: impl Into<String>, size: usize, order: Vec<Cell>) -> Result<Self> {
        let s = ScanOrder {
            label: label.into(),
            size,
            order,
        };
        if !s.is_bijection() {
            return invalid(format!(
                "order `{}` is not a permutation of the {}x{} grid",
                s.label, size, size
            ));
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Visit rank of every cell, indexed row-major.
    pub fn ranks(&self) -> Vec<usize> {
        let mut ranks = vec![usize::MAX; self.size * self.size];
        for (i, &(r, c)) in self.order.iter().enumerate() {
            ranks[r * self.size + c] = i;
        }
        ranks
    }

    pub fn is_bijection(&self) -> bool {
        let n = self.size * self.size;
        if self.size == 0 || self.order.len() != n {
            return false;
        }
        let mut seen = vec![false; n];
        for &(r, c) in &self.order {
            if r >= self.size || c >= self.size || seen[r * self.size + c] {
                return false;
            }
            seen[r * self.size + c] = true;
        }
        true
    }

    /// True when consecutive cells are 4-neighbours.
    pub fn is_continuous(&self) -> bool {
        self.order
            .windows(2)
            .all(|w| w[0].0.abs_diff(w[1].0) + w[0].1.abs_diff(w[1].1) == 1)
    }

    /// Renders the order as a single polyline through cell centres.
    pub fn to_svg(&self, cell_px: usize) -> String {
        let side = self.size * cell_px;
        let half = cell_px as f64 / 2.0;
        let points: Vec<String> = self
            .order
            .iter()
            .map(|&(r, c)| {
                format!(
                    "{},{}",
                    fmt_num(c as f64 * cell_px as f64 + half),
                    fmt_num(r as f64 * cell_px as f64 + half)
                )
            })
            .collect();
        let mut svg = String::new();
        svg.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{side}\" height=\"{side}\" viewBox=\"0 0 {side} {side}\">\n"
        ));
        svg.push_str(&grid_lines(self.size, cell_px));
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"#1f4e9c\" stroke-width=\"2\" points=\"{}\"/>\n",
            points.join(" ")
        ));
        if let Some(&(r, c)) = self.order.first() {
            svg.push_str(&format!(
                "<circle cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"#1f4e9c\"/>\n",
                fmt_num(c as f64 * cell_px as f64 + half),
                fmt_num(r as f64 * cell_px as f64 + half)
            ));
        }
        svg.push_str("</svg>\n");
        svg
    }
}

pub(crate) fn fmt_num(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{v:.1}")
    }
}

pub(crate) fn grid_lines(size: usize, cell_px: usize) -> String {
    let side = size * cell_px;
    let mut out = String::new();
    for i in 0..=size {
        let p = i * cell_px;
        out.push_str(&format!(
            "<line x1=\"0\" y1=\"{p}\" x2=\"{side}\" y2=\"{p}\" stroke=\"#cccccc\" stroke-width=\"1\"/>\n"
        ));
        out.push_str(&format!(
            "<line x1=\"{p}\" y1=\"0\" x2=\"{p}\" y2=\"{side}\" stroke=\"#cccccc\" stroke-width=\"1\"/>\n"
        ));
    }
    out
}

fn check_power_of_two(size: usize) -> Result<()> {
    if size == 0 || !size.is_power_of_two() {
        return invalid(format!("grid size must be a positive power of two, got {size}"));
    }
    Ok(())
}

// Classic iterative index-to-coordinate walk of the Hilbert curve.
fn base_hilbert_cell(size: usize, d: usize) -> Cell {
    let (mut x, mut y) = (0usize, 0usize);
    let mut t = d;
    let mut s = 1;
    while s < size {
        let rx = 1 & (t / 2);
        let ry = 1 & (t ^ rx);
        if ry == 0 {
            if rx == 1 {
                x = s - 1 - x;
                y = s - 1 - y;
            }
            std::mem::swap(&mut x, &mut y);
        }
        x += s * rx;
        y += s * ry;
        t /= 4;
        s *= 2;
    }
    (x, y)
}

/// The Hilbert curve of side `size` under one of the eight symmetries.
pub fn hilbert_curve(orientation: Dihedral, size: usize) -> Result<ScanOrder> {
    check_power_of_two(size)?;
    if orientation.0 >= 8 {
        return invalid(format!("dihedral index {} out of range", orientation.0));
    }
    let order = (0..size * size)
        .map(|d| orientation.apply(base_hilbert_cell(size, d), size))
        .collect();
    Ok(ScanOrder {
        label: format!("hilbert-d{}", orientation.0),
        size,
        order,
    })
}

pub fn generate_scan(variant: ScanVariant, size: usize) -> Result<ScanOrder> {
    let mut order = hilbert_curve(variant.orientation(), size)?;
    order.label = variant.key().to_string();
    Ok(order)
}

/// A cyclic translation of the grid. Content at `(r, c)` moves to
/// `((r + delta_row) mod n, (c + delta_col) mod n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub delta_row: i64,
    pub delta_col: i64,
}

const DIRECTIONS: [(&str, i64, i64); 8] = [
    ("U", -1, 0),
    ("D", 1, 0),
    ("L", 0, -1),
    ("R", 0, 1),
    ("UL", -1, -1),
    ("UR", -1, 1),
    ("DL", 1, -1),
    ("DR", 1, 1),
];

impl ShiftSpec {
    pub const IDENTITY: ShiftSpec = ShiftSpec {
        delta_row: 0,
        delta_col: 0,
    };

    pub fn new(delta_row: i64, delta_col: i64) -> Self {
        ShiftSpec {
            delta_row,
            delta_col,
        }
    }

    /// `direction` is one of U, D, L, R, UL, UR, DL, DR (LU, RU, LD, RD are
    /// accepted as aliases).
    pub fn directional(direction: &str, positions: i64) -> Result<Self> {
        let dir = canonical_direction(direction)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown shift direction `{direction}`")))?;
        let (_, dr, dc) = DIRECTIONS.iter().find(|d| d.0 == dir).copied().unwrap();
        Ok(ShiftSpec::new(dr * positions, dc * positions))
    }

    pub fn negate(self) -> Self {
        ShiftSpec::new(-self.delta_row, -self.delta_col)
    }

    pub fn is_identity_on(self, size: usize) -> bool {
        let n = size as i64;
        self.delta_row.rem_euclid(n) == 0 && self.delta_col.rem_euclid(n) == 0
    }

    /// Mirror image under a left-right reflection of the grid.
    pub fn mirrored_lr(self) -> Self {
        ShiftSpec::new(self.delta_row, -self.delta_col)
    }

    /// Direction and step count when the shift is axis-aligned or diagonal.
    pub fn direction(self) -> Option<(&'static str, i64)> {
        let (dr, dc) = (self.delta_row, self.delta_col);
        if dr == 0 && dc == 0 {
            return None;
        }
        let k = if dr != 0 && dc != 0 {
            if dr.abs() != dc.abs() {
                return None;
            }
            dr.abs()
        } else {
            dr.abs().max(dc.abs())
        };
        DIRECTIONS
            .iter()
            .find(|d| d.1 * k == dr && d.2 * k == dc)
            .map(|d| (d.0, k))
    }

    /// Compact label such as `U1` or `UL3`, `0` for no shift and `r-2c1`
    /// otherwise.
    pub fn key(self) -> String {
        match self.direction() {
            Some((d, k)) => format!("{d}{k}"),
            None if self.delta_row == 0 && self.delta_col == 0 => "0".to_string(),
            None => format!("r{}c{}", self.delta_row, self.delta_col),
        }
    }

    /// The eight directions at 1, 2 and 3 positions.
    pub fn default_set() -> Vec<ShiftSpec> {
        let mut out = Vec::with_capacity(24);
        for (_, dr, dc) in DIRECTIONS {
            for k in 1..=3 {
                out.push(ShiftSpec::new(dr * k, dc * k));
            }
        }
        out
    }
}

fn canonical_direction(d: &str) -> Option<&'static str> {
    let up = d.to_ascii_uppercase();
    let canon = match up.as_str() {
        "LU" => "UL",
        "RU" => "UR",
        "LD" => "DL",
        "RD" => "DR",
        other => other,
    };
    DIRECTIONS.iter().find(|x| x.0 == canon).map(|x| x.0)
}

impl fmt::Display for ShiftSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.direction() {
            Some((d, k)) => write!(f, "{d}({k})"),
            None => write!(f, "({}, {})", self.delta_row, self.delta_col),
        }
    }
}

impl FromStr for ShiftSpec {
    type Err = Error;

    /// Accepts `U1`, `U(1)`, `UL3`, `LU(3)`, `0` and `r-1c2`.
    fn from_str(s: &str) -> Result<Self> {
        let t: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        if t == "0" || t.eq_ignore_ascii_case("none") {
            return Ok(ShiftSpec::IDENTITY);
        }
        if let Some(rest) = t.strip_prefix('r') {
            if let Some((r, c)) = rest.split_once('c') {
                let dr = r
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad shift `{s}`")))?;
                let dc = c
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad shift `{s}`")))?;
                return Ok(ShiftSpec::new(dr, dc));
            }
        }
        let split = t
            .find(|c: char| c.is_ascii_digit() || c == '(')
            .ok_or_else(|| Error::InvalidArgument(format!("bad shift `{s}`")))?;
        let (dir, num) = t.split_at(split);
        let num = num.trim_start_matches('(').trim_end_matches(')');
        let k: i64 = num
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad shift `{s}`")))?;
        ShiftSpec::directional(dir, k)
    }
}

/// A permutation of the cells of a square grid. `map[i]` is the destination
/// of the content of row-major cell `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellPermutation {
    pub size: usize,
    pub map: Vec<usize>,
}

impl CellPermutation {
    pub fn apply(&self, cell: Cell) -> Cell {
        let d = self.map[cell.0 * self.size + cell.1];
        (d / self.size, d % self.size)
    }

    pub fn inverse(&self) -> CellPermutation {
        let mut inv = vec![0; self.map.len()];
        for (src, &dst) in self.map.iter().enumerate() {
            inv[dst] = src;
        }
        CellPermutation {
            size: self.size,
            map: inv,
        }
    }

    pub fn compose(&self, then: &CellPermutation) -> CellPermutation {
        CellPermutation {
            size: self.size,
            map: self.map.iter().map(|&m| then.map[m]).collect(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.map.iter().enumerate().all(|(i, &m)| i == m)
    }

    pub fn is_bijection(&self) -> bool {
        let mut seen = vec![false; self.map.len()];
        for &m in &self.map {
            if m >= seen.len() || seen[m] {
                return false;
            }
            seen[m] = true;
        }
        true
    }
}

pub fn shift_cell(shift: ShiftSpec, size: usize, cell: Cell) -> Cell {
    let n = size as i64;
    (
        (cell.0 as i64 + shift.delta_row).rem_euclid(n) as usize,
        (cell.1 as i64 + shift.delta_col).rem_euclid(n) as usize,
    )
}

pub fn apply_shift(shift: ShiftSpec, size: usize) -> Result<CellPermutation> {
    if size == 0 {
        return invalid("grid size must be at least 1");
    }
    let map = (0..size * size)
        .map(|i| {
            let (r, c) = shift_cell(shift, size, (i / size, i % size));
            r * size + c
        })
        .collect();
    Ok(CellPermutation { size, map })
}

/// Aligned square windows tiling a square grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPartition {
    pub grid_size: usize,
    pub window_size: usize,
}

impl WindowPartition {
    pub fn new(grid_size: usize, window_size: usize) -> Result<Self> {
        if grid_size == 0 || window_size == 0 || !grid_size.is_multiple_of(window_size) {
            return invalid(format!(
                "window size {window_size} must divide grid size {grid_size}"
            ));
        }
        Ok(WindowPartition {
            grid_size,
            window_size,
        })
    }

    pub fn windows_per_side(&self) -> usize {
        self.grid_size / self.window_size
    }

    pub fn window_count(&self) -> usize {
        self.windows_per_side() * self.windows_per_side()
    }

    pub fn window_of(&self, cell: Cell) -> usize {
        (cell.0 / self.window_size) * self.windows_per_side() + cell.1 / self.window_size
    }
}

/// First scan, a shift, and the second scan run on the shifted grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Procedure {
    pub first: ScanOrder,
    pub shift: ShiftSpec,
    pub second: ScanOrder,
    /// Visit order of the second pass, expressed in original cells.
    pub shifted_second_order: ScanOrder,
}

impl Procedure {
    pub fn size(&self) -> usize {
        self.first.size
    }

    pub fn label(&self) -> String {
        format!(
            "{}->{}->{}",
            pretty_label(&self.first.label),
            self.shift,
            pretty_label(&self.second.label)
        )
    }
}

fn pretty_label(label: &str) -> String {
    label
        .parse::<ScanVariant>()
        .map(|v| v.to_string())
        .unwrap_or_else(|_| label.to_string())
}

/// Shifts the grid, scans it with `second` and maps every visited position
/// back to the original cell that was shifted onto it. A Hilbert order visits
/// every aligned power-of-two window contiguously, so this is also the
/// window-by-window scan of the shifted windows.
pub fn compose_scan_shift_scan(
    first: &ScanOrder,
    shift: ShiftSpec,
    second: &ScanOrder,
) -> Result<Procedure> {
    if first.size != second.size {
        return invalid(format!(
            "scan sizes differ: {} vs {}",
            first.size, second.size
        ));
    }
    let back = shift.negate();
    let order = second
        .order
        .iter()
        .map(|&p| shift_cell(back, second.size, p))
        .collect();
    let shifted = ScanOrder {
        label: format!("{}@{}", second.label, shift.key()),
        size: second.size,
        order,
    };
    debug_assert!(shifted.is_bijection());
    Ok(Procedure {
        first: first.clone(),
        shift,
        second: second.clone(),
        shifted_second_order: shifted,
    })
}

/// Window-by-window scan plan over a `rows × cols` token grid.
///
/// Every `window × window` block is scanned with the `window`-sized curve of
/// `variant`; windows are taken in raster order. With a shift the grid is
/// first rolled cyclically, the rolled windows are scanned, and positions are
/// mapped back to original cells. Returns one list of `(row, col)` cells per
/// window.
pub fn window_plan(
    variant: ScanVariant,
    rows: usize,
    cols: usize,
    window: usize,
    shift: Option<ShiftSpec>,
) -> Result<Vec<Vec<Cell>>> {
    if rows == 0 || cols == 0 || !rows.is_multiple_of(window) || !cols.is_multiple_of(window) {
        return invalid(format!(
            "token grid {rows}x{cols} is not divisible into {window}x{window} windows"
        ));
    }
    let local = generate_scan(variant, window)?;
    let shift = shift.unwrap_or(ShiftSpec::IDENTITY);
    let (nr, nc) = (rows as i64, cols as i64);
    let mut plan = Vec::with_capacity((rows / window) * (cols / window));
    for wr in 0..rows / window {
        for wc in 0..cols / window {
            let cells = local
                .order
                .iter()
                .map(|&(r, c)| {
                    let pr = (wr * window + r) as i64;
                    let pc = (wc * window + c) as i64;
                    (
                        (pr - shift.delta_row).rem_euclid(nr) as usize,
                        (pc - shift.delta_col).rem_euclid(nc) as usize,
                    )
                })
                .collect();
            plan.push(cells);
        }
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cell_scan() {
        let s = generate_scan(ScanVariant::Scan1, 1).unwrap();
        assert_eq!(s.order, vec![(0, 0)]);
    }

    #[test]
    fn two_by_two_is_continuous() {
        for v in ScanVariant::ALL {
            let s = generate_scan(v, 2).unwrap();
            assert!(s.is_bijection() && s.is_continuous());
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        for size in [0, 3, 6, 12] {
            assert!(matches!(
                generate_scan(ScanVariant::Scan2, size),
                Err(Error::InvalidArgument(_))
            ));
        }
    }

    #[test]
    fn aligned_blocks_visited_consecutively() {
        let s = generate_scan(ScanVariant::Scan1, 8).unwrap();
        let ranks = s.ranks();
        for r in (0..8).step_by(2) {
            for c in (0..8).step_by(2) {
                let mut idx = [
                    ranks[r * 8 + c],
                    ranks[r * 8 + c + 1],
                    ranks[(r + 1) * 8 + c],
                    ranks[(r + 1) * 8 + c + 1],
                ];
                idx.sort_unstable();
                assert_eq!(idx[3] - idx[0], 3, "block at ({r},{c})");
            }
        }
    }

    #[test]
    fn pinned_orientations_open_sides() {
        // entry and exit cells of the 4x4 curves
        let ends = |v| {
            let s = generate_scan(v, 4).unwrap();
            (s.order[0], *s.order.last().unwrap())
        };
        let (a, b) = ends(ScanVariant::Scan1);
        assert!(a.0 == 3 && b.0 == 3, "Scan-1 opens to the bottom");
        let (a, b) = ends(ScanVariant::Scan2);
        assert!(a.1 == 3 && b.1 == 3, "Scan-2 opens to the right");
        let (a, b) = ends(ScanVariant::Scan3);
        assert!(a.0 == 0 && b.0 == 0, "Scan-3 opens to the top");
        let (a, b) = ends(ScanVariant::Scan4);
        assert!(a.1 == 0 && b.1 == 0, "Scan-4 opens to the left");
    }

    #[test]
    fn shift_examples() {
        let up = ShiftSpec::directional("U", 1).unwrap();
        assert_eq!(apply_shift(up, 8).unwrap().apply((0, 3)), (7, 3));
        let ul3 = ShiftSpec::directional("UL", 3).unwrap();
        assert_eq!(apply_shift(ul3, 8).unwrap().apply((4, 4)), (1, 1));
        assert!(apply_shift(ShiftSpec::new(8, 8), 8).unwrap().is_identity());
    }

    #[test]
    fn shift_parsing() {
        assert_eq!("U1".parse::<ShiftSpec>().unwrap(), ShiftSpec::new(-1, 0));
        assert_eq!("UL(3)".parse::<ShiftSpec>().unwrap(), ShiftSpec::new(-3, -3));
        assert_eq!("LU3".parse::<ShiftSpec>().unwrap(), ShiftSpec::new(-3, -3));
        assert_eq!("UR3".parse::<ShiftSpec>().unwrap(), ShiftSpec::new(-3, 3));
        assert_eq!("D(1)".parse::<ShiftSpec>().unwrap(), ShiftSpec::new(1, 0));
        assert_eq!("r2c-1".parse::<ShiftSpec>().unwrap(), ShiftSpec::new(2, -1));
        assert_eq!("0".parse::<ShiftSpec>().unwrap(), ShiftSpec::IDENTITY);
        assert!("Q2".parse::<ShiftSpec>().is_err());
        assert_eq!(ShiftSpec::new(-3, 3).to_string(), "UR(3)");
        assert_eq!(ShiftSpec::new(-1, 0).key(), "U1");
        assert_eq!(ShiftSpec::default_set().len(), 24);
    }

    #[test]
    fn identity_composition() {
        let s1 = generate_scan(ScanVariant::Scan1, 8).unwrap();
        let p = compose_scan_shift_scan(&s1, ShiftSpec::IDENTITY, &s1).unwrap();
        assert_eq!(p.shifted_second_order.order, s1.order);
    }

    #[test]
    fn shifted_composition_breaks_continuity_at_wrap() {
        let s1 = generate_scan(ScanVariant::Scan1, 8).unwrap();
        let s3 = generate_scan(ScanVariant::Scan3, 8).unwrap();
        let p = compose_scan_shift_scan(&s1, "U1".parse().unwrap(), &s3).unwrap();
        assert!(p.shifted_second_order.is_bijection());
        assert!(!p.shifted_second_order.is_continuous());
        assert_eq!(p.label(), "Scan-1->U(1)->Scan-3");
    }

    #[test]
    fn compose_rejects_size_mismatch() {
        let a = generate_scan(ScanVariant::Scan1, 4).unwrap();
        let b = generate_scan(ScanVariant::Scan3, 8).unwrap();
        assert!(compose_scan_shift_scan(&a, ShiftSpec::IDENTITY, &b).is_err());
    }

    #[test]
    fn window_partition_ids() {
        let p = WindowPartition::new(8, 4).unwrap();
        assert_eq!(p.window_of((3, 3)), 0);
        assert_eq!(p.window_of((3, 4)), 1);
        assert_eq!(p.window_of((4, 3)), 2);
        assert_eq!(p.window_count(), 4);
        assert!(WindowPartition::new(8, 3).is_err());
    }

    #[test]
    fn window_plan_covers_grid_once() {
        let shift = ShiftSpec::directional("UL", 3).unwrap();
        let plan = window_plan(ScanVariant::Scan2, 8, 16, 4, Some(shift)).unwrap();
        assert_eq!(plan.len(), 8);
        let mut seen = vec![0; 8 * 16];
        for w in &plan {
            assert_eq!(w.len(), 16);
            for &(r, c) in w {
                seen[r * 16 + c] += 1;
            }
        }
        assert!(seen.iter().all(|&n| n == 1));
    }

    #[test]
    fn json_shape() {
        let s = generate_scan(ScanVariant::Scan1, 2).unwrap();
        let v: serde_json::Value = serde_json::to_value(&s).unwrap();
        assert_eq!(v["variant"], "scan1");
        assert_eq!(v["size"], 2);
        assert_eq!(v["order"].as_array().unwrap().len(), 4);
        assert_eq!(v["order"][0].as_array().unwrap().len(), 2);
    }

    #[test]
    fn svg_is_deterministic() {
        let s = generate_scan(ScanVariant::Scan4, 4).unwrap();
        let a = s.to_svg(20);
        assert_eq!(a, s.to_svg(20));
        assert!(a.contains("<polyline"));
        assert!(a.contains("points=\"10,10"));
    }
}
