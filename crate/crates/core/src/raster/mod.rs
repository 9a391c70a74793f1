//! Circuit feature maps on the cell lattice.
//!
//! Aggregation conventions: current, current-source and resistance channels
//! sum their deposits; voltage-source and IR-drop target cells take the
//! maximum. Every channel loops over elements in file order so floating-point
//! accumulation is reproducible.

mod grid;
pub mod image;

use std::collections::{BTreeSet, HashMap};

use thiserror::Error;

pub use grid::{Grid, GridSpec};

use crate::solver::NodeSolution;
use crate::spice::{ElementClass, PdnNetlist};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RasterError {
    #[error("source `{name}` at ({x}, {y}) nm lies outside the grid")]
    SourceOutsideGrid { name: String, x: i64, y: i64 },
    #[error("netlist has no voltage source")]
    NoVoltageSource,
    #[error("grid does not cover the netlist bounding box")]
    GridTooSmall,
}

/// Input channel order of a [`FeatureStack`].
pub const CHANNEL_NAMES: [&str; 6] =
    ["current", "eff_dist", "pdn_density", "v_source", "i_source", "resistance"];

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    /// Ordered as [`CHANNEL_NAMES`].
    pub channels: Vec<Grid<f64>>,
    /// Golden IR drop per cell, volts.
    pub target: Grid<f64>,
    pub spec: GridSpec,
}

impl FeatureStack {
    pub fn channel(&self, name: &str) -> Option<&Grid<f64>> {
        CHANNEL_NAMES.iter().position(|n| *n == name).map(|i| &self.channels[i])
    }

    pub fn shape(&self) -> (usize, usize) {
        self.target.shape()
    }
}

/// Sum of current-source magnitudes at their non-ground terminal, amperes.
pub fn current_map(nl: &PdnNetlist, spec: &GridSpec) -> Result<Grid<f64>, RasterError> {
    let mut g = spec.zeros();
    for e in nl.current_sources() {
        let n = e.tap_node();
        let (r, c) = spec.cell_of(n.x, n.y).ok_or_else(|| RasterError::SourceOutsideGrid {
            name: e.name.clone(),
            x: n.x,
            y: n.y,
        })?;
        *g.at_mut(r, c) += e.value.abs();
    }
    Ok(g)
}

/// `1 / Σ 1/max(d, eps)` over distinct voltage-source locations, micrometers.
pub fn effective_distance_map(
    nl: &PdnNetlist,
    spec: &GridSpec,
    eps_nm: f64,
) -> Result<Grid<f64>, RasterError> {
    let mut seen = BTreeSet::new();
    let pads: Vec<(f64, f64)> = nl
        .voltage_sources()
        .map(|e| e.tap_node())
        .filter(|n| seen.insert((n.x, n.y)))
        .map(|n| (n.x as f64, n.y as f64))
        .collect();
    if pads.is_empty() {
        return Err(RasterError::NoVoltageSource);
    }
    Ok(effective_distance_from(&pads, spec, eps_nm))
}

pub(crate) fn effective_distance_from(pads: &[(f64, f64)], spec: &GridSpec, eps_nm: f64) -> Grid<f64> {
    Grid::from_fn(spec.height_cells, spec.width_cells, |r, c| {
        let (px, py) = spec.center(r, c);
        let inv: f64 = pads
            .iter()
            .map(|&(sx, sy)| 1.0 / ((px - sx).hypot(py - sy)).max(eps_nm))
            .sum();
        1.0 / inv / 1000.0
    })
}

/// Mean stripe spacing per cell in micrometers: for each orientation present,
/// cell side over the number of distinct parallel track coordinates, averaged
/// over orientations. Cells without lateral segments are 0.
pub fn pdn_density_map(nl: &PdnNetlist, spec: &GridSpec) -> Grid<f64> {
    let p = spec.cell_pitch;
    let mut tracks: HashMap<(usize, usize), (BTreeSet<i64>, BTreeSet<i64>)> = HashMap::new();
    let in_rows = |v: i64| (v - spec.origin.1).div_euclid(p);
    let in_cols = |v: i64| (v - spec.origin.0).div_euclid(p);
    for e in nl.resistors() {
        if e.classify() != ElementClass::Lateral || e.a.is_ground() || e.b.is_ground() {
            continue;
        }
        let (a, b) = (e.a, e.b);
        if a.y == b.y && a.x != b.x {
            let row = in_rows(a.y);
            let (lo, hi) = (a.x.min(b.x), a.x.max(b.x));
            let c0 = in_cols(lo);
            let c1 = (hi - spec.origin.0 + p - 1).div_euclid(p) - 1;
            for c in c0..=c1 {
                if let Some(cell) = checked(spec, row, c) {
                    tracks.entry(cell).or_default().0.insert(a.y);
                }
            }
        } else if a.x == b.x && a.y != b.y {
            let col = in_cols(a.x);
            let (lo, hi) = (a.y.min(b.y), a.y.max(b.y));
            let r0 = in_rows(lo);
            let r1 = (hi - spec.origin.1 + p - 1).div_euclid(p) - 1;
            for r in r0..=r1 {
                if let Some(cell) = checked(spec, r, col) {
                    tracks.entry(cell).or_default().1.insert(a.x);
                }
            }
        }
    }
    let side_um = p as f64 / 1000.0;
    let mut g = spec.zeros();
    for ((r, c), (h, v)) in tracks {
        let spacings: Vec<f64> =
            [h.len(), v.len()].into_iter().filter(|&k| k > 0).map(|k| side_um / k as f64).collect();
        g.set(r, c, spacings.iter().sum::<f64>() / spacings.len() as f64);
    }
    g
}

fn checked(spec: &GridSpec, r: i64, c: i64) -> Option<(usize, usize)> {
    (r >= 0 && c >= 0 && (r as usize) < spec.height_cells && (c as usize) < spec.width_cells)
        .then_some((r as usize, c as usize))
}

/// `(v_source, i_source)`: max pad voltage per cell and summed instance current.
pub fn source_plots(
    nl: &PdnNetlist,
    spec: &GridSpec,
) -> Result<(Grid<f64>, Grid<f64>), RasterError> {
    let mut v = spec.zeros();
    for e in nl.voltage_sources() {
        let n = e.tap_node();
        let (r, c) = spec.cell_of(n.x, n.y).ok_or_else(|| RasterError::SourceOutsideGrid {
            name: e.name.clone(),
            x: n.x,
            y: n.y,
        })?;
        let cell = v.at_mut(r, c);
        *cell = cell.max(e.value);
    }
    Ok((v, current_map(nl, spec)?))
}

/// Resistor values split over the cells each segment overlaps, proportionally
/// to overlap length; vias deposit fully into their cell.
pub fn resistance_map(nl: &PdnNetlist, spec: &GridSpec) -> Grid<f64> {
    let mut g = spec.zeros();
    for e in nl.resistors() {
        if e.a.is_ground() || e.b.is_ground() {
            continue;
        }
        if e.classify() == ElementClass::Via || (e.a.x, e.a.y) == (e.b.x, e.b.y) {
            if let Some((r, c)) = spec.cell_of(e.a.x, e.a.y) {
                *g.at_mut(r, c) += e.value;
            }
            continue;
        }
        for ((r, c), frac) in segment_cells(spec, (e.a.x, e.a.y), (e.b.x, e.b.y)) {
            *g.at_mut(r, c) += e.value * frac;
        }
    }
    g
}

/// Cells crossed by a segment with the fraction of its length in each.
fn segment_cells(spec: &GridSpec, a: (i64, i64), b: (i64, i64)) -> Vec<((usize, usize), f64)> {
    let p = spec.cell_pitch;
    let (ox, oy) = spec.origin;
    let mut ts = vec![0.0, 1.0];
    for (lo, hi, o, start, delta) in [
        (a.0.min(b.0), a.0.max(b.0), ox, a.0, b.0 - a.0),
        (a.1.min(b.1), a.1.max(b.1), oy, a.1, b.1 - a.1),
    ] {
        if delta == 0 {
            continue;
        }
        let mut k = (lo - o).div_euclid(p) + 1;
        while o + k * p < hi {
            ts.push((o + k * p - start) as f64 / delta as f64);
            k += 1;
        }
    }
    ts.sort_by(|x, y| x.partial_cmp(y).unwrap());
    ts.dedup();
    let mut out = Vec::with_capacity(ts.len());
    for w in ts.windows(2) {
        let tm = 0.5 * (w[0] + w[1]);
        let x = a.0 as f64 + tm * (b.0 - a.0) as f64;
        let y = a.1 as f64 + tm * (b.1 - a.1) as f64;
        let col = ((x - ox as f64) / p as f64).floor();
        let row = ((y - oy as f64) / p as f64).floor();
        if let Some(cell) = checked(spec, row as i64, col as i64) {
            out.push((cell, w[1] - w[0]));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetNote {
    NoInstances,
}

/// Max IR drop over current-source taps per cell, volts; 0 elsewhere.
pub fn target_map(
    sol: &NodeSolution,
    nl: &PdnNetlist,
    spec: &GridSpec,
) -> (Grid<f64>, Vec<TargetNote>) {
    let mut g = spec.zeros();
    let mut any = false;
    for e in nl.current_sources() {
        let n = e.tap_node();
        let Some((r, c)) = spec.cell_of(n.x, n.y) else { continue };
        let drop = sol.ir_drop[nl.index_of(&n).unwrap()];
        let cell = g.at_mut(r, c);
        *cell = cell.max(drop);
        any = true;
    }
    let notes = if any { Vec::new() } else { vec![TargetNote::NoInstances] };
    (g, notes)
}

/// The six input channels on `spec`, ordered as [`CHANNEL_NAMES`].
pub fn input_channels(nl: &PdnNetlist, spec: &GridSpec) -> Result<Vec<Grid<f64>>, RasterError> {
    if !spec.covers(nl) {
        return Err(RasterError::GridTooSmall);
    }
    let current = current_map(nl, spec)?;
    let eff = effective_distance_map(nl, spec, spec.cell_pitch as f64 / 2.0)?;
    let density = pdn_density_map(nl, spec);
    let (v_src, i_src) = source_plots(nl, spec)?;
    let res = resistance_map(nl, spec);
    Ok(vec![current, eff, density, v_src, i_src, res])
}

/// All six input channels and the golden target on `spec`.
pub fn featurize(
    nl: &PdnNetlist,
    sol: &NodeSolution,
    spec: &GridSpec,
) -> Result<FeatureStack, RasterError> {
    let channels = input_channels(nl, spec)?;
    let (target, _) = target_map(sol, nl, spec);
    Ok(FeatureStack { channels, target, spec: *spec })
}
