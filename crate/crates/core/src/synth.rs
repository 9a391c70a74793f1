//! Seeded stripe-grid PDN generator.
//!
//! Layer 1 runs horizontally and directions alternate upward. Stripe `k` of a
//! layer with pitch `p` sits at `(k + 1/2) p`, so a side that is a multiple of
//! 1 µm rasterizes to exactly `side` cells at the default pitch. Nodes lie at
//! crossings with the adjacent layers; vias join every crossing of adjacent
//! layers.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::raster::{featurize, Grid, GridSpec, RasterError, CHANNEL_NAMES};
use crate::solver::{solve_static, SolveError, SolveOptions};
use crate::spice::{Element, ElementKind, NodeRef, PdnNetlist, SpiceError};
use crate::train::{Manifest, ManifestRow, Tag};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible spec: {0}")]
    InfeasibleSpec(String),
    #[error("case {case}: {path}: {source}")]
    Io { case: String, path: PathBuf, source: std::io::Error },
    #[error("case {case}: {source}")]
    Solve { case: String, source: SolveError },
    #[error("case {case}: {source}")]
    Raster { case: String, source: RasterError },
    #[error(transparent)]
    Spice(#[from] SpiceError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenSpec {
    pub side_um: f64,
    pub layers: usize,
    pub pitch_um: Vec<f64>,
    pub sheet_res: Vec<f64>,
    /// Stripe width per layer, µm.
    pub width_um: Vec<f64>,
    pub via_res: f64,
    pub n_current_sources: usize,
    /// Amperes, sampled log-uniformly.
    pub current_range: (f64, f64),
    pub n_voltage_pads: usize,
    pub vdd: f64,
    pub seed: u64,
    /// Doubles the layer-2 pitch right of the die center.
    pub sparse_region: bool,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            side_um: 64.0,
            layers: 2,
            pitch_um: vec![2.0, 2.0],
            sheet_res: vec![0.1, 0.05],
            width_um: vec![0.5, 1.0],
            via_res: 0.5,
            n_current_sources: 64,
            current_range: (1e-4, 1e-3),
            n_voltage_pads: 4,
            vdd: 1.1,
            seed: 0,
            sparse_region: false,
        }
    }
}

fn to_nm(um: f64) -> i64 {
    (um * 1000.0).round() as i64
}

impl GenSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InfeasibleSpec(m));
        if !(2..=4).contains(&self.layers) {
            return bad(format!("layers must be 2..=4, got {}", self.layers));
        }
        for (name, v) in [("pitch_um", &self.pitch_um), ("sheet_res", &self.sheet_res), ("width_um", &self.width_um)] {
            if v.len() != self.layers || v.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
                return bad(format!("{name} needs {} positive values", self.layers));
            }
        }
        if self.n_current_sources == 0 || self.n_voltage_pads == 0 {
            return bad("source counts must be at least 1".into());
        }
        if !(self.vdd > 0.0) || !(self.via_res > 0.0) {
            return bad("vdd and via_res must be positive".into());
        }
        let (lo, hi) = self.current_range;
        if !(lo > 0.0) || hi < lo {
            return bad(format!("current range ({lo}, {hi}) must satisfy 0 < lo <= hi"));
        }
        let side = to_nm(self.side_um);
        if side <= 0 {
            return bad("side must be positive".into());
        }
        for (l, &p) in self.pitch_um.iter().enumerate() {
            let p = to_nm(p);
            if p % 2 != 0 || side % p != 0 {
                return bad(format!("layer {} pitch {p} nm must be even and divide side {side} nm", l + 1));
            }
            if self.sparse_region && l == 1 && (side / 2) % (2 * p) != 0 {
                return bad("sparse_region needs side/2 divisible by twice the layer-2 pitch".into());
            }
        }
        Ok(())
    }

    /// Stripe coordinates across layer `l` (1-based), nm.
    pub fn stripes(&self, l: usize) -> Vec<i64> {
        let side = to_nm(self.side_um);
        let p = to_nm(self.pitch_um[l - 1]);
        if self.sparse_region && l == 2 {
            let half = side / 2;
            let left = (0..half / p).map(|k| k * p + p / 2);
            let right = (0..half / (2 * p)).map(|k| half + k * 2 * p + p);
            left.chain(right).collect()
        } else {
            (0..side / p).map(|k| k * p + p / 2).collect()
        }
    }
}

fn horizontal(l: usize) -> bool {
    l % 2 == 1
}

/// Builds the netlist described by `spec`.
pub fn generate(spec: &GenSpec) -> Result<PdnNetlist, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let stripes: Vec<Vec<i64>> = (1..=spec.layers).map(|l| spec.stripes(l)).collect();
    let mut elements = Vec::new();
    let mut nodes_by_layer: Vec<Vec<NodeRef>> = vec![Vec::new(); spec.layers];
    let node = |l: usize, along: i64, across: i64| {
        if horizontal(l) {
            NodeRef::new(1, l as u32, along, across)
        } else {
            NodeRef::new(1, l as u32, across, along)
        }
    };
    for l in 1..=spec.layers {
        let mut stops = BTreeSet::new();
        for adj in [l.wrapping_sub(1), l + 1] {
            if (1..=spec.layers).contains(&adj) {
                stops.extend(stripes[adj - 1].iter().copied());
            }
        }
        let stops: Vec<i64> = stops.into_iter().collect();
        let (sheet, width) = (spec.sheet_res[l - 1], spec.width_um[l - 1] * 1000.0);
        for &across in &stripes[l - 1] {
            for (i, &along) in stops.iter().enumerate() {
                nodes_by_layer[l - 1].push(node(l, along, across));
                if i > 0 {
                    let len = (along - stops[i - 1]) as f64;
                    elements.push(Element {
                        kind: ElementKind::Resistor,
                        name: format!("R{}", elements.len() + 1),
                        a: node(l, stops[i - 1], across),
                        b: node(l, along, across),
                        value: sheet * len / width,
                    });
                }
            }
        }
    }
    for l in 1..spec.layers {
        let (hs, vs) = if horizontal(l) { (&stripes[l - 1], &stripes[l]) } else { (&stripes[l], &stripes[l - 1]) };
        for &y in hs {
            for &x in vs {
                elements.push(Element {
                    kind: ElementKind::Resistor,
                    name: format!("R{}", elements.len() + 1),
                    a: NodeRef::new(1, l as u32, x, y),
                    b: NodeRef::new(1, l as u32 + 1, x, y),
                    value: spec.via_res,
                });
            }
        }
    }
    let top = &nodes_by_layer[spec.layers - 1];
    if spec.n_voltage_pads > top.len() {
        return Err(SynthError::InfeasibleSpec(format!(
            "{} pads requested but the top layer has {} nodes",
            spec.n_voltage_pads,
            top.len()
        )));
    }
    let bottom = &nodes_by_layer[0];
    if spec.n_current_sources > bottom.len() {
        return Err(SynthError::InfeasibleSpec(format!(
            "{} current sources requested but the lowest layer has {} nodes",
            spec.n_current_sources,
            bottom.len()
        )));
    }
    let mut pads = sample(&mut rng, top.len(), spec.n_voltage_pads).into_vec();
    pads.sort_unstable();
    for (k, i) in pads.into_iter().enumerate() {
        elements.push(Element {
            kind: ElementKind::VoltageSource,
            name: format!("V{}", k + 1),
            a: top[i],
            b: NodeRef::GROUND,
            value: spec.vdd,
        });
    }
    let mut taps = sample(&mut rng, bottom.len(), spec.n_current_sources).into_vec();
    taps.sort_unstable();
    let (lo, hi) = (spec.current_range.0.ln(), spec.current_range.1.ln());
    for (k, i) in taps.into_iter().enumerate() {
        let value = if hi > lo { rng.random_range(lo..hi).exp() } else { lo.exp() };
        elements.push(Element {
            kind: ElementKind::CurrentSource,
            name: format!("I{}", k + 1),
            a: bottom[i],
            b: NodeRef::GROUND,
            value,
        });
    }
    Ok(PdnNetlist::from_elements(elements)?)
}

/// Writes each case (netlist, six channel CSVs, golden target CSV) under
/// `out_dir` plus `manifest.csv`, on a lattice of `pitch` nanometers.
pub fn generate_dataset(cases: &[(String, GenSpec)], out_dir: &Path, pitch: i64) -> Result<Manifest, SynthError> {
    let io = |case: &str, path: &Path, source| SynthError::Io { case: case.into(), path: path.into(), source };
    std::fs::create_dir_all(out_dir).map_err(|e| io("-", out_dir, e))?;
    let mut manifest = Manifest::default();
    for (id, spec) in cases {
        let nl = generate(spec)?;
        let sp = format!("{id}.sp");
        let p = out_dir.join(&sp);
        std::fs::write(&p, nl.write()).map_err(|e| io(id, &p, e))?;
        let sol = solve_static(&nl, &SolveOptions::default())
            .map_err(|source| SynthError::Solve { case: id.clone(), source })?;
        let gs = GridSpec::covering(&nl, pitch);
        let stack = featurize(&nl, &sol, &gs).map_err(|source| SynthError::Raster { case: id.clone(), source })?;
        let write_grid = |name: String, g: &Grid<f64>| -> Result<(), SynthError> {
            let p = out_dir.join(name);
            std::fs::write(&p, g.to_csv()).map_err(|e| io(id, &p, e))
        };
        for (name, g) in CHANNEL_NAMES.iter().zip(&stack.channels) {
            write_grid(format!("{id}_{name}.csv"), g)?;
        }
        let target = format!("{id}_target.csv");
        write_grid(target.clone(), &stack.target)?;
        manifest.rows.push(ManifestRow {
            case_id: id.clone(),
            netlist_path: sp,
            target_path: target,
            tag: Tag::Fake,
            oversample: Some(Tag::Fake.oversample()),
        });
    }
    let p = out_dir.join("manifest.csv");
    std::fs::write(&p, manifest.to_csv()).map_err(|e| io("-", &p, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spice::ElementClass;

    fn small() -> GenSpec {
        GenSpec { side_um: 10.0, n_current_sources: 3, n_voltage_pads: 2, ..GenSpec::default() }
    }

    #[test]
    fn two_layer_counts() {
        let nl = generate(&small()).unwrap();
        let lat = nl.elements().iter().filter(|e| e.classify() == ElementClass::Lateral).count();
        let via = nl.elements().iter().filter(|e| e.classify() == ElementClass::Via).count();
        let n = 10 / 2;
        assert_eq!((nl.node_count(), lat, via), (2 * n * n + 1, 2 * n * (n - 1), n * n));
    }

    #[test]
    fn deterministic_and_connected() {
        let a = generate(&small()).unwrap().write();
        assert_eq!(a, generate(&small()).unwrap().write());
        assert_ne!(a, generate(&GenSpec { seed: 1, ..small() }).unwrap().write());
        assert!(generate(&small()).unwrap().diagnostics().is_empty());
    }

    #[test]
    fn infeasible() {
        assert!(generate(&GenSpec { n_voltage_pads: 26, ..small() }).is_err());
        assert!(generate(&GenSpec { pitch_um: vec![3.0, 2.0], ..small() }).is_err());
        assert!(generate(&GenSpec { layers: 5, ..small() }).is_err());
    }

    #[test]
    fn sparse_region_halves_right_stripes() {
        let s = GenSpec { side_um: 16.0, sparse_region: true, ..small() };
        assert_eq!(s.stripes(2), vec![1000, 3000, 5000, 7000, 10000, 14000]);
        generate(&s).unwrap();
    }

    #[test]
    fn four_layers_connect() {
        let s = GenSpec {
            layers: 4,
            pitch_um: vec![2.0, 2.0, 4.0, 8.0],
            sheet_res: vec![0.1; 4],
            width_um: vec![0.5; 4],
            side_um: 16.0,
            ..small()
        };
        let nl = generate(&s).unwrap();
        assert!(nl.diagnostics().is_empty());
        assert_eq!(nl.max_layer(), 4);
    }
}
