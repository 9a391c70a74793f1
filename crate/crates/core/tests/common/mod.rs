use std::collections::HashMap;

use lmmir::spice::{Element, ElementKind, PdnNetlist};
use lmmir::synth::GenSpec;
use nalgebra::{DMatrix, DVector};

/// Dense LU solve of the nodal equations with ground and pads pinned.
pub fn dense_reference(nl: &PdnNetlist) -> Vec<f64> {
    let n = nl.node_count();
    let mut pinned: HashMap<usize, f64> = HashMap::new();
    for (i, nd) in nl.nodes().iter().enumerate() {
        if nd.is_ground() {
            pinned.insert(i, 0.0);
        }
    }
    for e in nl.voltage_sources() {
        pinned.insert(nl.index_of(&e.a).unwrap(), e.value);
    }
    let free: Vec<usize> = (0..n).filter(|i| !pinned.contains_key(i)).collect();
    let pos: HashMap<usize, usize> = free.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let m = free.len();
    let mut g = DMatrix::<f64>::zeros(m, m);
    let mut b = DVector::<f64>::zeros(m);
    for e in nl.elements() {
        let (ia, ib) = (nl.index_of(&e.a).unwrap(), nl.index_of(&e.b).unwrap());
        match e.kind {
            ElementKind::Resistor => {
                let c = 1.0 / e.value;
                for (p, q) in [(ia, ib), (ib, ia)] {
                    if let Some(&k) = pos.get(&p) {
                        g[(k, k)] += c;
                        match pos.get(&q) {
                            Some(&l) => g[(k, l)] -= c,
                            None => b[k] += c * pinned[&q],
                        }
                    }
                }
            }
            ElementKind::CurrentSource => {
                if let Some(&k) = pos.get(&ia) {
                    b[k] -= e.value;
                }
                if let Some(&k) = pos.get(&ib) {
                    b[k] += e.value;
                }
            }
            ElementKind::VoltageSource => {}
        }
    }
    let x = g.lu().solve(&b).expect("nonsingular");
    (0..n).map(|i| pinned.get(&i).copied().unwrap_or_else(|| x[pos[&i]])).collect()
}

/// Two to four layers, up to 2,000 nodes.
pub fn spec_for(seed: u64) -> GenSpec {
    let layers = 2 + (seed % 3) as usize;
    let side = [10.0, 16.0, 24.0, 30.0][(seed / 3 % 4) as usize];
    GenSpec {
        side_um: side,
        layers,
        pitch_um: vec![2.0; layers],
        sheet_res: (0..layers).map(|l| 0.1 / (l + 1) as f64).collect(),
        width_um: (0..layers).map(|l| 0.5 * (l + 1) as f64).collect(),
        n_current_sources: 5 + (seed % 20) as usize,
        n_voltage_pads: 1 + (seed % 4) as usize,
        seed,
        ..GenSpec::default()
    }
}

pub fn scale_currents(nl: &PdnNetlist, k: f64) -> PdnNetlist {
    let elements: Vec<Element> = nl
        .elements()
        .iter()
        .map(|e| match e.kind {
            ElementKind::CurrentSource => Element { value: e.value * k, ..e.clone() },
            _ => e.clone(),
        })
        .collect();
    PdnNetlist::from_elements(elements).unwrap()
}
