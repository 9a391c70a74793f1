//! Exact static solve of a PDN netlist.
//!
//! Voltage sources referenced to ground pin their node (and ground is pinned
//! at 0 V); the remaining nodes form a weighted graph Laplacian system that is
//! symmetric positive definite once every component touches a pinned node.

pub mod sparse;

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::spice::{ElementKind, NodeRef, PdnNetlist};
use sparse::{pcg_jacobi, CsrMatrix, EnvelopeCholesky};

/// Below this many unknowns the system is factorized directly.
pub const DIRECT_LIMIT: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("{} node(s) have no resistive path to a voltage source", .0.len())]
    FloatingSubgraph(Vec<NodeRef>),
    #[error("conjugate gradient did not converge: {iterations} iterations, residual {residual:e}")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("node {node} is pinned to conflicting voltages")]
    ConflictingSources { node: NodeRef },
    #[error("voltage source `{name}` is not referenced to ground")]
    UnsupportedSource { name: String },
    #[error("conductance matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
}

/// Reduced conductance system over the unpinned nodes.
#[derive(Debug, Clone)]
pub struct System {
    pub matrix: CsrMatrix<f64>,
    pub rhs: Vec<f64>,
    /// Pinned node index → volts.
    pub fixed: Vec<(usize, f64)>,
    /// Unknown position → node index.
    pub unknowns: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Auto,
    Direct,
    Cg,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub tol: f64,
    /// Defaults to `ceil(20 * sqrt(unknowns))`.
    pub max_iter: Option<usize>,
    pub method: Method,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { tol: 1e-9, max_iter: None, method: Method::Auto }
    }
}

#[derive(Debug, Clone)]
pub struct NodeSolution {
    /// Indexed by netlist node index.
    pub voltages: Vec<f64>,
    pub ir_drop: Vec<f64>,
    /// Supply rail of each node's resistive component (0 for ground).
    pub supply: Vec<f64>,
    /// `‖D⁻¹ (b − G v)‖∞` of the reduced system, in volts.
    pub residual_inf_norm: f64,
    pub iterations: usize,
    pub method: Method,
}

impl NodeSolution {
    pub fn max_ir_drop(&self) -> f64 {
        self.ir_drop.iter().copied().fold(0.0, f64::max)
    }
}

fn pinned_nodes(nl: &PdnNetlist) -> Result<HashMap<usize, f64>, SolveError> {
    let mut fixed: HashMap<usize, f64> = HashMap::new();
    if let Some(g) = nl.index_of(&NodeRef::GROUND) {
        fixed.insert(g, 0.0);
    }
    for e in nl.voltage_sources() {
        let (node, volts) = match (e.a.is_ground(), e.b.is_ground()) {
            (false, true) => (e.a, e.value),
            (true, false) => (e.b, -e.value),
            _ => return Err(SolveError::UnsupportedSource { name: e.name.clone() }),
        };
        let idx = nl.index_of(&node).expect("indexed node");
        match fixed.get(&idx) {
            Some(&v) if v != volts => return Err(SolveError::ConflictingSources { node }),
            _ => {
                fixed.insert(idx, volts);
            }
        }
    }
    Ok(fixed)
}

/// Nodes of components (over resistors) that contain no pinned node.
fn floating_nodes(nl: &PdnNetlist, fixed: &HashMap<usize, f64>) -> Vec<NodeRef> {
    let comp = components(nl);
    let n_comp = comp.iter().copied().max().map_or(0, |m| m + 1);
    let mut anchored = vec![false; n_comp];
    for &i in fixed.keys() {
        anchored[comp[i]] = true;
    }
    // resistors into ground anchor their other end
    for e in nl.resistors() {
        for (end, other) in [(e.a, e.b), (e.b, e.a)] {
            if other.is_ground() && !end.is_ground() {
                anchored[comp[nl.index_of(&end).unwrap()]] = true;
            }
        }
    }
    nl.nodes()
        .iter()
        .enumerate()
        .filter(|(i, n)| !n.is_ground() && !anchored[comp[*i]])
        .map(|(_, n)| *n)
        .collect()
}

/// Component id per node over resistors between non-ground nodes.
fn components(nl: &PdnNetlist) -> Vec<usize> {
    let n = nl.node_count();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for e in nl.resistors() {
        if e.a.is_ground() || e.b.is_ground() {
            continue;
        }
        let ra = find(&mut parent, nl.index_of(&e.a).unwrap());
        let rb = find(&mut parent, nl.index_of(&e.b).unwrap());
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut ids = HashMap::new();
    (0..n)
        .map(|i| {
            let r = find(&mut parent, i);
            let next = ids.len();
            *ids.entry(r).or_insert(next)
        })
        .collect()
}

/// Assembles the reduced conductance system.
///
/// A current source `I a b val` draws `val` amperes out of `a` into `b`.
pub fn assemble_system(nl: &PdnNetlist) -> Result<System, SolveError> {
    let fixed_map = pinned_nodes(nl)?;
    let floating = floating_nodes(nl, &fixed_map);
    if !floating.is_empty() {
        return Err(SolveError::FloatingSubgraph(floating));
    }
    let n = nl.node_count();
    let mut slot: Vec<Option<usize>> = vec![None; n];
    let mut unknowns = Vec::new();
    for i in 0..n {
        if !fixed_map.contains_key(&i) {
            slot[i] = Some(unknowns.len());
            unknowns.push(i);
        }
    }
    let mut rhs = vec![0.0; unknowns.len()];
    let mut triplets = Vec::with_capacity(nl.elements().len() * 4);
    for e in nl.elements() {
        let ia = nl.index_of(&e.a).unwrap();
        let ib = nl.index_of(&e.b).unwrap();
        match e.kind {
            ElementKind::Resistor => {
                let g = 1.0 / e.value;
                match (slot[ia], slot[ib]) {
                    (Some(ua), Some(ub)) => {
                        triplets.push((ua, ua, g));
                        triplets.push((ub, ub, g));
                        triplets.push((ua, ub, -g));
                        triplets.push((ub, ua, -g));
                    }
                    (Some(ua), None) => {
                        triplets.push((ua, ua, g));
                        rhs[ua] += g * fixed_map[&ib];
                    }
                    (None, Some(ub)) => {
                        triplets.push((ub, ub, g));
                        rhs[ub] += g * fixed_map[&ia];
                    }
                    (None, None) => {}
                }
            }
            ElementKind::CurrentSource => {
                if let Some(ua) = slot[ia] {
                    rhs[ua] -= e.value;
                }
                if let Some(ub) = slot[ib] {
                    rhs[ub] += e.value;
                }
            }
            ElementKind::VoltageSource => {}
        }
    }
    let mut fixed: Vec<(usize, f64)> = fixed_map.into_iter().collect();
    fixed.sort_by_key(|&(i, _)| i);
    Ok(System { matrix: CsrMatrix::from_triplets(unknowns.len(), triplets), rhs, fixed, unknowns })
}

fn scaled_residual(a: &CsrMatrix<f64>, b: &[f64], x: &[f64]) -> f64 {
    let mut ax = vec![0.0; b.len()];
    a.mul_vec(x, &mut ax);
    let diag = a.diagonal();
    (0..b.len()).fold(0.0, |m: f64, i| m.max(((b[i] - ax[i]) / diag[i]).abs()))
}

/// Solves for all node voltages and per-component IR drops.
pub fn solve_static(nl: &PdnNetlist, opts: &SolveOptions) -> Result<NodeSolution, SolveError> {
    let sys = assemble_system(nl)?;
    let m = sys.unknowns.len();
    let method = match opts.method {
        Method::Auto if m < DIRECT_LIMIT => Method::Direct,
        Method::Auto => Method::Cg,
        other => other,
    };
    let (x, iterations, residual) = if m == 0 {
        (Vec::new(), 0, 0.0)
    } else {
        match method {
            Method::Direct => {
                let f = EnvelopeCholesky::factor(&sys.matrix)
                    .map_err(|e| SolveError::NotPositiveDefinite { pivot: e.pivot })?;
                let x = f.solve(&sys.rhs);
                let r = scaled_residual(&sys.matrix, &sys.rhs, &x);
                (x, 0, r)
            }
            _ => {
                let max_iter = opts.max_iter.unwrap_or_else(|| (20.0 * (m as f64).sqrt()).ceil() as usize);
                let mut x = vec![0.0; m];
                let out = pcg_jacobi(&sys.matrix, &sys.rhs, &mut x, opts.tol, max_iter);
                if !out.converged {
                    return Err(SolveError::NoConvergence {
                        iterations: out.iterations,
                        residual: out.residual,
                    });
                }
                let r = scaled_residual(&sys.matrix, &sys.rhs, &x);
                (x, out.iterations, r)
            }
        }
    };
    let n = nl.node_count();
    let mut voltages = vec![0.0; n];
    for &(i, v) in &sys.fixed {
        voltages[i] = v;
    }
    for (k, &i) in sys.unknowns.iter().enumerate() {
        voltages[i] = x[k];
    }
    let comp = components(nl);
    let n_comp = comp.iter().copied().max().map_or(0, |c| c + 1);
    let mut rail = vec![0.0f64; n_comp];
    for e in nl.voltage_sources() {
        let tap = nl.index_of(&e.tap_node()).unwrap();
        rail[comp[tap]] = rail[comp[tap]].max(e.value);
    }
    let supply: Vec<f64> = nl
        .nodes()
        .iter()
        .enumerate()
        .map(|(i, nd)| if nd.is_ground() { 0.0 } else { rail[comp[i]] })
        .collect();
    let ir_drop = (0..n)
        .map(|i| if nl.nodes()[i].is_ground() { 0.0 } else { supply[i] - voltages[i] })
        .collect();
    Ok(NodeSolution { voltages, ir_drop, supply, residual_inf_norm: residual, iterations, method })
}

/// Net current leaving each node computed from Ohm's law and the source
/// list alone; zero for pinned nodes.
pub fn kcl_residuals(nl: &PdnNetlist, sol: &NodeSolution) -> Vec<f64> {
    let n = nl.node_count();
    let mut pinned = vec![false; n];
    if let Some(g) = nl.index_of(&NodeRef::GROUND) {
        pinned[g] = true;
    }
    for e in nl.voltage_sources() {
        for t in [e.a, e.b] {
            pinned[nl.index_of(&t).unwrap()] = true;
        }
    }
    let mut out = vec![0.0; n];
    for e in nl.elements() {
        let ia = nl.index_of(&e.a).unwrap();
        let ib = nl.index_of(&e.b).unwrap();
        match e.kind {
            ElementKind::Resistor => {
                let i = (sol.voltages[ia] - sol.voltages[ib]) / e.value;
                out[ia] += i;
                out[ib] -= i;
            }
            ElementKind::CurrentSource => {
                out[ia] += e.value;
                out[ib] -= e.value;
            }
            ElementKind::VoltageSource => {}
        }
    }
    for (o, p) in out.iter_mut().zip(&pinned) {
        if *p {
            *o = 0.0;
        }
    }
    out
}

/// Largest KCL violation over unpinned nodes, in amperes.
pub fn verify_kcl(nl: &PdnNetlist, sol: &NodeSolution) -> f64 {
    kcl_residuals(nl, sol).into_iter().fold(0.0, |m, r| m.max(r.abs()))
}

/// `layer,x_nm,y_nm,voltage,ir_drop` per non-ground node in index order.
pub fn node_report_csv(nl: &PdnNetlist, sol: &NodeSolution) -> String {
    let mut out = String::from("layer,x_nm,y_nm,voltage,ir_drop\n");
    for (i, nd) in nl.nodes().iter().enumerate() {
        if nd.is_ground() {
            continue;
        }
        let _ = writeln!(out, "{},{},{},{:?},{:?}", nd.layer, nd.x, nd.y, sol.voltages[i], sol.ir_drop[i]);
    }
    out
}
