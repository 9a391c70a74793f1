//! PDN subset of the SPICE netlist format.
//!
//! One element per line:
//!
//! ```text
//! R<name> <nodeA> <nodeB> <ohms>
//! I<name> <nodeA> <nodeB> <amps>
//! V<name> <nodeA> <nodeB> <volts>
//! ```
//!
//! Nodes are either the ground literal `0` or `n<net>_m<layer>_<x>_<y>` with
//! coordinates in integer nanometers. Lines starting with `*` are comments,
//! `.end` terminates the deck and `.op` is ignored.

use std::collections::{HashMap, HashSet};
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpiceError {
    #[error("line {line}: malformed element: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("line {line}: duplicate element name `{name}`")]
    DuplicateElementName { line: usize, name: String },
    #[error("line {line}: resistor `{name}` has non-positive resistance {value}")]
    NonPositiveResistance { line: usize, name: String, value: f64 },
    #[error("line {line}: source `{name}` has invalid value {value}")]
    InvalidSourceValue { line: usize, name: String, value: f64 },
    #[error("netlist contains no elements")]
    EmptyNetlist,
    #[error("netlist is not valid UTF-8")]
    NotUtf8,
}

/// A PDN node: metal layer plus integer-nanometer position, or ground.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeRef {
    pub net: u32,
    pub layer: u32,
    pub x: i64,
    pub y: i64,
}

impl NodeRef {
    pub const GROUND: NodeRef = NodeRef { net: 0, layer: 0, x: 0, y: 0 };

    pub fn new(net: u32, layer: u32, x: i64, y: i64) -> Self {
        debug_assert!(layer > 0, "layer 0 is reserved for ground");
        NodeRef { net, layer, x, y }
    }

    pub fn is_ground(&self) -> bool {
        *self == Self::GROUND
    }

    pub fn parse(tok: &str) -> Result<Self, String> {
        if tok == "0" {
            return Ok(Self::GROUND);
        }
        let rest = tok
            .strip_prefix('n')
            .ok_or_else(|| format!("node `{tok}` must be `0` or start with `n`"))?;
        let mut parts = rest.splitn(4, '_');
        let bad = || format!("node `{tok}` does not match n<net>_m<layer>_<x>_<y>");
        let net: u32 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let layer: u32 = parts
            .next()
            .and_then(|s| s.strip_prefix('m'))
            .and_then(|s| s.parse().ok())
            .ok_or_else(bad)?;
        let x: i64 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let y: i64 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        if layer == 0 {
            return Err(format!("node `{tok}` uses layer 0, reserved for ground"));
        }
        Ok(NodeRef { net, layer, x, y })
    }
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ground() {
            write!(f, "0")
        } else {
            write!(f, "n{}_m{}_{}_{}", self.net, self.layer, self.x, self.y)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ElementKind {
    Resistor,
    CurrentSource,
    VoltageSource,
}

impl ElementKind {
    pub fn letter(self) -> char {
        match self {
            ElementKind::Resistor => 'R',
            ElementKind::CurrentSource => 'I',
            ElementKind::VoltageSource => 'V',
        }
    }

    fn from_letter(c: char) -> Option<Self> {
        match c.to_ascii_uppercase() {
            'R' => Some(ElementKind::Resistor),
            'I' => Some(ElementKind::CurrentSource),
            'V' => Some(ElementKind::VoltageSource),
            _ => None,
        }
    }
}

/// Geometric role of an element.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementClass {
    Lateral,
    Via,
    SourceTap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Element {
    pub kind: ElementKind,
    pub name: String,
    pub a: NodeRef,
    pub b: NodeRef,
    pub value: f64,
}

impl Element {
    /// Resistors between different layers are vias, same-layer resistors are
    /// lateral segments, sources are taps.
    pub fn classify(&self) -> ElementClass {
        match self.kind {
            ElementKind::Resistor if self.a.layer != self.b.layer => ElementClass::Via,
            ElementKind::Resistor => ElementClass::Lateral,
            _ => ElementClass::SourceTap,
        }
    }

    /// The non-ground terminal of a source, the `a` terminal otherwise.
    pub fn tap_node(&self) -> NodeRef {
        if self.a.is_ground() {
            self.b
        } else {
            self.a
        }
    }
}

/// Non-fatal findings attached to a parsed netlist.
#[derive(Debug, Clone, PartialEq)]
pub enum Diagnostic {
    /// Nodes with no resistive path to any voltage-source node.
    Unreachable(Vec<NodeRef>),
    /// Resistor whose endpoints neither share a layer nor line up vertically.
    IrregularResistor { name: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub min_x: i64,
    pub min_y: i64,
    pub max_x: i64,
    pub max_y: i64,
}

impl BBox {
    pub fn width(&self) -> i64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> i64 {
        self.max_y - self.min_y
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= self.min_x && x <= self.max_x && y >= self.min_y && y <= self.max_y
    }
}

/// Parsed, validated PDN netlist. Immutable once built.
#[derive(Debug, Clone)]
pub struct PdnNetlist {
    elements: Vec<Element>,
    nodes: Vec<NodeRef>,
    index: HashMap<NodeRef, usize>,
    bbox: BBox,
    diagnostics: Vec<Diagnostic>,
}

impl PdnNetlist {
    /// Builds a netlist from already-constructed elements, applying the same
    /// validation as the parser (line numbers are element positions, 1-based).
    pub fn from_elements(elements: Vec<Element>) -> Result<Self, SpiceError> {
        if elements.is_empty() {
            return Err(SpiceError::EmptyNetlist);
        }
        let mut names = HashSet::with_capacity(elements.len());
        for (i, e) in elements.iter().enumerate() {
            validate(e, i + 1)?;
            if !names.insert(e.name.as_str()) {
                return Err(SpiceError::DuplicateElementName { line: i + 1, name: e.name.clone() });
            }
        }
        Ok(Self::build(elements))
    }

    fn build(elements: Vec<Element>) -> Self {
        let mut nodes = Vec::new();
        let mut index = HashMap::new();
        for e in &elements {
            for n in [e.a, e.b] {
                index.entry(n).or_insert_with(|| {
                    nodes.push(n);
                    nodes.len() - 1
                });
            }
        }
        let mut bbox: Option<BBox> = None;
        for n in nodes.iter().filter(|n| !n.is_ground()) {
            let b = bbox.get_or_insert(BBox { min_x: n.x, min_y: n.y, max_x: n.x, max_y: n.y });
            b.min_x = b.min_x.min(n.x);
            b.min_y = b.min_y.min(n.y);
            b.max_x = b.max_x.max(n.x);
            b.max_y = b.max_y.max(n.y);
        }
        let bbox = bbox.unwrap_or(BBox { min_x: 0, min_y: 0, max_x: 0, max_y: 0 });
        let mut nl = PdnNetlist { elements, nodes, index, bbox, diagnostics: Vec::new() };
        nl.diagnostics = nl.run_diagnostics();
        nl
    }

    fn run_diagnostics(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        for e in self.resistors() {
            let irregular = match e.classify() {
                ElementClass::Lateral => e.a.x != e.b.x && e.a.y != e.b.y,
                ElementClass::Via => {
                    !e.a.is_ground() && !e.b.is_ground() && (e.a.x, e.a.y) != (e.b.x, e.b.y)
                }
                ElementClass::SourceTap => false,
            };
            if irregular {
                out.push(Diagnostic::IrregularResistor { name: e.name.clone() });
            }
        }
        let unreachable = self.unreachable_nodes();
        if !unreachable.is_empty() {
            out.push(Diagnostic::Unreachable(unreachable));
        }
        out
    }

    /// Non-ground nodes without a resistive path to a voltage-source node.
    pub fn unreachable_nodes(&self) -> Vec<NodeRef> {
        let n = self.nodes.len();
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for e in self.resistors() {
            let (ia, ib) = (self.index[&e.a], self.index[&e.b]);
            if e.a.is_ground() || e.b.is_ground() {
                continue;
            }
            adj[ia].push(ib);
            adj[ib].push(ia);
        }
        let mut seen = vec![false; n];
        let mut stack: Vec<usize> = self
            .elements
            .iter()
            .filter(|e| e.kind == ElementKind::VoltageSource)
            .flat_map(|e| [e.a, e.b])
            .filter(|n| !n.is_ground())
            .map(|n| self.index[&n])
            .collect();
        for &s in &stack {
            seen[s] = true;
        }
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        self.nodes
            .iter()
            .enumerate()
            .filter(|(i, nd)| !nd.is_ground() && !seen[*i])
            .map(|(_, nd)| *nd)
            .collect()
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    pub fn resistors(&self) -> impl Iterator<Item = &Element> {
        self.of_kind(ElementKind::Resistor)
    }

    pub fn current_sources(&self) -> impl Iterator<Item = &Element> {
        self.of_kind(ElementKind::CurrentSource)
    }

    pub fn voltage_sources(&self) -> impl Iterator<Item = &Element> {
        self.of_kind(ElementKind::VoltageSource)
    }

    fn of_kind(&self, kind: ElementKind) -> impl Iterator<Item = &Element> {
        self.elements.iter().filter(move |e| e.kind == kind)
    }

    /// Nodes in first-appearance order; position = dense index.
    pub fn nodes(&self) -> &[NodeRef] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn index_of(&self, node: &NodeRef) -> Option<usize> {
        self.index.get(node).copied()
    }

    pub fn bbox(&self) -> BBox {
        self.bbox
    }

    pub fn diagnostics(&self) -> &[Diagnostic] {
        &self.diagnostics
    }

    pub fn max_layer(&self) -> u32 {
        self.nodes.iter().map(|n| n.layer).max().unwrap_or(0)
    }

    /// Serializes in the grammar accepted by [`parse_netlist`]; values use the
    /// shortest representation that parses back to the same `f64`.
    pub fn write(&self) -> String {
        let mut out = String::with_capacity(self.elements.len() * 48);
        for e in &self.elements {
            use std::fmt::Write;
            let _ = writeln!(out, "{} {} {} {:?}", e.name, e.a, e.b, e.value);
        }
        out.push_str(".end\n");
        out
    }
}

fn validate(e: &Element, line: usize) -> Result<(), SpiceError> {
    if e.name.chars().next().and_then(ElementKind::from_letter) != Some(e.kind) {
        return Err(SpiceError::MalformedLine {
            line,
            reason: format!("name `{}` does not start with `{}`", e.name, e.kind.letter()),
        });
    }
    if e.a == e.b {
        return Err(SpiceError::MalformedLine {
            line,
            reason: format!("element `{}` connects node {} to itself", e.name, e.a),
        });
    }
    if !e.value.is_finite() {
        return Err(SpiceError::MalformedLine { line, reason: format!("non-finite value {}", e.value) });
    }
    match e.kind {
        ElementKind::Resistor if e.value <= 0.0 => Err(SpiceError::NonPositiveResistance {
            line,
            name: e.name.clone(),
            value: e.value,
        }),
        ElementKind::VoltageSource if e.value <= 0.0 => Err(SpiceError::InvalidSourceValue {
            line,
            name: e.name.clone(),
            value: e.value,
        }),
        ElementKind::CurrentSource if e.value < 0.0 => Err(SpiceError::InvalidSourceValue {
            line,
            name: e.name.clone(),
            value: e.value,
        }),
        _ => Ok(()),
    }
}

/// Parses a numeric field with optional SPICE engineering suffix
/// (`t g meg k m u n p f`, case-insensitive, trailing unit letters ignored).
pub fn parse_value(tok: &str) -> Option<f64> {
    if let Ok(v) = tok.parse::<f64>() {
        return Some(v);
    }
    let lower = tok.to_ascii_lowercase();
    let split = lower
        .char_indices()
        .find(|&(i, c)| {
            c.is_ascii_alphabetic() && !(c == 'e' && lower[i + 1..].starts_with(|d: char| d.is_ascii_digit() || d == '-' || d == '+'))
        })
        .map(|(i, _)| i)?;
    let (num, suffix) = lower.split_at(split);
    let base: f64 = num.parse().ok()?;
    let scale = if suffix.starts_with("meg") {
        1e6
    } else {
        match suffix.chars().next()? {
            't' => 1e12,
            'g' => 1e9,
            'k' => 1e3,
            'm' => 1e-3,
            'u' => 1e-6,
            'n' => 1e-9,
            'p' => 1e-12,
            'f' => 1e-15,
            _ => return None,
        }
    };
    Some(base * scale)
}

/// Parses a netlist from raw bytes.
pub fn parse_netlist(text: &[u8]) -> Result<PdnNetlist, SpiceError> {
    let text = std::str::from_utf8(text).map_err(|_| SpiceError::NotUtf8)?;
    let mut elements = Vec::new();
    let mut names: HashSet<String> = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('*') {
            continue;
        }
        if line.starts_with('.') {
            match line.to_ascii_lowercase().split_whitespace().next() {
                Some(".end") => break,
                Some(".op") => continue,
                _ => {
                    return Err(SpiceError::MalformedLine {
                        line: line_no,
                        reason: format!("unsupported directive `{line}`"),
                    })
                }
            }
        }
        let e = parse_element(line, line_no)?;
        validate(&e, line_no)?;
        if !names.insert(e.name.clone()) {
            return Err(SpiceError::DuplicateElementName { line: line_no, name: e.name });
        }
        elements.push(e);
    }
    if elements.is_empty() {
        return Err(SpiceError::EmptyNetlist);
    }
    Ok(PdnNetlist::build(elements))
}

fn parse_element(line: &str, line_no: usize) -> Result<Element, SpiceError> {
    let malformed = |reason: String| SpiceError::MalformedLine { line: line_no, reason };
    let toks: Vec<&str> = line.split_whitespace().collect();
    if toks.len() != 4 {
        return Err(malformed(format!("expected 4 fields, found {}", toks.len())));
    }
    let kind = toks[0]
        .chars()
        .next()
        .and_then(ElementKind::from_letter)
        .ok_or_else(|| malformed(format!("unknown element type in `{}`", toks[0])))?;
    let a = NodeRef::parse(toks[1]).map_err(malformed)?;
    let b = NodeRef::parse(toks[2]).map_err(malformed)?;
    let value = parse_value(toks[3]).ok_or_else(|| malformed(format!("bad value `{}`", toks[3])))?;
    Ok(Element { kind, name: toks[0].to_string(), a, b, value })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEN: &str = "\
* ten line deck
R1 n1_m1_2000_2000 n1_m1_3000_2000 0.5
R2 n1_m1_3000_2000 n1_m1_4000_2000 0.5
R3 n1_m4_2000_2000 n1_m1_2000_2000 0.2
R4 n1_m4_2000_2000 n1_m4_2000_6000 0.1
I1 n1_m1_3000_2000 0 1m
I2 n1_m1_4000_2000 0 2e-3
V1 n1_m4_2000_6000 0 1.1

R5 n1_m1_4000_2000 n1_m1_4000_3000 1k
I3 n1_m1_4000_3000 0 0.5u
R6 n1_m4_2000_6000 n1_m4_3000_6000 0.1
.end
";

    #[test]
    fn single_resistor() {
        let nl = parse_netlist(b"R1 n1_m1_2000_2000 n1_m1_3000_2000 0.5").unwrap();
        let e = &nl.elements()[0];
        assert_eq!(e.kind, ElementKind::Resistor);
        assert_eq!(e.value, 0.5);
        assert_eq!(e.a, NodeRef::new(1, 1, 2000, 2000));
        assert_eq!(e.b.x - e.a.x, 1000);
        assert_eq!(e.classify(), ElementClass::Lateral);
    }

    #[test]
    fn voltage_source_to_ground() {
        let nl = parse_netlist(b"V1 n1_m4_0_0 0 1.1").unwrap();
        let e = &nl.elements()[0];
        assert_eq!(e.kind, ElementKind::VoltageSource);
        assert!(e.b.is_ground());
        assert_eq!(e.a.layer, 4);
        assert_eq!(e.value, 1.1);
    }

    #[test]
    fn ten_line_deck_counts() {
        let nl = parse_netlist(TEN.as_bytes()).unwrap();
        assert_eq!(nl.elements().len(), 10);
        let distinct: HashSet<&str> = TEN
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.starts_with('*') && !l.starts_with('.'))
            .flat_map(|l| l.split_whitespace().skip(1).take(2))
            .collect();
        assert_eq!(nl.node_count(), distinct.len());
        assert!(nl.diagnostics().is_empty(), "{:?}", nl.diagnostics());
        assert_eq!(nl.elements()[7].value, 1000.0);
        assert!((nl.elements()[8].value - 0.5e-6).abs() < 1e-20);
    }

    #[test]
    fn classification() {
        let nl = parse_netlist(TEN.as_bytes()).unwrap();
        assert_eq!(nl.elements()[2].classify(), ElementClass::Via);
        assert_eq!(nl.elements()[0].classify(), ElementClass::Lateral);
        assert_eq!(nl.elements()[4].classify(), ElementClass::SourceTap);
    }

    #[test]
    fn write_round_trip() {
        let nl = parse_netlist(TEN.as_bytes()).unwrap();
        let text = nl.write();
        let back = parse_netlist(text.as_bytes()).unwrap();
        assert_eq!(back.elements(), nl.elements());
        assert_eq!(back.write(), text);
        assert_eq!(back.nodes(), nl.nodes());
    }

    #[test]
    fn error_paths() {
        assert_eq!(parse_netlist(b"* nothing\n\n").unwrap_err(), SpiceError::EmptyNetlist);
        assert!(matches!(
            parse_netlist(b"R1 n1_m1_0_0 n1_m1_1_0 0").unwrap_err(),
            SpiceError::NonPositiveResistance { line: 1, .. }
        ));
        assert!(matches!(
            parse_netlist(b"R1 n1_m1_0_0 n1_m1_1_0 1\nR1 n1_m1_1_0 n1_m1_2_0 1").unwrap_err(),
            SpiceError::DuplicateElementName { line: 2, .. }
        ));
        assert!(matches!(
            parse_netlist(b"R1 n1_m1_0_0 n1_m1_1_0").unwrap_err(),
            SpiceError::MalformedLine { line: 1, .. }
        ));
        assert!(matches!(
            parse_netlist(b"\nC1 n1_m1_0_0 0 1").unwrap_err(),
            SpiceError::MalformedLine { line: 2, .. }
        ));
        assert!(matches!(
            parse_netlist(b"R1 n1_m0_0_0 n1_m1_1_0 1").unwrap_err(),
            SpiceError::MalformedLine { .. }
        ));
        assert!(matches!(
            parse_netlist(b"R1 n1_m1_0_0 n1_m1_0_0 1").unwrap_err(),
            SpiceError::MalformedLine { .. }
        ));
        assert!(matches!(
            parse_netlist(b"V1 n1_m1_0_0 0 -1").unwrap_err(),
            SpiceError::InvalidSourceValue { .. }
        ));
        assert!(PdnNetlist::from_elements(vec![]).is_err());
    }

    #[test]
    fn engineering_suffixes() {
        assert_eq!(parse_value("1k"), Some(1e3));
        assert_eq!(parse_value("2.5MEG"), Some(2.5e6));
        assert_eq!(parse_value("3m"), Some(3e-3));
        assert_eq!(parse_value("1e-3"), Some(1e-3));
        assert_eq!(parse_value("10uA"), Some(10.0 * 1e-6));
        assert_eq!(parse_value("1.5E+2"), Some(150.0));
        assert_eq!(parse_value("abc"), None);
    }

    #[test]
    fn unreachable_nodes_are_diagnosed() {
        let nl = parse_netlist(
            b"V1 n1_m1_0_0 0 1\nR1 n1_m1_0_0 n1_m1_1000_0 1\nR2 n1_m1_5000_0 n1_m1_6000_0 1",
        )
        .unwrap();
        match &nl.diagnostics()[0] {
            Diagnostic::Unreachable(nodes) => assert_eq!(nodes.len(), 2),
            d => panic!("unexpected {d:?}"),
        }
        assert_eq!(nl.bbox(), BBox { min_x: 0, min_y: 0, max_x: 6000, max_y: 0 });
    }
}
