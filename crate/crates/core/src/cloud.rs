//! Attributed point-cloud view of a netlist: one record per element.
//!
//! Coordinates are min-max normalized by the netlist bounding box. Values are
//! divided by a per-kind power of two no smaller than the kind's maximum, so
//! the scaling is exact in binary floating point and decoding reproduces every
//! value bit for bit.

use std::io::{self, Read, Write};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::spice::{BBox, Element, ElementKind, NodeRef, PdnNetlist, SpiceError};

/// Model feature width of one record.
pub const FEATURES: usize = 10;

const MAGIC: &[u8; 4] = b"LMPC";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("capped cloud cannot be inverted to a netlist")]
    CappedCloudNotInvertible,
    #[error("decoded netlist is invalid: {0}")]
    Invalid(#[from] SpiceError),
    #[error("bad point-cloud file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointRecord {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub value: f64,
    pub kind: ElementKind,
    /// Layer of each terminal; 0 marks ground.
    pub layer1: u32,
    pub layer2: u32,
    /// Net ids, kept for exact inversion (not model features).
    pub net1: u32,
    pub net2: u32,
}

impl PointRecord {
    pub fn is_via(&self) -> bool {
        self.kind == ElementKind::Resistor && self.layer1 != self.layer2
    }

    pub fn one_hot(&self) -> [f64; 3] {
        match self.kind {
            ElementKind::Resistor => [1.0, 0.0, 0.0],
            ElementKind::CurrentSource => [0.0, 1.0, 0.0],
            ElementKind::VoltageSource => [0.0, 0.0, 1.0],
        }
    }

    /// `[x1, y1, x2, y2, value, R, I, V, layer1, layer2]` with layers divided
    /// by the deepest layer index.
    pub fn features(&self, max_layer: u32) -> [f64; FEATURES] {
        let l = max_layer.max(1) as f64;
        let h = self.one_hot();
        [
            self.x1,
            self.y1,
            self.x2,
            self.y2,
            self.value,
            h[0],
            h[1],
            h[2],
            self.layer1 as f64 / l,
            self.layer2 as f64 / l,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleMeta {
    pub bbox: BBox,
    /// Divisor per kind in `[R, I, V]` order.
    pub value_scale: [f64; 3],
    pub max_layer: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub records: Vec<PointRecord>,
    pub scale_meta: ScaleMeta,
    pub source_count: usize,
    pub capped: bool,
}

fn kind_slot(k: ElementKind) -> usize {
    match k {
        ElementKind::Resistor => 0,
        ElementKind::CurrentSource => 1,
        ElementKind::VoltageSource => 2,
    }
}

fn pow2_ceil(max: f64) -> f64 {
    if max <= 0.0 || !max.is_finite() {
        return 1.0;
    }
    let mut s = 2f64.powi(max.log2().ceil() as i32);
    while s < max {
        s *= 2.0;
    }
    while s / 2.0 >= max {
        s /= 2.0;
    }
    s
}

fn norm(v: i64, lo: i64, span: i64) -> f64 {
    if span == 0 {
        0.0
    } else {
        (v - lo) as f64 / span as f64
    }
}

fn denorm(t: f64, lo: i64, span: i64) -> i64 {
    lo + (t * span as f64).round() as i64
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Row-major `len x FEATURES` feature matrix.
    pub fn feature_matrix(&self) -> Vec<f64> {
        self.records.iter().flat_map(|r| r.features(self.scale_meta.max_layer)).collect()
    }

    pub fn count_of(&self, kind: ElementKind) -> usize {
        self.records.iter().filter(|r| r.kind == kind).count()
    }
}

/// One record per element, in element order.
pub fn encode_pointcloud(nl: &PdnNetlist) -> PointCloud {
    let bbox = nl.bbox();
    let mut max_val = [0.0f64; 3];
    for e in nl.elements() {
        let s = kind_slot(e.kind);
        max_val[s] = max_val[s].max(e.value);
    }
    let value_scale = max_val.map(pow2_ceil);
    let (w, h) = (bbox.width(), bbox.height());
    let records = nl
        .elements()
        .iter()
        .map(|e| {
            // a ground terminal borrows the other end's position
            let pa = if e.a.is_ground() { e.b } else { e.a };
            let pb = if e.b.is_ground() { e.a } else { e.b };
            PointRecord {
                x1: norm(pa.x, bbox.min_x, w),
                y1: norm(pa.y, bbox.min_y, h),
                x2: norm(pb.x, bbox.min_x, w),
                y2: norm(pb.y, bbox.min_y, h),
                value: e.value / value_scale[kind_slot(e.kind)],
                kind: e.kind,
                layer1: e.a.layer,
                layer2: e.b.layer,
                net1: e.a.net,
                net2: e.b.net,
            }
        })
        .collect();
    PointCloud {
        records,
        scale_meta: ScaleMeta { bbox, value_scale, max_layer: nl.max_layer() },
        source_count: nl.elements().len(),
        capped: false,
    }
}

/// Inverse of [`encode_pointcloud`]; element names are regenerated as
/// `<kind letter><ordinal>`.
pub fn decode_pointcloud(pc: &PointCloud) -> Result<PdnNetlist, CloudError> {
    if pc.capped {
        return Err(CloudError::CappedCloudNotInvertible);
    }
    let m = &pc.scale_meta;
    let (w, h) = (m.bbox.width(), m.bbox.height());
    let mut counters = [0usize; 3];
    let elements = pc
        .records
        .iter()
        .map(|r| {
            let node = |layer: u32, net: u32, x: f64, y: f64| {
                if layer == 0 {
                    NodeRef::GROUND
                } else {
                    NodeRef {
                        net,
                        layer,
                        x: denorm(x, m.bbox.min_x, w),
                        y: denorm(y, m.bbox.min_y, h),
                    }
                }
            };
            let slot = kind_slot(r.kind);
            counters[slot] += 1;
            Element {
                kind: r.kind,
                name: format!("{}{}", r.kind.letter(), counters[slot]),
                a: node(r.layer1, r.net1, r.x1, r.y1),
                b: node(r.layer2, r.net2, r.x2, r.y2),
                value: r.value * m.value_scale[slot],
            }
        })
        .collect();
    Ok(PdnNetlist::from_elements(elements)?)
}

/// Deterministic stratified subsample to at most `max_points` records.
///
/// Every voltage-source record is kept; the remaining budget is split between
/// resistors and current sources in proportion to their counts. Original
/// record order is preserved.
pub fn cap_pointcloud(pc: &PointCloud, max_points: usize, seed: u64) -> PointCloud {
    assert!(max_points >= 1, "max_points must be at least 1");
    if pc.records.len() <= max_points {
        return pc.clone();
    }
    let idx_of = |k: ElementKind| -> Vec<usize> {
        pc.records.iter().enumerate().filter(|(_, r)| r.kind == k).map(|(i, _)| i).collect()
    };
    let (rs, is, vs) = (
        idx_of(ElementKind::Resistor),
        idx_of(ElementKind::CurrentSource),
        idx_of(ElementKind::VoltageSource),
    );
    let budget = max_points.saturating_sub(vs.len());
    let others = rs.len() + is.len();
    let take_r = if others == 0 {
        0
    } else {
        ((budget as f64 * rs.len() as f64 / others as f64).round() as usize).min(rs.len())
    };
    let take_i = budget.saturating_sub(take_r).min(is.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep: Vec<usize> = vs;
    keep.extend(sample(&mut rng, rs.len(), take_r).into_iter().map(|k| rs[k]));
    keep.extend(sample(&mut rng, is.len(), take_i).into_iter().map(|k| is[k]));
    keep.sort_unstable();
    PointCloud {
        records: keep.into_iter().map(|i| pc.records[i]).collect(),
        scale_meta: pc.scale_meta,
        source_count: pc.source_count,
        capped: true,
    }
}

/// Binary feature export: `LMPC`, version, record count (u64), feature width
/// (u32), then `count x FEATURES` little-endian f32.
pub fn write_binary<W: Write>(pc: &PointCloud, mut w: W) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(pc.records.len() as u64).to_le_bytes())?;
    w.write_all(&(FEATURES as u32).to_le_bytes())?;
    for r in &pc.records {
        for f in r.features(pc.scale_meta.max_layer) {
            w.write_all(&(f as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a binary export back as rows of features.
pub fn read_binary<R: Read>(mut r: R) -> Result<Vec<[f32; FEATURES]>, CloudError> {
    let mut head = [0u8; 20];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(CloudError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CloudError::Format(format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(head[8..16].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(head[16..20].try_into().unwrap()) as usize;
    if width != FEATURES {
        return Err(CloudError::Format(format!("feature width {width}, expected {FEATURES}")));
    }
    let mut out = Vec::with_capacity(count);
    let mut buf = [0u8; 4];
    for _ in 0..count {
        let mut row = [0f32; FEATURES];
        for v in row.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f32::from_le_bytes(buf);
        }
        out.push(row);
    }
    Ok(out)
}

/// `key,value` sidecar describing the normalization of a binary export.
pub fn metadata_csv(pc: &PointCloud) -> String {
    let m = &pc.scale_meta;
    format!(
        "key,value\nmin_x,{}\nmin_y,{}\nmax_x,{}\nmax_y,{}\nscale_r,{:?}\nscale_i,{:?}\nscale_v,{:?}\n\
         max_layer,{}\nsource_count,{}\nrecords,{}\ncapped,{}\n",
        m.bbox.min_x,
        m.bbox.min_y,
        m.bbox.max_x,
        m.bbox.max_y,
        m.value_scale[0],
        m.value_scale[1],
        m.value_scale[2],
        m.max_layer,
        pc.source_count,
        pc.records.len(),
        pc.capped
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spice::parse_netlist;

    const DECK: &str = "V1 n1_m4_0_0 0 1.1\nR1 n1_m4_0_0 n1_m1_0_0 0.2\nI1 n1_m1_0_0 0 0.003\n\
                        R2 n1_m1_0_0 n1_m1_4000_2000 0.7\n";

    fn multiset(nl: &PdnNetlist) -> Vec<(ElementKind, NodeRef, NodeRef, u64)> {
        let mut v: Vec<_> = nl.elements().iter().map(|e| (e.kind, e.a, e.b, e.value.to_bits())).collect();
        v.sort();
        v
    }

    #[test]
    fn round_trip_small() {
        let nl = parse_netlist(DECK.as_bytes()).unwrap();
        let pc = encode_pointcloud(&nl);
        assert_eq!(pc.len(), 4);
        let back = decode_pointcloud(&pc).unwrap();
        assert_eq!(multiset(&back), multiset(&nl));
        assert!(pc.records[1].is_via());
        assert!(!pc.records[3].is_via());
    }

    #[test]
    fn corner_resistor() {
        let nl = parse_netlist(b"R1 n1_m1_100_200 n1_m1_900_700 1\n").unwrap();
        let r = encode_pointcloud(&nl).records[0];
        assert_eq!((r.x1, r.y1, r.x2, r.y2), (0.0, 0.0, 1.0, 1.0));
    }

    #[test]
    fn features_in_unit_range() {
        let nl = parse_netlist(DECK.as_bytes()).unwrap();
        let pc = encode_pointcloud(&nl);
        for r in &pc.records {
            let f = r.features(pc.scale_meta.max_layer);
            assert!(f.iter().all(|v| (0.0..=1.0).contains(v)), "{f:?}");
            assert_eq!(f[5] + f[6] + f[7], 1.0);
        }
    }

    #[test]
    fn capped_is_not_invertible() {
        let nl = parse_netlist(DECK.as_bytes()).unwrap();
        let c = cap_pointcloud(&encode_pointcloud(&nl), 2, 0);
        assert!(matches!(decode_pointcloud(&c), Err(CloudError::CappedCloudNotInvertible)));
        assert_eq!(c.source_count, 4);
        assert_eq!(c.count_of(ElementKind::VoltageSource), 1);
    }

    #[test]
    fn pow2_scales() {
        assert_eq!(pow2_ceil(1.1), 2.0);
        assert_eq!(pow2_ceil(1.0), 1.0);
        assert_eq!(pow2_ceil(0.003), 2f64.powi(-8));
        assert_eq!(pow2_ceil(0.0), 1.0);
    }

    #[test]
    fn binary_round_trip() {
        let nl = parse_netlist(DECK.as_bytes()).unwrap();
        let pc = encode_pointcloud(&nl);
        let mut buf = Vec::new();
        write_binary(&pc, &mut buf).unwrap();
        assert_eq!(buf.len(), 20 + 4 * 4 * FEATURES);
        let rows = read_binary(buf.as_slice()).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0][7], 1.0);
        buf[0] = b'X';
        assert!(read_binary(buf.as_slice()).is_err());
        assert!(metadata_csv(&pc).contains("source_count,4"));
    }
}
