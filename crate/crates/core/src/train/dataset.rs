//! Dataset manifest and case loading.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::cloud::{encode_pointcloud, PointCloud};
use crate::raster::{input_channels, Grid, GridSpec};
use crate::spice::{parse_netlist, PdnNetlist};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tag {
    Fake,
    Real,
}

impl Tag {
    /// Default repetition per training pass.
    pub fn oversample(self) -> usize {
        match self {
            Tag::Fake => 10,
            Tag::Real => 20,
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tag::Fake => "fake",
            Tag::Real => "real",
        })
    }
}

impl FromStr for Tag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fake" => Ok(Tag::Fake),
            "real" => Ok(Tag::Real),
            _ => Err(format!("unknown tag `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub case_id: String,
    pub netlist_path: String,
    pub target_path: String,
    pub tag: Tag,
    pub oversample: Option<usize>,
}

impl ManifestRow {
    pub fn repeats(&self) -> usize {
        self.oversample.unwrap_or_else(|| self.tag.oversample()).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self, TrainError> {
        let mut r = csv::Reader::from_path(path).map_err(|e| TrainError::manifest(path, e))?;
        let rows = r.deserialize().collect::<Result<Vec<ManifestRow>, _>>().map_err(|e| TrainError::manifest(path, e))?;
        Ok(Manifest { rows })
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.rows.is_empty() {
            w.write_record(["case_id", "netlist_path", "target_path", "tag", "oversample"]).expect("in-memory write");
        }
        for row in &self.rows {
            w.serialize(row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory write")).expect("csv is utf-8")
    }
}

/// One loaded case at native resolution.
#[derive(Debug, Clone)]
pub struct Case {
    pub id: String,
    pub netlist: PdnNetlist,
    pub spec: GridSpec,
    pub channels: Vec<Grid<f64>>,
    pub target: Grid<f64>,
    pub cloud: PointCloud,
    pub repeats: usize,
}

impl Case {
    /// Rasterizes `netlist` on a lattice of `pitch` nanometers.
    pub fn new(id: &str, netlist: PdnNetlist, target: Grid<f64>, pitch: i64, repeats: usize) -> Result<Self, TrainError> {
        let spec = GridSpec::covering(&netlist, pitch);
        let channels = input_channels(&netlist, &spec).map_err(|e| TrainError::Case(id.to_string(), e.to_string()))?;
        if target.shape() != (spec.height_cells, spec.width_cells) {
            return Err(TrainError::Case(
                id.to_string(),
                format!(
                    "target is {:?} but the netlist lattice is {:?}",
                    target.shape(),
                    (spec.height_cells, spec.width_cells)
                ),
            ));
        }
        let cloud = encode_pointcloud(&netlist);
        Ok(Case { id: id.to_string(), netlist, spec, channels, target, cloud, repeats })
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads every manifest row; relative paths resolve against the manifest's directory.
pub fn load_cases(manifest_path: &Path, pitch: i64) -> Result<Vec<Case>, TrainError> {
    let m = Manifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    m.rows.iter().map(|row| load_row(row, base, pitch)).collect()
}

pub fn load_row(row: &ManifestRow, base: &Path, pitch: i64) -> Result<Case, TrainError> {
    let np = resolve(base, &row.netlist_path);
    let text = std::fs::read(&np).map_err(|e| TrainError::io(&np, e))?;
    let nl = parse_netlist(&text).map_err(|e| TrainError::Case(row.case_id.clone(), format!("{}: {e}", np.display())))?;
    let tp = resolve(base, &row.target_path);
    let f = std::fs::File::open(&tp).map_err(|e| TrainError::io(&tp, e))?;
    let target = Grid::read_csv(std::io::BufReader::new(f))
        .map_err(|e| TrainError::Case(row.case_id.clone(), format!("{}: {e}", tp.display())))?;
    Case::new(&row.case_id, nl, target, pitch, row.repeats())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let m = Manifest {
            rows: vec![
                ManifestRow {
                    case_id: "c0".into(),
                    netlist_path: "c0.sp".into(),
                    target_path: "c0_target.csv".into(),
                    tag: Tag::Fake,
                    oversample: Some(10),
                },
                ManifestRow {
                    case_id: "c1".into(),
                    netlist_path: "c1.sp".into(),
                    target_path: "c1_target.csv".into(),
                    tag: Tag::Real,
                    oversample: None,
                },
            ],
        };
        let csv = m.to_csv();
        assert!(csv.starts_with("case_id,netlist_path,target_path,tag,oversample\n"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.csv");
        std::fs::write(&p, &csv).unwrap();
        let back = Manifest::read(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.rows[1].repeats(), 20);
    }
}
