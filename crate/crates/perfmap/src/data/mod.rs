//! Domain types, the on-disk case format, and dataset split management.
//!
//! Everything downstream (preprocessing, the model, the training harness)
//! speaks in terms of these types. The constructors validate their
//! invariants, so holding a [`PerfusionSequence`] or [`PerfusionMap`] is
//! proof that the data is finite and consistently shaped.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array3, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub mod case_io;
pub mod container;

pub use case_io::{list_case_ids, read_case, write_case};

/// Which perfusion map a volume or statistic refers to.
///
/// Tmax and TTP are in seconds; RBF is a relative flow (unitless scale).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MapKind {
    Tmax,
    Ttp,
    Rbf,
}

impl MapKind {
    pub const ALL: [MapKind; 3] = [MapKind::Tmax, MapKind::Ttp, MapKind::Rbf];

    pub fn as_str(self) -> &'static str {
        match self {
            MapKind::Tmax => "tmax",
            MapKind::Ttp => "ttp",
            MapKind::Rbf => "rbf",
        }
    }
}

impl fmt::Display for MapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MapKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tmax" => Ok(MapKind::Tmax),
            "ttp" => Ok(MapKind::Ttp),
            "rbf" => Ok(MapKind::Rbf),
            other => Err(Error::Invalid(format!("unknown map kind {other:?}"))),
        }
    }
}

/// Dataset partition a case belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Invalid(format!("unknown split {other:?}"))),
        }
    }
}

/// Raw 4D signal with per-frame acquisition times.
///
/// Axis order is (frame, slice, row, col). The fields are private so a
/// constructed sequence always satisfies: finite values, strictly
/// increasing `frame_times`, and `frame_times.len()` equal to the frame
/// extent.
#[derive(Debug, Clone, PartialEq)]
pub struct PerfusionSequence {
    data: Array4<f32>,
    frame_times: Array1<f32>,
}

impl PerfusionSequence {
    pub fn new(data: Array4<f32>, frame_times: Array1<f32>) -> Result<Self> {
        if frame_times.len() != data.shape()[0] {
            return Err(Error::ShapeMismatch(format!(
                "frame_times has {} entries but the sequence has {} frames",
                frame_times.len(),
                data.shape()[0]
            )));
        }
        if let Some(w) = frame_times.windows(2).into_iter().find(|w| w[0] >= w[1]) {
            return Err(Error::Invalid(format!(
                "frame_times must be strictly increasing, got {} then {}",
                w[0], w[1]
            )));
        }
        if !frame_times.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("frame_times".into()));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("sequence volume".into()));
        }
        Ok(Self { data, frame_times })
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn frame_times(&self) -> &Array1<f32> {
        &self.frame_times
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    /// Spatial extent as (slices, rows, cols).
    pub fn spatial_shape(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[1], s[2], s[3])
    }

    pub fn into_parts(self) -> (Array4<f32>, Array1<f32>) {
        (self.data, self.frame_times)
    }
}

/// A 3D scalar map with axes (slice, row, col).
///
/// Values are in physical units: seconds for Tmax/TTP, relative flow for
/// RBF — unless the owning [`CaseRecord`] carries standardization stats,
/// in which case the map is in standardized units and the stats invert it.
#[derive(Debug, Clone, PartialEq)]
pub struct PerfusionMap {
    data: Array3<f32>,
    kind: MapKind,
}

impl PerfusionMap {
    pub fn new(data: Array3<f32>, kind: MapKind) -> Result<Self> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("{kind} map")));
        }
        Ok(Self { data, kind })
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn kind(&self) -> MapKind {
        self.kind
    }

    pub fn spatial_shape(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2])
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }
}

/// One subject: sequence, target maps, standardization stats, split.
///
/// `seq_stats` / `target_stats` are `(mean, std)` pairs recorded when the
/// case was standardized; they are what make the transform exactly
/// invertible. Fields are public because the preprocessing stages rebuild
/// records wholesale; [`CaseRecord::validate`] re-checks the cross-field
/// invariants and runs at every I/O boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub case_id: String,
    pub sequence: PerfusionSequence,
    pub targets: BTreeMap<MapKind, PerfusionMap>,
    pub seq_stats: Option<(f64, f64)>,
    pub target_stats: BTreeMap<MapKind, (f64, f64)>,
    pub split: Split,
}

impl CaseRecord {
    pub fn new(
        case_id: impl Into<String>,
        sequence: PerfusionSequence,
        targets: BTreeMap<MapKind, PerfusionMap>,
        split: Split,
    ) -> Result<Self> {
        let record = Self {
            case_id: case_id.into(),
            sequence,
            targets,
            seq_stats: None,
            target_stats: BTreeMap::new(),
            split,
        };
        record.validate()?;
        Ok(record)
    }

    /// Checks the invariants that span fields. The per-array invariants
    /// (finiteness, increasing times) are enforced by the component types.
    pub fn validate(&self) -> Result<()> {
        if self.case_id.is_empty()
            || self
                .case_id
                .chars()
                .any(|c| c == '/' || c == '\\' || c.is_whitespace())
        {
            return Err(Error::Invalid(format!(
                "case_id {:?} must be non-empty and free of path separators and whitespace",
                self.case_id
            )));
        }
        let spatial = self.sequence.spatial_shape();
        for (kind, map) in &self.targets {
            if map.kind() != *kind {
                return Err(Error::Invalid(format!(
                    "target stored under {kind} is labeled {}",
                    map.kind()
                )));
            }
            if map.spatial_shape() != spatial {
                return Err(Error::ShapeMismatch(format!(
                    "{kind} map has shape {:?} but the sequence is {spatial:?}",
                    map.spatial_shape()
                )));
            }
        }
        for (name, std) in self
            .seq_stats
            .iter()
            .map(|(_, s)| ("sequence", *s))
            .chain(self.target_stats.iter().map(|(k, (_, s))| (k.as_str(), *s)))
        {
            if !(std > 0.0 && std.is_finite()) {
                return Err(Error::Invalid(format!(
                    "{name} std must be strictly positive and finite, got {std}"
                )));
            }
        }
        for kind in self.target_stats.keys() {
            if !self.targets.contains_key(kind) {
                return Err(Error::Invalid(format!(
                    "stats recorded for absent {kind} target"
                )));
            }
        }
        Ok(())
    }
}

/// The split assignment of a whole dataset, plus how it was derived.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub cases: Vec<(String, Split)>,
    pub seed: u64,
    pub ratios: (f64, f64, f64),
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        check_ratios(self.ratios)?;
        let mut seen = BTreeSet::new();
        for (id, _) in &self.cases {
            if !seen.insert(id) {
                return Err(Error::Invalid(format!("duplicate case_id {id:?}")));
            }
        }
        Ok(())
    }

    pub fn ids_in(&self, split: Split) -> Vec<&str> {
        self.cases
            .iter()
            .filter(|(_, s)| *s == split)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    /// Serializes as a tab-separated table with a `#`-prefixed preamble
    /// recording the seed and ratios, so a manifest is self-describing.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut out = String::new();
        out.push_str(&format!("# seed={}\n", self.seed));
        out.push_str(&format!(
            "# ratios={} {} {}\n",
            self.ratios.0, self.ratios.1, self.ratios.2
        ));
        out.push_str("case_id\tsplit\n");
        for (id, split) in &self.cases {
            out.push_str(&format!("{id}\t{split}\n"));
        }
        fs::write(path, out).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let mut seed: Option<u64> = None;
        let mut ratios: Option<(f64, f64, f64)> = None;
        let mut cases = Vec::new();
        let mut saw_header = false;
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(v) = rest.strip_prefix("seed=") {
                    seed = Some(
                        v.parse()
                            .map_err(|_| Error::Invalid(format!("bad seed line {line:?}")))?,
                    );
                } else if let Some(v) = rest.strip_prefix("ratios=") {
                    let parts: Vec<f64> = v
                        .split_whitespace()
                        .map(|p| {
                            p.parse()
                                .map_err(|_| Error::Invalid(format!("bad ratio {p:?}")))
                        })
                        .collect::<Result<_>>()?;
                    if parts.len() != 3 {
                        return Err(Error::Invalid(format!("expected 3 ratios in {line:?}")));
                    }
                    ratios = Some((parts[0], parts[1], parts[2]));
                }
                continue;
            }
            if !saw_header {
                if line != "case_id\tsplit" {
                    return Err(Error::Invalid(format!("bad manifest header {line:?}")));
                }
                saw_header = true;
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let (id, split) = line
                .split_once('\t')
                .ok_or_else(|| Error::Invalid(format!("bad manifest row {line:?}")))?;
            cases.push((id.to_string(), split.parse()?));
        }
        let manifest = Self {
            cases,
            seed: seed.ok_or_else(|| Error::Invalid("manifest lacks a seed line".into()))?,
            ratios: ratios.ok_or_else(|| Error::Invalid("manifest lacks a ratios line".into()))?,
        };
        manifest.validate()?;
        Ok(manifest)
    }
}

fn check_ratios(ratios: (f64, f64, f64)) -> Result<()> {
    let (a, b, c) = ratios;
    for r in [a, b, c] {
        if !(r.is_finite() && r >= 0.0) {
            return Err(Error::Invalid(format!("split ratio {r} not in [0, 1]")));
        }
    }
    if ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!(
            "split ratios must sum to 1.0, got {}",
            a + b + c
        )));
    }
    Ok(())
}

/// Partitions case ids into train/val/test with a seeded shuffle followed
/// by contiguous slicing.
///
/// The val and test shares are the ratio products rounded to the nearest
/// integer; whatever remains goes to train, which maximizes training data
/// when the rounding leaves a remainder.
pub fn assign_splits(
    case_ids: &[String],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetManifest> {
    check_ratios(ratios)?;
    let n = case_ids.len();
    if n < 3 {
        return Err(Error::Invalid(format!(
            "need at least 3 cases to populate every split, got {n}"
        )));
    }
    let unique: BTreeSet<&String> = case_ids.iter().collect();
    if unique.len() != n {
        return Err(Error::Invalid("case_ids contain duplicates".into()));
    }

    let mut shuffled: Vec<String> = case_ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);

    let n_val = (n as f64 * ratios.1).round() as usize;
    let n_test = (n as f64 * ratios.2).round() as usize;
    let n_train = n.checked_sub(n_val + n_test).ok_or_else(|| {
        Error::Invalid(format!(
            "rounded val+test shares ({n_val}+{n_test}) exceed the {n} cases"
        ))
    })?;

    let cases = shuffled
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (id, split)
        })
        .collect();
    Ok(DatasetManifest { cases, seed, ratios })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array3, Array4};

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("case_{i:03}")).collect()
    }

    fn split_sizes(m: &DatasetManifest) -> (usize, usize, usize) {
        let count = |s| m.cases.iter().filter(|(_, x)| *x == s).count();
        (count(Split::Train), count(Split::Val), count(Split::Test))
    }

    #[test]
    fn clinical_sized_split_counts() {
        let m = assign_splits(&ids(151), (0.5, 0.2, 0.3), 7).unwrap();
        assert_eq!(split_sizes(&m), (76, 30, 45));
    }

    #[test]
    fn three_cases_one_per_split() {
        let m = assign_splits(&ids(3), (0.5, 0.2, 0.3), 0).unwrap();
        assert_eq!(split_sizes(&m), (1, 1, 1));
    }

    #[test]
    fn splits_are_deterministic_and_partition() {
        let a = assign_splits(&ids(10), (0.5, 0.2, 0.3), 42).unwrap();
        let b = assign_splits(&ids(10), (0.5, 0.2, 0.3), 42).unwrap();
        assert_eq!(a, b);
        let c = assign_splits(&ids(10), (0.5, 0.2, 0.3), 43).unwrap();
        assert_ne!(a.cases, c.cases);
        let mut seen: Vec<&str> = a.cases.iter().map(|(id, _)| id.as_str()).collect();
        seen.sort_unstable();
        let mut want: Vec<String> = ids(10);
        want.sort_unstable();
        assert_eq!(seen, want.iter().map(String::as_str).collect::<Vec<_>>());
    }

    #[test]
    fn bad_ratios_rejected() {
        assert!(assign_splits(&ids(10), (0.5, 0.2, 0.2), 0).is_err());
        assert!(assign_splits(&ids(10), (0.5, -0.2, 0.7), 0).is_err());
        assert!(assign_splits(&ids(2), (0.5, 0.2, 0.3), 0).is_err());
        assert!(assign_splits(&[], (0.5, 0.2, 0.3), 0).is_err());
    }

    #[test]
    fn manifest_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.tsv");
        let m = assign_splits(&ids(11), (0.5, 0.2, 0.3), 9).unwrap();
        m.save(&path).unwrap();
        let back = DatasetManifest::load(&path).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn sequence_invariants_enforced() {
        let data = Array4::<f32>::zeros((4, 1, 2, 2));
        let bad_len = Array1::from_vec(vec![0.0, 1.5, 3.0]);
        assert!(PerfusionSequence::new(data.clone(), bad_len).is_err());

        let not_increasing = Array1::from_vec(vec![0.0, 1.5, 1.5, 3.0]);
        assert!(PerfusionSequence::new(data.clone(), not_increasing).is_err());

        let mut with_nan = data.clone();
        with_nan[[2, 0, 1, 1]] = f32::NAN;
        let times = Array1::from_vec(vec![0.0, 1.5, 3.0, 4.5]);
        let err = PerfusionSequence::new(with_nan, times.clone()).unwrap_err();
        assert!(err.to_string().contains("non-finite data"), "got: {err}");

        assert!(PerfusionSequence::new(data, times).is_ok());
    }

    #[test]
    fn map_rejects_infinities() {
        let mut m = Array3::<f32>::zeros((1, 2, 2));
        m[[0, 0, 0]] = f32::INFINITY;
        assert!(PerfusionMap::new(m, MapKind::Tmax).is_err());
    }

    #[test]
    fn record_validation_catches_shape_and_stats() {
        let seq = PerfusionSequence::new(
            Array4::zeros((2, 1, 2, 2)),
            Array1::from_vec(vec![0.0, 1.5]),
        )
        .unwrap();
        let wrong_shape = PerfusionMap::new(Array3::zeros((1, 2, 3)), MapKind::Tmax).unwrap();
        let mut targets = BTreeMap::new();
        targets.insert(MapKind::Tmax, wrong_shape);
        assert!(CaseRecord::new("c0", seq.clone(), targets, Split::Train).is_err());

        let good_map = PerfusionMap::new(Array3::zeros((1, 2, 2)), MapKind::Tmax).unwrap();
        let mut targets = BTreeMap::new();
        targets.insert(MapKind::Tmax, good_map);
        let mut rec = CaseRecord::new("c0", seq, targets, Split::Train).unwrap();
        rec.seq_stats = Some((0.0, 0.0));
        assert!(rec.validate().is_err());
        rec.seq_stats = Some((0.0, 1.0));
        assert!(rec.validate().is_ok());
        assert!(CaseRecord {
            case_id: "a b".into(),
            ..rec.clone()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn kind_and_split_parse_round_trip() {
        for kind in MapKind::ALL {
            assert_eq!(kind.as_str().parse::<MapKind>().unwrap(), kind);
        }
        for split in Split::ALL {
            assert_eq!(split.as_str().parse::<Split>().unwrap(), split);
        }
        assert!("Tmax".parse::<MapKind>().is_err());
    }
}
