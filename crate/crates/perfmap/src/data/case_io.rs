//! Reading and writing one case as a directory of array containers plus a
//! `meta.txt` of UTF-8 `key=value` lines.
//!
//! Layout of a case directory:
//!
//! ```text
//! <dir>/meta.txt            case_id, split, frame count, kinds, stats
//! <dir>/sequence.pfsn       4D f32 (frame, slice, row, col)
//! <dir>/frame_times.pfsn    1D f32 seconds
//! <dir>/target_<kind>.pfsn  3D f32 per target kind
//! ```
//!
//! Statistics are formatted with Rust's shortest round-trip float display,
//! so a written record reads back bit-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Ix1, Ix3, Ix4};

use super::container;
use super::{CaseRecord, MapKind, PerfusionMap, PerfusionSequence};
use crate::error::{Error, Result};

const META_FILE: &str = "meta.txt";

/// Writes `case` into `dir`, one container file per array plus `meta.txt`.
///
/// Refuses to overwrite an existing case directory unless `force` is set.
pub fn write_case(case: &CaseRecord, dir: &Path, force: bool) -> Result<()> {
    case.validate()?;
    let meta_path = dir.join(META_FILE);
    if meta_path.exists() && !force {
        return Err(Error::Invalid(format!(
            "refusing to overwrite existing case at {} (pass force to allow)",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).map_err(Error::io(dir))?;

    container::write_f32(
        &dir.join("sequence.pfsn"),
        case.sequence.data().view().into_dyn(),
    )?;
    container::write_f32(
        &dir.join("frame_times.pfsn"),
        case.sequence.frame_times().view().into_dyn(),
    )?;
    for (kind, map) in &case.targets {
        container::write_f32(
            &dir.join(format!("target_{kind}.pfsn")),
            map.data().view().into_dyn(),
        )?;
    }

    let mut meta = String::new();
    meta.push_str(&format!("case_id={}\n", case.case_id));
    meta.push_str(&format!("split={}\n", case.split));
    meta.push_str(&format!("frames={}\n", case.sequence.frames()));
    let kinds: Vec<&str> = case.targets.keys().map(|k| k.as_str()).collect();
    meta.push_str(&format!("kinds={}\n", kinds.join(",")));
    if let Some((mean, std)) = case.seq_stats {
        meta.push_str(&format!("seq_mean={mean}\nseq_std={std}\n"));
    }
    for (kind, (mean, std)) in &case.target_stats {
        meta.push_str(&format!(
            "target_mean_{kind}={mean}\ntarget_std_{kind}={std}\n"
        ));
    }
    fs::write(&meta_path, meta).map_err(Error::io(meta_path))
}

/// Lists the case ids under `root` — every direct subdirectory holding a
/// `meta.txt` — sorted by name so enumeration order is reproducible.
pub fn list_case_ids(root: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(root).map_err(Error::io(root))? {
        let entry = entry.map_err(Error::io(root))?;
        if entry.path().join(META_FILE).exists() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

/// Reads a case directory produced by [`write_case`], re-validating every
/// invariant on the way in.
pub fn read_case(dir: &Path) -> Result<CaseRecord> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(Error::io(&meta_path))?;
    let mut fields = BTreeMap::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Invalid(format!("bad meta line {line:?} in {dir:?}")))?;
        if fields.insert(key.to_string(), value.to_string()).is_some() {
            return Err(Error::Invalid(format!("duplicate meta key {key:?}")));
        }
    }
    let require = |key: &str| -> Result<&String> {
        fields
            .get(key)
            .ok_or_else(|| Error::Invalid(format!("meta.txt lacks {key:?} in {dir:?}")))
    };

    let case_id = require("case_id")?.clone();
    let split = require("split")?.parse()?;
    let frames: usize = require("frames")?
        .parse()
        .map_err(|_| Error::Invalid(format!("bad frames value in {dir:?}")))?;

    let data = container::read_f32(&dir.join("sequence.pfsn"))?
        .into_dimensionality::<Ix4>()
        .map_err(|_| Error::ShapeMismatch(format!("sequence in {dir:?} is not 4D")))?;
    let frame_times = container::read_f32(&dir.join("frame_times.pfsn"))?
        .into_dimensionality::<Ix1>()
        .map_err(|_| Error::ShapeMismatch(format!("frame_times in {dir:?} is not 1D")))?;
    let sequence = PerfusionSequence::new(data, frame_times)?;
    if sequence.frames() != frames {
        return Err(Error::ShapeMismatch(format!(
            "meta.txt declares {frames} frames but the sequence has {}",
            sequence.frames()
        )));
    }

    let kinds_field = require("kinds")?;
    let mut targets = BTreeMap::new();
    if !kinds_field.is_empty() {
        for name in kinds_field.split(',') {
            let kind: MapKind = name.parse()?;
            let data = container::read_f32(&dir.join(format!("target_{kind}.pfsn")))?
                .into_dimensionality::<Ix3>()
                .map_err(|_| Error::ShapeMismatch(format!("{kind} map in {dir:?} is not 3D")))?;
            targets.insert(kind, PerfusionMap::new(data, kind)?);
        }
    }

    let parse_stat = |key: &String, value: &String| -> Result<f64> {
        value
            .parse()
            .map_err(|_| Error::Invalid(format!("bad stat {key}={value}")))
    };
    let mut seq_stats = None;
    if let (Some(m), Some(s)) = (fields.get("seq_mean"), fields.get("seq_std")) {
        seq_stats = Some((
            parse_stat(&"seq_mean".into(), m)?,
            parse_stat(&"seq_std".into(), s)?,
        ));
    }
    let mut target_stats = BTreeMap::new();
    for (key, value) in &fields {
        if let Some(kind) = key.strip_prefix("target_mean_") {
            let kind: MapKind = kind.parse()?;
            let std_key = format!("target_std_{kind}");
            let std = require(&std_key)?;
            target_stats.insert(
                kind,
                (parse_stat(key, value)?, parse_stat(&std_key, std)?),
            );
        }
    }

    let record = CaseRecord {
        case_id,
        sequence,
        targets,
        seq_stats,
        target_stats,
        split,
    };
    record.validate()?;
    Ok(record)
}
