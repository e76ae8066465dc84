//! Logit-evolution export for heatmap plotting.
//!
//! One CSV per matrix, named `<kind>_<block>.csv`, with columns
//! `step, stage, kind, block, row_role, col_role, value`. Every trace record
//! of the stage that trains the matrix contributes one row per entry of the
//! support it had at initialisation; pruned entries are written as 0.
//! `step` is the global optimizer step (the init record shares the step
//! count reached before the stage began).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Block, EdgeKind, MatrixId, Modality};
use crate::optimizer::Stage;
use crate::trainer::{RoleLists, TraceEvent, TraceRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub step: usize,
    pub stage: Stage,
    pub kind: EdgeKind,
    pub block: Block,
    pub row_role: String,
    pub col_role: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub files: Vec<PathBuf>,
    pub rows: usize,
    /// The trace ended mid-record or mid-stage.
    pub partial: bool,
    pub notes: Vec<String>,
}

/// Parse a trace, tolerating a damaged tail. Returns the readable records
/// and whether anything had to be dropped.
pub fn read_trace_lenient(path: &Path) -> Result<(Vec<TraceRecord>, bool)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TraceRecord>(&line) {
            Ok(r) => records.push(r),
            Err(e) => {
                log::warn!(
                    "{}:{}: unreadable record ({e}); stopping here",
                    path.display(),
                    i + 1
                );
                return Ok((records, true));
            }
        }
    }
    Ok((records, false))
}

fn role(roles: &RoleLists, m: Modality, i: usize) -> &str {
    match m {
        Modality::Text => &roles.text[i],
        Modality::Visual => &roles.visual[i],
    }
}

fn file_name(id: MatrixId) -> String {
    format!("{}_{}.csv", id.kind.name(), id.block.name())
}

/// Flatten trace records into heatmap rows per matrix.
pub fn heatmap_rows(records: &[TraceRecord]) -> Result<BTreeMap<MatrixId, Vec<HeatmapRow>>> {
    let mut out: BTreeMap<MatrixId, Vec<HeatmapRow>> = BTreeMap::new();
    let mut roles: Option<RoleLists> = None;
    let mut support: BTreeMap<MatrixId, Vec<(usize, usize)>> = BTreeMap::new();
    for rec in records {
        if rec.event == TraceEvent::Init {
            if let Some(r) = &rec.roles {
                roles = Some(r.clone());
            }
            for (id, rows) in &rec.logits {
                let s = rows
                    .iter()
                    .enumerate()
                    .flat_map(|(r, row)| {
                        row.iter()
                            .enumerate()
                            .filter(|(_, v)| **v != 0.0)
                            .map(move |(c, _)| (r, c))
                    })
                    .collect();
                support.insert(*id, s);
            }
        }
        let roles = roles.as_ref().ok_or_else(|| {
            Error::CorruptState("trace has no init record with role lists".into())
        })?;
        for (id, rows) in &rec.logits {
            let Some(s) = support.get(id) else {
                return Err(Error::CorruptState(format!(
                    "{id} appears before its init record"
                )));
            };
            let dst = out.entry(*id).or_default();
            for &(r, c) in s {
                let value = rows
                    .get(r)
                    .and_then(|row| row.get(c))
                    .copied()
                    .ok_or_else(|| {
                        Error::Shape(format!(
                            "{id} record at step {} lacks entry ({r}, {c})",
                            rec.global_step
                        ))
                    })?;
                dst.push(HeatmapRow {
                    step: rec.global_step,
                    stage: rec.stage,
                    kind: id.kind,
                    block: id.block,
                    row_role: role(roles, id.block.src(), r).to_string(),
                    col_role: role(roles, id.block.dst(), c).to_string(),
                    value,
                });
            }
        }
    }
    Ok(out)
}

fn stage_complete(
    records: &[TraceRecord],
    expected_steps: Option<&BTreeMap<Stage, usize>>,
) -> Vec<String> {
    let mut notes = Vec::new();
    if let Some(exp) = expected_steps {
        for (stage, &n) in exp {
            let got = records
                .iter()
                .filter(|r| r.stage == *stage && r.event == TraceEvent::Step)
                .count();
            if got < n {
                notes.push(format!("stage {} has {got} of {n} steps", stage.name()));
            }
        }
    }
    notes
}

/// Write one CSV per matrix into `out_dir`. `expected_steps`, when known,
/// lets a trace that stopped between records be flagged as partial too.
pub fn export_heatmaps(
    trace: &Path,
    out_dir: &Path,
    expected_steps: Option<&BTreeMap<Stage, usize>>,
) -> Result<ExportSummary> {
    let (records, damaged) = read_trace_lenient(trace)?;
    let mut notes = stage_complete(&records, expected_steps);
    if damaged {
        notes.push("trace ends with an unreadable record".into());
    }
    let rows = heatmap_rows(&records)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = Vec::new();
    let mut total = 0;
    for (id, list) in &rows {
        let path = out_dir.join(file_name(*id));
        let mut w = csv::Writer::from_path(&path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        w.write_record([
            "step", "stage", "kind", "block", "row_role", "col_role", "value",
        ])
        .and_then(|_| {
            for r in list {
                w.write_record([
                    r.step.to_string(),
                    r.stage.name().to_string(),
                    r.kind.name().to_string(),
                    r.block.name().to_string(),
                    r.row_role.clone(),
                    r.col_role.clone(),
                    r.value.to_string(),
                ])?;
            }
            w.flush().map_err(csv::Error::from)
        })
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        total += list.len();
        files.push(path);
    }
    Ok(ExportSummary {
        files,
        rows: total,
        partial: !notes.is_empty(),
        notes,
    })
}

pub fn import_heatmap(path: &Path) -> Result<Vec<HeatmapRow>> {
    let mut rd = csv::Reader::from_path(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| Error::CorruptState(format!("{}: {e}", path.display())))?;
        let field = |k: usize| rec.get(k).unwrap_or("");
        let bad = |what: &str| {
            Error::CorruptState(format!("{} row {}: bad {what}", path.display(), i + 2))
        };
        let stage = match field(1) {
            "intra_text" => Stage::IntraText,
            "intra_visual" => Stage::IntraVisual,
            "inter" => Stage::Inter,
            _ => return Err(bad("stage")),
        };
        let id: MatrixId = format!("{}.{}", field(2), field(3))
            .parse()
            .map_err(|_| bad("matrix"))?;
        out.push(HeatmapRow {
            step: field(0).parse().map_err(|_| bad("step"))?,
            stage,
            kind: id.kind,
            block: id.block,
            row_role: field(4).to_string(),
            col_role: field(5).to_string(),
            value: field(6).parse().map_err(|_| bad("value"))?,
        });
    }
    Ok(out)
}

/// Rebuild per-step logit matrices of one block from imported rows.
pub fn frames(
    rows: &[HeatmapRow],
    roles: &RoleLists,
) -> Result<BTreeMap<(usize, MatrixId), DMatrix<f64>>> {
    let index = |m: Modality, name: &str| -> Result<usize> {
        let list = match m {
            Modality::Text => &roles.text,
            Modality::Visual => &roles.visual,
        };
        list.iter()
            .position(|r| r == name)
            .ok_or_else(|| Error::CorruptState(format!("unknown role `{name}`")))
    };
    let mut out: BTreeMap<(usize, MatrixId), DMatrix<f64>> = BTreeMap::new();
    for r in rows {
        let id = MatrixId::new(r.kind, r.block);
        let (nr, nc) = (
            if r.block.src() == Modality::Text {
                roles.text.len()
            } else {
                roles.visual.len()
            },
            if r.block.dst() == Modality::Text {
                roles.text.len()
            } else {
                roles.visual.len()
            },
        );
        let m = out
            .entry((r.step, id))
            .or_insert_with(|| DMatrix::zeros(nr, nc));
        m[(
            index(r.block.src(), &r.row_role)?,
            index(r.block.dst(), &r.col_role)?,
        )] = r.value;
    }
    Ok(out)
}
