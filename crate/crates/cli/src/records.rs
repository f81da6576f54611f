//! Per-step record files of `sense` runs.
//!
//! One row per `(j, k, l)` with 1-based indices. Rows of a task are written
//! together, so a file cut short by an interrupt loses at most the task
//! being written.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use fluxsense::pea::{Kept, StepRecord, TaskResult};

use crate::header::Header;
use crate::CmdError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub j: usize,
    pub flux_true: f64,
    pub k: usize,
    pub l: usize,
    pub tau_l_s: f64,
    pub n_l: usize,
    pub half: Kept,
    pub phi_hat: f64,
    pub decided_flag: u8,
}

pub const COLUMNS: &str = "j,flux_true,k,l,tau_l_s,n_l,half,phi_hat,decided_flag";

pub fn rows_of(task: &TaskResult) -> Vec<Row> {
    task.records
        .iter()
        .map(|r| Row {
            j: task.flux_index + 1,
            flux_true: task.true_flux,
            k: task.repetition + 1,
            l: r.step,
            tau_l_s: r.tau,
            n_l: r.shots,
            half: r.kept,
            phi_hat: r.phi_hat,
            decided_flag: r.decided as u8,
        })
        .collect()
}

/// CSV lines for `rows`, without the column header.
pub fn render_rows(rows: &[Row]) -> Result<String, CmdError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    for row in rows {
        w.serialize(row)
            .map_err(|e| CmdError::Runtime(format!("record serialisation: {e}")))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CmdError::Runtime(format!("record serialisation: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Contents of a record file: its header and every complete task.
#[derive(Debug, Clone)]
pub struct RecordFile {
    pub header: Header,
    /// Sorted by `(j, k)`. Candidate blocks are not stored, so `first` and
    /// `count` of the step records are zero.
    pub tasks: Vec<TaskResult>,
}

/// Read a record file, keeping only tasks with all `steps` rows.
pub fn read_records(path: &Path, steps: Option<usize>) -> Result<RecordFile, CmdError> {
    let text = std::fs::read_to_string(path)?;
    let header = Header::parse(&text)?;
    let steps = match steps {
        Some(s) => s,
        None => header.spec()?.pea.max_steps,
    };
    // drop a trailing line cut short by an interrupt
    let body = match text.rfind('\n') {
        Some(end) => &text[..=end],
        None => "",
    };
    let bad = |reason: String| {
        CmdError::Runtime(
            fluxsense::Error::Records {
                path: path.display().to_string(),
                reason,
            }
            .to_string(),
        )
    };
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .has_headers(true)
        .from_reader(body.as_bytes());
    let columns = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    if columns.iter().collect::<Vec<_>>().join(",") != COLUMNS {
        return Err(bad(format!("unexpected columns {columns:?}")));
    }
    let mut groups: BTreeMap<(usize, usize), Vec<Row>> = BTreeMap::new();
    for row in reader.deserialize::<Row>() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        if row.j == 0 || row.k == 0 || row.l == 0 {
            return Err(bad("indices are 1-based".into()));
        }
        groups.entry((row.j, row.k)).or_default().push(row);
    }
    let mut tasks = Vec::with_capacity(groups.len());
    for ((j, k), mut rows) in groups {
        rows.sort_by_key(|r| r.l);
        let complete = rows.len() == steps && rows.iter().enumerate().all(|(i, r)| r.l == i + 1);
        if !complete {
            continue;
        }
        let true_flux = rows[0].flux_true;
        tasks.push(TaskResult {
            flux_index: j - 1,
            repetition: k - 1,
            true_flux,
            records: rows
                .iter()
                .map(|r| StepRecord {
                    step: r.l,
                    tau: r.tau_l_s,
                    shots: r.n_l,
                    kept: r.half,
                    phi_hat: r.phi_hat,
                    decided: r.decided_flag != 0,
                    first: 0,
                    count: 0,
                })
                .collect(),
        });
    }
    Ok(RecordFile { header, tasks })
}

/// Write `header`, the column line and the rows of `tasks` in `(j, k, l)` order.
pub fn write_canonical<W: Write>(
    out: &mut W,
    header: &Header,
    tasks: &[TaskResult],
) -> Result<(), CmdError> {
    let mut sorted: Vec<&TaskResult> = tasks.iter().collect();
    sorted.sort_by_key(|t| (t.flux_index, t.repetition));
    out.write_all(header.render().as_bytes())?;
    writeln!(out, "{COLUMNS}")?;
    for t in sorted {
        out.write_all(render_rows(&rows_of(t))?.as_bytes())?;
    }
    Ok(())
}
