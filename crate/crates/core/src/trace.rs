//! Routing traces: one JSON line per (sample, adapter site).

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::backbone::{ForwardOptions, Model, Sample};
use crate::error::{Error, Result};
use crate::routing::RoutingDecision;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub chunk: usize,
    pub sample_id: u64,
    pub task_id: usize,
    pub layer: usize,
    pub site: String,
    /// Selection probabilities; absent when the mode has no selection stage.
    pub p: Option<Vec<f64>>,
    #[serde(rename = "S")]
    pub subset: Vec<usize>,
    /// Token-averaged routing weights, length `N`.
    pub s_mean: Vec<f64>,
}

/// Runs `sample` through `model` and records every routed site.
/// Sites without routing (frozen mode) produce no records.
pub fn trace_sample(model: &Model, sample: &Sample, chunk: usize) -> Result<Vec<TraceRecord>> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, sample, &ForwardOptions::default())?;
    Ok(out
        .sites
        .iter()
        .filter_map(|sf| {
            let routed = sf.routed.as_ref()?;
            let d = RoutingDecision::from_routed(&tape, routed);
            let site = &model.sites[sf.site];
            Some(TraceRecord {
                chunk,
                sample_id: sample.id,
                task_id: sample.task_id,
                layer: site.layer,
                site: site.kind.as_str().to_string(),
                s_mean: d.s_mean(),
                p: d.p,
                subset: d.subset,
            })
        })
        .collect())
}

pub fn write_jsonl<W: Write>(mut w: W, records: &[TraceRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<TraceRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}
