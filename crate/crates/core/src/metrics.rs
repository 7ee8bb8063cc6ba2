//! Streaming forgetting metrics, linear CKA and routing-homogeneity reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trace::TraceRecord;

/// Relative drop of `current` below the best earlier accuracy, clamped at 0.
///
/// An empty history or a zero historical best gives 0.
pub fn forgetting(history: &[f64], current: f64) -> f64 {
    let best = history.iter().copied().fold(0.0, f64::max);
    if best <= 0.0 {
        return 0.0;
    }
    ((best - current) / best).max(0.0)
}

/// `(AP, AF)` for one dataset: the mean accuracy and the mean forgetting of
/// its column `a_1..a_t`.
pub fn ap_af(column: &[f64]) -> Result<(f64, f64)> {
    if column.is_empty() {
        return Err(Error::Invalid("accuracy column is empty".into()));
    }
    let n = column.len() as f64;
    let ap = column.iter().sum::<f64>() / n;
    let af = (0..column.len())
        .map(|i| forgetting(&column[..i], column[i]))
        .sum::<f64>()
        / n;
    Ok((ap, af))
}

/// Unweighted means of per-dataset `(AP, AF)` pairs.
pub fn map_maf(per_task: &[(f64, f64)]) -> Result<(f64, f64)> {
    if per_task.is_empty() {
        return Err(Error::Invalid("no dataset has been evaluated yet".into()));
    }
    let n = per_task.len() as f64;
    let map = per_task.iter().map(|p| p.0).sum::<f64>() / n;
    let maf = per_task.iter().map(|p| p.1).sum::<f64>() / n;
    Ok((map, maf))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskMetrics {
    pub a: f64,
    pub f: f64,
    pub ap: f64,
    pub af: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LedgerRow {
    /// 1-based chunk index.
    pub t: usize,
    /// `None` for datasets not yet seen at `t`.
    pub tasks: Vec<Option<TaskMetrics>>,
    pub map: f64,
    pub maf: f64,
}

#[derive(Clone, Debug, Default)]
struct Running {
    count: usize,
    best: f64,
    sum_a: f64,
    sum_f: f64,
}

/// Incremental accuracy matrix with derived metrics.
///
/// A dataset enters at the first chunk it is evaluated on and must be
/// evaluated at every later chunk. Its AP/AF average from that chunk on;
/// MAP/MAF average over datasets entered so far.
#[derive(Clone, Debug)]
pub struct MetricLedger {
    n_tasks: usize,
    running: Vec<Option<Running>>,
    rows: Vec<LedgerRow>,
}

impl MetricLedger {
    pub fn new(n_tasks: usize) -> Self {
        Self {
            n_tasks,
            running: vec![None; n_tasks],
            rows: Vec::new(),
        }
    }

    pub fn n_tasks(&self) -> usize {
        self.n_tasks
    }

    pub fn rows(&self) -> &[LedgerRow] {
        &self.rows
    }

    pub fn last(&self) -> Option<&LedgerRow> {
        self.rows.last()
    }

    /// Appends the accuracies measured after chunk `t = rows().len() + 1`.
    pub fn push(&mut self, acc: &[Option<f64>]) -> Result<&LedgerRow> {
        if acc.len() != self.n_tasks {
            return Err(Error::Invalid(format!(
                "{} accuracies for {} datasets",
                acc.len(),
                self.n_tasks
            )));
        }
        let t = self.rows.len() + 1;
        for (m, a) in acc.iter().enumerate() {
            match a {
                Some(a) if !(0.0..=1.0).contains(a) => {
                    return Err(Error::Invalid(format!(
                        "accuracy {a} of dataset {m} at chunk {t} is outside [0, 1]"
                    )));
                }
                None if self.running[m].is_some() => {
                    return Err(Error::Invalid(format!(
                        "dataset {m} was not evaluated at chunk {t} after entering"
                    )));
                }
                _ => {}
            }
        }
        let mut tasks = Vec::with_capacity(self.n_tasks);
        let mut pairs = Vec::new();
        for (m, a) in acc.iter().enumerate() {
            let Some(a) = *a else {
                tasks.push(None);
                continue;
            };
            let r = self.running[m].get_or_insert_with(Running::default);
            let f = if r.count == 0 || r.best <= 0.0 {
                0.0
            } else {
                ((r.best - a) / r.best).max(0.0)
            };
            r.count += 1;
            r.best = r.best.max(a);
            r.sum_a += a;
            r.sum_f += f;
            let n = r.count as f64;
            let tm = TaskMetrics {
                a,
                f,
                ap: r.sum_a / n,
                af: r.sum_f / n,
            };
            pairs.push((tm.ap, tm.af));
            tasks.push(Some(tm));
        }
        let (map, maf) = map_maf(&pairs)?;
        self.rows.push(LedgerRow { t, tasks, map, maf });
        Ok(self.rows.last().expect("row just pushed"))
    }

    /// Rebuilds a ledger from a full `T×M` matrix.
    pub fn from_matrix(acc: &[Vec<Option<f64>>]) -> Result<Self> {
        let m = acc.first().map_or(0, Vec::len);
        let mut ledger = Self::new(m);
        for row in acc {
            ledger.push(row)?;
        }
        Ok(ledger)
    }

    /// Per-dataset rows `t,m,a,F,AP,AF` (datasets not yet seen are skipped).
    pub fn write_task_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,m,a,F,AP,AF")?;
        for row in &self.rows {
            for (m, tm) in row.tasks.iter().enumerate() {
                if let Some(tm) = tm {
                    writeln!(w, "{},{},{},{},{},{}", row.t, m, tm.a, tm.f, tm.ap, tm.af)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Summary rows `t,MAP,MAF`.
    pub fn write_summary_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,MAP,MAF")?;
        for row in &self.rows {
            writeln!(w, "{},{},{}", row.t, row.map, row.maf)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads `t,m,a` triples from any CSV with those three header columns
/// (extra columns are ignored) into a dense `T×M` matrix.
pub fn read_accuracy_csv<R: BufRead>(r: R) -> Result<Vec<Vec<Option<f64>>>> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| csv_err(1, "missing header"))?;
    let cols: Vec<&str> = header.trim().split(',').map(str::trim).collect();
    let find = |name: &str| {
        cols.iter()
            .position(|c| *c == name)
            .ok_or_else(|| csv_err(1, &format!("no `{name}` column")))
    };
    let (ct, cm, ca) = (find("t")?, find("m")?, find("a")?);
    let mut cells: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let (mut t_max, mut m_max) = (0, 0);
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let get = |c: usize| {
            f.get(c)
                .copied()
                .ok_or_else(|| csv_err(lineno, "short row"))
        };
        let t: usize = get(ct)?.parse().map_err(|_| csv_err(lineno, "bad t"))?;
        let m: usize = get(cm)?.parse().map_err(|_| csv_err(lineno, "bad m"))?;
        let a: f64 = get(ca)?.parse().map_err(|_| csv_err(lineno, "bad a"))?;
        if t == 0 {
            return Err(csv_err(lineno, "t is 1-based"));
        }
        if cells.insert((t, m), a).is_some() {
            return Err(csv_err(lineno, "duplicate (t, m)"));
        }
        t_max = t_max.max(t);
        m_max = m_max.max(m + 1);
    }
    let mut out = vec![vec![None; m_max]; t_max];
    for ((t, m), a) in cells {
        out[t - 1][m] = Some(a);
    }
    Ok(out)
}

fn csv_err(line: usize, msg: &str) -> Error {
    Error::Config {
        line,
        msg: msg.to_string(),
    }
}

// ---------------------------------------------------------------------------
// CKA

fn center_columns(x: &Tensor) -> Tensor {
    let (n, p) = (x.rows(), x.cols());
    let mut out = x.clone();
    for c in 0..p {
        let mean = (0..n).map(|r| x.get(r, c)).sum::<f64>() / n as f64;
        for r in 0..n {
            out.set(r, c, x.get(r, c) - mean);
        }
    }
    out
}

/// Linear CKA `‖Ycᵀ Xc‖² / (‖Xcᵀ Xc‖ ‖Ycᵀ Yc‖)` on column-centered inputs.
pub fn cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(Error::Shape {
            op: "cka",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    if x.rows() < 2 {
        return Err(Error::Invalid("CKA needs at least two rows".into()));
    }
    let xc = center_columns(x);
    let yc = center_columns(y);
    // Treat centered data at rounding-noise level as constant.
    let flat = |c: &Tensor, raw: &Tensor| {
        c.frobenius_sq().sqrt() <= 1e-12 * raw.frobenius_sq().sqrt().max(1.0)
    };
    if flat(&xc, x) || flat(&yc, y) {
        return Err(Error::DegenerateFeatures);
    }
    let cross = yc.t_matmul(&xc)?.frobenius_sq();
    let xx = xc.t_matmul(&xc)?.frobenius_sq().sqrt();
    let yy = yc.t_matmul(&yc)?.frobenius_sq().sqrt();
    Ok(cross / (xx * yy))
}

// ---------------------------------------------------------------------------
// Homogeneity

/// Routing unit: one adapter site of one layer.
pub type SiteKey = (usize, String);

#[derive(Clone, Debug, PartialEq)]
pub struct HomogeneityReport {
    pub tasks: Vec<usize>,
    /// `M×M` CKA between the routing patterns of every task pair; `None`
    /// where a pattern is constant (for example a single expert).
    pub cka: Vec<Vec<Option<f64>>>,
    /// Per site, per task: mean routing weight of every expert.
    pub activation: BTreeMap<SiteKey, BTreeMap<usize, Vec<f64>>>,
}

impl HomogeneityReport {
    /// Mean of the defined off-diagonal CKA entries.
    pub fn mean_off_diagonal(&self) -> Option<f64> {
        let vals: Vec<f64> = self
            .cka
            .iter()
            .enumerate()
            .flat_map(|(i, row)| {
                row.iter()
                    .enumerate()
                    .filter(move |(j, _)| *j != i)
                    .filter_map(|(_, v)| *v)
            })
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn write_cka_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = self.tasks.iter().map(|t| format!("task{t}")).collect();
        writeln!(w, "task,{}", header.join(","))?;
        for (i, row) in self.cka.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .map(|v| v.map_or(String::new(), |v| v.to_string()))
                .collect();
            writeln!(w, "task{},{}", self.tasks[i], cells.join(","))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Rows `layer,site,task,expert_0..expert_{N-1}`.
    pub fn write_activation_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self
            .activation
            .values()
            .flat_map(|m| m.values())
            .map(Vec::len)
            .max()
            .unwrap_or(0);
        let mut header = String::from("layer,site,task");
        for j in 0..n {
            let _ = write!(header, ",expert_{j}");
        }
        writeln!(w, "{header}")?;
        for ((layer, site), per_task) in &self.activation {
            for (task, props) in per_task {
                let cells: Vec<String> = props.iter().map(|v| v.to_string()).collect();
                writeln!(w, "{layer},{site},{task},{}", cells.join(","))?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// CKA matrix and activation proportions from routing traces.
///
/// Each task contributes a matrix with one row per routing unit (site ×
/// expert, the concatenated `s_mean` vectors) and one column per sample, so
/// any two tasks share the row axis regardless of their sample counts.
/// Records are keyed by `(task, sample, chunk)`; only the latest chunk of
/// each sample is used.
pub fn homogeneity_report(traces: &[TraceRecord], tasks: &[usize]) -> Result<HomogeneityReport> {
    let last_chunk = traces.iter().map(|r| r.chunk).max().unwrap_or(0);
    let mut per_sample: BTreeMap<usize, BTreeMap<u64, BTreeMap<SiteKey, &[f64]>>> = BTreeMap::new();
    for r in traces.iter().filter(|r| r.chunk == last_chunk) {
        per_sample
            .entry(r.task_id)
            .or_default()
            .entry(r.sample_id)
            .or_default()
            .insert((r.layer, r.site.clone()), &r.s_mean);
    }
    let mut unit_sites: Option<Vec<(SiteKey, usize)>> = None;
    let mut matrices = Vec::with_capacity(tasks.len());
    let mut activation: BTreeMap<SiteKey, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for &task in tasks {
        let samples = per_sample
            .get(&task)
            .ok_or_else(|| Error::Invalid(format!("no routing traces for task {task}")))?;
        if samples.len() < 2 {
            return Err(Error::Invalid(format!(
                "task {task} has {} traced samples, need 2",
                samples.len()
            )));
        }
        let layout: Vec<(SiteKey, usize)> = samples
            .values()
            .next()
            .expect("non-empty")
            .iter()
            .map(|(k, v)| (k.clone(), v.len()))
            .collect();
        match &unit_sites {
            None => unit_sites = Some(layout.clone()),
            Some(u) if *u != layout => {
                return Err(Error::Invalid(format!(
                    "task {task} traces cover different sites"
                )));
            }
            _ => {}
        }
        let n_units: usize = layout.iter().map(|(_, n)| n).sum();
        let mut cols = Vec::with_capacity(samples.len());
        for (id, sites) in samples {
            if sites.len() != layout.len() {
                return Err(Error::Invalid(format!(
                    "sample {id} is missing site records"
                )));
            }
            let mut col = Vec::with_capacity(n_units);
            for (key, n) in &layout {
                let v = sites.get(key).ok_or_else(|| {
                    Error::Invalid(format!("sample {id} is missing site {key:?}"))
                })?;
                if v.len() != *n {
                    return Err(Error::Invalid(format!(
                        "sample {id} site {key:?} has {} experts",
                        v.len()
                    )));
                }
                col.extend_from_slice(v);
            }
            cols.push(col);
        }
        for (u, (key, n)) in layout.iter().enumerate() {
            let offset: usize = layout[..u].iter().map(|(_, n)| n).sum();
            let props: Vec<f64> = (0..*n)
                .map(|j| cols.iter().map(|c| c[offset + j]).sum::<f64>() / cols.len() as f64)
                .collect();
            activation
                .entry(key.clone())
                .or_default()
                .insert(task, props);
        }
        // units × samples
        matrices.push(Tensor::from_rows(&cols)?.transpose());
    }
    let m = tasks.len();
    let defined = |r: Result<f64>| match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::DegenerateFeatures) => Ok(None),
        Err(e) => Err(e),
    };
    let mut grid = vec![vec![None; m]; m];
    for i in 0..m {
        for j in i..m {
            let v = defined(cka(&matrices[i], &matrices[j]))?;
            grid[i][j] = v;
            grid[j][i] = v;
        }
    }
    Ok(HomogeneityReport {
        tasks: tasks.to_vec(),
        cka: grid,
        activation,
    })
}
