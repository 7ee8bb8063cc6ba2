//! Synthetic streams of mixed-task chunks.
//!
//! Each task poses classification over `n_classes` answers. The visual tokens
//! of a sample are noisy copies of a class prototype; the instruction is a
//! task-specific template followed by random filler tokens. Prototypes come
//! from a pool shared by all tasks and every task assigns its own label
//! permutation to that pool, so the same image means different answers
//! under different instructions. Only the instruction tells tasks apart.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Sample;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Tolerance on `Σ_m π_t^(m) = 1`.
pub const MIXTURE_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub n_tasks: usize,
    pub n_chunks: usize,
    pub chunk_size: usize,
    pub test_size: usize,
    pub n_classes: usize,
    pub d_e: usize,
    pub vocab: usize,
    pub l_vis: usize,
    pub template_len: usize,
    pub filler_len: usize,
    pub sigma: f64,
    /// Task 0 appears in chunks `1..=disappear_after` and never again.
    pub disappear_after: usize,
    /// Probability that a task other than task 0 is active in a chunk.
    pub activity: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            n_tasks: 5,
            n_chunks: 12,
            chunk_size: 200,
            test_size: 100,
            n_classes: 4,
            d_e: 32,
            vocab: 64,
            l_vis: 4,
            template_len: 2,
            filler_len: 2,
            sigma: 0.5,
            disappear_after: 4,
            activity: 0.5,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.n_tasks == 0 || self.n_chunks == 0 || self.chunk_size == 0 || self.test_size == 0 {
            return bad(format!("empty stream dimensions in {self:?}"));
        }
        if self.n_classes < 2 || self.d_e == 0 || self.l_vis == 0 || self.template_len == 0 {
            return bad(format!("degenerate task shape in {self:?}"));
        }
        if self.n_tasks * self.template_len >= self.vocab && self.filler_len > 0 {
            return bad(format!(
                "vocab {} too small for {} task templates plus filler tokens",
                self.vocab, self.n_tasks
            ));
        }
        if !(self.sigma >= 0.0) || !(0.0..=1.0).contains(&self.activity) {
            return bad(format!("sigma/activity out of range in {self:?}"));
        }
        Ok(())
    }

    fn filler_range(&self) -> (u32, u32) {
        ((self.n_tasks * self.template_len) as u32, self.vocab as u32)
    }
}

/// One task family `P^(m)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub task_id: usize,
    /// Fixed instruction tokens; distinct tasks share none.
    pub template: Vec<u32>,
    pub filler_len: usize,
    /// Filler tokens are drawn from `[lo, hi)`.
    pub filler_range: (u32, u32),
    /// `n_classes×d_e` class means of the visual tokens.
    pub prototypes: Tensor,
    pub sigma: f64,
    pub l_vis: usize,
    pub test_size: usize,
}

impl TaskSpec {
    pub fn n_classes(&self) -> usize {
        self.prototypes.rows()
    }
}

/// Sample ids encode `(task, split, counter)`; training and test ids never collide.
pub fn sample_id(task: usize, test: bool, counter: u64) -> u64 {
    ((task as u64) << 48) | (u64::from(test) << 47) | counter
}

pub fn is_test_id(id: u64) -> bool {
    (id >> 47) & 1 == 1
}

/// Draws samples of one task and holds its frozen test set.
#[derive(Clone, Debug)]
pub struct TaskGenerator {
    pub spec: TaskSpec,
    seed: u64,
    test_set: Vec<Sample>,
}

impl TaskGenerator {
    /// The test set is drawn here, once, from a seed reserved for it.
    pub fn new(spec: TaskSpec, seed: u64) -> Result<Self> {
        let mut g = Self {
            spec,
            seed,
            test_set: Vec::new(),
        };
        let mut r = rng::rng_for(seed, &format!("task.{}.test", g.spec.task_id));
        g.test_set = (0..g.spec.test_size as u64)
            .map(|k| g.draw(&mut r, sample_id(g.spec.task_id, true, k)))
            .collect::<Result<_>>()?;
        Ok(g)
    }

    pub fn test_set(&self) -> &[Sample] {
        &self.test_set
    }

    /// Class `c ~ uniform`, visual tokens `prototype_c + N(0, σ²)`,
    /// instruction = template ‖ random filler.
    pub fn draw(&self, r: &mut ChaCha8Rng, id: u64) -> Result<Sample> {
        let spec = &self.spec;
        let c = r.gen_range(0..spec.n_classes());
        let d = spec.prototypes.cols();
        let noise = rng::normal(r, spec.l_vis, d, spec.sigma);
        let mut vis = noise.into_data();
        for row in vis.chunks_mut(d) {
            for (v, p) in row.iter_mut().zip(spec.prototypes.row_slice(c)) {
                *v += p;
            }
        }
        let mut instruction = spec.template.clone();
        let (lo, hi) = spec.filler_range;
        instruction.extend((0..spec.filler_len).map(|_| r.gen_range(lo..hi)));
        Sample::new(
            id,
            spec.task_id,
            Tensor::new(spec.l_vis, d, vis)?,
            instruction,
            c,
        )
    }

    /// `n` training samples for chunk `t`, reproducible from `(seed, task, t)`.
    pub fn draw_for_chunk(&self, t: usize, n: usize) -> Result<Vec<Sample>> {
        let mut r = rng::rng_for(self.seed, &format!("task.{}.chunk.{t}", self.spec.task_id));
        (0..n as u64)
            .map(|k| {
                self.draw(
                    &mut r,
                    sample_id(self.spec.task_id, false, (t as u64) << 24 | k),
                )
            })
            .collect()
    }
}

pub fn make_task_generator(spec: TaskSpec, seed: u64) -> Result<TaskGenerator> {
    TaskGenerator::new(spec, seed)
}

/// `T×M` mixture matrix plus chunk size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamSchedule {
    pub mixture: Vec<Vec<f64>>,
    pub chunk_size: usize,
    pub seed: u64,
}

impl StreamSchedule {
    pub fn n_chunks(&self) -> usize {
        self.mixture.len()
    }

    pub fn n_tasks(&self) -> usize {
        self.mixture.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.n_tasks();
        for (i, row) in self.mixture.iter().enumerate() {
            if row.len() != m {
                return Err(Error::Invalid(format!(
                    "mixture row {} has {} entries, expected {m}",
                    i + 1,
                    row.len()
                )));
            }
            check_mixture_row(row, i + 1)?;
        }
        Ok(())
    }
}

fn check_mixture_row(row: &[f64], t: usize) -> Result<()> {
    if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::Invalid(format!(
            "mixture row {t} has entries outside [0, 1]"
        )));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > MIXTURE_TOL {
        return Err(Error::Invalid(format!(
            "mixture row {t} sums to {total}, not 1"
        )));
    }
    Ok(())
}

/// Largest-remainder apportionment of `n` items to `weights` (summing to 1).
/// Ties in the fractional parts go to the lower index.
pub fn apportion(weights: &[f64], n: usize) -> Vec<usize> {
    let quotas: Vec<f64> = weights.iter().map(|w| w * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// One unit of the stream.
#[derive(Clone, Debug, PartialEq)]
pub struct Chunk {
    /// 1-based position in the stream.
    pub t: usize,
    pub samples: Vec<Sample>,
    /// Realized per-task sample counts.
    pub counts: Vec<usize>,
}

impl Chunk {
    pub fn tasks_present(&self) -> impl Iterator<Item = usize> + '_ {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(m, _)| m)
    }
}

/// Draws `apportion(π_t, n_t)` samples per task, concatenates and shuffles
/// with a seed derived from `t`.
pub fn compose_chunk(
    schedule: &StreamSchedule,
    t: usize,
    generators: &[TaskGenerator],
) -> Result<Chunk> {
    if t == 0 || t > schedule.n_chunks() {
        return Err(Error::OutOfRange {
            what: "chunk index (1-based)",
            index: t,
            len: schedule.n_chunks(),
        });
    }
    let row = &schedule.mixture[t - 1];
    if row.len() != generators.len() {
        return Err(Error::Invalid(format!(
            "{} mixture entries for {} tasks",
            row.len(),
            generators.len()
        )));
    }
    check_mixture_row(row, t)?;
    let counts = apportion(row, schedule.chunk_size);
    let mut samples = Vec::with_capacity(schedule.chunk_size);
    for (g, &n) in generators.iter().zip(&counts) {
        if n > 0 {
            samples.extend(g.draw_for_chunk(t, n)?);
        }
    }
    samples.shuffle(&mut rng::rng_for(schedule.seed, &format!("shuffle.{t}")));
    Ok(Chunk { t, samples, counts })
}

/// Schedule plus the task generators it draws from.
#[derive(Clone, Debug)]
pub struct Stream {
    pub config: StreamConfig,
    pub schedule: StreamSchedule,
    pub generators: Vec<TaskGenerator>,
}

impl Stream {
    pub fn chunk(&self, t: usize) -> Result<Chunk> {
        compose_chunk(&self.schedule, t, &self.generators)
    }

    /// Chunks `1..=T`, composed lazily and handed out once each.
    pub fn chunks(&self) -> impl Iterator<Item = Result<Chunk>> + '_ {
        (1..=self.schedule.n_chunks()).map(move |t| self.chunk(t))
    }

    pub fn test_sets(&self) -> Vec<&[Sample]> {
        self.generators
            .iter()
            .map(TaskGenerator::test_set)
            .collect()
    }
}

fn build_tasks(cfg: &StreamConfig, seed: u64) -> Result<Vec<TaskSpec>> {
    let mut pool_rng = rng::rng_for(seed, "prototype.pool");
    let pool = rng::normal(&mut pool_rng, cfg.n_classes, cfg.d_e, 1.0);
    (0..cfg.n_tasks)
        .map(|m| {
            let mut perm: Vec<usize> = (0..cfg.n_classes).collect();
            perm.shuffle(&mut rng::rng_for(seed, &format!("task.{m}.labels")));
            let rows: Vec<Vec<f64>> = perm.iter().map(|&k| pool.row_slice(k).to_vec()).collect();
            let template = (0..cfg.template_len)
                .map(|k| (m * cfg.template_len + k) as u32)
                .collect();
            Ok(TaskSpec {
                task_id: m,
                template,
                filler_len: cfg.filler_len,
                filler_range: cfg.filler_range(),
                prototypes: Tensor::from_rows(&rows)?,
                sigma: cfg.sigma,
                l_vis: cfg.l_vis,
                test_size: cfg.test_size,
            })
        })
        .collect()
}

fn build_schedule(cfg: &StreamConfig, seed: u64) -> StreamSchedule {
    let mut r = rng::rng_for(seed, "schedule");
    let (m, t_max) = (cfg.n_tasks, cfg.n_chunks);
    let mut active = vec![vec![false; m]; t_max];
    for (t, row) in active.iter_mut().enumerate() {
        row[0] = t < cfg.disappear_after || m == 1;
        for flag in row.iter_mut().skip(1) {
            *flag = r.gen_bool(cfg.activity);
        }
    }
    // Every chunk trains something; chunks that still carry task 0 carry
    // at least one other task too.
    for (t, row) in active.iter_mut().enumerate() {
        let others = row.iter().skip(1).filter(|&&a| a).count();
        let need_other = m > 1 && (others == 0) && (t >= cfg.disappear_after || row[0]);
        if need_other {
            row[r.gen_range(1..m)] = true;
        }
    }
    // Every task shows up at least once.
    for task in 1..m {
        if !active.iter().any(|row| row[task]) {
            let t = r.gen_range(0..t_max);
            active[t][task] = true;
        }
    }
    let mixture = active
        .iter()
        .map(|row| {
            let w: Vec<f64> = row
                .iter()
                .map(|&a| if a { r.gen_range(0.2..1.0) } else { 0.0 })
                .collect();
            let total: f64 = w.iter().sum();
            w.iter().map(|v| v / total).collect()
        })
        .collect();
    StreamSchedule {
        mixture,
        chunk_size: cfg.chunk_size,
        seed,
    }
}

pub fn build_stream(cfg: StreamConfig, seed: u64) -> Result<Stream> {
    cfg.validate()?;
    let generators = build_tasks(&cfg, seed)?
        .into_iter()
        .map(|spec| TaskGenerator::new(spec, seed))
        .collect::<Result<Vec<_>>>()?;
    let schedule = build_schedule(&cfg, seed);
    schedule.validate()?;
    Ok(Stream {
        config: cfg,
        schedule,
        generators,
    })
}

/// Five tasks, twelve chunks of 200; task 0 only in chunks 1–4.
pub fn build_default_stream(seed: u64) -> Result<Stream> {
    build_stream(StreamConfig::default(), seed)
}

// ---------------------------------------------------------------------------
// On-disk format

pub const SAMPLE_MAGIC: &[u8; 4] = b"SLSM";
pub const SAMPLE_VERSION: u32 = 1;

/// Writes samples as little-endian binary records:
///
/// ```text
/// magic "SLSM" | version u32 | count u32
/// record*: id u64 | task u32 | label u32 | l_vis u32 | d u32 | l_text u32
///          | visual f64 × (l_vis·d) | tokens u32 × l_text
/// ```
pub fn write_samples<W: Write>(mut w: W, samples: &[Sample]) -> Result<()> {
    w.write_all(SAMPLE_MAGIC)?;
    w.write_all(&SAMPLE_VERSION.to_le_bytes())?;
    w.write_all(&(samples.len() as u32).to_le_bytes())?;
    for s in samples {
        w.write_all(&s.id.to_le_bytes())?;
        for v in [
            s.task_id,
            s.label,
            s.visual.rows(),
            s.visual.cols(),
            s.instruction.len(),
        ] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for v in s.visual.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        for t in &s.instruction {
            w.write_all(&t.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples<R: Read>(mut r: R, origin: &Path) -> Result<Vec<Sample>> {
    let bad = |msg: String| Error::Format {
        path: origin.to_path_buf(),
        msg,
    };
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4)?;
    if &b4 != SAMPLE_MAGIC {
        return Err(bad(format!("bad magic {b4:?}")));
    }
    let u32_ = |r: &mut R| -> std::io::Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    };
    let version = u32_(&mut r)?;
    if version != SAMPLE_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = u32_(&mut r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        r.read_exact(&mut b8)?;
        let id = u64::from_le_bytes(b8);
        let task = u32_(&mut r)? as usize;
        let label = u32_(&mut r)? as usize;
        let l_vis = u32_(&mut r)? as usize;
        let d = u32_(&mut r)? as usize;
        let l_text = u32_(&mut r)? as usize;
        let mut vis = Vec::with_capacity(l_vis * d);
        for _ in 0..l_vis * d {
            r.read_exact(&mut b8)?;
            vis.push(f64::from_le_bytes(b8));
        }
        let tokens = (0..l_text)
            .map(|_| u32_(&mut r))
            .collect::<std::io::Result<Vec<_>>>()?;
        let visual = Tensor::new(l_vis, d, vis).map_err(|e| bad(e.to_string()))?;
        out.push(Sample::new(id, task, visual, tokens, label).map_err(|e| bad(e.to_string()))?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkEntry {
    pub t: usize,
    pub file: String,
    pub counts: Vec<usize>,
}

/// `manifest.json`: the single description of a materialized stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(rename = "T")]
    pub n_chunks: usize,
    pub n_t: usize,
    #[serde(rename = "M")]
    pub n_tasks: usize,
    pub pi: Vec<Vec<f64>>,
    pub seeds: BTreeMap<String, u64>,
    pub config: StreamConfig,
    pub chunks: Vec<ChunkEntry>,
    pub test_files: Vec<String>,
}

pub fn chunk_file_name(t: usize) -> String {
    format!("chunk_{t:03}.bin")
}

/// Writes every chunk, every test set and `manifest.json` under `dir`.
pub fn materialize(stream: &Stream, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut chunks = Vec::new();
    for chunk in stream.chunks() {
        let chunk = chunk?;
        let file = chunk_file_name(chunk.t);
        write_samples(
            BufWriter::new(File::create(dir.join(&file))?),
            &chunk.samples,
        )?;
        chunks.push(ChunkEntry {
            t: chunk.t,
            file,
            counts: chunk.counts,
        });
    }
    let mut test_files = Vec::new();
    for g in &stream.generators {
        let file = format!("test_{}.bin", g.spec.task_id);
        write_samples(BufWriter::new(File::create(dir.join(&file))?), g.test_set())?;
        test_files.push(file);
    }
    let manifest = Manifest {
        n_chunks: stream.schedule.n_chunks(),
        n_t: stream.schedule.chunk_size,
        n_tasks: stream.schedule.n_tasks(),
        pi: stream.schedule.mixture.clone(),
        seeds: BTreeMap::from([("master".to_string(), stream.schedule.seed)]),
        config: stream.config.clone(),
        chunks,
        test_files,
    };
    let f = BufWriter::new(File::create(dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(f, &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let f = BufReader::new(File::open(dir.join("manifest.json"))?);
    Ok(serde_json::from_reader(f)?)
}

/// Reads a materialized stream chunk by chunk, strictly forward.
///
/// Every file open is logged; the log lets tests prove that no chunk was
/// revisited.
pub struct ChunkReader {
    dir: PathBuf,
    manifest: Manifest,
    next: usize,
    access_log: Vec<usize>,
}

impl ChunkReader {
    pub fn open(dir: &Path) -> Result<Self> {
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: read_manifest(dir)?,
            next: 0,
            access_log: Vec::new(),
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn test_sets(&self) -> Result<Vec<Vec<Sample>>> {
        self.manifest
            .test_files
            .iter()
            .map(|f| {
                let p = self.dir.join(f);
                read_samples(BufReader::new(File::open(&p)?), &p)
            })
            .collect()
    }

    /// Chunk indices opened so far, in order.
    pub fn access_log(&self) -> &[usize] {
        &self.access_log
    }
}

impl Iterator for ChunkReader {
    type Item = Result<Chunk>;

    fn next(&mut self) -> Option<Self::Item> {
        let entry = self.manifest.chunks.get(self.next)?.clone();
        self.next += 1;
        self.access_log.push(entry.t);
        let path = self.dir.join(&entry.file);
        Some(
            File::open(&path)
                .map_err(Error::from)
                .and_then(|f| read_samples(BufReader::new(f), &path))
                .map(|samples| Chunk {
                    t: entry.t,
                    samples,
                    counts: entry.counts,
                }),
        )
    }
}
