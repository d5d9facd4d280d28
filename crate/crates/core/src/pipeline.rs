//! Pipeline stages over a workspace directory. Each stage reads the files of
//! earlier stages, writes its own outputs sorted by trajectory id, and leaves
//! the resolved configuration beside them.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::mapmatch::map_match;
use crate::metrics::EvalReport;
use crate::model::checkpoint::{self, CheckpointConfig};
use crate::model::Model;
use crate::prompts::{build_explicit_prompt, compute_flow_grid, GridMeta, PromptTokens, RegionalFlowGrid, Vocab};
use crate::roadnet::{load_road_network, write_edges_csv, write_nodes_csv, RoadNetwork};
use crate::synth::synthesize;
use crate::training::{self, prepare_all, LossSummary, TrainReport, TrainingExample};
use crate::trajectory::{
    filter_trajectories, read_jsonl, sparsify, write_jsonl, FilterConfig, MapMatchedTrajectory, Trajectory, TrajectoryRecord,
};

/// Name of the configuration echo written beside stage outputs.
pub const CONFIG_ECHO: &str = "config.toml";
pub const JOINT_CHECKPOINT: &str = "joint";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// Deterministic split from the id hash and `[train, val, test]` weights.
    pub fn of(id: &str, weights: [u32; 3]) -> Split {
        let digest = Sha256::digest(id.as_bytes());
        let total: u64 = weights.iter().map(|&w| w as u64).sum();
        let h = u64::from_be_bytes(digest[..8].try_into().expect("8 bytes")) % total;
        if h < weights[0] as u64 {
            Split::Train
        } else if h < (weights[0] + weights[1]) as u64 {
            Split::Val
        } else {
            Split::Test
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| Error::Config(format!("unknown split `{s}`")))
    }
}

/// File layout of one run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// `paths.out`, or `./run`.
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self::new(cfg.paths.out.clone().unwrap_or_else(|| PathBuf::from("run")))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn synth_dir(&self) -> PathBuf {
        self.root.join("synth")
    }

    pub fn synth_nodes(&self) -> PathBuf {
        self.synth_dir().join("nodes.csv")
    }

    pub fn synth_edges(&self) -> PathBuf {
        self.synth_dir().join("edges.csv")
    }

    pub fn synth_trajectories(&self) -> PathBuf {
        self.synth_dir().join("trajectories.jsonl")
    }

    /// Generator ground truth, one matched record per trajectory.
    pub fn synth_truth(&self) -> PathBuf {
        self.synth_dir().join("truth.jsonl")
    }

    pub fn network_nodes(&self) -> PathBuf {
        self.root.join("network").join("nodes.csv")
    }

    pub fn network_edges(&self) -> PathBuf {
        self.root.join("network").join("edges.csv")
    }

    pub fn prepared(&self, split: Split) -> PathBuf {
        self.root.join("prepared").join(format!("{split}.jsonl"))
    }

    pub fn matched(&self, split: Split) -> PathBuf {
        self.root.join("matched").join(format!("{split}.jsonl"))
    }

    pub fn sparse(&self, split: Split, interval: i64) -> PathBuf {
        self.root.join("sparse").join(format!("{split}_{interval}.jsonl"))
    }

    pub fn grid_bin(&self) -> PathBuf {
        self.root.join("flowgrid").join("grid.bin")
    }

    pub fn grid_meta(&self) -> PathBuf {
        self.root.join("flowgrid").join("grid.json")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    pub fn finetuned(&self, interval: i64) -> PathBuf {
        self.checkpoint(&format!("ft_{interval}"))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

fn require(path: &Path, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact { path: path.to_path_buf(), producer: producer.into() })
    }
}

fn open(path: &Path, producer: &str) -> Result<BufReader<File>> {
    require(path, producer)?;
    Ok(BufReader::new(File::open(path)?))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

pub fn read_records(path: &Path, producer: &str) -> Result<Vec<TrajectoryRecord>> {
    read_jsonl(open(path, producer)?)
}

fn write_records(path: &Path, records: &[TrajectoryRecord]) -> Result<()> {
    let mut out = create(path)?;
    write_jsonl(&mut out, records)?;
    out.flush()?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn echo(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_ECHO), cfg.to_toml())?;
    Ok(())
}

fn write_network(net: &RoadNetwork, nodes: &Path, edges: &Path) -> Result<()> {
    let mut n = create(nodes)?;
    write_nodes_csv(net, &mut n)?;
    n.flush()?;
    let mut e = create(edges)?;
    write_edges_csv(net, &mut e)?;
    e.flush()?;
    Ok(())
}

/// The network copied into the workspace by `prepare`.
pub fn load_network(ws: &Workspace) -> Result<RoadNetwork> {
    load_road_network(open(&ws.network_nodes(), "prepare")?, open(&ws.network_edges(), "prepare")?)
}

fn target_of(rec: &TrajectoryRecord) -> Result<MapMatchedTrajectory> {
    rec.matched_trajectory()?.ok_or_else(|| Error::Integrity(format!("record {} has no matched points", rec.id)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub nodes: usize,
    pub edges: usize,
    pub trajectories: usize,
}

/// Synthetic network, dense trajectories and their ground truth.
pub fn synth(cfg: &RunConfig, ws: &Workspace) -> Result<SynthSummary> {
    let data = synthesize(&cfg.synth_config())?;
    let net = data.network()?;
    write_network(&net, &ws.synth_nodes(), &ws.synth_edges())?;
    let raw: Vec<TrajectoryRecord> = data.trajectories.iter().map(|s| TrajectoryRecord::from_trajectory(&s.dense)).collect();
    let truth: Vec<TrajectoryRecord> =
        data.trajectories.iter().map(|s| TrajectoryRecord::from_trajectory(&s.dense).with_matched(&s.truth)).collect();
    write_records(&ws.synth_trajectories(), &raw)?;
    write_records(&ws.synth_truth(), &truth)?;
    echo(&ws.synth_dir(), cfg)?;
    Ok(SynthSummary { nodes: net.node_count(), edges: net.edge_count(), trajectories: raw.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub read: usize,
    /// Outside the duration range or the network area.
    pub filtered: usize,
    /// Not sampled at the dense interval.
    pub irregular: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Copies the network into the workspace, filters trajectories and splits
/// them by id hash.
pub fn prepare(cfg: &RunConfig, ws: &Workspace) -> Result<PrepareSummary> {
    let (nodes, edges) = match (&cfg.paths.nodes, &cfg.paths.edges) {
        (Some(n), Some(e)) => (n.clone(), e.clone()),
        (None, None) => (ws.synth_nodes(), ws.synth_edges()),
        _ => return Err(Error::Config("paths.nodes and paths.edges must be set together".into())),
    };
    let net = load_road_network(open(&nodes, "synth")?, open(&edges, "synth")?)?;
    write_network(&net, &ws.network_nodes(), &ws.network_edges())?;

    let source = cfg.paths.trajectories.clone().unwrap_or_else(|| ws.synth_trajectories());
    let trajs = read_records(&source, "synth")?.iter().map(TrajectoryRecord::trajectory).collect::<Result<Vec<_>>>()?;
    let mut summary = PrepareSummary { read: trajs.len(), ..Default::default() };
    let filter = FilterConfig {
        min_duration: cfg.data.min_duration,
        max_duration: cfg.data.max_duration,
        bounds: Some(net.bounds().expanded(cfg.hmm.candidate_radius)),
    };
    let kept = filter_trajectories(trajs, &filter);
    summary.filtered = summary.read - kept.len();

    let eps = cfg.data.epsilon;
    let mut splits: [Vec<TrajectoryRecord>; 3] = Default::default();
    for mut t in kept {
        if t.points().windows(2).any(|w| w[1].t - w[0].t != eps) {
            summary.irregular += 1;
            continue;
        }
        t.declared_interval = Some(eps);
        let s = Split::of(&t.id, cfg.data.split);
        splits[s as usize].push(TrajectoryRecord::from_trajectory(&t));
    }
    for (s, recs) in Split::ALL.into_iter().zip(&mut splits) {
        recs.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = recs.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::Integrity(format!("duplicate trajectory id {}", w[0].id)));
        }
        write_records(&ws.prepared(s), recs)?;
    }
    [summary.train, summary.val, summary.test] = [splits[0].len(), splits[1].len(), splits[2].len()];
    echo(&ws.root.join("prepared"), cfg)?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchSummary {
    pub matched: usize,
    /// Dropped because a point had no candidate road.
    pub gaps: usize,
    /// Kept only partially because the chain broke.
    pub broken: usize,
    /// Dropped because no piece of two or more points survived.
    pub too_short: usize,
}

enum MatchResult {
    Kept(Box<TrajectoryRecord>, bool),
    Gap,
    TooShort,
}

/// Map-matches every prepared split, trimming each trajectory to its matched piece.
pub fn match_stage(cfg: &RunConfig, ws: &Workspace) -> Result<MatchSummary> {
    let net = load_network(ws)?;
    let eps = cfg.data.epsilon;
    let mut summary = MatchSummary::default();
    for split in Split::ALL {
        let recs = read_records(&ws.prepared(split), "prepare")?;
        let results: Vec<MatchResult> = recs
            .par_iter()
            .map(|r| {
                let traj = r.trajectory()?;
                let out = match map_match(&net, &traj, &cfg.hmm) {
                    Ok(out) => out,
                    Err(Error::Gap { index, radius }) => {
                        log::warn!("{}: point {index} has no road within {radius} m; dropped", traj.id);
                        return Ok(MatchResult::Gap);
                    }
                    Err(e) => return Err(e),
                };
                let n = out.trajectory.points.len();
                if n < 2 {
                    return Ok(MatchResult::TooShort);
                }
                let points = traj.points()[out.first_index..out.first_index + n].to_vec();
                let mut piece = Trajectory::new(traj.id.clone(), points)?;
                piece.declared_interval = Some(eps);
                let rec = TrajectoryRecord::from_trajectory(&piece).with_matched(&out.trajectory);
                Ok(MatchResult::Kept(Box::new(rec), out.pieces > 1))
            })
            .collect::<Result<_>>()?;
        let mut kept = Vec::new();
        for r in results {
            match r {
                MatchResult::Kept(rec, broken) => {
                    summary.broken += broken as usize;
                    kept.push(*rec);
                }
                MatchResult::Gap => summary.gaps += 1,
                MatchResult::TooShort => summary.too_short += 1,
            }
        }
        summary.matched += kept.len();
        write_records(&ws.matched(split), &kept)?;
    }
    echo(&ws.root.join("matched"), cfg)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparseFile {
    pub split: Split,
    pub interval: i64,
    pub trajectories: usize,
    /// Trajectories shorter than the interval.
    pub skipped: usize,
}

/// Sparse inputs with their dense targets for every split and interval.
pub fn sparsify_stage(cfg: &RunConfig, ws: &Workspace) -> Result<Vec<SparseFile>> {
    let mut intervals: Vec<i64> = cfg.data.intervals.iter().chain(cfg.data.joint_intervals()).copied().collect();
    intervals.sort_unstable();
    intervals.dedup();
    let eps = cfg.data.epsilon;
    let mut out = Vec::new();
    for split in Split::ALL {
        let recs = read_records(&ws.matched(split), "match")?;
        for &mu in &intervals {
            let mut sparse = Vec::new();
            for r in &recs {
                let dense = r.trajectory()?;
                if dense.duration() < mu {
                    continue;
                }
                let mut rec = TrajectoryRecord::from_trajectory(&sparsify(&dense, mu, eps)?).with_matched(&target_of(r)?);
                rec.interval = Some(mu);
                sparse.push(rec);
            }
            write_records(&ws.sparse(split, mu), &sparse)?;
            out.push(SparseFile { split, interval: mu, trajectories: sparse.len(), skipped: recs.len() - sparse.len() });
        }
    }
    echo(&ws.root.join("sparse"), cfg)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub total: f64,
    pub clamped: u64,
}

/// Regional flow counts over the training split.
pub fn flowgrid(cfg: &RunConfig, ws: &Workspace) -> Result<GridSummary> {
    let net = load_network(ws)?;
    let trajs = read_records(&ws.matched(Split::Train), "match")?
        .iter()
        .map(TrajectoryRecord::trajectory)
        .collect::<Result<Vec<_>>>()?;
    let meta = GridMeta::new(net.bounds(), cfg.grid.rows, cfg.grid.cols, cfg.grid.slices)?;
    let grid = compute_flow_grid(&trajs, meta);
    fs::create_dir_all(ws.root.join("flowgrid"))?;
    grid.save(&ws.grid_bin(), &ws.grid_meta())?;
    echo(&ws.root.join("flowgrid"), cfg)?;
    Ok(GridSummary { total: grid.total(), clamped: grid.clamped })
}

fn load_grid(ws: &Workspace) -> Result<RegionalFlowGrid> {
    require(&ws.grid_bin(), "flowgrid")?;
    require(&ws.grid_meta(), "flowgrid")?;
    RegionalFlowGrid::load(&ws.grid_bin(), &ws.grid_meta())
}

/// Training examples of one split, ordered by id then interval.
pub fn load_examples(ws: &Workspace, split: Split, intervals: &[i64]) -> Result<Vec<TrainingExample>> {
    let mut out = Vec::new();
    for &mu in intervals {
        for r in read_records(&ws.sparse(split, mu), "sparsify")? {
            out.push((r.id.clone(), TrainingExample { interval: mu, sparse: r.trajectory()?, target: target_of(&r)? }));
        }
    }
    out.sort_by(|a, b| (&a.0, a.1.interval).cmp(&(&b.0, b.1.interval)));
    Ok(out.into_iter().map(|(_, e)| e).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub train_examples: usize,
    pub val_examples: usize,
    pub report: TrainReport,
}

fn run_training(
    cfg: &RunConfig,
    ws: &Workspace,
    mut model: Model,
    intervals: &[i64],
    finetune: Option<i64>,
    dir: &Path,
) -> Result<TrainOutcome> {
    let net = load_network(ws)?;
    if model.config.segments != net.edge_count() {
        return Err(Error::Integrity(format!(
            "checkpoint has {} segments but the network has {}",
            model.config.segments,
            net.edge_count()
        )));
    }
    let tr = prepare_all(&model, &net, &load_examples(ws, Split::Train, intervals)?)?;
    let va = prepare_all(&model, &net, &load_examples(ws, Split::Val, intervals)?)?;
    fs::create_dir_all(dir)?;
    let mut log = create(&dir.join("train_log.jsonl"))?;
    let report = match finetune {
        None => training::train_joint(&mut model, &tr, &va, &cfg.train, cfg.seed, Some(&mut log))?,
        Some(mu) => training::finetune(&mut model, &tr, &va, mu, &cfg.train, cfg.seed, Some(&mut log))?,
    };
    log.flush()?;
    let meta =
        CheckpointConfig { model: model.config, seed: cfg.seed, interval: finetune, best_val_loss: Some(report.best_val_loss) };
    checkpoint::save(&model, &meta, dir)?;
    write_json(&dir.join("report.json"), &report)?;
    echo(dir, cfg)?;
    Ok(TrainOutcome { checkpoint: dir.to_path_buf(), train_examples: tr.len(), val_examples: va.len(), report })
}

/// Joint training over the configured interval mix.
pub fn train_stage(cfg: &RunConfig, ws: &Workspace) -> Result<TrainOutcome> {
    let net = load_network(ws)?;
    let model = Model::new(cfg.model_config(net.edge_count(), net.bounds())?, load_grid(ws)?, cfg.seed)?;
    run_training(cfg, ws, model, cfg.data.joint_intervals(), None, &ws.checkpoint(JOINT_CHECKPOINT))
}

/// Fine-tunes the joint checkpoint on one interval.
pub fn finetune_stage(cfg: &RunConfig, ws: &Workspace, interval: i64) -> Result<TrainOutcome> {
    let (model, _) = load_checkpoint(cfg, &ws.checkpoint(JOINT_CHECKPOINT))?;
    run_training(cfg, ws, model, &[interval], Some(interval), &ws.finetuned(interval))
}

pub fn load_checkpoint(cfg: &RunConfig, dir: &Path) -> Result<(Model, CheckpointConfig)> {
    let (model, meta) = checkpoint::load(dir)?;
    if meta.model.epsilon != cfg.data.epsilon {
        return Err(Error::Config(format!(
            "checkpoint targets {}s but data.epsilon is {}s",
            meta.model.epsilon, cfg.data.epsilon
        )));
    }
    Ok((model, meta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub source: String,
    pub split: Split,
    pub interval: i64,
    /// Absent when scoring stored predictions.
    pub loss: Option<LossSummary>,
    pub report: EvalReport,
}

impl fmt::Display for EvalOutput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} on {} at {}s", self.source, self.split, self.interval)?;
        if let Some(l) = &self.loss {
            write!(f, ", loss {:.6} (segment {:.6}, ratio {:.6})", l.loss, l.segment, l.ratio)?;
        }
        writeln!(f)?;
        write!(f, "{}", self.report)
    }
}

fn write_report(ws: &Workspace, cfg: &RunConfig, out: &EvalOutput) -> Result<()> {
    let stem = format!("{}_{}_{}", out.source, out.split, out.interval);
    write_json(&ws.reports().join(format!("{stem}.json")), out)?;
    fs::write(ws.reports().join(format!("{stem}.txt")), out.to_string())?;
    echo(&ws.reports(), cfg)
}

fn dir_name(dir: &Path) -> String {
    dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "checkpoint".into())
}

/// Scores a checkpoint on one split at each interval.
pub fn eval_stage(cfg: &RunConfig, ws: &Workspace, ckpt: &Path, split: Split, intervals: &[i64]) -> Result<Vec<EvalOutput>> {
    let (model, _) = load_checkpoint(cfg, ckpt)?;
    let net = load_network(ws)?;
    let mut outputs = Vec::new();
    for &mu in intervals {
        let examples = load_examples(ws, split, &[mu])?;
        if examples.is_empty() {
            return Err(Error::Config(format!("no {split} trajectories at {mu}s")));
        }
        let prepared = prepare_all(&model, &net, &examples)?;
        let loss = training::evaluate(&model, &prepared, cfg.train.lambda)?;
        let preds: Vec<_> = prepared.par_iter().map(|ex| model.recover(&net, ex)).collect::<Result<_>>()?;
        let report = EvalReport::evaluate(&net, examples.iter().zip(&preds).map(|(e, p)| (&e.target.points[..], &p[..])))?;
        let out = EvalOutput { source: dir_name(ckpt), split, interval: mu, loss: Some(loss), report };
        write_report(ws, cfg, &out)?;
        outputs.push(out);
    }
    Ok(outputs)
}

/// Scores stored predictions (any JSONL with `matched`) against a sparse split's targets.
pub fn eval_predictions(cfg: &RunConfig, ws: &Workspace, predictions: &Path, split: Split, interval: i64) -> Result<EvalOutput> {
    let net = load_network(ws)?;
    let truth = read_records(&ws.sparse(split, interval), "sparsify")?;
    let mut preds = read_records(predictions, "recover")?;
    preds.sort_by(|a, b| a.id.cmp(&b.id));
    let mut pairs = Vec::with_capacity(truth.len());
    for t in &truth {
        let p = preds
            .binary_search_by(|p| p.id.cmp(&t.id))
            .map(|i| &preds[i])
            .map_err(|_| Error::Integrity(format!("no prediction for trajectory {}", t.id)))?;
        let (tm, pm) = (target_of(t)?, target_of(p)?);
        if tm.points.len() != pm.points.len() {
            return Err(Error::Integrity(format!(
                "trajectory {}: {} predicted points for {} slots",
                t.id,
                pm.points.len(),
                tm.points.len()
            )));
        }
        pairs.push((tm, pm));
    }
    let report = EvalReport::evaluate(&net, pairs.iter().map(|(t, p)| (&t.points[..], &p.points[..])))?;
    let out = EvalOutput { source: dir_name(predictions.with_extension("").as_path()), split, interval, loss: None, report };
    write_report(ws, cfg, &out)?;
    Ok(out)
}

fn record_interval(rec: &TrajectoryRecord, traj: &Trajectory) -> i64 {
    rec.interval.or(traj.declared_interval).unwrap_or(traj.points()[1].t - traj.points()[0].t)
}

/// Recovers every trajectory of `input` at the target interval.
pub fn recover_stage(cfg: &RunConfig, ws: &Workspace, ckpt: &Path, input: &Path, output: &Path) -> Result<usize> {
    let (model, _) = load_checkpoint(cfg, ckpt)?;
    let net = load_network(ws)?;
    let mut recs = read_records(input, "sparsify")?;
    recs.sort_by(|a, b| a.id.cmp(&b.id));
    let recovered: Vec<TrajectoryRecord> = recs
        .par_iter()
        .map(|r| {
            let traj = r.trajectory()?;
            let mu = record_interval(r, &traj);
            let ex = model.prepare(&net, &traj, mu, None)?;
            let pred = MapMatchedTrajectory::new(model.recover(&net, &ex)?, cfg.data.epsilon)?;
            let mut rec = TrajectoryRecord::from_trajectory(&traj).with_matched(&pred);
            rec.interval = Some(mu);
            Ok(rec)
        })
        .collect::<Result<_>>()?;
    write_records(output, &recovered)?;
    fs::write(output.with_extension(CONFIG_ECHO), cfg.to_toml())?;
    Ok(recovered.len())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptDump {
    pub id: String,
    pub interval: i64,
    pub text: String,
    pub tokens: Vec<usize>,
}

/// Explicit prompts of every trajectory in `input`.
pub fn prompt_stage(cfg: &RunConfig, input: &Path, interval: Option<i64>) -> Result<Vec<PromptDump>> {
    let vocab = Vocab::standard();
    read_records(input, "sparsify")?
        .iter()
        .map(|r| {
            let traj = r.trajectory()?;
            let mu = interval.unwrap_or_else(|| record_interval(r, &traj));
            let prompt = build_explicit_prompt(&traj, mu, cfg.data.epsilon);
            Ok(PromptDump { id: r.id.clone(), interval: mu, text: prompt.text(), tokens: PromptTokens::new(&prompt, vocab).ids })
        })
        .collect()
}
