//! The full recovery model: prompt, embedder, flow encoder, transformer, heads.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{RowMix, Tape, Var};
use crate::embedder::{passing_context, road_mix, scale_coords, EmbedderConfig, EmbedderParams};
use crate::encoder::{argmax, bounded_ratio, OutputHeads, Transformer, TransformerConfig};
use crate::error::{Error, Result};
use crate::geo::{Bounds, LatLng};
use crate::params::{gaussian, Gradients, Mat, ParamGroup, ParamId, ParamStore};
use crate::prompts::{build_explicit_prompt, FlowEncoder, GridMeta, PromptTokens, RegionalFlowGrid, Vocab};
use crate::roadnet::{EdgeId, MatchedPoint, RoadNetwork};
use crate::trajectory::{unify_intervals, MapMatchedTrajectory, Slot, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embedder: EmbedderConfig,
    pub transformer: TransformerConfig,
    /// Target interval, seconds.
    pub epsilon: i64,
    /// Number of road segments, the classifier width.
    pub segments: usize,
    /// Coordinate scaling range, normally the network bounds.
    pub bounds: Bounds,
    /// Add sinusoidal positions to the encoder input.
    pub positional: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.embedder.validate()?;
        self.transformer.validate()?;
        if self.embedder.features != self.transformer.hidden {
            return Err(Error::Config(format!(
                "embedder width {} differs from transformer width {}",
                self.embedder.features, self.transformer.hidden
            )));
        }
        if self.epsilon <= 0 || self.segments == 0 || self.bounds.is_degenerate() {
            return Err(Error::Config("model needs a positive interval, segments and non-degenerate bounds".into()));
        }
        Ok(())
    }
}

/// Everything a forward pass needs about one trajectory, computed once.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub id: String,
    pub interval: i64,
    pub prompt: PromptTokens,
    pub slot_times: Vec<i64>,
    obs_coords: Vec<(f64, f64)>,
    obs_mixes: Vec<Vec<(usize, f64)>>,
    miss_gaps: Vec<(f64, f64)>,
    /// Blend rows over `cells`.
    miss_blend: Vec<Vec<(usize, f64)>>,
    cells: Vec<usize>,
    /// Slot `i` is row `order[i]` of `[observed; missing]`.
    order: Vec<usize>,
    pub target: Option<Target>,
    /// Observed slots with no road segment in range.
    pub roadless: usize,
}

#[derive(Debug, Clone)]
pub struct Target {
    pub segments: Arc<Vec<usize>>,
    pub ratios: Arc<Mat>,
}

impl PreparedExample {
    pub fn slot_count(&self) -> usize {
        self.slot_times.len()
    }
}

/// Per-example losses: mean over slots.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub segment: f64,
    pub ratio: f64,
    pub total: f64,
    /// Correct segment predictions and slot count, for accuracy.
    pub correct: usize,
    pub slots: usize,
}

pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embedder: EmbedderParams,
    pub flow: FlowEncoder,
    pub prompt_table: ParamId,
    pub transformer: Transformer,
    pub heads: OutputHeads,
    pub grid: RegionalFlowGrid,
    grid_input: Vec<f64>,
}

impl Model {
    /// Builds a freshly initialized model; every draw comes from `seed`.
    pub fn new(config: ModelConfig, grid: RegionalFlowGrid, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let f = config.embedder.features;
        let vocab = Vocab::standard();
        let prompt_table = store.add("prompt.tokens", ParamGroup::Prompt, gaussian(vocab.len(), f, 1.0, &mut rng), true);
        let embedder = EmbedderParams::register(&mut store, config.embedder, config.segments, &mut rng)?;
        let flow = FlowEncoder::register(&mut store, f, &mut rng);
        let transformer = Transformer::register(&mut store, config.transformer, &mut rng)?;
        let heads = OutputHeads::register(&mut store, f, config.segments, &mut rng);
        let grid_input = grid.log_counts();
        Ok(Self { config, store, embedder, flow, prompt_table, transformer, heads, grid, grid_input })
    }

    pub fn grid_meta(&self) -> &GridMeta {
        &self.grid.meta
    }

    /// Unifies `sparse` onto the target timeline and precomputes road mixing,
    /// passing contexts and prompt tokens. `target`, when given, must hold one
    /// point per slot at the slot times.
    pub fn prepare(
        &self,
        net: &RoadNetwork,
        sparse: &Trajectory,
        interval: i64,
        target: Option<&MapMatchedTrajectory>,
    ) -> Result<PreparedExample> {
        let eps = self.config.epsilon;
        let unified = unify_intervals(sparse, eps)?;
        let prompt = PromptTokens::new(&build_explicit_prompt(sparse, interval, eps), Vocab::standard());
        let (kappa, phi) = (self.config.embedder.kappa, self.config.embedder.phi_dist);
        let meta = self.grid.meta;
        let observed: Vec<(usize, LatLng, i64)> = unified
            .slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| match *s {
                Slot::Observed { lat, lng, t } => Some((i, LatLng::new(lat, lng), t)),
                Slot::Missing { .. } => None,
            })
            .collect();
        let mut order = vec![0; unified.len()];
        let mut obs_coords = Vec::with_capacity(observed.len());
        let mut obs_mixes = Vec::with_capacity(observed.len());
        let mut roadless = 0;
        for (row, &(slot, p, _)) in observed.iter().enumerate() {
            order[slot] = row;
            obs_coords.push(scale_coords(p, &self.config.bounds));
            let mix = road_mix(net, p, kappa, phi);
            roadless += usize::from(mix.is_empty());
            obs_mixes.push(mix);
        }
        let (mut miss_gaps, mut miss_blend, mut cells) = (Vec::new(), Vec::new(), Vec::<usize>::new());
        let mut next_obs = 0;
        for (slot, s) in unified.slots.iter().enumerate() {
            let Slot::Missing { t } = *s else {
                next_obs += 1;
                continue;
            };
            let (prev, next) = (observed[next_obs - 1], observed[next_obs]);
            let ctx = passing_context(t, (prev.1, prev.2), (next.1, next.2), eps, &meta)?;
            let mut cell_row = |c: usize| match cells.iter().position(|&x| x == c) {
                Some(i) => i,
                None => {
                    cells.push(c);
                    cells.len() - 1
                }
            };
            let (a, b) = (cell_row(ctx.cell_f), cell_row(ctx.cell_b));
            order[slot] = observed.len() + miss_gaps.len();
            miss_gaps.push((ctx.dt_f, ctx.dt_b));
            miss_blend.push(vec![(a, ctx.w_f), (b, ctx.w_b)]);
        }
        let slot_times: Vec<i64> = unified.slots.iter().map(Slot::t).collect();
        let target = target.map(|m| self.target_for(net, m, &slot_times)).transpose()?;
        Ok(PreparedExample {
            id: sparse.id.clone(),
            interval,
            prompt,
            slot_times,
            obs_coords,
            obs_mixes,
            miss_gaps,
            miss_blend,
            cells,
            order,
            target,
            roadless,
        })
    }

    fn target_for(&self, net: &RoadNetwork, m: &MapMatchedTrajectory, times: &[i64]) -> Result<Target> {
        if m.points.len() != times.len() {
            return Err(Error::Integrity(format!(
                "target has {} points but the unified trajectory has {} slots",
                m.points.len(),
                times.len()
            )));
        }
        let mut segments = Vec::with_capacity(times.len());
        let mut ratios = Mat::zeros((times.len(), 1));
        for (i, (p, &t)) in m.points.iter().zip(times).enumerate() {
            if p.t != t {
                return Err(Error::Alignment { index: i, t: p.t, interval: self.config.epsilon });
            }
            segments.push(net.edge_idx(p.edge)?);
            ratios[[i, 0]] = p.ratio;
        }
        Ok(Target { segments: Arc::new(segments), ratios: Arc::new(ratios) })
    }

    /// Encoder output rows for the slots (prompt rows dropped).
    pub fn forward(&self, tape: &mut Tape, ex: &PreparedExample) -> Result<Var> {
        let e = &self.embedder;
        let obs = e.observed_rows(tape, &ex.obs_coords, &ex.obs_mixes);
        let h = if ex.miss_gaps.is_empty() {
            obs
        } else {
            let field = self.flow.cells(tape, &self.grid.meta, &self.grid_input, &ex.cells);
            let h_rc = tape.mix(field, Arc::new(RowMix { rows: ex.miss_blend.clone() }));
            let miss = e.missing_rows(tape, &ex.miss_gaps, h_rc);
            tape.concat_rows(&[obs, miss])
        };
        let h = tape.gather_rows(h, &ex.order);
        let table = tape.param(self.prompt_table);
        let prompt = tape.gather_rows(table, &ex.prompt.ids);
        let z = e.feature_transform(tape, h, prompt, self.config.positional);
        let zl = self.transformer.encode(tape, z, true)?;
        let p = ex.prompt.len();
        Ok(tape.slice_rows(zl, p, ex.slot_count()))
    }

    /// Loss of one example and, when `grads`, its parameter gradients.
    pub fn loss(&self, ex: &PreparedExample, lambda: f64, grads: bool) -> Result<(LossParts, Option<Gradients>)> {
        self.loss_with(&self.store, ex, lambda, grads)
    }

    /// [`Self::loss`] evaluated against another parameter store of the same layout.
    pub fn loss_with(
        &self,
        store: &ParamStore,
        ex: &PreparedExample,
        lambda: f64,
        grads: bool,
    ) -> Result<(LossParts, Option<Gradients>)> {
        let target = ex.target.as_ref().ok_or_else(|| Error::Contract(format!("example {} has no target", ex.id)))?;
        let mut tape = Tape::new(store);
        let h = self.forward(&mut tape, ex)?;
        let logits = self.heads.logits(&mut tape, h);
        let ratios = self.heads.ratios(&mut tape, h);
        let m = ex.slot_count() as f64;
        let ce = tape.cross_entropy_sum(logits, target.segments.clone());
        let ce = tape.scale(ce, 1.0 / m);
        let se = tape.squared_error_sum(ratios, target.ratios.clone());
        let se = tape.scale(se, 1.0 / m);
        let weighted = tape.scale(se, lambda);
        let total = tape.add(ce, weighted);
        let correct = tape
            .value(logits)
            .rows()
            .into_iter()
            .zip(target.segments.iter())
            .filter(|(row, &t)| argmax(*row) == t)
            .count();
        let parts = LossParts {
            segment: tape.value(ce)[[0, 0]],
            ratio: tape.value(se)[[0, 0]],
            total: tape.value(total)[[0, 0]],
            correct,
            slots: ex.slot_count(),
        };
        let g = grads.then(|| tape.backward(total).params);
        Ok((parts, g))
    }

    /// Recovered `(segment, ratio, t)` per slot.
    pub fn recover(&self, net: &RoadNetwork, ex: &PreparedExample) -> Result<Vec<MatchedPoint>> {
        let mut tape = Tape::new(&self.store);
        let h = self.forward(&mut tape, ex)?;
        let logits = self.heads.logits(&mut tape, h);
        let ratio = self.heads.ratio_logits(&mut tape, h);
        let (logits, ratio) = (tape.value(logits), tape.value(ratio));
        Ok(logits
            .rows()
            .into_iter()
            .zip(ratio.column(0))
            .zip(&ex.slot_times)
            .map(|((row, r), &t)| MatchedPoint::new(net.edge(argmax(row)).id, bounded_ratio(*r), t))
            .collect())
    }

    /// Dense segment index of an edge id, for callers holding targets by id.
    pub fn segment_index(net: &RoadNetwork, edge: EdgeId) -> Result<usize> {
        net.edge_idx(edge)
    }
}

pub mod checkpoint {
    //! A checkpoint is a directory holding `config.json`, the flow grid, and
    //! one tensor archive per parameter group.
    //!
    //! Archive layout: an 8-byte little-endian header length, a JSON header
    //! listing tensors (name, rows, cols) and the SHA-256 of the payload, then
    //! the payload as little-endian `f64` values in header order.

    use std::fs;
    use std::path::Path;

    use serde::{Deserialize, Serialize};
    use sha2::{Digest, Sha256};

    use super::{Model, ModelConfig};
    use crate::error::{Error, Result};
    use crate::params::{Mat, ParamGroup};
    use crate::prompts::RegionalFlowGrid;

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct CheckpointConfig {
        pub model: ModelConfig,
        pub seed: u64,
        /// Sampling interval the checkpoint was fine-tuned on, if any.
        #[serde(default)]
        pub interval: Option<i64>,
        #[serde(default)]
        pub best_val_loss: Option<f64>,
    }

    #[derive(Debug, Serialize, Deserialize)]
    struct TensorEntry {
        name: String,
        rows: usize,
        cols: usize,
    }

    #[derive(Debug, Serialize, Deserialize)]
    struct ArchiveHeader {
        tensors: Vec<TensorEntry>,
        sha256: String,
    }

    pub const CONFIG_FILE: &str = "config.json";
    pub const GRID_BIN: &str = "flowgrid.bin";
    pub const GRID_META: &str = "flowgrid.json";

    fn archive_name(g: ParamGroup) -> String {
        format!("{}.tensors", g.name())
    }

    pub fn save(model: &Model, meta: &CheckpointConfig, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(meta)? + "\n")?;
        model.grid.save(&dir.join(GRID_BIN), &dir.join(GRID_META))?;
        for g in ParamGroup::ALL {
            let mut tensors = Vec::new();
            let mut payload = Vec::new();
            for (_, p) in model.store.iter().filter(|(_, p)| p.group == g) {
                let (rows, cols) = p.value.dim();
                tensors.push(TensorEntry { name: p.name.clone(), rows, cols });
                payload.extend(p.value.iter().flat_map(|v| v.to_le_bytes()));
            }
            if tensors.is_empty() {
                continue;
            }
            let header = serde_json::to_vec(&ArchiveHeader { tensors, sha256: hex::encode(Sha256::digest(&payload)) })?;
            let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
            bytes.extend(header);
            bytes.extend(payload);
            fs::write(dir.join(archive_name(g)), bytes)?;
        }
        Ok(())
    }

    fn corrupt(path: &Path, what: &str) -> Error {
        Error::Checkpoint(format!("{}: {what}", path.display()))
    }

    pub fn load(dir: &Path) -> Result<(Model, CheckpointConfig)> {
        let cfg_path = dir.join(CONFIG_FILE);
        if !cfg_path.exists() {
            return Err(Error::MissingArtifact { path: cfg_path, producer: "train".into() });
        }
        let meta: CheckpointConfig = serde_json::from_str(&fs::read_to_string(&cfg_path)?)?;
        let grid = RegionalFlowGrid::load(&dir.join(GRID_BIN), &dir.join(GRID_META))?;
        let mut model = Model::new(meta.model, grid, meta.seed)?;
        let mut seen = 0;
        for g in ParamGroup::ALL {
            let path = dir.join(archive_name(g));
            if !model.store.iter().any(|(_, p)| p.group == g) {
                continue;
            }
            let bytes = fs::read(&path)?;
            if bytes.len() < 8 {
                return Err(corrupt(&path, "truncated header"));
            }
            let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
            let body = bytes.get(8..8 + hlen).ok_or_else(|| corrupt(&path, "truncated header"))?;
            let header: ArchiveHeader = serde_json::from_slice(body)?;
            let payload = &bytes[8 + hlen..];
            if hex::encode(Sha256::digest(payload)) != header.sha256 {
                return Err(corrupt(&path, "payload checksum mismatch"));
            }
            let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
            for t in header.tensors {
                let id = model.store.id(&t.name).ok_or_else(|| corrupt(&path, &format!("unknown tensor {}", t.name)))?;
                if model.store.value(id).dim() != (t.rows, t.cols) {
                    return Err(corrupt(&path, &format!("tensor {} has the wrong shape", t.name)));
                }
                let data: Vec<f64> = values.by_ref().take(t.rows * t.cols).collect();
                if data.len() != t.rows * t.cols {
                    return Err(corrupt(&path, "payload too short"));
                }
                *model.store.value_mut(id) = Mat::from_shape_vec((t.rows, t.cols), data).expect("shape checked");
                seen += 1;
            }
        }
        if seen != model.store.len() {
            return Err(Error::Checkpoint(format!("{}: {} of {} tensors present", dir.display(), seen, model.store.len())));
        }
        Ok((model, meta))
    }
}
