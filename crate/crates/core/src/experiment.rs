//! Reproducible experiment commands driven by a single JSON config.
//!
//! Every command writes its artifacts into the output directory together with
//! a `.json` provenance sidecar listing the sha256 of each input artifact and
//! each output file. A command whose sidecar matches its current inputs is
//! skipped, so rerunning a pipeline only redoes what changed.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    frechet_distance, minmax_normalize, pearson, rank_of_target, report_rows, sim_all_against_all,
    sim_average, softmax_normalize, top_mass, topk_similarity, write_report_csv, Extreme,
    ScoreReport,
};
use crate::attribution::{
    attribute_target, test_to_train_run, write_scores_csv, write_scores_sidecar, EvalSpec,
    LossCache,
};
use crate::data::{
    generate_dataset, kmeans_select, read_dataset, windowed_embeddings, write_dataset, Dataset,
    DatasetSpec, EmbeddingSet, LatentTrack,
};
use crate::error::{arg_err, Result, TdaError};
use crate::fim::{estimate_fim_diag, read_fim, write_fim, FimDiagonal};
use crate::model::{
    read_checkpoint, sample, train, write_checkpoint, Checkpoint, LayerGroup, ModelConfig,
    TrainConfig,
};
use crate::rng::derive_seed;
use crate::unlearn::{unlearn, MaskPolicy, UnlearnConfig};

pub const CONFIG_VERSION: u32 = 1;

/// Lists whose cartesian product forms the unlearning grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnlearnGrid {
    pub learning_rates: Vec<f64>,
    pub steps: Vec<usize>,
    pub groups: Vec<LayerGroup>,
    pub mask_policies: Vec<MaskPolicy>,
    pub grad_timesteps: usize,
    pub damping: Option<f64>,
}

impl Default for UnlearnGrid {
    fn default() -> Self {
        Self {
            learning_rates: vec![1e-6],
            steps: vec![1],
            groups: vec![LayerGroup::All],
            mask_policies: vec![MaskPolicy::MIXED, MaskPolicy::BOTH, MaskPolicy::NONE],
            grad_timesteps: 2048,
            damping: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineParams {
    pub window: usize,
    pub hop: usize,
    /// Top/bottom-k size; `None` means `min(100, N/4)`.
    pub k: Option<usize>,
}

impl Default for BaselineParams {
    fn default() -> Self {
        Self {
            window: 10,
            hop: 1,
            k: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub config_version: u32,
    /// Global seed; copied into every sub-config by [`ExperimentConfig::resolved`].
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Draws per track for the Fisher diagonal.
    pub fim_timesteps: usize,
    pub unlearn: UnlearnGrid,
    pub eval_timesteps: usize,
    pub baseline: BaselineParams,
    /// Train-to-train targets picked by k-means.
    pub targets: usize,
    /// Generated samples for test-to-train.
    pub generated: usize,
    pub sample_steps: usize,
    /// Samples per checkpoint for the Fréchet distance.
    pub fd_samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            config_version: CONFIG_VERSION,
            seed: 0,
            out_dir: PathBuf::from("out"),
            dataset: DatasetSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            fim_timesteps: 32,
            unlearn: UnlearnGrid::default(),
            eval_timesteps: 64,
            baseline: BaselineParams::default(),
            targets: 20,
            generated: 16,
            sample_steps: 25,
            fd_samples: 64,
        }
    }
}

/// One point of the unlearning grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub learning_rate: f64,
    pub steps: usize,
    pub group: LayerGroup,
    pub mask_policy: MaskPolicy,
}

/// Command-line replacements for the grid lists.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub learning_rate: Option<f64>,
    pub steps: Option<usize>,
    pub group: Option<LayerGroup>,
    pub mask_policy: Option<MaskPolicy>,
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.config_version != CONFIG_VERSION {
            return arg_err(format!(
                "config_version {} is not supported (expected {CONFIG_VERSION})",
                self.config_version
            ));
        }
        let g = &self.unlearn;
        if g.learning_rates.is_empty()
            || g.steps.is_empty()
            || g.groups.is_empty()
            || g.mask_policies.is_empty()
        {
            return arg_err("every unlearning grid list must be nonempty");
        }
        if self.fim_timesteps == 0 || self.eval_timesteps == 0 || self.sample_steps == 0 {
            return arg_err("fim_timesteps, eval_timesteps and sample_steps must be at least 1");
        }
        if self.targets == 0 || self.generated == 0 {
            return arg_err("targets and generated must be at least 1");
        }
        let (d, m) = (&self.dataset, &self.model);
        if (d.max_frames, d.latent_dim, d.cond_dim) != (m.max_frames, m.latent_dim, m.cond_dim) {
            return arg_err("dataset and model disagree on max_frames, latent_dim or cond_dim");
        }
        m.validate()
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(dir) = &o.out_dir {
            self.out_dir = dir.clone();
        }
        if let Some(lr) = o.learning_rate {
            self.unlearn.learning_rates = vec![lr];
        }
        if let Some(s) = o.steps {
            self.unlearn.steps = vec![s];
        }
        if let Some(g) = o.group {
            self.unlearn.groups = vec![g];
        }
        if let Some(p) = o.mask_policy {
            self.unlearn.mask_policies = vec![p];
        }
    }

    /// Copy with the global seed pushed into every sub-config.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.dataset.seed = c.seed;
        c.model.seed = c.seed;
        c.train.seed = c.seed;
        c
    }

    /// Grid cells in group, rate, steps, policy order.
    pub fn grid(&self) -> Vec<GridCell> {
        let g = &self.unlearn;
        let mut cells = Vec::new();
        for &group in &g.groups {
            for &learning_rate in &g.learning_rates {
                for &steps in &g.steps {
                    for &mask_policy in &g.mask_policies {
                        cells.push(GridCell {
                            learning_rate,
                            steps,
                            group,
                            mask_policy,
                        });
                    }
                }
            }
        }
        cells
    }

    pub fn unlearn_config(&self, cell: &GridCell) -> UnlearnConfig {
        UnlearnConfig {
            learning_rate: cell.learning_rate,
            steps: cell.steps,
            group: cell.group,
            grad_timesteps: self.unlearn.grad_timesteps,
            mask_policy: cell.mask_policy,
            damping: self.unlearn.damping,
            seed: self.seed,
        }
    }

    pub fn eval_spec(&self, policy: MaskPolicy) -> EvalSpec {
        EvalSpec {
            eval_timesteps: self.eval_timesteps,
            seed: self.seed,
            mask_loss: policy.mask_loss,
        }
    }

    pub fn top_k(&self, n: usize) -> usize {
        self.baseline
            .k
            .unwrap_or_else(|| 100.min(n / 4))
            .clamp(1, n.max(2) - 1)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

/// Provenance sidecar written next to every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub input_key: String,
    /// Input artifact file name → sha256.
    pub inputs: BTreeMap<String, String>,
    /// Output file name → sha256.
    pub outputs: BTreeMap<String, String>,
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub details: Option<serde_json::Value>,
}

pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Tracks the inputs of one command and decides whether it must run.
struct Stage {
    command: &'static str,
    config: serde_json::Value,
    inputs: BTreeMap<String, String>,
}

impl Stage {
    fn new(command: &'static str, config: serde_json::Value) -> Self {
        Self {
            command,
            config,
            inputs: BTreeMap::new(),
        }
    }

    /// Records an input, failing with the producing command if it is absent.
    fn input(&mut self, path: &Path, producer: &str) -> Result<()> {
        if !path.is_file() {
            return Err(TdaError::MissingPrerequisite {
                artifact: path.display().to_string(),
                producer: producer.to_string(),
            });
        }
        self.inputs.insert(file_name(path), file_sha256(path)?);
        Ok(())
    }

    fn key(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.command.as_bytes());
        h.update(serde_json::to_vec(&self.config)?);
        h.update(serde_json::to_vec(&self.inputs)?);
        Ok(hex::encode(h.finalize()))
    }

    /// True when `primary`'s sidecar matches the current inputs and every
    /// recorded output still has its recorded hash.
    fn is_fresh(&self, primary: &Path) -> Result<bool> {
        let Ok(text) = std::fs::read_to_string(sidecar_path(primary)) else {
            return Ok(false);
        };
        let Ok(prev) = serde_json::from_str::<Provenance>(&text) else {
            return Ok(false);
        };
        if prev.input_key != self.key()? || prev.outputs.is_empty() {
            return Ok(false);
        }
        let dir = primary.parent().unwrap_or(Path::new("."));
        for (name, hash) in &prev.outputs {
            match file_sha256(dir.join(name)) {
                Ok(h) if &h == hash => {}
                _ => return Ok(false),
            }
        }
        Ok(true)
    }

    fn finish(
        self,
        primary: &Path,
        outputs: &[PathBuf],
        details: Option<serde_json::Value>,
    ) -> Result<Provenance> {
        let mut out = BTreeMap::new();
        for p in outputs {
            out.insert(file_name(p), file_sha256(p)?);
        }
        let prov = Provenance {
            command: self.command.to_string(),
            input_key: self.key()?,
            inputs: self.inputs,
            outputs: out,
            config: self.config,
            details,
        };
        std::fs::write(sidecar_path(primary), serde_json::to_string_pretty(&prov)?)?;
        Ok(prov)
    }
}

pub const DATASET_FILE: &str = "dataset.bin";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const GRID_FILE: &str = "grid_search.csv";
pub const T2T_DIR: &str = "test_to_train";
pub const AGGREGATE_FILE: &str = "aggregate.csv";

pub fn fim_file(group: LayerGroup) -> String {
    format!("fim_{}.bin", group.name())
}

fn prepare(cfg: &ExperimentConfig) -> Result<ExperimentConfig> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    Ok(cfg.resolved())
}

/// Writes `dataset.bin`.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let cfg = prepare(cfg)?;
    let out = cfg.path(DATASET_FILE);
    let stage = Stage::new("gen-data", serde_json::to_value(&cfg.dataset)?);
    if stage.is_fresh(&out)? {
        info!("{} is up to date", out.display());
        return Ok(out);
    }
    let ds: Dataset<f64> = generate_dataset(&cfg.dataset)?;
    write_dataset(&ds, &out)?;
    stage.finish(&out, std::slice::from_ref(&out), None)?;
    Ok(out)
}

/// Writes `checkpoint.bin`.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let cfg = prepare(cfg)?;
    let data = cfg.path(DATASET_FILE);
    let out = cfg.path(CHECKPOINT_FILE);
    let mut stage = Stage::new(
        "train",
        serde_json::json!({ "model": cfg.model, "train": cfg.train }),
    );
    stage.input(&data, "gen-data")?;
    if stage.is_fresh(&out)? {
        info!("{} is up to date", out.display());
        return Ok(out);
    }
    let ds: Dataset<f64> = read_dataset(&data)?;
    let ckpt = train(&ds, &cfg.model, &cfg.train)?;
    info!(
        "trained {} steps, running loss {:?}",
        cfg.train.steps, ckpt.meta.final_loss
    );
    write_checkpoint(&ckpt, &out)?;
    let details = serde_json::json!({
        "checkpoint_hash": ckpt.hash_hex(),
        "final_loss": ckpt.meta.final_loss,
        "converged": ckpt.meta.converged,
    });
    stage.finish(&out, std::slice::from_ref(&out), Some(details))?;
    Ok(out)
}

/// Writes `fim_<group>.bin` for every group in the grid.
pub fn cmd_fim(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let cfg = prepare(cfg)?;
    let data = cfg.path(DATASET_FILE);
    let ckpt_path = cfg.path(CHECKPOINT_FILE);
    let mut written = Vec::new();
    for &group in &cfg.unlearn.groups {
        let out = cfg.path(&fim_file(group));
        let mut stage = Stage::new(
            "fim",
            serde_json::json!({ "group": group, "timesteps": cfg.fim_timesteps, "seed": cfg.seed }),
        );
        stage.input(&data, "gen-data")?;
        stage.input(&ckpt_path, "train")?;
        if !stage.is_fresh(&out)? {
            let ds: Dataset<f64> = read_dataset(&data)?;
            let ckpt: Checkpoint<f64> = read_checkpoint(&ckpt_path)?;
            let fim = estimate_fim_diag(&ckpt, &ds, group, cfg.fim_timesteps, cfg.seed, false)?;
            write_fim(&fim, &out)?;
            stage.finish(&out, std::slice::from_ref(&out), None)?;
        }
        written.push(out);
    }
    Ok(written)
}

struct Loaded {
    ds: Dataset<f64>,
    ckpt: Checkpoint<f64>,
}

fn load_base(cfg: &ExperimentConfig, stage: &mut Stage) -> Result<Loaded> {
    let data = cfg.path(DATASET_FILE);
    let ckpt = cfg.path(CHECKPOINT_FILE);
    stage.input(&data, "gen-data")?;
    stage.input(&ckpt, "train")?;
    Ok(Loaded {
        ds: read_dataset(&data)?,
        ckpt: read_checkpoint(&ckpt)?,
    })
}

fn load_fim(
    cfg: &ExperimentConfig,
    group: LayerGroup,
    stage: &mut Stage,
) -> Result<FimDiagonal<f64>> {
    let path = cfg.path(&fim_file(group));
    stage.input(&path, &format!("fim --group {}", group.name()))?;
    read_fim(&path)
}

fn first_cell(cfg: &ExperimentConfig) -> GridCell {
    cfg.grid()[0]
}

/// Unlearns training track `target` with the first grid cell and writes
/// `unlearned_<target>.bin`.
pub fn cmd_unlearn(cfg: &ExperimentConfig, target: u64) -> Result<PathBuf> {
    let cfg = prepare(cfg)?;
    let cell = first_cell(&cfg);
    let ucfg = cfg.unlearn_config(&cell);
    let out = cfg.path(&format!("unlearned_{target}.bin"));
    let mut stage = Stage::new(
        "unlearn",
        serde_json::json!({ "target": target, "unlearn": ucfg }),
    );
    let base = load_base(&cfg, &mut stage)?;
    let fim = load_fim(&cfg, cell.group, &mut stage)?;
    if stage.is_fresh(&out)? {
        return Ok(out);
    }
    let track = base
        .ds
        .track(target)
        .ok_or_else(|| TdaError::Argument(format!("target id {target} is not in the dataset")))?;
    let unlearned = unlearn(&base.ckpt, &fim, track, &ucfg)?;
    write_checkpoint(&unlearned, &out)?;
    let details = serde_json::json!({
        "base_hash": base.ckpt.hash_hex(),
        "unlearned_hash": unlearned.hash_hex(),
        "target_id": target,
        "group": cell.group,
    });
    stage.finish(&out, std::slice::from_ref(&out), Some(details))?;
    Ok(out)
}

/// Train-to-train scores for one target with the first grid cell; writes
/// `scores_<target>.csv` and its sidecar.
pub fn cmd_attribute(cfg: &ExperimentConfig, target: u64) -> Result<PathBuf> {
    let cfg = prepare(cfg)?;
    let cell = first_cell(&cfg);
    let ucfg = cfg.unlearn_config(&cell);
    let eval = cfg.eval_spec(cell.mask_policy);
    let out = cfg.path(&format!("scores_{target}.csv"));
    let mut stage = Stage::new(
        "attribute",
        serde_json::json!({ "target": target, "unlearn": ucfg, "eval": eval }),
    );
    let base = load_base(&cfg, &mut stage)?;
    let fim = load_fim(&cfg, cell.group, &mut stage)?;
    if stage.is_fresh(&out)? {
        return Ok(out);
    }
    let track = base
        .ds
        .track(target)
        .ok_or_else(|| TdaError::Argument(format!("target id {target} is not in the dataset")))?;
    let cache = LossCache::new(cfg.path("cache"));
    let before = cache.base_losses(&base.ckpt, &base.ds, &eval)?;
    let result = attribute_target(
        &base.ckpt,
        &before,
        &fim,
        &base.ds,
        track,
        Some(target),
        &ucfg,
        &eval,
    )?;
    write_scores_csv(&result, &out)?;
    let scores_side = cfg.path(&format!("scores_{target}.attribution.json"));
    write_scores_sidecar(&result, &scores_side)?;
    let details = serde_json::json!({
        "base_hash": result.base_hash,
        "unlearned_hash": result.unlearned_hash,
        "rank_of_target": rank_of_target(&result.tau, target as usize)?,
    });
    stage.finish(&out, &[out.clone(), scores_side], Some(details))?;
    Ok(out)
}

/// Window embeddings of every track in the dataset, in id order.
pub fn dataset_embeddings(
    ds: &Dataset<f64>,
    baseline: &BaselineParams,
) -> Result<Vec<EmbeddingSet<f64>>> {
    ds.tracks
        .par_iter()
        .map(|t| windowed_embeddings(t, baseline.window, baseline.hop))
        .collect()
}

/// Conditioning prompts: the mean cond vector of each cluster, ordered by
/// cluster label. Tracks without a label form no prompt.
pub fn cluster_prompts(ds: &Dataset<f64>) -> Vec<Vec<f64>> {
    let mut sums: BTreeMap<u32, (Vec<f64>, usize)> = BTreeMap::new();
    for t in &ds.tracks {
        if let Some(c) = t.cluster {
            let e = sums.entry(c).or_insert_with(|| (vec![0.0; ds.cond_dim], 0));
            for (s, &v) in e.0.iter_mut().zip(&t.cond) {
                *s += v;
            }
            e.1 += 1;
        }
    }
    sums.into_values()
        .map(|(s, n)| s.into_iter().map(|v| v / n as f64).collect())
        .collect()
}

/// `count` full-length samples cycling through `prompts`.
pub fn generate_samples(
    ckpt: &Checkpoint<f64>,
    prompts: &[Vec<f64>],
    count: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<LatentTrack<f64>>> {
    if prompts.is_empty() {
        return arg_err("no conditioning prompts available");
    }
    (0..count)
        .into_par_iter()
        .map(|g| {
            let s = derive_seed(seed, &[0x5a4d, g as u64]);
            sample(
                &ckpt.config,
                &ckpt.params,
                &prompts[g % prompts.len()],
                steps,
                ckpt.config.max_frames,
                s,
            )
        })
        .collect()
}

/// Mean descriptor embeddings of generated samples.
pub fn sample_embeddings(
    samples: &[LatentTrack<f64>],
    baseline: &BaselineParams,
) -> Result<Vec<Vec<f64>>> {
    samples
        .iter()
        .map(|t| windowed_embeddings(t, baseline.window, baseline.hop).map(|e| e.mean))
        .collect()
}

/// Per-target outcome inside one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetOutcome {
    pub target_id: u64,
    pub actual_len: usize,
    pub rank: usize,
    pub tau_target: f64,
    pub sim_topk: f64,
    pub sim_botk: f64,
    pub fd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub cell: GridCell,
    pub mean_rank: f64,
    pub median_rank: f64,
    pub sim_topk: f64,
    pub sim_botk: f64,
    /// Fréchet distance of sample embeddings, unlearned vs base, averaged
    /// over targets.
    pub fd: f64,
    pub outcomes: Vec<TargetOutcome>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Picks train-to-train targets by k-means over mean embeddings.
pub fn select_targets(
    ds: &Dataset<f64>,
    embeddings: &[EmbeddingSet<f64>],
    count: usize,
    seed: u64,
) -> Result<Vec<u64>> {
    let ids: Vec<u64> = ds.tracks.iter().map(|t| t.id).collect();
    let points: Vec<Vec<f64>> = embeddings.iter().map(|e| e.mean.clone()).collect();
    kmeans_select(
        &ids,
        &points,
        count.min(ds.len()),
        derive_seed(seed, &[0x6b6d]),
    )
}

/// Runs one grid cell over `targets`.
#[allow(clippy::too_many_arguments)]
pub fn run_cell(
    cfg: &ExperimentConfig,
    cell: &GridCell,
    base: &Checkpoint<f64>,
    fim: &FimDiagonal<f64>,
    ds: &Dataset<f64>,
    embeddings: &[EmbeddingSet<f64>],
    targets: &[u64],
    base_samples: &[Vec<f64>],
    cache: &LossCache,
) -> Result<GridRow> {
    let ucfg = cfg.unlearn_config(cell);
    let eval = cfg.eval_spec(cell.mask_policy);
    let before = cache.base_losses(base, ds, &eval)?;
    let means: Vec<Vec<f64>> = embeddings.iter().map(|e| e.mean.clone()).collect();
    let k = cfg.top_k(ds.len());
    let prompts = cluster_prompts(ds);
    let outcomes: Vec<TargetOutcome> = targets
        .par_iter()
        .map(|&id| {
            let idx = id as usize;
            let track = &ds.tracks[idx];
            let unlearned = unlearn(base, fim, track, &ucfg)?;
            let after = crate::attribution::eval_losses(&unlearned, ds, &eval)?;
            let tau: Vec<f64> = after.iter().zip(&before).map(|(a, b)| a - b).collect();
            let samples = generate_samples(
                &unlearned,
                &prompts,
                cfg.fd_samples,
                cfg.sample_steps,
                cfg.seed,
            )?;
            let emb = sample_embeddings(&samples, &cfg.baseline)?;
            Ok(TargetOutcome {
                target_id: id,
                actual_len: track.actual_len,
                rank: rank_of_target(&tau, idx)?,
                tau_target: tau[idx],
                sim_topk: topk_similarity(&tau, &means, &means[idx], k, Extreme::Top, Some(idx))?,
                sim_botk: topk_similarity(
                    &tau,
                    &means,
                    &means[idx],
                    k,
                    Extreme::Bottom,
                    Some(idx),
                )?,
                fd: frechet_distance(base_samples, &emb)?,
            })
        })
        .collect::<Result<_>>()?;
    let n = outcomes.len() as f64;
    let mut ranks: Vec<f64> = outcomes.iter().map(|o| o.rank as f64).collect();
    Ok(GridRow {
        cell: *cell,
        mean_rank: ranks.iter().sum::<f64>() / n,
        median_rank: median(&mut ranks),
        sim_topk: outcomes.iter().map(|o| o.sim_topk).sum::<f64>() / n,
        sim_botk: outcomes.iter().map(|o| o.sim_botk).sum::<f64>() / n,
        fd: outcomes.iter().map(|o| o.fd).sum::<f64>() / n,
        outcomes,
    })
}

pub fn write_grid_csv(rows: &[GridRow], path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "group,learning_rate,steps,mask_policy,m_u,m_l,targets,mean_rank,median_rank,sim_topk,sim_botk,fd"
    )?;
    for r in rows {
        let c = &r.cell;
        writeln!(
            out,
            "{},{:e},{},{},{},{},{},{:e},{:e},{:e},{:e},{:e}",
            c.group,
            c.learning_rate,
            c.steps,
            c.mask_policy,
            c.mask_policy.mask_unlearn,
            c.mask_policy.mask_loss,
            r.outcomes.len(),
            r.mean_rank,
            r.median_rank,
            r.sim_topk,
            r.sim_botk,
            r.fd
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Runs every grid cell over k-means targets and writes `grid_search.csv`
/// (rows sorted by mean rank, grid order on ties).
pub fn cmd_grid_search(cfg: &ExperimentConfig) -> Result<Vec<GridRow>> {
    let cfg = prepare(cfg)?;
    let out = cfg.path(GRID_FILE);
    let mut stage = Stage::new(
        "grid-search",
        serde_json::json!({
            "grid": cfg.unlearn,
            "eval_timesteps": cfg.eval_timesteps,
            "baseline": cfg.baseline,
            "targets": cfg.targets,
            "fd_samples": cfg.fd_samples,
            "sample_steps": cfg.sample_steps,
            "seed": cfg.seed,
        }),
    );
    let base = load_base(&cfg, &mut stage)?;
    let mut fims = BTreeMap::new();
    for &group in &cfg.unlearn.groups {
        fims.insert(group.name(), load_fim(&cfg, group, &mut stage)?);
    }
    if stage.is_fresh(&out)? {
        let prov: Provenance = serde_json::from_str(&std::fs::read_to_string(sidecar_path(&out))?)?;
        if let Some(d) = prov.details {
            return Ok(serde_json::from_value(d)?);
        }
    }
    let embeddings = dataset_embeddings(&base.ds, &cfg.baseline)?;
    let targets = select_targets(&base.ds, &embeddings, cfg.targets, cfg.seed)?;
    info!(
        "grid search over {} cells, targets {targets:?}",
        cfg.grid().len()
    );
    let prompts = cluster_prompts(&base.ds);
    let base_samples = sample_embeddings(
        &generate_samples(
            &base.ckpt,
            &prompts,
            cfg.fd_samples,
            cfg.sample_steps,
            cfg.seed,
        )?,
        &cfg.baseline,
    )?;
    let cache = LossCache::new(cfg.path("cache"));
    let mut rows = cfg
        .grid()
        .iter()
        .map(|cell| {
            let fim = &fims[cell.group.name()];
            let row = run_cell(
                &cfg,
                cell,
                &base.ckpt,
                fim,
                &base.ds,
                &embeddings,
                &targets,
                &base_samples,
                &cache,
            )?;
            info!(
                "{} lr {:e} steps {} {}: mean rank {:.2}",
                cell.group, cell.learning_rate, cell.steps, cell.mask_policy, row.mean_rank
            );
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.mean_rank.total_cmp(&b.mean_rank));
    write_grid_csv(&rows, &out)?;
    stage.finish(
        &out,
        std::slice::from_ref(&out),
        Some(serde_json::to_value(&rows)?),
    )?;
    Ok(rows)
}

/// Cross-sample summary of one method's normalized scores at each rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSeries {
    pub minmax_mean: Vec<f64>,
    pub minmax_std: Vec<f64>,
    pub softmax_mean: Vec<f64>,
    pub softmax_std: Vec<f64>,
}

fn sorted_desc(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

fn mean_std(columns: &[Vec<f64>], r: usize) -> (f64, f64) {
    let n = columns.len() as f64;
    let m = columns.iter().map(|c| c[r]).sum::<f64>() / n;
    let var = columns.iter().map(|c| (c[r] - m) * (c[r] - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Per-rank mean and population standard deviation of descending-sorted
/// normalized scores across samples.
pub fn rank_series(reports: &[ScoreReport]) -> Result<RankSeries> {
    let Some(first) = reports.first() else {
        return arg_err("rank series needs at least one report");
    };
    let n = first.tau.len();
    if reports.iter().any(|r| r.tau.len() != n) {
        return arg_err("reports differ in length");
    }
    let mm: Vec<Vec<f64>> = reports.iter().map(|r| sorted_desc(&r.minmax)).collect();
    let sm: Vec<Vec<f64>> = reports.iter().map(|r| sorted_desc(&r.softmax)).collect();
    let mut s = RankSeries {
        minmax_mean: Vec::with_capacity(n),
        minmax_std: Vec::with_capacity(n),
        softmax_mean: Vec::with_capacity(n),
        softmax_std: Vec::with_capacity(n),
    };
    for r in 0..n {
        let (a, b) = mean_std(&mm, r);
        let (c, d) = mean_std(&sm, r);
        s.minmax_mean.push(a);
        s.minmax_std.push(b);
        s.softmax_mean.push(c);
        s.softmax_std.push(d);
    }
    Ok(s)
}

pub fn write_aggregate_csv(series: &[(&str, &RankSeries)], path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header = vec!["rank".to_string()];
    for (name, _) in series {
        for col in ["minmax_mean", "minmax_std", "softmax_mean", "softmax_std"] {
            header.push(format!("{name}_{col}"));
        }
    }
    writeln!(out, "{}", header.join(","))?;
    let n = series.first().map_or(0, |s| s.1.minmax_mean.len());
    for r in 0..n {
        let mut line = format!("{}", r + 1);
        for (_, s) in series {
            for v in [
                s.minmax_mean[r],
                s.minmax_std[r],
                s.softmax_mean[r],
                s.softmax_std[r],
            ] {
                line.push_str(&format!(",{v:e}"));
            }
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

/// Output of the test-to-train command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestToTrainSummary {
    pub cell: GridCell,
    pub samples: usize,
    /// Pearson between unlearning scores and each baseline, averaged over
    /// samples, on raw, min-max and softmax scores.
    pub pearson: BTreeMap<String, f64>,
    /// Softmax mass of the top 1% of tracks, averaged over samples.
    pub top1_mass: BTreeMap<String, f64>,
    pub reports: Vec<ScoreReport>,
}

fn safe_pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    match pearson(a, b) {
        Err(TdaError::UndefinedCorrelation(_)) => Ok(f64::NAN),
        other => other,
    }
}

/// Attributes `generated` samples (one per cluster prompt, cycling) with the
/// first grid cell and both similarity baselines.
pub fn cmd_test_to_train(cfg: &ExperimentConfig) -> Result<TestToTrainSummary> {
    let cfg = prepare(cfg)?;
    let cell = first_cell(&cfg);
    let ucfg = cfg.unlearn_config(&cell);
    let eval = cfg.eval_spec(cell.mask_policy);
    let dir = cfg.path(T2T_DIR);
    std::fs::create_dir_all(&dir)?;
    let out = dir.join(AGGREGATE_FILE);
    let mut stage = Stage::new(
        "test-to-train",
        serde_json::json!({
            "unlearn": ucfg,
            "eval": eval,
            "generated": cfg.generated,
            "sample_steps": cfg.sample_steps,
            "baseline": cfg.baseline,
        }),
    );
    let base = load_base(&cfg, &mut stage)?;
    let fim = load_fim(&cfg, cell.group, &mut stage)?;
    if stage.is_fresh(&out)? {
        let prov: Provenance = serde_json::from_str(&std::fs::read_to_string(sidecar_path(&out))?)?;
        if let Some(d) = prov.details {
            return Ok(serde_json::from_value(d)?);
        }
    }
    let prompts = cluster_prompts(&base.ds);
    let generated = generate_samples(
        &base.ckpt,
        &prompts,
        cfg.generated,
        cfg.sample_steps,
        cfg.seed,
    )?;
    let results = test_to_train_run(&base.ckpt, &fim, &generated, &base.ds, &ucfg, &eval)?;
    let train_emb = dataset_embeddings(&base.ds, &cfg.baseline)?;
    let means: Vec<Vec<f64>> = train_emb.iter().map(|e| e.mean.clone()).collect();
    let k = cfg.top_k(base.ds.len());

    let mut outputs = Vec::new();
    let mut unl_reports = Vec::new();
    let mut aaa_reports = Vec::new();
    let mut avg_reports = Vec::new();
    let mut pearson_sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (g, (sample_track, result)) in generated.iter().zip(&results).enumerate() {
        let emb = windowed_embeddings(sample_track, cfg.baseline.window, cfg.baseline.hop)?;
        let aaa: Vec<f64> = train_emb
            .par_iter()
            .map(|t| sim_all_against_all(&emb, t))
            .collect();
        let avg: Vec<f64> = train_emb.iter().map(|t| sim_average(&emb, t)).collect();
        let mut report = ScoreReport::new("unlearning", &result.tau);
        report.sim_topk = Some(topk_similarity(
            &result.tau,
            &means,
            &emb.mean,
            k,
            Extreme::Top,
            None,
        )?);
        report.sim_botk = Some(topk_similarity(
            &result.tau,
            &means,
            &emb.mean,
            k,
            Extreme::Bottom,
            None,
        )?);
        for (name, base_scores) in [("sim_aaa", &aaa), ("sim_avg", &avg)] {
            let views = [
                ("raw", safe_pearson(&result.tau, base_scores)?),
                (
                    "minmax",
                    safe_pearson(&report.minmax, &minmax_normalize(base_scores))?,
                ),
                (
                    "softmax",
                    safe_pearson(&report.softmax, &softmax_normalize(base_scores))?,
                ),
            ];
            for (view, r) in views {
                let key = format!("{name}/{view}");
                report.pearson_vs.insert(key.clone(), r);
                if r.is_finite() {
                    let e = pearson_sums.entry(key).or_insert((0.0, 0));
                    e.0 += r;
                    e.1 += 1;
                }
            }
        }
        let rows = report_rows(&report, &aaa, &avg)?;
        let csv = dir.join(format!("sample_{g:03}.csv"));
        write_report_csv(&rows, &csv)?;
        let json = dir.join(format!("sample_{g:03}.report.json"));
        let summary = serde_json::json!({
            "sample": g,
            "prompt": g % prompts.len(),
            "unlearned_hash": result.unlearned_hash,
            "rank_of_target": report.rank_of_target,
            "sim_topk": report.sim_topk,
            "sim_botk": report.sim_botk,
            "pearson_vs": report.pearson_vs,
        });
        std::fs::write(&json, serde_json::to_string_pretty(&summary)?)?;
        outputs.push(csv);
        outputs.push(json);
        aaa_reports.push(ScoreReport::new("sim_aaa", &aaa));
        avg_reports.push(ScoreReport::new("sim_avg", &avg));
        unl_reports.push(report);
    }

    let unl = rank_series(&unl_reports)?;
    let aaa = rank_series(&aaa_reports)?;
    let avg = rank_series(&avg_reports)?;
    write_aggregate_csv(
        &[("unlearning", &unl), ("sim_aaa", &aaa), ("sim_avg", &avg)],
        &out,
    )?;
    outputs.push(out.clone());

    let mass = |reports: &[ScoreReport]| {
        reports
            .iter()
            .map(|r| top_mass(&r.softmax, 0.01))
            .sum::<f64>()
            / reports.len() as f64
    };
    let summary = TestToTrainSummary {
        cell,
        samples: generated.len(),
        pearson: pearson_sums
            .into_iter()
            .map(|(k, (s, n))| (k, s / n as f64))
            .collect(),
        top1_mass: BTreeMap::from([
            ("unlearning".to_string(), mass(&unl_reports)),
            ("sim_aaa".to_string(), mass(&aaa_reports)),
            ("sim_avg".to_string(), mass(&avg_reports)),
        ]),
        reports: unl_reports,
    };
    stage.finish(&out, &outputs, Some(serde_json::to_value(&summary)?))?;
    Ok(summary)
}

/// gen-data, train, fim, grid-search and test-to-train in order.
pub fn cmd_pipeline(cfg: &ExperimentConfig) -> Result<()> {
    cmd_gen_data(cfg)?;
    cmd_train(cfg)?;
    cmd_fim(cfg)?;
    cmd_grid_search(cfg)?;
    cmd_test_to_train(cfg)?;
    Ok(())
}
