//! Experiment configuration and the runners behind the `sbp` binary.
//!
//! Every runner writes its artifacts into the output directory and returns the
//! path of its main report.

use crate::analysis::{
    activation_memory_estimate, batch_mean_cosines, chain_rule_report, grad_similarity_experiment, mhsa_memory_ratio, paired_bootstrap_ci,
    ratio_to_f64, summarize, write_grad_csv, ChainRuleReport, GradSummary, Interval, MemoryReport, NormTrace,
};
use crate::data::{load_dataset, write_dataset, Dataset, DatasetSpec};
use crate::engine::{backward, forward, forward_logits, sgd_step, Batch, Model, Target};
use crate::error::{config_err, Error, Result};
use crate::network::{head_dim, tiny_conv, tiny_mlp, tiny_vit, LayerSpec, NetworkSpec, VitShape};
use crate::ops::{argmax_rows, DropMode, LossKind};
use crate::sampling::{
    build_schedule, grid_mask_with_phase, mix_seed, IndexMask, KeepRatio, MaskPlan, MaskPlanFactory, Sampler, ScheduleKind, Sharing,
};
use crate::tensor::Shape;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

const TRAIN_CSV_HEADER: &str = "step,loss,train_acc,cached_elements";
/// Consecutive zero-norm steps that count as a pinned gradient.
pub const ZERO_NORM_WINDOW: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkKind {
    Mlp,
    TinyVit,
    /// The 12-block, width-192 preset.
    VitTiny,
    TinyConv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub kind: NetworkKind,
    /// Hidden layers (mlp) or transformer blocks.
    pub depth: Option<usize>,
    /// Hidden width or embedding dimension.
    pub width: Option<usize>,
    pub heads: Option<usize>,
    pub mlp_hidden: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SbpConfig {
    pub enabled: bool,
    pub layer_fraction: f64,
    pub schedule: ScheduleKind,
    pub keep_ratio: KeepRatio,
    pub sampler: Sampler,
    /// Defaults to shared for uniform schedules, independent otherwise.
    pub sharing: Option<Sharing>,
    pub resample_each_step: bool,
    pub cycle_phases: bool,
    pub drop_mode: DropMode,
}

impl Default for SbpConfig {
    fn default() -> Self {
        SbpConfig {
            enabled: false,
            layer_fraction: 2.0 / 3.0,
            schedule: ScheduleKind::Uniform,
            keep_ratio: KeepRatio::new(1, 2).expect("1/2"),
            sampler: Sampler::Grid,
            sharing: None,
            resample_each_step: true,
            cycle_phases: false,
            drop_mode: DropMode::Qkv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Also write `grad_norms.csv` with every parameter's gradient norm per step.
    pub grad_norms: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("out"), grad_norms: false }
    }
}

/// One gradient-similarity variant; unset fields fall back to `[sbp]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantConfig {
    pub name: String,
    pub schedule: Option<ScheduleKind>,
    pub keep_ratio: Option<KeepRatio>,
    pub sampler: Option<Sampler>,
    pub sharing: Option<Sharing>,
    pub drop_mode: Option<DropMode>,
    pub layer_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradsimConfig {
    pub batches: usize,
    pub bootstrap_resamples: usize,
    /// Empty means the standard uniform/increasing/decreasing/random (+head) set.
    pub variants: Vec<VariantConfig>,
}

impl Default for GradsimConfig {
    fn default() -> Self {
        GradsimConfig { batches: 200, bootstrap_resamples: 2000, variants: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemreportConfig {
    /// Attention shape for the analytic ratios; defaults to the network's.
    pub tokens: Option<u64>,
    pub head_dim: Option<u64>,
    /// Extra keep ratios to tabulate besides `sbp.keep_ratio`.
    pub keep_ratios: Vec<KeepRatio>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    #[serde(default)]
    pub sbp: SbpConfig,
    pub optimizer: OptimizerConfig,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub gradsim: GradsimConfig,
    #[serde(default)]
    pub memreport: MemreportConfig,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| config_err!("{e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative dataset paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err!("cannot read config {}: {e}", path.display()))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => config_err!("{}: {m}", path.display()),
            other => other,
        })?;
        if let DatasetSpec::File { features, labels } = &mut cfg.dataset {
            let base = path.parent().unwrap_or(Path::new("."));
            for p in [features, labels] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fractions = std::iter::once(self.sbp.layer_fraction).chain(self.gradsim.variants.iter().filter_map(|v| v.layer_fraction));
        for f in fractions {
            if !(0.0..=1.0).contains(&f) {
                return Err(config_err!("layer_fraction {f} is outside [0, 1]"));
            }
        }
        let o = &self.optimizer;
        if o.batch_size == 0 {
            return Err(config_err!("optimizer.batch_size must be at least 1"));
        }
        if o.steps == 0 {
            return Err(config_err!("optimizer.steps must be at least 1"));
        }
        if !(o.lr.is_finite() && o.lr > 0.0) {
            return Err(config_err!("optimizer.lr must be positive and finite, got {}", o.lr));
        }
        if self.gradsim.batches == 0 || self.gradsim.bootstrap_resamples == 0 {
            return Err(config_err!("gradsim.batches and gradsim.bootstrap_resamples must be positive"));
        }
        let mut names = std::collections::BTreeSet::new();
        for v in &self.gradsim.variants {
            if v.name.is_empty() || !v.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(config_err!("gradsim variant name {:?} must be nonempty [A-Za-z0-9_-]", v.name));
            }
            if !names.insert(&v.name) {
                return Err(config_err!("gradsim variant {:?} listed twice", v.name));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the config, output directory excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output.dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    fn init_seed(&self) -> u64 {
        self.optimizer.seed
    }

    fn mask_seed(&self) -> u64 {
        mix_seed(self.optimizer.seed, 0x3A5C)
    }

    fn data_seed(&self) -> u64 {
        mix_seed(self.optimizer.seed, 0xDA7A)
    }
}

/// The network described by `cfg` for data shaped like `ds`, before SBP is enabled.
pub fn build_network(cfg: &NetworkConfig, drop_mode: DropMode, ds: &Dataset) -> Result<NetworkSpec> {
    let grid = ds.grid()?;
    let (c, classes) = (ds.channels(), ds.n_classes);
    if classes < 2 {
        return Err(config_err!("dataset has {classes} classes; classification needs at least 2"));
    }
    let spec = match cfg.kind {
        NetworkKind::Mlp => tiny_mlp(grid, c, cfg.width.unwrap_or(32), cfg.depth.unwrap_or(2), classes),
        NetworkKind::TinyVit | NetworkKind::VitTiny => {
            let base = if cfg.kind == NetworkKind::TinyVit { VitShape::TINY } else { VitShape::VIT_TINY };
            let dim = cfg.width.unwrap_or(base.dim);
            let shape = VitShape {
                dim,
                heads: cfg.heads.unwrap_or(base.heads),
                blocks: cfg.depth.unwrap_or(base.blocks),
                mlp_hidden: cfg.mlp_hidden.unwrap_or(if cfg.width.is_some() { 2 * dim } else { base.mlp_hidden }),
            };
            if shape.heads == 0 || !shape.dim.is_multiple_of(shape.heads) {
                return Err(config_err!("embedding width {} is not divisible by {} heads", shape.dim, shape.heads));
            }
            tiny_vit(grid, c, shape, classes, drop_mode)
        }
        NetworkKind::TinyConv => tiny_conv(grid, c, cfg.width.unwrap_or(16), classes),
    };
    spec.trace()?;
    Ok(spec)
}

/// Mask factory for the SBP layers of `spec`; `None` when it has none.
pub fn mask_factory(
    spec: &NetworkSpec,
    schedule: ScheduleKind,
    keep_ratio: KeepRatio,
    sampler: Sampler,
    sharing: Option<Sharing>,
    sbp: &SbpConfig,
    seed: u64,
) -> Result<Option<MaskPlanFactory>> {
    let sites = spec.sbp_sites()?;
    if sites.is_empty() {
        return Ok(None);
    }
    let schedule = build_schedule(schedule, keep_ratio, sites.len())?;
    let sharing = sharing.unwrap_or(if schedule.kind == ScheduleKind::Uniform { Sharing::Shared } else { Sharing::Independent });
    Ok(Some(MaskPlanFactory { schedule, sampler, sharing, resample_each_step: sbp.resample_each_step, cycle_phases: sbp.cycle_phases, seed }))
}

fn plan_at(spec: &NetworkSpec, factory: Option<&MaskPlanFactory>, step: u64) -> Result<MaskPlan> {
    match factory {
        Some(f) => f.plan_for_step(spec, step),
        None => MaskPlan::full(spec),
    }
}

/// Training network and mask factory from the config's `[network]` and `[sbp]` tables.
pub fn training_setup(cfg: &TrainConfig, ds: &Dataset) -> Result<(NetworkSpec, Option<MaskPlanFactory>)> {
    let mut spec = build_network(&cfg.network, cfg.sbp.drop_mode, ds)?;
    if cfg.sbp.enabled {
        spec = spec.with_sbp_fraction(cfg.sbp.layer_fraction)?;
    }
    let s = &cfg.sbp;
    let factory = mask_factory(&spec, s.schedule, s.keep_ratio, s.sampler, s.sharing, s, cfg.mask_seed())?;
    Ok((spec, factory))
}

/// `count` batches drawn from consecutive seeded epochs.
pub fn batch_stream(ds: &Dataset, batch_size: usize, count: usize, seed: u64) -> Result<Vec<Batch>> {
    let mut out = Vec::with_capacity(count);
    let mut epoch = 0;
    while out.len() < count {
        let batches = ds.epoch_batches(batch_size, mix_seed(seed, epoch))?;
        out.extend(batches.into_iter().take(count - out.len()));
        epoch += 1;
    }
    Ok(out)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display()))))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.into()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Accuracy of the exact (unmasked) network over the whole dataset.
pub fn dataset_accuracy(model: &Model, ds: &Dataset, batch_size: usize) -> Result<f64> {
    let full = MaskPlan::full(&model.spec)?;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = ds.batch(chunk)?;
        let (logits, _) = forward_logits(model, &full, &batch.x)?;
        let Target::Labels(labels) = &batch.target else { unreachable!("datasets carry labels") };
        correct += argmax_rows(&logits).iter().zip(labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / ds.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub cached_elements: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub steps: usize,
    pub final_loss: f64,
    pub final_accuracy: f64,
    /// Parameters whose gradient norm stayed exactly zero for a full window.
    pub zero_norm_params: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<StepMetrics>,
    pub norms: NormTrace,
    pub model: Model,
    pub summary: TrainSummary,
    pub metrics_path: PathBuf,
}

#[derive(Serialize)]
struct Checkpoint<'a> {
    config_hash: &'a str,
    steps: usize,
    network: &'a NetworkSpec,
    params: BTreeMap<&'a str, ParamRecord<'a>>,
}

#[derive(Serialize)]
struct ParamRecord<'a> {
    shape: &'a [usize],
    data: &'a [f64],
}

fn dump_plan(dir: &Path, step: usize, plan: &MaskPlan) -> Result<()> {
    for e in &plan.per_layer {
        std::fs::write(dir.join(format!("step{step:05}_layer{:02}.txt", e.layer_id)), e.mask.to_text())?;
    }
    Ok(())
}

/// Runs SGD and writes `train_metrics.csv`, `checkpoint.json` and `train_summary.json`.
pub fn run_train(cfg: &TrainConfig, out: &Path, dump_masks: bool) -> Result<TrainOutcome> {
    let ds = load_dataset(&cfg.dataset)?;
    let (spec, factory) = training_setup(cfg, &ds)?;
    let mut model = Model::init(spec, cfg.init_seed())?;
    let opt = &cfg.optimizer;
    let batches = batch_stream(&ds, opt.batch_size, opt.steps, cfg.data_seed())?;
    create_dir(out)?;
    let mask_dir = out.join("masks");
    if dump_masks {
        create_dir(&mask_dir)?;
    }
    let metrics_path = out.join("train_metrics.csv");
    let mut csv = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    writeln!(csv, "{TRAIN_CSV_HEADER}")?;
    let mut norms_csv = if cfg.output.grad_norms {
        let mut w = std::io::BufWriter::new(std::fs::File::create(out.join("grad_norms.csv"))?);
        writeln!(w, "step,param,l2_norm")?;
        Some(w)
    } else {
        None
    };
    let mut metrics = Vec::with_capacity(opt.steps);
    let mut series: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (step, batch) in batches.iter().enumerate() {
        let plan = plan_at(&model.spec, factory.as_ref(), step as u64)?;
        if dump_masks && (step == 0 || plan.resample_each_step) {
            dump_plan(&mask_dir, step, &plan)?;
        }
        let (loss, tape) = forward(&model, &plan, batch).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("step {step}: {m}")),
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("step {step}: loss {loss}")));
        }
        let acc = match (&batch.target, &tape.logits) {
            (Target::Labels(l), Some(logits)) => argmax_rows(logits).iter().zip(l).filter(|(p, t)| p == t).count() as f64 / l.len() as f64,
            _ => 0.0,
        };
        let grads = backward(&tape)?;
        for (name, g) in &grads.grads {
            let n = g.l2_norm();
            if let Some(w) = norms_csv.as_mut() {
                writeln!(w, "{step},{name},{n:e}")?;
            }
            series.entry(name.clone()).or_default().push(n);
        }
        sgd_step(&mut model.params, &grads, opt.lr)?;
        writeln!(csv, "{step},{loss:e},{acc},{}", tape.cached_elements)?;
        metrics.push(StepMetrics { step, loss, train_acc: acc, cached_elements: tape.cached_elements });
    }
    csv.flush()?;
    if let Some(mut w) = norms_csv {
        w.flush()?;
    }
    if model.params.values().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite(format!("step {}: weights diverged", opt.steps - 1)));
    }
    let norms = NormTrace::from_series(series, ZERO_NORM_WINDOW);
    let hash = cfg.hash();
    let checkpoint = Checkpoint {
        config_hash: &hash,
        steps: opt.steps,
        network: &model.spec,
        params: model.params.iter().map(|(k, t)| (k.as_str(), ParamRecord { shape: t.shape(), data: t.data() })).collect(),
    };
    write_json(&out.join("checkpoint.json"), &checkpoint)?;
    let summary = TrainSummary {
        config_hash: hash,
        steps: opt.steps,
        final_loss: metrics.last().map_or(f64::NAN, |m| m.loss),
        final_accuracy: dataset_accuracy(&model, &ds, opt.batch_size)?,
        zero_norm_params: norms.flagged.clone(),
    };
    write_json(&out.join("train_summary.json"), &summary)?;
    Ok(TrainOutcome { metrics, norms, model, summary, metrics_path })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub other: String,
    /// Bootstrap interval of `baseline − other` over paired batch means.
    pub difference: Interval,
    pub baseline_higher: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradsimSummary {
    pub config_hash: String,
    pub variants: Vec<GradSummary>,
    pub comparisons: Vec<Comparison>,
}

fn default_variants(spec: &NetworkSpec) -> Vec<VariantConfig> {
    let v = |name: &str, schedule, sampler, drop_mode| VariantConfig {
        name: name.into(),
        schedule: Some(schedule),
        keep_ratio: None,
        sampler: Some(sampler),
        sharing: None,
        drop_mode,
        layer_fraction: None,
    };
    let mut out = vec![
        v("uniform", ScheduleKind::Uniform, Sampler::Grid, None),
        v("increasing", ScheduleKind::Increasing, Sampler::Grid, None),
        v("decreasing", ScheduleKind::Decreasing, Sampler::Grid, None),
        v("random", ScheduleKind::Uniform, Sampler::Random, None),
    ];
    if spec.layers.iter().any(|l| matches!(l, LayerSpec::Block { .. })) {
        out.push(v("head", ScheduleKind::Uniform, Sampler::Grid, Some(DropMode::Head)));
    }
    out
}

fn with_drop_mode(mut spec: NetworkSpec, mode: DropMode) -> NetworkSpec {
    for l in &mut spec.layers {
        if let LayerSpec::Block { drop_mode, .. } = l {
            *drop_mode = mode;
        }
    }
    spec
}

/// Mean per-batch cosine of each variant against exact gradients on one fixed
/// model; writes `gradsim_<variant>.csv` and `gradsim_summary.json`.
pub fn run_gradsim(cfg: &TrainConfig, out: &Path) -> Result<(GradsimSummary, PathBuf)> {
    let ds = load_dataset(&cfg.dataset)?;
    let base = build_network(&cfg.network, cfg.sbp.drop_mode, &ds)?;
    let params = base.init_params(cfg.init_seed())?;
    let batches = batch_stream(&ds, cfg.optimizer.batch_size, cfg.gradsim.batches, cfg.data_seed())?;
    let variants = if cfg.gradsim.variants.is_empty() { default_variants(&base) } else { cfg.gradsim.variants.clone() };
    create_dir(out)?;
    let s = &cfg.sbp;
    let mut summaries = Vec::new();
    let mut means = Vec::new();
    for v in &variants {
        let spec =
            with_drop_mode(base.clone(), v.drop_mode.unwrap_or(s.drop_mode)).with_sbp_fraction(v.layer_fraction.unwrap_or(s.layer_fraction))?;
        let factory = mask_factory(
            &spec,
            v.schedule.unwrap_or(s.schedule),
            v.keep_ratio.unwrap_or(s.keep_ratio),
            v.sampler.unwrap_or(s.sampler),
            v.sharing.or(s.sharing),
            s,
            cfg.mask_seed(),
        )?
        .ok_or_else(|| config_err!("variant {:?} leaves no SBP layer", v.name))?;
        let model = Model::new(spec, params.clone())?;
        let reports = grad_similarity_experiment(&model, &factory, &batches)?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(out.join(format!("gradsim_{}.csv", v.name)))?);
        write_grad_csv(&mut w, &reports)?;
        w.flush()?;
        summaries.push(summarize(&v.name, &reports, cfg.init_seed())?);
        means.push(batch_mean_cosines(&reports, |_| true));
    }
    let mut comparisons = Vec::new();
    for i in 1..variants.len() {
        let d = paired_bootstrap_ci(&means[0], &means[i], cfg.gradsim.bootstrap_resamples, 0.95, cfg.init_seed())?;
        comparisons.push(Comparison {
            baseline: variants[0].name.clone(),
            other: variants[i].name.clone(),
            baseline_higher: d.low > 0.0,
            difference: d,
        });
    }
    let summary = GradsimSummary { config_hash: cfg.hash(), variants: summaries, comparisons };
    let path = out.join("gradsim_summary.json");
    write_json(&path, &summary)?;
    Ok((summary, path))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionRatios {
    pub keep_ratio: KeepRatio,
    pub tokens: u64,
    pub head_dim: u64,
    pub query_only: f64,
    pub qkv: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemoryOutput {
    pub config_hash: String,
    pub network: MemoryReport,
    pub attention: Vec<AttentionRatios>,
}

pub fn attention_ratios(r: KeepRatio, tokens: u64, head_dim: u64) -> Result<AttentionRatios> {
    Ok(AttentionRatios {
        keep_ratio: r,
        tokens,
        head_dim,
        query_only: ratio_to_f64(mhsa_memory_ratio(r, head_dim, tokens, DropMode::QueryOnly)?),
        qkv: ratio_to_f64(mhsa_memory_ratio(r, head_dim, tokens, DropMode::Qkv)?),
    })
}

fn memory_table(m: &MemoryOutput) -> String {
    let mut t = format!("{:>5}  {:<10} {:>12} {:>12} {:>7}\n", "layer", "kind", "full", "sbp", "ratio");
    for l in &m.network.layers {
        let r = if l.full == 0 { 1.0 } else { l.sbp as f64 / l.full as f64 };
        t += &format!("{:>5}  {:<10} {:>12} {:>12} {:>7.4}\n", l.layer_id, l.kind, l.full, l.sbp, r);
    }
    t += &format!("{:>5}  {:<10} {:>12} {:>12} {:>7.4}\n", "", "total", m.network.total_full, m.network.total_sbp, m.network.ratio);
    if !m.attention.is_empty() {
        t += &format!("\n{:>8} {:>6} {:>6} {:>10} {:>7}\n", "r", "n", "d", "query_only", "qkv");
        for a in &m.attention {
            t += &format!("{:>8} {:>6} {:>6} {:>10.4} {:>7.4}\n", a.keep_ratio.to_string(), a.tokens, a.head_dim, a.query_only, a.qkv);
        }
    }
    t
}

/// Per-layer cached-activation table under the configured plan plus the
/// analytic attention ratios; writes `memory_report.json` and `memory_report.txt`.
pub fn run_memory_report(cfg: &TrainConfig, out: &Path) -> Result<(MemoryOutput, PathBuf)> {
    let ds = load_dataset(&cfg.dataset)?;
    let (spec, factory) = training_setup(cfg, &ds)?;
    let plan = plan_at(&spec, factory.as_ref(), 0)?;
    let network = activation_memory_estimate(&spec, &plan, cfg.optimizer.batch_size)?;
    let block_d = spec.layers.iter().find_map(|l| match *l {
        LayerSpec::Block { dim, heads, .. } => Some(head_dim(dim, heads) as u64),
        _ => None,
    });
    let tokens = cfg.memreport.tokens.unwrap_or(ds.tokens() as u64);
    let mut ratios = vec![cfg.sbp.keep_ratio];
    ratios.extend(&cfg.memreport.keep_ratios);
    ratios.sort();
    ratios.dedup();
    let attention = match cfg.memreport.head_dim.or(block_d) {
        Some(d) => ratios.iter().rev().map(|&r| attention_ratios(r, tokens, d)).collect::<Result<_>>()?,
        None => Vec::new(),
    };
    let report = MemoryOutput { config_hash: cfg.hash(), network, attention };
    create_dir(out)?;
    std::fs::write(out.join("memory_report.txt"), memory_table(&report))?;
    let path = out.join("memory_report.json");
    write_json(&path, &report)?;
    Ok((report, path))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainDemo {
    /// Two point-wise layers with complementary masks.
    pub disjoint: ChainRuleReport,
    /// Two point-wise layers sharing one mask.
    pub shared: ChainRuleReport,
    /// Point-wise layer under a 3×3 stride-1 convolution, both checkerboarded.
    pub pointwise_conv: ChainRuleReport,
    pub shared_keep: Vec<usize>,
}

fn dense(c_in: usize, c_out: usize, sbp: bool) -> LayerSpec {
    LayerSpec::Dense { c_in, c_out, bias: true, gelu: true, sbp }
}

fn head_layers(width: usize) -> [LayerSpec; 2] {
    [LayerSpec::MeanPool, LayerSpec::Dense { c_in: width, c_out: 2, bias: true, gelu: false, sbp: false }]
}

/// Chain-rule structure of the two-layer stacks; writes `chain_report.json`.
/// Without a config, uses a 4×4 grid with 3 channels and seed 0.
pub fn run_chain_demo(cfg: Option<&TrainConfig>, out: &Path) -> Result<(ChainDemo, PathBuf)> {
    let (grid, channels, seed) = match cfg {
        Some(c) => {
            let ds = load_dataset(&c.dataset)?;
            (ds.grid()?, ds.channels(), c.optimizer.seed)
        }
        None => (Shape::new(vec![4, 4])?, 3, 0),
    };
    if grid.ndim() != 2 {
        return Err(config_err!("the chain demo needs a 2-D grid, got {grid}"));
    }
    let width = 6;
    let half = KeepRatio::new(1, 2)?;
    let a = grid_mask_with_phase(&grid, half, 0)?;
    let b = IndexMask::from_keep(grid.clone(), a.dropped().to_vec())?;
    let batch_for = |seed: u64| -> Result<Batch> {
        let ds = crate::data::generate_dataset(&DatasetSpec::Synthetic {
            n_classes: 2,
            grid: grid.dims().to_vec(),
            channels,
            samples: 2,
            noise: 1.0,
            pattern: 1.0,
            seed,
        })?;
        ds.batch(&[0, 1])
    };
    let batch = batch_for(seed)?;
    let pointwise = |masks: Vec<IndexMask>| -> Result<ChainRuleReport> {
        let mut layers = vec![dense(channels, width, true), dense(width, width, true)];
        layers.extend(head_layers(width));
        let spec = NetworkSpec { input_grid: grid.clone(), in_channels: channels, layers, loss: LossKind::SoftmaxXent };
        let model = Model::init(spec, seed)?;
        let plan = MaskPlan::from_masks(&model.spec, masks)?;
        chain_rule_report(&model, &plan, &batch)
    };
    let disjoint = pointwise(vec![a.clone(), b])?;
    let shared = pointwise(vec![a.clone(), a.clone()])?;
    let mut layers =
        vec![dense(channels, width, true), LayerSpec::Conv2d { kernel: 3, stride: 1, padding: 1, c_in: width, c_out: width, gelu: true, sbp: true }];
    layers.extend(head_layers(width));
    let spec = NetworkSpec { input_grid: grid.clone(), in_channels: channels, layers, loss: LossKind::SoftmaxXent };
    let model = Model::init(spec, seed)?;
    let plan = MaskPlan::from_masks(&model.spec, vec![a.clone(), a.clone()])?;
    let pointwise_conv = chain_rule_report(&model, &plan, &batch)?;
    let demo = ChainDemo { disjoint, shared, pointwise_conv, shared_keep: a.keep().to_vec() };
    create_dir(out)?;
    let path = out.join("chain_report.json");
    write_json(&path, &demo)?;
    Ok((demo, path))
}

/// Writes `features.sbpd` and `labels.txt`; returns the features path.
pub fn run_gendata(spec: &DatasetSpec, out: &Path) -> Result<PathBuf> {
    if !matches!(spec, DatasetSpec::Synthetic { .. }) {
        return Err(config_err!("gendata needs a synthetic dataset spec"));
    }
    let ds = load_dataset(spec)?;
    create_dir(out)?;
    let features = out.join("features.sbpd");
    write_dataset(&ds, &features, &out.join("labels.txt"))?;
    Ok(features)
}

/// Process exit code for an error: 2 for configuration problems, 3 for
/// numeric failure, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Dimension(_) | Error::Index(_) => 2,
        Error::NonFinite(_) => 3,
        Error::Contract(_) | Error::Io(_) => 1,
    }
}
