//! Gradient keep/drop masks, keep-ratio schedules and per-layer mask plans.
//!
//! A mask partitions the token (or spatial) positions of one layer into a
//! kept set, whose activation gradients survive the backward pass, and a
//! dropped set, whose upstream gradients are treated as zero.

use crate::error::{config_err, dim_err, Error, Result};
use crate::network::NetworkSpec;
use crate::tensor::Shape;
use num_rational::Ratio;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

/// An exact keep ratio in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeepRatio(Ratio<u64>);

impl KeepRatio {
    pub const ONE: KeepRatio = KeepRatio(Ratio::new_raw(1, 1));

    pub fn new(numer: u64, denom: u64) -> Result<Self> {
        if denom == 0 || numer == 0 || numer > denom {
            return Err(config_err!("keep ratio {numer}/{denom} is outside (0, 1]"));
        }
        Ok(KeepRatio(Ratio::new(numer, denom)))
    }

    pub fn numer(&self) -> u64 {
        *self.0.numer()
    }

    pub fn denom(&self) -> u64 {
        *self.0.denom()
    }

    pub fn to_f64(&self) -> f64 {
        self.numer() as f64 / self.denom() as f64
    }

    pub fn is_one(&self) -> bool {
        self.numer() == self.denom()
    }

    /// Number of kept positions out of `total`, if it is an integer.
    pub fn exact_count(&self, total: usize) -> Option<usize> {
        let scaled = total as u64 * self.numer();
        scaled.is_multiple_of(self.denom()).then(|| (scaled / self.denom()) as usize)
    }

    pub fn floor_count(&self, total: usize) -> usize {
        (total as u64 * self.numer() / self.denom()) as usize
    }
}

impl fmt::Display for KeepRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.numer(), self.denom())
    }
}

impl FromStr for KeepRatio {
    type Err = Error;

    /// Accepts `p/q` or a terminating decimal such as `0.5` or `0.32`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some((p, q)) = s.split_once('/') {
            let p = p.trim().parse().map_err(|_| config_err!("bad keep ratio {s:?}"))?;
            let q = q.trim().parse().map_err(|_| config_err!("bad keep ratio {s:?}"))?;
            return KeepRatio::new(p, q);
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if frac.len() > 12 || !frac.chars().all(|c| c.is_ascii_digit()) {
            return Err(config_err!("bad keep ratio {s:?}"));
        }
        let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| config_err!("bad keep ratio {s:?}"))? };
        let denom = 10u64.pow(frac.len() as u32);
        let frac_v: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| config_err!("bad keep ratio {s:?}"))? };
        KeepRatio::new(int * denom + frac_v, denom)
    }
}

impl Serialize for KeepRatio {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for KeepRatio {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Num(f64),
        }
        let text = match Raw::deserialize(d)? {
            Raw::Text(t) => t,
            Raw::Num(v) => format!("{v}"),
        };
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// Partition of a grid's flat positions into kept and dropped indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct IndexMask {
    shape: Shape,
    keep: Vec<usize>,
    drop: Vec<usize>,
    keep_ratio: Option<KeepRatio>,
}

impl IndexMask {
    /// Builds a mask from an arbitrary kept set (any order, no duplicates).
    pub fn from_keep(shape: Shape, keep: impl IntoIterator<Item = usize>) -> Result<Self> {
        let total = shape.numel();
        let mut flags = vec![false; total];
        for i in keep {
            if i >= total {
                return Err(Error::Index(format!("mask index {i} out of range for grid {shape}")));
            }
            if std::mem::replace(&mut flags[i], true) {
                return Err(Error::Contract(format!("mask index {i} listed twice")));
            }
        }
        Ok(Self::from_flags(shape, &flags))
    }

    fn from_flags(shape: Shape, flags: &[bool]) -> Self {
        let (keep, drop): (Vec<usize>, Vec<usize>) = (0..flags.len()).partition(|&i| flags[i]);
        let keep_ratio = (!keep.is_empty()).then(|| KeepRatio(Ratio::new(keep.len() as u64, flags.len() as u64)));
        IndexMask { shape, keep, drop, keep_ratio }
    }

    pub fn full(shape: Shape) -> Self {
        let total = shape.numel();
        IndexMask { shape, keep: (0..total).collect(), drop: vec![], keep_ratio: Some(KeepRatio::ONE) }
    }

    pub fn empty(shape: Shape) -> Self {
        let total = shape.numel();
        IndexMask { shape, keep: vec![], drop: (0..total).collect(), keep_ratio: None }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn keep(&self) -> &[usize] {
        &self.keep
    }

    pub fn dropped(&self) -> &[usize] {
        &self.drop
    }

    pub fn total(&self) -> usize {
        self.keep.len() + self.drop.len()
    }

    /// `|keep| / total`, or `None` when nothing is kept.
    pub fn keep_ratio(&self) -> Option<KeepRatio> {
        self.keep_ratio
    }

    pub fn keep_fraction(&self) -> f64 {
        self.keep.len() as f64 / self.total() as f64
    }

    pub fn is_full(&self) -> bool {
        self.drop.is_empty()
    }

    pub fn keep_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.total()];
        for &i in &self.keep {
            flags[i] = true;
        }
        flags
    }

    /// Kept and dropped row indices of a `batch × tokens` row-major matrix
    /// whose token axis is this mask's grid.
    pub fn batch_rows(&self, batch: usize) -> (Vec<usize>, Vec<usize>) {
        let n = self.total();
        let expand = |set: &[usize]| (0..batch).flat_map(|b| set.iter().map(move |&t| b * n + t)).collect::<Vec<_>>();
        (expand(&self.keep), expand(&self.drop))
    }

    /// Line-oriented text form: a `shape=… ratio=p/q` header, then one kept
    /// index per line.
    pub fn to_text(&self) -> String {
        let ratio = match self.keep_ratio {
            Some(r) => r.to_string(),
            None => format!("0/{}", self.total()),
        };
        let mut out = format!("shape={} ratio={ratio}\n", self.shape);
        for i in &self.keep {
            out.push_str(&i.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| config_err!("empty mask text"))?;
        let mut shape = None;
        let mut ratio = None;
        for field in header.split_whitespace() {
            match field.split_once('=') {
                Some(("shape", v)) => {
                    let dims =
                        v.split('×').map(|d| d.parse::<usize>().map_err(|_| config_err!("bad mask shape {v:?}"))).collect::<Result<Vec<_>>>()?;
                    shape = Some(Shape::new(dims)?);
                }
                Some(("ratio", v)) => ratio = Some(v.to_string()),
                _ => return Err(config_err!("unexpected mask header field {field:?}")),
            }
        }
        let shape = shape.ok_or_else(|| config_err!("mask header lacks shape"))?;
        let keep = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse::<usize>().map_err(|_| config_err!("bad mask index {l:?}")))
            .collect::<Result<Vec<_>>>()?;
        if keep.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config_err!("mask indices must be strictly increasing"));
        }
        let mask = IndexMask::from_keep(shape, keep)?;
        let stated = ratio.ok_or_else(|| config_err!("mask header lacks ratio"))?;
        let actual = match mask.keep_ratio {
            Some(r) => r.to_string(),
            None => format!("0/{}", mask.total()),
        };
        if stated != actual {
            return Err(config_err!("mask header ratio {stated} does not match {actual} kept indices"));
        }
        Ok(mask)
    }
}

fn require_count(shape: &Shape, ratio: KeepRatio) -> Result<usize> {
    ratio.exact_count(shape.numel()).ok_or_else(|| {
        config_err!(
            "keep ratio {ratio} does not divide grid {shape} evenly: {} positions is not a multiple of {}",
            shape.numel(),
            ratio.denom() / gcd(ratio.denom(), shape.numel() as u64)
        )
    })
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

enum GridLayout {
    /// Keep positions whose coordinate sum is congruent to the phase mod `q`.
    Lattice { q: usize },
    /// Evenly spaced `count` positions in row-major order.
    Even { count: usize },
}

fn grid_layout(shape: &Shape, ratio: KeepRatio) -> Result<GridLayout> {
    let count = require_count(shape, ratio)?;
    if ratio.numer() == 1 {
        let q = ratio.denom() as usize;
        let dims = shape.dims();
        if dims.len() == 1 || dims[dims.len() - 1].is_multiple_of(q) || dims[0].is_multiple_of(q) {
            return Ok(GridLayout::Lattice { q });
        }
    }
    Ok(GridLayout::Even { count })
}

/// Number of distinct lattice phases the grid sampler chooses between.
pub fn grid_phase_count(shape: &Shape, ratio: KeepRatio) -> Result<usize> {
    Ok(match grid_layout(shape, ratio)? {
        GridLayout::Lattice { q } => q,
        GridLayout::Even { .. } => shape.numel(),
    })
}

/// Grid mask with an explicit phase (taken modulo the phase count).
pub fn grid_mask_with_phase(shape: &Shape, ratio: KeepRatio, phase: usize) -> Result<IndexMask> {
    let total = shape.numel();
    let keep: Vec<usize> = match grid_layout(shape, ratio)? {
        GridLayout::Lattice { q } => {
            let phase = phase % q;
            (0..total).filter(|&i| (shape.unravel(i).iter().sum::<usize>() + phase).is_multiple_of(q)).collect()
        }
        GridLayout::Even { count } => {
            let offset = phase % total;
            (0..count).map(|m| (m * total + offset) / count).collect()
        }
    };
    IndexMask::from_keep(shape.clone(), keep)
}

/// Regular-lattice mask. With `r = 1/q` every q-th position along the
/// diagonal interleave is kept (a checkerboard at `r = 1/2`); the phase is
/// drawn uniformly from the `q` possibilities.
pub fn sample_grid_mask(shape: &Shape, ratio: KeepRatio, seed: u64) -> Result<IndexMask> {
    let phases = grid_phase_count(shape, ratio)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    grid_mask_with_phase(shape, ratio, rng.random_range(0..phases))
}

/// Uniformly random subset of exactly `r·total` positions.
pub fn sample_random_mask(shape: &Shape, ratio: KeepRatio, seed: u64) -> Result<IndexMask> {
    let count = require_count(shape, ratio)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = rand::seq::index::sample(&mut rng, shape.numel(), count).into_vec();
    IndexMask::from_keep(shape.clone(), keep)
}

/// Keeps the intersection of both kept sets; drops the union of both dropped sets.
pub fn intersect_masks(a: &IndexMask, b: &IndexMask) -> Result<IndexMask> {
    if a.shape != b.shape {
        return Err(dim_err!("cannot intersect masks on grids {} and {}", a.shape, b.shape));
    }
    let bf = b.keep_flags();
    IndexMask::from_keep(a.shape.clone(), a.keep.iter().copied().filter(|&i| bf[i]))
}

/// Attention heads whose gradients are dropped for one step.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct HeadMask {
    pub heads: usize,
    pub dropped: Vec<usize>,
}

impl HeadMask {
    /// `⌈(1 − r)·h⌉` heads, so at least the nominal fraction is dropped.
    pub fn drop_count(heads: usize, ratio: KeepRatio) -> usize {
        let dropped_num = (ratio.denom() - ratio.numer()) * heads as u64;
        dropped_num.div_ceil(ratio.denom()) as usize
    }

    pub fn is_dropped(&self, head: usize) -> bool {
        self.dropped.contains(&head)
    }
}

pub fn sample_head_mask(heads: usize, ratio: KeepRatio, seed: u64) -> HeadMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = HeadMask::drop_count(heads, ratio);
    let mut dropped = rand::seq::index::sample(&mut rng, heads, count).into_vec();
    dropped.sort_unstable();
    HeadMask { heads, dropped }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Uniform,
    Increasing,
    Decreasing,
}

impl FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "increasing" => Ok(Self::Increasing),
            "decreasing" => Ok(Self::Decreasing),
            _ => Err(config_err!("unknown schedule kind {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct KeepRatioSchedule {
    pub kind: ScheduleKind,
    pub average: KeepRatio,
    pub n_layers: usize,
    pub ratios: Vec<KeepRatio>,
}

impl KeepRatioSchedule {
    pub fn is_uniform(&self) -> bool {
        self.ratios.windows(2).all(|w| w[0] == w[1])
    }

    pub fn mean(&self) -> f64 {
        self.ratios.iter().map(KeepRatio::to_f64).sum::<f64>() / self.ratios.len() as f64
    }
}

/// `n / d` rounded to an integer, ties to even.
fn round_half_even(n: u64, d: u64) -> u64 {
    let (q, r) = (n / d, n % d);
    match (2 * r).cmp(&d) {
        std::cmp::Ordering::Less => q,
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => q + q % 2,
    }
}

/// Per-layer keep ratios around a target average.
///
/// Ramps start at `average/2` and step by `average/(n-1)` rounded to
/// thousandths (early layers first for `Increasing`); entries are rounded to
/// hundredths, ties to even. For `(0.5, 8)` this gives
/// `[0.25, 0.32, 0.39, 0.46, 0.53, 0.60, 0.68, 0.75]`, whose mean is 0.4975.
pub fn build_schedule(kind: ScheduleKind, average: KeepRatio, n_layers: usize) -> Result<KeepRatioSchedule> {
    if n_layers == 0 {
        return Err(config_err!("a schedule needs at least one layer"));
    }
    let ratios = match kind {
        ScheduleKind::Uniform => vec![average; n_layers],
        _ if n_layers == 1 => vec![average],
        _ => {
            let (p, q) = (average.numer(), average.denom());
            if 3 * p > 2 * q {
                return Err(config_err!("ramp around average {average} would end at {}/{} > 1", 3 * p, 2 * q));
            }
            let span = (n_layers - 1) as u64;
            let step_thousandths = round_half_even(1000 * p, q * span);
            let mut ratios = (0..n_layers as u64)
                .map(|i| {
                    // 100·(average/2 + i·step)
                    let hundredths = round_half_even(1000 * p + 2 * q * i * step_thousandths, 20 * q);
                    KeepRatio::new(hundredths.min(100), 100)
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|_| config_err!("ramp around average {average} rounds to a zero keep ratio"))?;
            if kind == ScheduleKind::Decreasing {
                ratios.reverse();
            }
            ratios
        }
    };
    Ok(KeepRatioSchedule { kind, average, n_layers, ratios })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    Grid,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sharing {
    Shared,
    Independent,
}

#[derive(Debug, Clone)]
pub struct PlanEntry {
    pub layer_id: usize,
    pub mask: Arc<IndexMask>,
    pub heads: Option<HeadMask>,
}

/// Mask assignment for every SBP-enabled layer of a network.
#[derive(Debug, Clone)]
pub struct MaskPlan {
    pub per_layer: Vec<PlanEntry>,
    pub sharing: Sharing,
    pub resample_each_step: bool,
}

impl MaskPlan {
    pub fn entry(&self, layer_id: usize) -> Option<&PlanEntry> {
        self.per_layer.iter().find(|e| e.layer_id == layer_id)
    }

    /// A plan that keeps every position at every SBP layer.
    pub fn full(network: &NetworkSpec) -> Result<MaskPlan> {
        let per_layer = network
            .sbp_sites()?
            .into_iter()
            .map(|site| PlanEntry {
                layer_id: site.layer_id,
                mask: Arc::new(IndexMask::full(site.grid)),
                heads: site.heads.map(|h| HeadMask { heads: h, dropped: vec![] }),
            })
            .collect();
        Ok(MaskPlan { per_layer, sharing: Sharing::Shared, resample_each_step: false })
    }

    /// Plan with explicitly chosen masks, one per SBP layer in order.
    pub fn from_masks(network: &NetworkSpec, masks: Vec<IndexMask>) -> Result<MaskPlan> {
        let sites = network.sbp_sites()?;
        if sites.len() != masks.len() {
            return Err(config_err!("{} masks given for {} SBP layers", masks.len(), sites.len()));
        }
        let per_layer = sites
            .into_iter()
            .zip(masks)
            .map(|(site, mask)| {
                if mask.shape() != &site.grid {
                    return Err(dim_err!("layer {} works on grid {} but its mask is on {}", site.layer_id, site.grid, mask.shape()));
                }
                let heads = site.heads.map(|h| HeadMask { heads: h, dropped: vec![] });
                Ok(PlanEntry { layer_id: site.layer_id, mask: Arc::new(mask), heads })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MaskPlan { per_layer, sharing: Sharing::Independent, resample_each_step: false })
    }
}

/// Deterministic seed derivation (splitmix64 finalizer).
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn snap_to_grid(ratio: KeepRatio, total: usize) -> Result<KeepRatio> {
    if ratio.exact_count(total).is_some() {
        return Ok(ratio);
    }
    let count = ratio.floor_count(total).max(1);
    KeepRatio::new(count as u64, total as u64)
}

fn sample_with(sampler: Sampler, shape: &Shape, ratio: KeepRatio, seed: u64, phase: Option<usize>) -> Result<IndexMask> {
    match (sampler, phase) {
        (Sampler::Grid, Some(p)) => grid_mask_with_phase(shape, ratio, p),
        (Sampler::Grid, None) => sample_grid_mask(shape, ratio, seed),
        (Sampler::Random, _) => sample_random_mask(shape, ratio, seed),
    }
}

/// Draws one mask plan. `phase` pins the grid phase (phase cycling) instead
/// of drawing it from the seed.
pub fn make_mask_plan_with_phase(
    network: &NetworkSpec,
    schedule: &KeepRatioSchedule,
    sampler: Sampler,
    sharing: Sharing,
    seed: u64,
    phase: Option<usize>,
) -> Result<MaskPlan> {
    let sites = network.sbp_sites()?;
    if schedule.n_layers != sites.len() {
        return Err(config_err!("schedule covers {} layers but the network has {} SBP layers", schedule.n_layers, sites.len()));
    }
    let mut per_layer = Vec::with_capacity(sites.len());
    match sharing {
        Sharing::Shared => {
            if !schedule.is_uniform() {
                return Err(config_err!("shared masks need a uniform schedule, got {:?}", schedule.kind));
            }
            let ratio = schedule.ratios[0];
            // one mask per grid resolution, all drawn with the same seed
            let mut by_grid: BTreeMap<Vec<usize>, Arc<IndexMask>> = BTreeMap::new();
            let mut heads_by_count: BTreeMap<usize, HeadMask> = BTreeMap::new();
            for site in sites {
                let mask = match by_grid.get(site.grid.dims()) {
                    Some(m) => Arc::clone(m),
                    None => {
                        let r = snap_to_grid(ratio, site.grid.numel())?;
                        let m = Arc::new(sample_with(sampler, &site.grid, r, seed, phase)?);
                        by_grid.insert(site.grid.dims().to_vec(), Arc::clone(&m));
                        m
                    }
                };
                let heads = site.heads.map(|h| heads_by_count.entry(h).or_insert_with(|| sample_head_mask(h, ratio, mix_seed(seed, 0x4EAD))).clone());
                per_layer.push(PlanEntry { layer_id: site.layer_id, mask, heads });
            }
        }
        Sharing::Independent => {
            for (site, &ratio) in sites.into_iter().zip(&schedule.ratios) {
                let layer_seed = mix_seed(seed, site.layer_id as u64);
                let r = snap_to_grid(ratio, site.grid.numel())?;
                let mask = Arc::new(sample_with(sampler, &site.grid, r, layer_seed, phase)?);
                let heads = site.heads.map(|h| sample_head_mask(h, ratio, mix_seed(layer_seed, 0x4EAD)));
                per_layer.push(PlanEntry { layer_id: site.layer_id, mask, heads });
            }
        }
    }
    Ok(MaskPlan { per_layer, sharing, resample_each_step: false })
}

pub fn make_mask_plan(network: &NetworkSpec, schedule: &KeepRatioSchedule, sampler: Sampler, sharing: Sharing, seed: u64) -> Result<MaskPlan> {
    make_mask_plan_with_phase(network, schedule, sampler, sharing, seed, None)
}

/// Produces the mask plan for each training step or experiment batch.
#[derive(Debug, Clone)]
pub struct MaskPlanFactory {
    pub schedule: KeepRatioSchedule,
    pub sampler: Sampler,
    pub sharing: Sharing,
    pub resample_each_step: bool,
    /// Step through grid phases in order instead of drawing them.
    pub cycle_phases: bool,
    pub seed: u64,
}

impl MaskPlanFactory {
    pub fn plan_for_step(&self, network: &NetworkSpec, step: u64) -> Result<MaskPlan> {
        let step = if self.resample_each_step { step } else { 0 };
        let seed = mix_seed(self.seed, step);
        let phase = (self.cycle_phases && self.sampler == Sampler::Grid).then_some(step as usize);
        let mut plan = make_mask_plan_with_phase(network, &self.schedule, self.sampler, self.sharing, seed, phase)?;
        plan.resample_each_step = self.resample_each_step;
        Ok(plan)
    }
}
