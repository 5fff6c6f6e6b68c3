//! Guided profiling.
//!
//! Keys are profiled in dependency order: the output layer alone, then the
//! input layer in front of it, then each hidden population sandwiched between
//! the two. The cost of the isolated layer is the measured variant cost minus
//! the fitted estimates of the other layers. After the bound corners, each
//! next channel coordinate is the one with the largest posterior standard
//! deviation, until that deviation drops below a fraction of the mean observed
//! cost or the per-key budget runs out.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::SurfaceSet;
use crate::gp::{fit, FitOptions, GpSurface};
use crate::measurement::{measure, EnergyBackend, EnergySample};
use crate::model::{channel_bounds, dedup_keys, Bounds, Coord, LayerBlock, LayerKey, ModelSpec, Role};

pub const DEFAULT_BUDGET: usize = 30;
pub const DEFAULT_VARIANCE_STOP_FRAC: f64 = 0.05;
pub const DEFAULT_REPEATS: u32 = 3;
/// Iterations each variant is trained for while profiling.
pub const PROFILE_ITERATIONS: u64 = 500;
pub const MAX_GRID_PER_AXIS: usize = 64;

/// Which posterior drives acquisition and the variance stop rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Surrogate {
    Energy,
    Time,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Acquisition {
    MaxVariance,
    /// Uniform over unprofiled grid points; kept for ablations.
    UniformRandom { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    VarianceStop,
    BudgetStop,
    GridExhausted,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::VarianceStop => "variance",
            StopReason::BudgetStop => "budget",
            StopReason::GridExhausted => "grid-exhausted",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Next {
    Point(Coord),
    Done(StopReason),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopRule {
    pub budget: usize,
    pub variance_stop_frac: f64,
}

/// Profiling bounds and candidate grid for one key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyPlan {
    pub key: LayerKey,
    pub bounds: Bounds,
    pub grid: Vec<Coord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSettings {
    pub budget: usize,
    pub variance_stop_frac: f64,
    pub surrogate: Surrogate,
    pub acquisition: Acquisition,
    pub repeats: u32,
    pub iterations: u64,
    pub grid_stride: u32,
    pub fit: FitOptions,
}

impl Default for PlanSettings {
    fn default() -> Self {
        PlanSettings {
            budget: DEFAULT_BUDGET,
            variance_stop_frac: DEFAULT_VARIANCE_STOP_FRAC,
            surrogate: Surrogate::Energy,
            acquisition: Acquisition::MaxVariance,
            repeats: DEFAULT_REPEATS,
            iterations: PROFILE_ITERATIONS,
            grid_stride: 1,
            fit: FitOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfilePlan {
    /// Output first, then input, then hidden keys.
    pub keys: Vec<KeyPlan>,
    pub settings: PlanSettings,
}

impl ProfilePlan {
    /// Plans every key of `model`.
    ///
    /// Input and output bounds are widened to cover the widths hidden variants
    /// feed them, so subtraction never queries outside a fitted surface.
    pub fn for_model(model: &ModelSpec, settings: PlanSettings) -> Result<Self> {
        let keys = dedup_keys(model);
        let mut ordered: Vec<(LayerKey, Bounds)> = Vec::new();
        for role in [Role::Output, Role::Input, Role::Hidden] {
            for (key, _) in keys.iter().filter(|(k, _)| k.role == role) {
                ordered.push((key.clone(), channel_bounds(key, model)?));
            }
        }
        let (mut max_hidden_in, mut max_hidden_out) = (0, 0);
        for block in model.blocks.iter().filter(|b| b.role == Role::Hidden) {
            max_hidden_in = max_hidden_in.max(block.in_channels);
            max_hidden_out = max_hidden_out.max(block.out_channels);
        }
        for (key, bounds) in &mut ordered {
            match key.role {
                Role::Input => bounds.widen_to(&Coord::One(max_hidden_in)),
                Role::Output => bounds.widen_to(&Coord::One(max_hidden_out)),
                Role::Hidden => {}
            }
        }
        let keys = ordered
            .into_iter()
            .map(|(key, bounds)| KeyPlan {
                grid: build_grid(&bounds, settings.grid_stride),
                key,
                bounds,
            })
            .collect();
        let plan = ProfilePlan { keys, settings };
        plan.validate(model)?;
        Ok(plan)
    }

    pub fn stop_rule(&self) -> StopRule {
        StopRule {
            budget: self.settings.budget,
            variance_stop_frac: self.settings.variance_stop_frac,
        }
    }

    pub fn validate(&self, model: &ModelSpec) -> Result<()> {
        let s = &self.settings;
        if s.budget < 2 {
            return Err(Error::InvalidPlan(format!("budget {} < 2", s.budget)));
        }
        if !(s.variance_stop_frac > 0.0 && s.variance_stop_frac < 1.0) {
            return Err(Error::InvalidPlan(format!(
                "variance_stop_frac {} outside (0, 1)",
                s.variance_stop_frac
            )));
        }
        if s.grid_stride == 0 {
            return Err(Error::InvalidPlan("grid stride must be positive".into()));
        }
        for (key, _) in dedup_keys(model) {
            if !self.keys.iter().any(|k| k.key == key) {
                return Err(Error::InvalidPlan(format!("plan does not cover key {key}")));
            }
        }
        let rank = |r: Role| match r {
            Role::Output => 0,
            Role::Input => 1,
            Role::Hidden => 2,
        };
        for w in self.keys.windows(2) {
            if rank(w[0].key.role) > rank(w[1].key.role) {
                return Err(Error::InvalidPlan(format!(
                    "{} must not precede {}",
                    w[0].key, w[1].key
                )));
            }
        }
        for kp in &self.keys {
            if kp.bounds.dims() != kp.key.role.dims() {
                return Err(Error::InvalidPlan(format!("bounds of {} have wrong dimension", kp.key)));
            }
            if kp.grid.is_empty() || kp.grid.iter().any(|c| !kp.bounds.contains(c)) {
                return Err(Error::InvalidPlan(format!("grid of {} is empty or out of bounds", kp.key)));
            }
        }
        Ok(())
    }
}

fn axis_values(lo: u32, hi: u32, stride: u32) -> Vec<u32> {
    let mut values: Vec<u32> = (lo..=hi).step_by(stride as usize).collect();
    if values.last() != Some(&hi) {
        values.push(hi);
    }
    if values.len() > MAX_GRID_PER_AXIS {
        let span = f64::from(hi - lo);
        let steps = (MAX_GRID_PER_AXIS - 1) as f64;
        values = (0..MAX_GRID_PER_AXIS)
            .map(|i| lo + libm::round(i as f64 * span / steps) as u32)
            .collect();
        values.dedup();
    }
    values
}

/// Lexicographically ordered candidate coordinates inside `bounds`.
pub fn build_grid(bounds: &Bounds, stride: u32) -> Vec<Coord> {
    let axes: Vec<Vec<u32>> = bounds.0.iter().map(|(lo, hi)| axis_values(*lo, *hi, stride.max(1))).collect();
    match axes.as_slice() {
        [a] => a.iter().map(|&c| Coord::One(c)).collect(),
        [a, b] => a
            .iter()
            .flat_map(|&x| b.iter().map(move |&y| Coord::Two(x, y)))
            .collect(),
        _ => Vec::new(),
    }
}

/// Bound corners in profiling order: `lo, hi` in 1-D and
/// `(lo,lo), (lo,hi), (hi,lo), (hi,hi)` in 2-D.
pub fn start_points(bounds: &Bounds) -> Vec<Coord> {
    let corners: Vec<Coord> = match bounds.dims() {
        1 => vec![bounds.corner(&[false]), bounds.corner(&[true])],
        _ => vec![
            bounds.corner(&[false, false]),
            bounds.corner(&[false, true]),
            bounds.corner(&[true, false]),
            bounds.corner(&[true, true]),
        ],
    };
    let mut seen = BTreeSet::new();
    corners.into_iter().filter(|c| seen.insert(*c)).collect()
}

/// First coordinate with the largest standard deviation; `candidates` must be
/// in lexicographic order for ties to favour the smallest coordinate.
pub fn argmax_std<I, F>(candidates: I, mut std: F) -> Result<Option<(Coord, f64)>>
where
    I: IntoIterator<Item = Coord>,
    F: FnMut(&Coord) -> Result<f64>,
{
    let mut best: Option<(Coord, f64)> = None;
    for c in candidates {
        let s = std(&c)?;
        if best.map_or(true, |(_, b)| s > b) {
            best = Some((c, s));
        }
    }
    Ok(best)
}

enum Picker<'a> {
    MaxVariance,
    Random(&'a mut ChaCha8Rng),
}

fn decide(
    surface: Option<&GpSurface>,
    grid: &[Coord],
    bounds: &Bounds,
    profiled: &BTreeSet<Coord>,
    observed_mean: f64,
    rule: &StopRule,
    picker: Picker<'_>,
) -> Result<Next> {
    if profiled.len() >= rule.budget {
        return Ok(Next::Done(StopReason::BudgetStop));
    }
    if let Some(c) = start_points(bounds).into_iter().find(|c| !profiled.contains(c)) {
        return Ok(Next::Point(c));
    }
    let candidates: Vec<Coord> = grid.iter().filter(|c| !profiled.contains(c)).copied().collect();
    if candidates.is_empty() {
        return Ok(Next::Done(StopReason::GridExhausted));
    }
    let Some(surface) = surface else {
        return Ok(Next::Point(candidates[0]));
    };
    let (best, max_std) = argmax_std(candidates.iter().copied(), |c| {
        surface.predict(c).map(|(_, v)| libm::sqrt(v))
    })?
    .expect("candidates is non-empty");
    if max_std <= rule.variance_stop_frac * observed_mean {
        return Ok(Next::Done(StopReason::VarianceStop));
    }
    Ok(Next::Point(match picker {
        Picker::MaxVariance => best,
        Picker::Random(rng) => candidates[rng.gen_range(0..candidates.len())],
    }))
}

/// Next coordinate to profile under maximum-variance acquisition.
pub fn next_point(
    surface: Option<&GpSurface>,
    grid: &[Coord],
    bounds: &Bounds,
    profiled: &[Coord],
    observed_mean: f64,
    rule: &StopRule,
) -> Result<Next> {
    let profiled: BTreeSet<Coord> = profiled.iter().copied().collect();
    decide(surface, grid, bounds, &profiled, observed_mean, rule, Picker::MaxVariance)
}

pub(crate) fn apply_coordinate(block: &mut LayerBlock, coord: &Coord) {
    match (block.role, coord) {
        (Role::Input, Coord::One(c)) => block.out_channels = *c,
        (Role::Output, Coord::One(c)) => block.in_channels = *c,
        (Role::Hidden, Coord::Two(a, b)) => {
            block.in_channels = *a;
            block.out_channels = *b;
        }
        _ => {}
    }
}

/// Builds the small networks that isolate one block population.
#[derive(Debug, Clone)]
pub struct VariantFactory {
    name: alloc::string::String,
    iterations: u64,
    input: Option<LayerBlock>,
    output: LayerBlock,
    hidden: BTreeMap<LayerKey, LayerBlock>,
    bounds: BTreeMap<LayerKey, Bounds>,
}

impl VariantFactory {
    pub fn new(model: &ModelSpec, plan: &ProfilePlan) -> Result<Self> {
        let output = model
            .blocks
            .iter()
            .find(|b| b.role == Role::Output)
            .cloned()
            .ok_or(Error::NoParametricLayers)?;
        let input = model.blocks.iter().find(|b| b.role == Role::Input).cloned();
        let mut hidden = BTreeMap::new();
        for b in model.blocks.iter().filter(|b| b.role == Role::Hidden) {
            hidden.entry(b.key()).or_insert_with(|| b.clone());
        }
        Ok(VariantFactory {
            name: model.name.clone(),
            iterations: plan.settings.iterations,
            input,
            output,
            hidden,
            bounds: plan.keys.iter().map(|k| (k.key.clone(), k.bounds.clone())).collect(),
        })
    }

    pub fn input_key(&self) -> Option<LayerKey> {
        self.input.as_ref().map(LayerBlock::key)
    }

    pub fn output_key(&self) -> LayerKey {
        self.output.key()
    }

    /// Output: the output layer alone at `in = c`. Input: input layer with
    /// `out = c` feeding the output layer. Hidden: input → hidden `(a, b)` →
    /// output, chained through `a` and `b`.
    pub fn make_variant(&self, key: &LayerKey, coord: &Coord) -> Result<ModelSpec> {
        let bounds = self.bounds.get(key).ok_or_else(|| Error::KeyAbsent(key.clone()))?;
        crate::gp::check_bounds(bounds, coord)?;
        let mut output = self.output.clone();
        let blocks = match (key.role, coord) {
            (Role::Output, Coord::One(c)) => {
                output.in_channels = *c;
                vec![output]
            }
            (Role::Input, Coord::One(c)) => {
                let mut input = self.input.clone().ok_or_else(|| Error::KeyAbsent(key.clone()))?;
                input.out_channels = *c;
                output.in_channels = *c;
                vec![input, output]
            }
            (Role::Hidden, Coord::Two(a, b)) => {
                let mut input = self
                    .input
                    .clone()
                    .ok_or_else(|| Error::InvalidPlan("hidden variant needs an input layer".into()))?;
                let mut hidden = self.hidden.get(key).cloned().ok_or_else(|| Error::KeyAbsent(key.clone()))?;
                input.out_channels = *a;
                hidden.in_channels = *a;
                hidden.out_channels = *b;
                output.in_channels = *b;
                vec![input, hidden, output]
            }
            _ => {
                return Err(Error::DimensionMismatch {
                    expected: key.role.dims(),
                    got: coord.dims(),
                })
            }
        };
        let variant = ModelSpec {
            name: format!("{}/{}@{}", self.name, key, coord),
            blocks,
            iterations: self.iterations,
        };
        debug_assert!(variant.validate().is_ok());
        Ok(variant)
    }
}

/// Layer cost recovered from a variant measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub coordinate: Coord,
    pub joules_per_iter: f64,
    pub seconds_per_iter: f64,
    /// The energy subtraction went negative and was clamped to zero.
    pub clamped: bool,
}

/// Subtracts the fitted estimates of the layers surrounding the isolated one.
/// Returns the clamped cost and whether clamping happened.
pub fn extract_layer_cost(
    role: Role,
    coord: &Coord,
    measured: f64,
    input: Option<&GpSurface>,
    output: Option<&GpSurface>,
) -> Result<(f64, bool)> {
    fn need(s: Option<&GpSurface>, r: Role) -> Result<&GpSurface> {
        s.ok_or(Error::MissingPrerequisite(r))
    }
    let raw = match (role, coord) {
        (Role::Output, _) => measured,
        (Role::Input, Coord::One(c)) => measured - need(output, Role::Output)?.predict_mean(&Coord::One(*c))?,
        (Role::Hidden, Coord::Two(a, b)) => {
            let input = need(input, Role::Input)?;
            let output = need(output, Role::Output)?;
            measured - input.predict_mean(&Coord::One(*a))? - output.predict_mean(&Coord::One(*b))?
        }
        _ => {
            return Err(Error::DimensionMismatch {
                expected: role.dims(),
                got: coord.dims(),
            })
        }
    };
    Ok(if raw < 0.0 { (0.0, true) } else { (raw, false) })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KeyRecord {
    /// Raw variant measurements.
    pub samples: Vec<EnergySample>,
    /// Extracted layer costs, index-aligned with `samples`.
    pub costs: Vec<LayerCost>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProfileDb {
    pub keys: BTreeMap<LayerKey, KeyRecord>,
}

impl ProfileDb {
    /// Merges another session's records into this one.
    pub fn append(&mut self, other: ProfileDb) {
        for (key, rec) in other.keys {
            let entry = self.keys.entry(key).or_default();
            entry.samples.extend(rec.samples);
            entry.costs.extend(rec.costs);
        }
    }

    pub fn samples(&self) -> impl Iterator<Item = &EnergySample> {
        self.keys.values().flat_map(|r| r.samples.iter())
    }

    pub fn clamp_count(&self) -> usize {
        self.keys.values().flat_map(|r| &r.costs).filter(|c| c.clamped).count()
    }

    pub fn measurement_count(&self) -> usize {
        self.keys.values().map(|r| r.samples.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeySummary {
    pub key: LayerKey,
    /// Distinct coordinates profiled.
    pub points: usize,
    pub stop: StopReason,
    pub clamped: usize,
}

#[derive(Debug, Clone)]
pub struct ProfileOutcome {
    pub db: ProfileDb,
    pub surfaces: SurfaceSet,
    /// Fitted on per-layer seconds; used only to steer acquisition.
    pub time_surfaces: SurfaceSet,
    pub summary: Vec<KeySummary>,
}

/// A profiling error together with whatever was measured before it.
#[derive(Debug, Clone)]
pub struct ProfileFailure {
    pub error: Error,
    pub partial: ProfileDb,
}

impl fmt::Display for ProfileFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} ({} measurement(s) recorded before failure)",
            self.error,
            self.partial.measurement_count()
        )
    }
}

impl core::error::Error for ProfileFailure {}

fn mean(values: &[(Coord, f64)]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().map(|(_, v)| v).sum::<f64>() / values.len() as f64
    }
}

/// Profiles and fits every key of `model` in plan order.
pub fn run_profiling<B: EnergyBackend + ?Sized>(
    model: &ModelSpec,
    backend: &mut B,
    plan: &ProfilePlan,
) -> core::result::Result<ProfileOutcome, ProfileFailure> {
    let mut db = ProfileDb::default();
    match profile_all(model, backend, plan, &mut db) {
        Ok((surfaces, time_surfaces, summary)) => Ok(ProfileOutcome {
            db,
            surfaces,
            time_surfaces,
            summary,
        }),
        Err(error) => Err(ProfileFailure { error, partial: db }),
    }
}

fn profile_all<B: EnergyBackend + ?Sized>(
    model: &ModelSpec,
    backend: &mut B,
    plan: &ProfilePlan,
    db: &mut ProfileDb,
) -> Result<(SurfaceSet, SurfaceSet, Vec<KeySummary>)> {
    plan.validate(model)?;
    let factory = VariantFactory::new(model, plan)?;
    let input_key = factory.input_key();
    let output_key = factory.output_key();
    let settings = &plan.settings;
    let rule = plan.stop_rule();
    let mut surfaces = SurfaceSet::new();
    let mut time_surfaces = SurfaceSet::new();
    let mut summary = Vec::new();

    for (index, kp) in plan.keys.iter().enumerate() {
        let role = kp.key.role;
        let mut rng = match settings.acquisition {
            Acquisition::UniformRandom { seed } => Some(ChaCha8Rng::seed_from_u64(seed.wrapping_add(index as u64))),
            Acquisition::MaxVariance => None,
        };
        let mut profiled = BTreeSet::new();
        let mut energy: Vec<(Coord, f64)> = Vec::new();
        let mut time: Vec<(Coord, f64)> = Vec::new();
        let mut energy_surface: Option<GpSurface> = None;
        let mut time_surface: Option<GpSurface> = None;
        let record = db.keys.entry(kp.key.clone()).or_default();

        let mut acquire = |coord: Coord,
                           record: &mut crate::profiler::KeyRecord,
                           energy: &mut Vec<(Coord, f64)>,
                           time: &mut Vec<(Coord, f64)>|
         -> Result<()> {
            let variant = factory.make_variant(&kp.key, &coord)?;
            let mut sample = measure(backend, &variant, settings.iterations, settings.repeats)?;
            sample.coordinate = Some(coord);
            let in_key = input_key.as_ref();
            let (joules, clamped) = extract_layer_cost(
                role,
                &coord,
                sample.joules_per_iter,
                in_key.and_then(|k| surfaces.get(k)),
                surfaces.get(&output_key),
            )?;
            let (seconds, _) = extract_layer_cost(
                role,
                &coord,
                sample.seconds_per_iter,
                in_key.and_then(|k| time_surfaces.get(k)),
                time_surfaces.get(&output_key),
            )?;
            energy.push((coord, joules));
            time.push((coord, seconds));
            record.samples.push(sample);
            record.costs.push(LayerCost {
                coordinate: coord,
                joules_per_iter: joules,
                seconds_per_iter: seconds,
                clamped,
            });
            Ok(())
        };

        let stop = loop {
            let (steer, observed) = match settings.surrogate {
                Surrogate::Energy => (energy_surface.as_ref(), mean(&energy)),
                Surrogate::Time => (time_surface.as_ref(), mean(&time)),
            };
            let picker = match rng.as_mut() {
                Some(r) => Picker::Random(r),
                None => Picker::MaxVariance,
            };
            match decide(steer, &kp.grid, &kp.bounds, &profiled, observed, &rule, picker)? {
                Next::Done(reason) => break reason,
                Next::Point(coord) => {
                    acquire(coord, record, &mut energy, &mut time)?;
                    profiled.insert(coord);
                    if energy.len() >= 2 {
                        energy_surface = Some(fit(&kp.key, &energy, &kp.bounds, &settings.fit)?);
                        time_surface = Some(fit(&kp.key, &time, &kp.bounds, &settings.fit)?);
                    }
                }
            }
        };
        if energy_surface.is_none() {
            // a single-point grid: measure it again so there are two samples
            let coord = *profiled.iter().next().ok_or_else(|| Error::InvalidPlan("empty grid".to_string()))?;
            acquire(coord, record, &mut energy, &mut time)?;
            energy_surface = Some(fit(&kp.key, &energy, &kp.bounds, &settings.fit)?);
            time_surface = Some(fit(&kp.key, &time, &kp.bounds, &settings.fit)?);
        }
        summary.push(KeySummary {
            key: kp.key.clone(),
            points: profiled.len(),
            stop,
            clamped: record.costs.iter().filter(|c| c.clamped).count(),
        });
        surfaces.insert(kp.key.clone(), energy_surface.expect("fitted above"));
        time_surfaces.insert(kp.key.clone(), time_surface.expect("fitted above"));
    }
    Ok((surfaces, time_surfaces, summary))
}

/// Refits one surface per key from the extracted costs in `db`.
pub fn fit_from_db(db: &ProfileDb, plan: &ProfilePlan) -> Result<SurfaceSet> {
    let mut out = SurfaceSet::new();
    for kp in &plan.keys {
        let rec = db.keys.get(&kp.key).ok_or_else(|| Error::MissingSurface(kp.key.clone()))?;
        let pts: Vec<(Coord, f64)> = rec.costs.iter().map(|c| (c.coordinate, c.joules_per_iter)).collect();
        out.insert(kp.key.clone(), fit(&kp.key, &pts, &kp.bounds, &plan.settings.fit)?);
    }
    Ok(out)
}
