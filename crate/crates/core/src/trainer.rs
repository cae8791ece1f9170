//! Training, evaluation and ablation runs.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::backbones::{Backbone, Model, ModelConfig};
use crate::checkpoint::{Checkpoint, RngState};
use crate::data::{self, PairedSample, Split};
use crate::error::{Error, Result};
use crate::losses::{region_objective, total_loss, LossBreakdown, LossWeights, ObjectiveInputs};
use crate::masks::{self, AreaPartition, BandMode, RegionMask};
use crate::metrics::{score_image, MetricReport, MetricSummary, ScoreInputs};
use crate::nn::ParamStore;
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

/// Where each image's region mask comes from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskPolicy {
    /// A fresh random circle per image (per epoch when training).
    #[default]
    Circle,
    /// One two-channel mask PNG for every image.
    FixedFile { path: PathBuf },
    /// A binary Area-A map turned into a two-channel mask by morphology.
    DeriveBand {
        path: PathBuf,
        mode: BandMode,
        radius_px: usize,
    },
}

/// Resolved [`MaskPolicy`], ready to hand out masks.
#[derive(Clone, Debug)]
pub enum MaskSource {
    Circle,
    Fixed(RegionMask),
}

impl MaskSource {
    pub fn from_policy(policy: &MaskPolicy) -> Result<Self> {
        Ok(match policy {
            MaskPolicy::Circle => MaskSource::Circle,
            MaskPolicy::FixedFile { path } => MaskSource::Fixed(masks::load_mask(path)?),
            MaskPolicy::DeriveBand { path, mode, radius_px } => {
                let map = masks::load_binary_map(path)?;
                let derived = masks::derive_band(&map, *mode, *radius_px)?;
                if let Some(w) = derived.warning() {
                    tracing::warn!("{w}");
                }
                MaskSource::Fixed(derived.mask)
            }
        })
    }

    pub fn mask<R: Rng + ?Sized>(&self, rng: &mut R, height: usize, width: usize) -> Result<RegionMask> {
        match self {
            MaskSource::Circle => Ok(masks::sample_circle_with(rng, height, width)?.0),
            MaskSource::Fixed(m) => {
                if (m.height(), m.width()) != (height, width) {
                    return Err(Error::Shape(format!(
                        "mask is {}×{} but the image is {height}×{width}",
                        m.height(),
                        m.width()
                    )));
                }
                Ok(m.clone())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic {
        n: usize,
        height: usize,
        width: usize,
        seed: u64,
    },
    Dir {
        root: PathBuf,
        #[serde(default)]
        resize: Option<usize>,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            n: 64,
            height: 64,
            width: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from `learning_rate` to 0 over the planned steps.
    #[default]
    Cosine,
}

impl LrSchedule {
    /// Learning rate for 0-based step `step` out of `total`.
    pub fn rate(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub epochs: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub adam: AdamConfig,
    pub seed: u64,
    pub mask_policy: MaskPolicy,
    /// Train without the transition band: the mask's channel 1 is replaced
    /// by channel 0, so there are only areas A and C.
    pub no_gradient_smooth: bool,
    pub data: DataSource,
    pub split: Split,
    /// Validate every this many epochs (0 disables validation).
    pub validate_every: usize,
    /// Where to write a diagnostic dump if the loss becomes non-finite.
    pub dump_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            epochs: 300,
            max_steps: None,
            batch_size: 8,
            learning_rate: 1e-4,
            lr_schedule: LrSchedule::Cosine,
            adam: AdamConfig::default(),
            seed: 0,
            mask_policy: MaskPolicy::Circle,
            no_gradient_smooth: false,
            data: DataSource::Dir {
                root: PathBuf::from("data"),
                resize: Some(256),
            },
            split: Split::default(),
            validate_every: 1,
            dump_dir: None,
        }
    }
}

/// Step budget of the desk profile.
pub const DESK_STEPS: usize = 300;
/// Learning rate of the desk profile.
pub const DESK_LEARNING_RATE: f64 = 2e-3;

impl TrainConfig {
    /// Small-machine profile: 64 synthetic 64×64 pairs and a short run.
    pub fn desk() -> Self {
        Self::default().with_desk_profile()
    }

    pub fn with_desk_profile(mut self) -> Self {
        self.data = DataSource::default();
        self.max_steps = Some(DESK_STEPS);
        self.learning_rate = DESK_LEARNING_RATE;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning_rate must be positive".into()));
        }
        if self.max_steps == Some(0) {
            return Err(Error::InvalidArgument("max_steps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(Error::file(path))?;
        let cfg: Self = serde_json::from_str(&text)?;
        Ok(cfg)
    }

    /// Load and split the configured dataset.
    pub fn load_data(&self) -> Result<(Vec<PairedSample>, Vec<PairedSample>)> {
        let samples = match &self.data {
            DataSource::Synthetic { n, height, width, seed } => data::synth_pairs(*n, *height, *width, *seed)?,
            DataSource::Dir { root, resize } => data::load_paired_dir(root, *resize)?.samples,
        };
        data::split_dataset(samples, &self.split)
    }
}

/// Replace channel 1 by channel 0 (no band).
pub fn collapse_band(mask: &RegionMask) -> RegionMask {
    RegionMask::new(mask.inner().clone(), mask.inner().clone()).expect("A ⊆ A")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub l_a: f64,
    pub l_b: f64,
    pub l_c: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub validation: Option<MetricSummary>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

/// Progress notifications emitted while training.
#[derive(Clone, Copy, Debug)]
pub enum TrainEvent<'a> {
    Step(&'a StepRecord),
    Epoch(&'a EpochRecord),
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: History,
}

/// Stack single-image tensors into a batch.
fn stack(items: &[&Tensor<f32>]) -> Tensor<f32> {
    Tensor::stack(items)
}

/// Loss, gradients and per-sample breakdown for one batch.
struct BatchResult {
    grads: Vec<Option<Tensor<f32>>>,
    breakdown: LossBreakdown,
}

fn batch_gradients(
    model: &Model,
    store: &ParamStore<f32>,
    samples: &[&PairedSample],
    masks: &[RegionMask],
    weights: &LossWeights,
) -> BatchResult {
    let total_n = samples.len() as f32;
    let mut grads: Vec<Option<Tensor<f32>>> = vec![None; store.len()];
    let mut per_sample = Vec::new();
    let mut all_partitions = Vec::new();
    // Images of different sizes cannot share a tensor; the batch mean is
    // rebuilt from per-size groups weighted by their share of the batch.
    let mut sizes: Vec<(usize, usize)> = samples.iter().map(|s| (s.height(), s.width())).collect();
    sizes.dedup();
    let mut seen = Vec::new();
    for hw in sizes {
        if seen.contains(&hw) {
            continue;
        }
        seen.push(hw);
        let idx: Vec<usize> = (0..samples.len())
            .filter(|&i| (samples[i].height(), samples[i].width()) == hw)
            .collect();
        let low = stack(&idx.iter().map(|&i| &samples[i].low).collect::<Vec<_>>());
        let reference = stack(&idx.iter().map(|&i| &samples[i].reference).collect::<Vec<_>>());
        let mask_t: Vec<Tensor<f32>> = idx.iter().map(|&i| masks[i].to_tensor()).collect();
        let mask = stack(&mask_t.iter().collect::<Vec<_>>());
        let partitions: Vec<AreaPartition> = idx.iter().map(|&i| masks[i].partition()).collect();

        let tape = Tape::new();
        let params = store.bind(&tape, true);
        let x = tape.constant(low.clone());
        let fv = model.forward(&tape, &params, x, &mask);
        let vars = ObjectiveInputs {
            enhanced: fv.enhanced,
            illumination: fv.illumination(model.config().backbone),
        };
        let (total, breakdown) = region_objective(&tape, vars, &low, &reference, &partitions, weights);
        let share = idx.len() as f32 / total_n;
        let scaled = tape.affine(total, share, 0.0);
        let mut g = tape.backward(scaled);
        for (slot, &v) in grads.iter_mut().zip(params.vars()) {
            if let Some(gv) = g.take(v) {
                match slot {
                    Some(acc) => acc.add_assign(&gv),
                    None => *slot = Some(gv),
                }
            }
        }
        per_sample.extend(breakdown.samples);
        all_partitions.extend(partitions);
    }
    let col = |f: fn(&crate::losses::SampleBreakdown) -> f64| per_sample.iter().map(f).collect::<Vec<_>>();
    let breakdown = total_loss(&col(|s| s.l_a), &col(|s| s.l_b), &col(|s| s.l_c), &all_partitions, weights);
    BatchResult { grads, breakdown }
}

fn write_nan_dump(
    dir: &Path,
    step: usize,
    samples: &[&PairedSample],
    masks: &[RegionMask],
    breakdown: &LossBreakdown,
) -> Result<PathBuf> {
    let out = dir.join(format!("nan_step_{step:06}"));
    std::fs::create_dir_all(&out).map_err(Error::file(&out))?;
    for (s, m) in samples.iter().zip(masks) {
        data::save_png(out.join(format!("{}_low.png", s.id)), &data::tensor_to_rgb(&s.low, 0)?)?;
        masks::save_mask(out.join(format!("{}_mask.png", s.id)), m)?;
    }
    let report = serde_json::json!({
        "step": step,
        "ids": samples.iter().map(|s| s.id.clone()).collect::<Vec<_>>(),
        "breakdown": breakdown,
    });
    let path = out.join("batch.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&report)?).map_err(Error::file(&path))?;
    Ok(out)
}

/// Train from scratch. `train_set` is never modified.
pub fn train(
    config: &TrainConfig,
    train_set: &[PairedSample],
    val_set: &[PairedSample],
    mut on_event: impl FnMut(TrainEvent<'_>),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let (model, mut store) = Model::new::<f32>(config.model.clone(), config.seed)?;
    let mut adam = Adam::new(&store, config.learning_rate, config.adam);
    let source = MaskSource::from_policy(&config.mask_policy)?;
    // Weight init consumed `seed`; the data stream uses its own stream id.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut history = History::default();
    let mut step = 0;
    let mut epoch = 0;
    let budget = config.max_steps.unwrap_or(usize::MAX);
    let planned = budget.min(config.epochs * train_set.len().div_ceil(config.batch_size));
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    'epochs: while epoch < config.epochs && step < budget {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if step >= budget {
                break 'epochs;
            }
            let batch: Vec<&PairedSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let mut batch_masks = Vec::with_capacity(batch.len());
            for s in &batch {
                let m = source.mask(&mut rng, s.height(), s.width())?;
                batch_masks.push(if config.no_gradient_smooth { collapse_band(&m) } else { m });
            }
            let result = batch_gradients(&model, &store, &batch, &batch_masks, &config.weights);
            let b = &result.breakdown;
            // Clamped outputs can hide NaN activations from the loss, so
            // gradients are checked too.
            let grads_finite = result
                .grads
                .iter()
                .flatten()
                .all(|g| g.data().iter().all(|v| v.is_finite()));
            if !b.total.is_finite() || !grads_finite {
                let what = if b.total.is_finite() { "gradient" } else { "loss" };
                let mut msg = format!(
                    "non-finite {what} at step {} (l_a={}, l_b={}, l_c={})",
                    step + 1,
                    b.l_a,
                    b.l_b,
                    b.l_c
                );
                if let Some(dir) = &config.dump_dir {
                    let at = write_nan_dump(dir, step + 1, &batch, &batch_masks, b)?;
                    msg.push_str(&format!("; batch dumped to {}", at.display()));
                }
                return Err(Error::Numeric(msg));
            }
            adam.learning_rate = config.lr_schedule.rate(config.learning_rate, step, planned);
            adam.step(&mut store, &result.grads);
            step += 1;
            let rec = StepRecord {
                step,
                epoch: epoch + 1,
                l_a: b.l_a,
                l_b: b.l_b,
                l_c: b.l_c,
                total: b.total,
            };
            on_event(TrainEvent::Step(&rec));
            history.steps.push(rec);
        }
        epoch += 1;
        let validation = if config.validate_every > 0 && epoch % config.validate_every == 0 && !val_set.is_empty() {
            let opts = EvalOptions {
                mask_policy: config.mask_policy.clone(),
                seed: config.seed,
                literal_psnr: false,
                collapse_band: config.no_gradient_smooth,
            };
            Some(evaluate(&model, &store, val_set, &opts)?.summary)
        } else {
            None
        };
        let rec = EpochRecord { epoch, step, validation };
        on_event(TrainEvent::Epoch(&rec));
        history.epochs.push(rec);
    }
    // A partially finished epoch still counts as trained-on.
    let epochs_done = history.steps.last().map_or(0, |s| s.epoch);
    let checkpoint = Checkpoint {
        model: config.model.clone(),
        train: Some(config.clone()),
        epoch: epochs_done,
        step,
        rng: Some(RngState::capture(&rng)),
        params: store,
    };
    Ok(TrainOutcome { checkpoint, history })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub mask_policy: MaskPolicy,
    pub seed: u64,
    /// Also report the literal `PSNR / r_a` variant.
    pub literal_psnr: bool,
    /// Feed the model band-free masks (for models trained that way); metrics
    /// still use the original band.
    pub collapse_band: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            mask_policy: MaskPolicy::Circle,
            seed: 0,
            literal_psnr: false,
            collapse_band: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub reports: Vec<MetricReport>,
    pub summary: MetricSummary,
}

/// Masks used by [`evaluate`] for `samples`: a pure function of the policy
/// and seed.
pub fn evaluation_masks(samples: &[PairedSample], policy: &MaskPolicy, seed: u64) -> Result<Vec<RegionMask>> {
    let source = MaskSource::from_policy(policy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    samples
        .iter()
        .map(|s| source.mask(&mut rng, s.height(), s.width()))
        .collect()
}

/// Score a model on `samples`, one image at a time.
pub fn evaluate(model: &Model, store: &ParamStore<f32>, samples: &[PairedSample], opts: &EvalOptions) -> Result<Evaluation> {
    let masks = evaluation_masks(samples, &opts.mask_policy, opts.seed)?;
    let mut reports = Vec::with_capacity(samples.len());
    for (s, mask) in samples.iter().zip(&masks) {
        let fed = if opts.collapse_band { collapse_band(mask) } else { mask.clone() };
        let out = model.enhance(store, &s.low, &fed.to_tensor())?;
        let band_map = match model.config().backbone {
            Backbone::Curve => &out.enhanced,
            Backbone::Retinex => out.intermediate.tensor(),
        };
        let images = ScoreInputs {
            enhanced: &out.enhanced,
            reference: &s.reference,
            input: &s.low,
            band_map,
        };
        reports.push(score_image(s.id.clone(), images, &mask.partition(), opts.literal_psnr)?);
    }
    let summary = MetricSummary::from_reports(&reports);
    Ok(Evaluation { reports, summary })
}

/// Evaluate a checkpoint, honouring how it was trained.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, samples: &[PairedSample], opts: &EvalOptions) -> Result<Evaluation> {
    let model = ckpt.model()?;
    let mut opts = opts.clone();
    opts.collapse_band |= ckpt.train.as_ref().is_some_and(|t| t.no_gradient_smooth);
    evaluate(&model, &ckpt.params, samples, &opts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub curvature_energy: f64,
    pub per_image_energy: Vec<f64>,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Name of the run with the lowest mean band curvature energy.
    pub smoothest_in_b: String,
}

impl AblationReport {
    /// Fraction of images on which run `a` has strictly lower band energy
    /// than run `b`.
    pub fn fraction_smoother(&self, a: &str, b: &str) -> Option<f64> {
        let ra = self.rows.iter().find(|r| r.name == a)?;
        let rb = self.rows.iter().find(|r| r.name == b)?;
        let n = ra.per_image_energy.len();
        if n == 0 || n != rb.per_image_energy.len() {
            return None;
        }
        let wins = ra
            .per_image_energy
            .iter()
            .zip(&rb.per_image_energy)
            .filter(|(x, y)| x < y)
            .count();
        Some(wins as f64 / n as f64)
    }
}

/// Train every configuration on the same data and evaluate on the same
/// masks. All runs must share a seed.
pub fn compare_ablation(
    runs: &[(String, TrainConfig)],
    train_set: &[PairedSample],
    eval_set: &[PairedSample],
    eval_seed: u64,
) -> Result<AblationReport> {
    let Some((_, first)) = runs.first() else {
        return Err(Error::InvalidArgument("no configurations to compare".into()));
    };
    if runs.iter().any(|(_, c)| c.seed != first.seed) {
        return Err(Error::InvalidArgument("ablation runs must share a seed".into()));
    }
    let mut outcomes = Vec::with_capacity(runs.len());
    for (name, cfg) in runs {
        outcomes.push((name.clone(), train(cfg, train_set, &[], |_| {})?));
    }
    let refs: Vec<(String, &TrainOutcome)> = outcomes.iter().map(|(n, o)| (n.clone(), o)).collect();
    ablation_report(&refs, eval_set, eval_seed)
}

/// Side-by-side evaluation of finished runs on identical masks.
pub fn ablation_report(
    runs: &[(String, &TrainOutcome)],
    eval_set: &[PairedSample],
    eval_seed: u64,
) -> Result<AblationReport> {
    let seeds: Vec<Option<u64>> = runs
        .iter()
        .map(|(_, o)| o.checkpoint.train.as_ref().map(|t| t.seed))
        .collect();
    if seeds.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::InvalidArgument("ablation runs must share a seed".into()));
    }
    let mut rows = Vec::with_capacity(runs.len());
    for (name, outcome) in runs {
        let policy = outcome
            .checkpoint
            .train
            .as_ref()
            .map(|t| t.mask_policy.clone())
            .unwrap_or_default();
        let opts = EvalOptions {
            mask_policy: policy,
            seed: eval_seed,
            ..EvalOptions::default()
        };
        let eval = evaluate_checkpoint(&outcome.checkpoint, eval_set, &opts)?;
        rows.push(AblationRow {
            name: name.clone(),
            psnr_db: eval.summary.psnr_db,
            ssim: eval.summary.ssim,
            curvature_energy: eval.summary.curvature_energy,
            per_image_energy: eval.reports.iter().map(|r| r.b_region_curvature_energy).collect(),
            final_loss: outcome.history.steps.last().map(|s| s.total),
        });
    }
    let smoothest_in_b = rows
        .iter()
        .min_by(|a, b| a.curvature_energy.total_cmp(&b.curvature_energy))
        .map(|r| r.name.clone())
        .unwrap_or_default();
    Ok(AblationReport { rows, smoothest_in_b })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                width: 8,
                depth: 4,
                ranlen_sites: vec![1],
                mask_embed_width: 8,
                ..ModelConfig::default()
            },
            epochs: 2,
            batch_size: 3,
            learning_rate: 1e-3,
            data: DataSource::Synthetic {
                n: 6,
                height: 16,
                width: 16,
                seed: 0,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn same_seed_same_history() {
        let cfg = tiny_config();
        let (tr, va) = cfg.load_data().unwrap();
        let a = train(&cfg, &tr, &va, |_| {}).unwrap();
        let b = train(&cfg, &tr, &va, |_| {}).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.history.steps.len(), 4);
    }

    #[test]
    fn ablation_flag_zeroes_band_loss() {
        let cfg = TrainConfig {
            no_gradient_smooth: true,
            ..tiny_config()
        };
        let (tr, _) = cfg.load_data().unwrap();
        let out = train(&cfg, &tr, &[], |_| {}).unwrap();
        assert!(out.history.steps.iter().all(|s| s.l_b == 0.0));
    }

    #[test]
    fn zero_weights_leave_parameters_and_data() {
        let cfg = TrainConfig {
            weights: LossWeights {
                alpha_w: 0.0,
                beta_w: 0.0,
                gamma_w: 0.0,
                ..LossWeights::default()
            },
            ..tiny_config()
        };
        let (tr, _) = cfg.load_data().unwrap();
        let before = tr.clone();
        let out = train(&cfg, &tr, &[], |_| {}).unwrap();
        let (_, init) = Model::new::<f32>(cfg.model.clone(), cfg.seed).unwrap();
        assert_eq!(out.checkpoint.params, init);
        assert_eq!(tr, before);
    }

    #[test]
    fn divergence_aborts_with_dump() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e30,
            max_steps: Some(6),
            epochs: 10,
            dump_dir: Some(dir.path().to_path_buf()),
            ..tiny_config()
        };
        let (tr, _) = cfg.load_data().unwrap();
        let err = train(&cfg, &tr, &[], |_| {}).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
        let dumped: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(dumped.len(), 1);
        let batch = dumped[0].as_ref().unwrap().path();
        assert!(batch.join("batch.json").is_file());
    }

    #[test]
    fn max_steps_and_events() {
        let cfg = TrainConfig {
            max_steps: Some(3),
            epochs: 10,
            ..tiny_config()
        };
        let (tr, va) = cfg.load_data().unwrap();
        let mut steps = 0;
        let out = train(&cfg, &tr, &va, |e| {
            if let TrainEvent::Step(_) = e {
                steps += 1
            }
        })
        .unwrap();
        assert_eq!(steps, 3);
        assert_eq!(out.checkpoint.step, 3);
        assert_eq!(out.checkpoint.epoch, 2);
    }

    #[test]
    fn refinement_moves_after_a_step() {
        let cfg = TrainConfig {
            max_steps: Some(1),
            ..tiny_config()
        };
        let (tr, _) = cfg.load_data().unwrap();
        let out = train(&cfg, &tr, &[], |_| {}).unwrap();
        let (_, init) = Model::new::<f32>(cfg.model.clone(), cfg.seed).unwrap();
        let id = init.find("refine.weight").unwrap();
        assert_ne!(out.checkpoint.params.get(id), init.get(id));
    }

    #[test]
    fn evaluation_reference_is_perfect_and_reproducible() {
        let samples = data::synth_pairs(3, 24, 24, 4).unwrap();
        let opts = EvalOptions::default();
        let masks = evaluation_masks(&samples, &opts.mask_policy, 0).unwrap();
        for (s, m) in samples.iter().zip(&masks) {
            let p = m.partition();
            assert_eq!(crate::metrics::masked_psnr(&s.reference, &s.reference, &p).unwrap(), 99.0);
            assert_eq!(crate::metrics::masked_ssim(&s.reference, &s.reference, &p.area_a).unwrap(), 1.0);
        }
        let cfg = tiny_config();
        let (model, store) = Model::new::<f32>(cfg.model, 1).unwrap();
        let a = evaluate(&model, &store, &samples, &opts).unwrap();
        let b = evaluate(&model, &store, &samples, &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_round_trip_reproduces_metrics() {
        let cfg = TrainConfig {
            max_steps: Some(2),
            ..tiny_config()
        };
        let (tr, _) = cfg.load_data().unwrap();
        let out = train(&cfg, &tr, &[], |_| {}).unwrap();
        let back = Checkpoint::from_bytes(&out.checkpoint.to_bytes().unwrap()).unwrap();
        let samples = data::synth_pairs(2, 16, 16, 9).unwrap();
        let opts = EvalOptions::default();
        assert_eq!(
            evaluate_checkpoint(&out.checkpoint, &samples, &opts).unwrap(),
            evaluate_checkpoint(&back, &samples, &opts).unwrap()
        );
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let s = LrSchedule::Cosine;
        assert_eq!(s.rate(1.0, 0, 10), 1.0);
        assert!((s.rate(1.0, 5, 10) - 0.5).abs() < 1e-12);
        assert!(s.rate(1.0, 9, 10) > 0.0);
        assert_eq!(LrSchedule::Constant.rate(0.3, 7, 10), 0.3);
    }

    #[test]
    fn config_json_and_validation() {
        let cfg = TrainConfig::desk();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&text).unwrap(), cfg);
        let partial: TrainConfig = serde_json::from_str(r#"{"epochs": 5, "mask_policy": {"kind": "circle"}}"#).unwrap();
        assert_eq!(partial.epochs, 5);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 5}"#).is_err());
        assert!(TrainConfig { epochs: 0, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn ablation_report_shape() {
        let cfg = TrainConfig {
            max_steps: Some(1),
            ..tiny_config()
        };
        let (tr, _) = cfg.load_data().unwrap();
        let eval = data::synth_pairs(2, 16, 16, 3).unwrap();
        let report = compare_ablation(&[("only".into(), cfg.clone())], &tr, &eval, 0).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.smoothest_in_b, "only");
        assert_eq!(report.fraction_smoother("only", "only"), Some(0.0));
        let other = TrainConfig { seed: 5, ..cfg.clone() };
        assert!(compare_ablation(&[("a".into(), cfg), ("b".into(), other)], &tr, &eval, 0).is_err());
    }
}
