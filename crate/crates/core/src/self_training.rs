//! Base training on seen labels and the iterative self-training loop.
//!
//! Cycle `t` pseudo-labels every training image once with the frozen model
//! `P_t`, then fine-tunes a copy of `P_t` on the seen labels plus the cached
//! pseudo-labels; the result is `P_{t+1}` and becomes the next generator.
//! Every phase draws its batches from its own seeded stream, so a run can be
//! resumed from any saved cycle and reproduce the same tail.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::augmentation::{validate_spec_list, AugmentationSpec};
use crate::error::{Error, Result};
use crate::label_space::{validate_training_mask, EmbeddingTable, LabelMask, LabelSpace};
use crate::metrics::{ConfusionMatrix, GzlssReport, PseudoCounts, PseudoQuality};
use crate::model::{
    backward, infer_gzs, save_checkpoint, sgd_step, BackboneParams, Gradients, LossBreakdown, Objective,
    OptimizerState, SgdConfig,
};
use crate::pseudo_labeler::{generate, PseudoMask, Strategy, UnlabeledPixelSet};
use crate::synthetic::{parse_value, Sample};

pub const HISTORY_HEADER: &str = "# zlss-history v1";
pub const HISTORY_COLUMNS: &str = "cycle,seen_miou,unseen_miou,hm,pl_precision,pl_recall,pl_coverage,seconds";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Weight of the pseudo-label loss term.
    pub lambda: f64,
    pub batch_size: usize,
    pub base_iters: u64,
    /// Fine-tuning iterations per self-training cycle.
    pub cycle_iters: u64,
    pub cycles: usize,
    /// Hidden layer widths of the backbone; empty for a linear backbone.
    pub hidden: Vec<usize>,
    pub window: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_power: f64,
    /// Seen-score offset used when evaluating.
    pub gamma: f64,
    pub seed: u64,
    /// Record elapsed seconds in the history. Off by default so that
    /// histories are reproducible byte for byte.
    pub wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let sgd = SgdConfig::default();
        Self {
            lambda: 1.0,
            batch_size: 4,
            base_iters: 300,
            cycle_iters: 150,
            cycles: 6,
            hidden: Vec::new(),
            window: 1,
            lr: sgd.base_lr,
            momentum: sgd.momentum,
            weight_decay: sgd.weight_decay,
            lr_power: sgd.power,
            gamma: 0.0,
            seed: 0,
            wall_clock: false,
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "lambda",
        "batch_size",
        "base_iters",
        "cycle_iters",
        "cycles",
        "hidden",
        "window",
        "lr",
        "momentum",
        "weight_decay",
        "lr_power",
        "gamma",
        "seed",
        "wall_clock",
    ];

    /// Sets one field by its config key; `Ok(false)` for foreign keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "lambda" => self.lambda = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "base_iters" => self.base_iters = parse_value(key, value)?,
            "cycle_iters" => self.cycle_iters = parse_value(key, value)?,
            "cycles" => self.cycles = parse_value(key, value)?,
            "hidden" => {
                self.hidden = match value.trim() {
                    "" | "none" => Vec::new(),
                    list => list
                        .split(',')
                        .map(|w| parse_value(key, w))
                        .collect::<Result<_>>()?,
                }
            }
            "window" => self.window = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "momentum" => self.momentum = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "lr_power" => self.lr_power = parse_value(key, value)?,
            "gamma" => self.gamma = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "wall_clock" => self.wall_clock = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.window.is_multiple_of(2) {
            return Err(Error::Config(format!("window {} must be odd", self.window)));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        if !self.gamma.is_finite() {
            return Err(Error::Config("gamma must be finite".into()));
        }
        self.sgd(1).validate()
    }

    fn sgd(&self, max_iter: u64) -> SgdConfig {
        SgdConfig {
            base_lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            power: self.lr_power,
            max_iter,
        }
    }
}

/// Independent random stream for one phase of a run.
fn phase_rng(seed: u64, phase: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(phase);
    rng
}

const PHASE_INIT: u64 = 0;
const PHASE_BASE: u64 = 1;
/// Cycle `t` fine-tunes with stream `PHASE_CYCLE + t`.
const PHASE_CYCLE: u64 = 2;

pub fn init_model(in_channels: usize, table: &EmbeddingTable, config: &TrainConfig) -> Result<BackboneParams> {
    config.validate()?;
    let mut rng = phase_rng(config.seed, PHASE_INIT);
    BackboneParams::init(in_channels, config.window, &config.hidden, table.dim(), &mut rng)
}

struct Phase<'a> {
    samples: &'a [Sample],
    pseudo: Option<&'a [PseudoMask]>,
    table: &'a EmbeddingTable,
    objective: Objective,
    iters: u64,
    stream: u64,
}

fn run_phase(params: &mut BackboneParams, phase: &Phase, config: &TrainConfig) -> Result<(OptimizerState, LossBreakdown)> {
    let mut state = OptimizerState::new(config.sgd(phase.iters), params)?;
    let mut rng = phase_rng(config.seed, phase.stream);
    let mut order: Vec<usize> = Vec::new();
    let mut total = LossBreakdown::default();
    let empty: Vec<LabelMask> = phase
        .samples
        .iter()
        .map(|s| LabelMask::zeros(s.train_mask.height(), s.train_mask.width()))
        .collect();
    while !state.is_finished() {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if order.is_empty() {
                order = (0..phase.samples.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(order.pop().expect("refilled above"));
        }
        let snapshot = &*params;
        let results = batch
            .par_iter()
            .map(|&i| {
                let s = &phase.samples[i];
                let ybar = phase.pseudo.map_or(&empty[i], |p| &p[i].mask);
                backward(&s.image, snapshot, phase.table, &phase.objective, &s.train_mask, ybar)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut grads: Gradients = params.zero_grads();
        for (loss, g) in &results {
            total.add(loss);
            grads.add_assign(g);
        }
        sgd_step(params, &grads, &mut state)?;
    }
    Ok((state, total))
}

fn check_training_set(samples: &[Sample], space: &LabelSpace, table: &EmbeddingTable) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    table.check_covers(space)?;
    for s in samples {
        validate_training_mask(&s.train_mask, space)?;
    }
    Ok(())
}

/// Trains `params` on the seen labels only.
pub fn train_base(
    params: &mut BackboneParams,
    samples: &[Sample],
    space: &LabelSpace,
    table: &EmbeddingTable,
    config: &TrainConfig,
) -> Result<OptimizerState> {
    check_training_set(samples, space, table)?;
    let phase = Phase {
        samples,
        pseudo: None,
        table,
        objective: Objective::new(space.seen().to_vec(), space.all().to_vec(), 0.0)?,
        iters: config.base_iters,
        stream: PHASE_BASE,
    };
    Ok(run_phase(params, &phase, config)?.0)
}

/// Pseudo-masks for every sample, generated by a frozen model.
pub fn pseudo_label_all(
    generator: &BackboneParams,
    samples: &[Sample],
    specs: &[AugmentationSpec],
    strategy: Strategy,
    space: &LabelSpace,
    table: &EmbeddingTable,
) -> Result<Vec<PseudoMask>> {
    samples
        .par_iter()
        .map(|s| generate(strategy, generator, &s.image, &s.train_mask, specs, table, space))
        .collect()
}

/// Fine-tunes a copy of `generator` on seen labels plus `pseudo`, which must
/// have been produced by `generator`.
#[allow(clippy::too_many_arguments)]
pub fn fine_tune(
    generator: &BackboneParams,
    samples: &[Sample],
    pseudo: &[PseudoMask],
    cycle: usize,
    space: &LabelSpace,
    table: &EmbeddingTable,
    config: &TrainConfig,
) -> Result<(BackboneParams, OptimizerState)> {
    check_training_set(samples, space, table)?;
    if pseudo.len() != samples.len() {
        return Err(Error::Config(format!(
            "{} pseudo-masks for {} samples",
            pseudo.len(),
            samples.len()
        )));
    }
    let fingerprint = generator.fingerprint();
    if let Some(stale) = pseudo.iter().position(|p| p.provenance.generator != fingerprint) {
        return Err(Error::Config(format!(
            "pseudo-mask {stale} was produced by a different model than the one being fine-tuned"
        )));
    }
    let mut params = generator.clone();
    let phase = Phase {
        samples,
        pseudo: Some(pseudo),
        table,
        objective: Objective::new(space.all().to_vec(), space.all().to_vec(), config.lambda)?,
        iters: config.cycle_iters,
        stream: PHASE_CYCLE + cycle as u64,
    };
    let (state, _) = run_phase(&mut params, &phase, config)?;
    Ok((params, state))
}

/// One self-training cycle: pseudo-label with `generator`, then fine-tune.
#[allow(clippy::too_many_arguments)]
pub fn run_cycle(
    generator: &BackboneParams,
    samples: &[Sample],
    specs: &[AugmentationSpec],
    strategy: Strategy,
    cycle: usize,
    space: &LabelSpace,
    table: &EmbeddingTable,
    config: &TrainConfig,
) -> Result<BackboneParams> {
    let pseudo = pseudo_label_all(generator, samples, specs, strategy, space, table)?;
    Ok(fine_tune(generator, samples, &pseudo, cycle, space, table, config)?.0)
}

/// GZS evaluation of `params` over samples with ground truth.
pub fn evaluate(
    params: &BackboneParams,
    samples: &[Sample],
    space: &LabelSpace,
    table: &EmbeddingTable,
    gamma: f64,
) -> Result<GzlssReport> {
    let matrices = samples
        .par_iter()
        .map(|s| {
            let gt = s
                .hidden_gt
                .as_ref()
                .ok_or_else(|| Error::Config(format!("evaluation image {} has no ground truth", s.index)))?;
            let pred = infer_gzs(&s.image, params, table, space, gamma)?;
            let mut cm = ConfusionMatrix::for_space(space);
            cm.accumulate(&pred, gt)?;
            Ok(cm)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cm = ConfusionMatrix::for_space(space);
    for m in &matrices {
        cm.merge(m)?;
    }
    GzlssReport::from_confusion(&cm, space)
}

/// Pseudo-label quality over the samples whose full ground truth is known;
/// `None` if there are none.
pub fn pseudo_quality_all(samples: &[Sample], pseudo: &[PseudoMask], space: &LabelSpace) -> Result<Option<PseudoQuality>> {
    let mut counts = PseudoCounts::default();
    let mut any = false;
    for (s, p) in samples.iter().zip(pseudo) {
        if let Some(gt) = &s.hidden_gt {
            let unlabeled = UnlabeledPixelSet::from_mask(&s.train_mask);
            counts.add(&crate::metrics::pseudo_counts(&p.mask, gt, &unlabeled, space)?);
            any = true;
        }
    }
    Ok(any.then(|| counts.quality()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleRecord {
    pub cycle: usize,
    pub seen_miou: f64,
    pub unseen_miou: f64,
    pub hm: f64,
    /// Quality of the pseudo-labels this cycle's model generates.
    pub pseudo: Option<PseudoQuality>,
    pub checkpoint: Option<PathBuf>,
    pub seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CycleHistory {
    pub records: Vec<CycleRecord>,
}

fn opt(v: Option<f64>, decimals: usize) -> String {
    v.map(|x| format!("{x:.decimals$}")).unwrap_or_default()
}

impl CycleHistory {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{HISTORY_HEADER}\n{HISTORY_COLUMNS}\n");
        for r in &self.records {
            let q = r.pseudo.unwrap_or(PseudoQuality {
                precision: None,
                recall: None,
                coverage: None,
            });
            let _ = writeln!(
                out,
                "{},{:.4},{:.4},{:.4},{},{},{},{}",
                r.cycle,
                r.seen_miou,
                r.unseen_miou,
                r.hm,
                opt(q.precision, 6),
                opt(q.recall, 6),
                opt(q.coverage, 6),
                opt(r.seconds, 3)
            );
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn last(&self) -> Option<&CycleRecord> {
        self.records.last()
    }
}

/// Everything a self-training run needs besides the starting model.
pub struct SelfTraining<'a> {
    pub train: &'a [Sample],
    pub eval: &'a [Sample],
    pub space: &'a LabelSpace,
    pub table: &'a EmbeddingTable,
    pub specs: &'a [AugmentationSpec],
    pub strategy: Strategy,
    pub config: &'a TrainConfig,
    /// Directory for `cycle_<t>.ckpt` files, if any.
    pub checkpoint_dir: Option<&'a Path>,
}

impl SelfTraining<'_> {
    pub fn checkpoint_path(&self, cycle: usize) -> Option<PathBuf> {
        self.checkpoint_dir.map(|d| d.join(format!("cycle_{cycle}.ckpt")))
    }

    /// Runs cycles `0..=T` starting from `P_0`.
    pub fn run(&self, p0: BackboneParams) -> Result<(BackboneParams, CycleHistory)> {
        self.run_from(0, p0, None)
    }

    /// Runs cycles `start..=T`, where `model` is `P_start`.
    pub fn run_from(
        &self,
        start: usize,
        model: BackboneParams,
        state: Option<OptimizerState>,
    ) -> Result<(BackboneParams, CycleHistory)> {
        let config = self.config;
        config.validate()?;
        self.strategy.validate()?;
        validate_spec_list(self.specs)?;
        if start > config.cycles {
            return Err(Error::Config(format!(
                "start cycle {start} is past the last cycle {}",
                config.cycles
            )));
        }
        let mut history = CycleHistory::default();
        let mut model = model;
        let mut state = state;
        for t in start..=config.cycles {
            let clock = Instant::now();
            let checkpoint = self.checkpoint_path(t);
            if let Some(path) = &checkpoint {
                save_checkpoint(path, &model, state.as_ref())?;
            }
            let pseudo = pseudo_label_all(&model, self.train, self.specs, self.strategy, self.space, self.table)?;
            let report = evaluate(&model, self.eval, self.space, self.table, config.gamma)?;
            let quality = pseudo_quality_all(self.train, &pseudo, self.space)?;
            let next = if t < config.cycles {
                Some(fine_tune(&model, self.train, &pseudo, t, self.space, self.table, config)?)
            } else {
                None
            };
            history.records.push(CycleRecord {
                cycle: t,
                seen_miou: report.seen_miou,
                unseen_miou: report.unseen_miou,
                hm: report.hm,
                pseudo: quality,
                checkpoint,
                seconds: config.wall_clock.then(|| clock.elapsed().as_secs_f64()),
            });
            if let Some((m, s)) = next {
                model = m;
                state = Some(s);
            }
        }
        Ok((model, history))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate as generate_data, GeneratorConfig};

    fn tiny() -> crate::synthetic::Dataset {
        generate_data(&GeneratorConfig {
            height: 8,
            width: 8,
            train_size: 6,
            eval_size: 3,
            in_channels: 4,
            embed_dim: 4,
            n_seen: 3,
            n_unseen: 2,
            max_cosine: 0.95,
            ..Default::default()
        })
        .unwrap()
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            base_iters: 5,
            cycle_iters: 3,
            cycles: 2,
            batch_size: 2,
            lr: 1e-3,
            ..Default::default()
        }
    }

    #[test]
    fn zero_iterations_keep_the_initial_model() {
        let ds = tiny();
        let config = TrainConfig { base_iters: 0, ..quick() };
        let p0 = init_model(4, &ds.table, &config).unwrap();
        let mut p = p0.clone();
        train_base(&mut p, &ds.train, &ds.space, &ds.table, &config).unwrap();
        assert_eq!(p, p0);
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let ds = tiny();
        let mut p = init_model(4, &ds.table, &quick()).unwrap();
        assert!(train_base(&mut p, &[], &ds.space, &ds.table, &quick()).is_err());
    }

    #[test]
    fn history_has_one_row_per_cycle() {
        let ds = tiny();
        let config = quick();
        let mut p0 = init_model(4, &ds.table, &config).unwrap();
        train_base(&mut p0, &ds.train, &ds.space, &ds.table, &config).unwrap();
        let specs = crate::augmentation::parse_spec_list("mirror").unwrap();
        let run = SelfTraining {
            train: &ds.train,
            eval: &ds.eval,
            space: &ds.space,
            table: &ds.table,
            specs: &specs,
            strategy: Strategy::Strict,
            config: &config,
            checkpoint_dir: None,
        };
        let (model, history) = run.run(p0.clone()).unwrap();
        assert_eq!(history.records.len(), 3);
        assert_ne!(model, p0);
        let csv = history.to_csv();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().nth(2).unwrap().ends_with(','));

        let config0 = TrainConfig { cycles: 0, ..quick() };
        let run0 = SelfTraining { config: &config0, ..run };
        let (same, history) = run0.run(p0.clone()).unwrap();
        assert_eq!(same, p0);
        assert_eq!(history.records.len(), 1);
    }

    #[test]
    fn stale_pseudo_labels_are_refused() {
        let ds = tiny();
        let config = quick();
        let p0 = init_model(4, &ds.table, &config).unwrap();
        let specs = [AugmentationSpec::Identity];
        let pseudo = pseudo_label_all(&p0, &ds.train, &specs, Strategy::RawSt, &ds.space, &ds.table).unwrap();
        let mut other = p0.clone();
        other.layers_mut()[0].bias[0] += 1.0;
        assert!(fine_tune(&other, &ds.train, &pseudo, 0, &ds.space, &ds.table, &config).is_err());
    }

    #[test]
    fn config_keys() {
        let mut c = TrainConfig::default();
        assert!(c.set("hidden", "16,8").unwrap());
        assert_eq!(c.hidden, vec![16, 8]);
        assert!(c.set("hidden", "none").unwrap());
        assert!(c.hidden.is_empty());
        assert!(c.set("lambda", "x").is_err());
        assert!(!c.set("noise", "1").unwrap());
        c.window = 2;
        assert!(c.validate().is_err());
    }
}
