//! Command-line front end.
//!
//! Settings come from a flat `key=value` file (`--config <path>`, `#` starts
//! a comment) and `--key value` overrides, which win over the file. Unknown
//! keys are errors. Exit codes: 0 success, 1 configuration, 2 I/O or file
//! format, 3 numeric or shape failure.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augmentation::{format_spec_list, parse_spec_list, AugmentationSpec};
use crate::error::{Error, Result};
use crate::label_space::{BackgroundMode, LabelSpace};
use crate::metrics::GzlssReport;
use crate::model::{load_checkpoint, save_checkpoint, BackboneParams};
use crate::pseudo_labeler::Strategy;
use crate::self_training::{
    evaluate, init_model, pseudo_label_all, pseudo_quality_all, train_base, CycleHistory, SelfTraining, TrainConfig,
};
use crate::synthetic::{
    generate, load_dataset, save_dataset, Dataset, GeneratorConfig, LoadOptions, Sample,
};

const RUN_KEYS: &[&str] = &["augs", "strategy", "data", "out", "name", "checkpoint", "workers"];

/// Every setting a subcommand may read.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    /// Augmentation list; the identity is always first.
    pub specs: Vec<AugmentationSpec>,
    pub strategy: Strategy,
    /// Dataset directory.
    pub data: PathBuf,
    /// Root for run outputs; results go to `<out>/<name>`.
    pub out: PathBuf,
    pub name: String,
    pub checkpoint: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            train: TrainConfig::default(),
            specs: parse_spec_list("mirror,scale=3/2").expect("valid default"),
            strategy: Strategy::Strict,
            data: PathBuf::from("data"),
            out: PathBuf::from("run"),
            name: "default".into(),
            checkpoint: None,
            workers: 0,
            explicit: BTreeSet::new(),
        }
    }
}

impl RunConfig {
    /// All accepted keys, sorted.
    pub fn keys() -> Vec<&'static str> {
        let mut keys: BTreeSet<&str> = RUN_KEYS.iter().copied().collect();
        keys.extend(GeneratorConfig::KEYS);
        keys.extend(TrainConfig::KEYS);
        keys.into_iter().collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let value = value.trim();
        let run_key = match key {
            "augs" => {
                self.specs = parse_spec_list(value)?;
                true
            }
            "strategy" => {
                self.strategy = value.parse()?;
                true
            }
            "data" => {
                self.data = PathBuf::from(value);
                true
            }
            "out" => {
                self.out = PathBuf::from(value);
                true
            }
            "name" => {
                if value.is_empty() || value.contains(['/', '\\']) {
                    return Err(Error::Config(format!("bad run name `{value}`")));
                }
                self.name = value.to_string();
                true
            }
            "checkpoint" => {
                self.checkpoint = Some(PathBuf::from(value));
                true
            }
            "workers" => {
                self.workers = crate::synthetic::parse_value(key, value)?;
                true
            }
            _ => false,
        };
        // `seed` belongs to both the generator and the trainer
        let generator_key = self.generator.set(key, value)?;
        let train_key = self.train.set(key, value)?;
        if !(run_key || generator_key || train_key) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    /// Applies a `key=value` file.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected key=value", origin.display(), lineno + 1))
            })?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("{}:{}: {e}", origin.display(), lineno + 1)))?;
        }
        Ok(())
    }

    /// Builds a config from `--config <path>` and `--key value` arguments;
    /// the file is applied first wherever `--config` appears.
    pub fn from_args(args: &[String]) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut file = None;
        let mut it = args.iter();
        while let Some(arg) = it.next() {
            let key = arg
                .strip_prefix("--")
                .ok_or_else(|| Error::Config(format!("expected `--key value`, got `{arg}`")))?;
            let (key, value) = match key.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => {
                    let v = it
                        .next()
                        .ok_or_else(|| Error::Config(format!("`--{key}` needs a value")))?;
                    (key.to_string(), v.clone())
                }
            };
            let key = key.replace('-', "_");
            if key == "config" {
                file = Some(PathBuf::from(value));
            } else {
                pairs.push((key, value));
            }
        }
        let mut config = Self::default();
        if let Some(path) = file {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            config.apply_text(&text, &path)?;
        }
        for (k, v) in pairs {
            config.set(&k, &v)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.train.validate()?;
        self.strategy.validate()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out.join(&self.name)
    }
}

#[derive(Parser, Debug)]
#[command(name = "zlss", version, about = "Zero-label segmentation self-training lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Settings {
    /// `--config <path>` and `--<key> <value>` overrides, e.g. `--seed 7`
    #[arg(
        trailing_var_arg = true,
        allow_hyphen_values = true,
        value_name = "--KEY VALUE"
    )]
    settings: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset into `data` (or `--out`)
    GenData(Settings),
    /// Train on seen labels; writes <out>/<name>/base.ckpt
    TrainBase(Settings),
    /// Pseudo-label the training set with `checkpoint`
    Pseudo(Settings),
    /// Base training followed by self-training cycles
    Selftrain(Settings),
    /// Evaluate `checkpoint` on the evaluation split
    Eval(Settings),
    /// Self-training under each augmentation setting
    AblateAugs(Settings),
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_model(path: &Path, dataset: &Dataset) -> Result<BackboneParams> {
    let params = load_checkpoint(path)?.params;
    if params.in_channels() != dataset.config.in_channels || params.output_dim() != dataset.table.dim() {
        return Err(Error::Shape(format!(
            "checkpoint {} does not fit the dataset's channels or embedding size",
            path.display()
        )));
    }
    Ok(params)
}

fn checkpoint_arg(config: &RunConfig) -> Result<&Path> {
    config
        .checkpoint
        .as_deref()
        .ok_or_else(|| Error::Config("`checkpoint` is required".into()))
}

/// Output lines of one subcommand.
pub type Output = Vec<String>;

fn cmd_gen_data(config: &RunConfig) -> Result<Output> {
    let dir = if config.is_explicit("out") { &config.out } else { &config.data };
    let dataset = generate(&config.generator)?;
    save_dataset(&dataset, dir)?;
    Ok(vec![format!(
        "wrote {} training and {} evaluation images to {}",
        dataset.train.len(),
        dataset.eval.len(),
        dir.display()
    )])
}

fn base_model(config: &RunConfig, dataset: &Dataset) -> Result<BackboneParams> {
    let mut params = init_model(dataset.config.in_channels, &dataset.table, &config.train)?;
    train_base(&mut params, &dataset.train, &dataset.space, &dataset.table, &config.train)?;
    Ok(params)
}

fn cmd_train_base(config: &RunConfig) -> Result<Output> {
    let dataset = load_dataset(&config.data, LoadOptions::default())?;
    let params = base_model(config, &dataset)?;
    let dir = config.run_dir();
    ensure_dir(&dir)?;
    let path = dir.join("base.ckpt");
    save_checkpoint(&path, &params, None)?;
    let report = evaluate(&params, &dataset.eval, &dataset.space, &dataset.table, config.train.gamma)?;
    Ok(vec![format!("wrote {}", path.display()), report.summary()])
}

fn cmd_pseudo(config: &RunConfig) -> Result<Output> {
    let dataset = load_dataset(&config.data, LoadOptions { train_hidden_gt: true })?;
    let params = load_model(checkpoint_arg(config)?, &dataset)?;
    let pseudo = pseudo_label_all(
        &params,
        &dataset.train,
        &config.specs,
        config.strategy,
        &dataset.space,
        &dataset.table,
    )?;
    let dir = config.run_dir().join("pseudo");
    ensure_dir(&dir)?;
    for (s, p) in dataset.train.iter().zip(&pseudo) {
        crate::synthetic::save_pgm(&dir.join(format!("img_{}.pseudo.pgm", s.index)), &p.mask)?;
    }
    let mut out = vec![format!(
        "wrote {} pseudo-masks to {} ({})",
        pseudo.len(),
        dir.display(),
        pseudo.first().map(|p| p.provenance.to_string()).unwrap_or_default()
    )];
    if let Some(q) = pseudo_quality_all(&dataset.train, &pseudo, &dataset.space)? {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.4}", x));
        out.push(format!(
            "precision={} recall={} coverage={}",
            f(q.precision),
            f(q.recall),
            f(q.coverage)
        ));
    }
    Ok(out)
}

/// Runs base training (or loads `checkpoint`) and then every cycle.
fn self_train(
    config: &RunConfig,
    dataset: &Dataset,
    base: &BackboneParams,
    specs: &[AugmentationSpec],
    checkpoint_dir: Option<&Path>,
) -> Result<CycleHistory> {
    let run = SelfTraining {
        train: &dataset.train,
        eval: &dataset.eval,
        space: &dataset.space,
        table: &dataset.table,
        specs,
        strategy: config.strategy,
        config: &config.train,
        checkpoint_dir,
    };
    Ok(run.run(base.clone())?.1)
}

fn summary_line(history: &CycleHistory) -> String {
    let r = history.last().expect("history has the base row");
    format!("S={:.1} U={:.1} HM={:.1}", r.seen_miou, r.unseen_miou, r.hm)
}

fn cmd_selftrain(config: &RunConfig) -> Result<Output> {
    // Hidden ground truth of training images only feeds pseudo-label quality.
    let dataset = load_dataset(&config.data, LoadOptions { train_hidden_gt: true })?;
    let base = match &config.checkpoint {
        Some(path) => load_model(path, &dataset)?,
        None => base_model(config, &dataset)?,
    };
    let dir = config.run_dir();
    ensure_dir(&dir)?;
    let history = self_train(config, &dataset, &base, &config.specs, Some(&dir))?;
    let path = dir.join("history.csv");
    history.save(&path)?;
    Ok(vec![format!("wrote {}", path.display()), summary_line(&history)])
}

/// Evaluation label space for `--background`: dropping a seen background
/// class excludes its pixels from scoring.
fn eval_view(config: &RunConfig, dataset: &Dataset) -> Result<(LabelSpace, Vec<Sample>)> {
    let space = &dataset.space;
    if !config.is_explicit("background") {
        return Ok((space.clone(), dataset.eval.clone()));
    }
    match (config.generator.background_seen, space.background()) {
        (true, BackgroundMode::SeenClass(_)) | (false, BackgroundMode::Ignored) => {
            Ok((space.clone(), dataset.eval.clone()))
        }
        (false, BackgroundMode::SeenClass(bg)) => {
            let seen = space.seen().iter().copied().filter(|&c| c != bg).collect();
            let view = LabelSpace::new(seen, space.unseen().to_vec(), BackgroundMode::Ignored)?;
            let mut eval = dataset.eval.clone();
            for s in &mut eval {
                if let Some(gt) = &mut s.hidden_gt {
                    gt.as_mut_slice().iter_mut().filter(|v| **v == bg).for_each(|v| *v = 0);
                }
            }
            Ok((view, eval))
        }
        (true, BackgroundMode::Ignored) => Err(Error::Config(
            "the dataset has no background labels to evaluate".into(),
        )),
    }
}

fn eval_report(config: &RunConfig, dataset: &Dataset, params: &BackboneParams) -> Result<GzlssReport> {
    let (space, eval) = eval_view(config, dataset)?;
    if space == dataset.space {
        return evaluate(params, &eval, &space, &dataset.table, config.train.gamma);
    }
    // Predictions still range over every class; only scoring changes.
    let mut cm = crate::metrics::ConfusionMatrix::for_space(&dataset.space);
    for s in &eval {
        let pred = crate::model::infer_gzs(&s.image, params, &dataset.table, &dataset.space, config.train.gamma)?;
        cm.accumulate(&pred, s.hidden_gt.as_ref().expect("evaluation images carry ground truth"))?;
    }
    GzlssReport::from_confusion(&cm, &space)
}

fn cmd_eval(config: &RunConfig) -> Result<Output> {
    let path = checkpoint_arg(config)?;
    let dataset = load_dataset(&config.data, LoadOptions::default())?;
    let params = load_model(path, &dataset)?;
    let report = eval_report(config, &dataset, &params)?;
    let dir = config.run_dir();
    ensure_dir(&dir)?;
    let csv = dir.join("report.csv");
    report.save_csv(&csv)?;
    Ok(vec![format!("wrote {}", csv.display()), report.summary()])
}

/// The augmentation settings of the ablation, identity excluded.
pub fn ablation_settings(seed: u64) -> Result<Vec<(&'static str, Vec<AugmentationSpec>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let random: Vec<AugmentationSpec> = (0..2).map(|_| AugmentationSpec::random_scale(&mut rng)).collect();
    let down = vec![AugmentationSpec::scale(1, 2)?, AugmentationSpec::scale(3, 4)?];
    let up = vec![AugmentationSpec::scale(3, 2)?, AugmentationSpec::scale(2, 1)?];
    let with_mirror = |v: &[AugmentationSpec]| {
        let mut out = vec![AugmentationSpec::MirrorHorizontal];
        out.extend_from_slice(v);
        out
    };
    Ok(vec![
        ("none", vec![]),
        ("mirror", vec![AugmentationSpec::MirrorHorizontal]),
        ("down", down.clone()),
        ("up", up.clone()),
        ("random", random.clone()),
        ("mirror+down", with_mirror(&down)),
        ("mirror+up", with_mirror(&up)),
        ("mirror+random", with_mirror(&random)),
    ])
}

fn cmd_ablate_augs(config: &RunConfig) -> Result<Output> {
    let dataset = load_dataset(&config.data, LoadOptions { train_hidden_gt: true })?;
    let base = match &config.checkpoint {
        Some(path) => load_model(path, &dataset)?,
        None => base_model(config, &dataset)?,
    };
    let mut csv = String::from("# zlss-ablation v1\nsetting,augs,S,U,HM\n");
    let mut out = Vec::new();
    for (name, extra) in ablation_settings(config.train.seed)? {
        let mut specs = vec![AugmentationSpec::Identity];
        specs.extend(extra);
        let history = self_train(config, &dataset, &base, &specs, None)?;
        let r = history.last().expect("history has the base row");
        let _ = writeln!(
            csv,
            "{name},{},{:.1},{:.1},{:.1}",
            format_spec_list(&specs).replace(',', " "),
            r.seen_miou,
            r.unseen_miou,
            r.hm
        );
        out.push(format!("{name}: {}", summary_line(&history)));
    }
    let dir = config.run_dir();
    ensure_dir(&dir)?;
    let path = dir.join("ablation.csv");
    write_text(&path, &csv)?;
    out.push(format!("wrote {}", path.display()));
    Ok(out)
}

fn dispatch(command: &Command) -> Result<Output> {
    let (settings, run): (&Settings, fn(&RunConfig) -> Result<Output>) = match command {
        Command::GenData(s) => (s, cmd_gen_data),
        Command::TrainBase(s) => (s, cmd_train_base),
        Command::Pseudo(s) => (s, cmd_pseudo),
        Command::Selftrain(s) => (s, cmd_selftrain),
        Command::Eval(s) => (s, cmd_eval),
        Command::AblateAugs(s) => (s, cmd_ablate_augs),
    };
    let config = RunConfig::from_args(&settings.settings)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", config.workers)))?;
    pool.install(|| run(&config))
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(&cli.command) {
        Ok(lines) => {
            for line in lines {
                println!("{line}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overrides_beat_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "# comment\nseed = 3\nnoise=0.25 # trailing\n").unwrap();
        let p = path.to_str().unwrap();
        let c = RunConfig::from_args(&args(&["--seed", "7", "--config", p])).unwrap();
        assert_eq!(c.generator.seed, 7);
        assert_eq!(c.train.seed, 7);
        assert_eq!(c.generator.noise, 0.25);
        let c = RunConfig::from_args(&args(&["--config", p, "--cycle-iters=9"])).unwrap();
        assert_eq!(c.generator.seed, 3);
        assert_eq!(c.train.cycle_iters, 9);
    }

    #[test]
    fn unknown_keys_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "seed=1\nlearning_rate=3\n").unwrap();
        let err = RunConfig::from_args(&args(&["--config", path.to_str().unwrap()])).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        assert_eq!(err.exit_code(), 1);
        let err = RunConfig::from_args(&args(&["--colour", "red"])).unwrap_err();
        assert!(err.to_string().contains("colour"));
        assert!(RunConfig::from_args(&args(&["seed", "1"])).is_err());
        assert!(RunConfig::from_args(&args(&["--seed"])).is_err());
    }

    #[test]
    fn key_schema_is_consistent() {
        let mut c = RunConfig::default();
        for (k, v) in c.generator.pairs() {
            c.set(k, &v).unwrap();
        }
        assert_eq!(c.generator, GeneratorConfig::default());
        assert!(RunConfig::keys().contains(&"strategy"));
        c.set("strategy", "topp:30").unwrap();
        assert_eq!(c.strategy, Strategy::TopP(30.0));
        assert!(c.set("name", "a/b").is_err());
    }

    #[test]
    fn ablation_has_eight_settings() {
        let settings = ablation_settings(0).unwrap();
        let names: Vec<_> = settings.iter().map(|s| s.0).collect();
        assert_eq!(
            names,
            ["none", "mirror", "down", "up", "random", "mirror+down", "mirror+up", "mirror+random"]
        );
        assert!(settings[0].1.is_empty());
        assert_eq!(ablation_settings(0).unwrap(), settings);
    }
}
