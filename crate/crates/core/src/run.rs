//! Run configuration, presets, manifests, checkpoints, and the train and
//! evaluate drivers behind the command line.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{run_proposal, IntegratorConfig, Proposal, Scheme};
use crate::energy::{GaussianMixtureTarget, GaussianSource, PathKind, PathSpec, Target};
use crate::error::{CtdsError, Result};
use crate::eval::{self, temperature_histogram, BetaHistogram, EvalConfig, MetricsReport, HISTOGRAM_BINS};
use crate::models::Models;
use crate::plot;
use crate::tempering::Tempering;
use crate::training::{AdamConfig, ArchConfig, Curriculum, EpochReport, OptimState, TrainConfig, Trainer};

pub const CHECKPOINT_FORMAT: u32 = 1;

/// The preset names, one per benchmark row.
pub const PRESETS: [&str; 7] = [
    "gmm40-baseline",
    "gmm40-nets-od",
    "gmm40-nets-od-jar",
    "gmm40-nets-ud",
    "gmm40-nets-ud-jar",
    "gmm40-ctds",
    "gmm40-ctds-jar",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetConfig {
    pub components: usize,
    pub dim: usize,
    pub box_half_width: f64,
    pub component_std: f64,
    pub mean_seed: u64,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            components: 40,
            dim: 2,
            box_half_width: 40.0,
            component_std: 0.25,
            mean_seed: 0,
        }
    }
}

impl TargetConfig {
    pub fn build(&self) -> Result<GaussianMixtureTarget> {
        let t = GaussianMixtureTarget::random(self.components, self.dim, self.box_half_width, self.component_std, self.mean_seed);
        t.validate()?;
        Ok(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceConfig {
    pub variance: f64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self { variance: 5.0 }
    }
}

/// Proposal coefficients; unset entries take the scheme's published value.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_x: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_x: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_xi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_xi: Option<f64>,
}

impl IntegratorSection {
    fn resolved(&self, scheme: Scheme) -> Self {
        let (gx, ex, gc, ec) = match scheme {
            Scheme::Baseline => (0.0, 0.0, 0.0, 0.0),
            Scheme::Overdamped => (0.0, 50.0, 0.0, 0.0),
            Scheme::Underdamped => (50.0, 2.0, 0.0, 0.0),
            Scheme::Ctds => (50.0, 2.0, 5.0, 2.0),
        };
        Self {
            dt: Some(self.dt.unwrap_or(0.002)),
            gamma_x: Some(self.gamma_x.unwrap_or(gx)),
            eps_x: Some(self.eps_x.unwrap_or(ex)),
            gamma_xi: Some(self.gamma_xi.unwrap_or(gc)),
            eps_xi: Some(self.eps_xi.unwrap_or(ec)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub particles: usize,
    pub iterations_per_epoch: usize,
    pub batch_size: usize,
    pub time_bins: usize,
    /// Epochs between checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            particles: 5000,
            iterations_per_epoch: 100,
            batch_size: 6250,
            time_bins: 50,
            checkpoint_every: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n: usize,
    pub trials: usize,
    pub dt: f64,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n: eval::EVAL_SAMPLES,
            trials: eval::EVAL_TRIALS,
            dt: eval::EVAL_DT,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// The published protocol.
    Full,
    /// 25000 iterations and 1000 particles.
    Reduced,
    /// Two short epochs with a small network.
    Smoke,
}

impl std::str::FromStr for Profile {
    type Err = CtdsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Profile::Full),
            "reduced" => Ok(Profile::Reduced),
            "smoke" => Ok(Profile::Smoke),
            _ => Err(CtdsError::InvalidConfig(format!("unknown profile {s:?} (full, reduced, smoke)"))),
        }
    }
}

/// Everything needed to reproduce a run. `name`, `scheme`, `path` and
/// `seed` are required; every other section defaults to the published
/// protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub scheme: Scheme,
    pub path: PathKind,
    pub seed: u64,
    #[serde(default)]
    pub reweight: bool,
    #[serde(default = "default_profile")]
    pub profile: Profile,
    #[serde(default)]
    pub target: TargetConfig,
    #[serde(default)]
    pub source: SourceConfig,
    #[serde(default)]
    pub integrator: IntegratorSection,
    #[serde(default)]
    pub tempering: Tempering,
    #[serde(default)]
    pub network: ArchConfig,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub curriculum: Curriculum,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_profile() -> Profile {
    Profile::Full
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (scheme, path, reweight) = match name {
            "gmm40-baseline" => (Scheme::Baseline, PathKind::Learned, false),
            "gmm40-nets-od" => (Scheme::Overdamped, PathKind::Learned, false),
            "gmm40-nets-od-jar" => (Scheme::Overdamped, PathKind::Learned, true),
            "gmm40-nets-ud" => (Scheme::Underdamped, PathKind::Learned, false),
            "gmm40-nets-ud-jar" => (Scheme::Underdamped, PathKind::Learned, true),
            "gmm40-ctds" => (Scheme::Ctds, PathKind::LearnedContinuum, false),
            "gmm40-ctds-jar" => (Scheme::Ctds, PathKind::LearnedContinuum, true),
            _ => {
                return Err(CtdsError::InvalidConfig(format!(
                    "unknown preset {name:?}; available: {}",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(Self {
            name: name.into(),
            scheme,
            path,
            seed: 0,
            reweight,
            profile: Profile::Full,
            target: TargetConfig::default(),
            source: SourceConfig::default(),
            integrator: IntegratorSection::default(),
            tempering: Tempering::default(),
            network: ArchConfig::default(),
            training: TrainingSection::default(),
            curriculum: Curriculum::default(),
            optimizer: AdamConfig::default(),
            eval: EvalSection::default(),
        }
        .resolved())
    }

    pub fn with_profile(mut self, profile: Profile) -> Self {
        self.profile = profile;
        match profile {
            Profile::Full => {}
            Profile::Reduced => {
                self.curriculum = Curriculum::default().scaled(0.2, 25_000);
                self.training.particles = 1000;
            }
            Profile::Smoke => {
                self.network = ArchConfig {
                    hidden_width: 32,
                    depth: 3,
                    x_features: Some(crate::nn::FourierSpec {
                        num_features: 16,
                        frequency_scale: 0.1,
                    }),
                    time_features: Some(crate::nn::FourierSpec {
                        num_features: 4,
                        frequency_scale: 5.0,
                    }),
                    temperature_features: Some(crate::nn::FourierSpec {
                        num_features: 4,
                        frequency_scale: 1.0,
                    }),
                };
                self.curriculum = Curriculum {
                    horizons: vec![0.1],
                    budgets: vec![5],
                    total_iterations: 10,
                };
                self.training = TrainingSection {
                    particles: 64,
                    iterations_per_epoch: 5,
                    batch_size: 256,
                    time_bins: 10,
                    checkpoint_every: 1,
                };
                self.eval.n = 256;
                self.eval.trials = 2;
            }
        }
        self
    }

    /// Parses TOML; missing required fields are reported by name.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CtdsError::InvalidConfig(e.message().to_string()))?;
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CtdsError::InvalidConfig(e.to_string()))
    }

    /// Fills scheme-dependent defaults so the manifest records every value.
    pub fn resolved(mut self) -> Self {
        self.integrator = self.integrator.resolved(self.scheme);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(CtdsError::InvalidConfig("name must not be empty".into()));
        }
        if (self.scheme == Scheme::Ctds) != self.path.is_continuum() {
            return Err(CtdsError::InvalidConfig(format!(
                "scheme {:?} needs a {} path, got {:?}",
                self.scheme,
                if self.scheme == Scheme::Ctds { "continuum" } else { "single-temperature" },
                self.path
            )));
        }
        if self.source.variance <= 0.0 {
            return Err(CtdsError::InvalidConfig("source variance must be positive".into()));
        }
        if self.eval.n == 0 || self.eval.trials == 0 {
            return Err(CtdsError::InvalidConfig("eval n and trials must be positive".into()));
        }
        if self.training.checkpoint_every == 0 {
            return Err(CtdsError::InvalidConfig("checkpoint_every must be positive".into()));
        }
        self.target.build()?;
        self.train_config()?.validate()
    }

    pub fn source(&self) -> GaussianSource {
        GaussianSource {
            dim: self.target.dim,
            variance: self.source.variance,
        }
    }

    pub fn target(&self) -> Result<Target> {
        Ok(Target::Mixture(self.target.build()?))
    }

    pub fn path_spec(&self) -> Result<PathSpec> {
        let schedule = self.path.is_continuum().then_some(self.tempering.schedule);
        PathSpec::new(self.path, self.source(), self.target()?, schedule)
    }

    pub fn integrator(&self) -> IntegratorConfig {
        let r = self.integrator.resolved(self.scheme);
        IntegratorConfig {
            scheme: self.scheme,
            dt: r.dt.expect("resolved"),
            horizon: 1.0,
            gamma_x: r.gamma_x.expect("resolved"),
            eps_x: r.eps_x.expect("resolved"),
            gamma_xi: r.gamma_xi.expect("resolved"),
            eps_xi: r.eps_xi.expect("resolved"),
            track_work: true,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            path: self.path_spec()?,
            tempering: self.tempering,
            integrator: self.integrator(),
            particles: self.training.particles,
            iterations_per_epoch: self.training.iterations_per_epoch,
            batch_size: self.training.batch_size,
            curriculum: self.curriculum.clone(),
            optimizer: self.optimizer,
            reweight: self.reweight,
            time_bins: self.training.time_bins,
            seed: self.seed,
        })
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            n: self.eval.n,
            trials: self.eval.trials,
            dt: self.eval.dt,
            seed: self.eval.seed,
        }
    }
}

/// SHA-256 of the crate version and the resolved configuration.
pub fn manifest_hash(cfg: &RunConfig) -> Result<String> {
    let resolved = cfg.clone().resolved();
    let mut h = Sha256::new();
    h.update(env!("CARGO_PKG_VERSION").as_bytes());
    h.update([0u8]);
    h.update(serde_json::to_vec(&resolved)?);
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub hash: String,
    pub code_version: String,
    pub config: RunConfig,
    pub train_seed: u64,
    pub eval_seed: u64,
}

impl Manifest {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let config = cfg.clone().resolved();
        Ok(Self {
            hash: manifest_hash(&config)?,
            code_version: env!("CARGO_PKG_VERSION").into(),
            train_seed: config.seed,
            eval_seed: config.eval.seed,
            config,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub manifest_hash: String,
    pub config: RunConfig,
    pub epoch: usize,
    pub iteration: usize,
    pub models: Models,
    pub optim: Option<OptimState>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    /// Loads and checks that the embedded configuration matches the hash.
    pub fn load(path: &Path) -> Result<Self> {
        let ck: Self = serde_json::from_slice(&fs::read(path)?)?;
        if ck.format_version != CHECKPOINT_FORMAT {
            return Err(CtdsError::Mismatch(format!("checkpoint format {} (expected {CHECKPOINT_FORMAT})", ck.format_version)));
        }
        if manifest_hash(&ck.config)? != ck.manifest_hash {
            return Err(CtdsError::Mismatch("checkpoint configuration does not match its manifest hash".into()));
        }
        Ok(ck)
    }

    /// Refuses a configuration other than the one the checkpoint was trained with.
    pub fn check_config(&self, cfg: &RunConfig) -> Result<()> {
        let h = manifest_hash(cfg)?;
        if h != self.manifest_hash {
            return Err(CtdsError::Mismatch(format!(
                "config hash {} does not match checkpoint manifest {}",
                &h[..12],
                &self.manifest_hash[..12]
            )));
        }
        Ok(())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Inverse temperatures at `t = 1` of a CTDS proposal driven by `models`.
pub fn final_temperature_histogram(cfg: &RunConfig, models: &Models, particles: usize, seed: u64) -> Result<BetaHistogram> {
    if cfg.scheme != Scheme::Ctds {
        return Err(CtdsError::InvalidConfig("temperature histograms need the ctds scheme".into()));
    }
    let path = cfg.path_spec()?;
    let mut icfg = cfg.integrator();
    icfg.track_work = false;
    let prop = Proposal::new(&path, models, &cfg.tempering, &icfg)?;
    let run = run_proposal(&prop, particles, seed, false)?;
    let xi = run.ensemble.xi.ok_or(CtdsError::MissingTemperature)?;
    let betas: Vec<f64> = xi.iter().map(|&z| cfg.tempering.schedule.beta(z).0).collect();
    temperature_histogram(&betas, cfg.tempering.schedule.beta_min, HISTOGRAM_BINS)
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub epochs: usize,
    pub iterations: usize,
    pub last: Option<EpochReport>,
}

/// Trains `cfg` into `dir`: manifest, JSON-lines log, periodic and final
/// checkpoints, and for CTDS the t = 1 temperature histograms before and
/// after training. A non-finite loss aborts after saving the last good state.
pub fn train_run(cfg: &RunConfig, dir: &Path, on_epoch: &mut dyn FnMut(&EpochReport)) -> Result<TrainOutcome> {
    let cfg = cfg.clone().resolved();
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    let manifest = Manifest::new(&cfg)?;
    write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)?;
    write_atomic(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;

    let tc = cfg.train_config()?;
    let models = cfg.network.build(&tc.path, cfg.seed)?;
    let hist_seed = cfg.seed.wrapping_add(0x5eed);
    if cfg.scheme == Scheme::Ctds {
        let h = final_temperature_histogram(&cfg, &models, cfg.training.particles, hist_seed)?;
        write_atomic(&dir.join("beta_hist_untrained.csv"), plot::histogram_csv(&h, &manifest.hash).as_bytes())?;
    }
    let mut trainer = Trainer::new(tc, models)?;
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let snapshot = |t: &Trainer| Checkpoint {
        format_version: CHECKPOINT_FORMAT,
        manifest_hash: manifest.hash.clone(),
        config: cfg.clone(),
        epoch: t.epoch,
        iteration: t.iteration,
        models: t.models.clone(),
        optim: Some(t.optim.clone()),
    };
    let mut log = fs::File::create(dir.join(LOG_FILE))?;
    let mut last = None;
    let mut good = snapshot(&trainer);
    while !trainer.finished() {
        match trainer.run_epoch() {
            Ok(rep) => {
                writeln!(log, "{}", serde_json::to_string(&rep)?)?;
                on_epoch(&rep);
                good = snapshot(&trainer);
                if trainer.epoch % cfg.training.checkpoint_every == 0 {
                    good.save(&ckpt_path)?;
                }
                last = Some(rep);
            }
            Err(e) => {
                good.save(&ckpt_path)?;
                return Err(e);
            }
        }
    }
    good.save(&ckpt_path)?;
    if cfg.scheme == Scheme::Ctds {
        let h = final_temperature_histogram(&cfg, &trainer.models, cfg.training.particles, hist_seed)?;
        write_atomic(&dir.join("beta_hist_trained.csv"), plot::histogram_csv(&h, &manifest.hash).as_bytes())?;
    }
    Ok(TrainOutcome {
        dir: dir.to_path_buf(),
        checkpoint: ckpt_path,
        epochs: trainer.epoch,
        iterations: trainer.iteration,
        last,
    })
}

/// Evaluates a checkpoint, writing `metrics.json`, `metrics.csv` and the
/// scatter CSVs into `dir`. A supplied config must match the checkpoint.
pub fn eval_run(checkpoint: &Path, config: Option<&RunConfig>, n: Option<usize>, trials: Option<usize>, dir: &Path) -> Result<MetricsReport> {
    let ck = Checkpoint::load(checkpoint)?;
    if let Some(c) = config {
        ck.check_config(c)?;
    }
    let cfg = &ck.config;
    let mut ecfg = cfg.eval_config();
    if let Some(n) = n {
        ecfg.n = n;
    }
    if let Some(t) = trials {
        ecfg.trials = t;
    }
    let source = cfg.source();
    let target = cfg.target()?;
    let report = eval::evaluate(&ck.models, &source, &target, &ecfg, &cfg.name, &ck.manifest_hash)?;
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join("metrics.json"), &serde_json::to_vec_pretty(&report)?)?;
    write_atomic(&dir.join("metrics.csv"), format!("{}\n{}\n", report.csv_header(), report.csv_row()).as_bytes())?;
    if cfg.target.dim == 2 {
        let samples = eval::generate(&ck.models, &source, ecfg.n, ecfg.dt, ecfg.seed)?;
        write_atomic(&dir.join("samples.csv"), plot::samples_csv(samples.x.view(), &ck.manifest_hash)?.as_bytes())?;
        let reference = target.sample(ecfg.n, ecfg.seed.wrapping_add(1));
        write_atomic(&dir.join("target_samples.csv"), plot::samples_csv(reference.view(), &ck.manifest_hash)?.as_bytes())?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_carry_the_published_defaults() {
        for name in PRESETS {
            let c = RunConfig::preset(name).unwrap();
            c.validate().unwrap();
            assert_eq!(c.train_config().unwrap().epochs(), 1250);
        }
        let c = RunConfig::preset("gmm40-ctds-jar").unwrap();
        let i = c.integrator();
        assert_eq!((i.gamma_x, i.eps_x, i.gamma_xi, i.eps_xi, i.dt), (50.0, 2.0, 5.0, 2.0, 0.002));
        assert!(c.reweight);
        assert_eq!(c.tempering.schedule.beta_min, 0.2);
        assert_eq!(c.network.hidden_width, 256);
        assert_eq!(c.training.batch_size, 6250);
        let od = RunConfig::preset("gmm40-nets-od").unwrap().integrator();
        assert_eq!(od.eps_x, 50.0);
        let ud = RunConfig::preset("gmm40-nets-ud").unwrap().integrator();
        assert_eq!((ud.gamma_x, ud.eps_x), (50.0, 2.0));
        assert!(RunConfig::preset("nope").is_err());
    }

    #[test]
    fn toml_round_trip_and_required_fields() {
        let c = RunConfig::preset("gmm40-nets-od-jar").unwrap().with_profile(Profile::Reduced);
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
        let minimal = "name = \"x\"\nscheme = \"ctds\"\npath = \"learned-continuum\"\nseed = 3\n";
        let m = RunConfig::from_toml(minimal).unwrap();
        assert_eq!(m.integrator().gamma_xi, 5.0);
        let missing = "name = \"x\"\nscheme = \"ctds\"\nseed = 3\n";
        let err = RunConfig::from_toml(missing).unwrap_err().to_string();
        assert!(err.contains("path"), "{err}");
        let typo = format!("{minimal}[training]\nparticels = 3\n");
        assert!(RunConfig::from_toml(&typo).is_err());
        let bad = "name = \"x\"\nscheme = \"ctds\"\npath = \"learned\"\nseed = 3\n";
        assert_eq!(RunConfig::from_toml(bad).unwrap_err().exit_code(), 1);
    }

    #[test]
    fn reduced_profile_matches_its_definition() {
        let c = RunConfig::preset("gmm40-ctds").unwrap().with_profile(Profile::Reduced);
        assert_eq!(c.curriculum.total_iterations, 25_000);
        assert_eq!(c.training.particles, 1000);
        c.validate().unwrap();
    }

    #[test]
    fn hash_changes_with_config() {
        let a = RunConfig::preset("gmm40-ctds").unwrap();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(manifest_hash(&a).unwrap(), manifest_hash(&b).unwrap());
        assert_eq!(manifest_hash(&a).unwrap(), manifest_hash(&a.clone()).unwrap());
    }
}
