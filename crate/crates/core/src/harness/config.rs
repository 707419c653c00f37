//! TOML experiment configuration.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{ShiftKind, ShiftParams, SplitSpec};
use crate::error::{Error, Result};
use crate::inference::{MfviConfig, Preconditioner, Schedule, SghmcConfig, TrainConfig};
use crate::nn::{Activation, NetworkSpec, PriorSpec};
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SetMethod {
    Cred,
    Thr,
    Aps,
}

impl SetMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            SetMethod::Cred => "cred",
            SetMethod::Thr => "thr",
            SetMethod::Aps => "aps",
        }
    }
}

impl std::fmt::Display for SetMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SetMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cred" => Ok(SetMethod::Cred),
            "thr" => Ok(SetMethod::Thr),
            "aps" => Ok(SetMethod::Aps),
            other => Err(Error::Config(format!("unknown set method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodKind {
    Map,
    Ensemble,
    Mfvi,
    Sghmc,
    Laplace,
}

impl MethodKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MethodKind::Map => "map",
            MethodKind::Ensemble => "ensemble",
            MethodKind::Mfvi => "mfvi",
            MethodKind::Sghmc => "sghmc",
            MethodKind::Laplace => "laplace",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "d_classes")]
    pub num_classes: usize,
    #[serde(default = "d_dim")]
    pub dim: usize,
    #[serde(default = "d_n")]
    pub n: usize,
    #[serde(default = "d_sep")]
    pub class_sep: f64,
    #[serde(default = "d_std")]
    pub within_std: f64,
}

fn d_classes() -> usize {
    6
}
fn d_dim() -> usize {
    4
}
fn d_n() -> usize {
    6000
}
fn d_sep() -> f64 {
    3.5
}
fn d_std() -> f64 {
    1.0
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_classes: d_classes(),
            dim: d_dim(),
            n: d_n(),
            class_sep: d_sep(),
            within_std: d_std(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub cal: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 0.5,
            val: 0.1,
            cal: 0.2,
            test: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftConfig {
    #[serde(default = "d_kinds")]
    pub kinds: Vec<ShiftKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translate_step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotate_degrees: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_step: Option<f64>,
}

fn d_kinds() -> Vec<ShiftKind> {
    vec![ShiftKind::GaussianNoise]
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            kinds: d_kinds(),
            translate_step: None,
            rotate_degrees: None,
            noise_step: None,
            scale_step: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(default = "d_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "d_activation")]
    pub activation: Activation,
}

fn d_hidden() -> Vec<usize> {
    vec![32, 32]
}
fn d_activation() -> Activation {
    Activation::Relu
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden: d_hidden(),
            activation: d_activation(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleName {
    Constant,
    Cosine,
    Cyclical,
}

/// Optimiser settings shared by every method unless overridden.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainDefaults {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_step")]
    pub step_size: f64,
    #[serde(default = "d_momentum")]
    pub momentum_decay: f64,
    #[serde(default = "d_prior")]
    pub prior_precision: f64,
    #[serde(default = "d_schedule")]
    pub schedule: ScheduleName,
    #[serde(default = "d_cycle")]
    pub cycle_epochs: usize,
    #[serde(default = "d_ckpt")]
    pub checkpoint_epochs: usize,
}

fn d_epochs() -> usize {
    40
}
fn d_batch() -> usize {
    64
}
fn d_step() -> f64 {
    5e-5
}
fn d_momentum() -> f64 {
    0.9
}
fn d_prior() -> f64 {
    1.0
}
fn d_schedule() -> ScheduleName {
    ScheduleName::Cosine
}
fn d_cycle() -> usize {
    10
}
fn d_ckpt() -> usize {
    5
}

impl Default for TrainDefaults {
    fn default() -> Self {
        Self {
            epochs: d_epochs(),
            batch_size: d_batch(),
            step_size: d_step(),
            momentum_decay: d_momentum(),
            prior_precision: d_prior(),
            schedule: d_schedule(),
            cycle_epochs: d_cycle(),
            checkpoint_epochs: d_ckpt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "d_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default = "d_sets")]
    pub set_methods: Vec<SetMethod>,
    #[serde(default = "d_eval_seeds")]
    pub eval_seeds: Vec<u64>,
    #[serde(default = "d_n_cal")]
    pub n_cal: usize,
    /// Weight draws for the mean-field predictive.
    #[serde(default = "d_pred_samples")]
    pub predictive_samples: usize,
}

fn d_alphas() -> Vec<f64> {
    vec![0.05, 0.01]
}
fn d_sets() -> Vec<SetMethod> {
    vec![SetMethod::Cred, SetMethod::Thr, SetMethod::Aps]
}
fn d_eval_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}
fn d_n_cal() -> usize {
    500
}
fn d_pred_samples() -> usize {
    30
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            alphas: d_alphas(),
            set_methods: d_sets(),
            eval_seeds: d_eval_seeds(),
            n_cal: d_n_cal(),
            predictive_samples: d_pred_samples(),
        }
    }
}

/// One inference method. Unset optimiser fields fall back to `[train]`;
/// unset method-specific fields get their documented defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub name: String,
    pub kind: MethodKind,
    /// Divides the predictive logits (> 1 softens, < 1 sharpens).
    #[serde(default = "d_temperature")]
    pub temperature: f64,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub momentum_decay: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_precision: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleName>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cycle_epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_epochs: Option<usize>,

    /// ensemble
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub members: Option<usize>,
    /// mfvi
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_train_samples: Option<usize>,
    /// sghmc
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burnin_epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thin_epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub friction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rmsprop: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rmsprop_decay: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rmsprop_eps: Option<f64>,
}

fn d_temperature() -> f64 {
    1.0
}

impl MethodConfig {
    pub fn new(name: impl Into<String>, kind: MethodKind) -> Self {
        Self {
            name: name.into(),
            kind,
            temperature: 1.0,
            epochs: None,
            batch_size: None,
            step_size: None,
            momentum_decay: None,
            prior_precision: None,
            schedule: None,
            cycle_epochs: None,
            checkpoint_epochs: None,
            members: None,
            init_sigma: None,
            n_train_samples: None,
            burnin_epochs: None,
            thin_epochs: None,
            friction: None,
            rmsprop: None,
            rmsprop_decay: None,
            rmsprop_eps: None,
        }
    }

    /// Identity of the underlying network training: everything except name
    /// and temperature, with Laplace mapped onto its MAP fit.
    pub(crate) fn training_key(&self) -> String {
        let mut c = self.clone();
        c.name.clear();
        c.temperature = 1.0;
        if c.kind == MethodKind::Laplace {
            // the Laplace fit starts from the MAP solution with the same settings
            c.kind = MethodKind::Map;
        }
        serde_json::to_string(&c).expect("plain data")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Base seed for data generation, splitting and training.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_out")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub shift: ShiftConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainDefaults,
    #[serde(default)]
    pub experiment: GridConfig,
    #[serde(default)]
    pub methods: Vec<MethodConfig>,
}

fn d_out() -> PathBuf {
    PathBuf::from("out")
}

/// Default Adam step for mean-field training.
pub const MFVI_STEP_SIZE: f64 = 0.01;

const TAG_DATA: u64 = 0xDA7A;
const TAG_SPLIT: u64 = 0x5917;
const TAG_TRAIN: u64 = 0x7EA1;

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| e.context(path.display().to_string()))
    }

    /// The configuration with every method default filled in, as TOML.
    pub fn resolved_toml(&self) -> Result<String> {
        let mut c = self.clone();
        for (i, m) in c.methods.clone().iter().enumerate() {
            c.methods[i] = self.resolve_method(m);
        }
        let p = self.shift_params();
        c.shift.translate_step = Some(p.translate_step);
        c.shift.rotate_degrees = Some(p.rotate_degrees);
        c.shift.noise_step = Some(p.noise_step);
        c.shift.scale_step = Some(p.scale_step);
        toml::to_string(&c).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the resolved TOML with `output_dir` cleared, hex encoded,
    /// so the same experiment hashes equally wherever it is written.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let digest = Sha256::digest(c.resolved_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.experiment;
        if self.methods.is_empty() {
            return Err(Error::Config("at least one [[methods]] entry is required".into()));
        }
        if g.alphas.is_empty() || g.set_methods.is_empty() || g.eval_seeds.is_empty() {
            return Err(Error::Config(
                "alphas, set_methods and eval_seeds must be non-empty".into(),
            ));
        }
        if let Some(a) = g.alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(Error::Config(format!("alpha must lie in (0,1), got {a}")));
        }
        if g.n_cal < 1 || g.predictive_samples < 1 {
            return Err(Error::Config("n_cal and predictive_samples must be >= 1".into()));
        }
        if has_duplicates(g.set_methods.iter().map(|s| s.as_str().to_string()))
            || has_duplicates(g.alphas.iter().map(|a| a.to_bits().to_string()))
            || has_duplicates(g.eval_seeds.iter().map(|s| s.to_string()))
        {
            return Err(Error::Config("duplicate alpha, set method or eval seed".into()));
        }
        if self.shift.kinds.contains(&ShiftKind::None)
            || has_duplicates(self.shift.kinds.iter().map(|k| k.as_str().to_string()))
        {
            return Err(Error::Config("shift kinds must be distinct and not 'none'".into()));
        }
        if has_duplicates(self.methods.iter().map(|m| m.name.clone())) {
            return Err(Error::Config("method names must be unique".into()));
        }
        if self
            .methods
            .iter()
            .any(|m| m.name.is_empty() || m.name.contains([',', '"', '\n']))
        {
            return Err(Error::Config(
                "method names must be non-empty without commas or quotes".into(),
            ));
        }
        if self.data.dim < 2 || self.data.num_classes < 2 {
            return Err(Error::Config("data needs dim >= 2 and num_classes >= 2".into()));
        }
        if !(self.data.within_std >= 0.0 && self.data.class_sep >= 0.0) {
            return Err(Error::Config("class_sep and within_std must be >= 0".into()));
        }
        self.split_spec().validate().map_err(|e| e.context("[split]"))?;
        self.network_spec()?;
        for m in &self.methods {
            let m = self.resolve_method(m);
            if !(m.prior_precision.is_some_and(|p| p > 0.0 && p.is_finite())) {
                return Err(Error::Config(format!("method {}: prior_precision must be > 0", m.name)));
            }
            if !(m.temperature > 0.0 && m.temperature.is_finite()) {
                return Err(Error::Config(format!("method {}: temperature must be > 0", m.name)));
            }
            self.method_train_config(&m)
                .validate()
                .map_err(|e| e.context(format!("method {}", m.name)))?;
            match m.kind {
                MethodKind::Ensemble if m.members == Some(0) => {
                    return Err(Error::Config(format!("method {}: members must be >= 1", m.name)))
                }
                MethodKind::Mfvi => {
                    let mc = self.mfvi_config(&m);
                    if !(mc.init_sigma > 0.0) || mc.n_train_samples < 1 {
                        return Err(Error::Config(format!(
                            "method {}: init_sigma > 0 and n_train_samples >= 1 required",
                            m.name
                        )));
                    }
                }
                MethodKind::Sghmc => self
                    .sghmc_config(&m)
                    .validate()
                    .map_err(|e| e.context(format!("method {}", m.name)))?,
                _ => {}
            }
        }
        Ok(())
    }

    pub fn network_spec(&self) -> Result<NetworkSpec> {
        let mut widths = vec![self.data.dim];
        widths.extend(&self.network.hidden);
        widths.push(self.data.num_classes);
        NetworkSpec::new(widths, self.network.activation).map_err(|e| e.context("[network]"))
    }

    pub fn data_seed(&self) -> u64 {
        derive_seed(self.seed, &[TAG_DATA])
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train: self.split.train,
            val: self.split.val,
            cal: self.split.cal,
            test: self.split.test,
            seed: derive_seed(self.seed, &[TAG_SPLIT]),
        }
    }

    pub fn shift_params(&self) -> ShiftParams {
        let d = ShiftParams::for_within_std(self.data.within_std);
        ShiftParams {
            translate_step: self.shift.translate_step.unwrap_or(d.translate_step),
            rotate_degrees: self.shift.rotate_degrees.unwrap_or(d.rotate_degrees),
            noise_step: self.shift.noise_step.unwrap_or(d.noise_step),
            scale_step: self.shift.scale_step.unwrap_or(d.scale_step),
        }
    }

    /// Fills every unset field relevant to the method's kind. Mean-field methods
    /// default to their own Adam step rather than `[train].step_size`.
    pub fn resolve_method(&self, m: &MethodConfig) -> MethodConfig {
        let t = &self.train;
        let mut r = m.clone();
        let sghmc = m.kind == MethodKind::Sghmc;
        r.batch_size.get_or_insert(t.batch_size);
        r.step_size.get_or_insert(if m.kind == MethodKind::Mfvi {
            MFVI_STEP_SIZE
        } else {
            t.step_size
        });
        r.momentum_decay.get_or_insert(t.momentum_decay);
        r.prior_precision.get_or_insert(t.prior_precision);
        r.schedule
            .get_or_insert(if sghmc { ScheduleName::Constant } else { t.schedule });
        if r.schedule == Some(ScheduleName::Cyclical) {
            r.cycle_epochs.get_or_insert(t.cycle_epochs);
        }
        if !sghmc {
            r.epochs.get_or_insert(t.epochs);
            r.checkpoint_epochs.get_or_insert(t.checkpoint_epochs);
        }
        match m.kind {
            MethodKind::Ensemble => {
                r.members.get_or_insert(5);
            }
            MethodKind::Mfvi => {
                let d = MfviConfig::default();
                r.init_sigma.get_or_insert(d.init_sigma);
                r.n_train_samples.get_or_insert(d.n_train_samples);
            }
            MethodKind::Sghmc => {
                let burnin = *r.burnin_epochs.get_or_insert(t.epochs);
                let thin = *r.thin_epochs.get_or_insert(1);
                r.epochs.get_or_insert(burnin + 100 * thin);
                r.friction.get_or_insert(1.0 - r.momentum_decay.expect("set above"));
                if *r.rmsprop.get_or_insert(false) {
                    r.rmsprop_decay.get_or_insert(0.99);
                    r.rmsprop_eps.get_or_insert(1e-8);
                }
            }
            MethodKind::Map | MethodKind::Laplace => {}
        }
        r
    }

    /// Training seed of a method kind; Laplace shares the MAP seed.
    pub fn train_seed(&self, kind: MethodKind) -> u64 {
        let tag = match kind {
            MethodKind::Map | MethodKind::Laplace => 1,
            MethodKind::Ensemble => 2,
            MethodKind::Mfvi => 3,
            MethodKind::Sghmc => 4,
        };
        derive_seed(self.seed, &[TAG_TRAIN, tag])
    }

    /// `m` must already be resolved.
    pub fn method_train_config(&self, m: &MethodConfig) -> TrainConfig {
        let schedule = match m.schedule.unwrap_or(self.train.schedule) {
            ScheduleName::Constant => Schedule::Constant,
            ScheduleName::Cosine => Schedule::Cosine,
            ScheduleName::Cyclical => Schedule::Cyclical {
                cycle_epochs: m.cycle_epochs.unwrap_or(self.train.cycle_epochs),
            },
        };
        TrainConfig {
            epochs: m.epochs.unwrap_or(self.train.epochs),
            batch_size: m.batch_size.unwrap_or(self.train.batch_size),
            step_size: m.step_size.unwrap_or(self.train.step_size),
            momentum_decay: m.momentum_decay.unwrap_or(self.train.momentum_decay),
            seed: self.train_seed(m.kind),
            // validated separately; an invalid value surfaces as a config error
            prior: PriorSpec::new(m.prior_precision.unwrap_or(self.train.prior_precision)).unwrap_or(PriorSpec::flat()),
            schedule,
            checkpoint_epochs: m.checkpoint_epochs.unwrap_or(self.train.checkpoint_epochs),
        }
    }

    pub fn mfvi_config(&self, m: &MethodConfig) -> MfviConfig {
        let d = MfviConfig::default();
        MfviConfig {
            init_sigma: m.init_sigma.unwrap_or(d.init_sigma),
            n_train_samples: m.n_train_samples.unwrap_or(d.n_train_samples),
            val_predictive_samples: self.experiment.predictive_samples,
        }
    }

    pub fn sghmc_config(&self, m: &MethodConfig) -> SghmcConfig {
        let m = self.resolve_method(m);
        let preconditioner = if m.rmsprop == Some(true) {
            Preconditioner::Rmsprop {
                decay: m.rmsprop_decay.unwrap_or(0.99),
                eps: m.rmsprop_eps.unwrap_or(1e-8),
            }
        } else {
            Preconditioner::None
        };
        SghmcConfig {
            train: self.method_train_config(&m),
            burnin_epochs: m.burnin_epochs.unwrap_or(0),
            thin_epochs: m.thin_epochs.unwrap_or(1),
            friction: m.friction.unwrap_or(0.1),
            preconditioner,
        }
    }
}

fn has_duplicates(items: impl Iterator<Item = String>) -> bool {
    let mut seen = BTreeSet::new();
    items.into_iter().any(|s| !seen.insert(s))
}
