//! Flat `key = value` run configuration.
//!
//! Every tunable of data generation, training, noise, evaluation and sweeps
//! has one dotted key. Files hold one assignment per line; `#` starts a
//! comment. Unknown or repeated keys are rejected. [`RunConfig::echo`]
//! writes every key, and parsing the echo gives back an equal config.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::datagen::DatasetSpec;
use crate::error::{Error, Result};
use crate::evalkit::ProbeConfig;
use crate::losses::Denominator;
use crate::perturb::NoiseMode;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Directory holding `manifest.csv`, relative to the output root unless
    /// absolute.
    pub dir: String,
    pub spec: DatasetSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: "data".into(),
            spec: DatasetSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub label_fractions: Vec<f64>,
    pub seed: u64,
    pub probe: ProbeConfig,
    /// Test images rendered by the export commands.
    pub export_count: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            label_fractions: vec![1.0, 0.5, 0.2],
            seed: 0,
            probe: ProbeConfig::default(),
            export_count: 16,
        }
    }
}

/// Sweep grid: the Cartesian product of the axes, each cell repeated
/// `replicates` times with its own derived seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    /// `(key, values)` in file order.
    pub axes: Vec<(String, Vec<String>)>,
    pub replicates: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            axes: Vec::new(),
            replicates: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Experiment directory, relative to the output root unless absolute.
    pub run_dir: String,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = DataConfig::default();
        let mut train = TrainConfig::default();
        train.model.image_size = data.spec.image_size;
        Self {
            run_dir: "run".into(),
            data,
            train,
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// A config value with a canonical text form.
trait Value: Sized {
    /// Whether the value may appear on a sweep axis.
    const SCALAR: bool = true;
    fn show(&self) -> String;
    fn parse(key: &str, s: &str) -> Result<Self>;
}

fn bad(key: &str, s: &str, expected: &str) -> Error {
    Error::Config(format!("{key}: cannot parse {s:?} as {expected}"))
}

macro_rules! from_str_value {
    ($($t:ty => $name:literal),*) => {$(
        impl Value for $t {
            fn show(&self) -> String {
                self.to_string()
            }
            fn parse(key: &str, s: &str) -> Result<Self> {
                s.parse().map_err(|_| bad(key, s, $name))
            }
        }
    )*};
}

from_str_value!(usize => "a non-negative integer", u64 => "a non-negative integer", f64 => "a number", bool => "true or false");

impl Value for String {
    const SCALAR: bool = false;
    fn show(&self) -> String {
        self.clone()
    }
    fn parse(key: &str, s: &str) -> Result<Self> {
        if s.is_empty() {
            return Err(Error::Config(format!("{key} must not be empty")));
        }
        Ok(s.to_string())
    }
}

impl Value for NoiseMode {
    fn show(&self) -> String {
        self.as_str().into()
    }
    fn parse(_: &str, s: &str) -> Result<Self> {
        NoiseMode::parse(s)
    }
}

impl Value for Denominator {
    fn show(&self) -> String {
        self.as_str().into()
    }
    fn parse(_: &str, s: &str) -> Result<Self> {
        Denominator::parse(s)
    }
}

fn split_list(s: &str) -> Vec<&str> {
    s.split(',').map(str::trim).collect()
}

impl Value for (f64, f64) {
    const SCALAR: bool = false;
    fn show(&self) -> String {
        format!("{}, {}", self.0, self.1)
    }
    fn parse(key: &str, s: &str) -> Result<Self> {
        match split_list(s)[..] {
            [a, b] => Ok((f64::parse(key, a)?, f64::parse(key, b)?)),
            _ => Err(bad(key, s, "two comma-separated numbers")),
        }
    }
}

impl<T: Value> Value for Vec<T> {
    const SCALAR: bool = false;
    fn show(&self) -> String {
        self.iter().map(Value::show).collect::<Vec<_>>().join(", ")
    }
    fn parse(key: &str, s: &str) -> Result<Self> {
        if s.trim().is_empty() {
            return Err(Error::Config(format!("{key} must list at least one value")));
        }
        split_list(s).into_iter().map(|v| T::parse(key, v)).collect()
    }
}

struct Field {
    key: &'static str,
    scalar: bool,
    get: fn(&RunConfig) -> String,
    set: fn(&mut RunConfig, &str) -> Result<()>,
}

fn scalar_of<T: Value>(_: fn(&RunConfig) -> &T) -> bool {
    T::SCALAR
}

macro_rules! field {
    ($key:literal, $($path:ident).+) => {
        Field {
            key: $key,
            scalar: scalar_of(|c: &RunConfig| &c.$($path).+),
            get: |c| Value::show(&c.$($path).+),
            set: |c, s| {
                c.$($path).+ = Value::parse($key, s)?;
                Ok(())
            },
        }
    };
}

fn fields() -> Vec<Field> {
    vec![
        field!("run.dir", run_dir),
        field!("data.dir", data.dir),
        field!("data.num_classes", data.spec.num_classes),
        field!("data.per_class", data.spec.per_class),
        Field {
            key: "data.image_size",
            scalar: true,
            get: |c| c.data.spec.image_size.show(),
            set: |c, s| {
                let v = usize::parse("data.image_size", s)?;
                c.data.spec.image_size = v;
                c.train.model.image_size = v;
                Ok(())
            },
        },
        field!("data.subtlety", data.spec.subtlety),
        field!("data.seed", data.spec.seed),
        field!("train.epochs", train.epochs),
        field!("train.batch_size", train.batch_size),
        field!("train.lr", train.lr),
        field!("train.momentum", train.momentum),
        field!("train.weight_decay", train.weight_decay),
        field!("train.key_momentum", train.key_momentum),
        field!("train.queue_capacity", train.queue_capacity),
        field!("train.bank_capacity", train.bank_capacity),
        field!("train.bn_groups", train.bn_groups),
        field!("train.seed", train.seed),
        field!("train.deterministic", train.deterministic),
        field!("train.checkpoint_every", train.checkpoint_every),
        field!("train.allow_untrained_decoder", train.allow_untrained_decoder),
        field!("decoder.lr", train.decoder_lr),
        field!("decoder.epochs", train.decoder_epochs),
        field!("decoder.batch_size", train.decoder_batch_size),
        field!("loss.alpha", train.weights.alpha),
        field!("loss.nu", train.weights.nu),
        field!("loss.tau", train.contrastive.tau),
        field!("loss.denominator", train.contrastive.denominator),
        field!("loss.normalize", train.contrastive.normalize),
        field!("noise.mode", train.noise.mode),
        field!("noise.eps_g", train.noise.eps_g),
        field!("noise.eps_var", train.noise.eps_var),
        field!("noise.kappa", train.noise.kappa),
        field!("model.encoder_channels", train.model.encoder_channels),
        field!("model.projector_hidden", train.model.projector_hidden),
        field!("model.projector_dim", train.model.projector_dim),
        field!("model.decoder_channels", train.model.decoder_channels),
        field!("augment.crop", train.augment.crop),
        field!("augment.crop_scale", train.augment.crop_scale),
        field!("augment.crop_ratio", train.augment.crop_ratio),
        field!("augment.flip", train.augment.flip),
        field!("augment.flip_p", train.augment.flip_p),
        field!("augment.jitter", train.augment.jitter),
        field!("augment.jitter_p", train.augment.jitter_p),
        field!("augment.brightness", train.augment.brightness),
        field!("augment.contrast", train.augment.contrast),
        field!("augment.saturation", train.augment.saturation),
        field!("augment.hue", train.augment.hue),
        field!("augment.grayscale", train.augment.grayscale),
        field!("augment.grayscale_p", train.augment.grayscale_p),
        field!("augment.blur", train.augment.blur),
        field!("augment.blur_p", train.augment.blur_p),
        field!("augment.blur_sigma", train.augment.blur_sigma),
        field!("eval.label_fractions", eval.label_fractions),
        field!("eval.seed", eval.seed),
        field!("eval.probe_lr", eval.probe.lr),
        field!("eval.probe_momentum", eval.probe.momentum),
        field!("eval.probe_epochs", eval.probe.epochs),
        field!("eval.probe_batch_size", eval.probe.batch_size),
        field!("eval.export_count", eval.export_count),
        field!("sweep.replicates", sweep.replicates),
    ]
}

const SWEEP_PREFIX: &str = "sweep.";

/// Split `key = value`, dropping `#` comments. Blank lines give `None`.
fn split_assignment(line: &str) -> Option<std::result::Result<(&str, &str), ()>> {
    let line = line.split('#').next().unwrap_or("").trim();
    if line.is_empty() {
        return None;
    }
    Some(match line.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim(), v.trim())),
        _ => Err(()),
    })
}

impl RunConfig {
    /// Every key in canonical order.
    pub fn keys() -> Vec<&'static str> {
        fields().iter().map(|f| f.key).collect()
    }

    /// Keys that may appear on a sweep axis.
    pub fn scalar_keys() -> Vec<&'static str> {
        fields().iter().filter(|f| f.scalar).map(|f| f.key).collect()
    }

    pub fn get(&self, key: &str) -> Option<String> {
        fields().iter().find(|f| f.key == key).map(|f| (f.get)(self))
    }

    /// Assign one key. `sweep.<key>` entries define sweep axes.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let table = fields();
        if let Some(f) = table.iter().find(|f| f.key == key) {
            return (f.set)(self, value);
        }
        if let Some(axis) = key.strip_prefix(SWEEP_PREFIX) {
            let Some(f) = table.iter().find(|f| f.key == axis) else {
                return Err(Error::Config(format!("sweep axis {axis:?} is not a config key")));
            };
            if !f.scalar {
                return Err(Error::Config(format!("sweep axis {axis:?} is not a scalar key")));
            }
            let values: Vec<String> = split_list(value).into_iter().map(String::from).collect();
            if values.iter().any(String::is_empty) {
                return Err(Error::Config(format!("{key}: empty value in {value:?}")));
            }
            let mut probe = self.clone();
            for v in &values {
                (f.set)(&mut probe, v)?;
            }
            match self.sweep.axes.iter_mut().find(|(k, _)| k == axis) {
                Some(slot) => slot.1 = values,
                None => self.sweep.axes.push((axis.to_string(), values)),
            }
            return Ok(());
        }
        Err(Error::Config(format!("unknown config key {key:?}")))
    }

    /// Apply the assignments of a config text on top of `self`.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let Some(parsed) = split_assignment(line) else { continue };
            let (key, value) = parsed
                .map_err(|()| Error::Config(format!("{origin}:{}: expected `key = value`", n + 1)))?;
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("{origin}:{}: duplicate key {key:?}", n + 1)));
            }
            self.set(key, value)
                .map_err(|e| Error::Config(format!("{origin}:{}: {}", n + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text, "<config>")?;
        Ok(cfg)
    }

    /// Defaults, then the file at `path` (if any), then `overrides` of the
    /// form `key=value`; the result is validated.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = path {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
            cfg.apply_text(&text, &path.display().to_string())?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not `key=value`")))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("override {o:?}: {}", strip_prefix(&e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.spec.validate()?;
        self.train.validate()?;
        if self.train.model.image_size != self.data.spec.image_size {
            return Err(Error::Config("model and data image sizes differ".into()));
        }
        if let Some(f) = self.eval.label_fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(Error::Config(format!("eval.label_fractions entry {f} outside (0, 1]")));
        }
        if self.eval.probe.epochs == 0 || self.eval.probe.batch_size == 0 {
            return Err(Error::Config("eval.probe_epochs and eval.probe_batch_size must be >= 1".into()));
        }
        if self.sweep.replicates == 0 {
            return Err(Error::Config("sweep.replicates must be >= 1".into()));
        }
        Ok(())
    }

    /// Canonical text listing every key, sweep axes last.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for f in fields() {
            let _ = writeln!(out, "{} = {}", f.key, (f.get)(self));
        }
        for (k, values) in &self.sweep.axes {
            let _ = writeln!(out, "{SWEEP_PREFIX}{k} = {}", values.join(", "));
        }
        out
    }

    /// Write the resolved snapshot to `path`.
    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        let text = format!("# resolved configuration\n{}", self.echo());
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Every grid cell as a list of `(key, value)` assignments, first axis
    /// slowest.
    pub fn sweep_cells(&self) -> Vec<Vec<(String, String)>> {
        let mut cells: Vec<Vec<(String, String)>> = vec![Vec::new()];
        for (key, values) in &self.sweep.axes {
            cells = cells
                .into_iter()
                .flat_map(|cell| {
                    values.iter().map(move |v| {
                        let mut c = cell.clone();
                        c.push((key.clone(), v.clone()));
                        c
                    })
                })
                .collect();
        }
        cells
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_echo_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.echo()).unwrap(), cfg);
    }

    #[test]
    fn every_key_has_a_distinct_line_in_the_echo() {
        let echo = RunConfig::default().echo();
        let keys = RunConfig::keys();
        assert_eq!(echo.lines().count(), keys.len());
        let unique: std::collections::HashSet<_> = keys.iter().collect();
        assert_eq!(unique.len(), keys.len());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = RunConfig::parse("# header\n\ntrain.epochs = 3  # short run\n  loss.nu=0.25\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.weights.nu, 0.25);
    }

    #[test]
    fn unknown_key_is_rejected_with_line_number() {
        let err = RunConfig::parse("train.epochs = 3\ntrain.epoch = 4\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":2:") && msg.contains("train.epoch"), "{msg}");
    }

    #[test]
    fn duplicate_and_malformed_lines_are_rejected() {
        assert!(RunConfig::parse("train.epochs = 3\ntrain.epochs = 4\n").is_err());
        assert!(RunConfig::parse("just words\n").is_err());
        assert!(RunConfig::parse("train.epochs = three\n").is_err());
        assert!(RunConfig::parse("noise.mode = loud\n").is_err());
        assert!(RunConfig::parse("augment.crop_scale = 0.2\n").is_err());
    }

    #[test]
    fn image_size_drives_model_and_data() {
        let cfg = RunConfig::parse("data.image_size = 32\n").unwrap();
        assert_eq!(cfg.train.model.image_size, 32);
        assert_eq!(cfg.data.spec.image_size, 32);
    }

    #[test]
    fn overrides_beat_file_which_beats_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(&path, "train.epochs = 7\ntrain.lr = 0.5\n").unwrap();
        let cfg = RunConfig::resolve(Some(&path), &["train.lr=0.125".into()]).unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.lr, 0.125);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        let snap = RunConfig::parse(&cfg.echo()).unwrap();
        assert_eq!(snap, cfg);
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = RunConfig::resolve(Some(Path::new("/nonexistent/run.conf")), &[]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("/nonexistent/run.conf"));
    }

    #[test]
    fn validation_runs_after_overrides() {
        let err = RunConfig::resolve(None, &["train.batch_size=512".into()]).unwrap_err();
        assert!(err.to_string().contains("batch_size"), "{err}");
    }

    #[test]
    fn sweep_axes_form_a_cartesian_product() {
        let cfg = RunConfig::parse("sweep.loss.nu = 0, 0.1, 0.5, 1.0\nsweep.noise.mode = both, none\n").unwrap();
        let cells = cfg.sweep_cells();
        assert_eq!(cells.len(), 8);
        assert_eq!(cells[0], vec![("loss.nu".into(), "0".into()), ("noise.mode".into(), "both".into())]);
        assert_eq!(cells[7], vec![("loss.nu".into(), "1.0".into()), ("noise.mode".into(), "none".into())]);
        assert_eq!(RunConfig::parse(&cfg.echo()).unwrap(), cfg);
    }

    #[test]
    fn sweep_axes_must_be_scalar_keys_with_valid_values() {
        assert!(RunConfig::parse("sweep.bogus = 1, 2\n").is_err());
        assert!(RunConfig::parse("sweep.model.encoder_channels = 1, 2\n").is_err());
        assert!(RunConfig::parse("sweep.loss.nu = 0, x\n").is_err());
        assert!(RunConfig::parse("sweep.loss.nu = 0,, 1\n").is_err());
    }

    #[test]
    fn no_sweep_axes_give_one_cell() {
        assert_eq!(RunConfig::default().sweep_cells(), vec![Vec::new()]);
    }

    fn arb_config() -> impl Strategy<Value = RunConfig> {
        (
            1usize..100,
            -1e6f64..1e6,
            any::<u64>(),
            any::<bool>(),
            prop::sample::select(NoiseMode::ALL.to_vec()),
            prop::collection::vec(1usize..300, 1..5),
            (0.0f64..1.0, 0.0f64..1.0),
            prop::collection::vec(1e-3f64..1.0, 1..4),
        )
            .prop_map(|(epochs, lr, seed, det, mode, chans, scale, fracs)| {
                let mut c = RunConfig::default();
                c.train.epochs = epochs;
                c.train.lr = lr;
                c.train.seed = seed;
                c.train.deterministic = det;
                c.train.noise.mode = mode;
                c.train.model.encoder_channels = chans;
                c.train.augment.crop_scale = scale;
                c.eval.label_fractions = fracs;
                c
            })
    }

    proptest! {
        #[test]
        fn echo_parse_is_lossless(cfg in arb_config()) {
            prop_assert_eq!(RunConfig::parse(&cfg.echo()).unwrap(), cfg);
        }
    }
}
