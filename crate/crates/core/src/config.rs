//! Flat `key = value` run configuration with dotted section names.
//!
//! ```text
//! # comments and blank lines are ignored
//! model.dstt.alpha = 0.25
//! model.stages = 128,128,128
//! train.lr0 = 0.05
//! ```
//!
//! Every key of [`ModelConfig`] and [`TrainConfig`] is addressable; a few
//! short aliases (`model.alpha`, `model.gamma`, ...) reach into
//! `model.dstt`. Unknown keys and unparsable values are errors. Overrides
//! are applied after the file, so they win.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::skeleton::Modality;
use crate::tensor::DType;
use crate::topology::TopologyMode;
use crate::train::TrainConfig;

/// Config name that resolves to the built-in defaults.
pub const DEFAULT_CONFIG: &str = "default";

fn canonical(key: &str) -> &str {
    match key {
        "model.alpha" => "model.dstt.alpha",
        "model.gamma" => "model.dstt.gamma",
        "model.c_e" => "model.dstt.c_e",
        "model.s_heads" => "model.dstt.s_heads",
        "model.t_heads" => "model.dstt.t_heads",
        "model.joint_type" => "model.dstt.joint_type",
        "model.frame_order" => "model.dstt.frame_order",
        other => other,
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("`{key}`: cannot parse `{value}` as {}", std::any::type_name::<T>())))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Sets one key on the pair of configs.
pub fn apply_key(model: &mut ModelConfig, train: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    let value = value.trim();
    let key = canonical(key.trim());
    let d = &mut model.dstt;
    match key {
        "model.stages" => model.stages = parse_list(key, value)?,
        "model.stgc_blocks" => model.stgc_blocks = parse(key, value)?,
        "model.topology" => model.topology = value.parse::<TopologyMode>()?,
        "model.freeze_epochs" => model.freeze_epochs = parse(key, value)?,
        "model.dilations" => {
            let v: Vec<usize> = parse_list(key, value)?;
            model.dilations = v
                .try_into()
                .map_err(|_| Error::config(format!("`{key}` takes exactly two dilations, got `{value}`")))?;
        }
        "model.num_classes" => model.num_classes = parse(key, value)?,
        "model.v" => model.v = parse(key, value)?,
        "model.c_in" => model.c_in = parse(key, value)?,
        "model.head_dropout" => model.head_dropout = parse(key, value)?,
        "model.dstt.c_e" => d.c_e = parse(key, value)?,
        "model.dstt.alpha" => d.alpha = parse_fraction(key, value)?,
        "model.dstt.s_heads" => d.s_heads = parse(key, value)?,
        "model.dstt.t_heads" => d.t_heads = parse(key, value)?,
        "model.dstt.gamma" => d.gamma = parse(key, value)?,
        "model.dstt.attn_drop" => d.attn_drop = parse(key, value)?,
        "model.dstt.ff_drop" => d.ff_drop = parse(key, value)?,
        "model.dstt.joint_type" => d.use_joint_type = parse_bool(key, value)?,
        "model.dstt.frame_order" => d.use_frame_order = parse_bool(key, value)?,
        "train.lr0" => train.lr0 = parse(key, value)?,
        "train.momentum" => train.momentum = parse(key, value)?,
        "train.weight_decay" => train.weight_decay = parse(key, value)?,
        "train.epochs" => train.epochs = parse(key, value)?,
        "train.milestones" => train.milestones = parse_list(key, value)?,
        "train.decay" => train.decay = parse(key, value)?,
        "train.warmup_epochs" => train.warmup_epochs = parse(key, value)?,
        "train.label_smoothing" => train.label_smoothing = parse(key, value)?,
        "train.batch_size" => train.batch_size = parse(key, value)?,
        "train.seed" => train.seed = parse(key, value)?,
        "train.dtype" => train.dtype = value.parse::<DType>()?,
        "train.frames" => train.frames = parse(key, value)?,
        "train.modality" => train.modality = value.parse::<Modality>()?,
        "train.target_accuracy" => {
            train.target_accuracy = if value == "none" { None } else { Some(parse(key, value)?) }
        }
        _ => return Err(Error::config(format!("unknown config key `{key}`"))),
    }
    Ok(())
}

/// Accepts decimals and simple fractions such as `1/4`.
fn parse_fraction(key: &str, value: &str) -> Result<f64> {
    match value.split_once('/') {
        Some((n, d)) => {
            let (n, d): (f64, f64) = (parse(key, n.trim())?, parse(key, d.trim())?);
            if d == 0.0 {
                return Err(Error::config(format!("`{key}`: zero denominator in `{value}`")));
            }
            Ok(n / d)
        }
        None => parse(key, value),
    }
}

/// Splits `key=value` text into pairs, keeping line numbers for errors.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
        let k = canonical(k.trim()).to_string();
        if pairs.iter().any(|(seen, _)| *seen == k) {
            return Err(Error::config(format!("line {}: `{k}` is set twice", i + 1)));
        }
        pairs.push((k, v.trim().to_string()));
    }
    Ok(pairs)
}

/// Resolves defaults, then `text`, then `overrides`, and validates the result.
///
/// Head counts that were never set explicitly follow the stream widths: they
/// drop to the largest divisor of the width not above the default. Explicit
/// head counts are taken as given and must divide.
pub fn resolve(text: &str, overrides: &[(String, String)]) -> Result<(ModelConfig, TrainConfig)> {
    let mut model = ModelConfig::default();
    let mut train = TrainConfig::default();
    let pairs = parse_pairs(text)?;
    let mut explicit = (false, false);
    for (k, v) in pairs.iter().chain(overrides) {
        apply_key(&mut model, &mut train, k, v)?;
        match canonical(k.trim()) {
            "model.dstt.s_heads" => explicit.0 = true,
            "model.dstt.t_heads" => explicit.1 = true,
            _ => {}
        }
    }
    let defaults = crate::dstt::DsttConfig::default();
    let d = &mut model.dstt;
    let wanted = (
        if explicit.0 { d.s_heads } else { defaults.s_heads },
        if explicit.1 { d.t_heads } else { defaults.t_heads },
    );
    let (s_set, t_set) = (d.s_heads, d.t_heads);
    d.fit_heads(wanted.0, wanted.1);
    if explicit.0 {
        d.s_heads = s_set;
    }
    if explicit.1 {
        d.t_heads = t_set;
    }
    model.validate()?;
    train.validate()?;
    Ok((model, train))
}

/// Loads a config file, the name `default`, or a prior run's manifest.
pub fn load_config(path: &str, overrides: &[(String, String)]) -> Result<(ModelConfig, TrainConfig)> {
    if path == DEFAULT_CONFIG {
        return resolve("", overrides);
    }
    let p = Path::new(path);
    let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
    if p.extension().is_some_and(|e| e == "json") {
        let manifest: RunManifest = serde_json::from_str(&text)?;
        return resolve(&manifest.resolved_config, overrides);
    }
    resolve(&text, overrides)
}

/// Every key with its resolved value; `resolve(emit(..))` is the identity.
pub fn emit(model: &ModelConfig, train: &TrainConfig) -> String {
    let d = &model.dstt;
    let mut lines = vec![
        format!("model.stages = {}", join(&model.stages)),
        format!("model.stgc_blocks = {}", model.stgc_blocks),
        format!("model.topology = {}", model.topology.name()),
        format!("model.freeze_epochs = {}", model.freeze_epochs),
        format!("model.dilations = {}", join(&model.dilations)),
        format!("model.num_classes = {}", model.num_classes),
        format!("model.v = {}", model.v),
        format!("model.c_in = {}", model.c_in),
        format!("model.head_dropout = {:?}", model.head_dropout),
        format!("model.dstt.c_e = {}", d.c_e),
        format!("model.dstt.alpha = {:?}", d.alpha),
        format!("model.dstt.s_heads = {}", d.s_heads),
        format!("model.dstt.t_heads = {}", d.t_heads),
        format!("model.dstt.gamma = {}", d.gamma),
        format!("model.dstt.attn_drop = {:?}", d.attn_drop),
        format!("model.dstt.ff_drop = {:?}", d.ff_drop),
        format!("model.dstt.joint_type = {}", d.use_joint_type),
        format!("model.dstt.frame_order = {}", d.use_frame_order),
        format!("train.lr0 = {:?}", train.lr0),
        format!("train.momentum = {:?}", train.momentum),
        format!("train.weight_decay = {:?}", train.weight_decay),
        format!("train.epochs = {}", train.epochs),
        format!("train.milestones = {}", join(&train.milestones)),
        format!("train.decay = {:?}", train.decay),
        format!("train.warmup_epochs = {}", train.warmup_epochs),
        format!("train.label_smoothing = {:?}", train.label_smoothing),
        format!("train.batch_size = {}", train.batch_size),
        format!("train.seed = {}", train.seed),
        format!("train.dtype = {}", train.dtype),
        format!("train.frames = {}", train.frames),
        format!("train.modality = {}", train.modality),
    ];
    lines.push(match train.target_accuracy {
        Some(a) => format!("train.target_accuracy = {a:?}"),
        None => "train.target_accuracy = none".to_string(),
    });
    lines.join("\n") + "\n"
}

/// File written next to every run's outputs.
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

/// Everything needed to repeat a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// `emit` of the two configs, reloadable through [`load_config`].
    pub resolved_config: String,
    pub data: Vec<PathBuf>,
    pub out_dir: PathBuf,
}

impl RunManifest {
    pub fn new(command: &str, model: &ModelConfig, train: &TrainConfig, data: Vec<PathBuf>, out_dir: &Path) -> Self {
        RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: train.seed,
            model: model.clone(),
            train: train.clone(),
            resolved_config: emit(model, train),
            data,
            out_dir: out_dir.to_path_buf(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RUN_MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(k: &str, v: &str) -> (String, String) {
        (k.to_string(), v.to_string())
    }

    #[test]
    fn empty_text_gives_defaults() {
        let (m, t) = resolve("", &[]).unwrap();
        assert_eq!(m, ModelConfig::default());
        assert_eq!(t, TrainConfig::default());
        assert_eq!((m.dstt.c_e, m.dstt.s_heads, m.dstt.t_heads, m.dstt.gamma), (128, 6, 8, 3));
    }

    #[test]
    fn alpha_override_sets_the_temporal_width() {
        let (m, _) = resolve("model.alpha = 0.25\n", &[ov("model.alpha", "0.5")]).unwrap();
        assert_eq!(m.dstt.c_t(), 64);
        // six spatial heads do not divide 64, so the default follows the width
        assert_eq!((m.dstt.s_heads, m.dstt.t_heads), (4, 8));
        assert!(resolve("model.alpha = 0.5\nmodel.dstt.s_heads = 6", &[]).is_err());
        let (m, _) = resolve("model.dstt.alpha = 1/8", &[]).unwrap();
        assert_eq!(m.dstt.c_t(), 16);
    }

    #[test]
    fn indivisible_heads_are_rejected() {
        let err = resolve("model.dstt.s_heads = 5", &[]).unwrap_err();
        assert!(err.to_string().contains("s_heads"), "{err}");
    }

    #[test]
    fn unknown_keys_and_bad_values_name_the_key() {
        let err = resolve("model.colour = red", &[]).unwrap_err();
        assert!(err.to_string().contains("model.colour"), "{err}");
        let err = resolve("train.epochs = many", &[]).unwrap_err();
        assert!(err.to_string().contains("train.epochs"), "{err}");
        assert!(resolve("train.epochs 3", &[]).is_err());
        assert!(resolve("train.seed = 1\ntrain.seed = 2", &[]).is_err());
    }

    #[test]
    fn emitted_config_round_trips() {
        let text = "model.stages = 32,32,32\nmodel.dstt.c_e = 32\nmodel.dstt.s_heads = 3\nmodel.dstt.t_heads = 2\n\
                    model.topology = fixed\ntrain.lr0 = 0.1\ntrain.target_accuracy = 0.95\ntrain.modality = bone-motion\n";
        let (m, t) = resolve(text, &[]).unwrap();
        let again = resolve(&emit(&m, &t), &[]).unwrap();
        assert_eq!(again, (m, t));
        let d = resolve(&emit(&ModelConfig::default(), &TrainConfig::default()), &[]).unwrap();
        assert_eq!(d, (ModelConfig::default(), TrainConfig::default()));
    }
}
