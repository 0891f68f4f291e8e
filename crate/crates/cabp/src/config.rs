//! Run configuration files: line-based `[section]` / `key = value` format
//! with `#` comments. Unknown sections or keys are hard errors; every key has
//! a default, so an empty file is a valid configuration.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::data::{DatasetKind, Normalization, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::resnet::Arch;
use crate::model::CompressionPolicy;
use crate::ops::SavePolicy;
use crate::scalar::Dtype;
use crate::train::TrainConfig;

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub arch: Arch,
    pub classes: usize,
    pub input_channels: usize,
    /// Defaults to the architecture's native resolution.
    pub resolution: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct CompressionConfig {
    /// `None` disables compression (baseline run).
    pub kernel: Option<(usize, usize)>,
    pub exempt: Vec<String>,
    pub overrides: Vec<(String, (usize, usize))>,
}

#[derive(Debug, Clone)]
pub struct DataConfig {
    pub kind: DatasetKind,
    pub path: Option<PathBuf>,
    /// 0 keeps every sample.
    pub limit: usize,
    pub mean: Option<Vec<f64>>,
    pub std: Option<Vec<f64>>,
    pub synthetic: SyntheticSpec,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dtype: Dtype,
    pub compression: CompressionConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig {
                arch: Arch::ResNet8Cifar,
                classes: 10,
                input_channels: 3,
                resolution: None,
            },
            train: TrainConfig::default(),
            dtype: Dtype::F32,
            compression: CompressionConfig {
                kernel: None,
                exempt: vec!["conv1".to_string()],
                overrides: Vec::new(),
            },
            data: DataConfig {
                kind: DatasetKind::Synthetic,
                path: None,
                limit: 0,
                mean: None,
                std: None,
                synthetic: SyntheticSpec::default(),
            },
        }
    }
}

/// `KxK` or `KhxKw`, e.g. `2x2` or `1x4`; `off` means no compression.
pub fn parse_kernel_flag(s: &str) -> Result<Option<(usize, usize)>> {
    if s == "off" || s == "full" {
        return Ok(None);
    }
    parse_kernel(s).map(Some)
}

pub fn parse_kernel(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s
        .split_once('x')
        .ok_or_else(|| Error::Config(format!("bad pooling kernel '{s}', expected KxK")))?;
    let kh: usize = a.trim().parse().map_err(|_| Error::Config(format!("bad pooling kernel '{s}'")))?;
    let kw: usize = b.trim().parse().map_err(|_| Error::Config(format!("bad pooling kernel '{s}'")))?;
    if kh == 0 || kw == 0 {
        return Err(Error::Config(format!("pooling kernel '{s}' must be at least 1x1")));
    }
    Ok((kh, kw))
}

fn parse_resolution(s: &str) -> Result<(usize, usize)> {
    parse_kernel(s).map_err(|_| Error::Config(format!("bad resolution '{s}', expected HxW")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("key '{key}' expects a boolean, got '{v}'"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("key '{key}' has invalid value '{v}'")))
}

fn parse_float_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(|p| p.trim().parse().map_err(|_| Error::Config(format!("key '{key}' has invalid value '{v}'"))))
        .collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                if !matches!(section.as_str(), "model" | "train" | "compression" | "data") {
                    return Err(Error::Config(format!(
                        "line {}: unknown section [{section}]",
                        lineno + 1
                    )));
                }
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value", lineno + 1)));
            };
            let key = key.trim();
            let value = value.trim();
            config
                .apply(&section, key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(config)
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        match (section, key) {
            ("model", "arch") => self.model.arch = Arch::parse(value)?,
            ("model", "classes") => self.model.classes = parse_num(key, value)?,
            ("model", "input_channels") => self.model.input_channels = parse_num(key, value)?,
            ("model", "resolution") => self.model.resolution = Some(parse_resolution(value)?),
            ("train", "batch") => self.train.batch_size = parse_num(key, value)?,
            ("train", "epochs") => self.train.epochs = parse_num(key, value)?,
            ("train", "lr") => self.train.base_lr = parse_num(key, value)?,
            ("train", "momentum") => self.train.momentum = parse_num(key, value)?,
            ("train", "lr_decay") => self.train.lr_decay = parse_num(key, value)?,
            ("train", "lr_interval") => self.train.lr_interval = parse_num(key, value)?,
            ("train", "seed") => self.train.seed = parse_num(key, value)?,
            ("train", "fixed_order") => self.train.fixed_order = parse_bool(key, value)?,
            ("train", "augment") => self.train.augment = parse_bool(key, value)?,
            ("train", "log_interval") => self.train.log_interval = parse_num(key, value)?,
            ("train", "dtype") => {
                self.dtype = match value {
                    "f32" => Dtype::F32,
                    "f64" => Dtype::F64,
                    _ => return Err(Error::Config(format!("dtype must be f32 or f64, got '{value}'"))),
                }
            }
            ("compression", "kernel") => self.compression.kernel = parse_kernel_flag(value)?,
            ("compression", "exempt") => {
                self.compression.exempt =
                    value.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
            }
            ("compression", "overrides") => {
                let mut overrides = Vec::new();
                for part in value.split(',').filter(|s| !s.trim().is_empty()) {
                    let (layer, k) = part.split_once('=').ok_or_else(|| {
                        Error::Config(format!("override '{part}' must be layer=KxK"))
                    })?;
                    overrides.push((layer.trim().to_string(), parse_kernel(k.trim())?));
                }
                self.compression.overrides = overrides;
            }
            ("data", "kind") => self.data.kind = DatasetKind::parse(value)?,
            ("data", "path") => self.data.path = Some(PathBuf::from(value)),
            ("data", "limit") => self.data.limit = parse_num(key, value)?,
            ("data", "mean") => self.data.mean = Some(parse_float_list(key, value)?),
            ("data", "std") => self.data.std = Some(parse_float_list(key, value)?),
            ("data", "synthetic_samples") => self.data.synthetic.samples = parse_num(key, value)?,
            ("data", "synthetic_classes") => self.data.synthetic.classes = parse_num(key, value)?,
            ("data", "synthetic_seed") => self.data.synthetic.seed = parse_num(key, value)?,
            ("data", "synthetic_signal") => self.data.synthetic.signal = parse_num(key, value)?,
            ("data", "synthetic_noise") => self.data.synthetic.noise = parse_num(key, value)?,
            ("data", "synthetic_texture") => self.data.synthetic.texture = parse_num(key, value)?,
            ("data", "synthetic_detail") => self.data.synthetic.detail = parse_num(key, value)?,
            ("", _) => return Err(Error::Config(format!("key '{key}' outside any section"))),
            _ => return Err(Error::Config(format!("unknown key '{key}' in section [{section}]"))),
        }
        Ok(())
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.model.resolution.unwrap_or_else(|| self.model.arch.default_input_hw())
    }

    pub fn policy(&self) -> CompressionPolicy {
        let default = match self.compression.kernel {
            Some(k) => SavePolicy::Pooled(k),
            None => SavePolicy::Full,
        };
        CompressionPolicy {
            default,
            exempt_patterns: self.compression.exempt.clone(),
            overrides: self
                .compression
                .overrides
                .iter()
                .map(|(n, k)| (n.clone(), SavePolicy::Pooled(*k)))
                .collect(),
        }
    }

    pub fn normalization(&self, channels: usize) -> Result<Normalization> {
        let default = match self.data.kind {
            DatasetKind::Cifar10 => Normalization::cifar10(),
            DatasetKind::Mnist => Normalization { mean: vec![0.1307], std: vec![0.3081] },
            DatasetKind::Synthetic => Normalization { mean: vec![0.5; channels], std: vec![0.25; channels] },
        };
        let mut norm = default;
        if let Some(mean) = &self.data.mean {
            norm.mean = mean.clone();
        }
        if let Some(std) = &self.data.std {
            norm.std = std.clone();
        }
        if norm.mean.len() != channels || norm.std.len() != channels {
            return Err(Error::Config(format!(
                "normalization constants have {} entries for {channels} channels",
                norm.mean.len()
            )));
        }
        Ok(norm)
    }

    /// Canonical echo of the resolved configuration, including defaults and
    /// any flag overrides already applied.
    pub fn to_effective_string(&self) -> String {
        let mut s = String::new();
        let (rh, rw) = self.resolution();
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "arch = {}", self.model.arch.name());
        let _ = writeln!(s, "classes = {}", self.model.classes);
        let _ = writeln!(s, "input_channels = {}", self.model.input_channels);
        let _ = writeln!(s, "resolution = {rh}x{rw}");
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "batch = {}", self.train.batch_size);
        let _ = writeln!(s, "epochs = {}", self.train.epochs);
        let _ = writeln!(s, "lr = {}", self.train.base_lr);
        let _ = writeln!(s, "momentum = {}", self.train.momentum);
        let _ = writeln!(s, "lr_decay = {}", self.train.lr_decay);
        let _ = writeln!(s, "lr_interval = {}", self.train.lr_interval);
        let _ = writeln!(s, "seed = {}", self.train.seed);
        let _ = writeln!(s, "fixed_order = {}", self.train.fixed_order);
        let _ = writeln!(s, "augment = {}", self.train.augment);
        let _ = writeln!(s, "log_interval = {}", self.train.log_interval);
        let _ = writeln!(s, "dtype = {}", if self.dtype == Dtype::F32 { "f32" } else { "f64" });
        let _ = writeln!(s, "\n[compression]");
        let _ = writeln!(
            s,
            "kernel = {}",
            match self.compression.kernel {
                Some((kh, kw)) => format!("{kh}x{kw}"),
                None => "off".to_string(),
            }
        );
        let _ = writeln!(s, "exempt = {}", self.compression.exempt.join(","));
        let _ = writeln!(
            s,
            "overrides = {}",
            self.compression
                .overrides
                .iter()
                .map(|(n, (kh, kw))| format!("{n}={kh}x{kw}"))
                .collect::<Vec<_>>()
                .join(",")
        );
        let _ = writeln!(s, "\n[data]");
        let _ = writeln!(
            s,
            "kind = {}",
            match self.data.kind {
                DatasetKind::Cifar10 => "cifar10",
                DatasetKind::Mnist => "mnist",
                DatasetKind::Synthetic => "synthetic",
            }
        );
        if let Some(p) = &self.data.path {
            let _ = writeln!(s, "path = {}", p.display());
        }
        let _ = writeln!(s, "limit = {}", self.data.limit);
        let _ = writeln!(s, "synthetic_samples = {}", self.data.synthetic.samples);
        let _ = writeln!(s, "synthetic_classes = {}", self.data.synthetic.classes);
        let _ = writeln!(s, "synthetic_seed = {}", self.data.synthetic.seed);
        let _ = writeln!(s, "synthetic_signal = {}", self.data.synthetic.signal);
        let _ = writeln!(s, "synthetic_noise = {}", self.data.synthetic.noise);
        let _ = writeln!(s, "synthetic_texture = {}", self.data.synthetic.texture);
        let _ = writeln!(s, "synthetic_detail = {}", self.data.synthetic.detail);
        s
    }
}
