//! Declarative experiment files (TOML).
//!
//! ```toml
//! preset = "mixtral-gsm8k"      # optional; supplies k and band thresholds
//! policy = "laser"              # vanilla | load-only | laser
//! load_reset = "batch"          # batch | cumulative
//! baselines = true              # also run vanilla and load-only
//! sweep = [2, 3, 4]             # optional candidate-pool caps
//!
//! [workload.synthetic]
//! num_layers = 32
//! num_experts = 8
//! num_batches = 100
//! seed = 7
//! bands = [{ layers = [0, 31], generator = { kind = "dirichlet", alpha = 1.0 } }]
//!
//! [laser]
//! c = 4
//! trim = "top"
//!
//! [weights]
//! scheme = "uniform"
//! ```
//!
//! Unknown keys are rejected. Relative paths are resolved against the directory of the
//! config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::RegimeThresholds;
use crate::metrics::PlacementMatrix;
use crate::perf::PerfParams;
use crate::presets::preset;
use crate::routing::{Band, BandParams, LaserParams, LayerBands, TrimMode};
use crate::sim::harness::{ExperimentConfig, LoadReset, Policy, WeightScheme, Workload};
use crate::sim::synth::SyntheticSpec;
use crate::sim::trace::read_trace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyName {
    Vanilla,
    LoadOnly,
    #[default]
    Laser,
}

impl std::str::FromStr for PolicyName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(PolicyName::Vanilla),
            "load-only" => Ok(PolicyName::LoadOnly),
            "laser" => Ok(PolicyName::Laser),
            other => Err(Error::config(format!(
                "unknown policy {other:?} (expected vanilla, load-only or laser)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandSection {
    /// Inclusive `[first, last]`.
    pub layers: [usize; 2],
    pub eps_high: f64,
    pub t_fix: f64,
    /// Overrides the section-wide `c`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaserSection {
    pub c: usize,
    #[serde(default)]
    pub trim: TrimMode,
    #[serde(default)]
    pub seed: u64,
    /// Band ranges for a preset; thirds of the layer count when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundaries: Option<Vec<[usize; 2]>>,
    /// Explicit bands; take precedence over a preset.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bands: Vec<BandSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightKind {
    #[default]
    Uniform,
    Flops,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsSection {
    #[serde(default)]
    pub scheme: WeightKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flops: Option<Vec<f64>>,
    /// Text file of per-layer FLOPs separated by commas or whitespace.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flops_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlacementSection {
    /// `G x n` rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<Vec<f64>>>,
    /// CSV file with one GPU per line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

/// The on-disk experiment description.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default)]
    pub policy: PolicyName,
    #[serde(default)]
    pub load_reset: LoadReset,
    #[serde(default)]
    pub baselines: bool,
    #[serde(default = "yes")]
    pub decisions: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub workload: WorkloadSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub laser: Option<LaserSection>,
    #[serde(default)]
    pub weights: WeightsSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement: Option<PlacementSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perf: Option<PerfParams<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regimes: Option<RegimeThresholds<f64>>,
}

fn yes() -> bool {
    true
}

/// A config file turned into a runnable experiment.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub experiment: ExperimentConfig,
    pub out_dir: Option<PathBuf>,
    /// Self-contained equivalent of the input: preset expanded, paths absolute.
    pub effective: ConfigFile,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string().trim_end().to_string()))
    }

    /// Reads a config file and makes its relative paths absolute.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    /// Joins every relative path onto `base`.
    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p.as_mut() {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.workload.trace);
        fix(&mut self.weights.flops_path);
        fix(&mut self.out_dir);
        if let Some(pl) = self.placement.as_mut() {
            fix(&mut pl.path);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    /// Seeds both the synthetic generator and random trimming.
    pub fn set_seed(&mut self, seed: u64) {
        if let Some(s) = self.workload.synthetic.as_mut() {
            s.seed = seed;
        }
        if let Some(l) = self.laser.as_mut() {
            l.seed = seed;
        }
    }

    /// Parses a `--weights` value: `uniform` or `flops:<path>`.
    pub fn set_weights(&mut self, spec: &str) -> Result<()> {
        self.weights = match spec.split_once(':') {
            None if spec == "uniform" => WeightsSection::default(),
            Some(("flops", path)) if !path.is_empty() => WeightsSection {
                scheme: WeightKind::Flops,
                flops: None,
                flops_path: Some(PathBuf::from(path)),
            },
            _ => {
                return Err(Error::config(format!(
                    "weights {spec:?} must be `uniform` or `flops:<path>`"
                )))
            }
        };
        Ok(())
    }

    fn workload(&self) -> Result<Workload> {
        match (&self.workload.trace, &self.workload.synthetic) {
            (Some(path), None) => Ok(Workload::Trace(read_trace(path)?)),
            (None, Some(spec)) => {
                spec.validate()?;
                Ok(Workload::Synthetic(spec.clone()))
            }
            (Some(_), Some(_)) => Err(Error::config(
                "workload: give either `trace` or `synthetic`, not both",
            )),
            (None, None) => Err(Error::config(
                "workload: one of `trace` or `synthetic` is required",
            )),
        }
    }

    fn resolve_k(&self) -> Result<usize> {
        let from_preset = self.preset_ref()?.map(|p| p.model.k);
        match (self.k, from_preset) {
            (Some(k), _) => Ok(k),
            (None, Some(k)) => Ok(k),
            (None, None) => Err(Error::config("`k` is required when no preset is given")),
        }
    }

    fn preset_ref(&self) -> Result<Option<&'static crate::presets::Preset>> {
        match &self.preset {
            None => Ok(None),
            Some(name) => preset(name).map(Some).ok_or_else(|| {
                let known: Vec<_> = crate::presets::preset_names().collect();
                Error::config(format!(
                    "unknown preset {name:?} (known: {})",
                    known.join(", ")
                ))
            }),
        }
    }

    /// Explicit per-band parameters for the laser policy.
    fn laser_bands(&self, k: usize, num_layers: usize) -> Result<Vec<BandSection>> {
        let laser = self
            .laser
            .as_ref()
            .ok_or_else(|| Error::config("policy `laser` needs a [laser] section with `c`"))?;
        if !laser.bands.is_empty() {
            return Ok(laser.bands.clone());
        }
        let preset = self.preset_ref()?.ok_or_else(|| {
            Error::config("policy `laser` needs a preset or [[laser.bands]] entries")
        })?;
        let bands = match &laser.boundaries {
            Some(b) => LayerBands::new(b.iter().map(|r| (r[0], r[1])).collect(), num_layers)?,
            None => LayerBands::thirds(num_layers)?,
        };
        let params: BandParams<f64> =
            preset.band_params(&bands, laser.c, laser.trim, laser.seed)?;
        if preset.model.k != k {
            return Err(Error::config(format!(
                "preset {} is for k = {} but k = {k} was requested",
                preset.name, preset.model.k
            )));
        }
        Ok(params
            .bands()
            .iter()
            .map(|b| BandSection {
                layers: [b.first, b.last],
                eps_high: b.params.eps_high,
                t_fix: b.params.t_fix,
                c: None,
            })
            .collect())
    }

    fn load_flops(&self) -> Result<WeightScheme> {
        match self.weights.scheme {
            WeightKind::Uniform => Ok(WeightScheme::Uniform),
            WeightKind::Flops => match (&self.weights.flops, &self.weights.flops_path) {
                (Some(f), None) => Ok(WeightScheme::Flops(f.clone())),
                (None, Some(path)) => Ok(WeightScheme::Flops(read_numbers(path)?)),
                _ => Err(Error::config(
                    "weights: scheme `flops` needs exactly one of `flops` or `flops_path`",
                )),
            },
        }
    }

    fn load_placement(&self) -> Result<Option<Vec<Vec<f64>>>> {
        let Some(section) = &self.placement else {
            return Ok(None);
        };
        match (&section.matrix, &section.path) {
            (Some(m), None) => Ok(Some(m.clone())),
            (None, Some(path)) => Ok(Some(read_matrix(path)?)),
            _ => Err(Error::config(
                "placement: give exactly one of `matrix` or `path`",
            )),
        }
    }

    /// Validates the file and builds the experiment it describes.
    pub fn resolve(&self) -> Result<Resolved> {
        let workload = self.workload()?;
        let k = self.resolve_k()?;
        let num_layers = workload.num_layers();
        let needs_laser = self.policy == PolicyName::Laser;
        if self.sweep.is_some() && !needs_laser {
            return Err(Error::config("`sweep` requires policy `laser`"));
        }

        let mut effective = self.clone();
        effective.preset = None;
        effective.k = Some(k);

        let policy = match self.policy {
            PolicyName::Vanilla => Policy::Vanilla,
            PolicyName::LoadOnly => Policy::LoadOnly,
            PolicyName::Laser => {
                let sections = self.laser_bands(k, num_layers)?;
                let laser = self.laser.as_ref().expect("checked by laser_bands");
                let bands = sections
                    .iter()
                    .map(|b| Band {
                        first: b.layers[0],
                        last: b.layers[1],
                        params: LaserParams::new(
                            k,
                            b.eps_high,
                            b.t_fix,
                            b.c.unwrap_or(laser.c),
                            laser.trim,
                            laser.seed,
                        ),
                    })
                    .collect();
                let bp = BandParams::new(bands, num_layers)?;
                if let Some(l) = effective.laser.as_mut() {
                    l.bands = sections;
                    l.boundaries = None;
                }
                Policy::Laser(bp)
            }
        };

        let weights = self.load_flops()?;
        if let WeightScheme::Flops(f) = &weights {
            effective.weights = WeightsSection {
                scheme: WeightKind::Flops,
                flops: Some(f.clone()),
                flops_path: None,
            };
        }
        let placement_rows = self.load_placement()?;
        if let Some(rows) = &placement_rows {
            effective.placement = Some(PlacementSection {
                matrix: Some(rows.clone()),
                path: None,
            });
        }
        let placement = placement_rows.map(PlacementMatrix::new).transpose()?;

        let mut experiment = ExperimentConfig::new(workload, k, policy);
        experiment.sweep = self.sweep.clone();
        experiment.weights = weights;
        experiment.placement = placement;
        experiment.perf = self.perf.clone();
        experiment.load_reset = self.load_reset;
        experiment.regimes = self.regimes.unwrap_or_default();
        experiment.baselines = self.baselines;
        experiment.keep_decisions = self.decisions;
        experiment.validate()?;

        Ok(Resolved {
            experiment,
            out_dir: self.out_dir.clone(),
            effective,
        })
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_number(tok: &str, path: &Path, line: usize) -> Result<f64> {
    tok.parse::<f64>().map_err(|_| {
        Error::config(format!(
            "{}:{line}: {tok:?} is not a number",
            path.display()
        ))
    })
}

/// Numbers separated by commas or whitespace.
pub fn read_numbers(path: &Path) -> Result<Vec<f64>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        for tok in line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
        {
            out.push(parse_number(tok, path, i + 1)?);
        }
    }
    Ok(out)
}

/// One comma-separated row per non-empty line.
pub fn read_matrix(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = read_text(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        rows.push(
            line.split(',')
                .map(|t| parse_number(t.trim(), path, i + 1))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(rows)
}
