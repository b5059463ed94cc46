//! Run configuration: one `key = value` file covering every command, with
//! command-line overrides. All sections are read on every run so unknown keys
//! are rejected regardless of which command is invoked.

use std::path::Path;

use trajlab::error::{Error, Result};
use trajlab::harness::HarnessConfig;
use trajlab::kvconfig::KvConfig;
use trajlab::predictor::{FeatureKind, PredictorConfig};
use trajlab::probes::{NegativePool, ProbeTarget};
use trajlab::report::ReportFormat;
use trajlab::stats::{Metric, DEFAULT_RESAMPLES};
use trajlab::steering::{
    Aggregation, ApplyAt, CalibrationConfig, IdealConfig, LayerSet, PolicyMode,
};
use trajlab::trace::Selector;

pub const SEED_ENV: &str = "TRAJLAB_SEED";
pub const DEFAULT_SEED: u64 = 42;

/// `all` or an explicit list.
#[derive(Debug, Clone, PartialEq)]
pub enum Layers {
    All,
    Top,
    List(Vec<usize>),
}

impl Layers {
    pub fn resolve(&self, n_layers: usize) -> Result<Vec<usize>> {
        match self {
            Layers::All => Ok((0..n_layers).collect()),
            Layers::Top => Ok(vec![n_layers - 1]),
            Layers::List(v) => {
                if let Some(&bad) = v.iter().find(|&&l| l >= n_layers) {
                    return Err(Error::config(
                        "layers",
                        format!("layer {bad} out of range for {n_layers} layers"),
                    ));
                }
                Ok(v.clone())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulateSettings {
    pub n_examples: usize,
    pub corpus_seed: u64,
}

#[derive(Debug, Clone)]
pub struct ProbeSettings {
    /// `None`: every observed step index plus `term`.
    pub targets: Option<Vec<ProbeTarget>>,
    pub layers: Layers,
    pub seed: u64,
    pub c: f64,
    pub test_fraction: f64,
    pub balance_classes: bool,
    pub negatives: NegativePool,
    pub shuffle_repeats: usize,
}

#[derive(Debug, Clone)]
pub struct GeometrySettings {
    /// `None`: consecutive steps, then `second_last->last` and `last->term`.
    pub transitions: Option<Vec<(Selector, Selector)>>,
    pub metrics: Vec<Metric>,
    pub layers: Layers,
    pub resamples: usize,
    pub seed: u64,
    pub points: bool,
}

#[derive(Debug, Clone)]
pub struct PredictSettings {
    pub features: Vec<FeatureKind>,
    pub layers: Layers,
    pub seeds: Vec<u64>,
    pub pca_r: usize,
    pub config: PredictorConfig,
    pub length_audit: bool,
}

#[derive(Debug, Clone)]
pub struct SteerSettings {
    pub alphas: Vec<f64>,
    pub layer_set: LayerSet,
    pub apply_at: ApplyAt,
    pub n_episodes: usize,
    pub episode_seed: u64,
    pub aggregation: Aggregation,
    pub ideal: IdealConfig,
    pub calibration: CalibrationConfig,
    pub alpha_corr: f64,
    pub mode: PolicyMode,
    pub long_min_steps: u32,
    pub short_max_steps: u32,
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub seed: u64,
    pub format: ReportFormat,
    pub harness: HarnessConfig,
    pub simulate: SimulateSettings,
    pub probe: ProbeSettings,
    pub geometry: GeometrySettings,
    pub predict: PredictSettings,
    pub steer: SteerSettings,
    resolved: String,
}

/// Overrides from the command line, applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub format: Option<String>,
    pub quick: bool,
    pub sets: Vec<String>,
}

fn enum_key<T>(
    kv: &mut KvConfig,
    key: &str,
    default: &str,
    parse: fn(&str) -> Option<T>,
) -> Result<T> {
    let raw: String = kv.get_or(key, default.to_owned())?;
    parse(&raw).ok_or_else(|| Error::config(key, format!("unrecognized value `{raw}`")))
}

fn list_key<T>(
    kv: &mut KvConfig,
    key: &str,
    default: &str,
    parse: fn(&str) -> Option<T>,
) -> Result<Vec<T>> {
    let items: Vec<String> = kv.get_list_or(key, vec![default.to_owned()])?;
    let items: Vec<String> = items
        .iter()
        .flat_map(|s| s.split(',').map(|p| p.trim().to_owned()))
        .filter(|s| !s.is_empty())
        .collect();
    if items.is_empty() {
        return Err(Error::config(key, "empty list"));
    }
    items
        .iter()
        .map(|s| parse(s).ok_or_else(|| Error::config(key, format!("unrecognized value `{s}`"))))
        .collect()
}

fn layers_key(kv: &mut KvConfig, key: &str, default: &str) -> Result<Layers> {
    let raw: String = kv.get_or(key, default.to_owned())?;
    match raw.trim() {
        "all" => Ok(Layers::All),
        "top" => Ok(Layers::Top),
        other => other
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .ok()
            .filter(|v| !v.is_empty())
            .map(Layers::List)
            .ok_or_else(|| {
                Error::config(
                    key,
                    format!("expected `all`, `top` or a layer list, got `{raw}`"),
                )
            }),
    }
}

fn transition(s: &str) -> Option<(Selector, Selector)> {
    let (a, b) = s.split_once("->")?;
    Some((Selector::parse(a)?, Selector::parse(b)?))
}

fn negatives(s: &str) -> Option<NegativePool> {
    match s.trim() {
        "all" => Some(NegativePool::All),
        "steps_only" => Some(NegativePool::StepsOnly),
        _ => None,
    }
}

fn optional_list<T>(
    kv: &mut KvConfig,
    key: &str,
    parse: fn(&str) -> Option<T>,
) -> Result<Option<Vec<T>>> {
    match kv.get_opt::<String>(key)? {
        None => Ok(None),
        Some(raw) if raw.trim() == "auto" => Ok(None),
        Some(raw) => raw
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                parse(s).ok_or_else(|| Error::config(key, format!("unrecognized value `{s}`")))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some),
    }
}

impl Settings {
    pub fn load(path: Option<&Path>, ov: &Overrides) -> Result<Self> {
        let mut kv = match path {
            Some(p) => KvConfig::from_file(p)
                .map_err(|e| Error::config("--config", format!("{}: {e}", p.display())))?,
            None => KvConfig::new(),
        };
        for s in &ov.sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::config("--set", format!("expected KEY=VALUE, got `{s}`")))?;
            kv.set(k.trim(), v.trim());
        }

        let env_seed = match std::env::var(SEED_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<u64>()
                    .map_err(|e| Error::config(SEED_ENV, format!("cannot parse `{v}`: {e}")))?,
            ),
            Err(_) => None,
        };
        if let Some(s) = ov.seed.or(env_seed) {
            kv.set("seed", s.to_string());
            kv.set("harness.seed", s.to_string());
        }
        let seed: u64 = kv.get_or("seed", DEFAULT_SEED)?;
        if !kv.contains("harness.seed") {
            kv.set("harness.seed", seed.to_string());
        }
        if let Some(f) = &ov.format {
            kv.set("report.format", f.clone());
        }
        let format = enum_key(&mut kv, "report.format", "csv", ReportFormat::parse)?;
        let harness = HarnessConfig::from_kv(&mut kv)?;

        if ov.quick {
            kv.set("simulate.n_examples", "500");
        }
        let simulate = SimulateSettings {
            n_examples: kv.get_or("simulate.n_examples", 2000usize)?,
            corpus_seed: kv.get_or("simulate.corpus_seed", harness.seed)?,
        };
        if simulate.n_examples == 0 {
            return Err(Error::config("simulate.n_examples", "must be positive"));
        }

        let probe = ProbeSettings {
            targets: optional_list(&mut kv, "probe.targets", ProbeTarget::parse)?,
            layers: layers_key(&mut kv, "probe.layers", "all")?,
            seed: kv.get_or("probe.seed", seed)?,
            c: kv.get_or("probe.c", 1.0)?,
            test_fraction: kv.get_or("probe.test_fraction", 0.2)?,
            balance_classes: kv.get_or("probe.balance_classes", false)?,
            negatives: enum_key(&mut kv, "probe.negatives", "all", negatives)?,
            shuffle_repeats: kv.get_or("probe.shuffle_repeats", 0usize)?,
        };
        if !(probe.c > 0.0) {
            return Err(Error::config("probe.c", "must be positive"));
        }
        if !(0.0 < probe.test_fraction && probe.test_fraction < 1.0) {
            return Err(Error::config("probe.test_fraction", "must lie in (0, 1)"));
        }

        let geometry = GeometrySettings {
            transitions: optional_list(&mut kv, "geometry.transitions", transition)?,
            metrics: list_key(
                &mut kv,
                "geometry.metrics",
                "euclidean, cosine",
                Metric::parse,
            )?,
            layers: layers_key(&mut kv, "geometry.layers", "top")?,
            resamples: kv.get_or("geometry.resamples", DEFAULT_RESAMPLES)?,
            seed: kv.get_or("geometry.seed", seed)?,
            points: kv.get_or("geometry.points", true)?,
        };

        let d = PredictorConfig::default();
        let predict = PredictSettings {
            features: list_key(
                &mut kv,
                "predict.features",
                "late_traj, early_concat, early_diff, final_state, step_count_only",
                FeatureKind::parse,
            )?,
            layers: layers_key(&mut kv, "predict.layers", "top")?,
            seeds: kv.get_list_or("predict.seeds", vec![seed])?,
            pca_r: kv.get_or("predict.pca_r", 128usize)?,
            config: PredictorConfig {
                c_grid: kv.get_list_or("predict.c_grid", d.c_grid)?,
                cv_folds: kv.get_or("predict.cv_folds", d.cv_folds)?,
                test_fraction: kv.get_or("predict.test_fraction", d.test_fraction)?,
                seed,
                max_iter: kv.get_or("predict.max_iter", d.max_iter)?,
                tol: kv.get_or("predict.tol", d.tol)?,
            },
            length_audit: kv.get_or("predict.length_audit", true)?,
        };
        predict.config.validate()?;
        if predict.seeds.is_empty() {
            return Err(Error::config("predict.seeds", "empty list"));
        }

        let di = IdealConfig::default();
        let dc = CalibrationConfig::default();
        let steer = SteerSettings {
            alphas: kv.get_list_or("steer.alphas", vec![-0.4, -0.2, 0.0, 0.2, 0.4])?,
            layer_set: enum_key(&mut kv, "steer.layer_set", "last5", LayerSet::parse)?,
            apply_at: enum_key(&mut kv, "steer.apply_at", "every_boundary", ApplyAt::parse)?,
            n_episodes: kv.get_or("steer.n_episodes", 500usize)?,
            episode_seed: kv.get_or("steer.episode_seed", seed.wrapping_add(9))?,
            aggregation: enum_key(
                &mut kv,
                "steer.aggregation",
                "per_prompt",
                Aggregation::parse,
            )?,
            ideal: IdealConfig {
                r: kv.get_or("steer.r", di.r)?,
                r_steer: kv.get_or("steer.r_steer", di.r_steer)?,
                min_per_step: kv.get_or("steer.min_per_step", di.min_per_step)?,
                layer: kv.get_opt("steer.layer")?,
            },
            calibration: CalibrationConfig {
                lambda: kv.get_or("steer.lambda", dc.lambda)?,
                tie_tolerance: kv.get_or("steer.tie_tolerance", dc.tie_tolerance)?,
            },
            alpha_corr: kv.get_or("steer.alpha_corr", 0.5)?,
            mode: enum_key(&mut kv, "steer.mode", "gated", PolicyMode::parse)?,
            long_min_steps: kv.get_or("steer.long_min_steps", 6u32)?,
            short_max_steps: kv.get_or("steer.short_max_steps", 4u32)?,
        };
        if steer.n_episodes == 0 {
            return Err(Error::config("steer.n_episodes", "must be positive"));
        }
        if steer.alphas.is_empty() {
            return Err(Error::config("steer.alphas", "empty list"));
        }

        kv.finish()?;
        Ok(Settings {
            seed,
            format,
            harness,
            simulate,
            probe,
            geometry,
            predict,
            steer,
            resolved: kv.resolved_text(),
        })
    }

    /// Every effective setting in config-file syntax.
    pub fn resolved_text(&self) -> &str {
        &self.resolved
    }
}
