//! Pipeline configuration, stored as JSON. Missing fields take their defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fusebox_core::boxfit::{GenerationParams, SizePriors, FALLBACK_SCORE, FIT_SCORE};
use fusebox_core::evolution::{DecayMode, EvolutionConfig, MergeRule};
use fusebox_core::filtering::{FilterParams, FilterStages, UnanchoredPolicy};
use fusebox_core::fusion::{FusionParams, DEFAULT_MAX_PER_INSTANCE};
use fusebox_core::geometry::Point3;
use fusebox_core::ClassId;

use crate::eval::{ApInterpolation, EvalParams, IouMode};
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Directory holding one sub-directory per frame; `--frames` overrides it.
    pub dataset_root: Option<PathBuf>,
    pub lambda: f64,
    pub k_neighbors: usize,
    pub alpha: f64,
    pub unanchored: UnanchoredPolicy,
    pub enable_local_filter: bool,
    pub enable_global_filter: bool,
    pub max_per_instance: usize,
    pub align_depth: bool,
    pub size_prior_path: Option<PathBuf>,
    pub fit_score: f64,
    pub fallback_score: f64,
    pub psi: f64,
    pub iou_threshold: f64,
    pub window: u32,
    pub decay: DecayMode,
    pub merge_rule: MergeRule,
    pub max_phases: u32,
    pub max_epochs: u32,
    /// Display names of the evaluated classes.
    pub class_table: BTreeMap<ClassId, String>,
    /// Range bin edges in metres, starting at 0.
    pub range_bins: Vec<f64>,
    pub eval_iou: f64,
    pub ap_interpolation: ApInterpolation,
    /// Worker threads for per-frame work; 0 uses every core.
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let filter = FilterParams::default();
        let evolution = EvolutionConfig::default();
        Self {
            dataset_root: None,
            lambda: filter.lambda,
            k_neighbors: filter.k_neighbors,
            alpha: filter.alpha,
            unanchored: filter.unanchored,
            enable_local_filter: true,
            enable_global_filter: true,
            max_per_instance: DEFAULT_MAX_PER_INSTANCE,
            align_depth: false,
            size_prior_path: None,
            fit_score: FIT_SCORE,
            fallback_score: FALLBACK_SCORE,
            psi: evolution.psi,
            iou_threshold: evolution.iou_threshold,
            window: evolution.window,
            decay: evolution.decay,
            merge_rule: evolution.merge_rule,
            max_phases: evolution.max_phases,
            max_epochs: 1000,
            class_table: ClassId::DEFAULTS
                .iter()
                .map(|&c| (c, c.name().unwrap_or_default().to_string()))
                .collect(),
            range_bins: vec![0.0, 30.0, 50.0, 80.0],
            eval_iou: 0.25,
            ap_interpolation: ApInterpolation::AllPoint,
            workers: 0,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let config: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |msg: String| Err(CliError::Input(format!("invalid config: {msg}")));
        if let Err(e) = self.filter_params().validate() {
            return invalid(e.to_string());
        }
        if let Err(e) = self.evolution_config().validate() {
            return invalid(e.to_string());
        }
        if self.max_per_instance == 0 {
            return invalid("max_per_instance must be at least 1".into());
        }
        if self.range_bins.len() < 2
            || self.range_bins[0] != 0.0
            || self
                .range_bins
                .windows(2)
                .any(|w| w[1] <= w[0] || !w[1].is_finite())
        {
            return invalid("range_bins must start at 0 and strictly increase".into());
        }
        if !(self.eval_iou > 0.0 && self.eval_iou <= 1.0) {
            return invalid("eval_iou must lie in (0, 1]".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn filter_params(&self) -> FilterParams {
        FilterParams {
            lambda: self.lambda,
            k_neighbors: self.k_neighbors,
            alpha: self.alpha,
            unanchored: self.unanchored,
        }
    }

    pub fn fusion_params(&self) -> FusionParams {
        FusionParams {
            max_per_instance: self.max_per_instance,
            align_depth: self.align_depth,
        }
    }

    pub fn generation_params(&self) -> GenerationParams {
        GenerationParams {
            filter: self.filter_params(),
            stages: FilterStages {
                local: self.enable_local_filter,
                global: self.enable_global_filter,
            },
            sensor_origin: Point3::ORIGIN,
            fit_score: self.fit_score,
            fallback_score: self.fallback_score,
        }
    }

    pub fn evolution_config(&self) -> EvolutionConfig {
        EvolutionConfig {
            psi: self.psi,
            iou_threshold: self.iou_threshold,
            window: self.window,
            decay: self.decay,
            merge_rule: self.merge_rule,
            max_phases: self.max_phases,
            max_epochs: self.max_epochs,
        }
    }

    pub fn eval_params(&self, mode: IouMode) -> EvalParams {
        EvalParams {
            iou_threshold: self.eval_iou,
            mode,
            range_bins: self.range_bins.clone(),
            interpolation: self.ap_interpolation,
            classes: self.class_table.keys().copied().collect(),
        }
    }

    pub fn size_priors(&self) -> Result<SizePriors, CliError> {
        match &self.size_prior_path {
            Some(path) => SizePriors::load(path).map_err(|e| CliError::Input(e.to_string())),
            None => Ok(SizePriors::default()),
        }
    }

    pub fn thread_pool(&self) -> Result<rayon::ThreadPool, CliError> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| CliError::Internal(format!("thread pool: {e}")))
    }
}
