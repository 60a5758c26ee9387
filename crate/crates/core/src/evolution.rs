//! Self-evolution controller: watch a training-loss trace for convergence,
//! densify each frame with pseudo points inside the current boxes, query the
//! detector and merge its detections with the existing pseudo-boxes.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou3d, Box3D, Point3, CONTAINMENT_TOLERANCE};
use crate::io::{load_loss_trace, read_boxes, IoError, LossTrace};

pub const DEFAULT_PSI: f64 = 0.1;
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.2;
pub const DEFAULT_WINDOW: u32 = 5;
pub const DEFAULT_MAX_PHASES: u32 = 1;
pub const LOSS_FILE: &str = "loss.csv";

/// Population variance of the last `window` loss differences ending at `epoch`.
/// `None` when any loss in `[epoch - window, epoch]` is missing.
pub fn loss_statistic(trace: &LossTrace, epoch: u32, window: u32) -> Option<f64> {
    if window == 0 || epoch <= window {
        return None;
    }
    let losses: Option<Vec<f64>> = (epoch - window..=epoch).map(|e| trace.loss_at(e)).collect();
    let diffs: Vec<f64> = losses?.windows(2).map(|w| w[1] - w[0]).collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    Some(diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n)
}

/// Base of the decaying convergence threshold `psi * p * base^(-p)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayMode {
    /// Euler's number.
    #[default]
    Euler,
    /// The current epoch index.
    EpochIndex,
}

/// Convergence threshold for phase `phase` at `epoch`.
pub fn threshold(psi: f64, phase: u32, epoch: u32, mode: DecayMode) -> f64 {
    let p = f64::from(phase);
    match mode {
        DecayMode::Euler => psi * p * (-p).exp(),
        DecayMode::EpochIndex => psi * p * f64::from(epoch).powf(-p),
    }
}

/// How matched and unmatched previous boxes survive a merge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeRule {
    /// Keep previous boxes that are the best match of some suppressed
    /// detection; drop the rest.
    #[default]
    ReserveMatched,
    /// Keep every previous box except those overlapping an added detection.
    DiscardOverlapped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvolutionConfig {
    pub psi: f64,
    pub iou_threshold: f64,
    pub window: u32,
    pub decay: DecayMode,
    pub merge_rule: MergeRule,
    pub max_phases: u32,
    pub max_epochs: u32,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            psi: DEFAULT_PSI,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            window: DEFAULT_WINDOW,
            decay: DecayMode::Euler,
            merge_rule: MergeRule::ReserveMatched,
            max_phases: DEFAULT_MAX_PHASES,
            max_epochs: 100,
        }
    }
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<(), EvolutionError> {
        let fail = |reason: &str| Err(EvolutionError::InvalidConfig(reason.into()));
        if !(self.psi > 0.0 && self.psi.is_finite()) {
            return fail("psi must be positive");
        }
        if !(0.0..=1.0).contains(&self.iou_threshold) {
            return fail("iou_threshold must lie in [0, 1]");
        }
        if self.window < 3 {
            return fail("window must be at least 3 epochs");
        }
        Ok(())
    }
}

/// Controller state between epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionState {
    pub config: EvolutionConfig,
    /// Current phase, starting at 1.
    pub phase: u32,
    /// `(epoch, t_e)` for every epoch whose statistic was ready.
    pub history: Vec<(u32, f64)>,
}

impl EvolutionState {
    pub fn new(config: EvolutionConfig) -> Result<Self, EvolutionError> {
        config.validate()?;
        Ok(Self {
            config,
            phase: 1,
            history: Vec::new(),
        })
    }

    pub fn threshold(&self, epoch: u32) -> f64 {
        threshold(self.config.psi, self.phase, epoch, self.config.decay)
    }
}

/// True when consecutive statistics differ by no more than the phase threshold.
pub fn convergence_check(state: &EvolutionState, epoch: u32, t_e: f64, t_prev: f64) -> bool {
    (t_e - t_prev).abs() <= state.threshold(epoch)
}

/// Real points followed by the pool points inside at least one box.
pub fn densify(real: &[Point3], pool: &[Point3], boxes: &[Box3D]) -> Vec<Point3> {
    let mut dense = real.to_vec();
    dense.extend(
        pool.iter()
            .filter(|p| boxes.iter().any(|b| b.contains(**p, CONTAINMENT_TOLERANCE)))
            .copied(),
    );
    dense
}

/// Merge result with the indices of surviving boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeOutcome {
    /// Added detections followed by surviving previous boxes.
    pub boxes: Vec<Box3D>,
    /// Indices into the new detections, ascending.
    pub added: Vec<usize>,
    /// Indices into the previous boxes, ascending.
    pub kept: Vec<usize>,
    pub dropped: usize,
}

fn same_class_iou(a: &Box3D, b: &Box3D) -> f64 {
    if a.class_id == b.class_id {
        iou3d(a, b)
    } else {
        0.0
    }
}

/// Merges detections `new` into previous boxes `old` at IoU threshold `v`.
pub fn merge_boxes(old: &[Box3D], new: &[Box3D], v: f64, rule: MergeRule) -> MergeOutcome {
    let iou: Vec<Vec<f64>> = new
        .iter()
        .map(|n| old.iter().map(|o| same_class_iou(o, n)).collect())
        .collect();
    let mut added = Vec::new();
    let mut matched = vec![false; old.len()];
    for (i, row) in iou.iter().enumerate() {
        let best = row
            .iter()
            .enumerate()
            .fold(None, |best: Option<(usize, f64)>, (j, &x)| match best {
                Some((_, b)) if b >= x => best,
                _ => Some((j, x)),
            });
        match best {
            Some((j, max)) if max >= v => matched[j] = true,
            _ => added.push(i),
        }
    }
    let kept: Vec<usize> = match rule {
        MergeRule::ReserveMatched => (0..old.len()).filter(|&j| matched[j]).collect(),
        MergeRule::DiscardOverlapped => (0..old.len())
            .filter(|&j| added.iter().all(|&i| iou[i][j] <= 0.0))
            .collect(),
    };
    let boxes = added
        .iter()
        .map(|&i| new[i].clone())
        .chain(kept.iter().map(|&j| old[j].clone()))
        .collect();
    let dropped = old.len() - kept.len();
    MergeOutcome {
        boxes,
        added,
        kept,
        dropped,
    }
}

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("no detections for phase {phase} at {}", path.display())]
    MissingPhase { phase: u32, path: PathBuf },
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("detector failed: {0}")]
    Failed(String),
}

/// The detector being trained, seen from the controller.
pub trait Detector: Sync {
    /// Training loss after `epoch`, or `None` once training has stopped.
    fn loss(&self, epoch: u32) -> Result<Option<f64>, DetectorError>;
    /// Detections for one frame's dense points during `phase`.
    fn test(
        &self,
        phase: u32,
        frame_id: &str,
        dense: &[Point3],
    ) -> Result<Vec<Box3D>, DetectorError>;
}

/// Replays a recorded loss trace and per-phase detection files.
///
/// Layout: `<dir>/loss.csv` and `<dir>/phase_<p>/*` box files, whose records
/// are grouped by frame id.
#[derive(Debug)]
pub struct FileDetector {
    root: PathBuf,
    trace: LossTrace,
    phases: Mutex<BTreeMap<u32, BTreeMap<String, Vec<Box3D>>>>,
}

impl FileDetector {
    pub fn open(root: impl AsRef<Path>) -> Result<Self, DetectorError> {
        let root = root.as_ref().to_path_buf();
        let trace = load_loss_trace(root.join(LOSS_FILE))?;
        Ok(Self {
            root,
            trace,
            phases: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn trace(&self) -> &LossTrace {
        &self.trace
    }

    pub fn phase_dir(&self, phase: u32) -> PathBuf {
        self.root.join(format!("phase_{phase}"))
    }

    fn load_phase(&self, phase: u32) -> Result<BTreeMap<String, Vec<Box3D>>, DetectorError> {
        let dir = self.phase_dir(phase);
        let missing = || DetectorError::MissingPhase {
            phase,
            path: dir.clone(),
        };
        let entries = std::fs::read_dir(&dir).map_err(|_| missing())?;
        let mut files: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let mut by_frame: BTreeMap<String, Vec<Box3D>> = BTreeMap::new();
        for file in files {
            for record in read_boxes(&file)? {
                by_frame
                    .entry(record.frame_id)
                    .or_default()
                    .push(record.bbox);
            }
        }
        Ok(by_frame)
    }
}

impl Detector for FileDetector {
    fn loss(&self, epoch: u32) -> Result<Option<f64>, DetectorError> {
        Ok(self.trace.loss_at(epoch))
    }

    fn test(
        &self,
        phase: u32,
        frame_id: &str,
        _dense: &[Point3],
    ) -> Result<Vec<Box3D>, DetectorError> {
        let mut phases = self
            .phases
            .lock()
            .map_err(|_| DetectorError::Failed("detection cache poisoned".into()))?;
        if let std::collections::btree_map::Entry::Vacant(slot) = phases.entry(phase) {
            slot.insert(self.load_phase(phase)?);
        }
        Ok(phases[&phase].get(frame_id).cloned().unwrap_or_default())
    }
}

/// One frame's inputs and current pseudo-boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameState {
    pub frame_id: String,
    pub real: Vec<Point3>,
    /// Every pseudo point produced for the frame.
    pub pseudo_pool: Vec<Point3>,
    pub boxes: Vec<Box3D>,
}

/// One evolution round, summed over frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhaseEntry {
    pub epoch: u32,
    pub phase: u32,
    pub added: usize,
    pub reserved: usize,
    pub dropped: usize,
}

impl fmt::Display for PhaseEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} phase={} added={} reserved={} dropped={}",
            self.epoch, self.phase, self.added, self.reserved, self.dropped
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PhaseLog {
    pub entries: Vec<PhaseEntry>,
}

impl fmt::Display for PhaseLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.entries.iter().try_for_each(|e| writeln!(f, "{e}"))
    }
}

#[derive(Debug, Error)]
pub enum EvolutionError {
    #[error("invalid evolution config: {0}")]
    InvalidConfig(String),
    #[error("detector failed at epoch {epoch}: {source}")]
    Detector {
        epoch: u32,
        #[source]
        source: DetectorError,
        /// Rounds completed before the failure.
        log: PhaseLog,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionResult {
    pub frames: Vec<FrameState>,
    pub log: PhaseLog,
    pub state: EvolutionState,
}

/// Runs the controller over epochs `1..=max_epochs`, or until the loss trace
/// ends. Each convergence event runs one round over every frame, up to the
/// phase cap.
pub fn run_evolution(
    mut frames: Vec<FrameState>,
    detector: &dyn Detector,
    config: EvolutionConfig,
) -> Result<EvolutionResult, EvolutionError> {
    let mut state = EvolutionState::new(config)?;
    let mut log = PhaseLog::default();
    let mut losses = LossWindow::default();
    for epoch in 1..=config.max_epochs {
        if log.entries.len() as u32 >= config.max_phases {
            break;
        }
        let fail = |source, log: &PhaseLog| EvolutionError::Detector {
            epoch,
            source,
            log: log.clone(),
        };
        let Some(loss) = detector.loss(epoch).map_err(|e| fail(e, &log))? else {
            break;
        };
        losses.push(epoch, loss);
        let Some(t_e) = losses.statistic(epoch, config.window) else {
            continue;
        };
        let previous = state
            .history
            .last()
            .filter(|(e, _)| *e + 1 == epoch)
            .map(|&(_, t)| t);
        state.history.push((epoch, t_e));
        let Some(t_prev) = previous else {
            continue;
        };
        if !convergence_check(&state, epoch, t_e, t_prev) {
            continue;
        }
        let phase = state.phase;
        let outcomes: Vec<_> = frames
            .par_iter()
            .map(|frame| {
                let dense = densify(&frame.real, &frame.pseudo_pool, &frame.boxes);
                let detections = detector.test(phase, &frame.frame_id, &dense)?;
                Ok(merge_boxes(
                    &frame.boxes,
                    &detections,
                    config.iou_threshold,
                    config.merge_rule,
                ))
            })
            .collect::<Result<_, DetectorError>>()
            .map_err(|e| fail(e, &log))?;
        let mut entry = PhaseEntry {
            epoch,
            phase,
            added: 0,
            reserved: 0,
            dropped: 0,
        };
        for (frame, outcome) in frames.iter_mut().zip(outcomes) {
            entry.added += outcome.added.len();
            entry.reserved += outcome.kept.len();
            entry.dropped += outcome.dropped;
            frame.boxes = outcome.boxes;
        }
        log::info!("{entry}");
        log.entries.push(entry);
        state.phase += 1;
    }
    Ok(EvolutionResult { frames, log, state })
}

/// Losses seen so far by the controller.
#[derive(Debug, Default)]
struct LossWindow {
    entries: Vec<(u32, f64)>,
}

impl LossWindow {
    fn push(&mut self, epoch: u32, loss: f64) {
        self.entries.push((epoch, loss));
    }

    fn statistic(&self, epoch: u32, window: u32) -> Option<f64> {
        let trace = LossTrace::new(self.entries.clone()).ok()?;
        loss_statistic(&trace, epoch, window)
    }
}
