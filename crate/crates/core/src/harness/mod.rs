//! Training and evaluation on synthetic scenes.
//!
//! Setting A trains with a retention ratio and evaluates on full inputs;
//! Setting B applies retention at inference. [`sweep`] runs Cartesian grids
//! of both and writes one CSV row per configuration and seed.

mod metrics;
mod sweep;
mod train;

pub use metrics::{average_ranks, macro_f1, mean_iou, mean_std, per_class_f1, spearman};
pub use sweep::{
    read_rows_csv, summarize, sweep, write_rows_csv, write_summary_csv, SummaryRow, SweepGrid, SweepOptions,
    RESULT_CSV_HEADER, SUMMARY_CSV_HEADER,
};
pub use train::{evaluate, fit, linear_probe, sgd_step, train, EvalResult, ProbeConfig, TrainOutcome};

use serde::{Deserialize, Serialize};

use crate::masking::{fnv1a64, Strategy};
use crate::model::{default_taps, HeadConfig, ModelConfig, NetworkConfig};
use crate::patching::{downscale, ImageSample};
use crate::synthdata::{class_shares, coarsen_labels, generate_dataset, SceneSpec};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Segmentation,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Classification => "classification",
            Task::Segmentation => "segmentation",
        }
    }

    pub fn metric_name(self) -> &'static str {
        match self {
            Task::Classification => "macro_f1",
            Task::Segmentation => "miou",
        }
    }
}

/// Encoder and decoder sizes; image extents come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    #[serde(default = "default_decoder_width")]
    pub decoder_width: usize,
}

fn default_decoder_width() -> usize {
    32
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Fixed-step SGD, optionally with heavy-ball momentum.
    #[default]
    Sgd,
    /// Adam with `momentum` as the first-moment decay.
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(default)]
    pub kind: OptimizerKind,
    /// Fixed step size.
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Heavy-ball momentum for SGD (0 is plain SGD); first-moment decay
    /// for Adam.
    #[serde(default)]
    pub momentum: f64,
}

/// How a train/eval split of synthetic scenes is produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub scene: SceneSpec,
    pub train: usize,
    pub eval: usize,
    /// Block-mean downscaling factor applied after generation.
    #[serde(default = "one")]
    pub downscale: usize,
    /// Coarse class of every fine class, applied after generation.
    #[serde(default)]
    pub class_groups: Option<Vec<usize>>,
    /// Set each class's presence share to its median share over a
    /// calibration set of scenes, so every class is present in about half
    /// of the images.
    #[serde(default)]
    pub balanced_presence: bool,
}

fn one() -> usize {
    1
}

/// Stream offset of the threshold-calibration scenes, far from any split.
const CALIBRATION_STREAM: u64 = 1 << 40;
const CALIBRATION_SCENES: usize = 256;

impl DataConfig {
    /// Scene spec with calibrated presence shares.
    pub fn resolved_scene(&self) -> Result<SceneSpec> {
        let mut scene = self.scene.clone();
        if self.balanced_presence {
            scene.presence_fractions.clear();
            scene.validate()?;
            let calib = generate_dataset(&scene, CALIBRATION_STREAM, CALIBRATION_SCENES)?;
            let shares: Vec<Vec<f64>> = calib
                .iter()
                .map(|s| class_shares(&s.labels.segmentation, scene.classes))
                .collect();
            scene.presence_fractions = (0..scene.classes)
                .map(|c| {
                    let mut v: Vec<f64> = shares.iter().map(|s| s[c]).collect();
                    v.sort_by(f64::total_cmp);
                    0.5 * (v[CALIBRATION_SCENES / 2 - 1] + v[CALIBRATION_SCENES / 2])
                })
                .collect();
        }
        scene.validate()?;
        Ok(scene)
    }

    pub fn extents(&self) -> (usize, usize) {
        let f = self.downscale.max(1);
        (self.scene.height / f, self.scene.width / f)
    }

    pub fn classes(&self) -> usize {
        match &self.class_groups {
            Some(g) => g.iter().copied().max().map_or(0, |m| m + 1),
            None => self.scene.classes,
        }
    }
}

/// Generated train and eval samples.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitData {
    pub train: Vec<ImageSample>,
    pub eval: Vec<ImageSample>,
}

/// Generates the train split from indices `0..train` and the eval split
/// from the indices that follow.
pub fn prepare_data(cfg: &DataConfig) -> Result<SplitData> {
    if cfg.train == 0 || cfg.eval == 0 {
        return Err(Error::EmptyDataset("train and eval splits must be non-empty".into()));
    }
    let scene = cfg.resolved_scene()?;
    let post = |samples: Vec<ImageSample>| -> Result<Vec<ImageSample>> {
        let samples = if cfg.downscale > 1 {
            samples
                .iter()
                .map(|s| downscale(s, cfg.downscale))
                .collect::<Result<Vec<_>>>()?
        } else {
            samples
        };
        match &cfg.class_groups {
            Some(groups) => coarsen_labels(&samples, groups),
            None => Ok(samples),
        }
    };
    Ok(SplitData {
        train: post(generate_dataset(&scene, 0, cfg.train)?)?,
        eval: post(generate_dataset(&scene, cfg.train as u64, cfg.eval)?)?,
    })
}

/// One training run and the setting it is evaluated in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: Task,
    pub strategy: Strategy,
    pub train_ratio: f64,
    /// Similarity threshold for MS3 at training and inference.
    #[serde(default)]
    pub tau: Option<f64>,
    pub eval_ratio: f64,
    pub model: ModelSpec,
    pub optimizer: OptimizerConfig,
    pub data: DataConfig,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("train_ratio", self.train_ratio), ("eval_ratio", self.eval_ratio)] {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::Config(format!("{name} {r} outside (0, 1]")));
            }
        }
        if self.strategy == Strategy::Ms3 {
            match self.tau {
                Some(t) if t > 0.0 && t <= 1.0 => {}
                _ => return Err(Error::Config("ms3 needs a threshold tau in (0, 1]".into())),
            }
        }
        if self.optimizer.steps == 0 || self.optimizer.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be at least 1".into()));
        }
        if !(self.optimizer.lr > 0.0) || !(0.0..1.0).contains(&self.optimizer.momentum) {
            return Err(Error::Config("lr must be positive and momentum in [0, 1)".into()));
        }
        self.network_config()?.encoder.validate()
    }

    pub fn network_config(&self) -> Result<NetworkConfig> {
        let (h, w) = self.data.extents();
        let m = &self.model;
        let mut encoder = ModelConfig::new(m.dim, m.depth, m.heads, m.mlp_ratio, m.patch, self.data.scene.channels, h, w);
        encoder.taps = default_taps(m.depth);
        let classes = self.data.classes();
        let head = match self.task {
            Task::Classification => HeadConfig::Classification { labels: classes },
            Task::Segmentation => HeadConfig::Segmentation {
                classes,
                width: m.decoder_width,
            },
        };
        Ok(NetworkConfig { encoder, head })
    }

    /// Hex digest of the configuration with the seed left out, so rows that
    /// differ only by seed share it.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        let json = serde_json::to_string(&c).expect("config serializes");
        format!("{:016x}", fnv1a64(json.as_bytes()))
    }
}

/// One evaluated configuration and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub digest: String,
    pub task: Task,
    pub strategy: Strategy,
    pub train_ratio: f64,
    pub eval_ratio: f64,
    pub tau: Option<f64>,
    pub patch_size: usize,
    pub lambda: f64,
    pub seed: u64,
    pub metric_name: String,
    /// `None` when the run failed.
    pub metric_value: Option<f64>,
    pub gflops: f64,
    pub peak_mem_mb: f64,
    pub wall_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ResultRow {
    pub(crate) fn skeleton(cfg: &ExperimentConfig, eval_ratio: f64) -> Self {
        let mut keyed = cfg.clone();
        keyed.eval_ratio = eval_ratio;
        Self {
            digest: keyed.digest(),
            task: cfg.task,
            strategy: cfg.strategy,
            train_ratio: cfg.train_ratio,
            eval_ratio,
            tau: cfg.tau,
            patch_size: cfg.model.patch,
            lambda: cfg.data.scene.lambda,
            seed: cfg.seed,
            metric_name: cfg.task.metric_name().to_string(),
            metric_value: None,
            gflops: 0.0,
            peak_mem_mb: 0.0,
            wall_s: 0.0,
            error: None,
        }
    }
}
