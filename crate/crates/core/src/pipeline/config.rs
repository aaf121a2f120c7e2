use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gcn::GcnConfig;
use crate::losses::{LossWeights, DEFAULT_LAMBDA_GP};
use crate::mesh::LambdaMax;
use crate::render::RenderConfig;

/// Where the morphable model comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Binary model file; when absent a synthetic model is generated.
    pub path: Option<PathBuf>,
    pub vertices: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            path: None,
            vertices: 642,
            seed: 7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HierarchyConfig {
    /// Fraction of vertices kept at each coarsening.
    pub fraction: f64,
    pub lambda_max: LambdaMax,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        Self {
            fraction: 0.25,
            lambda_max: LambdaMax::default(),
        }
    }
}

/// Which objective terms are active. Disabling `vertex` and `adversarial`
/// gives the pixel-plus-identity ablation; the schedule is unchanged, so the
/// ablation makes no progress while the rendering weight is zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    #[serde(flatten)]
    pub weights: LossWeights,
    pub lambda_gp: f64,
    pub use_vertex: bool,
    pub use_adversarial: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            lambda_gp: DEFAULT_LAMBDA_GP,
            use_vertex: true,
            use_adversarial: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Critic updates per generator update.
    pub critic_steps: usize,
    pub learning_rate: f64,
    pub critic_learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 4,
            critic_steps: 5,
            learning_rate: 1e-4,
            critic_learning_rate: 1e-4,
            beta1: 0.0,
            beta2: 0.9,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub count: usize,
    /// Peak per-channel magnitude of the hidden albedo detail.
    pub detail_amplitude: f64,
    /// Laplacian eigenvectors mixed into the detail, by ascending eigenvalue.
    pub detail_first_mode: usize,
    pub detail_modes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            count: 16,
            detail_amplitude: 0.25,
            detail_first_mode: 16,
            detail_modes: 32,
        }
    }
}

/// Everything a run depends on. Serialized as TOML; every field has a default
/// so a partial file (or none) is valid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub hierarchy: HierarchyConfig,
    pub gcn: GcnConfig,
    pub render: RenderConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            model: ModelConfig::default(),
            hierarchy: HierarchyConfig::default(),
            gcn: GcnConfig::default(),
            render: RenderConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.gcn.validate()?;
        self.render.validate()?;
        self.loss.weights.validate()?;
        if !(self.hierarchy.fraction > 0.0 && self.hierarchy.fraction < 1.0) {
            return bad(format!("hierarchy fraction {} must lie in (0, 1)", self.hierarchy.fraction));
        }
        if self.model.path.is_none() && self.model.vertices < 4 {
            return bad(format!("model.vertices {} is below 4", self.model.vertices));
        }
        if !(self.loss.lambda_gp >= 0.0) {
            return bad("lambda_gp must be nonnegative".into());
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(t.learning_rate > 0.0 && t.critic_learning_rate > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !((0.0..1.0).contains(&t.beta1) && (0.0..1.0).contains(&t.beta2)) {
            return bad("betas must lie in [0, 1)".into());
        }
        if !(t.epsilon > 0.0) {
            return bad("epsilon must be positive".into());
        }
        let side = 1usize << crate::gcn::DISCRIMINATOR_LAYERS;
        if self.render.image_size % side != 0 {
            return bad(format!("render.image_size {} must be a multiple of {side}", self.render.image_size));
        }
        if self.data.count == 0 {
            return bad("data.count must be positive".into());
        }
        if !(self.data.detail_amplitude >= 0.0) {
            return bad("detail_amplitude must be nonnegative".into());
        }
        Ok(())
    }
}
