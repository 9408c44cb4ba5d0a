//! Run configurations, read from TOML with every field optional.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{AdamConfig, ModelConfig};
use crate::renderer::RasterConfig;

fn parse<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

fn adam(lr: f64) -> AdamConfig {
    AdamConfig {
        lr,
        ..AdamConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    /// Camera hypotheses per instance.
    pub cameras: usize,
    /// Uniform azimuth jitter of the initial rig, in degrees.
    pub rig_jitter_deg: f64,
    pub phase_a_epochs: usize,
    pub phase_b_epochs: usize,
    /// Caps the number of phase-A steps (one step = one instance).
    pub max_steps: Option<usize>,
    pub weights: LossWeights,
    /// Decay of the running mean that sets the posterior temperature.
    pub posterior_decay: f64,
    pub adam: AdamConfig,
    /// Optimizer for each instance's camera multiplex.
    pub pose_adam: AdamConfig,
    /// Optimizer for the camera decoder in phase B.
    pub camera_adam: AdamConfig,
    pub model: ModelConfig,
    pub render: RasterConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: None,
            cameras: 8,
            rig_jitter_deg: 0.0,
            phase_a_epochs: 10,
            phase_b_epochs: 2,
            max_steps: None,
            weights: LossWeights::default(),
            posterior_decay: 0.9,
            adam: adam(1e-4),
            pose_adam: adam(1e-2),
            camera_adam: adam(1e-3),
            model: ModelConfig::default(),
            render: RasterConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = parse(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.render.validate()?;
        if self.cameras == 0 {
            return Err(Error::Config("need at least one camera".into()));
        }
        if self.render.height != self.model.image_size || self.render.width != self.model.image_size {
            return Err(Error::Config(format!(
                "render size {}x{} must equal the model image size {}",
                self.render.height, self.render.width, self.model.image_size
            )));
        }
        if !(0.0..1.0).contains(&self.posterior_decay) {
            return Err(Error::Config("posterior_decay must lie in [0, 1)".into()));
        }
        if !(self.weights.posterior_scale > 0.0) {
            return Err(Error::Config("weights.posterior_scale must be positive".into()));
        }
        for (name, a) in [("adam", &self.adam), ("pose_adam", &self.pose_adam), ("camera_adam", &self.camera_adam)] {
            if !(a.lr > 0.0) {
                return Err(Error::Config(format!("{name}.lr must be positive")));
            }
        }
        Ok(())
    }

    /// The configuration used by the smoke test: the default with a short
    /// run length.
    pub fn smoke() -> Self {
        Self {
            max_steps: Some(50),
            phase_b_epochs: 0,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub seed: u64,
    pub mesh_level: u32,
    pub cameras: usize,
    pub rig_jitter_deg: f64,
    pub steps: usize,
    /// Render side during the coarse stage.
    pub coarse_size: usize,
    /// Steps rendered at `coarse_size` with every hypothesis active.
    pub coarse_steps: usize,
    /// Hypotheses kept (by posterior) after the coarse stage; 0 keeps all.
    pub keep: usize,
    /// Hold the deformation at zero during the coarse stage.
    pub coarse_rigid: bool,
    /// Drop the pixel term during the coarse stage, so hypotheses are ranked
    /// by silhouette alone.
    pub coarse_silhouette: bool,
    /// `(H, W)` of the canonical texture chart.
    pub canonical: [usize; 2],
    pub flow_prior: f64,
    pub weights: LossWeights,
    pub posterior_decay: f64,
    pub shape_adam: AdamConfig,
    pub flow_adam: AdamConfig,
    pub pose_adam: AdamConfig,
    /// Evaluate the best-camera IoU every this many steps (0 disables).
    pub check_every: usize,
    /// Stop once the best-camera IoU reaches this value.
    pub stop_iou: Option<f64>,
    pub render: RasterConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mesh_level: 3,
            cameras: 8,
            rig_jitter_deg: 0.0,
            steps: 2000,
            coarse_size: 32,
            coarse_steps: 300,
            keep: 2,
            coarse_rigid: true,
            coarse_silhouette: true,
            canonical: [32, 64],
            flow_prior: 0.5,
            weights: LossWeights {
                task: 0.0,
                ..LossWeights::default()
            },
            posterior_decay: 0.9,
            shape_adam: adam(5e-3),
            flow_adam: adam(2e-2),
            pose_adam: adam(2e-2),
            check_every: 50,
            stop_iou: None,
            render: RasterConfig::default(),
        }
    }
}

impl FitConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = parse(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.render.validate()?;
        if self.cameras == 0 {
            return Err(Error::Config("need at least one camera".into()));
        }
        if self.canonical[0] < 2 || self.canonical[1] < 2 {
            return Err(Error::Config("canonical chart must be at least 2x2".into()));
        }
        if !(0.0..1.0).contains(&self.flow_prior) {
            return Err(Error::Config("flow_prior must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.posterior_decay) {
            return Err(Error::Config("posterior_decay must lie in [0, 1)".into()));
        }
        if self.coarse_steps > 0 && (self.coarse_size == 0 || self.render.height % self.coarse_size != 0) {
            return Err(Error::Config(format!(
                "coarse_size {} must divide the render height {}",
                self.coarse_size, self.render.height
            )));
        }
        Ok(())
    }
}
