//! Training configuration, dotted-key overrides and config hashing.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gauge::OrthogonalGauge;
use crate::regularize::InfoRegConfig;
use crate::render::Vec3;
use crate::scene::SceneKind;

/// Which gauge transformation indexes the field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GaugeKind {
    /// Learned map from 3D to the unit square (texture-style field).
    Continuous,
    /// Learned codebook index per grid point.
    Discrete,
    /// Feature grid modulated by the information-invariant encoding.
    Infoinv,
    /// Fixed orthogonal projection onto one plane or three planes.
    Orthogonal,
    /// Fixed spatial hash into a feature table.
    Hash,
    /// Plain feature grid; the identity gauge.
    Grid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegKind {
    None,
    Inforeg,
    Cycle,
    Structural,
}

/// How a continuous gauge is parameterised.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContinuousVariant {
    /// MLP regressing the coordinate directly.
    Mlp,
    /// MLP offset around an orthogonal projection.
    Offset,
    /// Grid of coordinates interpolated over the cube.
    Grid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitKind {
    Tensor,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub kind: SceneKind,
    pub seed: u64,
    /// Optional directory with a `transforms.json` dataset; replaces the
    /// procedural scene for supervision when set.
    pub dataset: Option<String>,
    pub width: usize,
    pub height: usize,
    pub train_views: usize,
    pub test_views: usize,
    pub radius: f64,
    pub elevation: f64,
    pub fov: f64,
    /// Samples per ray for ground-truth rendering.
    pub gt_samples: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            kind: SceneKind::Sphere,
            seed: 0,
            dataset: None,
            width: 64,
            height: 64,
            train_views: 8,
            test_views: 4,
            radius: 2.2,
            elevation: 0.35,
            fov: 0.7,
            gt_samples: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinuousConfig {
    pub variant: ContinuousVariant,
    pub hidden: Vec<usize>,
    /// Scale of the gauge's initial output layer.
    pub out_scale: f64,
    pub grid_resolution: usize,
    pub grid_init_std: f64,
    /// Projection used by the offset variant and by the orthogonal gauge.
    pub projection: OrthogonalGauge,
}

impl Default for ContinuousConfig {
    fn default() -> Self {
        Self {
            variant: ContinuousVariant::Mlp,
            hidden: vec![64, 64],
            out_scale: 1.0,
            grid_resolution: 16,
            grid_init_std: 0.1,
            projection: OrthogonalGauge::Single { drop_axis: 2 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscreteConfig {
    pub resolutions: Vec<usize>,
    pub entries: usize,
    pub dim: usize,
    pub k: usize,
    pub logits: LogitKind,
    pub logit_init_std: f64,
    pub logit_hidden: Vec<usize>,
    /// Frequency bands encoding grid coordinates fed to MLP logits.
    pub logit_frequencies: usize,
    pub codebook_init_std: f64,
}

impl Default for DiscreteConfig {
    fn default() -> Self {
        Self {
            resolutions: vec![16, 32],
            entries: 64,
            dim: 16,
            k: 1,
            logits: LogitKind::Tensor,
            logit_init_std: 0.0,
            logit_hidden: vec![64],
            logit_frequencies: 0,
            codebook_init_std: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub resolution: usize,
    /// Feature channels; for the InfoInv gauge this must equal `2 * 3 * frequencies`.
    pub channels: usize,
    pub init_std: f64,
    pub frequencies: usize,
    pub learnable_frequencies: bool,
    /// For the InfoInv gauge, also feed the unmodulated grid feature to the head.
    pub keep_features: bool,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            resolution: 16,
            channels: 36,
            init_std: 0.1,
            frequencies: 6,
            learnable_frequencies: false,
            keep_features: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HashConfig {
    pub table_size: usize,
    pub resolutions: Vec<usize>,
    pub dim: usize,
    pub init_std: f64,
}

impl Default for HashConfig {
    fn default() -> Self {
        Self {
            table_size: 4096,
            resolutions: vec![16, 32],
            dim: 8,
            init_std: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    /// Hidden widths of MLP fields and texture networks.
    pub hidden: Vec<usize>,
    /// Hidden widths of the head after a feature lookup.
    pub head_hidden: Vec<usize>,
    pub view_dependent: bool,
    /// Frequency bands encoding the 3D input of texture-model density networks.
    pub density_frequencies: usize,
    /// Frequency bands encoding gauge coordinates fed to texture color networks.
    pub texture_frequencies: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128, 128, 128],
            head_hidden: vec![64, 64],
            view_dependent: false,
            density_frequencies: 4,
            texture_frequencies: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegConfig {
    pub kind: RegKind,
    pub inforeg: InfoRegConfig,
    /// Disables the MI term and keeps only the prior (cheap variant).
    pub prior_only: bool,
    /// Points per step fed to the regularizer.
    pub points: usize,
    /// Minimum radiance weight for a sample to enter the regularizer.
    pub min_weight: f64,
    pub cycle_weight: f64,
    pub structural_weight: f64,
    pub inverse_hidden: Vec<usize>,
    /// Regularizer active for `start <= step < end`.
    pub start: usize,
    pub end: Option<usize>,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            kind: RegKind::None,
            inforeg: InfoRegConfig::default(),
            prior_only: false,
            points: 256,
            min_weight: 1e-3,
            cycle_weight: 1.0,
            structural_weight: 1.0,
            inverse_hidden: vec![64, 64],
            start: 0,
            end: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub scene: SceneConfig,
    pub gauge: GaugeKind,
    pub continuous: ContinuousConfig,
    pub discrete: DiscreteConfig,
    pub grid: GridConfig,
    pub hash: HashConfig,
    pub field: FieldConfig,
    pub regularizer: RegConfig,
    pub rays_per_batch: usize,
    pub samples_per_ray: usize,
    pub eval_samples: usize,
    pub steps: usize,
    pub lr: f64,
    pub critic_lr: f64,
    /// Cosine decay of the learning rate to `lr * lr_final_ratio`.
    pub cosine: bool,
    pub lr_final_ratio: f64,
    pub seed: u64,
    pub background: Vec3,
    pub log_every: usize,
    /// Held-out PSNR cadence (0 disables).
    pub eval_every: usize,
    /// Side of the occupancy partition.
    pub occupancy_grid: usize,
    /// Cap on radiance-weighted points used for occupancy.
    pub occupancy_points: usize,
    /// Resolution multiplier of the training views when collecting
    /// surface samples for occupancy.
    pub occupancy_supersample: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            gauge: GaugeKind::Continuous,
            continuous: ContinuousConfig::default(),
            discrete: DiscreteConfig::default(),
            grid: GridConfig::default(),
            hash: HashConfig::default(),
            field: FieldConfig::default(),
            regularizer: RegConfig::default(),
            rays_per_batch: 256,
            samples_per_ray: 64,
            eval_samples: 64,
            steps: 2000,
            lr: 5e-4,
            critic_lr: 1e-3,
            cosine: false,
            lr_final_ratio: 0.1,
            seed: 0,
            background: [0.0; 3],
            log_every: 50,
            eval_every: 0,
            occupancy_grid: 64,
            occupancy_points: 200_000,
            occupancy_supersample: 4,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.regularizer.inforeg.validate()?;
        if self.rays_per_batch == 0 || self.samples_per_ray == 0 || self.eval_samples == 0 {
            return bad("rays_per_batch, samples_per_ray and eval_samples must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.critic_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.scene.width == 0 || self.scene.height == 0 || self.scene.train_views == 0 {
            return bad("scene needs a non-empty image size and at least one training view".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be positive".into());
        }
        if self.occupancy_grid == 0 || self.occupancy_supersample == 0 {
            return bad("occupancy_grid and occupancy_supersample must be positive".into());
        }
        let d = &self.discrete;
        if self.gauge == GaugeKind::Discrete && (d.k == 0 || d.k > d.entries) {
            return bad(format!("discrete.k must be in 1..={}, got {}", d.entries, d.k));
        }
        if self.gauge == GaugeKind::Infoinv && self.grid.channels != 6 * self.grid.frequencies {
            return bad(format!(
                "grid.channels must equal 2 * 3 * grid.frequencies = {} for the infoinv gauge, got {}",
                6 * self.grid.frequencies,
                self.grid.channels
            ));
        }
        let reg = self.regularizer.kind;
        let continuous = self.gauge == GaugeKind::Continuous;
        match reg {
            RegKind::Inforeg if !matches!(self.gauge, GaugeKind::Continuous | GaugeKind::Discrete) => {
                return bad("inforeg applies to learned continuous or discrete gauges".into())
            }
            RegKind::Cycle if !continuous => return bad("cycle regularizer needs a continuous gauge".into()),
            RegKind::Structural if !(continuous && self.continuous.variant == ContinuousVariant::Offset) => {
                return bad("structural regularizer needs continuous.variant = offset".into())
            }
            _ => {}
        }
        if reg == RegKind::Inforeg && continuous {
            let h = self.regularizer.inforeg.prior_samples;
            let side = (h as f64).sqrt().round() as usize;
            if side * side != h {
                return bad(format!("inforeg.prior_samples must be a perfect square, got {h}"));
            }
        }
        Ok(())
    }

    /// Applies `key=value` overrides; keys are dotted paths into the JSON
    /// form and values are parsed as JSON, falling back to a string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = serde_json::to_value(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let Some((key, raw)) = o.split_once('=') else {
                return Err(Error::Config(format!("override {o:?} is not key=value")));
            };
            let value = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut root, key.trim(), value)?;
        }
        let cfg: TrainConfig = serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hex SHA-256 of the canonical JSON form, truncated to 16 digits.
    pub fn hash_hex(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn hash(&self) -> u64 {
        u64::from_str_radix(&self.hash_hex(), 16).expect("hex digest")
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {part:?} is not inside an object")))?;
        if !obj.contains_key(*part) {
            return Err(Error::Config(format!("override {key:?}: unknown key {part:?}")));
        }
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(*part).expect("checked");
    }
    Err(Error::Config(format!("empty override key {key:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        let back = TrainConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn overrides_apply_dotted_keys() {
        let cfg = TrainConfig::default()
            .with_overrides(&["steps=0", "scene.kind=box", "regularizer.inforeg.gamma=0.5", "background=[1,1,1]"])
            .unwrap();
        assert_eq!(cfg.steps, 0);
        assert_eq!(cfg.scene.kind, SceneKind::Box);
        assert_eq!(cfg.regularizer.inforeg.gamma, 0.5);
        assert_eq!(cfg.background, [1.0; 3]);
        assert_ne!(cfg.hash(), TrainConfig::default().hash());
    }

    #[test]
    fn bad_overrides_are_rejected() {
        let cfg = TrainConfig::default();
        assert!(cfg.with_overrides(&["stepz=1"]).is_err());
        assert!(cfg.with_overrides(&["steps"]).is_err());
        assert!(cfg.with_overrides(&["steps=\"many\""]).is_err());
        assert!(cfg.with_overrides(&["regularizer.inforeg.gamma=-1"]).is_err());
    }

    #[test]
    fn unknown_json_fields_are_rejected() {
        assert!(TrainConfig::from_json(r#"{"stepz": 3}"#).is_err());
        let cfg = TrainConfig::from_json(r#"{"steps": 3}"#).unwrap();
        assert_eq!(cfg.steps, 3);
    }

    #[test]
    fn regularizer_compatibility() {
        let mut cfg = TrainConfig::default();
        cfg.regularizer.kind = RegKind::Structural;
        assert!(cfg.validate().is_err());
        cfg.continuous.variant = ContinuousVariant::Offset;
        cfg.validate().unwrap();
        cfg.gauge = GaugeKind::Hash;
        cfg.regularizer.kind = RegKind::Inforeg;
        assert!(cfg.validate().is_err());
    }
}
