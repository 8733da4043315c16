//! Run configuration, serialized as TOML by the command-line tool.

use serde::{Deserialize, Serialize};

use crate::codec::quant::DEFAULT_MLP_BITS;
use crate::context::{Ablation, ContextConfig};
use crate::error::{Error, Result};
use crate::field::target::FieldKind;
use crate::grid::{GridConfig, GridDims, PlaneAxis};
use crate::occupancy::{ValidityCriterion, DEFAULT_OCCUPANCY_RESOLUTION, DEFAULT_OCCUPANCY_THRESHOLD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldSection {
    pub kind: FieldKind,
    pub seed: u64,
    pub channels: usize,
    pub occupancy_resolution: u32,
    pub occupancy_threshold: f64,
}

impl Default for FieldSection {
    fn default() -> Self {
        FieldSection {
            kind: FieldKind::SphereShell,
            seed: 0,
            channels: 1,
            occupancy_resolution: DEFAULT_OCCUPANCY_RESOLUTION,
            occupancy_threshold: DEFAULT_OCCUPANCY_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub levels: usize,
    pub min_res: u32,
    pub max_res: u32,
    pub table_size_log2: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub feature_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub context_levels: usize,
    /// First 3D level (1-based) coded with the frequency baseline. Defaults
    /// to one past the last level, i.e. context everywhere.
    pub disable_from: Option<usize>,
    pub ablation: Ablation,
    pub validity: ValidityCriterion,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            feature_dim: 8,
            hidden_width: 64,
            hidden_layers: 2,
            context_levels: 3,
            disable_from: None,
            ablation: Ablation::None,
            validity: ValidityCriterion::AreaOfEffect,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lambda: f64,
    pub iterations: usize,
    /// Reconstruction samples per iteration.
    pub batch_size: usize,
    /// Table slots sampled for the rate term per iteration.
    pub rate_samples: usize,
    /// Cap on contributing vertices per sampled slot during training.
    pub max_fusion_vertices: usize,
    /// Iterations between refreshes of frequencies and projected features.
    pub refresh_every: usize,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lambda: 4e-3,
            iterations: 1500,
            batch_size: 2048,
            rate_samples: 4096,
            max_fusion_vertices: 16,
            refresh_every: 25,
            seed: 0,
            log_every: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecSection {
    pub mlp_bits: u8,
}

impl Default for CodecSection {
    fn default() -> Self {
        CodecSection {
            mlp_bits: DEFAULT_MLP_BITS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Evaluation lattice: cell centers of a grid of this resolution that
    /// fall in occupied cells.
    pub resolution: u32,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { resolution: 64 }
    }
}

/// Everything a training run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub field: FieldSection,
    pub grid3d: GridSection,
    pub grid2d: GridSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub codec: CodecSection,
    pub eval: EvalSection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Laptop-scale defaults.
    pub fn desk() -> Self {
        TrainConfig {
            field: FieldSection::default(),
            grid3d: GridSection {
                levels: 8,
                min_res: 16,
                max_res: 256,
                table_size_log2: 15,
            },
            grid2d: GridSection {
                levels: 3,
                min_res: 64,
                max_res: 256,
                table_size_log2: 13,
            },
            model: ModelSection::default(),
            train: TrainSection::default(),
            codec: CodecSection::default(),
            eval: EvalSection::default(),
        }
    }

    /// Full-size setup: 16 3D levels up to 2048, 8 tri-plane levels, 2^19
    /// entries per table.
    pub fn paper_scale() -> Self {
        let mut c = Self::desk();
        c.grid3d = GridSection {
            levels: 16,
            min_res: 16,
            max_res: 2048,
            table_size_log2: 19,
        };
        c.grid2d = GridSection {
            levels: 8,
            min_res: 128,
            max_res: 2048,
            table_size_log2: 17,
        };
        c.model.feature_dim = 8;
        c.model.hidden_width = 64;
        c.train.iterations = 30_000;
        c.train.batch_size = 1 << 16;
        c.train.rate_samples = 1 << 16;
        c.eval.resolution = 128;
        c
    }

    /// Seconds-scale setup used by the test suites.
    pub fn small() -> Self {
        let mut c = Self::desk();
        c.grid3d = GridSection {
            levels: 6,
            min_res: 8,
            max_res: 64,
            table_size_log2: 13,
        };
        c.grid2d = GridSection {
            levels: 2,
            min_res: 32,
            max_res: 64,
            table_size_log2: 10,
        };
        c.model.feature_dim = 4;
        c.model.hidden_width = 32;
        c.train.iterations = 400;
        c.train.batch_size = 1024;
        c.train.rate_samples = 2048;
        c.train.log_every = 50;
        c.eval.resolution = 48;
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_over(text, &Self::desk())
    }

    /// Parses `text`, taking every key it omits from `base`.
    pub fn from_toml_over(text: &str, base: &TrainConfig) -> Result<Self> {
        let over: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(base).expect("config is always representable");
        merge(&mut merged, over);
        let c: TrainConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let f = self.model.feature_dim;
        let grid = |s: &GridSection, dims| GridConfig {
            dims,
            num_levels: s.levels,
            min_res: s.min_res,
            max_res: s.max_res,
            table_size_log2: s.table_size_log2,
            feature_dim: f,
        };
        let config = ModelConfig {
            volume: grid(&self.grid3d, GridDims::Volume),
            planes: grid(&self.grid2d, GridDims::Plane(PlaneAxis::Xy)),
            context: ContextConfig {
                feature_dim: f,
                context_levels: self.model.context_levels,
                disable_from: self.model.disable_from.unwrap_or(self.grid3d.levels + 1),
                ablation: self.model.ablation,
                volume_levels: self.grid3d.levels,
                plane_levels: self.grid2d.levels,
            },
            hidden_width: self.model.hidden_width,
            hidden_layers: self.model.hidden_layers,
            channels: self.field.channels,
            occupancy_resolution: self.field.occupancy_resolution,
            validity: self.model.validity,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        if self.train.lambda < 0.0 {
            return Err(Error::NegativeLambda(self.train.lambda));
        }
        if self.train.iterations == 0 || self.train.batch_size == 0 || self.train.rate_samples == 0 {
            return Err(Error::Config("iterations, batch_size and rate_samples must be positive".into()));
        }
        if self.train.max_fusion_vertices == 0 || self.train.refresh_every == 0 {
            return Err(Error::Config("max_fusion_vertices and refresh_every must be positive".into()));
        }
        if !(self.field.occupancy_threshold > 0.0) {
            return Err(Error::Config("occupancy_threshold must be positive".into()));
        }
        if self.eval.resolution == 0 {
            return Err(Error::Config("eval resolution must be positive".into()));
        }
        if !(1..=24).contains(&self.codec.mlp_bits) {
            return Err(Error::Config(format!("mlp_bits must be in 1..=24, got {}", self.codec.mlp_bits)));
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Shape of a model: everything the decoder must know to rebuild it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub volume: GridConfig,
    /// Shared by the three planes; the axis in `dims` is nominal.
    pub planes: GridConfig,
    pub context: ContextConfig,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub channels: usize,
    pub occupancy_resolution: u32,
    pub validity: ValidityCriterion,
}

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        self.volume.feature_dim
    }

    /// Width of the concatenated feature vector fed to the decoder network.
    pub fn net_input_width(&self) -> usize {
        self.feature_dim() * (self.volume.num_levels + 3 * self.planes.num_levels)
    }

    pub fn net_widths(&self) -> Vec<usize> {
        let mut w = vec![self.net_input_width()];
        w.extend(std::iter::repeat(self.hidden_width).take(self.hidden_layers));
        w.push(self.channels);
        w
    }

    pub fn validate(&self) -> Result<()> {
        self.volume.validate()?;
        self.planes.validate()?;
        self.context.validate()?;
        if self.planes.feature_dim != self.volume.feature_dim || self.context.feature_dim != self.volume.feature_dim {
            return Err(Error::Config("feature_dim must match across grids".into()));
        }
        if self.context.volume_levels != self.volume.num_levels || self.context.plane_levels != self.planes.num_levels {
            return Err(Error::Config("context level counts must match the grids".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if self.hidden_width == 0 || self.hidden_layers == 0 {
            return Err(Error::Config("decoder network needs at least one hidden layer".into()));
        }
        if self.occupancy_resolution == 0 || self.occupancy_resolution > u16::MAX as u32 {
            return Err(Error::Config("occupancy_resolution must be in 1..=65535".into()));
        }
        if self.volume.max_res > u16::MAX as u32 || self.planes.max_res > u16::MAX as u32 {
            return Err(Error::Config("resolutions must fit in 16 bits".into()));
        }
        if self.volume.num_levels > 255 || self.planes.num_levels > 255 || self.hidden_layers > 255 {
            return Err(Error::Config("level and layer counts must fit in 8 bits".into()));
        }
        if self.hidden_width > u16::MAX as usize {
            return Err(Error::Config("hidden_width must fit in 16 bits".into()));
        }
        self.volume.geometries()?;
        self.planes.geometries()?;
        Ok(())
    }
}
