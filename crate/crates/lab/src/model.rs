//! Encoder backbone f and projection head g. Two backbones: a CIFAR-adapted
//! 18-layer residual network (3x3 stem, no initial pooling) and a tiny MLP
//! that lets the full pipeline run on CPU in minutes.

use candle_core::{DType, Device, Tensor};
use candle_nn::{
    batch_norm, conv2d, linear, BatchNorm, Conv2d, Conv2dConfig, Linear, Module, ModuleT,
    VarBuilder, VarMap,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    BadSpec(String),
    #[error("input shape {got:?} does not match the expected {expected}")]
    ShapeMismatch { got: Vec<usize>, expected: String },
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error("checkpoint sidecar error: {0}")]
    Sidecar(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    Resnet18Cifar,
    TinyMlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub backbone: Backbone,
    /// Dimension of h = f(x).
    pub backbone_output_dim: usize,
    pub projection_hidden_dim: usize,
    /// Dimension of z = g(h).
    pub projection_output_dim: usize,
}

impl ModelSpec {
    /// Input spatial size each backbone accepts.
    pub fn input_side(&self) -> usize {
        match self.backbone {
            Backbone::Resnet18Cifar => 32,
            Backbone::TinyMlp => 8,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.projection_output_dim < 2 {
            return Err(ModelError::BadSpec(format!(
                "projection_output_dim must be >= 2, got {}",
                self.projection_output_dim
            )));
        }
        if self.projection_hidden_dim == 0 || self.backbone_output_dim == 0 {
            return Err(ModelError::BadSpec("dimensions must be positive".into()));
        }
        if self.backbone == Backbone::Resnet18Cifar && self.backbone_output_dim != 512 {
            return Err(ModelError::BadSpec(format!(
                "resnet18-cifar produces 512-dim features, got backbone_output_dim {}",
                self.backbone_output_dim
            )));
        }
        Ok(())
    }
}

struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    downsample: Option<(Conv2d, BatchNorm)>,
}

impl BasicBlock {
    fn new(vb: VarBuilder, in_ch: usize, out_ch: usize, stride: usize) -> candle_core::Result<Self> {
        let cfg3 = |stride| Conv2dConfig {
            stride,
            padding: 1,
            ..Default::default()
        };
        let conv1 = conv2d(in_ch, out_ch, 3, cfg3(stride), vb.pp("conv1"))?;
        let bn1 = batch_norm(out_ch, 1e-5, vb.pp("bn1"))?;
        let conv2 = conv2d(out_ch, out_ch, 3, cfg3(1), vb.pp("conv2"))?;
        let bn2 = batch_norm(out_ch, 1e-5, vb.pp("bn2"))?;
        let downsample = if stride != 1 || in_ch != out_ch {
            let cfg1 = Conv2dConfig {
                stride,
                ..Default::default()
            };
            let conv = conv2d(in_ch, out_ch, 1, cfg1, vb.pp("down_conv"))?;
            let bn = batch_norm(out_ch, 1e-5, vb.pp("down_bn"))?;
            Some((conv, bn))
        } else {
            None
        };
        Ok(Self {
            conv1,
            bn1,
            conv2,
            bn2,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let out = self.bn1.forward_t(&self.conv1.forward(x)?, train)?.relu()?;
        let out = self.bn2.forward_t(&self.conv2.forward(&out)?, train)?;
        let shortcut = match &self.downsample {
            Some((conv, bn)) => bn.forward_t(&conv.forward(x)?, train)?,
            None => x.clone(),
        };
        (out + shortcut)?.relu()
    }
}

enum Encoder {
    Resnet {
        stem_conv: Conv2d,
        stem_bn: BatchNorm,
        layers: Vec<BasicBlock>,
    },
    Mlp {
        hidden: Linear,
    },
}

struct ProjectionHead {
    fc1: Linear,
    fc2: Linear,
}

/// Backbone plus projection head with its parameter store.
pub struct Model {
    spec: ModelSpec,
    encoder: Encoder,
    head: ProjectionHead,
    varmap: VarMap,
    device: Device,
}

/// JSON sidecar written next to every checkpoint blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSidecar {
    pub model_spec: ModelSpec,
    pub epoch: usize,
    pub run_id: String,
}

impl Model {
    pub fn new(spec: &ModelSpec, device: &Device) -> Result<Self, ModelError> {
        spec.validate()?;
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, device);

        let encoder = match spec.backbone {
            Backbone::Resnet18Cifar => {
                let stem_conv = conv2d(
                    3,
                    64,
                    3,
                    Conv2dConfig {
                        padding: 1,
                        ..Default::default()
                    },
                    vb.pp("stem.conv"),
                )?;
                let stem_bn = batch_norm(64, 1e-5, vb.pp("stem.bn"))?;
                let mut layers = Vec::new();
                let plan = [(64, 64, 1), (64, 128, 2), (128, 256, 2), (256, 512, 2)];
                for (stage, &(in_ch, out_ch, stride)) in plan.iter().enumerate() {
                    layers.push(BasicBlock::new(
                        vb.pp(format!("layer{stage}.block0")),
                        in_ch,
                        out_ch,
                        stride,
                    )?);
                    layers.push(BasicBlock::new(
                        vb.pp(format!("layer{stage}.block1")),
                        out_ch,
                        out_ch,
                        1,
                    )?);
                }
                Encoder::Resnet {
                    stem_conv,
                    stem_bn,
                    layers,
                }
            }
            Backbone::TinyMlp => {
                let in_dim = 3 * spec.input_side() * spec.input_side();
                Encoder::Mlp {
                    hidden: linear(in_dim, spec.backbone_output_dim, vb.pp("encoder.hidden"))?,
                }
            }
        };

        let head = ProjectionHead {
            fc1: linear(
                spec.backbone_output_dim,
                spec.projection_hidden_dim,
                vb.pp("head.fc1"),
            )?,
            fc2: linear(
                spec.projection_hidden_dim,
                spec.projection_output_dim,
                vb.pp("head.fc2"),
            )?,
        };

        Ok(Self {
            spec: *spec,
            encoder,
            head,
            varmap,
            device: device.clone(),
        })
    }

    /// Re-draws every randomly initialized parameter from a seeded stream so
    /// model construction is reproducible across processes (the default
    /// builder draws from an unseedable process-global source). Batch-norm
    /// parameters and running statistics keep their constant initialization.
    /// Each parameter's stream is derived from (seed, name), so the result is
    /// independent of iteration order.
    pub fn reseed(&self, seed: u64) -> Result<(), ModelError> {
        use rand::{Rng, SeedableRng};
        use std::hash::{Hash, Hasher};

        let data = self.varmap.data().lock().unwrap();
        for (name, var) in data.iter() {
            let last = name.rsplit('.').next().unwrap_or(name);
            let in_bn = name.split('.').any(|part| part.contains("bn"));
            if in_bn || last.starts_with("running") {
                continue;
            }
            let dims = var.dims().to_vec();
            let tensor = if last == "bias" || dims.len() < 2 {
                Tensor::zeros(dims.as_slice(), var.dtype(), &self.device)?
            } else {
                let fan_in: usize = dims[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                let mut hasher = std::collections::hash_map::DefaultHasher::new();
                name.hash(&mut hasher);
                let mut rng =
                    rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ hasher.finish());
                let n: usize = dims.iter().product();
                let values: Vec<f32> = (0..n)
                    .map(|_| rng.gen_range(-bound..bound) as f32)
                    .collect();
                Tensor::from_vec(values, dims.as_slice(), &self.device)?
                    .to_dtype(var.dtype())?
            };
            var.set(&tensor)?;
        }
        Ok(())
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    pub fn trainable_vars(&self) -> Vec<candle_core::Var> {
        self.varmap.all_vars()
    }

    fn check_input(&self, images: &Tensor) -> Result<(), ModelError> {
        let dims = images.dims();
        let side = self.spec.input_side();
        if dims.len() != 4 || dims[1] != 3 || dims[2] != side || dims[3] != side {
            return Err(ModelError::ShapeMismatch {
                got: dims.to_vec(),
                expected: format!("(B, 3, {side}, {side})"),
            });
        }
        Ok(())
    }

    /// h = f(x). `train` selects batch-norm statistics mode.
    pub fn encode(&self, images: &Tensor, train: bool) -> Result<Tensor, ModelError> {
        self.check_input(images)?;
        let h = match &self.encoder {
            Encoder::Resnet {
                stem_conv,
                stem_bn,
                layers,
            } => {
                let mut x = stem_bn.forward_t(&stem_conv.forward(images)?, train)?.relu()?;
                for block in layers {
                    x = block.forward(&x, train)?;
                }
                // Global average pool to (B, 512).
                x.mean(candle_core::D::Minus1)?.mean(candle_core::D::Minus1)?
            }
            Encoder::Mlp { hidden } => {
                let flat = images.flatten_from(1)?;
                hidden.forward(&flat)?.relu()?
            }
        };
        Ok(h)
    }

    /// z = g(h): two-layer perceptron with one nonlinearity, not normalized
    /// (normalization lives inside the cosine similarity).
    pub fn project(&self, h: &Tensor) -> Result<Tensor, ModelError> {
        let dims = h.dims();
        if dims.len() != 2 || dims[1] != self.spec.backbone_output_dim {
            return Err(ModelError::ShapeMismatch {
                got: dims.to_vec(),
                expected: format!("(B, {})", self.spec.backbone_output_dim),
            });
        }
        Ok(self.head.fc2.forward(&self.head.fc1.forward(h)?.relu()?)?)
    }

    /// Saves the parameter blob plus a JSON sidecar describing it.
    pub fn save_checkpoint(
        &self,
        path: &std::path::Path,
        epoch: usize,
        run_id: &str,
    ) -> Result<(), ModelError> {
        self.varmap.save(path)?;
        let sidecar = CheckpointSidecar {
            model_spec: self.spec,
            epoch,
            run_id: run_id.to_string(),
        };
        let json = serde_json::to_string_pretty(&sidecar).map_err(|e| ModelError::Sidecar(e.to_string()))?;
        std::fs::write(path.with_extension("json"), json)
            .map_err(|e| ModelError::Sidecar(e.to_string()))?;
        Ok(())
    }

    /// Loads parameters saved by [`save_checkpoint`] into this model.
    pub fn load_checkpoint(&mut self, path: &std::path::Path) -> Result<CheckpointSidecar, ModelError> {
        let sidecar_path = path.with_extension("json");
        let text = std::fs::read_to_string(&sidecar_path)
            .map_err(|e| ModelError::Sidecar(format!("{}: {e}", sidecar_path.display())))?;
        let sidecar: CheckpointSidecar =
            serde_json::from_str(&text).map_err(|e| ModelError::Sidecar(e.to_string()))?;
        if sidecar.model_spec != self.spec {
            return Err(ModelError::BadSpec(format!(
                "checkpoint was written for {:?}, model is {:?}",
                sidecar.model_spec, self.spec
            )));
        }
        self.varmap.load(path)?;
        Ok(sidecar)
    }
}
