use rand::Rng;

use crate::error::{Error, Result};
use crate::moe::{ExpertKind, ModelConfig};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

/// Index of a tensor in [`ModelParams`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a tensor is used for; decides optimizer treatment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    Router,
    Norm,
    /// Non-trainable state (batch-norm running statistics).
    Buffer,
}

impl ParamRole {
    pub fn trainable(self) -> bool {
        self != ParamRole::Buffer
    }

    pub fn decays(self) -> bool {
        self == ParamRole::Weight
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub role: ParamRole,
    pub value: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertParams {
    pub kind: ExpertKind,
    /// Weight matrices in application order.
    pub weights: Vec<ParamId>,
    /// One bias per weight for the GCN kinds; a single bias for SAGE.
    pub biases: Vec<ParamId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouterParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub experts: Vec<ExpertParams>,
    pub router: RouterParams,
    pub norm: Option<NormParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Every tensor of the model in one flat, named store plus the structural
/// handles the forward pass needs.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    config: ModelConfig,
    tensors: Vec<Param<T>>,
    pub embed: LinearParams,
    pub layers: Vec<LayerParams>,
    pub head: LinearParams,
}

struct Builder<'r, T, R: ?Sized> {
    tensors: Vec<Param<T>>,
    rng: Option<&'r mut R>,
}

impl<T: Scalar, R: Rng + ?Sized> Builder<'_, T, R> {
    fn add(&mut self, name: String, role: ParamRole, rows: usize, cols: usize) -> ParamId {
        let value = match (role, self.rng.as_deref_mut()) {
            (ParamRole::Weight | ParamRole::Router, Some(rng)) if rows > 1 || cols > 1 => {
                glorot(rows, cols, rng)
            }
            (ParamRole::Norm, _) if name.ends_with("scale") => Matrix::filled(rows, cols, T::one()),
            (ParamRole::Buffer, _) if name.ends_with("running_var") => {
                Matrix::filled(rows, cols, T::one())
            }
            _ => Matrix::zeros(rows, cols),
        };
        self.tensors.push(Param { name, role, value });
        ParamId(self.tensors.len() - 1)
    }
}

fn glorot<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix<T> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| T::from_f64_lossy(rng.random_range(-a..a)))
}

impl<T: Scalar> ModelParams<T> {
    /// Glorot-uniform weights, zero biases, unit norm scales.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        Self::build(config, Some(rng))
    }

    /// Same structure as [`ModelParams::init`] with every weight zero.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        Self::build::<rand_chacha::ChaCha8Rng>(config, None)
    }

    fn build<R: Rng + ?Sized>(config: &ModelConfig, rng: Option<&mut R>) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let r = config.router_hidden();
        let k = config.experts;
        let mut b = Builder { tensors: Vec::new(), rng };
        let embed = LinearParams {
            weight: b.add("embed.weight".into(), ParamRole::Weight, config.in_dim, h),
            bias: b.add("embed.bias".into(), ParamRole::Bias, 1, h),
        };
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let mut experts = Vec::with_capacity(k);
            for (e, kind) in config.expert_kinds().into_iter().enumerate() {
                let p = format!("layers.{l}.experts.{e}");
                let (weights, biases) = match kind {
                    ExpertKind::GcnOneHop => (
                        vec![b.add(format!("{p}.weight"), ParamRole::Weight, h, h)],
                        vec![b.add(format!("{p}.bias"), ParamRole::Bias, 1, h)],
                    ),
                    ExpertKind::GcnTwoHop => {
                        let wa = b.add(format!("{p}.weight_a"), ParamRole::Weight, h, h);
                        let ba = b.add(format!("{p}.bias_a"), ParamRole::Bias, 1, h);
                        let wb = b.add(format!("{p}.weight_b"), ParamRole::Weight, h, h);
                        let bb = b.add(format!("{p}.bias_b"), ParamRole::Bias, 1, h);
                        (vec![wa, wb], vec![ba, bb])
                    }
                    ExpertKind::SageMeanOneHop => (
                        vec![
                            b.add(format!("{p}.weight_self"), ParamRole::Weight, h, h),
                            b.add(format!("{p}.weight_neighbor"), ParamRole::Weight, h, h),
                        ],
                        vec![b.add(format!("{p}.bias"), ParamRole::Bias, 1, h)],
                    ),
                };
                experts.push(ExpertParams {
                    kind,
                    weights,
                    biases,
                });
            }
            let p = format!("layers.{l}.router");
            let router = RouterParams {
                w1: b.add(format!("{p}.w1"), ParamRole::Router, h, r),
                b1: b.add(format!("{p}.b1"), ParamRole::Router, 1, r),
                w2: b.add(format!("{p}.w2"), ParamRole::Router, r, k),
                b2: b.add(format!("{p}.b2"), ParamRole::Router, 1, k),
            };
            let norm = config.batch_norm.then(|| {
                let p = format!("layers.{l}.norm");
                NormParams {
                    scale: b.add(format!("{p}.scale"), ParamRole::Norm, 1, h),
                    shift: b.add(format!("{p}.shift"), ParamRole::Norm, 1, h),
                    running_mean: b.add(format!("{p}.running_mean"), ParamRole::Buffer, 1, h),
                    running_var: b.add(format!("{p}.running_var"), ParamRole::Buffer, 1, h),
                }
            });
            layers.push(LayerParams {
                experts,
                router,
                norm,
            });
        }
        let head = LinearParams {
            weight: b.add("head.weight".into(), ParamRole::Weight, h, config.classes),
            bias: b.add("head.bias".into(), ParamRole::Bias, 1, config.classes),
        };
        Ok(ModelParams {
            config: config.clone(),
            tensors: b.tensors,
            embed,
            layers,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Param<T>] {
        &self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.tensors[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.tensors[id.0].value
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.tensors
            .iter()
            .filter(|p| p.role.trainable())
            .map(|p| p.value.len())
            .sum()
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Matrix<T>) -> Result<()> {
        let slot = &mut self.tensors[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::shape(
                "ModelParams::set",
                format!("{} is {:?}, got {:?}", slot.name, slot.value.shape(), value.shape()),
            ));
        }
        slot.value = value;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    role: p.role,
                    value: p.value.cast(),
                })
                .collect(),
            embed: self.embed.clone(),
            layers: self.layers.clone(),
            head: self.head.clone(),
        }
    }
}
