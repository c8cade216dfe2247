//! Reconstructor and evaluator networks, parameter initialization and checkpoints.

pub mod checkpoint;
pub mod evaluator;
pub mod reconstructor;

use std::path::Path;

use akspace_autodiff::{Executor, ParamSet, Real, Tensor};
use rand::Rng;

use crate::data::SimRng;
use crate::error::{CoreError, Result};
use crate::kspace::{data_consistency, ComplexImage, Domain, RealGrid, SamplingMask};

pub use evaluator::{EvaluatorConfig, EvaluatorGraph};
pub use reconstructor::{ReconstructorConfig, ReconstructorGraph};

pub const RECON_PREFIX: &str = "recon.";
pub const EVAL_PREFIX: &str = "eval.";

/// Per-cascade reconstructions and variances; the last entry is the final output.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionResult {
    pub per_cascade: Vec<(ComplexImage, RealGrid)>,
}

impl ReconstructionResult {
    pub fn r(&self) -> &ComplexImage {
        &self.per_cascade.last().expect("at least one cascade").0
    }

    pub fn u(&self) -> &RealGrid {
        &self.per_cascade.last().expect("at least one cascade").1
    }
}

/// Raw per-row evaluator outputs (not clamped to `[0, 1]`).
#[derive(Clone, Debug, PartialEq)]
pub struct EvaluatorScores {
    pub values: Vec<f64>,
}

pub fn image_tensor<T: Real>(img: &ComplexImage) -> Tensor<T> {
    let n = img.size();
    Tensor::from_vec(&[2, n, n], img.planes().iter().map(|&v| T::of(v)).collect())
        .expect("planes match shape")
}

pub fn tensor_image<T: Real>(t: &Tensor<T>, domain: Domain) -> Result<ComplexImage> {
    let n = t.shape()[1];
    let planes: Vec<f64> = t.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    ComplexImage::from_planes(n, &planes, domain)
}

pub fn mask_tensor<T: Real>(mask: &SamplingMask) -> Tensor<T> {
    Tensor::from_vec(&[mask.n_rows()], mask.as_f64().iter().map(|&v| T::of(v)).collect())
        .expect("length matches")
}

/// Log of the unobserved row fraction, replicated over a `[1, N, N]` plane. The fraction is
/// floored at half a row so a full mask stays finite.
pub fn log_unobserved_tensor<T: Real>(mask: &SamplingMask) -> Tensor<T> {
    let n = mask.n_rows();
    let v = unobserved_fraction(mask).max(0.5 / n as f64).ln();
    Tensor::from_vec(&[1, n, n], vec![T::of(v); n * n]).expect("length matches")
}

pub fn unobserved_fraction(mask: &SamplingMask) -> f64 {
    1.0 - mask.observed_count() as f64 / mask.n_rows() as f64
}

pub fn mask_column_tensor<T: Real>(mask: &SamplingMask) -> Tensor<T> {
    Tensor::from_vec(&[mask.n_rows(), 1, 1], mask.as_f64().iter().map(|&v| T::of(v)).collect())
        .expect("length matches")
}

/// Uniform fan-in initialization, `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`, for every
/// weight; biases and the final projection of each cascade start at zero.
pub fn init_params<T: Real>(specs: &[(String, Vec<usize>)], rng: &mut SimRng) -> Result<ParamSet<T>> {
    let mut params = ParamSet::new();
    for (name, shape) in specs {
        let numel: usize = shape.iter().product();
        let zero = name.ends_with(".b") || (name.starts_with(RECON_PREFIX) && name.contains(".out."));
        let data = if zero {
            vec![T::zero(); numel]
        } else {
            let fan_in = if name.contains(".dec") {
                // transposed conv [cin, cout, k, k] at stride 2: each output sees cin * (k/2)^2 taps
                shape[0] * shape[2] * shape[3] / 4
            } else {
                shape[1] * shape[2] * shape[3]
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            (0..numel).map(|_| T::of(rng.gen_range(-bound..bound))).collect()
        };
        params.push(name, Tensor::from_vec(shape, data)?)?;
    }
    Ok(params)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub recon: ReconstructorConfig,
    pub eval: EvaluatorConfig,
}

impl ModelConfig {
    pub fn desk(image_size: usize) -> Self {
        Self {
            recon: ReconstructorConfig {
                image_size,
                ..Default::default()
            },
            eval: EvaluatorConfig {
                image_size,
                ..Default::default()
            },
        }
    }

    /// Recovers the architecture from parameter names and shapes.
    pub fn infer(params: &ParamSet<f32>) -> Result<Self> {
        let shape = |name: &str| -> Result<Vec<usize>> {
            params
                .get(name)
                .map(|t| t.shape().to_vec())
                .ok_or_else(|| CoreError::Invalid(format!("checkpoint lacks `{name}`")))
        };
        let count = |f: &dyn Fn(usize) -> String| (0..).take_while(|&k| params.get(&f(k)).is_some()).count();
        let cascades = count(&|k| format!("recon.c{k}.enc1.w"));
        let resblocks = count(&|j| format!("recon.c0.res{j}.conv1.w"));
        let base = shape("recon.c0.enc1.w")?[0];
        let out = shape("eval.out.w")?;
        let cfg = Self {
            recon: ReconstructorConfig {
                cascades,
                base_channels: base,
                resblocks,
                image_size: out[0],
                ..Default::default()
            },
            eval: EvaluatorConfig {
                image_size: out[0],
                base_channels: shape("eval.conv1.w")?[0] / 2,
                embed_channels: shape("eval.embed.w")?[0],
            },
        };
        cfg.recon.validate()?;
        cfg.eval.validate()?;
        Ok(cfg)
    }
}

/// Reconstructor and evaluator parameters together with inference graphs.
pub struct Model {
    pub config: ModelConfig,
    pub recon_params: ParamSet<f32>,
    pub eval_params: ParamSet<f32>,
    recon_graph: ReconstructorGraph<f32>,
    eval_graph: EvaluatorGraph<f32>,
}

impl Model {
    pub fn new(config: ModelConfig, recon_params: ParamSet<f32>, eval_params: ParamSet<f32>) -> Result<Self> {
        if config.recon.image_size != config.eval.image_size {
            return Err(CoreError::Invalid("reconstructor and evaluator sizes differ".into()));
        }
        let recon_graph = ReconstructorGraph::build(config.recon, false)?;
        let eval_graph = EvaluatorGraph::build(config.eval)?;
        recon_params.check_against(&recon_graph.graph)?;
        eval_params.check_against(&eval_graph.graph)?;
        for t in recon_params.tensors().iter().chain(eval_params.tensors()) {
            if !t.all_finite() {
                return Err(CoreError::Invalid("non-finite model parameter".into()));
            }
        }
        Ok(Self {
            config,
            recon_params,
            eval_params,
            recon_graph,
            eval_graph,
        })
    }

    /// Freshly initialized model.
    pub fn init(config: ModelConfig, rng: &mut SimRng) -> Result<Self> {
        let rg = ReconstructorGraph::<f32>::build(config.recon, false)?;
        let eg = EvaluatorGraph::<f32>::build(config.eval)?;
        let recon = init_params(&rg.graph.parameter_specs(), rng)?;
        let eval = init_params(&eg.graph.parameter_specs(), rng)?;
        Self::new(config, recon, eval)
    }

    pub fn image_size(&self) -> usize {
        self.config.recon.image_size
    }

    fn check_inputs(&self, img: &ComplexImage, mask: &SamplingMask) -> Result<()> {
        let n = self.image_size();
        if img.size() != n || mask.n_rows() != n {
            return Err(CoreError::SizeMismatch(format!(
                "model expects {n}x{n}, got a {0}x{0} image and {1}-row mask",
                img.size(),
                mask.n_rows()
            )));
        }
        if !mask.is_symmetric() {
            return Err(CoreError::Contract("mask is not conjugate-symmetric".into()));
        }
        if img.domain() != Domain::Image {
            return Err(CoreError::Domain {
                expected: "image",
                actual: "k-space",
            });
        }
        Ok(())
    }

    /// Runs every cascade on a zero-filled input.
    ///
    /// Each returned `r^k` has its observed rows re-copied from `zero_filled` in f64, so
    /// the hard-copy property holds to double precision despite f32 network arithmetic.
    pub fn reconstruct(&self, zero_filled: &ComplexImage, mask: &SamplingMask) -> Result<ReconstructionResult> {
        self.check_inputs(zero_filled, mask)?;
        let net = &self.recon_graph;
        let input = image_tensor::<f32>(zero_filled);
        let mask_t = mask_tensor::<f32>(mask);
        let mut exec = Executor::new(&net.graph);
        exec.bind(net.input, &input)?;
        exec.bind(net.mask, &mask_t)?;
        let log_unobserved = log_unobserved_tensor::<f32>(mask);
        exec.bind(net.log_unobserved, &log_unobserved)?;
        exec.bind_params(&self.recon_params)?;
        exec.forward()?;
        let n = self.image_size();
        let mut per_cascade = Vec::with_capacity(net.outputs.len());
        for (&r, &lv) in net.outputs.iter().zip(&net.log_vars) {
            let raw = tensor_image(exec.value(r)?, Domain::Image)?;
            let r = data_consistency(&raw, zero_filled, mask)?;
            let u: Vec<f64> = exec.value(lv)?.data().iter().map(|&s| (s as f64).exp()).collect();
            per_cascade.push((r, RealGrid::new(n, n, u)?));
        }
        Ok(ReconstructionResult { per_cascade })
    }

    pub fn evaluate(&self, r: &ComplexImage, mask: &SamplingMask) -> Result<EvaluatorScores> {
        self.check_inputs(r, mask)?;
        let net = &self.eval_graph;
        let input = image_tensor::<f32>(r);
        let column = mask_column_tensor::<f32>(mask);
        let mut exec = Executor::new(&net.graph);
        exec.bind(net.input, &input)?;
        exec.bind(net.mask_column, &column)?;
        exec.bind_params(&self.eval_params)?;
        exec.forward()?;
        let values: Vec<f64> = exec.value(net.scores)?.data().iter().map(|&v| v as f64).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Invalid("evaluator produced non-finite scores".into()));
        }
        Ok(EvaluatorScores { values })
    }

    /// Both parameter sets in one list, reconstructor first.
    pub fn all_params(&self) -> Result<ParamSet<f32>> {
        let mut all = ParamSet::new();
        for (name, t) in self.recon_params.iter().chain(self.eval_params.iter()) {
            all.push(name, t.clone())?;
        }
        Ok(all)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_params(path, &self.all_params()?)
    }

    /// Loads a checkpoint, inferring the architecture from its tensors.
    pub fn load(path: &Path) -> Result<Self> {
        let all = checkpoint::load_params(path)?;
        let config = ModelConfig::infer(&all).map_err(|e| CoreError::format(path, e.to_string()))?;
        Self::from_combined(config, all).map_err(|e| CoreError::format(path, e.to_string()))
    }

    /// Loads a checkpoint that must match `config` exactly.
    pub fn load_with_config(path: &Path, config: ModelConfig) -> Result<Self> {
        let all = checkpoint::load_params(path)?;
        Self::from_combined(config, all).map_err(|e| CoreError::format(path, e.to_string()))
    }

    fn from_combined(config: ModelConfig, all: ParamSet<f32>) -> Result<Self> {
        let (mut recon, mut eval) = (ParamSet::new(), ParamSet::new());
        for (name, t) in all.iter() {
            if name.starts_with(RECON_PREFIX) {
                recon.push(name, t.clone())?;
            } else if name.starts_with(EVAL_PREFIX) {
                eval.push(name, t.clone())?;
            } else {
                return Err(CoreError::Invalid(format!("unexpected parameter `{name}`")));
            }
        }
        let model = Self::new(config, recon, eval)?;
        let expected = model.recon_graph.graph.parameters().len() + model.eval_graph.graph.parameters().len();
        if all.len() != expected {
            return Err(CoreError::Invalid(format!(
                "checkpoint holds {} tensors, architecture has {expected}",
                all.len()
            )));
        }
        Ok(model)
    }
}
