//! Spectral-map evaluator: scores each k-space row of a reconstruction.

use akspace_autodiff::{Graph, NodeId, Padding, Real, Tensor};

use crate::error::{CoreError, Result};
use crate::models::reconstructor::IN_EPS;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const MAP_ABS_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvaluatorConfig {
    pub image_size: usize,
    /// The three stride-2 stages use 2x, 4x and 8x this many channels.
    pub base_channels: usize,
    pub embed_channels: usize,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            base_channels: 32,
            embed_channels: 6,
        }
    }
}

impl EvaluatorConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.image_size;
        if n % 8 != 0 || n < 16 {
            return Err(CoreError::Invalid(format!(
                "image size {n} must be a multiple of 8 and at least 16"
            )));
        }
        if self.base_channels == 0 || self.embed_channels == 0 {
            return Err(CoreError::Invalid("evaluator channels must be positive".into()));
        }
        Ok(())
    }
}

pub struct EvaluatorGraph<T: Real> {
    pub cfg: EvaluatorConfig,
    pub graph: Graph<T>,
    /// Reconstruction `[2, N, N]`.
    pub input: NodeId,
    /// One mask column `[N, 1, 1]`.
    pub mask_column: NodeId,
    /// Magnitude spectral maps `[N, N, N]`.
    pub maps: NodeId,
    /// Concatenated maps and tiled mask embedding `[N + E, N, N]`.
    pub features: NodeId,
    /// Per-row scores `[N, 1, 1]`.
    pub scores: NodeId,
}

fn row_selector<T: Real>(n: usize, row: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[2, n, n]);
    for plane in 0..2 {
        let off = (plane * n + row) * n;
        t.data_mut()[off..off + n].iter_mut().for_each(|v| *v = T::one());
    }
    t
}

impl<T: Real> EvaluatorGraph<T> {
    pub fn build(cfg: EvaluatorConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.image_size;
        let b = cfg.base_channels;
        let e = cfg.embed_channels;
        let mut g = Graph::new();
        let input = g.input("reconstruction", &[2, n, n]);
        let mask_column = g.input("mask_column", &[n, 1, 1]);

        let spectrum = g.complex_dft2(input)?;
        let mut maps = Vec::with_capacity(n);
        for row in 0..n {
            let sel = g.constant(row_selector(n, row));
            let single = g.mul(spectrum, sel)?;
            let map = g.complex_idft2(single)?;
            maps.push(g.complex_abs(map, MAP_ABS_EPS)?);
        }
        let maps = g.concat_channels(&maps)?;

        let ew = g.parameter("eval.embed.w", &[e, n, 1, 1])?;
        let eb = g.parameter("eval.embed.b", &[e])?;
        let embed = g.conv2d(mask_column, ew, Some(eb), 1, 0, Padding::Zero)?;
        let tiled = g.tile_spatial(embed, n, n)?;
        let features = g.concat_channels(&[maps, tiled])?;

        let mut h = features;
        let mut cin = n + e;
        for (j, mult) in [2, 4, 8].into_iter().enumerate() {
            let w = g.parameter(&format!("eval.conv{}.w", j + 1), &[mult * b, cin, 3, 3])?;
            if j == 0 {
                // no normalization here: IN would subtract the spatially constant mask embedding
                let bias = g.parameter("eval.conv1.b", &[mult * b])?;
                h = g.conv2d(h, w, Some(bias), 2, 1, Padding::Reflect)?;
            } else {
                h = g.conv2d(h, w, None, 2, 1, Padding::Reflect)?;
                h = g.instance_norm(h, IN_EPS)?;
            }
            h = g.leaky_relu(h, LEAKY_SLOPE)?;
            cin = mult * b;
        }
        let pooled = g.global_avg_pool(h)?;
        // the instance norms remove the replicated embedding, so the projection also sees
        // the mask column directly
        let pooled = g.concat_channels(&[pooled, mask_column])?;
        let ow = g.parameter("eval.out.w", &[n, cin + n, 1, 1])?;
        let ob = g.parameter("eval.out.b", &[n])?;
        let scores = g.conv2d(pooled, ow, Some(ob), 1, 0, Padding::Zero)?;
        Ok(Self {
            cfg,
            graph: g,
            input,
            mask_column,
            maps,
            features,
            scores,
        })
    }
}
