//! Cascaded encoder/residual/decoder reconstructor with data consistency and a log-variance head.

use akspace_autodiff::{Graph, NodeId, Padding, Real};

use crate::error::{CoreError, Result};

pub const IN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReconstructorConfig {
    pub cascades: usize,
    pub base_channels: usize,
    pub resblocks: usize,
    pub image_size: usize,
    pub log_var_min: f64,
    pub log_var_max: f64,
}

impl Default for ReconstructorConfig {
    fn default() -> Self {
        Self {
            cascades: 3,
            base_channels: 32,
            resblocks: 3,
            image_size: 32,
            log_var_min: -10.0,
            log_var_max: 10.0,
        }
    }
}

impl ReconstructorConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.image_size;
        if self.cascades == 0 {
            return Err(CoreError::Invalid("at least one cascade is required".into()));
        }
        if self.base_channels < 4 || self.base_channels % 2 != 0 {
            return Err(CoreError::Invalid(format!(
                "base channels {} must be even and at least 4",
                self.base_channels
            )));
        }
        // three stride-2 stages with reflection padding need at least 2x2 at the bottleneck
        if n % 8 != 0 || n < 16 {
            return Err(CoreError::Invalid(format!(
                "image size {n} must be a multiple of 8 and at least 16"
            )));
        }
        if !(self.log_var_min < self.log_var_max) {
            return Err(CoreError::Invalid("empty log-variance clamp range".into()));
        }
        Ok(())
    }
}

/// Node handles of a built reconstructor graph.
pub struct ReconstructorGraph<T: Real> {
    pub cfg: ReconstructorConfig,
    pub graph: Graph<T>,
    /// Zero-filled input `[2, N, N]`.
    pub input: NodeId,
    /// Row mask `[N]`.
    pub mask: NodeId,
    /// `[1, N, N]` plane of log unobserved-row fraction, added to every log-variance head.
    pub log_unobserved: NodeId,
    /// Ground truth `[2, N, N]`, present when built with a loss.
    pub target: Option<NodeId>,
    /// Per-cascade reconstructions `[2, N, N]`.
    pub outputs: Vec<NodeId>,
    /// Per-cascade clamped log-variances `[1, N, N]`.
    pub log_vars: Vec<NodeId>,
    /// Per-cascade Gaussian NLL and their mean, present when built with a loss.
    pub nll: Vec<NodeId>,
    pub loss: Option<NodeId>,
}

fn conv_in_relu<T: Real>(
    g: &mut Graph<T>,
    x: NodeId,
    name: &str,
    cin: usize,
    cout: usize,
    stride: usize,
) -> Result<NodeId> {
    let w = g.parameter(&format!("{name}.w"), &[cout, cin, 3, 3])?;
    let y = g.conv2d(x, w, None, stride, 1, Padding::Reflect)?;
    let y = g.instance_norm(y, IN_EPS)?;
    Ok(g.relu(y)?)
}

fn deconv_in_relu<T: Real>(g: &mut Graph<T>, x: NodeId, name: &str, cin: usize, cout: usize) -> Result<NodeId> {
    let w = g.parameter(&format!("{name}.w"), &[cin, cout, 4, 4])?;
    let y = g.transposed_conv2d(x, w, None, 2, 1)?;
    let y = g.instance_norm(y, IN_EPS)?;
    Ok(g.relu(y)?)
}

/// Data consistency: observed rows of the result's spectrum are copied from `measured`.
pub fn dc_layer<T: Real>(g: &mut Graph<T>, f_out: NodeId, measured: NodeId, mask: NodeId) -> Result<NodeId> {
    let fk = g.complex_dft2(f_out)?;
    let mixed = g.row_mask_mix(fk, measured, mask)?;
    Ok(g.complex_idft2(mixed)?)
}

/// Pixel-averaged Gaussian NLL of `r` against `x` with variance `exp(log_var)`.
pub fn nll_node<T: Real>(g: &mut Graph<T>, r: NodeId, x: NodeId, log_var: NodeId) -> Result<NodeId> {
    let d = g.sub(r, x)?;
    let d2 = g.mul(d, d)?;
    let re = g.slice_channels(d2, 0, 1)?;
    let im = g.slice_channels(d2, 1, 2)?;
    let sq = g.add(re, im)?;
    let neg = g.affine(log_var, -1.0, 0.0)?;
    let inv_u = g.exp(neg)?;
    let fit = g.mul(sq, inv_u)?;
    let fit = g.affine(fit, 0.5, 0.0)?;
    let norm = g.affine(log_var, 0.5, 0.5 * (2.0 * std::f64::consts::PI).ln())?;
    let per_pixel = g.add(fit, norm)?;
    Ok(g.reduce_mean(per_pixel)?)
}

impl<T: Real> ReconstructorGraph<T> {
    pub fn build(cfg: ReconstructorConfig, with_loss: bool) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.image_size;
        let b = cfg.base_channels;
        let mut g = Graph::new();
        let input = g.input("zero_filled", &[2, n, n]);
        let mask = g.input("mask", &[n]);
        let log_unobserved = g.input("log_unobserved", &[1, n, n]);
        let target = with_loss.then(|| g.input("target", &[2, n, n]));
        let measured = g.complex_dft2(input)?;

        let mut prev = input;
        let mut carry: Option<NodeId> = None;
        let (mut outputs, mut log_vars) = (Vec::new(), Vec::new());
        for k in 0..cfg.cascades {
            let p = format!("recon.c{k}");
            let mut h = conv_in_relu(&mut g, prev, &format!("{p}.enc1"), 2, b, 2)?;
            h = conv_in_relu(&mut g, h, &format!("{p}.enc2"), b, 2 * b, 2)?;
            h = conv_in_relu(&mut g, h, &format!("{p}.enc3"), 2 * b, 4 * b, 2)?;
            if let Some(c) = carry {
                h = g.add(h, c)?;
            }
            for j in 0..cfg.resblocks {
                let rp = format!("{p}.res{j}");
                let w1 = g.parameter(&format!("{rp}.conv1.w"), &[4 * b, 4 * b, 3, 3])?;
                let w2 = g.parameter(&format!("{rp}.conv2.w"), &[4 * b, 4 * b, 3, 3])?;
                let y = g.conv2d(h, w1, None, 1, 1, Padding::Reflect)?;
                let y = g.instance_norm(y, IN_EPS)?;
                let y = g.relu(y)?;
                let y = g.conv2d(y, w2, None, 1, 1, Padding::Reflect)?;
                let y = g.instance_norm(y, IN_EPS)?;
                h = g.add(h, y)?;
            }
            carry = Some(h);
            let mut d = deconv_in_relu(&mut g, h, &format!("{p}.dec1"), 4 * b, 2 * b)?;
            d = deconv_in_relu(&mut g, d, &format!("{p}.dec2"), 2 * b, b)?;
            d = deconv_in_relu(&mut g, d, &format!("{p}.dec3"), b, b / 2)?;
            let w = g.parameter(&format!("{p}.out.w"), &[3, b / 2, 1, 1])?;
            let bias = g.parameter(&format!("{p}.out.b"), &[3])?;
            let head = g.conv2d(d, w, Some(bias), 1, 0, Padding::Zero)?;
            let residual = g.slice_channels(head, 0, 2)?;
            let s = g.slice_channels(head, 2, 3)?;
            let f_out = g.add(prev, residual)?;
            let r = dc_layer(&mut g, f_out, measured, mask)?;
            // after DC the error lives only in unobserved rows, so the head predicts the
            // variance per unit of unobserved fraction
            let s = g.add(s, log_unobserved)?;
            let log_var = g.clamp(s, cfg.log_var_min, cfg.log_var_max)?;
            outputs.push(r);
            log_vars.push(log_var);
            prev = r;
        }

        let (mut nll, mut loss) = (Vec::new(), None);
        if let Some(x) = target {
            for (&r, &lv) in outputs.iter().zip(&log_vars) {
                nll.push(nll_node(&mut g, r, x, lv)?);
            }
            let mut total = nll[0];
            for &t in &nll[1..] {
                total = g.add(total, t)?;
            }
            loss = Some(g.affine(total, 1.0 / cfg.cascades as f64, 0.0)?);
        }
        Ok(Self {
            cfg,
            graph: g,
            input,
            mask,
            log_unobserved,
            target,
            outputs,
            log_vars,
            nll,
            loss,
        })
    }
}
