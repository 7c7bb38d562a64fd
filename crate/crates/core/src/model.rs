//! Conditional energy model `E(c, x, t)` and the score interface used by
//! samplers and search.
//!
//! The network is a small conv stack: stem, sinusoidal timestep embedding
//! broadcast-added after the stem, residual blocks, and a conv head. The
//! energy is half the squared L2 norm of the head output per batch element;
//! the noise prediction is the exact input-gradient of that energy.

use std::collections::BTreeMap;

use diffsearch_autodiff::{Graph, NodeId, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::CoreError;
use crate::rng::rng_from;

/// Scalar energy and input-gradient access for samplers and tree search.
///
/// `x` is `[B, C, H, W]`; `energy` returns one value per batch element and
/// `score` the exact gradient of summed energy w.r.t. `x`.
pub trait ScoreModel: Sync {
    fn energy(&self, cond: &Tensor, x: &Tensor, t: usize) -> Result<Vec<f64>, CoreError>;
    fn score(&self, cond: &Tensor, x: &Tensor, t: usize) -> Result<Tensor, CoreError>;

    fn energy_and_score(
        &self,
        cond: &Tensor,
        x: &Tensor,
        t: usize,
    ) -> Result<(Vec<f64>, Tensor), CoreError> {
        Ok((self.energy(cond, x, t)?, self.score(cond, x, t)?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Arch {
    pub cond_channels: usize,
    pub x_channels: usize,
    pub width: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub emb_dim: usize,
}

impl Arch {
    pub fn validate(&self) -> Result<(), CoreError> {
        let ok = self.cond_channels >= 1
            && self.x_channels >= 1
            && self.width >= 1
            && self.kernel >= 1
            && self.kernel % 2 == 1
            && self.emb_dim >= 2
            && self.emb_dim % 2 == 0;
        if !ok {
            return Err(CoreError::invalid(format!(
                "invalid arch {self:?}: widths/channels must be >= 1, kernel odd, emb_dim even"
            )));
        }
        Ok(())
    }

    fn pad(&self) -> usize {
        (self.kernel - 1) / 2
    }

    /// Conv layers as (name, in_channels, out_channels).
    fn conv_layers(&self) -> Vec<(String, usize, usize)> {
        let mut layers = vec![(
            "stem".to_string(),
            self.cond_channels + self.x_channels,
            self.width,
        )];
        for b in 0..self.blocks {
            layers.push((format!("block{b}.c0"), self.width, self.width));
            layers.push((format!("block{b}.c1"), self.width, self.width));
        }
        layers.push(("head".to_string(), self.width, self.x_channels));
        layers
    }

    pub fn param_count(&self) -> usize {
        let k2 = self.kernel * self.kernel;
        let convs: usize = self
            .conv_layers()
            .iter()
            .map(|(_, ci, co)| co * ci * k2 + co)
            .sum();
        convs + self.emb_dim * self.width + self.width
    }
}

#[derive(Debug, Clone)]
pub struct EnergyModel {
    arch: Arch,
    params: BTreeMap<String, Tensor>,
}

impl EnergyModel {
    /// Deterministic fan-in-scaled uniform init. Parameter values are
    /// rounded through f32 so checkpoints round-trip losslessly.
    pub fn init(arch: Arch, seed: u64) -> Result<Self, CoreError> {
        arch.validate()?;
        let mut rng = rng_from(seed);
        let mut params = BTreeMap::new();
        let k = arch.kernel;
        for (name, ci, co) in arch.conv_layers() {
            let fan_in = ci * k * k;
            let bound = 1.0 / (fan_in as f64).sqrt();
            params.insert(
                format!("{name}.w"),
                uniform_f32(&mut rng, &[co, ci, k, k], bound),
            );
            params.insert(format!("{name}.b"), uniform_f32(&mut rng, &[co], bound));
        }
        let bound = 1.0 / (arch.emb_dim as f64).sqrt();
        params.insert(
            "temb.w".to_string(),
            uniform_f32(&mut rng, &[arch.emb_dim, arch.width], bound),
        );
        params.insert(
            "temb.b".to_string(),
            uniform_f32(&mut rng, &[arch.width], bound),
        );
        Ok(Self { arch, params })
    }

    pub fn from_parts(arch: Arch, params: BTreeMap<String, Tensor>) -> Result<Self, CoreError> {
        arch.validate()?;
        let expected = Self::init(arch.clone(), 0)?;
        for (name, t) in &expected.params {
            match params.get(name) {
                None => {
                    return Err(CoreError::invalid(format!("missing parameter `{name}`")))
                }
                Some(p) if p.shape() != t.shape() => {
                    return Err(CoreError::invalid(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Places every parameter on the graph; `trainable` marks them as
    /// gradient leaves, `stop_grad` wraps them so no gradient flows back.
    pub fn param_nodes(
        &self,
        g: &mut Graph,
        trainable: bool,
        stop_grad: bool,
    ) -> Result<BTreeMap<String, NodeId>, CoreError> {
        let mut out = BTreeMap::new();
        for (name, t) in &self.params {
            let mut id = g.leaf(t.clone(), trainable)?;
            if stop_grad {
                id = g.stop_grad(id)?;
            }
            out.insert(name.clone(), id);
        }
        Ok(out)
    }

    /// Emits the energy computation onto `g` and returns the `[B]` node.
    /// `ts` holds the denoising step per batch element.
    pub fn emit_energy(
        &self,
        g: &mut Graph,
        params: &BTreeMap<String, NodeId>,
        cond: NodeId,
        x: NodeId,
        ts: &[usize],
    ) -> Result<NodeId, CoreError> {
        let (sc, sx) = (g.shape(cond).to_vec(), g.shape(x).to_vec());
        let shapes_ok = sc.len() == 4
            && sx.len() == 4
            && sc[0] == sx[0]
            && sc[1] == self.arch.cond_channels
            && sx[1] == self.arch.x_channels
            && sc[2..] == sx[2..]
            && ts.len() == sx[0];
        if !shapes_ok {
            return Err(CoreError::invalid(format!(
                "emit_energy: cond {sc:?} / x {sx:?} do not match arch {:?} with {} timesteps",
                self.arch,
                ts.len()
            )));
        }
        let (b, h, w) = (sx[0], sx[2], sx[3]);
        let pad = self.arch.pad();
        let p = |name: &str| -> Result<NodeId, CoreError> {
            params
                .get(name)
                .copied()
                .ok_or_else(|| CoreError::invalid(format!("missing param node `{name}`")))
        };

        let input = g.concat(&[cond, x], 1)?;
        let mut hcur = self.conv(g, input, p("stem.w")?, p("stem.b")?, pad, b, h, w)?;

        // timestep embedding: sinusoid [B, emb] -> linear -> [B, width, 1, 1]
        let emb = g.constant(sinusoidal_embedding(ts, self.arch.emb_dim))?;
        let te = g.matmul(emb, p("temb.w")?)?;
        let tb = p("temb.b")?;
        let tb2 = g.reshape(tb, &[1, self.arch.width])?;
        let tbb = g.broadcast_to(tb2, &[b, self.arch.width])?;
        let te = g.add(te, tbb)?;
        let te4 = g.reshape(te, &[b, self.arch.width, 1, 1])?;
        let teb = g.broadcast_to(te4, &[b, self.arch.width, h, w])?;
        hcur = g.add(hcur, teb)?;

        for blk in 0..self.arch.blocks {
            let a0 = g.silu(hcur)?;
            let c0 = self.conv(
                g,
                a0,
                p(&format!("block{blk}.c0.w"))?,
                p(&format!("block{blk}.c0.b"))?,
                pad,
                b,
                h,
                w,
            )?;
            let a1 = g.silu(c0)?;
            let c1 = self.conv(
                g,
                a1,
                p(&format!("block{blk}.c1.w"))?,
                p(&format!("block{blk}.c1.b"))?,
                pad,
                b,
                h,
                w,
            )?;
            hcur = g.add(hcur, c1)?;
        }

        let pre = g.silu(hcur)?;
        let f = self.conv(g, pre, p("head.w")?, p("head.b")?, pad, b, h, w)?;
        let sq = g.square(f)?;
        let summed = g.sum_axes(sq, &[1, 2, 3])?;
        Ok(g.scale(summed, 0.5)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &self,
        g: &mut Graph,
        x: NodeId,
        w: NodeId,
        bias: NodeId,
        pad: usize,
        b: usize,
        h: usize,
        wd: usize,
    ) -> Result<NodeId, CoreError> {
        let y = g.conv2d(x, w, pad)?;
        let co = g.shape(bias)[0];
        let b4 = g.reshape(bias, &[1, co, 1, 1])?;
        let bb = g.broadcast_to(b4, &[b, co, h, wd])?;
        Ok(g.add(y, bb)?)
    }
}

impl ScoreModel for EnergyModel {
    fn energy(&self, cond: &Tensor, x: &Tensor, t: usize) -> Result<Vec<f64>, CoreError> {
        let mut g = Graph::new();
        let params = self.param_nodes(&mut g, false, false)?;
        let c = g.constant(cond.clone())?;
        let xid = g.constant(x.clone())?;
        let ts = vec![t; x.shape()[0]];
        let e = self.emit_energy(&mut g, &params, c, xid, &ts)?;
        Ok(g.value(e).data().to_vec())
    }

    fn score(&self, cond: &Tensor, x: &Tensor, t: usize) -> Result<Tensor, CoreError> {
        Ok(self.energy_and_score(cond, x, t)?.1)
    }

    fn energy_and_score(
        &self,
        cond: &Tensor,
        x: &Tensor,
        t: usize,
    ) -> Result<(Vec<f64>, Tensor), CoreError> {
        let mut g = Graph::new();
        let params = self.param_nodes(&mut g, false, false)?;
        let c = g.constant(cond.clone())?;
        let xid = g.leaf(x.clone(), true)?;
        let ts = vec![t; x.shape()[0]];
        let e = self.emit_energy(&mut g, &params, c, xid, &ts)?;
        let total = g.sum_all(e)?;
        let grad = g.grad(total, &[xid])?[0];
        Ok((g.value(e).data().to_vec(), g.value(grad).clone()))
    }
}

fn uniform_f32(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| (rng.random_range(-bound..bound) as f32) as f64)
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape consistent")
}

/// Interleaved sin/cos features of the raw step index.
pub fn sinusoidal_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(i as f64) * (10_000f64).ln() / half.max(1) as f64).exp();
            let angle = t as f64 * freq;
            data.push(angle.sin());
            data.push(angle.cos());
        }
    }
    Tensor::new(vec![ts.len(), dim], data).expect("shape consistent")
}

pub mod stubs {
    //! Analytic score models for tests and search diagnostics.

    use super::*;

    /// `E(x) = 1/2 ||x||^2` per batch element; score is `x` itself.
    #[derive(Debug, Clone, Copy)]
    pub struct QuadraticEnergy;

    impl ScoreModel for QuadraticEnergy {
        fn energy(&self, _cond: &Tensor, x: &Tensor, _t: usize) -> Result<Vec<f64>, CoreError> {
            Ok(per_batch(x, |row| {
                0.5 * row.iter().map(|v| v * v).sum::<f64>()
            }))
        }

        fn score(&self, _cond: &Tensor, x: &Tensor, _t: usize) -> Result<Tensor, CoreError> {
            Ok(x.clone())
        }
    }

    /// 1-D double well `E(x) = a (x^2 - 1)^2 + tilt * x` summed over entries.
    /// With `tilt < 0` the global minimum sits near `x = +1`.
    #[derive(Debug, Clone, Copy)]
    pub struct DoubleWell1d {
        pub a: f64,
        pub tilt: f64,
    }

    impl DoubleWell1d {
        pub fn global_minimum(&self) -> f64 {
            // minimize a(x^2-1)^2 + tilt x numerically; well-conditioned
            let mut best = (f64::INFINITY, 0.0);
            let mut x = -1.5f64;
            while x <= 1.5 {
                let e = self.a * (x * x - 1.0).powi(2) + self.tilt * x;
                if e < best.0 {
                    best = (e, x);
                }
                x += 1e-4;
            }
            best.1
        }
    }

    impl ScoreModel for DoubleWell1d {
        fn energy(&self, _cond: &Tensor, x: &Tensor, _t: usize) -> Result<Vec<f64>, CoreError> {
            let (a, b) = (self.a, self.tilt);
            Ok(per_batch(x, |row| {
                row.iter()
                    .map(|&v| a * (v * v - 1.0).powi(2) + b * v)
                    .sum()
            }))
        }

        fn score(&self, _cond: &Tensor, x: &Tensor, _t: usize) -> Result<Tensor, CoreError> {
            let (a, b) = (self.a, self.tilt);
            Ok(x.map(|v| 4.0 * a * v * (v * v - 1.0) + b))
        }
    }

    /// Exact conditional-mean noise predictor for a 1-D Gaussian target
    /// `N(mu, s2)` under a given schedule.
    #[derive(Debug, Clone)]
    pub struct GaussianOracle {
        pub mu: f64,
        pub s2: f64,
        pub schedule: crate::schedule::NoiseSchedule,
    }

    impl ScoreModel for GaussianOracle {
        fn energy(&self, _cond: &Tensor, x: &Tensor, t: usize) -> Result<Vec<f64>, CoreError> {
            // negative log-density of the diffused marginal, up to a constant
            let ab = self.schedule.alpha_bar(t);
            let var = ab * self.s2 + (1.0 - ab);
            let mean = ab.sqrt() * self.mu;
            Ok(per_batch(x, |row| {
                row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / (2.0 * var)
            }))
        }

        fn score(&self, _cond: &Tensor, x: &Tensor, t: usize) -> Result<Tensor, CoreError> {
            let ab = self.schedule.alpha_bar(t);
            let var = ab * self.s2 + (1.0 - ab);
            let mean = ab.sqrt() * self.mu;
            let c = (1.0 - ab).sqrt() / var;
            Ok(x.map(|v| c * (v - mean)))
        }
    }

    fn per_batch(x: &Tensor, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let b = x.shape()[0];
        let inner = x.len() / b.max(1);
        (0..b).map(|i| f(&x.data()[i * inner..(i + 1) * inner])).collect()
    }
}
