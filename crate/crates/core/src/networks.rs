//! Stage-I / Stage-II generators and discriminators.
//!
//! Blocks:
//! - upsample: nearest 2x, 3x3 conv, batch norm, ReLU
//! - downsample: 4x4 stride-2 conv, batch norm (skipped on the first block of
//!   a stack), LeakyReLU(0.2) in discriminators or ReLU in generators
//! - residual: `x + F(x)` with `F` = two (3x3 conv, batch norm, ReLU) layers
//!
//! Normalization uses batch statistics in training mode and the stored
//! running averages otherwise.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{Float, ParamStore, Session, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Noise dimension.
    pub n_z: usize,
    /// Stage-I output side (square images, so `H0 = W0`).
    pub w0: usize,
    /// Discriminator bottleneck side.
    pub m_d: usize,
    /// Discriminator bottleneck channels.
    pub n_di: usize,
    /// Channels of the projected condition inside the discriminators.
    pub n_d: usize,
    /// Conditioning vector dimension.
    pub n_g: usize,
    /// Stage-II generator bottleneck side.
    pub m_g: usize,
    /// Stage-II generator bottleneck channels.
    pub n_gi: usize,
    /// Stage-II output side (`D = W`).
    pub w: usize,
    /// Narrowest convolution width; halving/doubling widths stop here.
    pub channel_base: usize,
    /// Channels of the Stage-I generator's initial 4x4 map.
    pub g0_width: usize,
    /// Residual blocks in the Stage-II generator.
    pub residual_blocks: usize,
}

fn log2_exact(ratio_num: usize, ratio_den: usize) -> Option<usize> {
    if ratio_den == 0 || ratio_num % ratio_den != 0 {
        return None;
    }
    let r = ratio_num / ratio_den;
    r.is_power_of_two().then(|| r.trailing_zeros() as usize)
}

impl ModelDims {
    /// Reference configuration of the full-size model.
    pub fn paper() -> Self {
        ModelDims {
            n_z: 100,
            w0: 64,
            m_d: 4,
            n_di: 512,
            n_d: 128,
            n_g: 128,
            m_g: 16,
            n_gi: 512,
            w: 256,
            channel_base: 64,
            g0_width: 1024,
            residual_blocks: 4,
        }
    }

    /// Small configuration: 16x16 Stage-I, 32x32 Stage-II.
    pub fn desk() -> Self {
        ModelDims {
            n_z: 16,
            w0: 16,
            m_d: 4,
            n_di: 64,
            n_d: 16,
            n_g: 16,
            m_g: 4,
            n_gi: 32,
            w: 32,
            channel_base: 8,
            g0_width: 64,
            residual_blocks: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_z", self.n_z),
            ("w0", self.w0),
            ("m_d", self.m_d),
            ("n_di", self.n_di),
            ("n_d", self.n_d),
            ("n_g", self.n_g),
            ("m_g", self.m_g),
            ("n_gi", self.n_gi),
            ("w", self.w),
            ("channel_base", self.channel_base),
            ("g0_width", self.g0_width),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("dims.{name} must be positive")));
        }
        match log2_exact(self.w0, self.m_d) {
            Some(k) if k >= 1 => {}
            _ => {
                return Err(Error::Config(format!(
                    "dims.w0 ({}) must be m_d ({}) times a power of two >= 2",
                    self.w0, self.m_d
                )))
            }
        }
        match log2_exact(self.w, self.w0) {
            Some(j) if j >= 1 => {}
            _ => {
                return Err(Error::Config(format!(
                    "dims.w ({}) must be w0 ({}) times a power of two >= 2",
                    self.w, self.w0
                )))
            }
        }
        if log2_exact(self.w0, 4).is_none() {
            return Err(Error::Config("dims.w0 must be 4 times a power of two".into()));
        }
        if log2_exact(self.w0, self.m_g).is_none() || log2_exact(self.w, self.m_g).map_or(true, |k| k == 0) {
            return Err(Error::Config(format!(
                "dims.m_g ({}) must divide w0 and w by powers of two",
                self.m_g
            )));
        }
        if log2_exact(self.w, self.m_d).is_none() {
            return Err(Error::Config("dims.w must be m_d times a power of two".into()));
        }
        Ok(())
    }

    fn down_widths(&self, from: usize, to: usize, top: usize) -> Vec<usize> {
        let k = log2_exact(from, to).unwrap_or(0);
        (0..k).map(|j| (top >> (k - 1 - j)).max(self.channel_base)).collect()
    }

    fn up_widths(&self, from: usize, to: usize, start: usize) -> Vec<usize> {
        let k = log2_exact(to, from).unwrap_or(0);
        (1..=k).map(|j| (start >> j).max(self.channel_base)).collect()
    }
}

/// Output shape `(channels, side)` of one block, for shape-contract checks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub name: String,
    pub channels: usize,
    pub side: usize,
}

fn layer(name: impl Into<String>, channels: usize, side: usize) -> LayerShape {
    LayerShape {
        name: name.into(),
        channels,
        side,
    }
}

fn check_shape<T: Float>(s: &Session<'_, T>, v: Var, context: &'static str, expected: &[usize]) -> Result<()> {
    let actual = s.tape.shape(v);
    if actual != expected {
        return Err(Error::ShapeMismatch {
            context,
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        });
    }
    Ok(())
}

fn norm<T: Float>(s: &mut Session<'_, T>, name: &str, x: Var, train: bool) -> Result<Var> {
    let gamma = s.param(&format!("{name}.gamma"))?;
    let beta = s.param(&format!("{name}.beta"))?;
    if train {
        let (y, stats) = s.tape.normalize(x, gamma, beta, None);
        if let Some(stats) = stats {
            s.record_norm_stats(name, stats);
        }
        Ok(y)
    } else {
        let mean = s.buffer(&format!("{name}.running_mean"))?;
        let var = s.buffer(&format!("{name}.running_var"))?;
        Ok(s.tape.normalize(x, gamma, beta, Some((mean.data(), var.data()))).0)
    }
}

fn conv<T: Float>(s: &mut Session<'_, T>, name: &str, x: Var, stride: usize, pad: usize, bias: bool) -> Result<Var> {
    let w = s.param(&format!("{name}.w"))?;
    let b = if bias {
        Some(s.param(&format!("{name}.b"))?)
    } else {
        None
    };
    Ok(s.tape.conv2d(x, w, b, stride, pad))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Activation {
    Relu,
    Leaky,
}

fn activate<T: Float>(s: &mut Session<'_, T>, x: Var, a: Activation) -> Var {
    match a {
        Activation::Relu => s.tape.relu(x),
        Activation::Leaky => s.tape.leaky_relu(x, 0.2),
    }
}

fn init_up<T: Float, R: Rng>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut R) {
    store.init_conv(&format!("{name}.conv"), cout, cin, 3, false, rng);
    store.init_norm(&format!("{name}.norm"), cout, rng);
}

fn up_block<T: Float>(s: &mut Session<'_, T>, name: &str, x: Var, train: bool) -> Result<Var> {
    let u = s.tape.upsample2x(x);
    let c = conv(s, &format!("{name}.conv"), u, 1, 1, false)?;
    let n = norm(s, &format!("{name}.norm"), c, train)?;
    Ok(s.tape.relu(n))
}

fn init_down<T: Float, R: Rng>(
    store: &mut ParamStore<T>,
    name: &str,
    cin: usize,
    cout: usize,
    normed: bool,
    rng: &mut R,
) {
    store.init_conv(&format!("{name}.conv"), cout, cin, 4, !normed, rng);
    if normed {
        store.init_norm(&format!("{name}.norm"), cout, rng);
    }
}

fn down_block<T: Float>(
    s: &mut Session<'_, T>,
    name: &str,
    x: Var,
    normed: bool,
    act: Activation,
    train: bool,
) -> Result<Var> {
    let c = conv(s, &format!("{name}.conv"), x, 2, 1, !normed)?;
    let h = if normed {
        norm(s, &format!("{name}.norm"), c, train)?
    } else {
        c
    };
    Ok(activate(s, h, act))
}

fn init_residual<T: Float, R: Rng>(store: &mut ParamStore<T>, name: &str, ch: usize, rng: &mut R) {
    for k in 1..=2 {
        store.init_conv(&format!("{name}.conv{k}"), ch, ch, 3, false, rng);
        store.init_norm(&format!("{name}.norm{k}"), ch, rng);
    }
}

pub fn residual_block<T: Float>(s: &mut Session<'_, T>, name: &str, x: Var, train: bool) -> Result<Var> {
    let mut h = x;
    for k in 1..=2 {
        let c = conv(s, &format!("{name}.conv{k}"), h, 1, 1, false)?;
        let n = norm(s, &format!("{name}.norm{k}"), c, train)?;
        h = s.tape.relu(n);
    }
    Ok(s.tape.add(x, h))
}

/// Tile a `(B, N)` vector over an `M x M` grid.
pub fn spatial_replicate<T: Float>(s: &mut Session<'_, T>, v: Var, m: usize) -> Var {
    s.tape.replicate(v, m)
}

/// Stage-I generator: `(c_hat0 || z)` to a `W0 x W0` image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageOneGenerator {
    pub dims: ModelDims,
}

pub const G0: &str = "g0";
pub const D0: &str = "d0";
pub const G: &str = "g";
pub const D: &str = "d";

impl StageOneGenerator {
    pub fn new(dims: ModelDims) -> Self {
        StageOneGenerator { dims }
    }

    fn up_count(&self) -> usize {
        log2_exact(self.dims.w0, 4).unwrap_or(0)
    }

    pub fn plan(&self) -> Vec<LayerShape> {
        let d = &self.dims;
        let mut out = vec![layer("g0.fc", d.g0_width, 4)];
        let mut side = 4;
        for (i, w) in d.up_widths(4, d.w0, d.g0_width).into_iter().enumerate() {
            side *= 2;
            out.push(layer(format!("g0.up{i}"), w, side));
        }
        out.push(layer("g0.out", 3, d.w0));
        out
    }

    pub fn init_params<T: Float, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let d = &self.dims;
        let fc_out = d.g0_width * 16;
        store.insert(
            "g0.fc.w",
            crate::engine::Tensor::randn(&[fc_out, d.n_g + d.n_z], 0.02, rng),
        );
        store.init_norm("g0.fc.norm", d.g0_width, rng);
        let mut cin = d.g0_width;
        for (i, w) in d.up_widths(4, d.w0, d.g0_width).into_iter().enumerate() {
            init_up(store, &format!("g0.up{i}"), cin, w, rng);
            cin = w;
        }
        store.init_conv("g0.out", 3, cin, 3, true, rng);
    }

    pub fn forward<T: Float>(&self, s: &mut Session<'_, T>, z: Var, c_hat: Var, train: bool) -> Result<Var> {
        let d = &self.dims;
        let b = s.tape.shape(z)[0];
        check_shape(s, z, "stage-I noise", &[b, d.n_z])?;
        check_shape(s, c_hat, "stage-I condition", &[b, d.n_g])?;
        let input = s.tape.concat(&[c_hat, z]);
        let w = s.param("g0.fc.w")?;
        let fc = s.tape.linear(input, w, None);
        let map = s.tape.reshape(fc, &[b, d.g0_width, 4, 4]);
        let n = norm(s, "g0.fc.norm", map, train)?;
        let mut h = s.tape.relu(n);
        for i in 0..self.up_count() {
            h = up_block(s, &format!("g0.up{i}"), h, train)?;
        }
        let out = conv(s, "g0.out", h, 1, 1, true)?;
        Ok(s.tape.tanh(out))
    }
}

/// Conditional discriminator for `resolution x resolution` inputs. The
/// condition, of width `cond_dim`, is projected to `n_d` channels and tiled
/// over the bottleneck.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub prefix: &'static str,
    pub resolution: usize,
    pub cond_dim: usize,
    pub dims: ModelDims,
}

impl Discriminator {
    pub fn stage1(dims: ModelDims, cond_dim: usize) -> Self {
        Discriminator {
            prefix: D0,
            resolution: dims.w0,
            cond_dim,
            dims,
        }
    }

    pub fn stage2(dims: ModelDims, cond_dim: usize) -> Self {
        Discriminator {
            prefix: D,
            resolution: dims.w,
            cond_dim,
            dims,
        }
    }

    fn widths(&self) -> Vec<usize> {
        self.dims.down_widths(self.resolution, self.dims.m_d, self.dims.n_di)
    }

    pub fn plan(&self) -> Vec<LayerShape> {
        let p = self.prefix;
        let mut side = self.resolution;
        let mut out: Vec<LayerShape> = self
            .widths()
            .into_iter()
            .enumerate()
            .map(|(i, w)| {
                side /= 2;
                layer(format!("{p}.down{i}"), w, side)
            })
            .collect();
        out.push(layer(format!("{p}.joint"), self.dims.n_di, self.dims.m_d));
        out.push(layer(format!("{p}.out"), 1, 1));
        out
    }

    pub fn init_params<T: Float, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let p = self.prefix;
        let d = &self.dims;
        let mut cin = 3;
        for (i, w) in self.widths().into_iter().enumerate() {
            init_down(store, &format!("{p}.down{i}"), cin, w, i > 0, rng);
            cin = w;
        }
        store.init_linear(&format!("{p}.cond"), d.n_d, self.cond_dim, rng);
        store.init_conv(&format!("{p}.joint"), d.n_di, d.n_di + d.n_d, 1, true, rng);
        store.init_conv(&format!("{p}.out"), 1, d.n_di, d.m_d, true, rng);
    }

    /// Image features at the bottleneck, `(B, n_di, m_d, m_d)`.
    pub fn features<T: Float>(&self, s: &mut Session<'_, T>, image: Var, train: bool) -> Result<Var> {
        let b = s.tape.shape(image)[0];
        check_shape(
            s,
            image,
            "discriminator input",
            &[b, 3, self.resolution, self.resolution],
        )?;
        let mut h = image;
        for i in 0..self.widths().len() {
            h = down_block(
                s,
                &format!("{}.down{i}", self.prefix),
                h,
                i > 0,
                Activation::Leaky,
                train,
            )?;
        }
        Ok(h)
    }

    /// Probability that `features` came from a real image matching `cond`, `(B, 1)`.
    pub fn score<T: Float>(&self, s: &mut Session<'_, T>, features: Var, cond: Var) -> Result<Var> {
        let p = self.prefix;
        let d = &self.dims;
        let b = s.tape.shape(features)[0];
        check_shape(s, cond, "discriminator condition", &[b, self.cond_dim])?;
        let w = s.param(&format!("{p}.cond.w"))?;
        let bias = s.param(&format!("{p}.cond.b"))?;
        let proj = s.tape.linear(cond, w, Some(bias));
        let tiled = spatial_replicate(s, proj, d.m_d);
        let joint_in = s.tape.concat(&[features, tiled]);
        let j = conv(s, &format!("{p}.joint"), joint_in, 1, 0, true)?;
        let j = s.tape.relu(j);
        let logit = conv(s, &format!("{p}.out"), j, 1, 0, true)?;
        let logit = s.tape.reshape(logit, &[b, 1]);
        Ok(s.tape.sigmoid(logit))
    }

    pub fn forward<T: Float>(&self, s: &mut Session<'_, T>, image: Var, cond: Var, train: bool) -> Result<Var> {
        let f = self.features(s, image, train)?;
        self.score(s, f, cond)
    }
}

/// Stage-II generator: refines a Stage-I image under a fresh condition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageTwoGenerator {
    pub dims: ModelDims,
}

impl StageTwoGenerator {
    pub fn new(dims: ModelDims) -> Self {
        StageTwoGenerator { dims }
    }

    fn down_widths(&self) -> Vec<usize> {
        self.dims.down_widths(self.dims.w0, self.dims.m_g, self.dims.n_gi)
    }

    fn up_widths(&self) -> Vec<usize> {
        self.dims.up_widths(self.dims.m_g, self.dims.w, self.dims.n_gi)
    }

    pub fn plan(&self) -> Vec<LayerShape> {
        let d = &self.dims;
        let mut out = Vec::new();
        let mut side = d.w0;
        for (i, w) in self.down_widths().into_iter().enumerate() {
            side /= 2;
            out.push(layer(format!("g.down{i}"), w, side));
        }
        out.push(layer("g.fuse", d.n_gi, d.m_g));
        for r in 0..d.residual_blocks {
            out.push(layer(format!("g.res{r}"), d.n_gi, d.m_g));
        }
        for (i, w) in self.up_widths().into_iter().enumerate() {
            side *= 2;
            out.push(layer(format!("g.up{i}"), w, side));
        }
        out.push(layer("g.out", 3, d.w));
        out
    }

    pub fn init_params<T: Float, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let d = &self.dims;
        let mut cin = 3;
        for (i, w) in self.down_widths().into_iter().enumerate() {
            init_down(store, &format!("g.down{i}"), cin, w, i > 0, rng);
            cin = w;
        }
        store.init_conv("g.fuse.conv", d.n_gi, cin + d.n_g, 3, false, rng);
        store.init_norm("g.fuse.norm", d.n_gi, rng);
        for r in 0..d.residual_blocks {
            init_residual(store, &format!("g.res{r}"), d.n_gi, rng);
        }
        let mut cin = d.n_gi;
        for (i, w) in self.up_widths().into_iter().enumerate() {
            init_up(store, &format!("g.up{i}"), cin, w, rng);
            cin = w;
        }
        store.init_conv("g.out", 3, cin, 3, true, rng);
    }

    pub fn forward<T: Float>(&self, s: &mut Session<'_, T>, s0: Var, c_hat: Var, train: bool) -> Result<Var> {
        let d = &self.dims;
        let b = s.tape.shape(s0)[0];
        check_shape(s, s0, "stage-II input image", &[b, 3, d.w0, d.w0])?;
        check_shape(s, c_hat, "stage-II condition", &[b, d.n_g])?;
        let mut h = s0;
        for i in 0..self.down_widths().len() {
            h = down_block(s, &format!("g.down{i}"), h, i > 0, Activation::Relu, train)?;
        }
        let tiled = spatial_replicate(s, c_hat, d.m_g);
        let cat = s.tape.concat(&[h, tiled]);
        let f = conv(s, "g.fuse.conv", cat, 1, 1, false)?;
        let f = norm(s, "g.fuse.norm", f, train)?;
        h = s.tape.relu(f);
        for r in 0..d.residual_blocks {
            h = residual_block(s, &format!("g.res{r}"), h, train)?;
        }
        for i in 0..self.up_widths().len() {
            h = up_block(s, &format!("g.up{i}"), h, train)?;
        }
        let out = conv(s, "g.out", h, 1, 1, true)?;
        Ok(s.tape.tanh(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_validate() {
        ModelDims::paper().validate().unwrap();
        ModelDims::desk().validate().unwrap();
        let mut bad = ModelDims::desk();
        bad.w0 = 12;
        assert!(bad.validate().is_err());
        let mut bad = ModelDims::desk();
        bad.n_z = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn paper_scale_plans() {
        let d = ModelDims::paper();
        let d0 = Discriminator::stage1(d, d.n_g).plan();
        let bottleneck = &d0[d0.len() - 3];
        assert_eq!((bottleneck.side, bottleneck.channels), (4, 512));
        let d2 = Discriminator::stage2(d, d.n_g).plan();
        assert_eq!(d2.iter().filter(|l| l.name.contains("down")).count(), 6);
        let g = StageTwoGenerator::new(d).plan();
        let fuse = g.iter().find(|l| l.name == "g.fuse").unwrap();
        assert_eq!((fuse.side, fuse.channels), (16, 512));
        assert_eq!(g.last().unwrap().side, 256);
        assert_eq!(StageOneGenerator::new(d).plan().last().unwrap().side, 64);
    }

    #[test]
    fn desk_scale_plans() {
        let d = ModelDims::desk();
        let d0 = Discriminator::stage1(d, d.n_g).plan();
        let bottleneck = &d0[d0.len() - 3];
        assert_eq!((bottleneck.side, bottleneck.channels), (4, 64));
        let d2 = Discriminator::stage2(d, d.n_g).plan();
        assert_eq!(d2.iter().filter(|l| l.name.contains("down")).count(), 3);
    }
}
