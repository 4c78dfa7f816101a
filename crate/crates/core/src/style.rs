//! Style-based mask-to-image generator: mapping network, AdaIN and noise injection.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::graph::{Binding, Graph, Var};
use crate::params::{Conv, Linear, ParamSet};
use crate::tensor::Tensor;

pub const ADAIN_EPS: f64 = 1e-5;
const LEAK: f64 = 0.2;
pub const GEN_KIND: &str = "generator";
const GEN_VERSION: u32 = 1;

/// Per-sample, per-channel AdaIN on `[N, C, H, W]` with `scale`/`shift` laid out `[N, C]`.
///
/// Returns the output, the normalized input and `1 / sqrt(var + eps)` per (n, c).
pub fn adain_forward(x: &Tensor, scale: &[f64], shift: &[f64], eps: f64) -> (Tensor, Tensor, Vec<f64>) {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; n * c];
    for k in 0..n * c {
        let src = &x.data()[k * plane..(k + 1) * plane];
        let mu = src.iter().sum::<f64>() / plane as f64;
        let var = src.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / plane as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[k] = is;
        for (i, v) in src.iter().enumerate() {
            let z = (v - mu) * is;
            xhat[k * plane + i] = z;
            out[k * plane + i] = scale[k] * z + shift[k];
        }
    }
    let shape = x.shape();
    (
        Tensor::from_vec(shape, out).unwrap(),
        Tensor::from_vec(shape, xhat).unwrap(),
        inv_std,
    )
}

/// Gradients of [`adain_forward`] for upstream gradient `g`: `(dx, dscale, dshift)`.
pub fn adain_backward(g: &Tensor, xhat: &Tensor, inv_std: &[f64], scale: &[f64]) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, w) = g.dims4();
    let plane = h * w;
    let m = plane as f64;
    let mut dx = vec![0.0; g.len()];
    let mut dscale = vec![0.0; n * c];
    let mut dshift = vec![0.0; n * c];
    for k in 0..n * c {
        let gs = &g.data()[k * plane..(k + 1) * plane];
        let zs = &xhat.data()[k * plane..(k + 1) * plane];
        let mut sum_g = 0.0;
        let mut sum_gz = 0.0;
        for (gv, z) in gs.iter().zip(zs) {
            sum_g += gv;
            sum_gz += gv * z;
        }
        dscale[k] = sum_gz;
        dshift[k] = sum_g;
        let mean_d = scale[k] * sum_g / m;
        let mean_dz = scale[k] * sum_gz / m;
        for i in 0..plane {
            let d = gs[i] * scale[k];
            dx[k * plane + i] = inv_std[k] * (d - mean_d - zs[i] * mean_dz);
        }
    }
    (
        Tensor::from_vec(g.shape(), dx).unwrap(),
        Tensor::from_vec(&[n, c], dscale).unwrap(),
        Tensor::from_vec(&[n, c], dshift).unwrap(),
    )
}

/// AdaIN of a single `[C, H, W]` feature map.
pub fn adain(features: &Tensor, scale: &[f64], shift: &[f64]) -> Result<Tensor> {
    let s = features.shape();
    if s.len() != 3 {
        return Err(Error::shape("adain features", &[0, 0, 0], s));
    }
    if scale.len() != s[0] || shift.len() != s[0] {
        return Err(Error::shape("adain scale/shift", &[s[0]], &[scale.len().max(shift.len())]));
    }
    if scale.iter().chain(shift).any(|v| !v.is_finite()) {
        return Err(Error::param("adain", "scale and shift must be finite"));
    }
    let x = features.clone().reshape(&[1, s[0], s[1], s[2]])?;
    let (out, _, _) = adain_forward(&x, scale, shift, ADAIN_EPS);
    out.reshape(s)
}

/// `F + scale[c] · ε` on a `[C, H, W]` map, with one `ε ~ N(0, 1)` plane shared by all channels.
pub fn inject_noise<R: Rng + ?Sized>(features: &Tensor, scale: &[f64], rng: &mut R) -> Result<Tensor> {
    let s = features.shape();
    if s.len() != 3 {
        return Err(Error::shape("inject_noise features", &[0, 0, 0], s));
    }
    if scale.len() != s[0] {
        return Err(Error::shape("inject_noise scale", &[s[0]], &[scale.len()]));
    }
    let eps = Tensor::randn(&[s[1], s[2]], rng);
    let plane = s[1] * s[2];
    let mut out = features.clone();
    for (ch, sc) in scale.iter().enumerate() {
        for (v, e) in out.data_mut()[ch * plane..(ch + 1) * plane].iter_mut().zip(eps.data()) {
            *v += sc * e;
        }
    }
    Ok(out)
}

/// A latent code `z ∈ R^{d_z}`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentNoise {
    pub z: Vec<f64>,
}

impl LatentNoise {
    pub fn sample<R: Rng + ?Sized>(d_z: usize, rng: &mut R) -> Self {
        LatentNoise {
            z: Tensor::randn(&[d_z], rng).into_data(),
        }
    }

    pub fn zeros(d_z: usize) -> Self {
        LatentNoise { z: vec![0.0; d_z] }
    }
}

/// The intermediate code `w` and the per-layer AdaIN parameters it induces.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleVector {
    pub w: Vec<f64>,
    /// `(scale, shift)` per modulated decoder layer, finest layer first.
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Noise for the finest decoder layers during generation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseMode {
    Off,
    Seeded(u64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub d_z: usize,
    pub d_w: usize,
    pub mapping_layers: usize,
    /// Number of finest decoder levels that receive noise.
    pub noise_levels: usize,
    pub noise_init: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            depth: 4,
            base_channels: 32,
            d_z: 64,
            d_w: 64,
            mapping_layers: 3,
            noise_levels: 2,
            noise_init: 0.1,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::param("generator.depth", "must be >= 2"));
        }
        if self.base_channels == 0 || self.d_z == 0 || self.d_w == 0 || self.mapping_layers == 0 {
            return Err(Error::param("generator", "channel and latent sizes must be positive"));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Clone, Debug, PartialEq)]
struct DecLevel {
    up: Conv,
    merge: Conv,
    out: Conv,
    noise: Option<usize>,
    style_scale: Linear,
    style_shift: Linear,
}

#[derive(Clone, Debug, PartialEq)]
struct GenLayout {
    mapping: Vec<Linear>,
    enc: Vec<(Conv, Conv)>,
    /// Indexed by level; `dec[i]` produces level `i` from level `i + 1`.
    dec: Vec<DecLevel>,
    head: Conv,
}

/// Generator parameters, reconstructible from its config.
#[derive(Clone, Debug, PartialEq)]
pub struct GenModelState {
    pub config: GenConfig,
    pub params: ParamSet,
    layout: GenLayout,
}

impl GenModelState {
    pub fn new(config: GenConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        let set = &mut params;
        let mut mapping = Vec::new();
        for i in 0..config.mapping_layers {
            let fin = if i == 0 { config.d_z } else { config.d_w };
            mapping.push(Linear::new(set, &format!("map{i}"), fin, config.d_w, 0.0, &mut rng));
        }
        let mut enc = Vec::new();
        for l in 0..config.depth {
            let cin = if l == 0 { 1 } else { config.channels(l - 1) };
            let c = config.channels(l);
            enc.push((
                Conv::same3(set, &format!("enc{l}.a"), cin, c, &mut rng),
                Conv::same3(set, &format!("enc{l}.b"), c, c, &mut rng),
            ));
        }
        let mut dec = Vec::new();
        for l in 0..config.depth - 1 {
            let c = config.channels(l);
            let noise = (l < config.noise_levels)
                .then(|| set.push(format!("dec{l}.noise_scale"), Tensor::full(&[c], config.noise_init)));
            dec.push(DecLevel {
                up: Conv::same3(set, &format!("dec{l}.up"), config.channels(l + 1), c, &mut rng),
                merge: Conv::same3(set, &format!("dec{l}.merge"), 2 * c, c, &mut rng),
                out: Conv::same3(set, &format!("dec{l}.out"), c, c, &mut rng),
                noise,
                style_scale: Linear::new(set, &format!("dec{l}.style_scale"), config.d_w, c, 1.0, &mut rng),
                style_shift: Linear::new(set, &format!("dec{l}.style_shift"), config.d_w, c, 0.0, &mut rng),
            });
        }
        let head = Conv::pointwise(set, "head", config.base_channels, 1, true, &mut rng);
        Ok(GenModelState {
            config,
            params,
            layout: GenLayout {
                mapping,
                enc,
                dec,
                head,
            },
        })
    }

    /// Spatial sizes must be divisible by `2^(depth - 1)`.
    pub fn check_size(&self, h: usize, w: usize) -> Result<()> {
        let m = 1usize << (self.config.depth - 1);
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(Error::shape(
                format!("generator input (sides must be multiples of {m})"),
                &[h.div_ceil(m).max(1) * m, w.div_ceil(m).max(1) * m],
                &[h, w],
            ));
        }
        Ok(())
    }

    /// Mapping network on the tape: `z [N, d_z]` to `w [N, d_w]`.
    pub fn map_graph(&self, g: &mut Graph, bind: Binding, z: Var) -> Var {
        let mut h = z;
        for l in &self.layout.mapping {
            h = l.forward(g, bind, &self.params, h);
            h = g.leaky_relu(h, LEAK);
        }
        h
    }

    /// Mask `[N, 1, H, W]` and latent `[N, d_z]` to an image in `(0, 1)`.
    ///
    /// `noise` supplies the per-sample noise planes; `None` disables injection.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        bind: Binding,
        mask: Var,
        z: &Tensor,
        noise: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let (n, c, h, w) = g.value(mask).dims4();
        if c != 1 {
            return Err(Error::shape("generator mask channels", &[1], &[c]));
        }
        self.check_size(h, w)?;
        z.expect_shape(&[n, self.config.d_z], "generator latent")?;
        let zv = g.input(z.clone());
        let wv = self.map_graph(g, bind, zv);

        let mut skips = Vec::new();
        let mut x = mask;
        for (l, (a, b)) in self.layout.enc.iter().enumerate() {
            if l > 0 {
                x = g.maxpool2(x);
            }
            x = a.forward(g, bind, &self.params, x);
            x = g.leaky_relu(x, LEAK);
            x = b.forward(g, bind, &self.params, x);
            x = g.leaky_relu(x, LEAK);
            skips.push(x);
        }
        let mut noise = noise;
        let mut d = skips.pop().expect("depth >= 2");
        for l in (0..self.config.depth - 1).rev() {
            let lvl = &self.layout.dec[l];
            let skip = skips[l];
            let (_, _, sh, sw) = g.value(skip).dims4();
            let up = g.resize_bilinear(d, sh, sw);
            let up = lvl.up.forward(g, bind, &self.params, up);
            let up = g.leaky_relu(up, LEAK);
            let cat = g.concat_channels(&[skip, up]);
            let mut y = lvl.merge.forward(g, bind, &self.params, cat);
            if let (Some(idx), Some(rng)) = (lvl.noise, noise.as_deref_mut()) {
                let eps = Tensor::randn(&[n, 1, sh, sw], rng);
                let s = g.param(bind, &self.params, idx);
                y = g.add_noise(y, s, eps);
            }
            let scale = lvl.style_scale.forward(g, bind, &self.params, wv);
            let shift = lvl.style_shift.forward(g, bind, &self.params, wv);
            y = g.adain(y, scale, shift, ADAIN_EPS);
            y = g.leaky_relu(y, LEAK);
            y = lvl.out.forward(g, bind, &self.params, y);
            d = g.leaky_relu(y, LEAK);
        }
        let logits = self.layout.head.forward(g, bind, &self.params, d);
        Ok(g.sigmoid(logits))
    }

    /// Batched generation without gradients.
    pub fn generate_batch(&self, masks: &Tensor, z: &Tensor, noise: NoiseMode) -> Result<Tensor> {
        let mut g = Graph::new();
        let m = g.input(masks.clone());
        let mut rng = match noise {
            NoiseMode::Off => None,
            NoiseMode::Seeded(s) => Some(ChaCha8Rng::seed_from_u64(s)),
        };
        let out = self.forward_graph(&mut g, Binding::Frozen, m, z, rng.as_mut())?;
        Ok(g.value(out).clone())
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = serde_json::json!({ "version": GEN_VERSION, "config": self.config });
        let mut c = Container::new(GEN_KIND, meta.to_string());
        c.push_set("", &self.params);
        Ok(c)
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<Self> {
        c.expect_kind(&[GEN_KIND], path)?;
        let meta: serde_json::Value = serde_json::from_str(&c.meta)?;
        let version = meta["version"].as_u64().unwrap_or(0) as u32;
        if version != GEN_VERSION {
            return Err(Error::CheckpointVersion {
                path: path.to_path_buf(),
                expected: GEN_VERSION,
                found: version,
            });
        }
        let config: GenConfig = serde_json::from_value(meta["config"].clone())?;
        let mut state = GenModelState::new(config, 0)?;
        c.fill_set("", &mut state.params)?;
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?, path)
    }
}

/// `z` to `w` plus the per-layer AdaIN `(scale, shift)` pairs.
pub fn map_latent(z: &LatentNoise, state: &GenModelState) -> Result<StyleVector> {
    if z.z.len() != state.config.d_z {
        return Err(Error::shape("latent", &[state.config.d_z], &[z.z.len()]));
    }
    let mut g = Graph::new();
    let zv = g.input(Tensor::from_vec(&[1, z.z.len()], z.z.clone())?);
    let wv = state.map_graph(&mut g, Binding::Frozen, zv);
    let mut layers = Vec::new();
    for lvl in &state.layout.dec {
        let s = lvl.style_scale.forward(&mut g, Binding::Frozen, &state.params, wv);
        let b = lvl.style_shift.forward(&mut g, Binding::Frozen, &state.params, wv);
        layers.push((g.value(s).data().to_vec(), g.value(b).data().to_vec()));
    }
    Ok(StyleVector {
        w: g.value(wv).data().to_vec(),
        layers,
    })
}

/// Generates one `[H, W]` image for a binary `[H, W]` mask.
pub fn generate_image(mask: &Tensor, z: &LatentNoise, state: &GenModelState, noise: NoiseMode) -> Result<Tensor> {
    if mask.shape().len() != 2 {
        return Err(Error::shape("generate_image mask", &[0, 0], mask.shape()));
    }
    let (h, w) = mask.dims2();
    let zt = Tensor::from_vec(&[1, z.z.len()], z.z.clone())?;
    if z.z.len() != state.config.d_z {
        return Err(Error::shape("latent", &[state.config.d_z], &[z.z.len()]));
    }
    let out = state.generate_batch(&mask.clone().reshape(&[1, 1, h, w])?, &zt, noise)?;
    out.reshape(&[h, w])
}
