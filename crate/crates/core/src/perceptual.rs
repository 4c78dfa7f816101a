//! Frozen feature extractors for the perceptual loss.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::graph::{Binding, Graph, Var};
use crate::params::{Conv, ParamSet};
use crate::tensor::Tensor;

pub trait FeatureExtractor: Send + Sync {
    /// Records the extractor on `g` and returns the tapped feature maps.
    fn features(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>>;

    /// Features of a constant `[N, 1, H, W]` batch.
    fn extract(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let taps = self.features(&mut g, v)?;
        Ok(taps.into_iter().map(|t| g.value(t).clone()).collect())
    }
}

/// Stub extractor returning the image itself; the perceptual loss then equals pixel L1.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn features(&self, _g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        Ok(vec![x])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub cin: usize,
    pub cout: usize,
    /// 2×2 max-pool after this layer's activation.
    pub pool_after: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvExtractorSpec {
    pub layers: Vec<ConvLayerSpec>,
    /// Indices of layers whose (post-activation) outputs are compared.
    pub taps: Vec<usize>,
}

/// A frozen stack of 3×3 convolutions with ReLU, loaded from a checkpoint of
/// kind `extractor`: a pretrained classification backbone exported into the
/// checkpoint container with arrays `conv{i}.weight` and `conv{i}.bias`.
pub struct ConvExtractor {
    spec: ConvExtractorSpec,
    params: ParamSet,
    convs: Vec<Conv>,
}

impl ConvExtractor {
    pub fn from_parts(spec: ConvExtractorSpec, container: &Container) -> Result<Self> {
        if spec.taps.is_empty() || spec.taps.iter().any(|t| *t >= spec.layers.len()) {
            return Err(Error::Config("perceptual extractor taps must index existing layers".into()));
        }
        let mut params = ParamSet::default();
        let mut convs = Vec::new();
        for (i, l) in spec.layers.iter().enumerate() {
            let weight = params.push(format!("conv{i}.weight"), Tensor::zeros(&[l.cout, l.cin, 3, 3]));
            let bias = params.push(format!("conv{i}.bias"), Tensor::zeros(&[l.cout]));
            convs.push(Conv {
                weight,
                bias: Some(bias),
                geom: crate::params::ConvGeomDef { stride: 1, pad: 1 },
            });
        }
        container.fill_set("", &mut params)?;
        Ok(ConvExtractor { spec, params, convs })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let unavailable = |why: String| {
            Error::Config(format!(
                "perceptual extractor unavailable ({why}); provide extractor weights or set lambda_perc = 0 to disable the perceptual term"
            ))
        };
        let container = Container::load(path).map_err(|e| unavailable(format!("{}: {e}", path.display())))?;
        container.expect_kind(&["extractor"], path)?;
        let spec: ConvExtractorSpec = serde_json::from_str(&container.meta)?;
        Self::from_parts(spec, &container)
    }
}

impl FeatureExtractor for ConvExtractor {
    fn features(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let (_, c, _, _) = g.value(x).dims4();
        let first = self.spec.layers[0].cin;
        let mut h = if c == first {
            x
        } else if c == 1 {
            // grayscale into an RGB backbone
            let parts = vec![x; first];
            g.concat_channels(&parts)
        } else {
            return Err(Error::shape("perceptual extractor input channels", &[first], &[c]));
        };
        let mut taps = Vec::new();
        for (i, (conv, spec)) in self.convs.iter().zip(&self.spec.layers).enumerate() {
            h = conv.forward(g, Binding::Frozen, &self.params, h);
            h = g.relu(h);
            if self.spec.taps.contains(&i) {
                taps.push(h);
            }
            if spec.pool_after {
                h = g.maxpool2(h);
            }
        }
        Ok(taps)
    }
}

/// Where the perceptual extractor comes from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerceptualSource {
    /// Identity stub (keeps the suite hermetic; no downloaded weights).
    #[default]
    Identity,
    /// A converted pretrained backbone in the checkpoint container format.
    Weights(PathBuf),
    /// No extractor; the perceptual weight must then be 0.
    Disabled,
}

impl PerceptualSource {
    pub fn build(&self, weight: f64) -> Result<Option<Box<dyn FeatureExtractor>>> {
        match self {
            PerceptualSource::Identity => Ok(Some(Box::new(IdentityExtractor))),
            PerceptualSource::Weights(path) => Ok(Some(Box::new(ConvExtractor::load(path)?))),
            PerceptualSource::Disabled if weight > 0.0 => Err(Error::Config(
                "perceptual extractor unavailable; set lambda_perc = 0 to disable the perceptual term".into(),
            )),
            PerceptualSource::Disabled => Ok(None),
        }
    }
}
