//! Strided convolutional patch discriminators.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Binding, Graph, Var};
use crate::params::{Conv, ParamSet};

const LEAK: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscConfig {
    pub base_channels: usize,
}

impl Default for DiscConfig {
    fn default() -> Self {
        DiscConfig { base_channels: 32 }
    }
}

impl DiscConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::param("disc.base_channels", "must be >= 1"));
        }
        Ok(())
    }
}

/// Three 4×4 stride-2 convolutions and a 3×3 scoring convolution; an
/// `H × W` input yields an `H/8 × W/8` map of unbounded scores.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchDiscriminator {
    pub config: DiscConfig,
    pub params: ParamSet,
    convs: Vec<Conv>,
}

impl PatchDiscriminator {
    pub fn new(config: DiscConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        let c = config.base_channels;
        let convs = vec![
            Conv::new(&mut params, "d0", 1, c, 4, 2, 1, true, &mut rng),
            Conv::new(&mut params, "d1", c, 2 * c, 4, 2, 1, true, &mut rng),
            Conv::new(&mut params, "d2", 2 * c, 4 * c, 4, 2, 1, true, &mut rng),
            Conv::new(&mut params, "d3", 4 * c, 1, 3, 1, 1, true, &mut rng),
        ];
        Ok(PatchDiscriminator { config, params, convs })
    }

    pub fn forward_graph(&self, g: &mut Graph, bind: Binding, x: Var) -> Result<Var> {
        let (_, c, h, w) = g.value(x).dims4();
        if c != 1 || h < 8 || w < 8 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::shape("discriminator input (1 channel, sides multiple of 8)", &[1, 8, 8], &[c, h, w]));
        }
        let mut y = x;
        for (i, conv) in self.convs.iter().enumerate() {
            y = conv.forward(g, bind, &self.params, y);
            if i + 1 < self.convs.len() {
                y = g.leaky_relu(y, LEAK);
            }
        }
        Ok(y)
    }

    pub fn fill_from(&mut self, c: &crate::checkpoint::Container, prefix: &str, path: &Path) -> Result<()> {
        c.fill_set(prefix, &mut self.params).map_err(|e| match e {
            Error::Checkpoint { reason, .. } => Error::Checkpoint {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn patch_map_is_eighth_resolution() {
        let d = PatchDiscriminator::new(DiscConfig { base_channels: 2 }, 0).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[2, 1, 16, 24], 0.5));
        let s = d.forward_graph(&mut g, Binding::Frozen, x).unwrap();
        assert_eq!(g.value(s).shape(), &[2, 1, 2, 3]);
        let bad = g.input(Tensor::zeros(&[1, 1, 12, 12]));
        assert!(d.forward_graph(&mut g, Binding::Frozen, bad).is_err());
    }
}
