//! Attention heatmaps and overlays.

use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::resize_bilinear_2d;
use crate::tensor::Tensor;
use crate::unet::AttentionMap;

pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Colormap {
    /// Diverging blue to grey to red.
    #[default]
    CoolWarm,
    /// Dark blue through cyan and yellow to dark red.
    Jet,
}

impl Colormap {
    /// Piecewise-linear stops `(position, [r, g, b])`.
    pub fn stops(self) -> &'static [(f64, [f64; 3])] {
        match self {
            Colormap::CoolWarm => &[
                (0.0, [59.0, 76.0, 192.0]),
                (0.5, [221.0, 221.0, 221.0]),
                (1.0, [180.0, 4.0, 38.0]),
            ],
            Colormap::Jet => &[
                (0.0, [0.0, 0.0, 127.5]),
                (0.125, [0.0, 0.0, 255.0]),
                (0.375, [0.0, 255.0, 255.0]),
                (0.625, [255.0, 255.0, 0.0]),
                (0.875, [255.0, 0.0, 0.0]),
                (1.0, [127.5, 0.0, 0.0]),
            ],
        }
    }

    /// Colour of `t ∈ [0, 1]` as RGB in `[0, 255]`.
    pub fn color(self, t: f64) -> [f64; 3] {
        let t = t.clamp(0.0, 1.0);
        let stops = self.stops();
        for pair in stops.windows(2) {
            let ((t0, c0), (t1, c1)) = (pair[0], pair[1]);
            if t <= t1 {
                let f = (t - t0) / (t1 - t0);
                return [0, 1, 2].map(|k| c0[k] + f * (c1[k] - c0[k]));
            }
        }
        stops[stops.len() - 1].1
    }

    pub fn name(self) -> &'static str {
        match self {
            Colormap::CoolWarm => "cool-warm",
            Colormap::Jet => "jet",
        }
    }
}

impl FromStr for Colormap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cool-warm" | "coolwarm" => Ok(Colormap::CoolWarm),
            "jet" => Ok(Colormap::Jet),
            other => Err(Error::param("colormap", format!("unknown `{other}` (use cool-warm or jet)"))),
        }
    }
}

/// Min-max normalization to `[0, 1]`; a constant map becomes 0.5 everywhere.
pub fn normalize_min_max(t: &Tensor) -> Tensor {
    let (lo, hi) = (t.min(), t.max());
    if hi > lo {
        t.map(|v| (v - lo) / (hi - lo))
    } else {
        t.map(|_| 0.5)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverlayImage {
    /// `[H, W]` grayscale in `[0, 1]`.
    pub base: Tensor,
    /// Normalized attention at base resolution, `[H, W]` in `[0, 1]`.
    pub heat: Tensor,
    pub blend: RgbImage,
    pub colormap: Colormap,
    pub alpha: f64,
    pub layer: usize,
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Colour-mapped heat without blending.
pub fn render_heatmap(heat: &Tensor, colormap: Colormap) -> RgbImage {
    let (h, w) = heat.dims2();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb(colormap.color(heat.get2(y as usize, x as usize)).map(to_u8))
    })
}

/// Blends the chosen gate's normalized, upsampled attention over `image`.
pub fn render_attention_overlay(
    image: &Tensor,
    maps: &[AttentionMap],
    layer: usize,
    colormap: Colormap,
    alpha: f64,
) -> Result<OverlayImage> {
    let available: Vec<usize> = maps.iter().map(|m| m.gate_index).collect();
    let map = maps.iter().find(|m| m.gate_index == layer).ok_or_else(|| {
        Error::param("layer", format!("{layer} is not available; choose one of {available:?}"))
    })?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::param("alpha", format!("{alpha} outside [0, 1]")));
    }
    if image.shape().len() != 2 {
        return Err(Error::shape("overlay base image", &[0, 0], image.shape()));
    }
    let (h, w) = image.dims2();
    let heat = resize_bilinear_2d(&normalize_min_max(&map.alpha), h, w).map(|v| v.clamp(0.0, 1.0));
    let blend = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (yy, xx) = (y as usize, x as usize);
        let gray = image.get2(yy, xx).clamp(0.0, 1.0) * 255.0;
        let c = colormap.color(heat.get2(yy, xx));
        image::Rgb(c.map(|ch| to_u8((1.0 - alpha) * gray + alpha * ch)))
    });
    Ok(OverlayImage {
        base: image.clone(),
        heat,
        blend,
        colormap,
        alpha,
        layer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(values: Vec<f64>, n: usize) -> AttentionMap {
        AttentionMap {
            alpha: Tensor::from_vec(&[n, n], values).unwrap(),
            gate_index: 0,
        }
    }

    #[test]
    fn two_by_two_table_lookup() {
        let img = Tensor::full(&[2, 2], 0.0);
        let m = map(vec![0.2, 0.4, 0.6, 0.8], 2);
        let o = render_attention_overlay(&img, &[m], 0, Colormap::CoolWarm, 1.0).unwrap();
        // normalized: 0, 1/3, 2/3, 1
        let expect = |t: f64| -> [u8; 3] {
            let (c0, c1, f) = if t <= 0.5 {
                ([59.0, 76.0, 192.0], [221.0, 221.0, 221.0], t / 0.5)
            } else {
                ([221.0, 221.0, 221.0], [180.0, 4.0, 38.0], (t - 0.5) / 0.5)
            };
            [0, 1, 2].map(|k| (c0[k] + f * (c1[k] - c0[k])).round() as u8)
        };
        assert_eq!(o.blend.get_pixel(0, 0).0, [59, 76, 192]);
        assert_eq!(o.blend.get_pixel(1, 0).0, expect(1.0 / 3.0));
        assert_eq!(o.blend.get_pixel(0, 1).0, expect(2.0 / 3.0));
        assert_eq!(o.blend.get_pixel(1, 1).0, [180, 4, 38]);
    }

    #[test]
    fn alpha_zero_is_base_and_constant_map_is_uniform() {
        let img = Tensor::from_vec(&[2, 2], vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        let o = render_attention_overlay(&img, &[map(vec![0.3; 4], 2)], 0, Colormap::CoolWarm, 0.0).unwrap();
        assert_eq!(o.blend.get_pixel(1, 0).0, [64, 64, 64]);
        assert!(o.heat.data().iter().all(|v| *v == 0.5));
        let tint = render_attention_overlay(&Tensor::zeros(&[2, 2]), &[map(vec![0.3; 4], 2)], 0, Colormap::CoolWarm, 0.5).unwrap();
        let first = tint.blend.get_pixel(0, 0).0;
        assert!(tint.blend.pixels().all(|p| p.0 == first));
    }

    #[test]
    fn invalid_layer_lists_available() {
        let err = render_attention_overlay(&Tensor::zeros(&[2, 2]), &[map(vec![0.0; 4], 2)], 3, Colormap::Jet, 0.5).unwrap_err();
        assert!(err.to_string().contains("[0]"), "{err}");
    }
}
