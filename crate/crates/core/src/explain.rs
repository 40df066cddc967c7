//! Grad-CAM heatmaps and colour overlays.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io;
use crate::layers::Session;
use crate::model::Model;
use crate::ops::Mode;
use crate::tensor::{Element, Tensor};
use crate::training::argmax;

/// Feature map the gradients are taken against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CamLayer {
    /// Final backbone feature map, before attention.
    #[default]
    Features,
    /// Attention output in feature-map layout.
    Attended,
}

/// Class score that is differentiated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CamScore {
    #[default]
    Logit,
    Prob,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcamConfig {
    pub layer: CamLayer,
    pub score: CamScore,
    pub overlay_alpha: f64,
}

impl Default for GradcamConfig {
    fn default() -> Self {
        Self {
            layer: CamLayer::Features,
            score: CamScore::Logit,
            overlay_alpha: 0.4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// `[H_f, W_f]` map before upsampling, normalised like `values`.
    pub raw: Tensor<f64>,
    /// `[H, W]` at input resolution, in `[0, 1]`.
    pub values: Tensor<f64>,
    pub target: usize,
    pub predicted: usize,
}

/// Bilinear resample of a `[h, w]` feature-grid map onto `(out_h, out_w)`
/// pixels. With odd kernels and `(k - 1) / 2` padding, cell `i` of a
/// stride-`s` grid is centred on pixel `s * i`, so pixel `y` reads grid
/// position `y / s`; positions past the last cell clamp to it.
pub fn upsample_grid(map: &Tensor<f64>, out_h: usize, out_w: usize, stride: usize) -> Result<Tensor<f64>> {
    let &[h, w] = map.shape() else {
        return Err(Error::shape("upsample_grid", "[H, W]", format!("{:?}", map.shape())));
    };
    if stride == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::invalid("upsample_grid: stride and output dims must be >= 1"));
    }
    let taps = |len: usize, out: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|o| {
                let src = (o as f64 / stride as f64).min((len - 1) as f64);
                let i0 = src.floor() as usize;
                (i0, (i0 + 1).min(len - 1), src - i0 as f64)
            })
            .collect()
    };
    let (ty, tx) = (taps(h, out_h), taps(w, out_w));
    let src = map.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ty {
        for &(x0, x1, fx) in &tx {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    Tensor::new(&[out_h, out_w], out)
}

/// `ReLU(sum_k alpha_k A_k)` upsampled to `(out_h, out_w)` with
/// [`upsample_grid`], both divided by the upsampled maximum. Identically zero
/// maps stay zero.
pub fn cam_from_weights(
    features: &Tensor<f64>,
    alpha: &[f64],
    out_h: usize,
    out_w: usize,
    stride: usize,
) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let &[c, h, w] = features.shape() else {
        return Err(Error::shape("gradcam", "[C, H, W]", format!("{:?}", features.shape())));
    };
    if alpha.len() != c {
        return Err(Error::shape("gradcam", format!("{c} weights"), format!("{}", alpha.len())));
    }
    let mut raw = vec![0.0; h * w];
    for (k, plane) in features.data().chunks(h * w).enumerate() {
        for (r, &a) in raw.iter_mut().zip(plane) {
            *r += alpha[k] * a;
        }
    }
    raw.iter_mut().for_each(|v| *v = v.max(0.0));
    let raw = Tensor::new(&[h, w], raw)?;
    let mut up = upsample_grid(&raw, out_h, out_w, stride)?;
    let max = up.data().iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return Ok((raw, up));
    }
    up.data_mut().iter_mut().for_each(|v| *v /= max);
    Ok((raw.map(|v| v / max), up))
}

/// Grad-CAM for one `[C, H, W]` image. `target` defaults to the predicted
/// class.
pub fn gradcam<T: Element>(model: &Model<T>, image: &Tensor<T>, target: Option<usize>, cfg: &GradcamConfig) -> Result<Heatmap> {
    let k = model.config.num_classes;
    if let Some(t) = target {
        if t >= k {
            return Err(Error::invalid(format!("target class {t} outside 0..{k}")));
        }
    }
    let &[_, h, w] = image.shape() else {
        return Err(Error::shape("gradcam", "[C, H, W]", format!("{:?}", image.shape())));
    };
    let x = image.clone().reshape(&[1, image.shape()[0], h, w])?;
    let mut s = Session::new(&model.store, Mode::Eval);
    let nodes = model.forward_nodes(&mut s, &x)?;
    let predicted = argmax(s.graph.value(nodes.probs).data());
    let target = target.unwrap_or(predicted);
    let scores = match cfg.score {
        CamScore::Logit => nodes.logits,
        CamScore::Prob => nodes.probs,
    };
    let mut pick = Tensor::zeros(&[1, k]);
    pick.data_mut()[target] = T::one();
    let pick = s.graph.constant(pick);
    let picked = s.graph.mul(scores, pick)?;
    let score = s.graph.sum(picked);
    s.graph.backward(score)?;
    let layer = match cfg.layer {
        CamLayer::Features => nodes.features,
        CamLayer::Attended => nodes.attended,
    };
    let a = s.graph.value(layer);
    let &[_, c, fh, fw] = a.shape() else {
        return Err(Error::shape("gradcam", "[1, C, H, W]", format!("{:?}", a.shape())));
    };
    let a = a.cast::<f64>().reshape(&[c, fh, fw])?;
    let alpha: Vec<f64> = match s.graph.grad(layer) {
        Some(g) => g.data().chunks(fh * fw).map(|p| p.iter().map(|v| v.as_f64()).sum::<f64>() / (fh * fw) as f64).collect(),
        None => vec![0.0; c],
    };
    let (raw, values) = cam_from_weights(&a, &alpha, h, w, model.backbone_config.total_stride())?;
    Ok(Heatmap {
        raw,
        values,
        target,
        predicted,
    })
}

/// Colour stops at 0, 1/4, 1/2, 3/4 and 1: blue, cyan, green, yellow, red.
pub const JET_STOPS: [[f64; 3]; 5] = [
    [0.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [0.0, 1.0, 0.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 0.0],
];

/// Piecewise-linear interpolation of [`JET_STOPS`]; input clamped to `[0, 1]`.
pub fn colormap(v: f64) -> [f64; 3] {
    let x = v.clamp(0.0, 1.0) * 4.0;
    let i = (x.floor() as usize).min(3);
    let f = x - i as f64;
    let (a, b) = (JET_STOPS[i], JET_STOPS[i + 1]);
    [0, 1, 2].map(|c| a[c] + f * (b[c] - a[c]))
}

/// `(1 - alpha) * gray + alpha * colormap(heat)` as `[3, H, W]`. An all-zero
/// heatmap returns the grayscale image unblended.
pub fn overlay(heatmap: &Tensor<f64>, image: &Tensor<f64>, alpha: f64) -> Result<Tensor<f64>> {
    let &[h, w] = heatmap.shape() else {
        return Err(Error::shape("overlay", "[H, W]", format!("{:?}", heatmap.shape())));
    };
    let gray: Vec<f64> = match *image.shape() {
        [ih, iw] if (ih, iw) == (h, w) => image.data().to_vec(),
        [c, ih, iw] if (ih, iw) == (h, w) && c > 0 => (0..h * w)
            .map(|i| (0..c).map(|ch| image.data()[ch * h * w + i]).sum::<f64>() / c as f64)
            .collect(),
        ref s => return Err(Error::shape("overlay", format!("[H, W] or [C, H, W] with H, W = {h}, {w}"), format!("{s:?}"))),
    };
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("overlay alpha {alpha} outside [0, 1]")));
    }
    let blend = if heatmap.data().iter().all(|&v| v == 0.0) { 0.0 } else { alpha };
    let mut out = vec![0.0; 3 * h * w];
    for (i, (&g, &v)) in gray.iter().zip(heatmap.data()).enumerate() {
        let col = colormap(v);
        for c in 0..3 {
            out[c * h * w + i] = (1.0 - blend) * g + blend * col[c];
        }
    }
    Tensor::new(&[3, h, w], out)
}

pub fn write_heatmap_csv(path: &Path, heatmap: &Tensor<f64>) -> Result<()> {
    let w = *heatmap.shape().last().unwrap_or(&1);
    let mut text = String::new();
    for row in heatmap.data().chunks(w) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    io::write_atomic(path, text.as_bytes())
}
