//! Procedural paired-domain data: a blob mask (control), the blob rendered
//! with a latent style (target), and a second rendering of the same style at
//! an independent pose (exemplar).
//!
//! Rendering: `target[c,i,j] = BACKGROUND + a·h_c·tex_f(i,j)·blob(i,j)` where
//! `blob` is the support of a Gaussian bump above `threshold` and
//! `tex_f(i,j) = 1 + κ·(−1)^(⌊i/f⌋ + ⌊j/f⌋)` is a checkerboard of cell size `f`
//! in absolute grid coordinates. The control embeds the same support in
//! `{−1, +1}` so it can serve directly as the bridge endpoint `y`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const BACKGROUND: f64 = 0.0;
pub const TEXTURE_FREQS: [usize; 3] = [1, 2, 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Blob support is `exp(−d²/2r²) > threshold`.
    pub threshold: f64,
    /// Texture contrast κ.
    pub contrast: f64,
}

impl SynthParams {
    pub fn grid(size: usize) -> Self {
        let r = size as f64 / 8.0;
        Self {
            height: size,
            width: size,
            channels: 3,
            radius_min: 1.5 * r,
            radius_max: 2.5 * r,
            threshold: 0.5,
            contrast: 0.25,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

impl Default for SynthParams {
    fn default() -> Self {
        Self::grid(8)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Style {
    pub amplitude: f64,
    pub hue: Vec<f64>,
    pub freq: usize,
}

impl Style {
    pub fn random(channels: usize, rng: &mut RngStream) -> Self {
        let amplitude = rng.uniform_in(0.5, 2.0);
        let raw: Vec<f64> = (0..channels).map(|_| rng.normal().abs() + 0.05).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let freq = TEXTURE_FREQS[rng.int_inclusive(0, TEXTURE_FREQS.len() - 1)];
        Self {
            amplitude,
            hue: raw.iter().map(|v| v / norm).collect(),
            freq,
        }
    }
}

/// Blob placement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub center: (f64, f64),
    pub radius: f64,
}

impl Pose {
    pub fn random(params: &SynthParams, rng: &mut RngStream) -> Self {
        let cy = rng.uniform_in(1.0, params.height as f64 - 2.0);
        let cx = rng.uniform_in(1.0, params.width as f64 - 2.0);
        Self {
            center: (cy, cx),
            radius: rng.uniform_in(params.radius_min, params.radius_max),
        }
    }
}

/// `(control, target, exemplar)` with the shared style and both poses.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub control: Tensor,
    pub target: Tensor,
    pub exemplar: Tensor,
    pub style: Style,
    pub target_pose: Pose,
    pub exemplar_pose: Pose,
}

pub fn texture(freq: usize, contrast: f64, i: usize, j: usize) -> f64 {
    let parity = (i / freq + j / freq) % 2;
    if parity == 0 {
        1.0 + contrast
    } else {
        1.0 - contrast
    }
}

/// Binary blob support, row-major `[H, W]`.
pub fn blob_mask(params: &SynthParams, pose: &Pose) -> Vec<bool> {
    let (cy, cx) = pose.center;
    let mut mask = Vec::with_capacity(params.height * params.width);
    for i in 0..params.height {
        for j in 0..params.width {
            let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
            mask.push((-d2 / (2.0 * pose.radius * pose.radius)).exp() > params.threshold);
        }
    }
    mask
}

pub fn render(params: &SynthParams, style: &Style, pose: &Pose) -> Tensor {
    let mask = blob_mask(params, pose);
    let (h, w) = (params.height, params.width);
    let mut data = vec![BACKGROUND; params.channels * h * w];
    for c in 0..params.channels {
        for i in 0..h {
            for j in 0..w {
                if mask[i * w + j] {
                    data[(c * h + i) * w + j] +=
                        style.amplitude * style.hue[c] * texture(style.freq, params.contrast, i, j);
                }
            }
        }
    }
    Tensor::new(params.shape().to_vec(), data).expect("render shape")
}

pub fn control_of(params: &SynthParams, pose: &Pose) -> Tensor {
    let mask = blob_mask(params, pose);
    let plane: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { -1.0 }).collect();
    let data = (0..params.channels)
        .flat_map(|_| plane.iter().copied())
        .collect();
    Tensor::new(params.shape().to_vec(), data).expect("control shape")
}

/// Draws style, then target pose, then exemplar pose, in that order.
pub fn gen_sample(params: &SynthParams, rng: &mut RngStream) -> PairedSample {
    let style = Style::random(params.channels, rng);
    let target_pose = Pose::random(params, rng);
    let exemplar_pose = Pose::random(params, rng);
    PairedSample {
        control: control_of(params, &target_pose),
        target: render(params, &style, &target_pose),
        exemplar: render(params, &style, &exemplar_pose),
        style,
        target_pose,
        exemplar_pose,
    }
}

/// Least-squares style estimate over the masked pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleEstimate {
    pub amplitude: f64,
    pub hue: Vec<f64>,
    pub freq: usize,
    pub residual: f64,
}

/// Fits `image[c] − BACKGROUND ≈ α_c·tex_f` on pixels where `mask > 0`
/// (first channel), for each candidate `f`; keeps the best fit and reports
/// `a = ‖α‖`, `h = α/‖α‖`.
pub fn style_recover(image: &Tensor, mask: &Tensor, contrast: f64) -> Result<StyleEstimate> {
    if image.rank() != 3 || mask.rank() != 3 || image.shape()[1..] != mask.shape()[1..] {
        return Err(Error::shape("style_recover", image.shape(), mask.shape()));
    }
    let (ch, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let support: Vec<(usize, usize)> = (0..h)
        .flat_map(|i| (0..w).map(move |j| (i, j)))
        .filter(|&(i, j)| mask.data()[i * w + j] > 0.0)
        .collect();
    if support.is_empty() {
        return Err(Error::InvalidArgument("style_recover: empty mask".into()));
    }
    let px = |c: usize, i: usize, j: usize| image.data()[(c * h + i) * w + j] - BACKGROUND;
    let mut best: Option<StyleEstimate> = None;
    for &freq in &TEXTURE_FREQS {
        let basis: Vec<f64> = support
            .iter()
            .map(|&(i, j)| texture(freq, contrast, i, j))
            .collect();
        let gram: f64 = basis.iter().map(|b| b * b).sum();
        let mut alpha = vec![0.0; ch];
        let mut residual = 0.0;
        for (c, a) in alpha.iter_mut().enumerate() {
            let proj: f64 = support
                .iter()
                .zip(&basis)
                .map(|(&(i, j), b)| px(c, i, j) * b)
                .sum();
            *a = proj / gram;
            residual += support
                .iter()
                .zip(&basis)
                .map(|(&(i, j), b)| (px(c, i, j) - *a * b).powi(2))
                .sum::<f64>();
        }
        if best.as_ref().is_none_or(|b| residual < b.residual) {
            let amp = alpha.iter().map(|v| v * v).sum::<f64>().sqrt();
            let hue = if amp > 0.0 {
                alpha.iter().map(|v| v / amp).collect()
            } else {
                vec![0.0; ch]
            };
            best = Some(StyleEstimate {
                amplitude: amp,
                hue,
                freq,
                residual,
            });
        }
    }
    Ok(best.expect("at least one candidate"))
}

/// Indexable synthetic dataset: sample `i` comes from the `i`-th fork of the
/// data stream; train/validation indices come from a seeded permutation.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub params: SynthParams,
    stream: RngStream,
    train: Vec<usize>,
    val: Vec<usize>,
}

impl SyntheticDataset {
    pub fn new(params: SynthParams, seed: u64, size: usize, val_fraction: f64) -> Result<Self> {
        if size < 2 || !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::InvalidArgument(format!(
                "dataset size {size} / val fraction {val_fraction}"
            )));
        }
        let stream = RngStream::named(seed, "data");
        let mut perm: Vec<usize> = (0..size).collect();
        let mut shuffle = stream.child("split");
        for i in (1..size).rev() {
            let j = shuffle.int_inclusive(0, i);
            perm.swap(i, j);
        }
        let n_val = ((size as f64 * val_fraction).round() as usize).clamp(1, size - 1);
        let val = perm[..n_val].to_vec();
        let train = perm[n_val..].to_vec();
        Ok(Self {
            params,
            stream,
            train,
            val,
        })
    }

    pub fn sample(&self, index: usize) -> PairedSample {
        gen_sample(&self.params, &mut self.stream.fork(index as u64))
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train
    }

    pub fn val_indices(&self) -> &[usize] {
        &self.val
    }
}
