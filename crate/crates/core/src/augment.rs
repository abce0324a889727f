//! Image pre-processing: the six augmentation methods and the presets used by
//! the experiment table.
//!
//! Images are `[3, h, w]` tensors with values in `[0, 1]` until mean
//! subtraction.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::arch::Arch;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const DEFAULT_ROTATION_DEGREES: f64 = 15.0;
pub const DEFAULT_BRIGHTNESS: f64 = 0.125;
pub const DEFAULT_CONTRAST: (f64, f64) = (0.8, 1.2);
pub const CROP_AREA: (f64, f64) = (0.05, 1.0);
pub const CROP_ASPECT: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Method {
    /// (1) Independent horizontal and vertical flips.
    Flip { p_horizontal: f64, p_vertical: f64 },
    /// (2) Rotation by a uniform angle in `±max_degrees`, zero fill.
    Rotate { max_degrees: f64 },
    /// (3) Bilinear resize to the target side.
    Resize,
    /// (4) Random crop of relative area `area` and aspect ratio `aspect`,
    /// resized to the target side.
    Crop {
        area: (f64, f64),
        aspect: (f64, f64),
    },
    /// (5) Per-channel mean subtraction: the dataset mean, or each image's
    /// own mean when `per_image` is set or no dataset mean is known.
    MeanSubtract { per_image: bool },
    /// (6) Brightness offset in `±brightness` and contrast factor in
    /// `contrast`, clamped to `[0, 1]`.
    ColorAdjust {
        brightness: f64,
        contrast: (f64, f64),
    },
}

impl Method {
    pub fn id(&self) -> u8 {
        match self {
            Method::Flip { .. } => 1,
            Method::Rotate { .. } => 2,
            Method::Resize => 3,
            Method::Crop { .. } => 4,
            Method::MeanSubtract { .. } => 5,
            Method::ColorAdjust { .. } => 6,
        }
    }

    /// The method with default parameters.
    pub fn from_id(id: u8) -> Result<Method> {
        Ok(match id {
            1 => Method::Flip {
                p_horizontal: 0.5,
                p_vertical: 0.5,
            },
            2 => Method::Rotate {
                max_degrees: DEFAULT_ROTATION_DEGREES,
            },
            3 => Method::Resize,
            4 => Method::Crop {
                area: CROP_AREA,
                aspect: CROP_ASPECT,
            },
            5 => Method::MeanSubtract { per_image: false },
            6 => Method::ColorAdjust {
                brightness: DEFAULT_BRIGHTNESS,
                contrast: DEFAULT_CONTRAST,
            },
            other => {
                return Err(Error::arg(format!(
                    "augmentation method id {other} outside 1..=6"
                )))
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let ok = match *self {
            Method::Flip {
                p_horizontal,
                p_vertical,
            } => prob(p_horizontal) && prob(p_vertical),
            Method::Rotate { max_degrees } => (0.0..=180.0).contains(&max_degrees),
            Method::Resize | Method::MeanSubtract { .. } => true,
            Method::Crop { area, aspect } => {
                CROP_AREA.0 <= area.0
                    && area.0 <= area.1
                    && area.1 <= 1.0
                    && 0.0 < aspect.0
                    && aspect.0 <= aspect.1
            }
            Method::ColorAdjust {
                brightness,
                contrast,
            } => (0.0..=1.0).contains(&brightness) && 0.0 < contrast.0 && contrast.0 <= contrast.1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::arg(format!(
                "invalid augmentation parameters {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchFamily {
    VggResnet,
    Inception,
}

impl ArchFamily {
    pub fn of(arch: Arch) -> ArchFamily {
        if arch.is_inception() {
            ArchFamily::Inception
        } else {
            ArchFamily::VggResnet
        }
    }

    pub fn input_side(self) -> usize {
        match self {
            ArchFamily::VggResnet => 224,
            ArchFamily::Inception => 299,
        }
    }
}

impl fmt::Display for ArchFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchFamily::VggResnet => "vgg_resnet",
            ArchFamily::Inception => "inception",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentMode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPipeline {
    pub methods: Vec<Method>,
    pub side: usize,
    #[serde(default)]
    pub dataset_mean: Option<[f64; 3]>,
}

/// Methods applied in this order regardless of how they are listed.
const ORDER: [u8; 6] = [1, 2, 4, 3, 6, 5];

impl AugmentPipeline {
    pub fn new(methods: Vec<Method>, side: usize) -> Result<AugmentPipeline> {
        let p = AugmentPipeline {
            methods,
            side,
            dataset_mean: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.side == 0 {
            return Err(Error::arg("target side must be positive"));
        }
        let mut seen = BTreeSet::new();
        for m in &self.methods {
            m.validate()?;
            if !seen.insert(m.id()) {
                return Err(Error::arg(format!(
                    "augmentation method {} listed twice",
                    m.id()
                )));
            }
        }
        Ok(())
    }

    pub fn method_ids(&self) -> BTreeSet<u8> {
        self.methods.iter().map(Method::id).collect()
    }

    pub fn with_side(mut self, side: usize) -> AugmentPipeline {
        self.side = side;
        self
    }

    pub fn with_dataset_mean(mut self, mean: [f64; 3]) -> AugmentPipeline {
        self.dataset_mean = Some(mean);
        self
    }

    fn method(&self, id: u8) -> Option<&Method> {
        self.methods.iter().find(|m| m.id() == id)
    }

    /// Train mode applies every method; eval mode only resizes and
    /// subtracts the mean. The output is always `[3, side, side]`.
    pub fn apply(&self, img: &Tensor, rng: &mut SeededRng, mode: AugmentMode) -> Result<Tensor> {
        let mut out = grayscale_to_rgb(img)?;
        for id in ORDER {
            let Some(m) = self.method(id) else { continue };
            let stochastic = !matches!(m, Method::Resize | Method::MeanSubtract { .. });
            if mode == AugmentMode::Eval && stochastic {
                continue;
            }
            if matches!(m, Method::MeanSubtract { .. }) && !is_side(&out, self.side) {
                out = resize_bilinear(&out, self.side, self.side)?;
            }
            out = self.apply_one(&out, m, rng)?;
        }
        if !is_side(&out, self.side) {
            out = resize_bilinear(&out, self.side, self.side)?;
        }
        Ok(out)
    }

    fn apply_one(&self, img: &Tensor, m: &Method, rng: &mut SeededRng) -> Result<Tensor> {
        match *m {
            Method::MeanSubtract { per_image: false } if self.dataset_mean.is_some() => {
                mean_subtract(img, self.dataset_mean.unwrap())
            }
            _ => apply_method(img, m, self.side, rng),
        }
    }
}

fn is_side(img: &Tensor, side: usize) -> bool {
    img.shape()[1] == side && img.shape()[2] == side
}

/// Apply one method to a `[c, h, w]` image. `side` is the target size of
/// the resizing methods; method 5 uses the image's own mean here.
pub fn apply_method(
    img: &Tensor,
    method: &Method,
    side: usize,
    rng: &mut SeededRng,
) -> Result<Tensor> {
    method.validate()?;
    image_dims(img)?;
    match *method {
        Method::Flip {
            p_horizontal,
            p_vertical,
        } => {
            let mut out = img.clone();
            if rng.bernoulli(p_horizontal) {
                out = flip(&out, FlipAxis::Horizontal)?;
            }
            if rng.bernoulli(p_vertical) {
                out = flip(&out, FlipAxis::Vertical)?;
            }
            Ok(out)
        }
        Method::Rotate { max_degrees } => rotate(img, rng.uniform(-max_degrees, max_degrees)),
        Method::Resize => resize_bilinear(img, side, side),
        Method::Crop { area, aspect } => {
            let (_, h, w) = image_dims(img)?;
            let b = sample_crop_box(h, w, area, aspect, rng);
            resize_bilinear(&crop(img, b)?, side, side)
        }
        Method::MeanSubtract { .. } => {
            let mean = channel_means(img)?;
            mean_subtract(img, mean)
        }
        Method::ColorAdjust {
            brightness,
            contrast,
        } => {
            let b = rng.uniform(-brightness, brightness);
            let c = rng.uniform(contrast.0, contrast.1);
            color_adjust(img, b, c)
        }
    }
}

/// Preset method sets keyed by the experiment table's augmentation count.
pub fn build_preset(num_aug: u8, family: ArchFamily) -> Result<AugmentPipeline> {
    let ids: &[u8] = match (family, num_aug) {
        (ArchFamily::VggResnet, 3) => &[1, 3, 5],
        (ArchFamily::VggResnet, 4) => &[1, 3, 4, 5],
        (ArchFamily::Inception, 4) => &[1, 3, 5, 6],
        (ArchFamily::Inception, 5) => &[1, 3, 4, 5, 6],
        _ => {
            return Err(Error::arg(format!(
                "no augmentation preset {num_aug} for the {family} family"
            )))
        }
    };
    let methods = ids
        .iter()
        .map(|&i| Method::from_id(i))
        .collect::<Result<Vec<_>>>()?;
    AugmentPipeline::new(methods, family.input_side())
}

fn image_dims(img: &Tensor) -> Result<(usize, usize, usize)> {
    match *img.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::dim(format!(
            "expected an image [c, h, w], got {s:?}"
        ))),
    }
}

/// Replicate a single channel threefold; three-channel input passes through.
pub fn grayscale_to_rgb(img: &Tensor) -> Result<Tensor> {
    let (c, h, w) = image_dims(img)?;
    match c {
        3 => Ok(img.clone()),
        1 => Tensor::from_vec(vec![3, h, w], img.data().repeat(3)),
        _ => Err(Error::dim(format!("expected 1 or 3 channels, got {c}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipAxis {
    /// Mirror left-right.
    Horizontal,
    /// Mirror top-bottom.
    Vertical,
}

pub fn flip(img: &Tensor, axis: FlipAxis) -> Result<Tensor> {
    let (c, h, w) = image_dims(img)?;
    let src = img.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let (si, sj) = match axis {
                    FlipAxis::Horizontal => (i, w - 1 - j),
                    FlipAxis::Vertical => (h - 1 - i, j),
                };
                out[(ch * h + i) * w + j] = src[(ch * h + si) * w + sj];
            }
        }
    }
    Tensor::from_vec(vec![c, h, w], out)
}

/// Bilinear sample at continuous pixel coordinates; outside is zero.
fn sample_bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (dy, dx) = (y - y0, x - x0);
    let at = |yi: f64, xi: f64| -> f64 {
        if yi < 0.0 || xi < 0.0 || yi >= h as f64 || xi >= w as f64 {
            0.0
        } else {
            plane[yi as usize * w + xi as usize]
        }
    };
    at(y0, x0) * (1.0 - dy) * (1.0 - dx)
        + at(y0, x0 + 1.0) * (1.0 - dy) * dx
        + at(y0 + 1.0, x0) * dy * (1.0 - dx)
        + at(y0 + 1.0, x0 + 1.0) * dy * dx
}

/// Rotate counter-clockwise about the image centre.
pub fn rotate(img: &Tensor, degrees: f64) -> Result<Tensor> {
    let (c, h, w) = image_dims(img)?;
    let (s, co) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = vec![0.0; img.len()];
    for ch in 0..c {
        let plane = &img.data()[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let (y, x) = (i as f64 - cy, j as f64 - cx);
                // Inverse map: rotate the destination point clockwise.
                let sy = co * y + s * x + cy;
                let sx = -s * y + co * x + cx;
                out[(ch * h + i) * w + j] = sample_bilinear(plane, h, w, sy, sx);
            }
        }
    }
    Tensor::from_vec(vec![c, h, w], out)
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = image_dims(img)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::arg("resize target must be positive"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let axis = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let ys = axis(out_h, h);
    let xs = axis(out_w, w);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &img.data()[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::from_vec(vec![c, out_h, out_w], out)
}

/// A crop rectangle in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CropBox {
    pub fn area_ratio(&self, h: usize, w: usize) -> f64 {
        (self.height * self.width) as f64 / (h * w) as f64
    }
}

/// Draw a crop whose area is a uniform fraction of the image in `area` and
/// whose aspect ratio is log-uniform in `aspect`. After ten rejected draws the
/// whole image is returned.
pub fn sample_crop_box(
    h: usize,
    w: usize,
    area: (f64, f64),
    aspect: (f64, f64),
    rng: &mut SeededRng,
) -> CropBox {
    let total = (h * w) as f64;
    for _ in 0..10 {
        let target = rng.uniform(area.0, area.1) * total;
        let ratio = rng.uniform(aspect.0.ln(), aspect.1.ln()).exp();
        let cw = (target * ratio).sqrt().ceil() as usize;
        let ch = (target / ratio).sqrt().ceil() as usize;
        if cw == 0 || ch == 0 || cw > w || ch > h || (ch * cw) as f64 > area.1 * total {
            continue;
        }
        return CropBox {
            top: rng.below(h - ch + 1),
            left: rng.below(w - cw + 1),
            height: ch,
            width: cw,
        };
    }
    CropBox {
        top: 0,
        left: 0,
        height: h,
        width: w,
    }
}

pub fn crop(img: &Tensor, b: CropBox) -> Result<Tensor> {
    let (c, h, w) = image_dims(img)?;
    if b.height == 0 || b.width == 0 || b.top + b.height > h || b.left + b.width > w {
        return Err(Error::arg(format!("crop {b:?} outside a {h}x{w} image")));
    }
    let mut out = Vec::with_capacity(c * b.height * b.width);
    for ch in 0..c {
        for i in b.top..b.top + b.height {
            let row = (ch * h + i) * w;
            out.extend_from_slice(&img.data()[row + b.left..row + b.left + b.width]);
        }
    }
    Tensor::from_vec(vec![c, b.height, b.width], out)
}

pub fn channel_means(img: &Tensor) -> Result<[f64; 3]> {
    let (c, h, w) = image_dims(img)?;
    if c != 3 {
        return Err(Error::dim(format!("expected 3 channels, got {c}")));
    }
    let mut m = [0.0; 3];
    for (ch, v) in m.iter_mut().enumerate() {
        *v = img.data()[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / (h * w) as f64;
    }
    Ok(m)
}

pub fn mean_subtract(img: &Tensor, mean: [f64; 3]) -> Result<Tensor> {
    let (c, h, w) = image_dims(img)?;
    if c != 3 {
        return Err(Error::dim(format!("expected 3 channels, got {c}")));
    }
    let mut out = img.clone();
    for (ch, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
        for v in plane {
            *v -= mean[ch];
        }
    }
    Ok(out)
}

/// `clamp((x + brightness − μ) · contrast + μ)` with `μ` the mean of the
/// brightened image.
pub fn color_adjust(img: &Tensor, brightness: f64, contrast: f64) -> Result<Tensor> {
    image_dims(img)?;
    let shifted = img.map(|v| v + brightness);
    let mu = shifted.sum() / shifted.len() as f64;
    Ok(shifted.map(|v| ((v - mu) * contrast + mu).clamp(0.0, 1.0)))
}
