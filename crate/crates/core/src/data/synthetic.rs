//! A small separable image set of coloured geometric shapes, for smoke tests
//! and desk-scale training runs. Each class is one shape in one hue, drawn at
//! a random position and size over a noisy background.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, SeededRng};
use crate::tensor::Tensor;

use super::{write_image, Manifest, Record, Source, CLASS_NAMES};

/// Class label, shape and base colour of each synthetic class. Labels reuse
/// the first four names of the real vocabulary so the same manifest
/// validation applies.
pub const SHAPE_CLASSES: [(&str, &str, [f64; 3]); 4] = [
    (CLASS_NAMES[0], "disc", [0.85, 0.25, 0.2]),
    (CLASS_NAMES[1], "square", [0.25, 0.8, 0.3]),
    (CLASS_NAMES[2], "triangle", [0.25, 0.35, 0.9]),
    (CLASS_NAMES[3], "cross", [0.9, 0.85, 0.2]),
];

fn inside(class: usize, dx: f64, dy: f64, r: f64) -> bool {
    match class {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
        2 => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
        _ => (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r),
    }
}

/// Draw one `[3, side, side]` image of class `class` (0..4).
pub fn render_shape(class: usize, side: usize, rng: &mut SeededRng) -> Result<Tensor> {
    if class >= SHAPE_CLASSES.len() {
        return Err(Error::arg(format!("synthetic class {class} outside 0..4")));
    }
    if side < 8 {
        return Err(Error::arg("synthetic images need a side of at least 8"));
    }
    let s = side as f64;
    let r = rng.uniform(0.2, 0.35) * s;
    let cy = rng.uniform(r, s - r);
    let cx = rng.uniform(r, s - r);
    let base = SHAPE_CLASSES[class].2;
    let color: Vec<f64> = base
        .iter()
        .map(|&c| (c + rng.uniform(-0.1, 0.1)).clamp(0.0, 1.0))
        .collect();
    let bg = rng.uniform(0.1, 0.3);
    let plane = side * side;
    let mut data = vec![0.0; 3 * plane];
    for i in 0..side {
        for j in 0..side {
            let hit = inside(class, j as f64 + 0.5 - cx, i as f64 + 0.5 - cy, r);
            for (ch, &c) in color.iter().enumerate() {
                let v = if hit { c } else { bg } + rng.uniform(-0.05, 0.05);
                data[ch * plane + i * side + j] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_vec(vec![3, side, side], data)
}

/// Write `per_class` images per class under `dir/<label>/` plus
/// `dir/manifest.csv`, and return the manifest.
pub fn generate_shapes(
    dir: impl AsRef<Path>,
    per_class: usize,
    side: usize,
    seed: u64,
) -> Result<Manifest> {
    let dir = dir.as_ref();
    let mut records = Vec::with_capacity(per_class * SHAPE_CLASSES.len());
    for (class, (label, _, _)) in SHAPE_CLASSES.iter().enumerate() {
        let sub = dir.join(label);
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for i in 0..per_class {
            let mut rng = SeededRng::new(derive_seed(seed, &[class as u64, i as u64]));
            let img = render_shape(class, side, &mut rng)?;
            let rel = format!("{label}/{i:04}.ppm");
            write_image(&img, dir.join(&rel))?;
            records.push(Record {
                path: rel,
                label: label.to_string(),
                source: Source::Own,
            });
        }
    }
    let manifest = Manifest::new(records, dir)?;
    manifest.write_csv(dir.join("manifest.csv"))?;
    Ok(manifest)
}
