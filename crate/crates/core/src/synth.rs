//! Synthetic ultrasound-like dataset: one parametric shape family per class
//! over multiplicative speckle.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io::{self, Record};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Ellipse,
    DoubleEllipse,
    Bar,
    Ring,
    Wedge,
    SpeckleOnly,
}

pub const FAMILIES: [Family; 6] = [
    Family::Ellipse,
    Family::DoubleEllipse,
    Family::Bar,
    Family::Ring,
    Family::Wedge,
    Family::SpeckleOnly,
];

/// Inclusive pixel bounds `x0, y0, x1, y1` of a rendered shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..=self.x1).contains(&x) && (self.y0..=self.y1).contains(&y)
    }
}

/// Rotated point relative to `(cx, cy)`.
fn local(x: f64, y: f64, cx: f64, cy: f64, theta: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    let (dx, dy) = (x - cx, y - cy);
    (dx * c + dy * s, -dx * s + dy * c)
}

fn in_ellipse(x: f64, y: f64, cx: f64, cy: f64, a: f64, b: f64, theta: f64) -> bool {
    let (u, v) = local(x, y, cx, cy, theta);
    (u / a).powi(2) + (v / b).powi(2) <= 1.0
}

/// Membership test of one sampled shape; `None` for speckle only.
fn sample_shape(family: Family, r: &mut Rng, res: f64) -> Option<Box<dyn Fn(f64, f64) -> bool>> {
    let mut u = |lo: f64, hi: f64| r.random_range(lo..hi);
    let theta = u(0.0, std::f64::consts::PI);
    match family {
        Family::Ellipse => {
            let (cx, cy) = (u(0.42, 0.58) * res, u(0.42, 0.58) * res);
            let a = u(0.16, 0.24) * res;
            let b = a * u(0.55, 0.8);
            Some(Box::new(move |x, y| in_ellipse(x, y, cx, cy, a, b, theta)))
        }
        Family::DoubleEllipse => {
            let (cx, cy) = (u(0.44, 0.56) * res, u(0.44, 0.56) * res);
            let a = u(0.09, 0.13) * res;
            let b = a * u(0.7, 0.95);
            let d = a * u(1.25, 1.5);
            let (s, c) = theta.sin_cos();
            let (x1, y1, x2, y2) = (cx + d * c, cy + d * s, cx - d * c, cy - d * s);
            Some(Box::new(move |x, y| {
                in_ellipse(x, y, x1, y1, a, b, theta) || in_ellipse(x, y, x2, y2, a, b, theta)
            }))
        }
        Family::Bar => {
            let (cx, cy) = (u(0.44, 0.56) * res, u(0.44, 0.56) * res);
            let half_len = u(0.22, 0.3) * res;
            let half_w = u(0.035, 0.055) * res;
            Some(Box::new(move |x, y| {
                let (p, q) = local(x, y, cx, cy, theta);
                p.abs() <= half_len && q.abs() <= half_w
            }))
        }
        Family::Ring => {
            let (cx, cy) = (u(0.42, 0.58) * res, u(0.42, 0.58) * res);
            let outer = u(0.16, 0.24) * res;
            let inner = outer - u(0.05, 0.075) * res;
            Some(Box::new(move |x, y| {
                let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                d <= outer && d >= inner
            }))
        }
        Family::Wedge => {
            let (cx, cy) = (u(0.42, 0.58) * res, u(0.42, 0.58) * res);
            let radius = u(0.4, 0.48) * res;
            let half_span = u(24.0, 34.0).to_radians();
            let dir = u(0.0, 2.0 * std::f64::consts::PI);
            // Pull the apex back so the sector stays mostly in frame.
            let (ax, ay) = (cx - 0.5 * radius * dir.cos(), cy - 0.5 * radius * dir.sin());
            Some(Box::new(move |x, y| {
                let (dx, dy) = (x - ax, y - ay);
                let d = (dx * dx + dy * dy).sqrt();
                let mut ang = dy.atan2(dx) - dir;
                ang = (ang + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI;
                d <= radius && ang.abs() <= half_span
            }))
        }
        Family::SpeckleOnly => None,
    }
}

/// Renders one `[res, res]` image in `[0, 1]` and the bounding box of its
/// shape.
pub fn render(family: Family, res: usize, r: &mut Rng) -> (Tensor<f64>, Option<BBox>) {
    let shape = sample_shape(family, r, res as f64);
    let background = r.random_range(0.18..0.28);
    let foreground = r.random_range(0.55..0.75);
    let mut mask = vec![false; res * res];
    let mut bbox: Option<BBox> = None;
    if let Some(f) = &shape {
        for y in 0..res {
            for x in 0..res {
                if f(x as f64 + 0.5, y as f64 + 0.5) {
                    mask[y * res + x] = true;
                    let b = bbox.get_or_insert(BBox { x0: x, y0: y, x1: x, y1: y });
                    b.x0 = b.x0.min(x);
                    b.y0 = b.y0.min(y);
                    b.x1 = b.x1.max(x);
                    b.y1 = b.y1.max(y);
                }
            }
        }
    }
    // Rayleigh speckle with unit mean from two Gaussian quadratures, then a
    // 3x3 box blur for grain larger than a pixel.
    let sigma = (2.0 / std::f64::consts::PI).sqrt();
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let raw: Vec<f64> = (0..res * res)
        .map(|_| {
            let (a, b): (f64, f64) = (normal.sample(r), normal.sample(r));
            (a * a + b * b).sqrt()
        })
        .collect();
    let mut img = vec![0.0; res * res];
    for y in 0..res {
        for x in 0..res {
            let (mut acc, mut n) = (0.0, 0.0);
            for yy in y.saturating_sub(1)..=(y + 1).min(res - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(res - 1) {
                    acc += raw[yy * res + xx];
                    n += 1.0;
                }
            }
            let speckle = 0.5 * raw[y * res + x] + 0.5 * acc / n;
            let base = if mask[y * res + x] { foreground } else { background };
            img[y * res + x] = (base * speckle).clamp(0.0, 1.0);
        }
    }
    (Tensor::new(&[res, res], img).expect("shape"), bbox)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOutput {
    pub records: Vec<Record>,
    pub boxes: Vec<Option<BBox>>,
}

/// Writes `per_class` PGM images per class under `out_dir/images`, plus
/// `manifest.csv` and `boxes.csv`. Class `c` uses family `c`.
pub fn synth_dataset(out_dir: &Path, labels: &[String], per_class: usize, resolution: usize, seed: u64) -> Result<SynthOutput> {
    if labels.is_empty() || labels.len() > FAMILIES.len() {
        return Err(Error::invalid(format!("synth supports 1..={} classes, got {}", FAMILIES.len(), labels.len())));
    }
    if resolution < 8 {
        return Err(Error::invalid("synth resolution must be at least 8"));
    }
    fs::create_dir_all(out_dir.join("images"))?;
    let mut records = Vec::new();
    let mut boxes = Vec::new();
    let mut box_csv = String::from("image_path,x0,y0,x1,y1\n");
    for (c, label) in labels.iter().enumerate() {
        for i in 0..per_class {
            let mut r = rng::stream2(seed, "synth", c as u64, i as u64);
            let (img, bbox) = render(FAMILIES[c], resolution, &mut r);
            let rel = format!("images/{label}_{i:04}.pgm");
            io::save_gray(&out_dir.join(&rel), &img)?;
            if let Some(b) = bbox {
                box_csv.push_str(&format!("{rel},{},{},{},{}\n", b.x0, b.y0, b.x1, b.y1));
            }
            records.push(Record {
                image_path: rel,
                label: label.clone(),
                patient_id: format!("P{:03}", i % 50),
            });
            boxes.push(bbox);
        }
    }
    io::write_manifest(&out_dir.join("manifest.csv"), &records)?;
    io::write_atomic(&out_dir.join("boxes.csv"), box_csv.as_bytes())?;
    Ok(SynthOutput { records, boxes })
}

/// Reads `boxes.csv` as `(image_path, box)` pairs.
pub fn load_boxes(path: &Path) -> Result<Vec<(String, BBox)>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    rdr.records()
        .map(|row| {
            let row = row.map_err(|e| Error::Data(e.to_string()))?;
            let n = |i: usize| -> Result<usize> {
                row.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Data(format!("{}: malformed box row", path.display())))
            };
            Ok((row.get(0).unwrap_or_default().to_string(), BBox { x0: n(1)?, y0: n(2)?, x1: n(3)?, y1: n(4)? }))
        })
        .collect()
}
