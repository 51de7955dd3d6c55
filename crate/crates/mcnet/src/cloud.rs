//! Point-cloud data model, ASCII PLY ingestion, and a parameterized
//! synthetic-scene generator with controllable class imbalance.
//!
//! Colors are normalized to [0,1] internally; the 0-255 byte range exists
//! only at the file boundary.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// N points with positions (meters), colors in [0,1] and optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<[f64; 3]>,
    colors: Vec<[f64; 3]>,
    labels: Option<Vec<usize>>,
    num_classes: usize,
}

impl PointCloud {
    pub fn new(
        positions: Vec<[f64; 3]>,
        colors: Vec<[f64; 3]>,
        labels: Option<Vec<usize>>,
        num_classes: usize,
    ) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Contract("point cloud must contain at least one point".into()));
        }
        if colors.len() != positions.len() {
            return Err(Error::Dimension(format!(
                "{} colors for {} positions",
                colors.len(),
                positions.len()
            )));
        }
        for c in &colors {
            if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Contract(format!("color {c:?} outside [0,1]")));
            }
        }
        if let Some(l) = &labels {
            if l.len() != positions.len() {
                return Err(Error::Dimension(format!(
                    "{} labels for {} positions",
                    l.len(),
                    positions.len()
                )));
            }
            if let Some(&bad) = l.iter().find(|&&v| v >= num_classes) {
                return Err(Error::Contract(format!(
                    "label {bad} out of range for {num_classes} classes"
                )));
            }
        }
        Ok(PointCloud { positions, colors, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn colors(&self) -> &[[f64; 3]] {
        &self.colors
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Axis-aligned bounding box (lo, hi).
    pub fn bounding_box(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = self.positions[0];
        let mut hi = self.positions[0];
        for p in &self.positions {
            for d in 0..3 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        (lo, hi)
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let (lo, hi) = self.bounding_box();
        ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2) + (hi[2] - lo[2]).powi(2)).sqrt()
    }
}

/// Fraction of points per class. Sums to one.
pub fn class_frequencies(cloud: &PointCloud) -> Result<Vec<f64>> {
    let labels = cloud
        .labels()
        .ok_or_else(|| Error::Contract("class_frequencies: cloud has no labels".into()))?;
    let mut counts = vec![0usize; cloud.num_classes()];
    for &l in labels {
        counts[l] += 1;
    }
    let n = labels.len() as f64;
    Ok(counts.iter().map(|&c| c as f64 / n).collect())
}

// ── PLY ─────────────────────────────────────────────────────────────

/// Write an ASCII PLY with positions, byte colors and any labels or
/// predictions carried along. Position text round-trips f64 exactly.
pub fn save_ply(cloud: &PointCloud, path: &Path, predicted: Option<&[usize]>) -> Result<()> {
    if let Some(p) = predicted {
        if p.len() != cloud.len() {
            return Err(Error::Dimension(format!(
                "{} predictions for {} points",
                p.len(),
                cloud.len()
            )));
        }
    }
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {}\n", cloud.len()));
    out.push_str("property double x\nproperty double y\nproperty double z\n");
    out.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    if cloud.labels().is_some() {
        out.push_str("property int label\n");
    }
    if predicted.is_some() {
        out.push_str("property int pred\n");
    }
    out.push_str("end_header\n");
    for i in 0..cloud.len() {
        let p = cloud.positions[i];
        let c = cloud.colors[i];
        out.push_str(&format!("{} {} {}", p[0], p[1], p[2]));
        for ch in c {
            let byte = (ch * 255.0).round().clamp(0.0, 255.0) as u8;
            out.push_str(&format!(" {byte}"));
        }
        if let Some(l) = cloud.labels() {
            out.push_str(&format!(" {}", l[i]));
        }
        if let Some(p) = predicted {
            out.push_str(&format!(" {}", p[i]));
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Read an ASCII PLY with x,y,z, red,green,blue and an optional label
/// property. Point order is preserved.
pub fn load_ply(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();

    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, message: "empty file".into() })?;
    if first.trim() != "ply" {
        return Err(Error::Parse { line: 1, message: "missing `ply` magic".into() });
    }

    let mut vertex_count: Option<usize> = None;
    let mut properties: Vec<String> = Vec::new();
    let mut saw_format = false;
    let mut header_end = 0usize;
    for (idx, line) in lines.by_ref() {
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed == "end_header" {
            header_end = lineno;
            break;
        }
        let mut tok = trimmed.split_whitespace();
        match tok.next() {
            Some("format") => {
                let rest: Vec<&str> = tok.collect();
                if rest != ["ascii", "1.0"] {
                    return Err(Error::Parse {
                        line: lineno,
                        message: format!("unsupported format `{}` (only ascii 1.0)", rest.join(" ")),
                    });
                }
                saw_format = true;
            }
            Some("comment") | Some("obj_info") => {}
            Some("element") => {
                if vertex_count.is_some() {
                    return Err(Error::Parse {
                        line: lineno,
                        message: "multiple elements are not supported".into(),
                    });
                }
                let _name = tok.next().ok_or(Error::Parse {
                    line: lineno,
                    message: "element without a name".into(),
                })?;
                let count: usize = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or(Error::Parse { line: lineno, message: "element without a count".into() })?;
                vertex_count = Some(count);
            }
            Some("property") => {
                let ty = tok.next().ok_or(Error::Parse {
                    line: lineno,
                    message: "property without a type".into(),
                })?;
                if ty == "list" {
                    return Err(Error::Parse {
                        line: lineno,
                        message: "list properties are not supported".into(),
                    });
                }
                let name = tok.next().ok_or(Error::Parse {
                    line: lineno,
                    message: "property without a name".into(),
                })?;
                properties.push(name.to_string());
            }
            Some(other) => {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("unexpected header keyword `{other}`"),
                })
            }
            None => {}
        }
    }
    if header_end == 0 {
        return Err(Error::Parse { line: text.lines().count(), message: "missing end_header".into() });
    }
    if !saw_format {
        return Err(Error::Parse { line: header_end, message: "missing format line".into() });
    }
    let count = vertex_count
        .ok_or(Error::Parse { line: header_end, message: "missing element declaration".into() })?;

    let col_of = |name: &str| -> Result<usize> {
        properties
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| Error::Format(format!("missing required property `{name}`")))
    };
    let (xi, yi, zi) = (col_of("x")?, col_of("y")?, col_of("z")?);
    let (ri, gi, bi) = (col_of("red")?, col_of("green")?, col_of("blue")?);
    let li = properties.iter().position(|p| p == "label");

    let mut positions = Vec::with_capacity(count);
    let mut colors = Vec::with_capacity(count);
    let mut labels: Vec<usize> = Vec::new();
    let mut rows = 0usize;
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        if rows == count {
            return Err(Error::Parse {
                line: lineno,
                message: format!("more data rows than the declared {count}"),
            });
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != properties.len() {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected {} values, found {}", properties.len(), fields.len()),
            });
        }
        let num = |col: usize| -> Result<f64> {
            fields[col].parse::<f64>().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("`{}` is not a number", fields[col]),
            })
        };
        positions.push([num(xi)?, num(yi)?, num(zi)?]);
        colors.push([num(ri)? / 255.0, num(gi)? / 255.0, num(bi)? / 255.0]);
        if let Some(lc) = li {
            let v = num(lc)?;
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("label `{}` is not a nonnegative integer", fields[lc]),
                });
            }
            labels.push(v as usize);
        }
        rows += 1;
    }
    if rows != count {
        return Err(Error::Format(format!("expected {count} data rows, found {rows}")));
    }
    let labels = if li.is_some() { Some(labels) } else { None };
    let num_classes = labels
        .as_ref()
        .map(|l| l.iter().max().map_or(0, |m| m + 1))
        .unwrap_or(0);
    PointCloud::new(positions, colors, labels, num_classes)
}

// ── synthetic scenes ────────────────────────────────────────────────

/// Geometry primitive a class is sampled from.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClassGeometry {
    /// Uniform samples on an axis-aligned rectangle at `center`, extents in x/y.
    Plane { center: [f64; 3], extent: [f64; 2] },
    /// Uniform samples inside an axis-aligned box.
    Box { center: [f64; 3], size: [f64; 3] },
    /// Uniform samples on the lateral surface of a vertical cylinder.
    Cylinder { center: [f64; 3], radius: f64, height: f64 },
    /// Isotropic Gaussian blob with the given standard deviation.
    Scatter { center: [f64; 3], radius: f64 },
}

/// One semantic class of a synthetic scene.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassSpec {
    pub name: String,
    pub point_count: usize,
    pub geometry: ClassGeometry,
    pub color_mean: [f64; 3],
    #[serde(default)]
    pub color_jitter: f64,
    #[serde(default)]
    pub noise_sigma: f64,
}

/// Full scene recipe; a pure function of itself plus the seed.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SceneSpec {
    pub classes: Vec<ClassSpec>,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Contract(format!(
                "scene spec needs at least 2 classes, got {}",
                self.classes.len()
            )));
        }
        for c in &self.classes {
            if c.point_count < 1 {
                return Err(Error::Contract(format!("class `{}` has no points", c.name)));
            }
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }
}

fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller on two uniforms; keeps the byte stream fully in our hands.
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Deterministically generate a labeled cloud from a scene spec.
pub fn synth_scene(spec: &SceneSpec) -> Result<PointCloud> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total: usize = spec.classes.iter().map(|c| c.point_count).sum();
    let mut positions = Vec::with_capacity(total);
    let mut colors = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for (class_id, class) in spec.classes.iter().enumerate() {
        for _ in 0..class.point_count {
            let mut p = match &class.geometry {
                ClassGeometry::Plane { center, extent } => [
                    center[0] + rng.random_range(-extent[0]..=extent[0]),
                    center[1] + rng.random_range(-extent[1]..=extent[1]),
                    center[2],
                ],
                ClassGeometry::Box { center, size } => [
                    center[0] + rng.random_range(-size[0]..=size[0]) / 2.0,
                    center[1] + rng.random_range(-size[1]..=size[1]) / 2.0,
                    center[2] + rng.random_range(-size[2]..=size[2]) / 2.0,
                ],
                ClassGeometry::Cylinder { center, radius, height } => {
                    let theta = rng.random_range(0.0..std::f64::consts::TAU);
                    [
                        center[0] + radius * theta.cos(),
                        center[1] + radius * theta.sin(),
                        center[2] + rng.random_range(-*height..=*height) / 2.0,
                    ]
                }
                ClassGeometry::Scatter { center, radius } => [
                    center[0] + radius * sample_normal(&mut rng),
                    center[1] + radius * sample_normal(&mut rng),
                    center[2] + radius * sample_normal(&mut rng),
                ],
            };
            if class.noise_sigma > 0.0 {
                for d in &mut p {
                    *d += class.noise_sigma * sample_normal(&mut rng);
                }
            }
            let mut c = [0.0; 3];
            for d in 0..3 {
                let jitter = if class.color_jitter > 0.0 {
                    rng.random_range(-class.color_jitter..=class.color_jitter)
                } else {
                    0.0
                };
                c[d] = (class.color_mean[d] + jitter).clamp(0.0, 1.0);
            }
            positions.push(p);
            colors.push(c);
            labels.push(class_id);
        }
    }
    PointCloud::new(positions, colors, Some(labels), spec.classes.len())
}
