//! Procedural shapes with analytic part labels.
//!
//! Each generator samples surface points of a few primitives and labels every
//! point with the primitive it came from. Proportions are randomized per
//! seed. The up axis is `z`.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{CategorySchema, DataError, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SyntheticKind {
    Barbell,
    Table,
    Lamp,
    Mug,
}

impl SyntheticKind {
    pub const ALL: [Self; 4] = [Self::Barbell, Self::Table, Self::Lamp, Self::Mug];

    pub fn name(self) -> &'static str {
        match self {
            Self::Barbell => "barbell",
            Self::Table => "table",
            Self::Lamp => "lamp",
            Self::Mug => "mug",
        }
    }

    /// Part ids are disjoint across kinds, like a global part vocabulary.
    pub fn schema(self) -> CategorySchema {
        let (parts, names): (Vec<usize>, Vec<&str>) = match self {
            Self::Barbell => (vec![0, 1, 2], vec!["left weight", "right weight", "bar"]),
            Self::Table => (vec![3, 4], vec!["top", "legs"]),
            Self::Lamp => (vec![5, 6, 7], vec!["base", "pole", "shade"]),
            Self::Mug => (vec![8, 9], vec!["body", "handle"]),
        };
        CategorySchema::new(
            self.name(),
            parts,
            names.into_iter().map(String::from).collect(),
        )
        .expect("static schemas are valid")
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SyntheticKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| DataError::UnknownCategory(s.to_string()))
    }
}

type Sampler = Box<dyn Fn(&mut ChaCha8Rng) -> [f64; 3]>;

/// One labelled primitive of a shape.
struct Part {
    label: usize,
    area: f64,
    sampler: Sampler,
}

/// Generates `n_points` surface points of a randomized `kind` shape.
pub fn generate_synthetic(kind: SyntheticKind, n_points: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((kind as u64 + 1) << 56));
    let parts = match kind {
        SyntheticKind::Barbell => barbell(&mut rng),
        SyntheticKind::Table => table(&mut rng),
        SyntheticKind::Lamp => lamp(&mut rng),
        SyntheticKind::Mug => mug(&mut rng),
    };
    let counts = allocate(n_points.max(1), &parts);
    let mut points = Vec::with_capacity(n_points);
    let mut labels = Vec::with_capacity(n_points);
    for (part, &count) in parts.iter().zip(&counts) {
        for _ in 0..count {
            points.push((part.sampler)(&mut rng));
            labels.push(part.label);
        }
    }
    PointCloud::new(points, labels, kind.name()).expect("at least one point")
}

/// Splits `n` points across parts proportionally to area, with every part
/// getting at least a tenth of its fair share and at least one point when
/// `n` allows.
fn allocate(n: usize, parts: &[Part]) -> Vec<usize> {
    let k = parts.len();
    let total: f64 = parts.iter().map(|p| p.area).sum();
    let floor = 0.1 / k as f64;
    let weights: Vec<f64> = parts.iter().map(|p| (p.area / total).max(floor)).collect();
    let wsum: f64 = weights.iter().sum();
    let mut counts: Vec<usize> = weights
        .iter()
        .map(|w| ((w / wsum) * n as f64).floor() as usize)
        .collect();
    if n >= k {
        for c in &mut counts {
            if *c == 0 {
                *c = 1;
            }
        }
    }
    let assigned: usize = counts.iter().sum();
    let largest = (0..k)
        .max_by(|&a, &b| weights[a].total_cmp(&weights[b]))
        .unwrap_or(0);
    if assigned < n {
        counts[largest] += n - assigned;
    } else {
        let mut excess = assigned - n;
        while excess > 0 {
            let i = (0..k).max_by_key(|&i| counts[i]).unwrap_or(0);
            counts[i] -= 1;
            excess -= 1;
        }
    }
    counts
}

fn unit_sphere(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return v.map(|x| x / n);
        }
    }
}

fn on_sphere(center: [f64; 3], r: f64) -> Part {
    Part {
        label: 0,
        area: 4.0 * PI * r * r,
        sampler: Box::new(move |rng| {
            let u = unit_sphere(rng);
            [
                center[0] + r * u[0],
                center[1] + r * u[1],
                center[2] + r * u[2],
            ]
        }),
    }
}

/// Side of a cylinder whose axis is `x` (axis = 0) or `z` (axis = 2).
fn on_cylinder(axis: usize, center: [f64; 3], r: f64, lo: f64, hi: f64) -> Part {
    Part {
        label: 0,
        area: TAU * r * (hi - lo),
        sampler: Box::new(move |rng| {
            let t = rng.random_range(0.0..TAU);
            let s = rng.random_range(lo..hi);
            let (a, b) = (r * t.cos(), r * t.sin());
            match axis {
                0 => [s, center[1] + a, center[2] + b],
                _ => [center[0] + a, center[1] + b, s],
            }
        }),
    }
}

fn on_box(min: [f64; 3], max: [f64; 3]) -> Part {
    let d = [max[0] - min[0], max[1] - min[1], max[2] - min[2]];
    let faces = [d[1] * d[2], d[0] * d[2], d[0] * d[1]];
    let area = 2.0 * faces.iter().sum::<f64>();
    Part {
        label: 0,
        area,
        sampler: Box::new(move |rng| {
            let pick = rng.random_range(0.0..faces.iter().sum::<f64>());
            let axis = if pick < faces[0] {
                0
            } else if pick < faces[0] + faces[1] {
                1
            } else {
                2
            };
            let mut p = [0.0; 3];
            for k in 0..3 {
                p[k] = rng.random_range(min[k]..max[k]);
            }
            p[axis] = if rng.random_bool(0.5) {
                min[axis]
            } else {
                max[axis]
            };
            p
        }),
    }
}

fn on_disk(center: [f64; 3], r: f64) -> Part {
    Part {
        label: 0,
        area: PI * r * r,
        sampler: Box::new(move |rng| {
            let rr = r * rng.random_range(0.0f64..1.0).sqrt();
            let t = rng.random_range(0.0..TAU);
            [
                center[0] + rr * t.cos(),
                center[1] + rr * t.sin(),
                center[2],
            ]
        }),
    }
}

/// Side of a vertical truncated cone from (`z0`, `r0`) to (`z1`, `r1`).
fn on_frustum(z0: f64, z1: f64, r0: f64, r1: f64) -> Part {
    let slant = ((z1 - z0).powi(2) + (r1 - r0).powi(2)).sqrt();
    Part {
        label: 0,
        area: PI * (r0 + r1) * slant,
        sampler: Box::new(move |rng| {
            // density along the height proportional to the local radius
            let u: f64 = rng.random_range(0.0..1.0);
            let s = if (r1 - r0).abs() < 1e-12 {
                u
            } else {
                let a = r0 * r0 + u * (r1 * r1 - r0 * r0);
                (a.sqrt() - r0) / (r1 - r0)
            };
            let r = r0 + s * (r1 - r0);
            let t = rng.random_range(0.0..TAU);
            [r * t.cos(), r * t.sin(), z0 + s * (z1 - z0)]
        }),
    }
}

/// Half torus in the `xz` plane bulging towards `+x`.
fn on_handle(center: [f64; 3], major: f64, minor: f64) -> Part {
    Part {
        label: 0,
        area: 2.0 * PI * PI * major * minor,
        sampler: Box::new(move |rng| {
            let phi = rng.random_range(-FRAC_PI_2..FRAC_PI_2);
            let theta = rng.random_range(0.0..TAU);
            let ring = major + minor * theta.cos();
            [
                center[0] + ring * phi.cos(),
                center[1] + minor * theta.sin(),
                center[2] + ring * phi.sin(),
            ]
        }),
    }
}

fn labelled(mut part: Part, label: usize) -> Part {
    part.label = label;
    part
}

fn merge(label: usize, parts: Vec<Part>) -> Part {
    let area: f64 = parts.iter().map(|p| p.area).sum();
    let cumulative: Vec<f64> = parts
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p.area / area;
            Some(*acc)
        })
        .collect();
    Part {
        label,
        area,
        sampler: Box::new(move |rng| {
            let u: f64 = rng.random_range(0.0..1.0);
            let i = cumulative
                .iter()
                .position(|&c| u < c)
                .unwrap_or(parts.len() - 1);
            (parts[i].sampler)(rng)
        }),
    }
}

fn barbell(rng: &mut ChaCha8Rng) -> Vec<Part> {
    let half = rng.random_range(0.8..1.2);
    let radius = rng.random_range(0.25..0.4);
    let bar = rng.random_range(0.05..0.09);
    let inner = half - radius * 0.9;
    vec![
        labelled(on_sphere([-half, 0.0, 0.0], radius), 0),
        labelled(on_sphere([half, 0.0, 0.0], radius), 1),
        labelled(on_cylinder(0, [0.0; 3], bar, -inner, inner), 2),
    ]
}

fn table(rng: &mut ChaCha8Rng) -> Vec<Part> {
    let width = rng.random_range(0.8..1.2);
    let depth = rng.random_range(0.5..0.9);
    let thick = rng.random_range(0.04..0.08);
    let height = rng.random_range(0.6..1.0);
    let leg = rng.random_range(0.03..0.06);
    let inset = rng.random_range(0.05..0.12);
    let top = on_box(
        [-width / 2.0, -depth / 2.0, height - thick],
        [width / 2.0, depth / 2.0, height],
    );
    let mut legs = Vec::new();
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            let c = [sx * (width / 2.0 - inset), sy * (depth / 2.0 - inset), 0.0];
            legs.push(on_cylinder(2, c, leg, 0.0, height - thick));
        }
    }
    vec![labelled(top, 3), merge(4, legs)]
}

fn lamp(rng: &mut ChaCha8Rng) -> Vec<Part> {
    let base_r = rng.random_range(0.25..0.4);
    let base_h = rng.random_range(0.05..0.1);
    let pole_r = rng.random_range(0.02..0.04);
    let height = rng.random_range(0.8..1.2);
    let shade_h = rng.random_range(0.25..0.4);
    let shade_r = rng.random_range(0.3..0.45);
    let base = merge(
        5,
        vec![
            on_cylinder(2, [0.0; 3], base_r, 0.0, base_h),
            on_disk([0.0, 0.0, base_h], base_r),
        ],
    );
    let pole = on_cylinder(2, [0.0; 3], pole_r, base_h, height - shade_h * 0.5);
    let shade = on_frustum(height - shade_h, height, shade_r, shade_r * 0.55);
    vec![base, labelled(pole, 6), labelled(shade, 7)]
}

fn mug(rng: &mut ChaCha8Rng) -> Vec<Part> {
    let r = rng.random_range(0.3..0.45);
    let h = rng.random_range(0.6..1.0);
    let major = rng.random_range(0.15f64..0.25).min(h * 0.4);
    let minor = rng.random_range(0.03..0.05);
    let body = merge(
        8,
        vec![on_cylinder(2, [0.0; 3], r, 0.0, h), on_disk([0.0; 3], r)],
    );
    let handle = on_handle([r, 0.0, h / 2.0], major, minor);
    vec![body, labelled(handle, 9)]
}
