//! Analytic scenes built from piecewise-constant density primitives.
//!
//! Along any ray the density is piecewise constant, so transmittance,
//! termination mass and expected depth have closed forms per segment. Color
//! varies with position and is integrated by sub-stepping each segment with
//! exact per-step weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Aabb, ColorModel, RadianceField};
use crate::geometry::{generate_ray, project, CameraIntrinsics, Pixel, Pose, Ray, Vec3};

/// Termination mass below which a run of density is not a surface.
pub const MIN_MODE_MASS: f64 = 0.05;

/// Two rays see the same surface when their mode points are this close.
pub const MODE_MATCH_TOLERANCE: f64 = 0.08;

const COLOR_SUBSTEPS: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Box {
        min: [f64; 3],
        max: [f64; 3],
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    /// Finite cylinder aligned with a coordinate axis.
    Rod {
        center: [f64; 3],
        axis: Axis,
        radius: f64,
        half_length: f64,
    },
}

impl Shape {
    pub fn contains(&self, p: &Vec3) -> bool {
        match self {
            Shape::Box { min, max } => (0..3).all(|a| p[a] >= min[a] && p[a] <= max[a]),
            Shape::Sphere { center, radius } => (p - Vec3::from(*center)).norm() <= *radius,
            Shape::Rod {
                center,
                axis,
                radius,
                half_length,
            } => {
                let d = p - Vec3::from(*center);
                let a = axis.index();
                let radial: f64 = (0..3).filter(|&i| i != a).map(|i| d[i] * d[i]).sum();
                d[a].abs() <= *half_length && radial <= radius * radius
            }
        }
    }

    /// Euclidean distance from `p` to the shape; zero inside.
    pub fn distance(&self, p: &Vec3) -> f64 {
        match self {
            Shape::Box { min, max } => (0..3)
                .map(|a| (min[a] - p[a]).max(p[a] - max[a]).max(0.0).powi(2))
                .sum::<f64>()
                .sqrt(),
            Shape::Sphere { center, radius } => ((p - Vec3::from(*center)).norm() - radius).max(0.0),
            Shape::Rod {
                center,
                axis,
                radius,
                half_length,
            } => {
                let d = p - Vec3::from(*center);
                let a = axis.index();
                let radial = (0..3).filter(|&i| i != a).map(|i| d[i] * d[i]).sum::<f64>().sqrt();
                let r = (radial - radius).max(0.0);
                let h = (d[a].abs() - half_length).max(0.0);
                r.hypot(h)
            }
        }
    }

    /// Entry and exit distances of the infinite line `o + t d`.
    pub fn interval(&self, o: &Vec3, d: &Vec3) -> Option<(f64, f64)> {
        match self {
            Shape::Box { min, max } => slab_interval(o, d, min, max, &[0, 1, 2]),
            Shape::Sphere { center, radius } => {
                let oc = o - Vec3::from(*center);
                let b = oc.dot(d);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc <= 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                Some((-b - s, -b + s))
            }
            Shape::Rod {
                center,
                axis,
                radius,
                half_length,
            } => {
                let a = axis.index();
                let c = Vec3::from(*center);
                let mut min = [f64::NEG_INFINITY; 3];
                let mut max = [f64::INFINITY; 3];
                min[a] = c[a] - half_length;
                max[a] = c[a] + half_length;
                let (s0, s1) = slab_interval(o, d, &min, &max, &[a])?;
                let (i, j) = match a {
                    0 => (1, 2),
                    1 => (0, 2),
                    _ => (0, 1),
                };
                let (ox, oy) = (o[i] - c[i], o[j] - c[j]);
                let (dx, dy) = (d[i], d[j]);
                let qa = dx * dx + dy * dy;
                let qb = ox * dx + oy * dy;
                let qc = ox * ox + oy * oy - radius * radius;
                let (c0, c1) = if qa < 1e-300 {
                    if qc > 0.0 {
                        return None;
                    }
                    (f64::NEG_INFINITY, f64::INFINITY)
                } else {
                    let disc = qb * qb - qa * qc;
                    if disc <= 0.0 {
                        return None;
                    }
                    let s = disc.sqrt();
                    ((-qb - s) / qa, (-qb + s) / qa)
                };
                let (t0, t1) = (s0.max(c0), s1.min(c1));
                (t0 < t1).then_some((t0, t1))
            }
        }
    }
}

fn slab_interval(
    o: &Vec3,
    d: &Vec3,
    min: &[f64; 3],
    max: &[f64; 3],
    axes: &[usize],
) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for &a in axes {
        if d[a].abs() < 1e-300 {
            if o[a] < min[a] || o[a] > max[a] {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((min[a] - o[a]) / d[a], (max[a] - o[a]) / d[a]);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t0 < t1).then_some((t0, t1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    Constant { rgb: [f64; 3] },
    /// `rgb[c] = base[c] + ⟨gradient[c], x⟩`, clamped to `[0.02, 0.98]`.
    Linear {
        base: [f64; 3],
        gradient: [[f64; 3]; 3],
    },
    /// Linear ramp plus a sinusoidal pattern on one channel.
    Wave {
        base: [f64; 3],
        gradient: [[f64; 3]; 3],
        amplitude: f64,
        frequency: [f64; 3],
    },
}

impl Texture {
    pub fn eval(&self, p: &Vec3) -> [f64; 3] {
        let linear = |base: &[f64; 3], g: &[[f64; 3]; 3]| {
            [0, 1, 2].map(|c| base[c] + Vec3::from(g[c]).dot(p))
        };
        let rgb = match self {
            Texture::Constant { rgb } => *rgb,
            Texture::Linear { base, gradient } => linear(base, gradient),
            Texture::Wave {
                base,
                gradient,
                amplitude,
                frequency,
            } => {
                let mut c = linear(base, gradient);
                c[2] += amplitude * Vec3::from(*frequency).dot(p).sin();
                c
            }
        };
        rgb.map(|c| c.clamp(0.02, 0.98))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub density: f64,
    pub texture: Texture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub bbox: Aabb,
    pub primitives: Vec<Primitive>,
}

/// Constant-density piece of a ray.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub t0: f64,
    pub t1: f64,
    pub sigma: f64,
}

/// Contiguous run of nonzero density along a ray, with its share of the
/// ray's termination probability.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceMode {
    pub t_entry: f64,
    pub t_exit: f64,
    /// Expected termination distance conditioned on stopping in this run.
    pub t_mean: f64,
    pub mass: f64,
    /// Transmittance on arrival at the run.
    pub transmittance: f64,
}

/// Analytic rendering of one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RayTruth {
    pub color: [f64; 3],
    /// Σ-weighted expected termination distance (0 when nothing is hit).
    pub distance: f64,
    pub mass: f64,
    pub modes: Vec<SurfaceMode>,
}

impl SyntheticScene {
    pub fn validate(&self) -> Result<()> {
        self.bbox.validate()?;
        for (i, p) in self.primitives.iter().enumerate() {
            if !(p.density >= 0.0) || !p.density.is_finite() {
                return Err(Error::Domain(format!("primitive {i} has invalid density")));
            }
        }
        Ok(())
    }

    pub fn density(&self, p: &Vec3) -> f64 {
        self.primitives
            .iter()
            .filter(|q| q.shape.contains(p))
            .map(|q| q.density)
            .sum()
    }

    /// Density-weighted mix of the textures of primitives containing `p`.
    pub fn color(&self, p: &Vec3) -> [f64; 3] {
        let mut acc = [0.0; 3];
        let mut total = 0.0;
        for q in self.primitives.iter().filter(|q| q.shape.contains(p)) {
            let c = q.texture.eval(p);
            for ch in 0..3 {
                acc[ch] += q.density * c[ch];
            }
            total += q.density;
        }
        if total > 0.0 {
            acc.map(|c| c / total)
        } else {
            acc
        }
    }

    /// Piecewise-constant density along `ray` over `[t_near, t_far]`.
    pub fn segments(&self, ray: &Ray) -> Vec<Segment> {
        let (lo, hi) = (ray.t_near, ray.t_far);
        let mut cuts = vec![lo];
        let mut spans = Vec::new();
        for p in &self.primitives {
            if p.density <= 0.0 {
                continue;
            }
            if let Some((a, b)) = p.shape.interval(&ray.origin, &ray.direction) {
                let (a, b) = (a.max(lo), b.min(hi));
                if a < b {
                    cuts.push(a);
                    cuts.push(b);
                    spans.push((a, b, p.density));
                }
            }
        }
        if spans.is_empty() {
            return Vec::new();
        }
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        cuts.windows(2)
            .filter(|w| w[1] > w[0])
            .map(|w| {
                let mid = 0.5 * (w[0] + w[1]);
                let sigma = spans
                    .iter()
                    .filter(|(a, b, _)| mid > *a && mid < *b)
                    .map(|s| s.2)
                    .sum();
                Segment {
                    t0: w[0],
                    t1: w[1],
                    sigma,
                }
            })
            .filter(|s| s.sigma > 0.0)
            .collect()
    }

    /// Closed-form rendering of a ray; the ray's bounds limit the integral.
    pub fn trace(&self, ray: &Ray) -> RayTruth {
        let segments = self.segments(ray);
        let mut trans = 1.0;
        let mut color = [0.0; 3];
        let mut distance = 0.0;
        let mut modes: Vec<SurfaceMode> = Vec::new();
        let mut last_exit = f64::NEG_INFINITY;
        for seg in &segments {
            let len = seg.t1 - seg.t0;
            let x = seg.sigma * len;
            let absorbed = -(-x).exp_m1();
            let mass = trans * absorbed;
            // ∫ t σ e^{-σ(t - t0)} dt over the segment, scaled by arrival T.
            let first_moment = trans
                * (seg.t0 * absorbed + (absorbed - x * (-x).exp()) / seg.sigma);
            distance += first_moment;
            let h = len / COLOR_SUBSTEPS as f64;
            let mut t_sub = trans;
            for i in 0..COLOR_SUBSTEPS {
                let a = seg.t0 + i as f64 * h;
                let y = seg.sigma * h;
                let w = t_sub * -(-y).exp_m1();
                // Conditional mean position within the sub-step.
                let offset = if y > 1e-8 {
                    (1.0 / seg.sigma) - h * (-y).exp() / -(-y).exp_m1()
                } else {
                    0.5 * h
                };
                let c = self.color(&ray.at(a + offset));
                for ch in 0..3 {
                    color[ch] += w * c[ch];
                }
                t_sub *= (-y).exp();
            }
            match modes.last_mut() {
                Some(m) if (seg.t0 - last_exit).abs() <= 1e-12 => {
                    m.t_exit = seg.t1;
                    m.t_mean += first_moment;
                    m.mass += mass;
                }
                _ => modes.push(SurfaceMode {
                    t_entry: seg.t0,
                    t_exit: seg.t1,
                    t_mean: first_moment,
                    mass,
                    transmittance: trans,
                }),
            }
            last_exit = seg.t1;
            trans *= (-x).exp();
        }
        for m in &mut modes {
            m.t_mean = if m.mass > 0.0 { m.t_mean / m.mass } else { m.t_entry };
        }
        RayTruth {
            color,
            distance,
            mass: 1.0 - trans,
            modes,
        }
    }

    /// Renders the ray through `px`, restricted to the scene box.
    pub fn trace_pixel(&self, intr: &CameraIntrinsics, pose: &Pose, px: Pixel) -> Result<(Ray, RayTruth)> {
        let ray = generate_ray(intr, pose, px)?;
        match self.bbox.clip(&ray) {
            Some(clipped) => Ok((ray, self.trace(&clipped))),
            None => Ok((
                ray,
                RayTruth {
                    color: [0.0; 3],
                    distance: 0.0,
                    mass: 0.0,
                    modes: Vec::new(),
                },
            )),
        }
    }

    /// Color at `p`, or outside every primitive the texture of the nearest
    /// one, so that interpolation near surfaces does not blend in black.
    pub fn extended_color(&self, p: &Vec3) -> [f64; 3] {
        if self.primitives.iter().any(|q| q.density > 0.0 && q.shape.contains(p)) {
            return self.color(p);
        }
        self.primitives
            .iter()
            .filter(|q| q.density > 0.0)
            .min_by(|a, b| a.shape.distance(p).total_cmp(&b.shape.distance(p)))
            .map_or([0.0; 3], |q| q.texture.eval(p))
    }

    /// Voxelizes the scene by sampling density and extended color at voxel
    /// centers.
    pub fn bake(&self, resolution: [usize; 3], color_model: ColorModel) -> Result<RadianceField> {
        if resolution.iter().any(|&n| n == 0) {
            return Err(Error::Config("bake resolution must be positive".into()));
        }
        RadianceField::from_fn(resolution, self.bbox, color_model, |p| {
            (self.density(p), self.extended_color(p))
        })
    }
}

/// A surface seen from the source pixel and, if it is visible there, its
/// location in the target view.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthSurface {
    pub mode: SurfaceMode,
    /// Camera depth in the source view of the surface entry point.
    pub entry_depth: f64,
    /// Camera depth in the source view of the expected termination point.
    pub mean_depth: f64,
    pub point: Vec3,
    /// Projection into the target when the target ray through it terminates
    /// at the same place.
    pub target: Option<Pixel>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub surfaces: Vec<GroundTruthSurface>,
}

impl GroundTruth {
    /// First surface along the source ray.
    pub fn first(&self) -> &GroundTruthSurface {
        &self.surfaces[0]
    }

    /// Highest-mass surface that is also visible in the target.
    pub fn best_visible(&self) -> Option<&GroundTruthSurface> {
        self.surfaces
            .iter()
            .filter(|s| s.target.is_some())
            .max_by(|a, b| a.mode.mass.total_cmp(&b.mode.mass))
    }

    /// Distance from `u_t` to the nearest true correspondence; infinite when
    /// no surface is visible in both views.
    pub fn error(&self, u_t: Pixel) -> f64 {
        self.surfaces
            .iter()
            .filter_map(|s| s.target)
            .map(|t| t.distance(&u_t))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Exact correspondence oracle for a source pixel.
///
/// Every run of density along the source ray with mass at least
/// [`MIN_MODE_MASS`] is a candidate surface. It corresponds to a target pixel
/// when the target ray through its projection has a mode within
/// [`MODE_MATCH_TOLERANCE`] of the same point.
pub fn analytic_ground_truth(
    scene: &SyntheticScene,
    intr_s: &CameraIntrinsics,
    src: &Pose,
    intr_t: &CameraIntrinsics,
    tgt: &Pose,
    u_s: Pixel,
) -> Result<Option<GroundTruth>> {
    let (ray, truth) = scene.trace_pixel(intr_s, src, u_s)?;
    let cos = intr_s.bearing(u_s).z;
    let surfaces: Vec<GroundTruthSurface> = truth
        .modes
        .iter()
        .filter(|m| m.mass >= MIN_MODE_MASS)
        .map(|m| {
            let point = ray.at(m.t_mean);
            GroundTruthSurface {
                mode: m.clone(),
                entry_depth: m.t_entry * cos,
                mean_depth: m.t_mean * cos,
                point,
                target: visible_projection(scene, intr_t, tgt, &point),
            }
        })
        .collect();
    Ok((!surfaces.is_empty()).then_some(GroundTruth { surfaces }))
}

fn visible_projection(
    scene: &SyntheticScene,
    intr: &CameraIntrinsics,
    pose: &Pose,
    point: &Vec3,
) -> Option<Pixel> {
    let (px, _) = project(intr, pose, point)?;
    if !intr.contains(px) {
        return None;
    }
    let (ray, truth) = scene.trace_pixel(intr, pose, px).ok()?;
    truth
        .modes
        .iter()
        .filter(|m| m.mass >= MIN_MODE_MASS)
        .any(|m| (ray.at(m.t_mean) - point).norm() <= MODE_MATCH_TOLERANCE)
        .then_some(px)
}
