//! Named synthetic datasets: a scene, a camera rig, and the analytic
//! renderings, masks, sparse depth and annotations derived from them.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scene::{analytic_ground_truth, Axis, Primitive, Shape, SyntheticScene, Texture};
use crate::error::{Error, Result};
use crate::field::Aabb;
use crate::geometry::{CameraIntrinsics, Pixel, Pose, Vec3};
use crate::optimizer::{PosedImage, SparseDepthPoint};
use crate::raster::{Mask, RgbImage};
use crate::rng::stream_rng;

pub const FIXTURE_NAMES: [&str; 5] = ["slab", "sphere", "rod", "paired_sheets", "transient_shadow"];

/// Cameras on a circular arc around `target`, all looking at it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigSpec {
    pub count: usize,
    pub radius: f64,
    /// Cycled over the cameras.
    pub elevations_deg: Vec<f64>,
    pub azimuth_start_deg: f64,
    /// Inclusive, unless the arc spans a full turn.
    pub azimuth_end_deg: f64,
    pub focal: f64,
    pub width: u32,
    pub height: u32,
    pub target: [f64; 3],
}

impl RigSpec {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::centered(self.focal, self.width, self.height)
    }

    pub fn poses(&self) -> Result<Vec<Pose>> {
        if self.count == 0 {
            return Err(Error::Config("camera rig has no cameras".into()));
        }
        if self.elevations_deg.is_empty() {
            return Err(Error::Config("camera rig needs at least one elevation".into()));
        }
        let span = self.azimuth_end_deg - self.azimuth_start_deg;
        let divisions = if span.abs() >= 360.0 || self.count == 1 {
            self.count
        } else {
            self.count - 1
        };
        let target = Vec3::from(self.target);
        (0..self.count)
            .map(|i| {
                let az = (self.azimuth_start_deg + span * i as f64 / divisions as f64) * PI / 180.0;
                let el = self.elevations_deg[i % self.elevations_deg.len()] * PI / 180.0;
                let eye = target
                    + self.radius * Vec3::new(el.cos() * az.sin(), el.sin(), -el.cos() * az.cos());
                Pose::look_at(eye, target, Vec3::y())
            })
            .collect()
    }
}

/// Views whose index satisfies `index % every == 0` are darkened by
/// `factor` wherever the visible surface lies inside the ball.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShadowSpec {
    pub center: [f64; 3],
    pub radius: f64,
    pub factor: f64,
    pub every: usize,
}

/// Everything needed to regenerate a fixture; serialized as its
/// description file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub name: String,
    pub seed: u64,
    pub scene: SyntheticScene,
    pub rig: RigSpec,
    pub sparse_depth_per_image: usize,
    /// Pixels whose rays lose at least this much mass are in the mask.
    pub mask_min_mass: f64,
    pub shadow: Option<ShadowSpec>,
}

fn linear(base: [f64; 3], gradient: [[f64; 3]; 3]) -> Texture {
    Texture::Linear { base, gradient }
}

fn slab_scene() -> SyntheticScene {
    SyntheticScene {
        bbox: Aabb::cube(1.0),
        primitives: vec![Primitive {
            shape: Shape::Box {
                min: [-0.6, -0.2, -0.6],
                max: [0.6, 0.2, 0.6],
            },
            density: 200.0,
            texture: linear(
                [0.5, 0.5, 0.5],
                [[0.35, 0.1, 0.05], [-0.05, 0.6, 0.3], [0.1, -0.2, 0.35]],
            ),
        }],
    }
}

fn sphere_scene() -> SyntheticScene {
    SyntheticScene {
        bbox: Aabb::cube(1.0),
        primitives: vec![Primitive {
            shape: Shape::Sphere {
                center: [0.0, 0.0, 0.0],
                radius: 0.55,
            },
            density: 200.0,
            texture: Texture::Wave {
                base: [0.5, 0.45, 0.5],
                gradient: [[0.4, 0.0, 0.1], [0.0, 0.4, -0.1], [0.1, 0.1, 0.0]],
                amplitude: 0.25,
                frequency: [6.0, 0.0, 4.0],
            },
        }],
    }
}

fn rod_scene() -> SyntheticScene {
    let rod = |x: f64, z: f64, color: [f64; 3]| Primitive {
        shape: Shape::Rod {
            center: [x, 0.05, z],
            axis: Axis::Y,
            radius: 0.025,
            half_length: 0.45,
        },
        density: 300.0,
        texture: linear(color, [[0.0; 3], [0.0, 0.4, 0.0], [0.0; 3]]),
    };
    let mut primitives = vec![Primitive {
        shape: Shape::Box {
            min: [-0.7, -0.55, -0.7],
            max: [0.7, -0.4, 0.7],
        },
        density: 200.0,
        texture: linear(
            [0.45, 0.45, 0.45],
            [[0.3, 0.0, 0.1], [0.0; 3], [-0.1, 0.0, 0.3]],
        ),
    }];
    primitives.push(rod(-0.3, -0.2, [0.8, 0.3, 0.2]));
    primitives.push(rod(0.25, -0.1, [0.2, 0.7, 0.3]));
    primitives.push(rod(0.0, 0.3, [0.3, 0.3, 0.8]));
    SyntheticScene {
        bbox: Aabb::cube(1.0),
        primitives,
    }
}

/// A semi-transparent sheet in front of an opaque one, with opaque rods
/// between them. Rays through the front sheet split their mass between
/// two surfaces, so the expected depth lies in empty space.
fn paired_sheet_scene() -> SyntheticScene {
    let front_mass: f64 = 0.6;
    let thickness = 0.1;
    let mut primitives = vec![
        Primitive {
            shape: Shape::Box {
                min: [-0.8, -0.6, -0.5 - thickness / 2.0],
                max: [0.8, 0.6, -0.5 + thickness / 2.0],
            },
            density: -(1.0 - front_mass).ln() / thickness,
            texture: linear(
                [0.55, 0.45, 0.5],
                [[0.45, 0.1, 0.0], [0.0, 0.5, 0.0], [-0.2, -0.2, 0.0]],
            ),
        },
        Primitive {
            shape: Shape::Box {
                min: [-0.8, -0.6, 0.45],
                max: [0.8, 0.6, 0.55],
            },
            density: 200.0,
            texture: linear(
                [0.5, 0.5, 0.45],
                [[0.0, -0.45, 0.0], [0.45, 0.0, 0.0], [0.2, 0.25, 0.0]],
            ),
        },
    ];
    for (i, x) in [-0.4, 0.0, 0.4].into_iter().enumerate() {
        primitives.push(Primitive {
            shape: Shape::Rod {
                center: [x, 0.0, 0.2],
                axis: Axis::Y,
                radius: 0.05,
                half_length: 0.6,
            },
            density: 200.0,
            texture: Texture::Constant {
                rgb: [[0.9, 0.2, 0.2], [0.2, 0.9, 0.2], [0.2, 0.2, 0.9]][i],
            },
        });
    }
    SyntheticScene {
        bbox: Aabb::cube(1.0),
        primitives,
    }
}

fn orbit(count: usize, elevations: &[f64], focal: f64, size: u32) -> RigSpec {
    RigSpec {
        count,
        radius: 3.2,
        elevations_deg: elevations.to_vec(),
        azimuth_start_deg: 0.0,
        azimuth_end_deg: 360.0,
        focal,
        width: size,
        height: size,
        target: [0.0; 3],
    }
}

impl FixtureSpec {
    /// Built-in fixture by name; `cameras` overrides the default count.
    pub fn named(name: &str, seed: u64, cameras: Option<usize>) -> Result<Self> {
        let mut spec = match name {
            "slab" => FixtureSpec {
                name: name.into(),
                seed,
                scene: slab_scene(),
                rig: orbit(16, &[40.0, 25.0, 55.0], 60.0, 48),
                sparse_depth_per_image: 40,
                mask_min_mass: 0.5,
                shadow: None,
            },
            "sphere" => FixtureSpec {
                name: name.into(),
                seed,
                scene: sphere_scene(),
                rig: orbit(16, &[25.0, -15.0], 60.0, 48),
                sparse_depth_per_image: 40,
                mask_min_mass: 0.5,
                shadow: None,
            },
            "rod" => FixtureSpec {
                name: name.into(),
                seed,
                scene: rod_scene(),
                rig: orbit(16, &[35.0, 20.0], 72.0, 64),
                sparse_depth_per_image: 40,
                mask_min_mass: 0.5,
                shadow: None,
            },
            "paired_sheets" => FixtureSpec {
                name: name.into(),
                seed,
                scene: paired_sheet_scene(),
                rig: RigSpec {
                    count: 12,
                    radius: 3.2,
                    elevations_deg: vec![0.0, 10.0, -10.0],
                    azimuth_start_deg: -50.0,
                    azimuth_end_deg: 50.0,
                    focal: 96.0,
                    width: 64,
                    height: 64,
                    target: [0.0; 3],
                },
                sparse_depth_per_image: 40,
                mask_min_mass: 0.5,
                shadow: None,
            },
            "transient_shadow" => FixtureSpec {
                name: name.into(),
                seed,
                scene: slab_scene(),
                rig: orbit(16, &[40.0, 25.0, 55.0], 60.0, 48),
                sparse_depth_per_image: 40,
                mask_min_mass: 0.5,
                shadow: Some(ShadowSpec {
                    center: [0.15, 0.2, 0.1],
                    radius: 0.4,
                    factor: 0.3,
                    every: 2,
                }),
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown fixture '{other}' (known: {})",
                    FIXTURE_NAMES.join(", ")
                )))
            }
        };
        if let Some(n) = cameras {
            spec.rig.count = n;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.rig.intrinsics()?;
        self.rig.poses()?;
        if !(self.mask_min_mass > 0.0 && self.mask_min_mass <= 1.0) {
            return Err(Error::Config("mask_min_mass must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fixture spec serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: FixtureSpec =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("fixture description: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Image id of camera `index`.
    pub fn image_id(index: usize) -> String {
        format!("{index:03}")
    }

    /// Renders every camera of the rig in closed form.
    pub fn render(&self) -> Result<SyntheticDataset> {
        self.validate()?;
        let intr = self.rig.intrinsics()?;
        let poses = self.rig.poses()?;
        let views = poses
            .iter()
            .enumerate()
            .map(|(i, pose)| self.render_view(i, &intr, pose))
            .collect::<Result<Vec<_>>>()?;
        let (images, depth) = views.into_iter().unzip();
        Ok(SyntheticDataset {
            spec: self.clone(),
            images,
            depth,
        })
    }

    fn render_view(&self, index: usize, intr: &CameraIntrinsics, pose: &Pose) -> Result<(PosedImage, Vec<f64>)> {
        let shadowed = self.shadow.as_ref().filter(|s| s.every > 0 && index % s.every == 0);
        let n = intr.pixel_count();
        let rays: Vec<Result<_>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let px = Pixel::from_index(i, intr.width);
                let (ray, truth) = self.scene.trace_pixel(intr, pose, px)?;
                let mut color = truth.color;
                let mut z = 0.0;
                if truth.mass > 0.0 {
                    let t = truth.distance / truth.mass;
                    z = t * intr.bearing(px).z;
                    if let Some(s) = shadowed {
                        if (ray.at(t) - Vec3::from(s.center)).norm() <= s.radius {
                            color = color.map(|c| c * s.factor);
                        }
                    }
                }
                let opaque_first = truth
                    .modes
                    .first()
                    .filter(|m| m.mass >= 0.95)
                    .map(|m| ray.at(m.t_mean));
                Ok((color, truth.mass, z, opaque_first))
            })
            .collect();
        let id = Self::image_id(index);
        let mut pixels = RgbImage::new(intr.width, intr.height);
        let mut mask = Mask::full(intr.width, intr.height);
        let mut depth = Vec::with_capacity(n);
        let mut candidates = Vec::new();
        for (i, r) in rays.into_iter().enumerate() {
            let (color, mass, z, opaque) = r?;
            pixels.data[i] = color.map(|c| c as f32);
            mask.data[i] = mass >= self.mask_min_mass;
            depth.push(z);
            if let Some(p) = opaque {
                candidates.push((i, p));
            }
        }
        pixels.quantize();
        let mut rng = stream_rng(self.seed, &[index as u64, 7]);
        candidates.shuffle(&mut rng);
        candidates.truncate(self.sparse_depth_per_image);
        candidates.sort_by_key(|c| c.0);
        let sparse_depth = candidates
            .into_iter()
            .map(|(i, p)| SparseDepthPoint::from_keypoint(id.clone(), Pixel::from_index(i, intr.width), p, pose))
            .collect::<Result<Vec<_>>>()?;
        Ok((
            PosedImage {
                id,
                pixels,
                intr: *intr,
                pose: *pose,
                mask: Some(mask),
                sparse_depth,
            },
            depth,
        ))
    }
}

/// Rendered fixture. `depth[i]` holds the expected camera depth of every
/// pixel of image `i` (0 where the ray hits nothing).
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub spec: FixtureSpec,
    pub images: Vec<PosedImage>,
    pub depth: Vec<Vec<f64>>,
}

/// A correspondence with its analytic ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedCorrespondence {
    pub src_id: String,
    pub u_s: Pixel,
    pub tgt_id: String,
    pub u_t_gt: Pixel,
}

/// Draws `count` in-mask source pixels over random ordered image pairs and
/// keeps those whose dominant visible surface appears in the target mask.
pub fn annotate(
    scene: &SyntheticScene,
    images: &[PosedImage],
    count: usize,
    seed: u64,
) -> Result<Vec<AnnotatedCorrespondence>> {
    if images.len() < 2 {
        return Err(Error::Dataset("annotation needs at least 2 images".into()));
    }
    let pools: Vec<Vec<usize>> = images.iter().map(|i| i.mask_indices()).collect();
    let mut rng = stream_rng(seed, &[9]);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > 200 * count.max(1) {
            return Err(Error::Dataset(format!(
                "found only {} of {count} annotatable correspondences",
                out.len()
            )));
        }
        let s = rng.gen_range(0..images.len());
        let t = (s + rng.gen_range(1..images.len())) % images.len();
        if pools[s].is_empty() {
            continue;
        }
        let (src, tgt) = (&images[s], &images[t]);
        let u_s = Pixel::from_index(pools[s][rng.gen_range(0..pools[s].len())], src.intr.width);
        let Some(gt) = analytic_ground_truth(scene, &src.intr, &src.pose, &tgt.intr, &tgt.pose, u_s)? else {
            continue;
        };
        let Some(u_t) = gt.best_visible().and_then(|b| b.target) else {
            continue;
        };
        if !tgt.in_mask(u_t) {
            continue;
        }
        out.push(AnnotatedCorrespondence {
            src_id: src.id.clone(),
            u_s,
            tgt_id: tgt.id.clone(),
            u_t_gt: u_t,
        });
    }
    Ok(out)
}
