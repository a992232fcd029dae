//! Fitting a radiance field to posed images with photometric and sparse
//! depth losses.

use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descent::{Descent, UpdateRule};
use crate::error::{Error, Result};
use crate::field::{softplus_inverse, Aabb, ColorModel, RadianceField, SampleGrad};
use crate::geometry::{camera_depth, generate_ray, CameraIntrinsics, Pixel, Pose, Ray, Vec3};
use crate::raster::{Mask, RgbImage};
use crate::render::{composite_color, composite_depth, composite_gradients, field_gradients, march};
use crate::rng::stream_rng;

/// A pixel with known camera depth (z in the camera frame).
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDepthPoint {
    pub image_id: String,
    pub pixel: Pixel,
    /// World-space keypoint the depth was read from, if known.
    pub keypoint_world: Option<Vec3>,
    pub depth_gt: f64,
}

impl SparseDepthPoint {
    pub fn new(image_id: impl Into<String>, pixel: Pixel, depth_gt: f64) -> Result<Self> {
        let image_id = image_id.into();
        if !(depth_gt > 0.0) || !depth_gt.is_finite() {
            return Err(Error::Dataset(format!(
                "image {image_id}: sparse depth must be positive, got {depth_gt}"
            )));
        }
        Ok(SparseDepthPoint {
            image_id,
            pixel,
            keypoint_world: None,
            depth_gt,
        })
    }

    /// Depth is the keypoint's z coordinate in the camera frame of `pose`.
    pub fn from_keypoint(
        image_id: impl Into<String>,
        pixel: Pixel,
        keypoint_world: Vec3,
        pose: &Pose,
    ) -> Result<Self> {
        let mut p = SparseDepthPoint::new(image_id, pixel, camera_depth(pose, &keypoint_world))?;
        p.keypoint_world = Some(keypoint_world);
        Ok(p)
    }
}

/// An RGB observation with its camera, optional object mask and optional
/// sparse depth.
#[derive(Clone, Debug, PartialEq)]
pub struct PosedImage {
    pub id: String,
    pub pixels: RgbImage,
    pub intr: CameraIntrinsics,
    pub pose: Pose,
    pub mask: Option<Mask>,
    pub sparse_depth: Vec<SparseDepthPoint>,
}

impl PosedImage {
    pub fn validate(&self) -> Result<()> {
        let id = &self.id;
        self.intr
            .validate()
            .map_err(|e| Error::Dataset(format!("image {id}: {e}")))?;
        let dims = (self.intr.width, self.intr.height);
        if (self.pixels.width, self.pixels.height) != dims {
            return Err(Error::Dataset(format!(
                "image {id}: pixels are {}x{} but intrinsics say {}x{}",
                self.pixels.width, self.pixels.height, dims.0, dims.1
            )));
        }
        if let Some(m) = &self.mask {
            if (m.width, m.height) != dims {
                return Err(Error::Dataset(format!(
                    "image {id}: mask is {}x{} but image is {}x{}",
                    m.width, m.height, dims.0, dims.1
                )));
            }
        }
        for p in &self.sparse_depth {
            if &p.image_id != id {
                return Err(Error::Dataset(format!(
                    "image {id}: sparse depth point belongs to image {}",
                    p.image_id
                )));
            }
            if !self.intr.contains(p.pixel) || !(p.depth_gt > 0.0) {
                return Err(Error::Dataset(format!(
                    "image {id}: invalid sparse depth point at ({}, {})",
                    p.pixel.u, p.pixel.v
                )));
            }
        }
        Ok(())
    }

    pub fn in_mask(&self, px: Pixel) -> bool {
        match (&self.mask, px.index_in(&self.intr)) {
            (_, None) => false,
            (None, Some(_)) => true,
            (Some(m), Some(i)) => m.data[i],
        }
    }

    /// Row-major indices of pixels usable as correspondence sources.
    pub fn mask_indices(&self) -> Vec<usize> {
        match &self.mask {
            Some(m) => m.indices(),
            None => (0..self.intr.pixel_count()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Color rays per step.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// The learning rate decays exponentially to this fraction of its
    /// initial value at the last iteration.
    pub final_lr_fraction: f64,
    /// Multiplier on the learning rate of the density parameters.
    pub density_lr_scale: f64,
    /// Weight λ of the depth loss.
    pub depth_loss_weight: f64,
    /// Depth-supervised rays per step.
    pub depth_batch_size: usize,
    /// Samples per ray.
    pub samples: usize,
    pub seed: u64,
    pub stratified: bool,
    pub rule: UpdateRule,
    pub resolution: [usize; 3],
    pub color_model: ColorModel,
    /// Initial density everywhere in the grid.
    pub init_sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1000,
            batch_size: 512,
            learning_rate: 0.1,
            final_lr_fraction: 0.1,
            density_lr_scale: 60.0,
            depth_loss_weight: 1.0,
            depth_batch_size: 64,
            samples: 128,
            seed: 0,
            stratified: true,
            rule: UpdateRule::adam(),
            resolution: [32; 3],
            color_model: ColorModel::Constant,
            init_sigma: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn learning_rate_at(&self, step: u64) -> f64 {
        let progress = step as f64 / self.iterations.max(1) as f64;
        self.learning_rate * self.final_lr_fraction.powf(progress)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("{what} must be positive")));
        if self.batch_size == 0 {
            return bad("batch_size");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate");
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(Error::Config("final_lr_fraction must be in (0, 1]".into()));
        }
        if !(self.density_lr_scale > 0.0) || !self.density_lr_scale.is_finite() {
            return bad("density_lr_scale");
        }
        if self.samples < 2 {
            return Err(Error::Config("samples per ray must be at least 2".into()));
        }
        if !(self.depth_loss_weight >= 0.0) || !self.depth_loss_weight.is_finite() {
            return Err(Error::Config("depth_loss_weight must be nonnegative".into()));
        }
        if self.resolution.iter().any(|&n| n == 0) {
            return bad("resolution");
        }
        if !(self.init_sigma > 0.0) {
            return bad("init_sigma");
        }
        Ok(())
    }
}

/// Ray with an observed color.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorRay {
    pub ray: Ray,
    pub color: [f64; 3],
}

/// Ray with a supervised camera depth. `cos` is the z component of the
/// ray's camera-frame direction, converting distance along the ray to depth.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthRay {
    pub ray: Ray,
    pub cos: f64,
    pub depth: f64,
}

impl DepthRay {
    pub fn from_image(image: &PosedImage, point: &SparseDepthPoint) -> Result<Self> {
        Ok(DepthRay {
            ray: generate_ray(&image.intr, &image.pose, point.pixel)?,
            cos: image.intr.bearing(point.pixel).z,
            depth: point.depth_gt,
        })
    }
}

/// How rays are sampled when evaluating a loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sampling {
    pub samples: usize,
    pub stratified: bool,
    /// Jitter streams are keyed by `(seed, keys..., ray index)`.
    pub seed: u64,
    pub stream: [u64; 2],
}

impl Sampling {
    pub fn fixed(samples: usize) -> Self {
        Sampling {
            samples,
            stratified: false,
            seed: 0,
            stream: [0; 2],
        }
    }
}

/// Per-ray forward and backward pass; rays run in parallel, and the
/// gradients are summed in ray order so the result does not depend on the
/// thread count.
fn ray_losses<T: Sync>(
    field: &RadianceField,
    batch: &[T],
    sampling: Sampling,
    ray_of: impl Fn(&T) -> &Ray + Sync,
    loss: impl Fn(&T, [f64; 3], f64) -> (f64, [f64; 3], f64) + Sync,
) -> Result<(f64, Vec<f64>)> {
    let results: Vec<Result<(f64, Vec<SampleGrad>)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let ray = ray_of(item);
            let Some(clipped) = field.clip_ray(ray) else {
                let (l, _, _) = loss(item, [0.0; 3], 0.0);
                return Ok((l, Vec::new()));
            };
            let mut rng = stream_rng(
                sampling.seed,
                &[sampling.stream[0], sampling.stream[1], i as u64],
            );
            let s = march(field, &clipped, sampling.samples, sampling.stratified, &mut rng)?;
            let (l, d_color, d_depth) = loss(item, composite_color(&s), composite_depth(&s));
            let g = composite_gradients(&s, d_color, d_depth);
            Ok((l, field_gradients(field, &s, &g)))
        })
        .collect();
    let mut total = 0.0;
    let mut grad = vec![0.0; field.params().len()];
    for r in results {
        let (l, grads) = r?;
        total += l;
        for g in &grads {
            g.accumulate(field, &mut grad);
        }
    }
    Ok((total, grad))
}

/// Mean squared color error over the batch and its parameter gradient.
pub fn photometric_loss(
    field: &RadianceField,
    batch: &[ColorRay],
    sampling: Sampling,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Domain("photometric loss needs a non-empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    ray_losses(field, batch, sampling, |r| &r.ray, |r, c, _| {
        let e = [0, 1, 2].map(|ch| c[ch] - r.color[ch]);
        let l = e.iter().map(|x| x * x).sum::<f64>() * scale;
        (l, e.map(|x| 2.0 * x * scale), 0.0)
    })
}

/// Mean squared camera-depth error over supervised rays; zero for an empty
/// batch.
pub fn depth_loss(
    field: &RadianceField,
    batch: &[DepthRay],
    sampling: Sampling,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Ok((0.0, vec![0.0; field.params().len()]));
    }
    let scale = 1.0 / batch.len() as f64;
    ray_losses(field, batch, sampling, |r| &r.ray, |r, _, d| {
        let e = d * r.cos - r.depth;
        (e * e * scale, [0.0; 3], 2.0 * e * r.cos * scale)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: u64,
    pub photo: f64,
    pub depth: f64,
    pub total: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,l_photo,l_depth,l_total";

impl LossRecord {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.step, self.photo, self.depth, self.total)
    }
}

/// Appends loss records to a CSV file, writing the header if the file is new.
pub fn append_loss_csv(path: impl AsRef<Path>, records: &[LossRecord]) -> Result<()> {
    let path = path.as_ref();
    let fresh = !path.exists();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        if fresh {
            writeln!(w, "{LOSS_CSV_HEADER}")?;
        }
        for r in records {
            writeln!(w, "{}", r.csv_row())?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

/// Grid with the configured initial density and mid-gray color.
pub fn initial_field(bbox: Aabb, cfg: &TrainConfig) -> Result<RadianceField> {
    let mut field = RadianceField::uniform(
        cfg.resolution,
        bbox,
        cfg.color_model,
        softplus_inverse(cfg.init_sigma),
        0.0,
    )?;
    field.quantize_to_storage();
    Ok(field)
}

/// Stateful training loop; a run can be split across processes by saving
/// the field and [`Trainer::save_state`] and resuming with
/// [`Trainer::resume`].
pub struct Trainer<'a> {
    images: Vec<&'a PosedImage>,
    cfg: TrainConfig,
    field: RadianceField,
    descent: Descent,
    depth_pool: Vec<(usize, usize)>,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a [PosedImage], cfg: TrainConfig, field: RadianceField) -> Result<Self> {
        let descent = Descent::new(cfg.rule, field.params().len());
        Trainer::resume(dataset, cfg, field, descent)
    }

    pub fn resume(
        dataset: &'a [PosedImage],
        cfg: TrainConfig,
        field: RadianceField,
        descent: Descent,
    ) -> Result<Self> {
        cfg.validate()?;
        if dataset.len() < 2 {
            return Err(Error::Dataset(format!(
                "training needs at least 2 images, got {}",
                dataset.len()
            )));
        }
        for img in dataset {
            img.validate()?;
        }
        let mut images: Vec<&PosedImage> = dataset.iter().collect();
        images.sort_by(|a, b| a.id.cmp(&b.id));
        let depth_pool = images
            .iter()
            .enumerate()
            .flat_map(|(i, img)| (0..img.sparse_depth.len()).map(move |j| (i, j)))
            .collect();
        Ok(Trainer {
            images,
            cfg,
            field,
            descent,
            depth_pool,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.descent.steps_taken()
    }

    pub fn field(&self) -> &RadianceField {
        &self.field
    }

    pub fn into_field(self) -> RadianceField {
        self.field
    }

    pub fn save_state(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.descent
            .write_state(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load_state(rule: UpdateRule, path: impl AsRef<Path>) -> Result<Descent> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Descent::read_state(rule, &mut BufReader::new(file))
            .map_err(|e| Error::format(path, e.to_string()))
    }

    fn color_batch(&self, step: u64) -> Result<Vec<ColorRay>> {
        let mut rng = stream_rng(self.cfg.seed, &[step, 0]);
        (0..self.cfg.batch_size)
            .map(|_| {
                let img = self.images[rng.gen_range(0..self.images.len())];
                let idx = rng.gen_range(0..img.intr.pixel_count());
                let px = Pixel::from_index(idx, img.intr.width);
                Ok(ColorRay {
                    ray: generate_ray(&img.intr, &img.pose, px)?,
                    color: img.pixels.data[idx].map(|c| c as f64),
                })
            })
            .collect()
    }

    fn depth_batch(&self, step: u64) -> Result<Vec<DepthRay>> {
        if self.cfg.depth_loss_weight == 0.0 || self.depth_pool.is_empty() {
            return Ok(Vec::new());
        }
        let mut rng = stream_rng(self.cfg.seed, &[step, 2]);
        (0..self.cfg.depth_batch_size)
            .map(|_| {
                let (i, j) = self.depth_pool[rng.gen_range(0..self.depth_pool.len())];
                DepthRay::from_image(self.images[i], &self.images[i].sparse_depth[j])
            })
            .collect()
    }

    /// One gradient step; returns the losses measured before the update.
    pub fn step(&mut self) -> Result<LossRecord> {
        let step = self.descent.steps_taken();
        let sampling = |kind: u64| Sampling {
            samples: self.cfg.samples,
            stratified: self.cfg.stratified,
            seed: self.cfg.seed,
            stream: [step, kind],
        };
        let (photo, mut grad) = photometric_loss(&self.field, &self.color_batch(step)?, sampling(1))?;
        let depth_rays = self.depth_batch(step)?;
        let lambda = self.cfg.depth_loss_weight;
        let mut depth = 0.0;
        if !depth_rays.is_empty() {
            let (l, g) = depth_loss(&self.field, &depth_rays, sampling(3))?;
            depth = l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += lambda * b;
            }
        }
        let lr = self.cfg.learning_rate_at(step);
        let n = self.field.voxel_count();
        self.descent
            .apply_split(self.field.params_mut(), &grad, n, lr * self.cfg.density_lr_scale, lr);
        self.field.quantize_to_storage();
        Ok(LossRecord {
            step,
            photo,
            depth,
            total: photo + lambda * depth,
        })
    }

    /// Steps until `cfg.iterations` steps have been taken in total.
    pub fn run(&mut self, mut on_step: impl FnMut(&LossRecord)) -> Result<Vec<LossRecord>> {
        let mut out = Vec::new();
        while (self.steps_taken() as usize) < self.cfg.iterations {
            let r = self.step()?;
            on_step(&r);
            out.push(r);
        }
        Ok(out)
    }
}

pub struct TrainOutput {
    pub field: RadianceField,
    pub losses: Vec<LossRecord>,
}

/// Trains a fresh field inside `bbox` on `dataset`.
pub fn train(dataset: &[PosedImage], bbox: Aabb, cfg: &TrainConfig) -> Result<TrainOutput> {
    let field = initial_field(bbox, cfg)?;
    let mut trainer = Trainer::new(dataset, cfg.clone(), field)?;
    let losses = trainer.run(|_| {})?;
    Ok(TrainOutput {
        field: trainer.into_field(),
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_field() -> RadianceField {
        let bbox = Aabb::cube(1.0);
        let mut f = RadianceField::uniform([4; 3], bbox, ColorModel::Harmonics1, 0.0, 0.0).unwrap();
        let n = f.params().len();
        for (i, p) in f.params_mut().iter_mut().enumerate() {
            *p = ((i * 7919 % 113) as f64 / 113.0 - 0.5) * 2.0 + if i < 64 { 0.5 } else { 0.0 };
        }
        assert_eq!(n, 64 + 64 * 12);
        f
    }

    fn tiny_rays() -> Vec<Ray> {
        [
            (Vec3::new(-0.2, 0.1, -3.0), Vec3::new(0.05, 0.02, 1.0)),
            (Vec3::new(0.3, -0.4, -3.0), Vec3::new(-0.1, 0.1, 1.0)),
            (Vec3::new(-3.0, 0.2, 0.1), Vec3::new(1.0, -0.03, 0.04)),
        ]
        .iter()
        .map(|(o, d)| Ray::new(*o, d.normalize(), 0.0, f64::INFINITY).unwrap())
        .collect()
    }

    fn check_fd(field: &RadianceField, loss: impl Fn(&RadianceField) -> (f64, Vec<f64>)) {
        let (_, g) = loss(field);
        let h = 1e-5;
        let mut checked = 0;
        for i in 0..field.params().len() {
            let mut f = field.clone();
            f.params_mut()[i] += h;
            let lp = loss(&f).0;
            f.params_mut()[i] -= 2.0 * h;
            let lm = loss(&f).0;
            let fd = (lp - lm) / (2.0 * h);
            let tol = f64::max(1e-6, 1e-3 * fd.abs().max(g[i].abs()));
            assert!((fd - g[i]).abs() <= tol, "param {i}: analytic {} vs fd {fd}", g[i]);
            if g[i] != 0.0 {
                checked += 1;
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn photometric_gradient_matches_finite_differences() {
        let field = tiny_field();
        let batch: Vec<ColorRay> = tiny_rays()
            .into_iter()
            .zip([[0.2, 0.5, 0.7], [0.9, 0.1, 0.3], [0.4, 0.4, 0.4]])
            .map(|(ray, color)| ColorRay { ray, color })
            .collect();
        check_fd(&field, |f| photometric_loss(f, &batch, Sampling::fixed(8)).unwrap());
    }

    #[test]
    fn depth_gradient_matches_finite_differences() {
        let field = tiny_field();
        let batch: Vec<DepthRay> = tiny_rays()
            .into_iter()
            .zip([2.5, 3.1, 2.9])
            .map(|(ray, depth)| DepthRay {
                ray,
                cos: 0.97,
                depth,
            })
            .collect();
        check_fd(&field, |f| depth_loss(f, &batch, Sampling::fixed(8)).unwrap());
    }

    #[test]
    fn losses_vanish_at_the_observations() {
        let field = tiny_field();
        let rays = tiny_rays();
        let sampling = Sampling::fixed(8);
        let batch: Vec<ColorRay> = rays
            .iter()
            .map(|ray| {
                let s = march(&field, &field.clip_ray(ray).unwrap(), 8, false, &mut stream_rng(0, &[])).unwrap();
                ColorRay {
                    ray: ray.clone(),
                    color: composite_color(&s),
                }
            })
            .collect();
        let (l, g) = photometric_loss(&field, &batch, sampling).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|x| *x == 0.0));
        let (l, g) = depth_loss(&field, &[], sampling).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|x| *x == 0.0));
        assert!(photometric_loss(&field, &[], sampling).is_err());
    }

    #[test]
    fn photometric_loss_ignores_ray_order() {
        let field = tiny_field();
        let mut batch: Vec<ColorRay> = tiny_rays()
            .into_iter()
            .map(|ray| ColorRay {
                ray,
                color: [0.5; 3],
            })
            .collect();
        let a = photometric_loss(&field, &batch, Sampling::fixed(8)).unwrap();
        batch.reverse();
        let b = photometric_loss(&field, &batch, Sampling::fixed(8)).unwrap();
        assert!((a.0 - b.0).abs() < 1e-15);
        for (x, y) in a.1.iter().zip(&b.1) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn keypoint_depth_is_camera_z() {
        let pose = Pose::look_at(Vec3::new(1.0, -2.0, -3.0), Vec3::zeros(), Vec3::y()).unwrap();
        let k = Vec3::new(0.2, 0.1, -0.3);
        let p = SparseDepthPoint::from_keypoint("a", Pixel::new(1.0, 1.0), k, &pose).unwrap();
        let z = pose.inverse().transform_point(&k).z;
        assert!((p.depth_gt - z).abs() < 1e-9);
        assert!(SparseDepthPoint::new("a", Pixel::new(0.0, 0.0), -1.0).is_err());
    }
}
