//! Explicit voxel-grid radiance field.
//!
//! Raw parameters live at voxel centers. A query trilinearly interpolates the
//! raw values and then applies the activations: softplus for density and the
//! logistic function for color.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use arrayvec::ArrayVec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Ray, Vec3};

/// Raw density assigned to empty voxels when inverting the activation.
pub const EMPTY_DENSITY_RAW: f64 = -30.0;

const SNAPSHOT_MAGIC: &[u8; 8] = b"NSFIELD\0";
const SNAPSHOT_VERSION: u32 = 1;

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn softplus_inverse(y: f64) -> f64 {
    if y <= 0.0 {
        return EMPTY_DENSITY_RAW;
    }
    let raw = if y > 30.0 { y + (-(-y).exp_m1()).ln() } else { y.exp_m1().ln() };
    raw.max(EMPTY_DENSITY_RAW)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        let b = Aabb { min, max };
        b.validate()?;
        Ok(b)
    }

    pub fn cube(half: f64) -> Self {
        Aabb {
            min: [-half; 3],
            max: [half; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.max[a] > self.min[a]) || !self.min[a].is_finite() || !self.max[a].is_finite()
            {
                return Err(Error::Domain(format!(
                    "bounding box must have positive extent, got {:?}..{:?}",
                    self.min, self.max
                )));
            }
        }
        Ok(())
    }

    pub fn extent(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    /// Parametric overlap of the ray's `[t_near, t_far]` with the box.
    pub fn intersect(&self, ray: &Ray) -> Option<(f64, f64)> {
        let mut t0 = ray.t_near;
        let mut t1 = ray.t_far;
        for a in 0..3 {
            let o = ray.origin[a];
            let d = ray.direction[a];
            if d.abs() < 1e-300 {
                if o < self.min[a] || o > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d;
            let (mut ta, mut tb) = ((self.min[a] - o) * inv, (self.max[a] - o) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 >= t1 {
                return None;
            }
        }
        Some((t0, t1))
    }

    /// Clips a ray to the box; `None` if it misses.
    pub fn clip(&self, ray: &Ray) -> Option<Ray> {
        let (t0, t1) = self.intersect(ray)?;
        ray.with_bounds(t0, t1).ok()
    }
}

/// Per-voxel color parameterization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ColorModel {
    /// One logit per channel.
    #[default]
    Constant,
    /// Degree-0 and degree-1 real spherical harmonics per channel.
    Harmonics1,
}

const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;

impl ColorModel {
    pub fn coeffs_per_channel(self) -> usize {
        match self {
            ColorModel::Constant => 1,
            ColorModel::Harmonics1 => 4,
        }
    }

    pub fn params_per_voxel(self) -> usize {
        3 * self.coeffs_per_channel()
    }

    /// Basis values for a view direction. Only the first
    /// `coeffs_per_channel` entries are meaningful.
    pub fn basis(self, dir: &Vec3) -> [f64; 4] {
        match self {
            ColorModel::Constant => [1.0, 0.0, 0.0, 0.0],
            ColorModel::Harmonics1 => [
                SH_C0,
                -SH_C1 * dir.y,
                SH_C1 * dir.z,
                -SH_C1 * dir.x,
            ],
        }
    }

    fn code(self) -> u32 {
        match self {
            ColorModel::Constant => 0,
            ColorModel::Harmonics1 => 1,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(ColorModel::Constant),
            1 => Some(ColorModel::Harmonics1),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldQuery {
    pub position: Vec3,
    pub view_direction: Vec3,
}

impl FieldQuery {
    pub fn new(position: Vec3, view_direction: Vec3) -> Result<Self> {
        if !((view_direction.norm() - 1.0).abs() <= 1e-9) {
            return Err(Error::Domain(format!(
                "view direction must have unit norm, got {}",
                view_direction.norm()
            )));
        }
        Ok(FieldQuery {
            position,
            view_direction,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldSample {
    pub sigma: f64,
    pub color: [f64; 3],
}

/// Trilinear footprint of a query: up to eight voxels and their weights.
#[derive(Clone, Debug, Default)]
pub struct Stencil {
    pub voxels: ArrayVec<(usize, f64), 8>,
}

/// Gradient of a loss with respect to the raw parameters touched by one
/// query, stored compactly: the interpolation stencil plus the gradient with
/// respect to the interpolated pre-activation values.
#[derive(Clone, Debug, Default)]
pub struct SampleGrad {
    pub stencil: Stencil,
    /// dL / d(interpolated raw density).
    pub density: f64,
    /// dL / d(color logit), per channel.
    pub color_logit: [f64; 3],
    pub basis: [f64; 4],
}

impl SampleGrad {
    /// Adds this contribution to a dense gradient laid out like
    /// [`RadianceField::params`].
    pub fn accumulate(&self, field: &RadianceField, grad: &mut [f64]) {
        let n = field.voxel_count();
        let cpc = field.color_model.coeffs_per_channel();
        let ppv = field.color_model.params_per_voxel();
        for &(voxel, w) in &self.stencil.voxels {
            grad[voxel] += w * self.density;
            let base = n + voxel * ppv;
            for ch in 0..3 {
                let g = w * self.color_logit[ch];
                for l in 0..cpc {
                    grad[base + ch * cpc + l] += g * self.basis[l];
                }
            }
        }
    }

    /// Sparse `(parameter index, gradient)` pairs.
    pub fn entries(&self, field: &RadianceField) -> Vec<(usize, f64)> {
        let n = field.voxel_count();
        let cpc = field.color_model.coeffs_per_channel();
        let ppv = field.color_model.params_per_voxel();
        let mut out = Vec::with_capacity(self.stencil.voxels.len() * (1 + ppv));
        for &(voxel, w) in &self.stencil.voxels {
            out.push((voxel, w * self.density));
            for ch in 0..3 {
                for l in 0..cpc {
                    out.push((
                        n + voxel * ppv + ch * cpc + l,
                        w * self.color_logit[ch] * self.basis[l],
                    ));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RadianceField {
    resolution: [usize; 3],
    bbox: Aabb,
    color_model: ColorModel,
    /// Raw density for every voxel, followed by the color coefficients
    /// (voxel-major, then channel, then basis function).
    params: Vec<f64>,
}

impl RadianceField {
    /// Field with uniform raw density and color logits.
    pub fn uniform(
        resolution: [usize; 3],
        bbox: Aabb,
        color_model: ColorModel,
        density_raw: f64,
        color_logit: f64,
    ) -> Result<Self> {
        bbox.validate()?;
        if resolution.iter().any(|&n| n == 0) {
            return Err(Error::Config(format!(
                "field resolution must be positive, got {resolution:?}"
            )));
        }
        let n: usize = resolution.iter().product();
        let ppv = color_model.params_per_voxel();
        let cpc = color_model.coeffs_per_channel();
        let mut params = vec![density_raw; n];
        params.reserve(n * ppv);
        for _ in 0..n {
            for _ in 0..3 {
                params.push(color_logit / color_model.basis(&Vec3::z())[0]);
                params.extend(std::iter::repeat(0.0).take(cpc - 1));
            }
        }
        Ok(RadianceField {
            resolution,
            bbox,
            color_model,
            params,
        })
    }

    /// Field whose voxel centers reproduce the given activated density and
    /// (view-independent) color.
    pub fn from_fn(
        resolution: [usize; 3],
        bbox: Aabb,
        color_model: ColorModel,
        mut f: impl FnMut(&Vec3) -> (f64, [f64; 3]),
    ) -> Result<Self> {
        let mut field = RadianceField::uniform(resolution, bbox, color_model, 0.0, 0.0)?;
        let n = field.voxel_count();
        let cpc = color_model.coeffs_per_channel();
        let ppv = color_model.params_per_voxel();
        let c0 = color_model.basis(&Vec3::z())[0];
        for voxel in 0..n {
            let center = field.voxel_center(voxel);
            let (sigma, color) = f(&center);
            field.params[voxel] = softplus_inverse(sigma);
            for ch in 0..3 {
                let c = color[ch].clamp(1e-6, 1.0 - 1e-6);
                field.params[n + voxel * ppv + ch * cpc] = logit(c) / c0;
            }
        }
        Ok(field)
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn bbox(&self) -> &Aabb {
        &self.bbox
    }

    pub fn color_model(&self) -> ColorModel {
        self.color_model
    }

    pub fn voxel_count(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn density_raw(&self) -> &[f64] {
        &self.params[..self.voxel_count()]
    }

    pub fn density_raw_mut(&mut self) -> &mut [f64] {
        let n = self.voxel_count();
        &mut self.params[..n]
    }

    pub fn color_raw(&self) -> &[f64] {
        &self.params[self.voxel_count()..]
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        let e = self.bbox.extent();
        [
            e[0] / self.resolution[0] as f64,
            e[1] / self.resolution[1] as f64,
            e[2] / self.resolution[2] as f64,
        ]
    }

    pub fn voxel_index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.resolution[1] + j) * self.resolution[0] + i
    }

    pub fn voxel_coords(&self, voxel: usize) -> [usize; 3] {
        let [nx, ny, _] = self.resolution;
        [voxel % nx, (voxel / nx) % ny, voxel / (nx * ny)]
    }

    pub fn voxel_center(&self, voxel: usize) -> Vec3 {
        let c = self.voxel_coords(voxel);
        let s = self.voxel_size();
        Vec3::new(
            self.bbox.min[0] + (c[0] as f64 + 0.5) * s[0],
            self.bbox.min[1] + (c[1] as f64 + 0.5) * s[1],
            self.bbox.min[2] + (c[2] as f64 + 0.5) * s[2],
        )
    }

    /// Smallest voxel edge length.
    pub fn min_voxel_size(&self) -> f64 {
        let s = self.voxel_size();
        s[0].min(s[1]).min(s[2])
    }

    pub fn clip_ray(&self, ray: &Ray) -> Option<Ray> {
        self.bbox.clip(ray)
    }

    /// Trilinear footprint, or `None` outside the bounding box.
    pub fn stencil(&self, p: &Vec3) -> Option<Stencil> {
        if !self.bbox.contains(p) {
            return None;
        }
        let s = self.voxel_size();
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let n = self.resolution[a];
            let g = ((p[a] - self.bbox.min[a]) / s[a] - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = (g.floor() as usize).min(n.saturating_sub(2));
            lo[a] = i0;
            hi[a] = (i0 + 1).min(n - 1);
            frac[a] = if hi[a] == lo[a] { 0.0 } else { g - i0 as f64 };
        }
        let mut voxels = ArrayVec::new();
        for corner in 0..8 {
            let pick = |a: usize| corner >> a & 1 == 1;
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                if pick(a) {
                    w *= frac[a];
                    idx[a] = hi[a];
                } else {
                    w *= 1.0 - frac[a];
                    idx[a] = lo[a];
                }
            }
            if w != 0.0 || corner == 0 {
                voxels.push((self.voxel_index(idx[0], idx[1], idx[2]), w));
            }
        }
        Some(Stencil { voxels })
    }

    fn interpolate(&self, stencil: &Stencil, basis: &[f64; 4]) -> (f64, [f64; 3]) {
        let n = self.voxel_count();
        let cpc = self.color_model.coeffs_per_channel();
        let ppv = self.color_model.params_per_voxel();
        let mut density = 0.0;
        let mut logits = [0.0; 3];
        for &(voxel, w) in &stencil.voxels {
            density += w * self.params[voxel];
            let base = n + voxel * ppv;
            for (ch, logit) in logits.iter_mut().enumerate() {
                let coeffs = &self.params[base + ch * cpc..base + (ch + 1) * cpc];
                let z: f64 = coeffs.iter().zip(basis).map(|(c, b)| c * b).sum();
                *logit += w * z;
            }
        }
        (density, logits)
    }

    pub fn sample(&self, q: &FieldQuery) -> FieldSample {
        let Some(stencil) = self.stencil(&q.position) else {
            return FieldSample {
                sigma: 0.0,
                color: [0.0; 3],
            };
        };
        let basis = self.color_model.basis(&q.view_direction);
        let (density, logits) = self.interpolate(&stencil, &basis);
        FieldSample {
            sigma: softplus(density),
            color: logits.map(sigmoid),
        }
    }

    /// Sample together with the gradient of a loss whose upstream gradient
    /// with respect to `(sigma, color)` is `(d_sigma, d_color)`.
    pub fn sample_gradient(
        &self,
        q: &FieldQuery,
        d_sigma: f64,
        d_color: [f64; 3],
    ) -> (FieldSample, SampleGrad) {
        let Some(stencil) = self.stencil(&q.position) else {
            return (
                FieldSample {
                    sigma: 0.0,
                    color: [0.0; 3],
                },
                SampleGrad::default(),
            );
        };
        let basis = self.color_model.basis(&q.view_direction);
        let (density, logits) = self.interpolate(&stencil, &basis);
        let color = logits.map(sigmoid);
        let grad = SampleGrad {
            density: d_sigma * sigmoid(density),
            color_logit: [0, 1, 2].map(|ch| d_color[ch] * color[ch] * (1.0 - color[ch])),
            basis,
            stencil,
        };
        (
            FieldSample {
                sigma: softplus(density),
                color,
            },
            grad,
        )
    }

    /// Rounds every parameter to single precision, the snapshot storage type.
    pub fn quantize_to_storage(&mut self) {
        for p in &mut self.params {
            *p = *p as f32 as f64;
        }
    }

    pub fn write_snapshot<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        for n in self.resolution {
            w.write_all(&(n as u32).to_le_bytes())?;
        }
        for v in self.bbox.min.iter().chain(&self.bbox.max) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.color_model.code().to_le_bytes())?;
        for p in &self.params {
            w.write_all(&(*p as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(r: &mut R) -> std::result::Result<Self, String> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| e.to_string())?;
        if &magic != SNAPSHOT_MAGIC {
            return Err("not a field snapshot (bad magic)".into());
        }
        let version = read_u32(r)?;
        if version != SNAPSHOT_VERSION {
            return Err(format!("unsupported field snapshot version {version}"));
        }
        let resolution = [read_u32(r)? as usize, read_u32(r)? as usize, read_u32(r)? as usize];
        let mut bounds = [0.0f64; 6];
        for b in &mut bounds {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf).map_err(|e| e.to_string())?;
            *b = f64::from_le_bytes(buf);
        }
        let bbox = Aabb::new([bounds[0], bounds[1], bounds[2]], [bounds[3], bounds[4], bounds[5]])
            .map_err(|e| e.to_string())?;
        let color_model = ColorModel::from_code(read_u32(r)?)
            .ok_or_else(|| "unknown color model code".to_string())?;
        let mut field = RadianceField::uniform(resolution, bbox, color_model, 0.0, 0.0)
            .map_err(|e| e.to_string())?;
        let mut buf = vec![0u8; field.params.len() * 4];
        r.read_exact(&mut buf)
            .map_err(|_| "truncated parameter array".to_string())?;
        for (p, chunk) in field.params.iter_mut().zip(buf.chunks_exact(4)) {
            *p = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| e.to_string())?;
        if !rest.is_empty() {
            return Err(format!("{} trailing bytes after parameters", rest.len()));
        }
        Ok(field)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_snapshot(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        RadianceField::read_snapshot(&mut BufReader::new(file)).map_err(|m| Error::format(path, m))
    }
}

fn read_u32<R: Read>(r: &mut R) -> std::result::Result<u32, String> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| e.to_string())?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(res: [usize; 3], model: ColorModel, seed: u64) -> RadianceField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = RadianceField::uniform(res, Aabb::cube(1.0), model, 0.0, 0.0).unwrap();
        for p in f.params_mut() {
            *p = rng.gen_range(-2.0..2.0);
        }
        f
    }

    fn query(p: [f64; 3], d: [f64; 3]) -> FieldQuery {
        FieldQuery::new(Vec3::from(p), Vec3::from(d).normalize()).unwrap()
    }

    #[test]
    fn activations_invert() {
        for y in [1e-6, 0.3, 1.0, 7.0, 200.0, 1e4] {
            assert!((softplus(softplus_inverse(y)) - y).abs() < 1e-9 * y.max(1.0));
        }
        assert!(softplus(softplus_inverse(0.0)) < 1e-12);
        for p in [0.01, 0.5, 0.93] {
            assert!((sigmoid(logit(p)) - p).abs() < 1e-14);
        }
        assert!(softplus(-800.0) >= 0.0 && softplus(800.0) == 800.0);
    }

    #[test]
    fn outside_bbox_is_empty() {
        let f = random_field([4, 4, 4], ColorModel::Constant, 1);
        let s = f.sample(&query([1.5, 0.0, 0.0], [0.0, 0.0, 1.0]));
        assert_eq!(s.sigma, 0.0);
        let (_, g) = f.sample_gradient(&query([0.0, -1.01, 0.0], [0.0, 0.0, 1.0]), 1.0, [1.0; 3]);
        assert!(g.stencil.voxels.is_empty());
    }

    #[test]
    fn constant_grid_is_constant() {
        let f = RadianceField::uniform([5, 3, 4], Aabb::cube(1.0), ColorModel::Constant, 0.7, -0.2)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let expected = softplus(0.7);
        for _ in 0..100 {
            let p = [0, 1, 2].map(|_| rng.gen_range(-1.0..1.0));
            let s = f.sample(&query(p, [1.0, 2.0, 3.0]));
            assert!((s.sigma - expected).abs() < 1e-12);
            assert!((s.color[1] - sigmoid(-0.2)).abs() < 1e-12);
        }
    }

    #[test]
    fn voxel_center_returns_voxel_value() {
        for model in [ColorModel::Constant, ColorModel::Harmonics1] {
            let f = random_field([4, 5, 6], model, 3);
            let voxel = f.voxel_index(2, 3, 1);
            let s = f.sample(&query(f.voxel_center(voxel).into(), [0.0, 0.0, 1.0]));
            assert!((s.sigma - softplus(f.params()[voxel])).abs() < 1e-12);
            let (_, g) =
                f.sample_gradient(&query(f.voxel_center(voxel).into(), [0.0, 0.0, 1.0]), 1.0, [0.0; 3]);
            let touched: Vec<_> = g.entries(&f).into_iter().filter(|(_, v)| *v != 0.0).collect();
            assert_eq!(touched.len(), 1);
            assert_eq!(touched[0].0, voxel);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let f = random_field([4, 4, 4], ColorModel::Harmonics1, 4);
        let (_, g) = f.sample_gradient(&query([0.1, 0.2, -0.3], [1.0, 1.0, 0.0]), 0.0, [0.0; 3]);
        assert!(g.entries(&f).iter().all(|(_, v)| *v == 0.0));
    }

    #[test]
    fn view_direction_must_be_unit() {
        assert!(FieldQuery::new(Vec3::zeros(), Vec3::new(0.0, 0.0, 2.0)).is_err());
    }

    /// Loss used for the finite-difference oracle: a fixed linear functional
    /// of the activated outputs.
    fn probe(f: &RadianceField, q: &FieldQuery, a: f64, b: [f64; 3]) -> f64 {
        let s = f.sample(q);
        a * s.sigma + (0..3).map(|c| b[c] * s.color[c]).sum::<f64>()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for model in [ColorModel::Constant, ColorModel::Harmonics1] {
            for trial in 0..20 {
                let mut f = random_field([4, 4, 4], model, 10 + trial);
                let p = [0, 1, 2].map(|_| rng.gen_range(-0.99..0.99));
                let q = query(p, [rng.gen_range(-1.0..1.0), 0.3, rng.gen_range(-1.0..1.0)]);
                let a = rng.gen_range(-1.0..1.0);
                let b = [0, 1, 2].map(|_| rng.gen_range(-1.0..1.0));
                let (_, g) = f.sample_gradient(&q, a, b);
                let mut dense = vec![0.0; f.params().len()];
                g.accumulate(&f, &mut dense);
                let h = 1e-4;
                for i in 0..dense.len() {
                    let orig = f.params()[i];
                    f.params_mut()[i] = orig + h;
                    let up = probe(&f, &q, a, b);
                    f.params_mut()[i] = orig - h;
                    let down = probe(&f, &q, a, b);
                    f.params_mut()[i] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let tol = 1e-4 * fd.abs().max(dense[i].abs()) + 1e-9;
                    assert!((fd - dense[i]).abs() <= tol, "param {i}: fd {fd} vs {}", dense[i]);
                }
            }
        }
    }

    #[test]
    fn continuous_across_voxel_boundaries() {
        let f = random_field([6, 6, 6], ColorModel::Harmonics1, 6);
        let s = f.voxel_size();
        // Planes through voxel centers are where the stencil switches cells.
        for i in 1..5 {
            let x = f.bbox().min[0] + (i as f64 + 0.5) * s[0];
            let a = f.sample(&query([x - 1e-7, 0.13, -0.41], [0.0, 1.0, 0.0]));
            let b = f.sample(&query([x + 1e-7, 0.13, -0.41], [0.0, 1.0, 0.0]));
            assert!((a.sigma - b.sigma).abs() < 1e-5);
            for c in 0..3 {
                assert!((a.color[c] - b.color[c]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn snapshot_round_trip_is_bit_exact() {
        let mut f = random_field([3, 4, 5], ColorModel::Harmonics1, 7);
        f.quantize_to_storage();
        let mut bytes = Vec::new();
        f.write_snapshot(&mut bytes).unwrap();
        let g = RadianceField::read_snapshot(&mut bytes.as_slice()).unwrap();
        assert_eq!(f, g);
        let mut again = Vec::new();
        g.write_snapshot(&mut again).unwrap();
        assert_eq!(bytes, again);
        assert!(RadianceField::read_snapshot(&mut &bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(RadianceField::read_snapshot(&mut extra.as_slice()).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(RadianceField::read_snapshot(&mut bad.as_slice()).is_err());
    }

    #[test]
    fn from_fn_reproduces_centers() {
        let f = RadianceField::from_fn([8, 8, 8], Aabb::cube(1.0), ColorModel::Harmonics1, |p| {
            let sigma = if p.x > 0.0 { 150.0 } else { 0.0 };
            (sigma, [0.2, 0.5 + 0.3 * p.y, 0.9])
        })
        .unwrap();
        for voxel in [0, 17, 200, 511] {
            let c = f.voxel_center(voxel);
            let s = f.sample(&query(c.into(), [0.3, -0.2, 0.9]));
            let sigma = if c.x > 0.0 { 150.0 } else { 0.0 };
            assert!((s.sigma - sigma).abs() < 1e-5);
            assert!((s.color[1] - (0.5 + 0.3 * c.y)).abs() < 1e-5);
        }
    }

    #[test]
    fn ray_box_clipping() {
        let b = Aabb::cube(1.0);
        let ray = Ray::new(Vec3::new(0.0, 0.0, -3.0), Vec3::z(), 0.0, f64::INFINITY).unwrap();
        let c = b.clip(&ray).unwrap();
        assert!((c.t_near - 2.0).abs() < 1e-12 && (c.t_far - 4.0).abs() < 1e-12);
        let miss = Ray::new(Vec3::new(0.0, 2.0, -3.0), Vec3::z(), 0.0, f64::INFINITY).unwrap();
        assert!(b.clip(&miss).is_none());
        let inside = Ray::new(Vec3::zeros(), Vec3::x(), 0.0, f64::INFINITY).unwrap();
        let c = b.clip(&inside).unwrap();
        assert_eq!(c.t_near, 0.0);
        assert!((c.t_far - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn density_is_nonnegative(raw in prop::collection::vec(-1e3f64..1e3, 8), x in -1.2f64..1.2, y in -1.2f64..1.2, z in -1.2f64..1.2) {
            let mut f = RadianceField::uniform([2, 2, 2], Aabb::cube(1.0), ColorModel::Constant, 0.0, 0.0).unwrap();
            f.density_raw_mut().copy_from_slice(&raw);
            let s = f.sample(&query([x, y, z], [0.0, 0.0, 1.0]));
            prop_assert!(s.sigma >= 0.0);
            prop_assert!(s.color.iter().all(|c| (0.0..=1.0).contains(c)));
        }
    }
}
