//! Quadrature volume rendering along rays.
//!
//! For samples at distances `t_k` with interval lengths `δ_k`, the
//! transmittance is `T_k = exp(-Σ_{j<k} σ_j δ_j)` and the termination weight
//! is `w_k = T_k (1 - exp(-σ_k δ_k))`. Color, expected depth and the depth
//! distribution are all built from these weights.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{FieldQuery, RadianceField, SampleGrad};
use crate::geometry::{generate_ray, CameraIntrinsics, Pixel, Pose, Ray, Vec3};
use crate::raster::RgbImage;
use crate::rng::stream_rng;

/// Rays whose total weight is at or below this carry no usable surface.
pub const EMPTY_RAY_EPS: f64 = 1e-4;

/// Default number of samples per ray.
pub const DEFAULT_SAMPLES: usize = 192;

#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    pub sigma: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    /// World positions of the samples; empty for hand-built samples.
    pub points: Vec<Vec3>,
    pub direction: Vec3,
}

impl RaySamples {
    pub fn new(t: Vec<f64>, delta: Vec<f64>, sigma: Vec<f64>, color: Vec<[f64; 3]>) -> Result<Self> {
        let k = t.len();
        if k < 2 {
            return Err(Error::Config(format!("need at least 2 samples per ray, got {k}")));
        }
        if delta.len() != k || sigma.len() != k || color.len() != k {
            return Err(Error::Domain("ray sample arrays differ in length".into()));
        }
        if t.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Domain("sample distances must be strictly increasing".into()));
        }
        if delta.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::Domain("sample intervals must be positive".into()));
        }
        if sigma.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Domain("densities must be nonnegative".into()));
        }
        Ok(RaySamples {
            t,
            delta,
            sigma,
            color,
            points: Vec::new(),
            direction: Vec3::z(),
        })
    }

    /// Samples from analytic densities on a uniform grid over `[t0, t1]`,
    /// using left endpoints and `δ_K = t1 - t_K`.
    pub fn uniform(
        t0: f64,
        t1: f64,
        k: usize,
        mut f: impl FnMut(f64) -> (f64, [f64; 3]),
    ) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config(format!("need at least 2 samples per ray, got {k}")));
        }
        let step = (t1 - t0) / k as f64;
        let t: Vec<f64> = (0..k).map(|i| t0 + i as f64 * step).collect();
        let (sigma, color) = t.iter().map(|&t| f(t)).unzip();
        RaySamples::new(t, vec![step; k], sigma, color)
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Transmittance before each sample, plus the residual after the last.
    pub fn transmittance(&self) -> (Vec<f64>, f64) {
        let mut acc = 0.0f64;
        let mut out = Vec::with_capacity(self.len());
        for (s, d) in self.sigma.iter().zip(&self.delta) {
            out.push((-acc).exp());
            acc += s * d;
        }
        (out, (-acc).exp())
    }

    /// Termination weights `w_k` and the residual `1 - Σ w`.
    pub fn weights(&self) -> (Vec<f64>, f64) {
        let (trans, residual) = self.transmittance();
        let w = trans
            .iter()
            .zip(self.sigma.iter().zip(&self.delta))
            .map(|(t, (s, d))| t * -(-s * d).exp_m1())
            .collect();
        (w, residual)
    }
}

/// Samples `k` points on a bounded ray and queries the field at each.
///
/// Without stratification the samples are the left endpoints of `k` equal
/// intervals. With stratification each sample is jittered uniformly within
/// its interval.
pub fn march<R: Rng + ?Sized>(
    field: &RadianceField,
    ray: &Ray,
    k: usize,
    stratified: bool,
    rng: &mut R,
) -> Result<RaySamples> {
    let t = sample_positions(ray, k, stratified, rng)?;
    let mut samples = RaySamples {
        delta: intervals(&t, ray.t_far),
        sigma: Vec::with_capacity(k),
        color: Vec::with_capacity(k),
        points: Vec::with_capacity(k),
        direction: ray.direction,
        t,
    };
    for &t in &samples.t {
        let p = ray.at(t);
        let s = field.sample(&FieldQuery {
            position: p,
            view_direction: ray.direction,
        });
        samples.sigma.push(s.sigma);
        samples.color.push(s.color);
        samples.points.push(p);
    }
    Ok(samples)
}

fn sample_positions<R: Rng + ?Sized>(
    ray: &Ray,
    k: usize,
    stratified: bool,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 samples per ray, got {k}")));
    }
    if !ray.t_far.is_finite() {
        return Err(Error::Domain("cannot march an unbounded ray".into()));
    }
    let step = (ray.t_far - ray.t_near) / k as f64;
    Ok((0..k)
        .map(|i| {
            let jitter = if stratified { rng.gen::<f64>() } else { 0.0 };
            ray.t_near + (i as f64 + jitter) * step
        })
        .collect())
}

fn intervals(t: &[f64], t_far: f64) -> Vec<f64> {
    let mut delta: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    delta.push(t_far - t[t.len() - 1]);
    delta
}

/// Ĉ = Σ w_k c_k over a black background.
pub fn composite_color(s: &RaySamples) -> [f64; 3] {
    let (w, _) = s.weights();
    let mut c = [0.0; 3];
    for (wk, ck) in w.iter().zip(&s.color) {
        for ch in 0..3 {
            c[ch] += wk * ck[ch];
        }
    }
    c
}

/// D̂ = Σ w_k t_k, the expected termination distance (0 for empty rays).
pub fn composite_depth(s: &RaySamples) -> f64 {
    let (w, _) = s.weights();
    w.iter().zip(&s.t).map(|(w, t)| w * t).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthDistribution {
    pub t: Vec<f64>,
    pub w: Vec<f64>,
    pub residual: f64,
    pub w_normalized: Vec<f64>,
}

impl DepthDistribution {
    pub fn mass(&self) -> f64 {
        self.w.iter().sum()
    }

    /// Σ w_k t_k; equals [`composite_depth`] of the same samples.
    pub fn expectation(&self) -> f64 {
        self.w.iter().zip(&self.t).map(|(w, t)| w * t).sum()
    }

    /// Index drawn from the normalized weights by inverse CDF.
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, p) in self.w_normalized.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        // Rounding left the cumulative sum just below one.
        self.w_normalized
            .iter()
            .rposition(|p| *p > 0.0)
            .unwrap_or(self.w_normalized.len() - 1)
    }

    /// Index of the largest weight (lowest index on ties).
    pub fn mode_index(&self) -> usize {
        let mut best = 0;
        for (i, w) in self.w.iter().enumerate() {
            if *w > self.w[best] {
                best = i;
            }
        }
        best
    }
}

/// Normalized termination distribution with the default empty-ray cutoff.
pub fn depth_distribution(s: &RaySamples) -> Result<DepthDistribution> {
    depth_distribution_with(s, EMPTY_RAY_EPS)
}

pub fn depth_distribution_with(s: &RaySamples, eps: f64) -> Result<DepthDistribution> {
    let (w, residual) = s.weights();
    let mass: f64 = w.iter().sum();
    if !(mass > eps) {
        return Err(Error::EmptyRay { mass });
    }
    let w_normalized = w.iter().map(|x| x / mass).collect();
    Ok(DepthDistribution {
        t: s.t.clone(),
        w,
        residual,
        w_normalized,
    })
}

/// Per-sample gradients of a loss with respect to `σ_k` and `c_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositeGrad {
    pub d_sigma: Vec<f64>,
    pub d_color: Vec<[f64; 3]>,
}

/// Backward pass of [`composite_color`] and [`composite_depth`].
///
/// With `g_k = ⟨dL/dĈ, c_k⟩ + (dL/dD̂) t_k`, the density gradient is
/// `δ_j (T_{j+1} g_j - Σ_{k>j} w_k g_k)`; the color gradient is `w_k dL/dĈ`.
pub fn composite_gradients(s: &RaySamples, d_color: [f64; 3], d_depth: f64) -> CompositeGrad {
    let k = s.len();
    let (trans, residual) = s.transmittance();
    let (w, _) = s.weights();
    let g: Vec<f64> = (0..k)
        .map(|i| {
            d_color[0] * s.color[i][0]
                + d_color[1] * s.color[i][1]
                + d_color[2] * s.color[i][2]
                + d_depth * s.t[i]
        })
        .collect();
    let mut d_sigma = vec![0.0; k];
    let mut tail = 0.0;
    for j in (0..k).rev() {
        let t_next = if j + 1 < k { trans[j + 1] } else { residual };
        d_sigma[j] = s.delta[j] * (t_next * g[j] - tail);
        tail += w[j] * g[j];
    }
    let d_col = w.iter().map(|wk| d_color.map(|d| wk * d)).collect();
    CompositeGrad {
        d_sigma,
        d_color: d_col,
    }
}

/// Propagates per-sample gradients into field parameter gradients.
/// Requires samples produced by [`march`].
pub fn field_gradients(field: &RadianceField, s: &RaySamples, g: &CompositeGrad) -> Vec<SampleGrad> {
    s.points
        .iter()
        .enumerate()
        .filter(|(i, _)| g.d_sigma[*i] != 0.0 || g.d_color[*i] != [0.0; 3])
        .map(|(i, p)| {
            let q = FieldQuery {
                position: *p,
                view_direction: s.direction,
            };
            field.sample_gradient(&q, g.d_sigma[i], g.d_color[i]).1
        })
        .filter(|sg| !sg.stencil.voxels.is_empty())
        .collect()
}

/// Marches the ray through `px` clipped to the field's box; `None` if the
/// ray misses the box.
pub fn march_pixel<R: Rng + ?Sized>(
    field: &RadianceField,
    intr: &CameraIntrinsics,
    pose: &Pose,
    px: Pixel,
    k: usize,
    stratified: bool,
    rng: &mut R,
) -> Result<Option<RaySamples>> {
    let ray = generate_ray(intr, pose, px)?;
    match field.clip_ray(&ray) {
        Some(clipped) => march(field, &clipped, k, stratified, rng).map(Some),
        None => Ok(None),
    }
}

/// A rendered view: color image and expected-distance map (row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    pub color: RgbImage,
    pub distance: Vec<f64>,
}

/// Renders every pixel center of a view without stratification.
pub fn render_view(
    field: &RadianceField,
    intr: &CameraIntrinsics,
    pose: &Pose,
    k: usize,
) -> Result<RenderedView> {
    let n = intr.pixel_count();
    let results: Vec<Result<([f64; 3], f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let px = Pixel::from_index(i, intr.width);
            let mut rng = stream_rng(0, &[i as u64]);
            Ok(match march_pixel(field, intr, pose, px, k, false, &mut rng)? {
                Some(s) => (composite_color(&s), composite_depth(&s)),
                None => ([0.0; 3], 0.0),
            })
        })
        .collect();
    let mut color = RgbImage::new(intr.width, intr.height);
    let mut distance = Vec::with_capacity(n);
    for (i, r) in results.into_iter().enumerate() {
        let (c, d) = r?;
        color.data[i] = c.map(|v| v as f32);
        distance.push(d);
    }
    Ok(RenderedView { color, distance })
}

const DEPTH_MAGIC: &[u8; 8] = b"NSDEPTH\0";

/// Writes a single-channel f32 map: magic, width, height (u32 LE), then
/// row-major little-endian values.
pub fn write_depth_map<W: Write>(w: &mut W, width: u32, height: u32, values: &[f64]) -> std::io::Result<()> {
    w.write_all(DEPTH_MAGIC)?;
    w.write_all(&width.to_le_bytes())?;
    w.write_all(&height.to_le_bytes())?;
    for v in values {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_depth_map<R: Read>(r: &mut R) -> std::result::Result<(u32, u32, Vec<f32>), String> {
    let mut head = [0u8; 16];
    r.read_exact(&mut head).map_err(|e| e.to_string())?;
    if &head[..8] != DEPTH_MAGIC {
        return Err("not a depth map (bad magic)".into());
    }
    let width = u32::from_le_bytes(head[8..12].try_into().unwrap());
    let height = u32::from_le_bytes(head[12..16].try_into().unwrap());
    let mut body = Vec::new();
    r.read_to_end(&mut body).map_err(|e| e.to_string())?;
    if body.len() != width as usize * height as usize * 4 {
        return Err(format!("depth map body has {} bytes for {width}x{height}", body.len()));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((width, height, values))
}

pub fn save_depth_map(path: impl AsRef<Path>, width: u32, height: u32, values: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_depth_map(&mut w, width, height, values)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_depth_map(path: impl AsRef<Path>) -> Result<(u32, u32, Vec<f32>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_depth_map(&mut BufReader::new(file)).map_err(|m| Error::format(path, m))
}
