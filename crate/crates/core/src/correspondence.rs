//! Correspondence generation from a radiance field: reprojecting the
//! expected depth, or sampling a depth from the termination distribution,
//! optionally filtered by a round-trip consistency check.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalsynth::{evaluate_matcher, AnnotatedCorrespondence, EvalResult};
use crate::field::RadianceField;
use crate::geometry::{reproject_between, Pixel};
use crate::optimizer::PosedImage;
use crate::render::{composite_depth, depth_distribution, march_pixel, DEFAULT_SAMPLES};
use crate::rng::{stream_rng, StreamRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    DepthMap,
    DensityField,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::DepthMap => "depth_map",
            Method::DensityField => "density_field",
        }
    }

    /// Accepts `depth_map`/`depth-map` and `density_field`/`density-field`.
    pub fn parse(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "depth_map" => Ok(Method::DepthMap),
            "density_field" => Ok(Method::DensityField),
            _ => Err(Error::Config(format!(
                "unknown method '{s}' (expected depth-map or density-field)"
            ))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// How the reverse correspondence of the consistency check is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReverseMode {
    /// Same method as the forward direction (one draw when sampling).
    SameMethod,
    /// Always reproject the expected depth.
    ExpectedDepth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub pairs_per_epoch: usize,
    pub samples_per_pair: usize,
    /// Pixels; a round trip must land strictly closer than this.
    pub cycle_threshold: f64,
    pub cycle_check: bool,
    pub reverse: ReverseMode,
    /// Spread sampled depths uniformly within the chosen interval.
    pub jitter: bool,
    pub samples: usize,
    pub seed: u64,
    pub method: Method,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            pairs_per_epoch: 64,
            samples_per_pair: 32,
            cycle_threshold: 2.0,
            cycle_check: true,
            reverse: ReverseMode::SameMethod,
            jitter: false,
            samples: DEFAULT_SAMPLES,
            seed: 0,
            method: Method::DensityField,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cycle_threshold > 0.0) {
            return Err(Error::Config("cycle_threshold must be positive".into()));
        }
        if self.samples < 2 {
            return Err(Error::Config("samples per ray must be at least 2".into()));
        }
        Ok(())
    }
}

/// `(I_s, u_s, I_t, u_t)` with the depth used to produce it.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceTuple {
    pub src_id: String,
    pub u_s: Pixel,
    pub tgt_id: String,
    pub u_t: Pixel,
    /// Camera depth of the reprojected point in the source view.
    pub depth: f64,
    /// Normalized weight of the sampled interval; 1 for depth-map tuples.
    pub weight: f64,
    pub method: Method,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rejection {
    EmptyRay,
    /// Reprojection behind the target camera, outside it, or off its mask.
    OutOfBounds,
    Cycle,
}

pub type Outcome = std::result::Result<CorrespondenceTuple, Rejection>;

struct Transfer {
    u_t: Pixel,
    depth: f64,
    weight: f64,
}

/// Maps `u_s` from `src` to `tgt` with the given method, without checking.
fn transfer(
    field: &RadianceField,
    src: &PosedImage,
    tgt: &PosedImage,
    u_s: Pixel,
    method: Method,
    cfg: &GenConfig,
    rng: &mut StreamRng,
) -> Result<std::result::Result<Transfer, Rejection>> {
    let Some(s) = march_pixel(field, &src.intr, &src.pose, u_s, cfg.samples, false, rng)? else {
        return Ok(Err(Rejection::EmptyRay));
    };
    let dist = match depth_distribution(&s) {
        Ok(d) => d,
        Err(Error::EmptyRay { .. }) => return Ok(Err(Rejection::EmptyRay)),
        Err(e) => return Err(e),
    };
    let (t, weight) = match method {
        Method::DepthMap => (composite_depth(&s), 1.0),
        Method::DensityField => {
            let i = dist.sample_index(rng);
            let jitter = if cfg.jitter { rng.gen::<f64>() * s.delta[i] } else { 0.0 };
            (s.t[i] + jitter, dist.w_normalized[i])
        }
    };
    let depth = t * src.intr.bearing(u_s).z;
    if !(depth > 0.0) {
        return Ok(Err(Rejection::EmptyRay));
    }
    let r = reproject_between(u_s, depth, &src.intr, &src.pose, &tgt.intr, &tgt.pose)?;
    Ok(match r.valid() {
        Some((u_t, _)) if tgt.in_mask(u_t) => Ok(Transfer { u_t, depth, weight }),
        _ => Err(Rejection::OutOfBounds),
    })
}

/// Maps `u_t` back into `src` and accepts iff it lands strictly within
/// `threshold` pixels of `u_s`. An empty or out-of-view reverse ray fails.
#[allow(clippy::too_many_arguments)]
pub fn cycle_check(
    field: &RadianceField,
    src: &PosedImage,
    tgt: &PosedImage,
    u_s: Pixel,
    u_t: Pixel,
    threshold: f64,
    method: Method,
    cfg: &GenConfig,
    rng: &mut StreamRng,
) -> Result<bool> {
    tgt.intr.check(u_t)?;
    let back = match cfg.reverse {
        ReverseMode::SameMethod => method,
        ReverseMode::ExpectedDepth => Method::DepthMap,
    };
    Ok(match transfer(field, tgt, src, u_t, back, cfg, rng)? {
        Ok(t) => t.u_t.distance(&u_s) < threshold,
        Err(_) => false,
    })
}

fn generate_one(
    field: &RadianceField,
    src: &PosedImage,
    tgt: &PosedImage,
    u_s: Pixel,
    method: Method,
    cfg: &GenConfig,
    rng: &mut StreamRng,
) -> Result<Outcome> {
    if !src.in_mask(u_s) {
        return Err(Error::Domain(format!(
            "source pixel ({}, {}) is outside the mask of image {}",
            u_s.u, u_s.v, src.id
        )));
    }
    let t = match transfer(field, src, tgt, u_s, method, cfg, rng)? {
        Ok(t) => t,
        Err(r) => return Ok(Err(r)),
    };
    if cfg.cycle_check
        && !cycle_check(field, src, tgt, u_s, t.u_t, cfg.cycle_threshold, method, cfg, rng)?
    {
        return Ok(Err(Rejection::Cycle));
    }
    Ok(Ok(CorrespondenceTuple {
        src_id: src.id.clone(),
        u_s,
        tgt_id: tgt.id.clone(),
        u_t: t.u_t,
        depth: t.depth,
        weight: t.weight,
        method,
    }))
}

/// Reprojects the expected termination depth of `u_s` into `tgt`.
pub fn gen_depth_map(
    field: &RadianceField,
    src: &PosedImage,
    tgt: &PosedImage,
    u_s: Pixel,
    cfg: &GenConfig,
    rng: &mut StreamRng,
) -> Result<Outcome> {
    generate_one(field, src, tgt, u_s, Method::DepthMap, cfg, rng)
}

/// Reprojects a depth drawn from the normalized termination weights of `u_s`.
pub fn gen_density_field(
    field: &RadianceField,
    src: &PosedImage,
    tgt: &PosedImage,
    u_s: Pixel,
    cfg: &GenConfig,
    rng: &mut StreamRng,
) -> Result<Outcome> {
    generate_one(field, src, tgt, u_s, Method::DensityField, cfg, rng)
}

/// Most likely target pixel: the depth-map estimate, or the heaviest
/// interval of the termination distribution. Used to score a generator as
/// a matcher; `None` when the ray is empty or leaves the target view.
pub fn predict(
    field: &RadianceField,
    src: &PosedImage,
    tgt: &PosedImage,
    u_s: Pixel,
    method: Method,
    samples: usize,
) -> Result<Option<Pixel>> {
    let mut rng = stream_rng(0, &[]);
    let Some(s) = march_pixel(field, &src.intr, &src.pose, u_s, samples, false, &mut rng)? else {
        return Ok(None);
    };
    let dist = match depth_distribution(&s) {
        Ok(d) => d,
        Err(Error::EmptyRay { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let t = match method {
        Method::DepthMap => composite_depth(&s),
        Method::DensityField => s.t[dist.mode_index()],
    };
    let depth = t * src.intr.bearing(u_s).z;
    if !(depth > 0.0) {
        return Ok(None);
    }
    let r = reproject_between(u_s, depth, &src.intr, &src.pose, &tgt.intr, &tgt.pose)?;
    Ok(r.valid().map(|(p, _)| p))
}

/// Scores [`predict`] as a matcher on annotated pairs.
pub fn evaluate_generator(
    field: &RadianceField,
    images: &[PosedImage],
    annotations: &[AnnotatedCorrespondence],
    method: Method,
    samples: usize,
) -> Result<EvalResult> {
    let find = |id: &str| {
        images
            .iter()
            .find(|i| i.id == id)
            .ok_or_else(|| Error::Dataset(format!("annotation references unknown image {id}")))
    };
    evaluate_matcher(annotations, |a| {
        predict(field, find(&a.src_id)?, find(&a.tgt_id)?, a.u_s, method, samples)
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GenerationReport {
    pub method: String,
    pub attempted: usize,
    pub emitted: usize,
    pub rejected_empty_ray: usize,
    pub rejected_out_of_bounds: usize,
    pub rejected_cycle: usize,
    pub warnings: Vec<String>,
}

impl fmt::Display for GenerationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "method: {}", self.method)?;
        writeln!(f, "attempted: {}", self.attempted)?;
        writeln!(f, "emitted: {}", self.emitted)?;
        writeln!(f, "rejected_empty_ray: {}", self.rejected_empty_ray)?;
        writeln!(f, "rejected_out_of_bounds: {}", self.rejected_out_of_bounds)?;
        writeln!(f, "rejected_cycle: {}", self.rejected_cycle)?;
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        Ok(())
    }
}

/// Samples ordered image pairs and in-mask source pixels and runs the
/// configured generator on each.
///
/// Every attempt has its own random stream keyed by pair and sample index,
/// and results are kept in attempt order, so the output does not depend on
/// how the work is scheduled.
pub fn generate_dataset(
    field: &RadianceField,
    images: &[PosedImage],
    cfg: &GenConfig,
) -> Result<(Vec<CorrespondenceTuple>, GenerationReport)> {
    cfg.validate()?;
    if images.len() < 2 {
        return Err(Error::Dataset(format!(
            "correspondence generation needs at least 2 images, got {}",
            images.len()
        )));
    }
    let mut sorted: Vec<&PosedImage> = images.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut report = GenerationReport {
        method: cfg.method.tag().into(),
        ..Default::default()
    };
    let mut usable = Vec::new();
    for img in sorted {
        let pool = img.mask_indices();
        if pool.is_empty() {
            report
                .warnings
                .push(format!("image {} has an empty mask; skipped", img.id));
        } else {
            usable.push((img, pool));
        }
    }
    if usable.len() < 2 || cfg.samples_per_pair == 0 {
        if usable.len() < 2 {
            report
                .warnings
                .push("fewer than 2 images with non-empty masks; nothing generated".into());
        }
        return Ok((Vec::new(), report));
    }
    let n = usable.len();
    let mut pair_rng = stream_rng(cfg.seed, &[0]);
    let mut jobs = Vec::with_capacity(cfg.pairs_per_epoch * cfg.samples_per_pair);
    for p in 0..cfg.pairs_per_epoch {
        let s = pair_rng.gen_range(0..n);
        let t = (s + pair_rng.gen_range(1..n)) % n;
        let mut px_rng = stream_rng(cfg.seed, &[1, p as u64]);
        let pool = &usable[s].1;
        for j in 0..cfg.samples_per_pair {
            let idx = pool[px_rng.gen_range(0..pool.len())];
            jobs.push((p, j, s, t, idx));
        }
    }
    let outcomes: Vec<Result<Outcome>> = jobs
        .par_iter()
        .map(|&(p, j, s, t, idx)| {
            let (src, tgt) = (usable[s].0, usable[t].0);
            let mut rng = stream_rng(cfg.seed, &[2, p as u64, j as u64]);
            let u_s = Pixel::from_index(idx, src.intr.width);
            generate_one(field, src, tgt, u_s, cfg.method, cfg, &mut rng)
        })
        .collect();
    let mut tuples = Vec::new();
    for o in outcomes {
        report.attempted += 1;
        match o? {
            Ok(t) => tuples.push(t),
            Err(Rejection::EmptyRay) => report.rejected_empty_ray += 1,
            Err(Rejection::OutOfBounds) => report.rejected_out_of_bounds += 1,
            Err(Rejection::Cycle) => report.rejected_cycle += 1,
        }
    }
    report.emitted = tuples.len();
    Ok((tuples, report))
}

pub const TUPLE_CSV_HEADER: &str = "src_id,us_x,us_y,tgt_id,ut_x,ut_y,depth,weight,method";

#[derive(Deserialize)]
struct TupleRecord {
    src_id: String,
    us_x: f64,
    us_y: f64,
    tgt_id: String,
    ut_x: f64,
    ut_y: f64,
    depth: f64,
    weight: f64,
    method: String,
}

pub fn write_tuples<W: Write>(w: &mut W, tuples: &[CorrespondenceTuple]) -> std::io::Result<()> {
    writeln!(w, "{TUPLE_CSV_HEADER}")?;
    for t in tuples {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            t.src_id, t.u_s.u, t.u_s.v, t.tgt_id, t.u_t.u, t.u_t.v, t.depth, t.weight, t.method
        )?;
    }
    Ok(())
}

pub fn save_tuples(path: impl AsRef<Path>, tuples: &[CorrespondenceTuple]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_tuples(&mut w, tuples)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_tuples(path: impl AsRef<Path>) -> Result<Vec<CorrespondenceTuple>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let header = reader
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != TUPLE_CSV_HEADER {
        return Err(Error::format(path, format!("unexpected header '{header}'")));
    }
    reader
        .deserialize()
        .enumerate()
        .map(|(i, r)| {
            let r: TupleRecord = r.map_err(|e| Error::format(path, format!("row {}: {e}", i + 1)))?;
            let method = Method::parse(&r.method).map_err(|e| Error::format(path, format!("row {}: {e}", i + 1)))?;
            Ok(CorrespondenceTuple {
                src_id: r.src_id,
                u_s: Pixel::new(r.us_x, r.us_y),
                tgt_id: r.tgt_id,
                u_t: Pixel::new(r.ut_x, r.ut_y),
                depth: r.depth,
                weight: r.weight,
                method,
            })
        })
        .collect()
}
