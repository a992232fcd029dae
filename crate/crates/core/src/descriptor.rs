//! Dense descriptors from a small convolutional network, trained with a
//! pixelwise contrastive loss on correspondence tuples.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correspondence::CorrespondenceTuple;
use crate::descent::{Descent, UpdateRule};
use crate::error::{Error, Result};
use crate::evalsynth::{evaluate_matcher, AnnotatedCorrespondence, EvalResult};
use crate::geometry::Pixel;
use crate::optimizer::PosedImage;
use crate::raster::{Mask, RgbImage};
use crate::rng::stream_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Zero,
    /// Periodic boundary: the image is treated as a torus.
    Wrap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of 3×3 convolution layers.
    pub layers: usize,
    pub hidden: usize,
    /// Output descriptor dimension.
    pub dim: usize,
    pub padding: Padding,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 3,
            hidden: 16,
            dim: 3,
            padding: Padding::Zero,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Layer {
    inputs: usize,
    outputs: usize,
    /// Offset of the weights `[out][in][ky][kx]`, followed by `outputs` biases.
    offset: usize,
}

impl Layer {
    fn weight_count(&self) -> usize {
        self.inputs * self.outputs * 9
    }

    fn len(&self) -> usize {
        self.weight_count() + self.outputs
    }

    fn weight(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        self.offset + ((o * self.inputs + i) * 3 + ky) * 3 + kx
    }

    fn bias(&self, o: usize) -> usize {
        self.offset + self.weight_count() + o
    }
}

/// Stack of 3×3 stride-1 convolutions with tanh between layers and a linear
/// output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorModel {
    padding: Padding,
    layers: Vec<Layer>,
    params: Vec<f64>,
}

/// Row-major `h × w × d` descriptor field.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorImage {
    pub width: u32,
    pub height: u32,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl DescriptorImage {
    pub fn at(&self, index: usize) -> &[f64] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn get(&self, col: u32, row: u32) -> &[f64] {
        self.at(row as usize * self.width as usize + col as usize)
    }

    /// Maps the first three channels to RGB, min-max normalizing each.
    pub fn visualize(&self) -> RgbImage {
        let n = self.width as usize * self.height as usize;
        let mut img = RgbImage::new(self.width, self.height);
        for c in 0..self.dim.min(3) {
            let vals = (0..n).map(|i| self.data[i * self.dim + c]);
            let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            let span = if hi > lo { hi - lo } else { 1.0 };
            for i in 0..n {
                img.data[i][c] = ((self.data[i * self.dim + c] - lo) / span) as f32;
            }
        }
        img
    }
}

fn distance_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Channel-major planes of one image through the network.
struct Planes {
    channels: usize,
    w: usize,
    h: usize,
    data: Vec<f64>,
}

impl Planes {
    fn zeros(channels: usize, w: usize, h: usize) -> Self {
        Planes {
            channels,
            w,
            h,
            data: vec![0.0; channels * w * h],
        }
    }

    fn plane(&self, c: usize) -> &[f64] {
        &self.data[c * self.w * self.h..(c + 1) * self.w * self.h]
    }
}

/// Source row or column of output coordinate `x` under tap offset `k - 1`.
fn tap(x: usize, k: usize, n: usize, padding: Padding) -> Option<usize> {
    let s = x as isize + k as isize - 1;
    if s >= 0 && (s as usize) < n {
        Some(s as usize)
    } else if padding == Padding::Wrap {
        Some(s.rem_euclid(n as isize) as usize)
    } else {
        None
    }
}

/// `out[y][x] += w * src[y + ky - 1][x + kx - 1]` over the plane.
fn shifted_axpy(out: &mut [f64], src: &[f64], w: f64, ky: usize, kx: usize, width: usize, height: usize, padding: Padding) {
    // Columns whose source is inside the row.
    let lo = if kx == 0 { 1 } else { 0 };
    let hi = if kx == 2 { width - 1 } else { width };
    for y in 0..height {
        let Some(sy) = tap(y, ky, height, padding) else { continue };
        let orow = &mut out[y * width..(y + 1) * width];
        let srow = &src[sy * width..(sy + 1) * width];
        let shift = kx as isize - 1;
        for x in lo..hi {
            orow[x] += w * srow[(x as isize + shift) as usize];
        }
        if padding == Padding::Wrap {
            for x in (0..lo).chain(hi..width) {
                orow[x] += w * srow[tap(x, kx, width, padding).unwrap()];
            }
        }
    }
}

/// `Σ_{y,x} g[y][x] * src[y + ky - 1][x + kx - 1]`.
fn shifted_dot(g: &[f64], src: &[f64], ky: usize, kx: usize, width: usize, height: usize, padding: Padding) -> f64 {
    let lo = if kx == 0 { 1 } else { 0 };
    let hi = if kx == 2 { width - 1 } else { width };
    let mut acc = 0.0;
    for y in 0..height {
        let Some(sy) = tap(y, ky, height, padding) else { continue };
        let grow = &g[y * width..(y + 1) * width];
        let srow = &src[sy * width..(sy + 1) * width];
        let shift = kx as isize - 1;
        for x in lo..hi {
            acc += grow[x] * srow[(x as isize + shift) as usize];
        }
        if padding == Padding::Wrap {
            for x in (0..lo).chain(hi..width) {
                acc += grow[x] * srow[tap(x, kx, width, padding).unwrap()];
            }
        }
    }
    acc
}

/// `dsrc[y + ky - 1][x + kx - 1] += w * g[y][x]`.
fn shifted_scatter(dsrc: &mut [f64], g: &[f64], w: f64, ky: usize, kx: usize, width: usize, height: usize, padding: Padding) {
    let lo = if kx == 0 { 1 } else { 0 };
    let hi = if kx == 2 { width - 1 } else { width };
    for y in 0..height {
        let Some(sy) = tap(y, ky, height, padding) else { continue };
        let grow = &g[y * width..(y + 1) * width];
        let drow = &mut dsrc[sy * width..(sy + 1) * width];
        let shift = kx as isize - 1;
        for x in lo..hi {
            drow[(x as isize + shift) as usize] += w * grow[x];
        }
        if padding == Padding::Wrap {
            for x in (0..lo).chain(hi..width) {
                drow[tap(x, kx, width, padding).unwrap()] += w * grow[x];
            }
        }
    }
}

/// Activations kept for the backward pass: the input of every layer.
struct Trace {
    inputs: Vec<Planes>,
    output: Planes,
}

impl DescriptorModel {
    /// Randomly initialized model (uniform Glorot weights, zero biases).
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        if cfg.layers == 0 || cfg.dim == 0 || (cfg.layers > 1 && cfg.hidden == 0) {
            return Err(Error::Config("descriptor model needs positive layer sizes".into()));
        }
        let mut layers = Vec::with_capacity(cfg.layers);
        let mut offset = 0;
        for l in 0..cfg.layers {
            let inputs = if l == 0 { 3 } else { cfg.hidden };
            let outputs = if l + 1 == cfg.layers { cfg.dim } else { cfg.hidden };
            let layer = Layer {
                inputs,
                outputs,
                offset,
            };
            offset += layer.len();
            layers.push(layer);
        }
        let mut params = vec![0.0; offset];
        let mut rng = stream_rng(seed, &[0x64657363]);
        for layer in &layers {
            let bound = (6.0 / (9 * (layer.inputs + layer.outputs)) as f64).sqrt();
            for p in &mut params[layer.offset..layer.offset + layer.weight_count()] {
                *p = (rng.gen::<f64>() * 2.0 - 1.0) * bound;
            }
        }
        let mut model = DescriptorModel {
            padding: cfg.padding,
            layers,
            params,
        };
        model.quantize_to_storage();
        Ok(model)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn dim(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    pub fn padding(&self) -> Padding {
        self.padding
    }

    /// Side length of the square region one output pixel depends on.
    pub fn receptive_field(&self) -> u32 {
        2 * self.layers.len() as u32 + 1
    }

    pub fn quantize_to_storage(&mut self) {
        for p in &mut self.params {
            *p = *p as f32 as f64;
        }
    }

    fn trace(&self, image: &RgbImage) -> Result<Trace> {
        let rf = self.receptive_field();
        if image.width < rf || image.height < rf {
            return Err(Error::Domain(format!(
                "image {}x{} is smaller than the {rf}x{rf} receptive field",
                image.width, image.height
            )));
        }
        let (w, h) = (image.width as usize, image.height as usize);
        let mut input = Planes::zeros(3, w, h);
        for (i, px) in image.data.iter().enumerate() {
            for c in 0..3 {
                input.data[c * w * h + i] = 2.0 * px[c] as f64 - 1.0;
            }
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let last = l + 1 == self.layers.len();
            let out: Vec<Vec<f64>> = (0..layer.outputs)
                .into_par_iter()
                .map(|o| {
                    let mut plane = vec![self.params[layer.bias(o)]; w * h];
                    for i in 0..layer.inputs {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let wt = self.params[layer.weight(o, i, ky, kx)];
                                shifted_axpy(&mut plane, input.plane(i), wt, ky, kx, w, h, self.padding);
                            }
                        }
                    }
                    if !last {
                        plane.iter_mut().for_each(|v| *v = v.tanh());
                    }
                    plane
                })
                .collect();
            let next = Planes {
                channels: layer.outputs,
                w,
                h,
                data: out.concat(),
            };
            inputs.push(std::mem::replace(&mut input, next));
        }
        Ok(Trace {
            inputs,
            output: input,
        })
    }

    pub fn forward(&self, image: &RgbImage) -> Result<DescriptorImage> {
        let out = self.trace(image)?.output;
        let n = out.w * out.h;
        let mut data = vec![0.0; n * out.channels];
        for c in 0..out.channels {
            for (i, v) in out.plane(c).iter().enumerate() {
                data[i * out.channels + c] = *v;
            }
        }
        Ok(DescriptorImage {
            width: image.width,
            height: image.height,
            dim: out.channels,
            data,
        })
    }

    /// Accumulates parameter gradients given dL/d(descriptor) as sparse
    /// `(pixel index, gradient)` pairs.
    fn backward(&self, trace: &Trace, upstream: &[(usize, Vec<f64>)], grad: &mut [f64]) {
        let (w, h) = (trace.output.w, trace.output.h);
        let mut g = Planes::zeros(trace.output.channels, w, h);
        for (idx, d) in upstream {
            for (c, v) in d.iter().enumerate() {
                g.data[c * w * h + idx] += v;
            }
        }
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.inputs[l];
            let layer_grads: Vec<Vec<f64>> = (0..layer.outputs)
                .into_par_iter()
                .map(|o| {
                    let go = g.plane(o);
                    let mut out = Vec::with_capacity(layer.inputs * 9 + 1);
                    for i in 0..layer.inputs {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                out.push(shifted_dot(go, input.plane(i), ky, kx, w, h, self.padding));
                            }
                        }
                    }
                    out.push(go.iter().sum());
                    out
                })
                .collect();
            for (o, og) in layer_grads.iter().enumerate() {
                for i in 0..layer.inputs {
                    for k in 0..9 {
                        grad[layer.weight(o, i, k / 3, k % 3)] += og[i * 9 + k];
                    }
                }
                grad[layer.bias(o)] += og[layer.inputs * 9];
            }
            if l == 0 {
                break;
            }
            // Gradient with respect to this layer's input, through the tanh
            // that produced it.
            let planes: Vec<Vec<f64>> = (0..layer.inputs)
                .into_par_iter()
                .map(|i| {
                    let mut d = vec![0.0; w * h];
                    for o in 0..layer.outputs {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let wt = self.params[layer.weight(o, i, ky, kx)];
                                shifted_scatter(&mut d, g.plane(o), wt, ky, kx, w, h, self.padding);
                            }
                        }
                    }
                    for (v, a) in d.iter_mut().zip(input.plane(i)) {
                        *v *= 1.0 - a * a;
                    }
                    d
                })
                .collect();
            g = Planes {
                channels: layer.inputs,
                w,
                h,
                data: planes.concat(),
            };
        }
    }

    pub fn write_snapshot<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        let pad: u32 = match self.padding {
            Padding::Zero => 0,
            Padding::Wrap => 1,
        };
        w.write_all(&pad.to_le_bytes())?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for l in &self.layers {
            w.write_all(&(l.inputs as u32).to_le_bytes())?;
            w.write_all(&(l.outputs as u32).to_le_bytes())?;
        }
        for p in &self.params {
            w.write_all(&(*p as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(r: &mut R) -> std::result::Result<Self, String> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| e.to_string())?;
        let mut pos = 0;
        let mut take = |n: usize| -> std::result::Result<&[u8], String> {
            let s = bytes.get(pos..pos + n).ok_or("truncated model snapshot")?;
            pos += n;
            Ok(s)
        };
        if take(8)? != MODEL_MAGIC {
            return Err("not a descriptor model (bad magic)".into());
        }
        let mut u32_at = || -> std::result::Result<u32, String> { Ok(u32::from_le_bytes(take(4)?.try_into().unwrap())) };
        let version = u32_at()?;
        if version != MODEL_VERSION {
            return Err(format!("unsupported model version {version}"));
        }
        let padding = match u32_at()? {
            0 => Padding::Zero,
            1 => Padding::Wrap,
            c => return Err(format!("unknown padding code {c}")),
        };
        let n = u32_at()? as usize;
        let mut layers = Vec::with_capacity(n);
        let mut offset = 0;
        for l in 0..n {
            let inputs = u32_at()? as usize;
            let outputs = u32_at()? as usize;
            let expected_in = if l == 0 { 3 } else { layers.last().map(|p: &Layer| p.outputs).unwrap() };
            if inputs != expected_in || outputs == 0 {
                return Err(format!("layer {l} has inconsistent shape {inputs}->{outputs}"));
            }
            let layer = Layer {
                inputs,
                outputs,
                offset,
            };
            offset += layer.len();
            layers.push(layer);
        }
        if layers.is_empty() {
            return Err("model has no layers".into());
        }
        let body = &bytes[pos..];
        if body.len() != offset * 4 {
            return Err(format!("expected {} parameter bytes, found {}", offset * 4, body.len()));
        }
        let params = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(DescriptorModel {
            padding,
            layers,
            params,
        })
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
        DescriptorModel::read_snapshot(&mut BufReader::new(file)).map_err(|m| Error::format(path, m))
    }
}

const MODEL_MAGIC: &[u8; 8] = b"NSDESC\0\0";
const MODEL_VERSION: u32 = 1;

/// Pixel pairs between one source and one target image (row-major indices).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContrastiveBatch {
    pub matches: Vec<(usize, usize)>,
    pub non_matches: Vec<(usize, usize)>,
}

/// Mean squared match distance plus mean squared hinge `max(0, M - d)` over
/// non-matches, and its gradient with respect to the model parameters.
pub fn contrastive_loss(
    model: &DescriptorModel,
    batch: &ContrastiveBatch,
    src: &RgbImage,
    tgt: &RgbImage,
    margin: f64,
) -> Result<(f64, Vec<f64>)> {
    if batch.matches.is_empty() {
        return Err(Error::Domain("contrastive loss needs at least one match".into()));
    }
    let (ts, tt) = rayon::join(|| model.trace(src), || model.trace(tgt));
    let (ts, tt) = (ts?, tt?);
    let dim = model.dim();
    let at = |t: &Trace, idx: usize| -> Vec<f64> { (0..dim).map(|c| t.output.plane(c)[idx]).collect() };
    let mut loss = 0.0;
    let mut up_s: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut up_t: Vec<(usize, Vec<f64>)> = Vec::new();
    let nm = batch.matches.len() as f64;
    for &(a, b) in &batch.matches {
        let (ds, dt) = (at(&ts, a), at(&tt, b));
        loss += distance_sq(&ds, &dt) / nm;
        let g: Vec<f64> = ds.iter().zip(&dt).map(|(x, y)| 2.0 * (x - y) / nm).collect();
        up_t.push((b, g.iter().map(|v| -v).collect()));
        up_s.push((a, g));
    }
    if !batch.non_matches.is_empty() && margin > 0.0 {
        let nn = batch.non_matches.len() as f64;
        for &(a, b) in &batch.non_matches {
            let (ds, dt) = (at(&ts, a), at(&tt, b));
            let r = distance_sq(&ds, &dt).sqrt();
            if r >= margin {
                continue;
            }
            loss += (margin - r).powi(2) / nn;
            if r == 0.0 {
                continue;
            }
            let k = -2.0 * (margin - r) / (nn * r);
            let g: Vec<f64> = ds.iter().zip(&dt).map(|(x, y)| k * (x - y)).collect();
            up_t.push((b, g.iter().map(|v| -v).collect()));
            up_s.push((a, g));
        }
    }
    let mut grad = vec![0.0; model.params.len()];
    model.backward(&ts, &up_s, &mut grad);
    model.backward(&tt, &up_t, &mut grad);
    Ok((loss, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DescTrainConfig {
    pub steps: usize,
    /// Matches per step, all drawn from one image pair.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub margin: f64,
    pub non_matches: usize,
    /// Non-matches are at least this far (pixels) from the true match.
    pub non_match_min_distance: f64,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for DescTrainConfig {
    fn default() -> Self {
        DescTrainConfig {
            steps: 400,
            batch_size: 64,
            learning_rate: 0.01,
            margin: 0.5,
            non_matches: 4,
            non_match_min_distance: 3.0,
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

/// Nearest in-bounds integer pixel.
fn snap(px: Pixel, width: u32, height: u32) -> usize {
    let (u, v) = px.rounded();
    let u = u.clamp(0, width as i64 - 1) as usize;
    let v = v.clamp(0, height as i64 - 1) as usize;
    v * width as usize + u
}

pub struct DescTrainOutput {
    pub model: DescriptorModel,
    /// Loss of each step, measured before its update.
    pub losses: Vec<f64>,
}

/// Trains a fresh model with Adam. Each step picks a tuple uniformly, then
/// a batch of tuples from the same image pair, and samples non-matches
/// uniformly from the target mask.
pub fn train_descriptors(
    tuples: &[CorrespondenceTuple],
    images: &[PosedImage],
    cfg: &DescTrainConfig,
) -> Result<DescTrainOutput> {
    if tuples.is_empty() {
        return Err(Error::Dataset("no correspondence tuples to train on".into()));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) || !(cfg.margin >= 0.0) {
        return Err(Error::Config("descriptor training needs positive batch size and learning rate".into()));
    }
    let index: BTreeMap<&str, usize> = images.iter().enumerate().map(|(i, im)| (im.id.as_str(), i)).collect();
    let lookup = |id: &str| {
        index
            .get(id)
            .copied()
            .ok_or_else(|| Error::Dataset(format!("tuple references unknown image {id}")))
    };
    let mut groups: BTreeMap<(usize, usize), Vec<(usize, usize)>> = BTreeMap::new();
    let mut group_of = Vec::with_capacity(tuples.len());
    for t in tuples {
        let (s, g) = (lookup(&t.src_id)?, lookup(&t.tgt_id)?);
        let (si, ti) = (&images[s], &images[g]);
        let a = snap(t.u_s, si.intr.width, si.intr.height);
        let b = snap(t.u_t, ti.intr.width, ti.intr.height);
        groups.entry((s, g)).or_default().push((a, b));
        group_of.push((s, g));
    }
    let pools: Vec<Vec<usize>> = images.iter().map(|i| i.mask_indices()).collect();
    let mut model = DescriptorModel::new(&cfg.model, cfg.seed)?;
    let mut descent = Descent::new(UpdateRule::adam(), model.params.len());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = stream_rng(cfg.seed, &[1, step as u64]);
        let key = group_of[rng.gen_range(0..group_of.len())];
        let members = &groups[&key];
        let (s, g) = key;
        let tgt = &images[g];
        let mut batch = ContrastiveBatch::default();
        for _ in 0..cfg.batch_size {
            let (a, b) = members[rng.gen_range(0..members.len())];
            batch.matches.push((a, b));
            let pool = &pools[g];
            let true_px = Pixel::from_index(b, tgt.intr.width);
            for _ in 0..cfg.non_matches {
                for _ in 0..16 {
                    let c = pool[rng.gen_range(0..pool.len())];
                    if Pixel::from_index(c, tgt.intr.width).distance(&true_px) >= cfg.non_match_min_distance {
                        batch.non_matches.push((a, c));
                        break;
                    }
                }
            }
        }
        let (loss, grad) = contrastive_loss(&model, &batch, &images[s].pixels, &tgt.pixels, cfg.margin)?;
        descent.apply(&mut model.params, &grad, cfg.learning_rate);
        model.quantize_to_storage();
        losses.push(loss);
    }
    Ok(DescTrainOutput { model, losses })
}

/// Target pixel whose descriptor is nearest to the source descriptor at
/// `u_s`, searching only the mask when one is given. Ties go to the lowest
/// row-major index.
pub fn best_match(
    desc_s: &DescriptorImage,
    u_s: Pixel,
    desc_t: &DescriptorImage,
    mask_t: Option<&Mask>,
) -> Result<Pixel> {
    let (u, v) = u_s.rounded();
    if !(u_s.u >= -0.5 && u_s.v >= -0.5 && u < desc_s.width as i64 && v < desc_s.height as i64) {
        return Err(Error::InvalidPixel {
            u: u_s.u,
            v: u_s.v,
            width: desc_s.width,
            height: desc_s.height,
        });
    }
    if desc_s.dim != desc_t.dim {
        return Err(Error::Domain("descriptor dimensions differ".into()));
    }
    let query = desc_s.get(u as u32, v as u32);
    let mut best: Option<(usize, f64)> = None;
    for i in 0..desc_t.width as usize * desc_t.height as usize {
        if let Some(m) = mask_t {
            if !m.data[i] {
                continue;
            }
        }
        let d = distance_sq(query, desc_t.at(i));
        if best.map_or(true, |(_, b)| d < b) {
            best = Some((i, d));
        }
    }
    let (i, _) = best.ok_or_else(|| Error::Domain("target mask is empty".into()))?;
    Ok(Pixel::from_index(i, desc_t.width))
}

/// Descriptor images of all images, in order.
pub fn describe_all(model: &DescriptorModel, images: &[PosedImage]) -> Result<Vec<DescriptorImage>> {
    images.par_iter().map(|i| model.forward(&i.pixels)).collect()
}

/// Scores the model's nearest-descriptor matches on annotated pairs.
pub fn evaluate_model(
    model: &DescriptorModel,
    images: &[PosedImage],
    annotations: &[AnnotatedCorrespondence],
) -> Result<EvalResult> {
    let desc = describe_all(model, images)?;
    let index: BTreeMap<&str, usize> = images.iter().enumerate().map(|(i, im)| (im.id.as_str(), i)).collect();
    let find = |id: &str| {
        index
            .get(id)
            .copied()
            .ok_or_else(|| Error::Dataset(format!("annotation references unknown image {id}")))
    };
    evaluate_matcher(annotations, |a| {
        let (s, t) = (find(&a.src_id)?, find(&a.tgt_id)?);
        best_match(&desc[s], a.u_s, &desc[t], images[t].mask.as_ref()).map(Some)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(w: u32, h: u32, phase: f32) -> RgbImage {
        let mut img = RgbImage::new(w, h);
        for (i, p) in img.data.iter_mut().enumerate() {
            let (x, y) = ((i as u32 % w) as f32, (i as u32 / w) as f32);
            *p = [
                0.5 + 0.4 * (0.7 * x + phase).sin(),
                0.5 + 0.4 * (0.5 * y - phase).cos(),
                ((x * 3.0 + y * 5.0) % 7.0) / 7.0,
            ];
        }
        img
    }

    #[test]
    fn forward_preserves_shape_and_is_deterministic() {
        let model = DescriptorModel::new(&ModelConfig::default(), 3).unwrap();
        let img = test_image(12, 9, 0.0);
        let a = model.forward(&img).unwrap();
        assert_eq!((a.width, a.height, a.dim), (12, 9, 3));
        assert_eq!(a, model.forward(&img.clone()).unwrap());
        assert!(a.data.iter().all(|v| v.is_finite()));
        assert!(model.forward(&test_image(6, 9, 0.0)).is_err());
    }

    #[test]
    fn wrap_padding_is_translation_equivariant() {
        let cfg = ModelConfig {
            padding: Padding::Wrap,
            ..Default::default()
        };
        let model = DescriptorModel::new(&cfg, 1).unwrap();
        let img = test_image(10, 8, 0.3);
        let mut shifted = img.clone();
        let (w, h) = (10usize, 8usize);
        for y in 0..h {
            for x in 0..w {
                shifted.data[y * w + (x + 3) % w] = img.data[y * w + x];
            }
        }
        let (a, b) = (model.forward(&img).unwrap(), model.forward(&shifted).unwrap());
        for y in 0..h as u32 {
            for x in 0..w as u32 {
                let (pa, pb) = (a.get(x, y), b.get((x + 3) % w as u32, y));
                for c in 0..3 {
                    assert!((pa[c] - pb[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_padding_is_equivariant_away_from_borders() {
        let model = DescriptorModel::new(&ModelConfig::default(), 2).unwrap();
        let img = test_image(16, 12, 0.1);
        let mut shifted = RgbImage::new(16, 12);
        for y in 0..12usize {
            for x in 0..14usize {
                shifted.data[y * 16 + x + 2] = img.data[y * 16 + x];
            }
        }
        let (a, b) = (model.forward(&img).unwrap(), model.forward(&shifted).unwrap());
        for y in 3..9u32 {
            for x in 3..10u32 {
                for c in 0..3 {
                    assert!((a.get(x, y)[c] - b.get(x + 2, y)[c]).abs() < 1e-12);
                }
            }
        }
    }

    fn tiny_model() -> DescriptorModel {
        let cfg = ModelConfig {
            layers: 2,
            hidden: 3,
            dim: 3,
            padding: Padding::Zero,
        };
        let mut m = DescriptorModel::new(&cfg, 11).unwrap();
        for (i, p) in m.params.iter_mut().enumerate() {
            *p += 0.05 * ((i * 37 % 11) as f64 - 5.0) / 5.0;
        }
        m
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        let model = tiny_model();
        let (a, b) = (test_image(7, 6, 0.0), test_image(7, 6, 0.4));
        let batch = ContrastiveBatch {
            matches: vec![(8, 9), (30, 22)],
            non_matches: vec![(8, 40), (8, 3), (30, 0), (30, 15)],
        };
        let margin = 1.5;
        let (_, g) = contrastive_loss(&model, &batch, &a, &b, margin).unwrap();
        let h = 1e-6;
        for i in 0..model.params.len() {
            let mut m = model.clone();
            m.params[i] += h;
            let lp = contrastive_loss(&m, &batch, &a, &b, margin).unwrap().0;
            m.params[i] -= 2.0 * h;
            let lm = contrastive_loss(&m, &batch, &a, &b, margin).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            let tol = f64::max(1e-6, 1e-3 * fd.abs().max(g[i].abs()));
            assert!((fd - g[i]).abs() <= tol, "param {i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn constant_descriptors_give_margin_squared() {
        let mut model = tiny_model();
        for p in model.params.iter_mut() {
            *p = 0.0;
        }
        let img = test_image(7, 7, 0.0);
        let batch = ContrastiveBatch {
            matches: vec![(1, 2), (3, 4)],
            non_matches: vec![(1, 20), (3, 30), (3, 31)],
        };
        let (l, _) = contrastive_loss(&model, &batch, &img, &img, 0.5).unwrap();
        assert!((l - 0.25).abs() < 1e-15);
        let (l, g) = contrastive_loss(&model, &batch, &img, &img, 0.0).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
        assert!(contrastive_loss(&model, &ContrastiveBatch::default(), &img, &img, 0.5).is_err());
    }

    #[test]
    fn matching_self_ties_and_empty_mask() {
        let model = DescriptorModel::new(&ModelConfig::default(), 5).unwrap();
        let d = model.forward(&test_image(9, 9, 0.2)).unwrap();
        for idx in [0usize, 17, 40, 80] {
            let u = Pixel::from_index(idx, 9);
            assert_eq!(best_match(&d, u, &d, None).unwrap(), u);
        }
        let flat = DescriptorImage {
            width: 4,
            height: 3,
            dim: 3,
            data: vec![0.5; 36],
        };
        let mut mask = Mask::full(4, 3);
        mask.data[0] = false;
        mask.data[1] = false;
        assert_eq!(best_match(&flat, Pixel::new(2.0, 2.0), &flat, Some(&mask)).unwrap(), Pixel::new(2.0, 0.0));
        mask.data.iter_mut().for_each(|m| *m = false);
        assert!(best_match(&flat, Pixel::new(2.0, 2.0), &flat, Some(&mask)).is_err());
        assert!(best_match(&flat, Pixel::new(9.0, 2.0), &flat, None).is_err());
    }

    #[test]
    fn snapshot_round_trip_is_exact() {
        let model = DescriptorModel::new(
            &ModelConfig {
                padding: Padding::Wrap,
                ..Default::default()
            },
            9,
        )
        .unwrap();
        let mut buf = Vec::new();
        model.write_snapshot(&mut buf).unwrap();
        assert_eq!(DescriptorModel::read_snapshot(&mut buf.as_slice()).unwrap(), model);
        buf.push(0);
        assert!(DescriptorModel::read_snapshot(&mut buf.as_slice()).is_err());
    }
}
