//! Dataset manifests and annotation files.
//!
//! A manifest is a JSON document listing posed images:
//!
//! ```json
//! {
//!   "version": 1,
//!   "convention": "camera-to-world; camera x right, y down, z forward",
//!   "intrinsics": {"fx": 60, "fy": 60, "cx": 23.5, "cy": 23.5, "width": 48, "height": 48},
//!   "bounds": {"min": [-1, -1, -1], "max": [1, 1, 1]},
//!   "images": [
//!     {"id": "000", "image": "images/000.png", "pose": [1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, -3, 0, 0, 0, 1],
//!      "mask": "masks/000.png", "sparse_depth": [{"u": 10, "v": 12, "depth": 2.9}]}
//!   ]
//! }
//! ```
//!
//! Paths are relative to the manifest. Poses are 4×4 row-major. Per-image
//! `intrinsics` override the shared ones. Sparse depth entries are either
//! `{u, v, depth}` (z-depth) or `{u, v, kx, ky, kz}` (world keypoint).

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalsynth::AnnotatedCorrespondence;
use crate::field::Aabb;
use crate::geometry::{CameraIntrinsics, Pixel, Pose, Vec3};
use crate::optimizer::{PosedImage, SparseDepthPoint};
use crate::raster::{Mask, RgbImage};
use crate::rng::stream_rng;

pub const MANIFEST_VERSION: u32 = 1;
pub const POSE_CONVENTION: &str =
    "camera-to-world 4x4 row-major; camera x right, y down, z forward; pixel centers at integer coordinates";
/// Orthonormality tolerance applied to poses read from disk.
pub const POSE_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    #[serde(default)]
    pub convention: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intrinsics: Option<CameraIntrinsics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Aabb>,
    pub images: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub pose: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intrinsics: Option<CameraIntrinsics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sparse_depth: Vec<SparseDepthEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum SparseDepthEntry {
    Depth { u: f64, v: f64, depth: f64 },
    Keypoint { u: f64, v: f64, kx: f64, ky: f64, kz: f64 },
}

/// Posed images plus the scene bounds, if the manifest gives them.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<PosedImage>,
    pub bounds: Option<Aabb>,
}

impl Dataset {
    pub fn get(&self, id: &str) -> Option<&PosedImage> {
        self.images.iter().find(|i| i.id == id)
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported manifest version {}", manifest.version),
        ));
    }
    Ok(manifest)
}

fn load_entry(
    base: &Path,
    shared: Option<&CameraIntrinsics>,
    entry: &ManifestEntry,
) -> Result<PosedImage> {
    let id = &entry.id;
    let context = |e: Error| Error::Dataset(format!("image {id}: {e}"));
    let values: &[f64; 16] = entry.pose.as_slice().try_into().map_err(|_| {
        Error::Dataset(format!("image {id}: pose has {} values, expected 16", entry.pose.len()))
    })?;
    let pose = Pose::from_row_major(values, POSE_TOLERANCE).map_err(context)?;
    let intr = *entry
        .intrinsics
        .as_ref()
        .or(shared)
        .ok_or_else(|| Error::Dataset(format!("image {id}: no intrinsics")))?;
    let pixels = RgbImage::load(base.join(&entry.image)).map_err(context)?;
    let mask = match &entry.mask {
        Some(m) => Some(Mask::load(base.join(m)).map_err(context)?),
        None => None,
    };
    let sparse_depth = entry
        .sparse_depth
        .iter()
        .map(|s| match *s {
            SparseDepthEntry::Depth { u, v, depth } => SparseDepthPoint::new(id.clone(), Pixel::new(u, v), depth),
            SparseDepthEntry::Keypoint { u, v, kx, ky, kz } => {
                SparseDepthPoint::from_keypoint(id.clone(), Pixel::new(u, v), Vec3::new(kx, ky, kz), &pose)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let image = PosedImage {
        id: id.clone(),
        pixels,
        intr,
        pose,
        mask,
        sparse_depth,
    };
    image.validate()?;
    Ok(image)
}

/// Loads and validates every entry, returning images sorted by id.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let manifest = read_manifest(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    if let Some(b) = &manifest.bounds {
        b.validate().map_err(|e| Error::format(path, e.to_string()))?;
    }
    let mut ids: Vec<&str> = manifest.images.iter().map(|e| e.id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::format(path, format!("duplicate image id {}", w[0])));
    }
    let mut images = manifest
        .images
        .par_iter()
        .map(|e| load_entry(base, manifest.intrinsics.as_ref(), e))
        .collect::<Result<Vec<_>>>()?;
    images.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(Dataset {
        images,
        bounds: manifest.bounds,
    })
}

/// Creates `path` and holds an exclusive lock on it while `write` runs.
pub fn write_locked(path: &Path, write: impl FnOnce(&mut BufWriter<&File>) -> std::io::Result<()>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    file.lock().map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(&file);
    write(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Writes the dataset as `manifest.json` plus `images/` and `masks/` PNGs
/// under `dir`, returning the manifest path.
pub fn save_manifest(dir: impl AsRef<Path>, dataset: &Dataset) -> Result<PathBuf> {
    let dir = dir.as_ref();
    for sub in ["images", "masks"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let shared = dataset.images.first().map(|i| i.intr);
    let mut entries = Vec::with_capacity(dataset.images.len());
    for img in &dataset.images {
        let image = PathBuf::from(format!("images/{}.png", img.id));
        img.pixels.save(dir.join(&image))?;
        let mask = match &img.mask {
            Some(m) => {
                let p = PathBuf::from(format!("masks/{}.png", img.id));
                m.save(dir.join(&p))?;
                Some(p)
            }
            None => None,
        };
        let sparse_depth = img
            .sparse_depth
            .iter()
            .map(|s| match s.keypoint_world {
                Some(k) => SparseDepthEntry::Keypoint {
                    u: s.pixel.u,
                    v: s.pixel.v,
                    kx: k.x,
                    ky: k.y,
                    kz: k.z,
                },
                None => SparseDepthEntry::Depth {
                    u: s.pixel.u,
                    v: s.pixel.v,
                    depth: s.depth_gt,
                },
            })
            .collect();
        entries.push(ManifestEntry {
            id: img.id.clone(),
            image,
            pose: img.pose.to_row_major().to_vec(),
            intrinsics: (Some(img.intr) != shared).then_some(img.intr),
            mask,
            sparse_depth,
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        convention: POSE_CONVENTION.into(),
        intrinsics: shared,
        bounds: dataset.bounds,
        images: entries,
    };
    let path = dir.join("manifest.json");
    write_locked(&path, |w| {
        serde_json::to_writer_pretty(&mut *w, &manifest)?;
        writeln!(w)
    })?;
    Ok(path)
}

/// Seeded random split into `(train, test)`, each kept in input order.
pub fn holdout_split(images: &[PosedImage], n_test: usize, seed: u64) -> Result<(Vec<PosedImage>, Vec<PosedImage>)> {
    if n_test >= images.len() {
        return Err(Error::Config(format!(
            "cannot hold out {n_test} of {} images",
            images.len()
        )));
    }
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut stream_rng(seed, &[0x686f6c64]));
    let mut is_test = vec![false; images.len()];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let (test, train): (Vec<_>, Vec<_>) = images.iter().cloned().zip(is_test).partition(|(_, t)| *t);
    Ok((
        train.into_iter().map(|(i, _)| i).collect(),
        test.into_iter().map(|(i, _)| i).collect(),
    ))
}

pub const ANNOTATION_CSV_HEADER: [&str; 6] = ["src_id", "u_s", "v_s", "tgt_id", "u_t", "v_t"];

pub fn save_annotations(path: impl AsRef<Path>, annotations: &[AnnotatedCorrespondence]) -> Result<()> {
    let path = path.as_ref();
    write_locked(path, |w| {
        writeln!(w, "{}", ANNOTATION_CSV_HEADER.join(","))?;
        for a in annotations {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                a.src_id, a.u_s.u, a.u_s.v, a.tgt_id, a.u_t_gt.u, a.u_t_gt.v
            )?;
        }
        Ok(())
    })
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotatedCorrespondence>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let header = reader.headers().map_err(|e| Error::format(path, e.to_string()))?;
    if header.iter().ne(ANNOTATION_CSV_HEADER) {
        return Err(Error::format(path, format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let bad = |msg: String| Error::format(path, format!("row {}: {msg}", line + 1));
        let record = record.map_err(|e| bad(e.to_string()))?;
        let num = |i: usize| -> Result<f64> {
            record[i]
                .parse::<f64>()
                .map_err(|e| bad(format!("column {}: {e}", ANNOTATION_CSV_HEADER[i])))
        };
        out.push(AnnotatedCorrespondence {
            src_id: record[0].to_string(),
            u_s: Pixel::new(num(1)?, num(2)?),
            tgt_id: record[3].to_string(),
            u_t_gt: Pixel::new(num(4)?, num(5)?),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalsynth::{annotate, FixtureSpec};

    fn small_dataset(cameras: usize) -> (crate::evalsynth::SyntheticDataset, Dataset) {
        let synth = FixtureSpec::named("slab", 0, Some(cameras)).unwrap().render().unwrap();
        let ds = Dataset {
            images: synth.images.clone(),
            bounds: Some(synth.spec.scene.bbox),
        };
        (synth, ds)
    }

    #[test]
    fn manifest_round_trip_is_exact() {
        let (_, ds) = small_dataset(3);
        let dir = tempfile::tempdir().unwrap();
        let path = save_manifest(dir.path(), &ds).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back, ds);
        assert!(back.images.iter().all(|i| !i.sparse_depth.is_empty() && i.mask.is_some()));
    }

    #[test]
    fn minimal_manifest_with_depth_points() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = RgbImage::new(4, 3);
        img.data[5] = [1.0, 0.0, 0.0];
        img.save(dir.path().join("a.ppm")).unwrap();
        img.save(dir.path().join("b.png")).unwrap();
        let json = r#"{
            "version": 1,
            "intrinsics": {"fx": 2, "fy": 2, "cx": 1.5, "cy": 1, "width": 4, "height": 3},
            "images": [
              {"id": "b", "image": "b.png", "pose": [1,0,0,0, 0,1,0,0, 0,0,1,-2, 0,0,0,1],
               "sparse_depth": [{"u": 1, "v": 1, "kx": 0, "ky": 0, "kz": 0.5}]},
              {"id": "a", "image": "a.ppm", "pose": [1,0,0,0, 0,1,0,0, 0,0,1,0, 0,0,0,1],
               "sparse_depth": [{"u": 1, "v": 2, "depth": 3.5}]}
            ]
        }"#;
        let path = dir.path().join("m.json");
        fs::write(&path, json).unwrap();
        let ds = load_manifest(&path).unwrap();
        assert_eq!(ds.images.len(), 2);
        assert_eq!(ds.images[0].id, "a");
        assert_eq!(ds.images[0].pixels, img);
        assert_eq!(ds.images[0].sparse_depth[0].depth_gt, 3.5);
        assert!((ds.images[1].sparse_depth[0].depth_gt - 2.5).abs() < 1e-15);
        assert!(ds.bounds.is_none());
    }

    fn rewrite(path: &Path, edit: impl FnOnce(&mut DatasetManifest)) {
        let mut m = read_manifest(path).unwrap();
        edit(&mut m);
        fs::write(path, serde_json::to_string(&m).unwrap()).unwrap();
    }

    #[test]
    fn load_errors_name_the_entry() {
        let (_, ds) = small_dataset(3);
        let dir = tempfile::tempdir().unwrap();
        let path = save_manifest(dir.path(), &ds).unwrap();
        rewrite(&path, |m| m.images[1].pose[0] = 1.01);
        let msg = load_manifest(&path).unwrap_err().to_string();
        assert!(msg.contains("image 001") && msg.contains("orthonormal"), "{msg}");

        let path = save_manifest(dir.path(), &ds).unwrap();
        rewrite(&path, |m| m.images[2].image = "images/missing.png".into());
        let msg = load_manifest(&path).unwrap_err().to_string();
        assert!(msg.contains("image 002") && msg.contains("missing.png"), "{msg}");

        let path = save_manifest(dir.path(), &ds).unwrap();
        rewrite(&path, |m| m.images[0].intrinsics = Some(CameraIntrinsics::centered(60.0, 40, 48).unwrap()));
        let msg = load_manifest(&path).unwrap_err().to_string();
        assert!(msg.contains("image 000"), "{msg}");

        let path = save_manifest(dir.path(), &ds).unwrap();
        rewrite(&path, |m| m.images[2].id = "000".into());
        assert!(load_manifest(&path).unwrap_err().to_string().contains("duplicate"));

        assert!(load_manifest(dir.path().join("nope.json")).is_err());
    }

    #[test]
    fn loading_does_not_touch_files() {
        let (_, ds) = small_dataset(2);
        let dir = tempfile::tempdir().unwrap();
        let path = save_manifest(dir.path(), &ds).unwrap();
        let before = fs::read(&path).unwrap();
        load_manifest(&path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), before);
    }

    #[test]
    fn holdout_split_is_seeded_disjoint_and_exhaustive() {
        let (_, ds) = small_dataset(60);
        let (train, test) = holdout_split(&ds.images, 8, 3).unwrap();
        assert_eq!((train.len(), test.len()), (52, 8));
        let mut ids: Vec<_> = train.iter().chain(&test).map(|i| i.id.clone()).collect();
        ids.sort();
        assert_eq!(ids, ds.images.iter().map(|i| i.id.clone()).collect::<Vec<_>>());
        assert_eq!(holdout_split(&ds.images, 8, 3).unwrap().1, test);
        assert_ne!(holdout_split(&ds.images, 8, 4).unwrap().1, test);
        assert!(holdout_split(&ds.images, 0, 3).unwrap().1.is_empty());
        assert!(holdout_split(&ds.images, 60, 3).is_err());
    }

    #[test]
    fn annotations_round_trip() {
        let (synth, ds) = small_dataset(4);
        let ann = annotate(&synth.spec.scene, &ds.images, 25, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.csv");
        save_annotations(&path, &ann).unwrap();
        assert_eq!(load_annotations(&path).unwrap(), ann);
        fs::write(&path, "a,b\n1,2\n").unwrap();
        assert!(load_annotations(&path).is_err());
    }
}
