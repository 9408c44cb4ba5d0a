//! On-disk dataset layout.
//!
//! ```text
//! root/
//!   manifest.json            spec, keypoint vertices, record ids per split
//!   <split>/<id>.png         image
//!   <split>/<id>_mask.png    mask
//!   <split>/<id>.json        sidecar: label, camera, keypoints, file names
//!   <split>/<id>_deform.json free deformation rows
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    archetypes, farthest_point_sample, render_instance, sample_instance, Instance, ShapeBasis, SynthSpec,
};
use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::image_io;
use crate::model::nets::Template;
use crate::par;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;
pub const SPLITS: [&str; 2] = ["train", "test"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub vertex: usize,
    /// Pixel coordinates; pixel `(r, c)` is centered at `(x, y) = (c, r)`.
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub spec: SynthSpec,
    pub keypoint_vertices: Vec<usize>,
    pub splits: BTreeMap<String, Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    id: String,
    label: usize,
    /// `(s, tx, ty, w, x, y, z)`.
    camera: [f64; 7],
    image: String,
    mask: String,
    deformation: String,
    keypoints: Vec<Keypoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DeformFile {
    mesh_level: u32,
    free: Vec<[f64; 3]>,
}

/// One loaded record.
#[derive(Clone, Debug)]
pub struct Record {
    pub id: String,
    pub label: usize,
    /// `[H, W, 3]` in `[0, 1]`.
    pub image: Tensor,
    /// `[H, W]` in `{0, 1}`.
    pub mask: Tensor,
    pub camera: CameraPose,
    /// Free deformation rows relative to the scaled template sphere.
    pub deform: Tensor,
    pub keypoints: Vec<Keypoint>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        context: path.display().to_string(),
        source: e,
    })?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        context: path.display().to_string(),
        source: e,
    })
}

fn rows(t: &Tensor) -> Vec<[f64; 3]> {
    t.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

/// Labels, cameras and deformations of every record, without rendering.
pub fn plan(spec: &SynthSpec, template: &Template) -> Result<Vec<(String, Vec<Instance>)>> {
    spec.validate()?;
    let basis = ShapeBasis::new(&template.mesh, (*template.symmetry).clone());
    let arch = archetypes(spec, &basis)?;
    let mut index = 0u64;
    let mut out = Vec::new();
    for (split, per_class) in SPLITS.iter().zip([spec.train_per_class, spec.test_per_class]) {
        let n = per_class * spec.num_classes;
        let mut insts = Vec::with_capacity(n);
        for i in 0..n {
            insts.push(sample_instance(spec, &basis, &arch, i % spec.num_classes, index)?);
            index += 1;
        }
        out.push((split.to_string(), insts));
    }
    Ok(out)
}

/// Generates the dataset described by `spec` under `root`.
///
/// The manifest is written last, so its presence marks a complete dataset.
pub fn generate(spec: &SynthSpec, root: &Path) -> Result<Manifest> {
    let template = Template::new(spec.mesh_level)?;
    let planned = plan(spec, &template)?;
    let keypoint_vertices = farthest_point_sample(&template.mesh.vertices, spec.num_keypoints);
    let mut splits = BTreeMap::new();
    for (split, insts) in planned {
        let dir = root.join(&split);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let ids: Vec<String> = (0..insts.len()).map(|i| format!("{i:05}")).collect();
        let results = par::map_range(insts.len(), |i| -> Result<()> {
            let mut inst = insts[i].clone();
            // Render with exactly the pose a reader will reconstruct.
            inst.camera = CameraPose::from_seven(&inst.camera.to_seven())?;
            let r = render_instance(spec, &template, &inst, &keypoint_vertices)?;
            let id = &ids[i];
            let side = Sidecar {
                id: id.clone(),
                label: inst.label,
                camera: inst.camera.to_seven(),
                image: format!("{id}.png"),
                mask: format!("{id}_mask.png"),
                deformation: format!("{id}_deform.json"),
                keypoints: r.keypoints,
            };
            image_io::write_rgb(&dir.join(&side.image), &r.image)?;
            image_io::write_gray(&dir.join(&side.mask), &r.mask)?;
            write_json(
                &dir.join(&side.deformation),
                &DeformFile {
                    mesh_level: spec.mesh_level,
                    free: rows(&inst.deform),
                },
            )?;
            write_json(&dir.join(format!("{id}.json")), &side)
        });
        results.into_iter().collect::<Result<Vec<()>>>()?;
        splits.insert(split, ids);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        spec: spec.clone(),
        keypoint_vertices,
        splits,
    };
    write_json(&root.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// A dataset directory with its manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(&root.join(MANIFEST))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::DataValidation(format!(
                "dataset format {} is not supported (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        manifest
            .spec
            .validate()
            .map_err(|e| Error::DataValidation(format!("manifest spec: {e}")))?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.spec.num_classes
    }

    pub fn ids(&self, split: &str) -> Result<&[String]> {
        self.manifest
            .splits
            .get(split)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::DataValidation(format!("dataset has no split `{split}`")))
    }

    /// Loads and validates every record of `split`, in manifest order.
    pub fn load(&self, split: &str) -> Result<Vec<Record>> {
        let ids = self.ids(split)?;
        let dir = self.root.join(split);
        let spec = &self.manifest.spec;
        let num_free = Template::new(spec.mesh_level)?.num_free();
        par::map_slice(ids, |id| -> Result<Record> {
            let side: Sidecar = read_json(&dir.join(format!("{id}.json")))?;
            let image = image_io::read_rgb(&dir.join(&side.image))?;
            let mask = image_io::read_mask(&dir.join(&side.mask))?;
            let deform: DeformFile = read_json(&dir.join(&side.deformation))?;
            let n = spec.image_size;
            let bad = |m: String| Err(Error::DataValidation(format!("{split}/{id}: {m}")));
            if image.shape() != [n, n, 3] || mask.shape() != [n, n] {
                return bad(format!("expected {n}x{n} image and mask"));
            }
            if mask.sum() == 0.0 {
                return bad("empty mask".into());
            }
            if side.label >= spec.num_classes {
                return bad(format!("label {} out of range", side.label));
            }
            if deform.free.len() != num_free || deform.mesh_level != spec.mesh_level {
                return bad("deformation does not match the template".into());
            }
            Ok(Record {
                id: side.id,
                label: side.label,
                image,
                mask,
                camera: CameraPose::from_seven(&side.camera)?,
                deform: Tensor::new(&[num_free, 3], deform.free.iter().flatten().copied().collect())?,
                keypoints: side.keypoints,
            })
        })
        .into_iter()
        .collect()
    }
}

/// Validates a standalone image/mask pair for fitting.
pub fn check_pair(image: &Tensor, mask: &Tensor) -> Result<()> {
    let (h, w) = match *image.shape() {
        [h, w, 3] => (h, w),
        _ => return Err(Error::DataValidation(format!("image has shape {:?}", image.shape()))),
    };
    if mask.shape() != [h, w] {
        return Err(Error::DataValidation(format!(
            "mask shape {:?} does not match image {h}x{w}",
            mask.shape()
        )));
    }
    if mask.sum() == 0.0 {
        return Err(Error::DataValidation("mask is empty".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera;
    use crate::renderer::RasterConfig;
    use crate::synth::{gt_vertices, oracle};

    fn small() -> SynthSpec {
        SynthSpec {
            num_classes: 2,
            train_per_class: 3,
            test_per_class: 1,
            mesh_level: 2,
            image_size: 24,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn generate_load_and_regenerate() {
        let spec = small();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let m = generate(&spec, a.path()).unwrap();
        assert_eq!(m.splits["train"].len(), 6);
        assert_eq!(m.splits["test"].len(), 2);
        generate(&spec, b.path()).unwrap();
        for split in SPLITS {
            for id in &m.splits[split] {
                for suffix in [".png", "_mask.png", ".json", "_deform.json"] {
                    let name = format!("{split}/{id}{suffix}");
                    assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap(), "{name}");
                }
            }
        }
        assert_eq!(fs::read(a.path().join(MANIFEST)).unwrap(), fs::read(b.path().join(MANIFEST)).unwrap());

        let ds = Dataset::open(a.path()).unwrap();
        let train = ds.load("train").unwrap();
        let labels: Vec<usize> = train.iter().map(|r| r.label).collect();
        assert_eq!(labels, vec![0, 1, 0, 1, 0, 1]);
        // Re-rendering the stored ground truth reproduces the stored mask.
        let template = Template::new(spec.mesh_level).unwrap();
        let cfg = RasterConfig::with_size(24, 24);
        for r in &train {
            let proj = camera::project(&r.camera, &gt_vertices(&template, &r.deform).unwrap()).unwrap();
            let hr = oracle::hard_rasterize(&proj, &template.faces, None, &cfg);
            assert_eq!(hr.mask, r.mask, "{}", r.id);
            assert_eq!(r.keypoints.len(), 12);
        }
        assert!(matches!(ds.load("val"), Err(Error::DataValidation(_))));
    }

    #[test]
    fn empty_mask_is_rejected() {
        let spec = small();
        let dir = tempfile::tempdir().unwrap();
        generate(&spec, dir.path()).unwrap();
        image_io::write_gray(&dir.path().join("test/00000_mask.png"), &Tensor::zeros(&[24, 24])).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert!(ds.load("train").is_ok());
        assert!(matches!(ds.load("test"), Err(Error::DataValidation(_))));
        assert!(check_pair(&Tensor::zeros(&[4, 4, 3]), &Tensor::zeros(&[4, 4])).is_err());
    }
}
