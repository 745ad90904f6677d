//! Registration pairs on disk: synthetic dataset generation and loading.
//!
//! A dataset directory holds MVOL volumes plus a `manifest.json` listing
//! the files of each pair. Only `fixed` and `moving` are required.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{warp, warp_labels, DeformationField, Interp};
use crate::mvol::{read_field, read_labels, read_volume, write_mvol};
use crate::synth::{gen_phantom, gen_smooth_field, map_landmarks_to_moving};
use crate::volume::{LabelMap, LandmarkSet, Volume};

/// One fixed/moving pair with optional segmentations and landmarks.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub name: String,
    pub fixed: Volume,
    pub moving: Volume,
    pub seg_fixed: Option<LabelMap>,
    pub seg_moving: Option<LabelMap>,
    pub landmarks_fixed: Option<LandmarkSet>,
    pub landmarks_moving: Option<LandmarkSet>,
}

impl Pair {
    pub fn new(name: impl Into<String>, fixed: Volume, moving: Volume) -> Self {
        Self {
            name: name.into(),
            fixed,
            moving,
            seg_fixed: None,
            seg_moving: None,
            landmarks_fixed: None,
            landmarks_moving: None,
        }
    }

    /// Both segmentations with their shared label count.
    pub fn segs(&self) -> Option<(&LabelMap, &LabelMap, usize)> {
        match (&self.seg_fixed, &self.seg_moving) {
            (Some(f), Some(m)) => Some((f, m, f.n_labels().max(m.n_labels()) as usize)),
            _ => None,
        }
    }

    pub fn landmarks(&self) -> Option<(&LandmarkSet, &LandmarkSet)> {
        self.landmarks_fixed.as_ref().zip(self.landmarks_moving.as_ref())
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.fixed.shape();
        if self.moving.shape() != shape {
            return Err(Error::shape(format!("{}: fixed {shape:?} vs moving {:?}", self.name, self.moving.shape())));
        }
        for s in [&self.seg_fixed, &self.seg_moving].into_iter().flatten() {
            if s.shape() != shape {
                return Err(Error::shape(format!("{}: segmentation {:?} vs image {shape:?}", self.name, s.shape())));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairFiles {
    pub fixed: String,
    pub moving: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seg_fixed: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seg_moving: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_field: Option<String>,
}

/// Generation parameters recorded for synthetic datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthParams {
    pub n: usize,
    pub size: usize,
    pub labels: usize,
    pub max_disp: f64,
    pub sigma: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SynthParams>,
    pub pairs: Vec<PairFiles>,
}

/// `landmarks_i.json` contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandmarkPair {
    pub fixed: LandmarkSet,
    pub moving: LandmarkSet,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Phantom pair `i` of a synthetic dataset, plus its ground-truth field.
/// The moving image is the fixed phantom resampled through the field, so the
/// ideal registration field is the field's inverse.
pub fn synth_pair(p: &SynthParams, i: usize) -> Result<(Pair, DeformationField)> {
    let mut seeds = ChaCha8Rng::seed_from_u64(p.seed);
    let mut pick = || seeds.random::<u64>();
    let (mut phantom_seed, mut field_seed) = (0, 0);
    for _ in 0..=i {
        phantom_seed = pick();
        field_seed = pick();
    }
    let size = [p.size; 3];
    let ph = gen_phantom(phantom_seed, size, p.labels)?;
    let gt = gen_smooth_field(field_seed, size, p.max_disp, p.sigma)?;
    let moving = warp(&ph.image, &gt, Interp::Trilinear)?;
    let seg_moving = warp_labels(&ph.labels, &gt)?;
    let lm_moving = map_landmarks_to_moving(&ph.landmarks, &gt);
    let pair = Pair {
        name: format!("pair_{i}"),
        fixed: ph.image,
        moving,
        seg_fixed: Some(ph.labels),
        seg_moving: Some(seg_moving),
        landmarks_fixed: Some(ph.landmarks),
        landmarks_moving: Some(lm_moving),
    };
    Ok((pair, gt))
}

/// Write a synthetic dataset to `out`; returns its manifest.
pub fn gen_data(out: &Path, p: &SynthParams) -> Result<DatasetManifest> {
    if p.n == 0 {
        return Err(Error::invalid("dataset needs at least one pair"));
    }
    if p.size < 5 {
        return Err(Error::invalid(format!("size must be >= 5, got {}", p.size)));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut pairs = Vec::with_capacity(p.n);
    for i in 0..p.n {
        let (pair, gt) = synth_pair(p, i)?;
        let files = PairFiles {
            fixed: format!("fixed_{i}.mvol"),
            moving: format!("moving_{i}.mvol"),
            seg_fixed: Some(format!("seg_fixed_{i}.mvol")),
            seg_moving: Some(format!("seg_moving_{i}.mvol")),
            landmarks: Some(format!("landmarks_{i}.json")),
            gt_field: Some(format!("gt_field_{i}.mvol")),
        };
        write_mvol(out.join(&files.fixed), pair.fixed)?;
        write_mvol(out.join(&files.moving), pair.moving)?;
        write_mvol(out.join(files.seg_fixed.as_ref().unwrap()), pair.seg_fixed.unwrap())?;
        write_mvol(out.join(files.seg_moving.as_ref().unwrap()), pair.seg_moving.unwrap())?;
        let lm = LandmarkPair { fixed: pair.landmarks_fixed.unwrap(), moving: pair.landmarks_moving.unwrap() };
        write_json(&out.join(files.landmarks.as_ref().unwrap()), &lm)?;
        write_mvol(out.join(files.gt_field.as_ref().unwrap()), gt)?;
        pairs.push(files);
    }
    let manifest = DatasetManifest { synthetic: Some(p.clone()), pairs };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn read_dataset_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let de = &mut serde_json::Deserializer::from_slice(&text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::config(e.path().to_string(), e.inner().to_string()))
}

pub fn load_pair(dir: &Path, name: String, files: &PairFiles) -> Result<Pair> {
    let at = |f: &String| -> PathBuf { dir.join(f) };
    let mut pair = Pair::new(name, read_volume(at(&files.fixed))?, read_volume(at(&files.moving))?);
    pair.seg_fixed = files.seg_fixed.as_ref().map(|f| read_labels(at(f))).transpose()?;
    pair.seg_moving = files.seg_moving.as_ref().map(|f| read_labels(at(f))).transpose()?;
    if let Some(f) = &files.landmarks {
        let path = at(f);
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let lm: LandmarkPair = serde_json::from_slice(&text)
            .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        pair.landmarks_fixed = Some(LandmarkSet::new(lm.fixed.points)?);
        pair.landmarks_moving = Some(LandmarkSet::new(lm.moving.points)?);
    }
    pair.validate()?;
    Ok(pair)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Pair>> {
    let manifest = read_dataset_manifest(dir)?;
    if manifest.pairs.is_empty() {
        return Err(Error::invalid(format!("{}: dataset has no pairs", dir.display())));
    }
    manifest
        .pairs
        .iter()
        .enumerate()
        .map(|(i, files)| load_pair(dir, format!("pair_{i}"), files))
        .collect()
}

/// Ground-truth field of pair `i`, if the manifest lists one.
pub fn load_gt_field(dir: &Path, files: &PairFiles) -> Result<Option<DeformationField>> {
    files.gt_field.as_ref().map(|f| read_field(dir.join(f))).transpose()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(n: usize, max_disp: f64) -> SynthParams {
        SynthParams { n, size: 16, labels: 3, max_disp, sigma: 3.0, seed: 5 }
    }

    #[test]
    fn gen_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = gen_data(dir.path(), &params(2, 2.0)).unwrap();
        assert_eq!(m.pairs.len(), 2);
        for f in &m.pairs {
            for name in [&f.fixed, &f.moving, f.landmarks.as_ref().unwrap(), f.gt_field.as_ref().unwrap()] {
                assert!(dir.path().join(name).exists());
            }
        }
        let pairs = load_dataset(dir.path()).unwrap();
        let (expect, _) = synth_pair(&params(2, 2.0), 1).unwrap();
        assert_eq!(pairs[1].fixed, expect.fixed);
        assert_eq!(pairs[1].moving, expect.moving);
        assert_eq!(pairs[1].segs().unwrap().2, 3);
        assert_ne!(pairs[0].fixed, pairs[1].fixed);
    }

    #[test]
    fn same_seed_same_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        gen_data(a.path(), &params(1, 2.0)).unwrap();
        gen_data(b.path(), &params(1, 2.0)).unwrap();
        for f in ["fixed_0.mvol", "moving_0.mvol", "seg_moving_0.mvol", "landmarks_0.json", "gt_field_0.mvol", "manifest.json"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn zero_displacement_copies_fixed() {
        let (p, gt) = synth_pair(&params(1, 0.0), 0).unwrap();
        assert_eq!(gt.max_abs(), 0.0);
        assert_eq!(p.moving, p.fixed);
        assert_eq!(p.seg_moving, p.seg_fixed);
        assert_eq!(p.landmarks_moving, p.landmarks_fixed);
    }

    #[test]
    fn missing_manifest_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Io { .. })));
    }
}
