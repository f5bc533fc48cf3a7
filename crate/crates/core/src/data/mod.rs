//! Datasets of paired RGB/depth samples: synthetic generation, PNG
//! directory layout I/O, and the spurious/redundant injection transforms.

mod inject;
mod noise;
mod png_io;
mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

pub use inject::{foreground_mask, inject_redundant, inject_spurious, otsu_threshold};
pub use noise::perlin_noise;
pub use png_io::{read_depth, read_mask, read_rgb, write_depth, write_mask, write_rgb};
pub use synth::{generate_synthetic_dataset, SynthConfig};

use crate::error::{Error, Result};
use crate::mfen::MultimodalSample;

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectData {
    pub name: String,
    pub train: Vec<MultimodalSample>,
    pub test: Vec<MultimodalSample>,
}

/// Objects in a fixed order; a sample's `object_id` is its object's index.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub objects: Vec<ObjectData>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn hw(&self) -> Option<(usize, usize)> {
        self.objects
            .iter()
            .flat_map(|o| o.train.iter().chain(&o.test))
            .map(MultimodalSample::hw)
            .next()
    }

    pub fn names(&self) -> Vec<&str> {
        self.objects.iter().map(|o| o.name.as_str()).collect()
    }

    /// Applies `f` to every train and test sample.
    pub fn map_samples(&mut self, mut f: impl FnMut(&MultimodalSample) -> Result<MultimodalSample>) -> Result<()> {
        for o in &mut self.objects {
            for s in o.train.iter_mut().chain(o.test.iter_mut()) {
                *s = f(s)?;
            }
        }
        Ok(())
    }
}

const SPLITS: [&str; 2] = ["train", "test"];
const CLASSES: [&str; 2] = ["good", "defect"];

/// Writes `<root>/<object>/<train|test>/<good|defect>/{rgb,depth,mask}_####.png`.
/// Test samples always get a mask file, empty when the sample has none.
pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    for o in &ds.objects {
        for (split, samples) in SPLITS.iter().zip([&o.train, &o.test]) {
            let mut counters = [0usize; 2];
            for s in samples {
                let class = usize::from(s.is_anomalous);
                let dir = root.join(&o.name).join(split).join(CLASSES[class]);
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let i = counters[class];
                counters[class] += 1;
                write_rgb(&dir.join(format!("rgb_{i:04}.png")), &s.rgb)?;
                write_depth(&dir.join(format!("depth_{i:04}.png")), &s.depth)?;
                if *split == "test" {
                    let (h, w) = s.hw();
                    let mask = s
                        .anomaly_mask
                        .clone()
                        .unwrap_or_else(|| crate::tensor::Tensor::zeros(&[1, h, w]));
                    write_mask(&dir.join(format!("mask_{i:04}.png")), &mask)?;
                }
            }
        }
    }
    Ok(())
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    v.sort();
    Ok(v)
}

/// Splits `rgb_0003.png` into `("rgb", "0003")`.
fn parse_name(p: &Path) -> Option<(&str, &str)> {
    let stem = p.file_name()?.to_str()?.strip_suffix(".png")?;
    stem.split_once('_')
}

fn load_class_dir(dir: &Path, object_id: usize, anomalous: bool, is_test: bool) -> Result<Vec<MultimodalSample>> {
    let mut groups: BTreeMap<String, [Option<PathBuf>; 3]> = BTreeMap::new();
    let mut stray = Vec::new();
    for p in sorted_entries(dir)? {
        match parse_name(&p) {
            Some((kind, idx)) if ["rgb", "depth", "mask"].contains(&kind) => {
                let slot = ["rgb", "depth", "mask"].iter().position(|k| *k == kind).unwrap();
                groups.entry(idx.to_string()).or_default()[slot] = Some(p.clone());
            }
            _ => stray.push(p),
        }
    }
    if !stray.is_empty() {
        return Err(Error::ingestion("unrecognized files", stray));
    }
    let mut orphans = Vec::new();
    for (idx, [rgb, depth, mask]) in &groups {
        let need_mask = is_test && anomalous;
        match (rgb, depth) {
            (Some(_), Some(_)) => {}
            (Some(_), None) => orphans.push(dir.join(format!("depth_{idx}.png"))),
            (None, Some(_)) => orphans.push(dir.join(format!("rgb_{idx}.png"))),
            (None, None) => orphans.extend(mask.clone()),
        }
        if need_mask && mask.is_none() {
            orphans.push(dir.join(format!("mask_{idx}.png")));
        }
    }
    if !orphans.is_empty() {
        return Err(Error::ingestion("missing paired files", orphans));
    }
    let mut out = Vec::with_capacity(groups.len());
    for [rgb, depth, mask] in groups.into_values() {
        let (rgb_p, depth_p) = (rgb.unwrap(), depth.unwrap());
        let rgb = read_rgb(&rgb_p)?;
        let depth = read_depth(&depth_p)?;
        if rgb.hw() != depth.hw() {
            return Err(Error::ingestion("rgb/depth size mismatch", vec![rgb_p, depth_p]));
        }
        let mask = match mask {
            Some(mp) => {
                let m = read_mask(&mp)?;
                if m.hw() != rgb.hw() {
                    return Err(Error::ingestion("mask size mismatch", vec![rgb_p, mp]));
                }
                Some(m)
            }
            None => None,
        };
        let sample = MultimodalSample::new(rgb, depth, object_id, mask, anomalous)
            .map_err(|e| Error::ingestion(e.to_string(), vec![rgb_p.clone()]))?;
        out.push(sample);
    }
    Ok(out)
}

/// Reads the directory layout produced by [`write_dataset`]. Objects are
/// ordered by directory name.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::ingestion("dataset root is not a directory", vec![root.to_path_buf()]));
    }
    let dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if dirs.is_empty() {
        return Err(Error::ingestion("no objects", vec![root.to_path_buf()]));
    }
    let mut objects = Vec::with_capacity(dirs.len());
    let mut hw = None;
    for (id, dir) in dirs.iter().enumerate() {
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let mut splits = [Vec::new(), Vec::new()];
        for (k, split) in SPLITS.iter().enumerate() {
            for (c, class) in CLASSES.iter().enumerate() {
                let d = dir.join(split).join(class);
                if d.is_dir() {
                    splits[k].extend(load_class_dir(&d, id, c == 1, k == 1)?);
                }
            }
        }
        let [train, test] = splits;
        if train.is_empty() {
            return Err(Error::ingestion("object has no training samples", vec![dir.clone()]));
        }
        for s in train.iter().chain(&test) {
            match hw {
                None => hw = Some(s.hw()),
                Some(x) if x != s.hw() => {
                    return Err(Error::ingestion(
                        format!("image size {:?} differs from {:?}", s.hw(), x),
                        vec![dir.clone()],
                    ))
                }
                _ => {}
            }
        }
        objects.push(ObjectData { name, train, test });
    }
    Ok(Dataset { objects })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        generate_synthetic_dataset(&SynthConfig {
            n_objects: 2,
            per_object_train: 2,
            per_object_test: 4,
            image_hw: 32,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn roundtrip_is_lossless() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.names(), ds.names());
        for (a, b) in back.objects.iter().zip(&ds.objects) {
            assert_eq!(a.train, b.train);
            let mut expected = b.test.clone();
            expected.sort_by_key(|s| s.is_anomalous);
            assert_eq!(a.test, expected);
        }
    }

    #[test]
    fn missing_depth_is_named() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let victim = dir.path().join(&ds.objects[1].name).join("train/good/depth_0001.png");
        fs::remove_file(&victim).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Ingestion { paths, .. }) => assert_eq!(paths, vec![victim]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_directory_has_no_objects() {
        let dir = tempfile::tempdir().unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Ingestion { message, .. }) => assert_eq!(message, "no objects"),
            other => panic!("{other:?}"),
        }
    }
}
