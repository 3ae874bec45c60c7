//! Directory datasets: `images/NAME.ppm` with annotator maps in
//! `gt/NAME/*.pgm`.

use super::{epfm, netpbm};
use crate::pipeline::EdgeMap;
use crate::error::{Error, Result};
use crate::eval::BinaryMap;
use crate::tensor::Tensor;
use crate::training::{consensus_labels, AnnotationStack, Sample};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug)]
pub struct Item {
    pub name: String,
    pub image: Tensor,
    pub annotators: Vec<BinaryMap>,
}

impl Item {
    pub fn sample(&self, eta: f64, ignore_band: bool) -> Result<Sample> {
        let (h, w) = (self.image.shape()[1], self.image.shape()[2]);
        let stack = AnnotationStack::new(h, w, self.annotators.iter().map(|a| a.data.clone()).collect())?;
        Ok(Sample {
            image: self.image.clone(),
            labels: consensus_labels(&stack, eta, ignore_band)?,
        })
    }
}

/// Files in `dir` with one of `exts`, sorted by name.
pub fn list_files(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_file() && p.extension().and_then(|e| e.to_str()).is_some_and(|e| exts.contains(&e)) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Annotator maps of `name` under `gt`: every PGM in `gt/name/`, or the
/// single file `gt/name.pgm`.
pub fn load_annotators(gt: &Path, name: &str) -> Result<Vec<BinaryMap>> {
    let sub = gt.join(name);
    let maps = if sub.is_dir() {
        list_files(&sub, &["pgm"])?
            .iter()
            .map(|p| netpbm::load_binary(p))
            .collect::<Result<Vec<_>>>()?
    } else {
        let single = gt.join(format!("{name}.pgm"));
        if !single.is_file() {
            return Err(Error::Input(format!("no ground truth for {name} in {}", gt.display())));
        }
        vec![netpbm::load_binary(&single)?]
    };
    if maps.is_empty() {
        return Err(Error::Input(format!("{} holds no annotator maps", sub.display())));
    }
    Ok(maps)
}

/// Predictions in `pred` (`NAME.epfm` or 8-bit `NAME.pgm`; a raw map
/// shadows an 8-bit map of the same name) paired with their annotator
/// maps under `gt`.
pub fn load_predictions(pred: &Path, gt: &Path) -> Result<Vec<(EdgeMap, Vec<BinaryMap>)>> {
    let mut files = list_files(pred, &["epfm", "pgm"])?;
    files.retain(|f| f.extension().is_some_and(|e| e == "epfm") || !f.with_extension("epfm").is_file());
    if files.is_empty() {
        return Err(Error::Usage(format!("no predictions in {}", pred.display())));
    }
    files
        .iter()
        .map(|f| {
            let map = if f.extension().is_some_and(|e| e == "epfm") {
                epfm::load(f)?
            } else {
                netpbm::load_edge_map(f)?
            };
            Ok((map, load_annotators(gt, &stem(f))?))
        })
        .collect()
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Item>> {
    let images = list_files(&dir.join("images"), &["ppm", "pgm"])?;
    if images.is_empty() {
        return Err(Error::Input(format!("no images in {}", dir.join("images").display())));
    }
    images
        .iter()
        .map(|p| {
            let name = stem(p);
            let image = netpbm::load_image(p)?;
            let annotators = load_annotators(&dir.join("gt"), &name)?;
            let (h, w) = (image.shape()[1], image.shape()[2]);
            if annotators.iter().any(|a| (a.height, a.width) != (h, w)) {
                return Err(Error::shape("annotators", &[h, w], &[annotators[0].height, annotators[0].width]));
            }
            Ok(Item { name, image, annotators })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::synth;

    #[test]
    fn synthetic_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        synth::gen_synthetic(dir.path(), 3, 11, 32).unwrap();
        let items = load_dataset(dir.path()).unwrap();
        let scenes = synth::gen_scenes(3, 11, 32).unwrap();
        assert_eq!(items.len(), 3);
        for (it, sc) in items.iter().zip(&scenes) {
            assert_eq!(it.annotators, sc.annotators);
            let err = it.image.data().iter().zip(sc.image.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 0.5 / 255.0 + 1e-12);
            let s = it.sample(0.3, false).unwrap();
            let want = netpbm::load_binary(&dir.path().join("labels").join(format!("{}.pgm", it.name))).unwrap();
            let got: Vec<bool> = s.labels.data.iter().map(|l| *l == crate::training::Label::Positive).collect();
            assert_eq!(got, want.data);
        }
    }
}
