//! On-disk dataset layout: one directory per case with raw volumes and masks
//! (x varies fastest) plus `meta.json`, and a `manifest.json` of splits.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{PlusError, Result};
use crate::phantom::{case_seed, generate_case, Condition, GeneratorSpec, Lesion, PatientCase, PatientLabels};
use crate::volume::{flat_index, Mask, Volume};

pub const MANIFEST: &str = "manifest.json";
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMeta {
    pub id: String,
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub lesion_classes: Vec<usize>,
    pub lesion_malignant: Vec<bool>,
    pub labels: PatientLabels,
    pub condition: Condition,
    pub split: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub spec: GeneratorSpec,
    pub splits: BTreeMap<String, Vec<String>>,
}

impl Manifest {
    pub fn split(&self, name: &str) -> Result<&[String]> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| PlusError::Data(format!("dataset has no split named {name:?}")))
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| PlusError::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| PlusError::io(path, e))
}

/// Permutation from storage order (z fastest) to file order (x fastest):
/// `file[i] = storage[order[i]]`.
fn file_order(dims: [usize; 3]) -> impl Iterator<Item = usize> {
    let [nx, ny, nz] = dims;
    (0..nz).flat_map(move |z| (0..ny).flat_map(move |y| (0..nx).map(move |x| flat_index(dims, x, y, z))))
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let data = v.data();
    file_order(v.dims()).flat_map(|i| data[i].to_le_bytes()).collect()
}

pub fn decode_volume(bytes: &[u8], dims: [usize; 3], spacing: [f64; 3]) -> Result<Volume> {
    let n: usize = dims.iter().product();
    if bytes.len() != 4 * n {
        return Err(PlusError::Data(format!("volume file has {} bytes, expected {}", bytes.len(), 4 * n)));
    }
    let mut data = vec![0f32; n];
    for (chunk, i) in bytes.chunks_exact(4).zip(file_order(dims)) {
        data[i] = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
    }
    Volume::new(dims, spacing, data)
}

pub fn encode_mask(m: &Mask) -> Vec<u8> {
    let data = m.data();
    file_order(m.dims()).map(|i| data[i]).collect()
}

pub fn decode_mask(bytes: &[u8], dims: [usize; 3]) -> Result<Mask> {
    let n: usize = dims.iter().product();
    if bytes.len() != n {
        return Err(PlusError::Data(format!("mask file has {} bytes, expected {n}", bytes.len())));
    }
    let mut data = vec![0u8; n];
    for (&b, i) in bytes.iter().zip(file_order(dims)) {
        data[i] = b;
    }
    Mask::new(dims, data)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| PlusError::json(path, e))?;
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| PlusError::json(path, e))
}

pub fn write_case(root: &Path, case: &PatientCase, split: &str) -> Result<PathBuf> {
    let dir = root.join(&case.id);
    fs::create_dir_all(&dir).map_err(|e| PlusError::io(&dir, e))?;
    write_bytes(&dir.join("volume.raw"), &encode_volume(&case.volume))?;
    write_bytes(&dir.join("liver_mask.raw"), &encode_mask(&case.liver))?;
    for (k, l) in case.lesions.iter().enumerate() {
        write_bytes(&dir.join(format!("lesion_{k}.raw")), &encode_mask(&l.mask))?;
    }
    let meta = CaseMeta {
        id: case.id.clone(),
        shape: case.volume.dims(),
        spacing: case.volume.spacing(),
        lesion_classes: case.lesions.iter().map(|l| l.class).collect(),
        lesion_malignant: case.lesions.iter().map(|l| l.malignant).collect(),
        labels: case.labels,
        condition: case.condition,
        split: split.to_string(),
        seed: case.seed,
    };
    write_json(&dir.join("meta.json"), &meta)?;
    Ok(dir)
}

pub fn read_meta(root: &Path, id: &str) -> Result<CaseMeta> {
    read_json(&root.join(id).join("meta.json"))
}

pub fn read_case(root: &Path, id: &str) -> Result<PatientCase> {
    let dir = root.join(id);
    let meta: CaseMeta = read_json(&dir.join("meta.json"))?;
    if meta.lesion_classes.len() != meta.lesion_malignant.len() {
        return Err(PlusError::Data(format!("case {id}: lesion class and malignancy lists differ in length")));
    }
    let volume = decode_volume(&read_bytes(&dir.join("volume.raw"))?, meta.shape, meta.spacing)?;
    let liver = decode_mask(&read_bytes(&dir.join("liver_mask.raw"))?, meta.shape)?;
    let mut lesions = Vec::with_capacity(meta.lesion_classes.len());
    for (k, (&class, &malignant)) in meta.lesion_classes.iter().zip(&meta.lesion_malignant).enumerate() {
        let mask = decode_mask(&read_bytes(&dir.join(format!("lesion_{k}.raw")))?, meta.shape)?;
        if mask.is_empty() || !mask.is_subset_of(&liver) {
            return Err(PlusError::Data(format!("case {id}: lesion {k} is empty or leaves the liver")));
        }
        lesions.push(Lesion { mask, class, malignant });
    }
    Ok(PatientCase {
        id: meta.id,
        volume,
        liver,
        lesions,
        labels: meta.labels,
        condition: meta.condition,
        seed: meta.seed,
    })
}

/// Number of cases per split; rounding leftovers go to the training split.
pub fn split_counts(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let total: f64 = fractions.iter().sum();
    let val = (n as f64 * fractions[1] / total).round() as usize;
    let test = (n as f64 * fractions[2] / total).round() as usize;
    let val = val.min(n);
    let test = test.min(n - val);
    [n - val - test, val, test]
}

/// Split assignment and generator seed for each case of a dataset, in order.
pub fn plan_dataset(n: usize, seed: u64, spec: &GeneratorSpec) -> Vec<(&'static str, u64)> {
    let counts = split_counts(n, spec.split_fractions);
    let mut out = Vec::with_capacity(n);
    for (s, &c) in SPLITS.iter().zip(&counts) {
        for _ in 0..c {
            let i = out.len();
            out.push((*s, case_seed(seed, i)));
        }
    }
    out
}

pub fn generate_dataset(root: &Path, n: usize, seed: u64, spec: &GeneratorSpec) -> Result<Manifest> {
    spec.validate()?;
    fs::create_dir_all(root).map_err(|e| PlusError::io(root, e))?;
    let mut splits: BTreeMap<String, Vec<String>> = SPLITS.iter().map(|s| (s.to_string(), Vec::new())).collect();
    for (split, case_seed) in plan_dataset(n, seed, spec) {
        let case = generate_case(case_seed, spec)?;
        write_case(root, &case, split)?;
        splits.get_mut(split).expect("known split").push(case.id);
    }
    let manifest = Manifest { seed, spec: spec.clone(), splits };
    write_json(&root.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST);
    if !path.exists() {
        return Err(PlusError::Data(format!("no {MANIFEST} in {}", root.display())));
    }
    read_json(&path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_layout_is_x_fastest() {
        let dims = [8, 9, 10];
        let n = 720;
        let v = Volume::new(dims, [1.0; 3], (0..n).map(|i| i as f32).collect()).unwrap();
        let bytes = encode_volume(&v);
        let at = |x: usize, y: usize, z: usize| {
            let i = 4 * (x + 8 * (y + 9 * z));
            f32::from_le_bytes(bytes[i..i + 4].try_into().unwrap())
        };
        assert_eq!(at(1, 0, 0), v.get(1, 0, 0));
        assert_eq!(at(3, 4, 5), v.get(3, 4, 5));
        assert_eq!(decode_volume(&bytes, dims, [1.0; 3]).unwrap(), v);
        let m = Mask::from_fn(dims, |x, y, z| (x + y + z) % 3 == 0);
        assert_eq!(decode_mask(&encode_mask(&m), dims).unwrap(), m);
        assert!(decode_mask(&[0u8; 5], dims).is_err());
    }

    #[test]
    fn split_counts_match_default_fractions() {
        assert_eq!(split_counts(800, [0.75, 0.125, 0.125]), [600, 100, 100]);
        assert_eq!(split_counts(4, [0.75, 0.125, 0.125]), [2, 1, 1]);
        assert_eq!(split_counts(1, [0.75, 0.125, 0.125]), [1, 0, 0]);
    }
}
