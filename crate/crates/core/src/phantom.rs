//! Procedural liver phantoms with typed lesions, and a mock segmentation
//! model that emits candidate masks with (possibly wrong) prior logits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{PlusError, Result};
use crate::losses::ClassKind;
use crate::volume::{flat_index, Mask, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Normal,
    Steatosis,
    Cirrhosis,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Normal, Condition::Steatosis, Condition::Cirrhosis];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Local appearance of one lesion class. Offsets are relative to the
/// surrounding liver intensity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSignature {
    pub kind: ClassKind,
    /// Intensity offset of the lesion core.
    pub offset: f64,
    /// Offset of the outer shell (normalized radius above `rim_start`).
    pub rim_offset: f64,
    pub rim_start: f64,
    /// Amplitude and correlation length (voxels) of internal texture.
    pub texture: f64,
    pub texture_cell: f64,
    /// Width of the boundary transition in normalized radius units.
    pub edge_width: f64,
}

/// Background texture of the liver under one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionTexture {
    pub base: f64,
    /// Correlated texture amplitude and its correlation length (voxels).
    pub texture: f64,
    pub texture_cell: f64,
    /// Uncorrelated per-voxel noise.
    pub speckle: f64,
    /// Relative amplitude of border undulation.
    pub border: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Probability of each condition (normal, steatosis, cirrhosis).
    pub condition_prior: [f64; 3],
    /// Lesion-class distribution under each condition.
    pub class_given_condition: [Vec<f64>; 3],
    pub signatures: Vec<ClassSignature>,
    pub conditions: [ConditionTexture; 3],
    pub max_lesions: usize,
    /// Probability that a case has no lesions at all.
    pub healthy_fraction: f64,
    /// In-plane lesion radius range in voxels.
    pub lesion_radius: [f64; 2],
    /// Liver semi-axes as fractions of the volume extents.
    pub liver_axes: [f64; 3],
    pub outside_intensity: f64,
    pub split_fractions: [f64; 3],
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        use ClassKind::*;
        let sig = |kind, offset, rim_offset, rim_start, texture, texture_cell, edge_width| ClassSignature {
            kind,
            offset,
            rim_offset,
            rim_start,
            texture,
            texture_cell,
            edge_width,
        };
        let shared = sig(Malignant, 0.40, 0.40, 1.0, 0.10, 2.0, 0.35);
        GeneratorSpec {
            dims: [96, 96, 48],
            spacing: [1.0, 1.0, 2.0],
            condition_prior: [1.0 / 3.0; 3],
            class_given_condition: [
                vec![0.05, 0.25, 0.45, 0.25],
                vec![0.25, 0.25, 0.25, 0.25],
                vec![0.45, 0.25, 0.05, 0.25],
            ],
            signatures: vec![
                shared.clone(),
                sig(Malignant, -0.20, 0.50, 0.65, 0.03, 2.0, 0.10),
                ClassSignature { kind: Benign, ..shared },
                sig(Benign, -0.40, -0.40, 1.0, 0.02, 2.0, 0.08),
            ],
            conditions: [
                ConditionTexture { base: 1.0, texture: 0.10, texture_cell: 12.0, speckle: 0.03, border: 0.03 },
                ConditionTexture { base: 0.7, texture: 0.03, texture_cell: 2.0, speckle: 0.10, border: 0.03 },
                ConditionTexture { base: 0.9, texture: 0.10, texture_cell: 4.0, speckle: 0.03, border: 0.14 },
            ],
            max_lesions: 3,
            healthy_fraction: 0.3,
            lesion_radius: [4.0, 7.0],
            liver_axes: [0.38, 0.34, 0.38],
            outside_intensity: 0.5,
            split_fractions: [0.75, 0.125, 0.125],
        }
    }
}

impl GeneratorSpec {
    /// Lesion classes plus the reserved non-lesion class.
    pub fn classes(&self) -> usize {
        self.signatures.len() + 1
    }

    pub fn partition(&self) -> Vec<ClassKind> {
        self.signatures.iter().map(|s| s.kind).chain([ClassKind::NonLesion]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(PlusError::Config(m));
        if self.dims.iter().any(|&d| d < 32) {
            return err(format!("phantom extents must be >= 32, got {:?}", self.dims));
        }
        if self.signatures.len() < 2 {
            return err("need at least two lesion classes".into());
        }
        if self.signatures.iter().any(|s| s.kind == ClassKind::NonLesion) {
            return err("lesion signatures cannot use the non-lesion kind".into());
        }
        let simplex = |v: &[f64]| v.iter().all(|&x| x >= 0.0 && x.is_finite()) && v.iter().sum::<f64>() > 0.0;
        if !simplex(&self.condition_prior) {
            return err("condition prior must be non-negative with positive mass".into());
        }
        for row in &self.class_given_condition {
            if row.len() != self.signatures.len() || !simplex(row) {
                return err(format!("class distribution {row:?} does not match {} classes", self.signatures.len()));
            }
        }
        if !(0.0..=1.0).contains(&self.healthy_fraction) {
            return err("healthy fraction must lie in [0, 1]".into());
        }
        for r in [self.lesion_radius] {
            if !(r[0] >= 1.0 && r[1] >= r[0]) {
                return err(format!("radius range {r:?} is invalid"));
            }
        }
        if !simplex(&self.split_fractions) {
            return err("split fractions must be non-negative with positive mass".into());
        }
        let liver = self.liver_volume_estimate();
        let lesions = self.max_lesions as f64 * self.lesion_volume(self.lesion_radius[1]) * 1.5;
        if lesions > liver {
            return Err(PlusError::Data(format!(
                "{} lesions of radius {} need {lesions:.0} voxels but the liver holds about {liver:.0}",
                self.max_lesions, self.lesion_radius[1]
            )));
        }
        Ok(())
    }

    fn z_scale(&self) -> f64 {
        self.spacing[0] / self.spacing[2]
    }

    fn lesion_volume(&self, r: f64) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * r * r * (r * self.z_scale()).max(1.0)
    }

    fn liver_volume_estimate(&self) -> f64 {
        let a: Vec<f64> = (0..3).map(|i| self.liver_axes[i] * self.dims[i] as f64 * 0.9).collect();
        4.0 / 3.0 * std::f64::consts::PI * a[0] * a[1] * a[2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lesion {
    pub mask: Mask,
    pub class: usize,
    pub malignant: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientLabels {
    /// Has at least one malignant lesion.
    pub malignant: bool,
    /// Has at least one lesion.
    pub any_tumor: bool,
}

impl PatientLabels {
    pub fn from_lesions(lesions: &[Lesion]) -> Self {
        PatientLabels {
            malignant: lesions.iter().any(|l| l.malignant),
            any_tumor: !lesions.is_empty(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientCase {
    pub id: String,
    pub volume: Volume,
    pub liver: Mask,
    pub lesions: Vec<Lesion>,
    pub labels: PatientLabels,
    pub condition: Condition,
    pub seed: u64,
}

impl PatientCase {
    /// Has at least one benign lesion (counted independently of malignancy).
    pub fn has_benign(&self, partition: &[ClassKind]) -> bool {
        self.lesions.iter().any(|l| partition.get(l.class) == Some(&ClassKind::Benign))
    }
}

fn pick(rng: &mut impl Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Smooth random field with unit standard deviation and the given
/// correlation length, by trilinear interpolation of a coarse Gaussian lattice.
fn value_noise(dims: [usize; 3], cell: f64, rng: &mut impl Rng) -> Vec<f64> {
    let n = dims.iter().product::<usize>();
    let normal = Normal::new(0.0, 1.0).expect("valid");
    if cell <= 1.0 {
        return (0..n).map(|_| normal.sample(rng)).collect();
    }
    let g = dims.map(|d| (d as f64 / cell).ceil() as usize + 2);
    let lattice: Vec<f64> = (0..g[0] * g[1] * g[2]).map(|_| normal.sample(rng)).collect();
    let at = |i: usize, j: usize, k: usize| lattice[(i * g[1] + j) * g[2] + k];
    let mut out = Vec::with_capacity(n);
    for x in 0..dims[0] {
        let fx = x as f64 / cell;
        let (ix, tx) = (fx.floor() as usize, fx.fract());
        for y in 0..dims[1] {
            let fy = y as f64 / cell;
            let (iy, ty) = (fy.floor() as usize, fy.fract());
            for z in 0..dims[2] {
                let fz = z as f64 / cell;
                let (iz, tz) = (fz.floor() as usize, fz.fract());
                let mut acc = 0.0;
                for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
                    for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
                        for (dz, wz) in [(0, 1.0 - tz), (1, tz)] {
                            acc += wx * wy * wz * at(ix + dx, iy + dy, iz + dz);
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    let mean = out.iter().sum::<f64>() / n as f64;
    let std = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt().max(1e-12);
    out.iter_mut().for_each(|v| *v = (*v - mean) / std);
    out
}

/// Radial undulation `1 + amp * s(theta, phi)` from a few random low-order harmonics.
struct Undulation {
    terms: Vec<(f64, f64, f64, f64)>,
    amp: f64,
}

impl Undulation {
    fn new(rng: &mut impl Rng, amp: f64, harmonics: usize) -> Self {
        let terms = (0..harmonics)
            .map(|h| {
                let order = (h + 2) as f64;
                (order, rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(1.0..3.0), rng.random_range(-1.0..1.0))
            })
            .collect();
        Undulation { terms, amp: amp / (harmonics.max(1) as f64).sqrt() }
    }

    /// Upper bound on `|at(dir) - 1|`.
    fn max_deviation(&self) -> f64 {
        self.amp * 1.5 * self.terms.len() as f64
    }

    fn at(&self, dir: [f64; 3]) -> f64 {
        let theta = dir[1].atan2(dir[0]);
        let elev = dir[2].clamp(-1.0, 1.0);
        let s: f64 = self
            .terms
            .iter()
            .map(|&(order, phase, k, w)| (order * theta + phase).sin() * (1.0 + 0.5 * (k * elev + w).cos()))
            .sum();
        1.0 + self.amp * s
    }
}

/// Normalized radius of point `p` in an undulating ellipsoid; `<= 1` is inside.
fn ellipsoid_rho(p: [f64; 3], center: [f64; 3], axes: [f64; 3], und: &Undulation) -> f64 {
    let d = [0, 1, 2].map(|i| (p[i] - center[i]) / axes[i]);
    let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if r == 0.0 {
        return 0.0;
    }
    r / und.at(d.map(|v| v / r))
}

/// Membership test equivalent to `ellipsoid_rho(..) <= 1` that skips the
/// undulation wherever the plain radius already decides it.
fn inside_ellipsoid(p: [f64; 3], center: [f64; 3], axes: [f64; 3], und: &Undulation) -> bool {
    let d = [0, 1, 2].map(|i| (p[i] - center[i]) / axes[i]);
    let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    let dev = und.max_deviation();
    if r <= 1.0 - dev {
        return true;
    }
    if r > 1.0 + dev {
        return false;
    }
    ellipsoid_rho(p, center, axes, und) <= 1.0
}

struct Blob {
    center: [f64; 3],
    axes: [f64; 3],
    und: Undulation,
}

impl Blob {
    fn sample(rng: &mut impl Rng, radius: [f64; 2], z_scale: f64, vox: &[[usize; 3]]) -> Option<Self> {
        if vox.is_empty() {
            return None;
        }
        let c = vox[rng.random_range(0..vox.len())];
        let r = rng.random_range(radius[0]..=radius[1]);
        let axes = [r * rng.random_range(0.85..1.15), r * rng.random_range(0.85..1.15), (r * z_scale).max(1.2)];
        let und = Undulation::new(rng, 0.08, 3);
        Some(Blob { center: c.map(|v| v as f64), axes, und })
    }

    fn rho(&self, p: [f64; 3]) -> f64 {
        ellipsoid_rho(p, self.center, self.axes, &self.und)
    }

    fn bounds(&self, dims: [usize; 3]) -> [(usize, usize); 3] {
        [0, 1, 2].map(|i| {
            let ext = self.axes[i] * 1.6 + 1.0;
            let lo = (self.center[i] - ext).floor().max(0.0) as usize;
            let hi = ((self.center[i] + ext).ceil() as usize + 1).min(dims[i]);
            (lo, hi)
        })
    }

    fn mask(&self, dims: [usize; 3]) -> Mask {
        let mut m = Mask::empty(dims);
        let b = self.bounds(dims);
        for x in b[0].0..b[0].1 {
            for y in b[1].0..b[1].1 {
                for z in b[2].0..b[2].1 {
                    if self.rho([x as f64, y as f64, z as f64]) <= 1.0 {
                        m.set(x, y, z, true);
                    }
                }
            }
        }
        m
    }
}

/// Largest 26-connected component of a mask.
pub fn largest_component(m: &Mask) -> Mask {
    let d = m.dims();
    let mut label = vec![0u32; m.data().len()];
    let mut best = (0usize, 0u32);
    let mut next = 0u32;
    for start in m.voxels() {
        let si = flat_index(d, start[0], start[1], start[2]);
        if label[si] != 0 {
            continue;
        }
        next += 1;
        label[si] = next;
        let mut stack = vec![start];
        let mut size = 0;
        while let Some(p) = stack.pop() {
            size += 1;
            for dx in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dz in -1i64..=1 {
                        let q = [p[0] as i64 + dx, p[1] as i64 + dy, p[2] as i64 + dz];
                        if (0..3).any(|a| q[a] < 0 || q[a] >= d[a] as i64) {
                            continue;
                        }
                        let q = q.map(|v| v as usize);
                        let qi = flat_index(d, q[0], q[1], q[2]);
                        if m.data()[qi] == 1 && label[qi] == 0 {
                            label[qi] = next;
                            stack.push(q);
                        }
                    }
                }
            }
        }
        if size > best.0 {
            best = (size, next);
        }
    }
    let mut out = Mask::empty(d);
    for (i, &l) in label.iter().enumerate() {
        if l != 0 && l == best.1 {
            let z = i % d[2];
            let y = (i / d[2]) % d[1];
            let x = i / (d[1] * d[2]);
            out.set(x, y, z, true);
        }
    }
    out
}

const PLACEMENT_TRIES: usize = 200;
/// In-plane radius range of false-positive candidate blobs, in voxels.
const FP_RADIUS: [f64; 2] = [3.0, 5.0];

/// Deterministic phantom for `seed`.
pub fn generate_case(seed: u64, spec: &GeneratorSpec) -> Result<PatientCase> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = spec.dims;
    let condition = Condition::ALL[pick(&mut rng, &spec.condition_prior)];
    let tex = &spec.conditions[condition.index()];

    let center = [0, 1, 2].map(|i| dims[i] as f64 / 2.0 + rng.random_range(-0.05..0.05) * dims[i] as f64);
    let axes = [0, 1, 2].map(|i| spec.liver_axes[i] * dims[i] as f64 * rng.random_range(0.92..1.05));
    let border = Undulation::new(&mut rng, tex.border, 4);
    let liver = Mask::from_fn(dims, |x, y, z| inside_ellipsoid([x as f64, y as f64, z as f64], center, axes, &border));

    let texture = value_noise(dims, tex.texture_cell, &mut rng);
    let speckle = value_noise(dims, 1.0, &mut rng);
    let background = value_noise(dims, 6.0, &mut rng);
    let mut data: Vec<f32> = (0..liver.data().len())
        .map(|i| {
            if liver.data()[i] == 1 {
                (tex.base + tex.texture * texture[i] + tex.speckle * speckle[i]) as f32
            } else {
                (spec.outside_intensity + 0.08 * background[i]) as f32
            }
        })
        .collect();

    let count = if spec.max_lesions == 0 || rng.random::<f64>() < spec.healthy_fraction {
        0
    } else {
        rng.random_range(1..=spec.max_lesions)
    };
    let class_weights = &spec.class_given_condition[condition.index()];
    let partition = spec.partition();
    let mut lesions: Vec<Lesion> = Vec::with_capacity(count);
    let mut occupied = Mask::empty(dims);
    let core = liver.erode();
    let core_voxels = core.voxels();
    for _ in 0..count {
        let class = pick(&mut rng, class_weights);
        let sig = &spec.signatures[class];
        let mut placed = None;
        for _ in 0..PLACEMENT_TRIES {
            let Some(blob) = Blob::sample(&mut rng, spec.lesion_radius, spec.z_scale(), &core_voxels) else { break };
            let mask = largest_component(&blob.mask(dims));
            if !mask.is_empty() && mask.is_subset_of(&core) && mask.intersection_count(&occupied) == 0 {
                placed = Some((blob, mask));
                break;
            }
        }
        let (blob, mask) = placed.ok_or_else(|| {
            PlusError::Data(format!("could not place {count} lesions inside the liver of case seed {seed}"))
        })?;
        let inner = value_noise_local(&blob, dims, sig.texture_cell, &mut rng);
        paint_lesion(&mut data, dims, &blob, &mask, sig, &inner);
        // keep a two-voxel gap between lesions
        occupied.union_with(&mask.dilate().dilate());
        lesions.push(Lesion { mask, class, malignant: partition[class] == ClassKind::Malignant });
    }

    let volume = Volume::new(dims, spec.spacing, data)?;
    let labels = PatientLabels::from_lesions(&lesions);
    Ok(PatientCase {
        id: format!("case_{seed:016x}"),
        volume,
        liver,
        lesions,
        labels,
        condition,
        seed,
    })
}

/// Unit-std texture over the blob's bounding box, stored as a map from the
/// box-local index.
fn value_noise_local(blob: &Blob, dims: [usize; 3], cell: f64, rng: &mut impl Rng) -> Vec<f64> {
    let b = blob.bounds(dims);
    let local = [b[0].1 - b[0].0, b[1].1 - b[1].0, b[2].1 - b[2].0];
    value_noise(local, cell, rng)
}

fn paint_lesion(data: &mut [f32], dims: [usize; 3], blob: &Blob, mask: &Mask, sig: &ClassSignature, inner: &[f64]) {
    let b = blob.bounds(dims);
    let local = [b[0].1 - b[0].0, b[1].1 - b[1].0, b[2].1 - b[2].0];
    for x in b[0].0..b[0].1 {
        for y in b[1].0..b[1].1 {
            for z in b[2].0..b[2].1 {
                let rho = blob.rho([x as f64, y as f64, z as f64]);
                // transition from lesion to liver centered on the boundary, but
                // never leaking outside the mask dilated by a voxel
                let w = 1.0 / (1.0 + ((rho - 1.0) / sig.edge_width.max(1e-3) * 4.0).exp());
                if w < 1e-3 || (rho > 1.0 && !mask_near(mask, x, y, z)) {
                    continue;
                }
                let shell = 1.0 / (1.0 + (-(rho - sig.rim_start) * 25.0).exp());
                let offset = sig.offset + (sig.rim_offset - sig.offset) * shell;
                let li = ((x - b[0].0) * local[1] + (y - b[1].0)) * local[2] + (z - b[2].0);
                let i = flat_index(dims, x, y, z);
                data[i] += (w * (offset + sig.texture * inner[li])) as f32;
            }
        }
    }
}

fn mask_near(m: &Mask, x: usize, y: usize, z: usize) -> bool {
    let d = m.dims();
    for dx in -1i64..=1 {
        for dy in -1i64..=1 {
            for dz in -1i64..=1 {
                let q = [x as i64 + dx, y as i64 + dy, z as i64 + dz];
                if (0..3).all(|a| q[a] >= 0 && q[a] < d[a] as i64) && m.get(q[0] as usize, q[1] as usize, q[2] as usize) {
                    return true;
                }
            }
        }
    }
    false
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Corruption {
    pub mask_jitter: usize,
    pub logit_accuracy: f64,
    /// Expected false-positive candidates per case.
    pub fp_rate: f64,
    /// Probability of dropping each true lesion.
    pub fn_rate: f64,
}

impl Default for Corruption {
    fn default() -> Self {
        Corruption { mask_jitter: 1, logit_accuracy: 0.7, fp_rate: 0.5, fn_rate: 0.05 }
    }
}

impl Corruption {
    pub fn none() -> Self {
        Corruption { mask_jitter: 0, logit_accuracy: 1.0, fp_rate: 0.0, fn_rate: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("logit accuracy", self.logit_accuracy), ("fn rate", self.fn_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(PlusError::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.fp_rate >= 0.0 && self.fp_rate.is_finite()) {
            return Err(PlusError::Config(format!("fp rate must be >= 0, got {}", self.fp_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub mask: Mask,
    pub logits: Vec<f64>,
    pub matched: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PriorSet {
    pub candidates: Vec<Candidate>,
}

impl PriorSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Logits whose argmax is `class` with a margin drawn from `[1, 3]` over the runner-up.
fn prior_logits(rng: &mut impl Rng, classes: usize, class: usize) -> Vec<f64> {
    let mut logits: Vec<f64> = (0..classes).map(|_| rng.random_range(-1.0..0.0)).collect();
    let runner_up = (0..classes).filter(|&c| c != class).map(|c| logits[c]).fold(f64::NEG_INFINITY, f64::max);
    let margin = rng.random_range(1.0..=3.0);
    logits[class] = if runner_up.is_finite() { runner_up + margin } else { margin };
    logits
}

fn jitter(rng: &mut impl Rng, mask: &Mask, max_steps: usize) -> Mask {
    if max_steps == 0 {
        return mask.clone();
    }
    let steps = rng.random_range(-(max_steps as i64)..=max_steps as i64);
    let mut m = mask.clone();
    for _ in 0..steps.unsigned_abs() {
        let next = if steps > 0 { m.dilate() } else { m.erode() };
        if next.is_empty() {
            break;
        }
        m = next;
    }
    m
}

/// Emulated segmentation output for a case. Deterministic in `(case, seed)`.
pub fn mock_prior_provider(case: &PatientCase, corruption: &Corruption, classes: usize, seed: u64) -> Result<PriorSet> {
    corruption.validate()?;
    if case.lesions.iter().any(|l| l.class + 1 >= classes) {
        return Err(PlusError::Contract(format!("lesion class outside [0, {})", classes - 1)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ case.seed.rotate_left(17) ^ 0x5052_494f_5253);
    let mut candidates = Vec::new();
    for (k, lesion) in case.lesions.iter().enumerate() {
        if rng.random::<f64>() < corruption.fn_rate {
            continue;
        }
        let mask = jitter(&mut rng, &lesion.mask, corruption.mask_jitter);
        let class = if rng.random::<f64>() < corruption.logit_accuracy {
            lesion.class
        } else {
            let wrong = rng.random_range(0..classes - 1);
            if wrong >= lesion.class {
                wrong + 1
            } else {
                wrong
            }
        };
        candidates.push(Candidate { mask, logits: prior_logits(&mut rng, classes, class), matched: Some(k) });
    }
    let fp = if corruption.fp_rate > 0.0 {
        Poisson::new(corruption.fp_rate).expect("positive rate").sample(&mut rng) as usize
    } else {
        0
    };
    let mut blocked = Mask::empty(case.volume.dims());
    for l in &case.lesions {
        blocked.union_with(&l.mask.dilate().dilate());
    }
    let core = case.liver.erode();
    let core_voxels = core.voxels();
    let z_scale = case.volume.spacing()[0] / case.volume.spacing()[2];
    for _ in 0..fp {
        for _ in 0..PLACEMENT_TRIES {
            let Some(blob) = Blob::sample(&mut rng, FP_RADIUS, z_scale, &core_voxels) else { break };
            let mask = largest_component(&blob.mask(case.volume.dims()));
            if !mask.is_empty() && mask.is_subset_of(&core) && mask.intersection_count(&blocked) == 0 {
                let class = rng.random_range(0..classes);
                blocked.union_with(&mask.dilate());
                candidates.push(Candidate { mask, logits: prior_logits(&mut rng, classes, class), matched: None });
                break;
            }
        }
    }
    Ok(PriorSet { candidates })
}

/// Seed of the `index`-th case of a dataset generated from `seed`.
pub fn case_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
