//! Voxel grids and binary masks. Storage is `[X][Y][Z]` with Z contiguous.

use plus_autodiff::{Scalar, Tensor};

use crate::error::{PlusError, Result};

/// Smallest permitted extent of a [`Volume`] along any axis.
pub const MIN_EXTENT: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    dims: [usize; 3],
    data: Vec<u8>,
}

pub fn flat_index(dims: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    (x * dims[1] + y) * dims[2] + z
}

fn voxel_count(dims: [usize; 3]) -> usize {
    dims.iter().product()
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d < MIN_EXTENT) {
            return Err(PlusError::Data(format!(
                "volume extents must be >= {MIN_EXTENT}, got {dims:?}"
            )));
        }
        if data.len() != voxel_count(dims) {
            return Err(PlusError::Data(format!(
                "volume {dims:?} needs {} voxels, got {}",
                voxel_count(dims),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(PlusError::Data("volume has non-finite intensities".into()));
        }
        Ok(Volume { dims, spacing, data })
    }

    pub fn zeros(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Self::new(dims, spacing, vec![0.0; voxel_count(dims)])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[flat_index(self.dims, x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f32) {
        let i = flat_index(self.dims, x, y, z);
        self.data[i] = v;
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(&self.dims, self.data.iter().map(|&v| T::c(v as f64)).collect())
            .expect("dims match data")
    }
}

impl Mask {
    pub fn new(dims: [usize; 3], data: Vec<u8>) -> Result<Self> {
        if data.len() != voxel_count(dims) {
            return Err(PlusError::Data(format!(
                "mask {dims:?} needs {} voxels, got {}",
                voxel_count(dims),
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(PlusError::Data("mask values must be 0 or 1".into()));
        }
        Ok(Mask { dims, data })
    }

    pub fn empty(dims: [usize; 3]) -> Self {
        Mask { dims, data: vec![0; voxel_count(dims)] }
    }

    pub fn full(dims: [usize; 3]) -> Self {
        Mask { dims, data: vec![1; voxel_count(dims)] }
    }

    pub fn from_fn(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> bool) -> Self {
        let mut m = Mask::empty(dims);
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    if f(x, y, z) {
                        m.data[flat_index(dims, x, y, z)] = 1;
                    }
                }
            }
        }
        m
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[flat_index(self.dims, x, y, z)] == 1
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, on: bool) {
        let i = flat_index(self.dims, x, y, z);
        self.data[i] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Every set voxel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.dims == other.dims && self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    pub fn intersection_count(&self, other: &Mask) -> usize {
        self.data.iter().zip(&other.data).filter(|(&a, &b)| a == 1 && b == 1).count()
    }

    pub fn union_with(&mut self, other: &Mask) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
    }

    pub fn iou(&self, other: &Mask) -> f64 {
        let inter = self.intersection_count(other);
        let union = self.count() + other.count() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Coordinates of every set voxel, in storage order.
    pub fn voxels(&self) -> Vec<[usize; 3]> {
        let [_, ny, nz] = self.dims;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1)
            .map(|(i, _)| [i / (ny * nz), (i / nz) % ny, i % nz])
            .collect()
    }

    /// Floor of the mean set-voxel coordinate; `None` for an empty mask.
    pub fn centroid(&self) -> Option<[usize; 3]> {
        let vox = self.voxels();
        if vox.is_empty() {
            return None;
        }
        let n = vox.len();
        let mut sum = [0usize; 3];
        for v in &vox {
            for a in 0..3 {
                sum[a] += v[a];
            }
        }
        Some([sum[0] / n, sum[1] / n, sum[2] / n])
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(&self.dims, self.data.iter().map(|&v| T::c(v as f64)).collect())
            .expect("dims match data")
    }

    /// 6-connected dilation by one voxel.
    pub fn dilate(&self) -> Mask {
        self.morph(true)
    }

    /// 6-connected erosion by one voxel.
    pub fn erode(&self) -> Mask {
        self.morph(false)
    }

    fn morph(&self, dilate: bool) -> Mask {
        let d = self.dims;
        let (sx, sy) = (d[1] * d[2], d[2]);
        let src = &self.data;
        let mut out = vec![0u8; src.len()];
        let mut i = 0;
        for x in 0..d[0] {
            for y in 0..d[1] {
                for z in 0..d[2] {
                    let here = src[i] == 1;
                    let v = if dilate {
                        here
                            || (x > 0 && src[i - sx] == 1)
                            || (x + 1 < d[0] && src[i + sx] == 1)
                            || (y > 0 && src[i - sy] == 1)
                            || (y + 1 < d[1] && src[i + sy] == 1)
                            || (z > 0 && src[i - 1] == 1)
                            || (z + 1 < d[2] && src[i + 1] == 1)
                    } else {
                        // the outside of the volume counts as empty
                        here
                            && x > 0
                            && x + 1 < d[0]
                            && y > 0
                            && y + 1 < d[1]
                            && z > 0
                            && z + 1 < d[2]
                            && src[i - sx] == 1
                            && src[i + sx] == 1
                            && src[i - sy] == 1
                            && src[i + sy] == 1
                            && src[i - 1] == 1
                            && src[i + 1] == 1
                    };
                    out[i] = v as u8;
                    i += 1;
                }
            }
        }
        Mask { dims: d, data: out }
    }
}

/// Voxelwise gating `v * m`.
pub fn mask_apply(v: &Volume, m: &Mask) -> Result<Volume> {
    if v.dims != m.dims {
        return Err(PlusError::Tensor(plus_autodiff::Error::Shape {
            op: "mask_apply",
            lhs: v.dims.to_vec(),
            rhs: m.dims.to_vec(),
        }));
    }
    let data = v.data.iter().zip(&m.data).map(|(&a, &b)| if b == 1 { a } else { 0.0 }).collect();
    Ok(Volume { dims: v.dims, spacing: v.spacing, data })
}

/// Corner of a `size` ROI whose center voxel (`size / 2`) sits on `center`.
pub fn roi_origin(center: [usize; 3], size: [usize; 3]) -> [isize; 3] {
    [0, 1, 2].map(|a| center[a] as isize - (size[a] / 2) as isize)
}

/// Fixed-size ROI centered on the mask centroid; cells outside the volume are 0.
pub fn extract_roi(v: &Volume, m: &Mask, size: [usize; 3]) -> Result<(Volume, Mask)> {
    if v.dims != m.dims {
        return Err(PlusError::Tensor(plus_autodiff::Error::Shape {
            op: "extract_roi",
            lhs: v.dims.to_vec(),
            rhs: m.dims.to_vec(),
        }));
    }
    let center = m
        .centroid()
        .ok_or_else(|| PlusError::Contract("extract_roi on an empty mask".into()))?;
    let origin = roi_origin(center, size);
    let mut vol = vec![0.0f32; voxel_count(size)];
    let mut mask = vec![0u8; voxel_count(size)];
    for a in 0..size[0] {
        for b in 0..size[1] {
            for c in 0..size[2] {
                let src = [a as isize + origin[0], b as isize + origin[1], c as isize + origin[2]];
                if (0..3).all(|i| src[i] >= 0 && (src[i] as usize) < v.dims[i]) {
                    let s = flat_index(v.dims, src[0] as usize, src[1] as usize, src[2] as usize);
                    let d = flat_index(size, a, b, c);
                    vol[d] = v.data[s];
                    mask[d] = m.data[s];
                }
            }
        }
    }
    Ok((Volume { dims: size, spacing: v.spacing, data: vol }, Mask { dims: size, data: mask }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 3]) -> Volume {
        let n = voxel_count(dims);
        Volume::new(dims, [1.0; 3], (0..n).map(|i| i as f32 + 1.0).collect()).unwrap()
    }

    #[test]
    fn mask_apply_cases() {
        let v = ramp([8, 8, 8]);
        assert_eq!(mask_apply(&v, &Mask::full(v.dims())).unwrap(), v);
        assert!(mask_apply(&v, &Mask::empty(v.dims())).unwrap().data().iter().all(|&x| x == 0.0));
        let mut m = Mask::empty(v.dims());
        m.set(3, 4, 5, true);
        let out = mask_apply(&v, &m).unwrap();
        let nonzero: Vec<_> = out.data().iter().enumerate().filter(|(_, &x)| x != 0.0).collect();
        assert_eq!(nonzero.len(), 1);
        assert_eq!(out.get(3, 4, 5), v.get(3, 4, 5));
        assert!(mask_apply(&v, &Mask::empty([8, 8, 9])).is_err());
    }

    #[test]
    fn centroid_floors_the_mean() {
        let mut m = Mask::empty([8, 8, 8]);
        m.set(2, 2, 2, true);
        m.set(4, 2, 2, true);
        assert_eq!(m.centroid(), Some([3, 2, 2]));
        m.set(4, 3, 2, true);
        // mean (10/3, 7/3, 2) floors to (3, 2, 2)
        assert_eq!(m.centroid(), Some([3, 2, 2]));
        assert_eq!(Mask::empty([8, 8, 8]).centroid(), None);
    }

    #[test]
    fn roi_centering_and_padding() {
        let v = ramp([40, 40, 16]);
        let mut m = Mask::empty(v.dims());
        m.set(20, 21, 8, true);
        let (roi, rm) = extract_roi(&v, &m, [16, 16, 8]).unwrap();
        assert_eq!(roi.get(8, 8, 4), v.get(20, 21, 8));
        assert!(rm.get(8, 8, 4));
        assert_eq!(rm.count(), 1);

        let mut corner = Mask::empty(v.dims());
        corner.set(0, 0, 0, true);
        let (roi, _) = extract_roi(&v, &corner, [16, 16, 8]).unwrap();
        assert_eq!(roi.get(8, 8, 4), v.get(0, 0, 0));
        for x in 0..8 {
            for y in 0..16 {
                for z in 0..8 {
                    assert_eq!(roi.get(x, y, z), 0.0);
                }
            }
        }
        assert!(extract_roi(&v, &Mask::empty(v.dims()), [16, 16, 8]).is_err());
    }

    #[test]
    fn morphology_and_iou() {
        let mut m = Mask::empty([8, 8, 8]);
        m.set(4, 4, 4, true);
        let d = m.dilate();
        assert_eq!(d.count(), 7);
        assert_eq!(d.erode(), m);
        assert!(m.is_subset_of(&d));
        assert!((m.iou(&d) - 1.0 / 7.0).abs() < 1e-12);
    }
}
