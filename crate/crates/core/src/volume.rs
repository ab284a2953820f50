use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar field on a regular grid, stored z-major (`[z][y][x]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Volume3D {
    dims: [usize; 3],
    spacing: [f64; 3],
    voxels: Vec<f32>,
}

impl Volume3D {
    /// `dims` and `spacing` are ordered `(z, y, x)`; spacing is in mm.
    pub fn new(dims: [usize; 3], spacing: [f64; 3], voxels: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "volume dims must be positive, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "voxel spacing must be positive, got {spacing:?}"
            )));
        }
        let n = dims.iter().product::<usize>();
        if voxels.len() != n {
            return Err(Error::InvalidArgument(format!(
                "volume {dims:?} needs {n} voxels, got {}",
                voxels.len()
            )));
        }
        Ok(Self {
            dims,
            spacing,
            voxels,
        })
    }

    pub fn zeros(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Self::new(dims, spacing, vec![0.0; dims.iter().product()])
    }

    /// Cube of edge `size` with unit spacing.
    pub fn cube(size: usize, voxels: Vec<f32>) -> Result<Self> {
        Self::new([size; 3], [1.0; 3], voxels)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.voxels[self.index(z, y, x)]
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, v: f32) {
        let i = self.index(z, y, x);
        self.voxels[i] = v;
    }

    /// Axial slice `z` as a `[y][x]` row-major view.
    pub fn slice(&self, z: usize) -> &[f32] {
        let n = self.dims[1] * self.dims[2];
        &self.voxels[z * n..(z + 1) * n]
    }

    /// Little-endian f32 encoding of the voxels.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.voxels.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(dims: [usize; 3], spacing: [f64; 3], bytes: &[u8]) -> Result<Self> {
        let expected = dims.iter().product::<usize>() * 4;
        if bytes.len() != expected {
            return Err(Error::Data(format!(
                "raw volume {dims:?} needs {expected} bytes, got {}",
                bytes.len()
            )));
        }
        let voxels = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(dims, spacing, voxels)
    }
}
