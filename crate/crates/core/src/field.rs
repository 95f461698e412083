//! Node-sampled scalar fields on a box grid, and their binary dump format.
//!
//! Dump layout (all little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `FDFIELD1` |
//! | 3 x 8 | node counts per axis (`u64`) |
//! | 3 x 8 | origin (`f64`) |
//! | 3 x 8 | spacing (`f64`) |
//! | 8     | log scale (`f64`) |
//! | ...   | values (`f64`), row-major with the z index fastest |

use std::io::{Read, Write};

use crate::geometry::{BoxDomain, Point};

const MAGIC: &[u8; 8] = b"FDFIELD1";

/// Values at the `(n+1)^3` nodes of a box grid. The represented quantity is
/// `values[i] * exp(log_scale)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField3D {
    dims: [usize; 3],
    origin: Point,
    spacing: [f64; 3],
    log_scale: f64,
    values: Vec<f64>,
}

impl ScalarField3D {
    pub fn zeros(domain: &BoxDomain) -> Self {
        let n = domain.intervals();
        let dims = [n[0] + 1, n[1] + 1, n[2] + 1];
        Self {
            dims,
            origin: domain.lo(),
            spacing: domain.spacing(),
            log_scale: 0.0,
            values: vec![0.0; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_fn<F: FnMut(Point) -> f64>(domain: &BoxDomain, mut f: F) -> Self {
        let mut out = Self::zeros(domain);
        for i in 0..out.dims[0] {
            for j in 0..out.dims[1] {
                for k in 0..out.dims[2] {
                    let idx = out.index(i, j, k);
                    out.values[idx] = f(out.node(i, j, k));
                }
            }
        }
        out
    }

    pub fn from_parts(
        dims: [usize; 3],
        origin: Point,
        spacing: [f64; 3],
        log_scale: f64,
        values: Vec<f64>,
    ) -> Self {
        assert_eq!(values.len(), dims[0] * dims[1] * dims[2]);
        Self {
            dims,
            origin,
            spacing,
            log_scale,
            values,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> Point {
        self.origin
    }

    pub fn log_scale(&self) -> f64 {
        self.log_scale
    }

    pub fn set_log_scale(&mut self, l: f64) {
        self.log_scale = l;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn node(&self, i: usize, j: usize, k: usize) -> Point {
        [
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        ]
    }

    #[inline]
    pub fn value_at_node(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    /// Max-norm of the stored values (ignores the log scale).
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Values expressed relative to another log scale.
    pub fn rescaled_to(&self, log_scale: f64) -> Vec<f64> {
        let f = (self.log_scale - log_scale).exp();
        self.values.iter().map(|v| v * f).collect()
    }

    /// Samples every `stride`-th node; used to compare nested grids.
    pub fn restrict(&self, stride: usize) -> Self {
        assert!(stride >= 1);
        assert!((0..3).all(|a| (self.dims[a] - 1).is_multiple_of(stride)));
        let dims = self.dims.map(|d| (d - 1) / stride + 1);
        let mut values = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    values.push(self.value_at_node(i * stride, j * stride, k * stride));
                }
            }
        }
        Self {
            dims,
            origin: self.origin,
            spacing: self.spacing.map(|h| h * stride as f64),
            log_scale: self.log_scale,
            values,
        }
    }

    pub fn write_dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        for d in self.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in self.origin.iter().chain(&self.spacing) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.log_scale.to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_dump<R: Read>(mut r: R) -> std::io::Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                "not a field dump",
            ));
        }
        let mut buf = [0u8; 8];
        let mut next_u64 = |r: &mut R| -> std::io::Result<[u8; 8]> {
            r.read_exact(&mut buf)?;
            Ok(buf)
        };
        let mut dims = [0usize; 3];
        for d in &mut dims {
            *d = u64::from_le_bytes(next_u64(&mut r)?) as usize;
        }
        let mut meta = [0.0f64; 7];
        for m in &mut meta {
            *m = f64::from_le_bytes(next_u64(&mut r)?);
        }
        let count = dims[0] * dims[1] * dims[2];
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            values.push(f64::from_le_bytes(next_u64(&mut r)?));
        }
        Ok(Self {
            dims,
            origin: [meta[0], meta[1], meta[2]],
            spacing: [meta[3], meta[4], meta[5]],
            log_scale: meta[6],
            values,
        })
    }
}
