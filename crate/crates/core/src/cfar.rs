//! Cell-averaging CFAR on 3D radar tensors and point-cloud utilities.
//!
//! For every voxel the noise estimate is the mean of the training ring: the
//! `(2t+1)`-box around the voxel minus the `(2g+1)` guard box, restricted to
//! in-grid cells. Box sums come from a summed-volume table so the cost is
//! independent of the window size.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;
use crate::tensor::{GridGeometry, RadarTensor};

/// Default fixed point count for padded clouds.
pub const DEFAULT_PAD: usize = 1000;
/// Default "near the body" radius for the effective point ratio, metres.
pub const DEFAULT_RATIO_RADIUS: f64 = 0.5;

const RPC_MAGIC: &[u8; 4] = b"M4PC";
const RPC_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CfarError {
    #[error("invalid CFAR configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed point cloud record: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CfarConfig {
    /// Guard half-widths in voxels.
    pub guard: [usize; 3],
    /// Training half-widths in voxels; strictly larger than `guard`.
    pub train: [usize; 3],
    pub threshold_factor: f64,
    pub min_intensity: f64,
    pub max_points: usize,
}

impl Default for CfarConfig {
    fn default() -> Self {
        CfarConfig { guard: [2, 2, 1], train: [5, 5, 2], threshold_factor: 3.0, min_intensity: 0.0, max_points: 1000 }
    }
}

impl CfarConfig {
    pub fn validate(&self) -> Result<(), CfarError> {
        for axis in 0..3 {
            if self.train[axis] <= self.guard[axis] {
                return Err(CfarError::InvalidConfig(format!(
                    "training ring is empty on axis {axis}: train {} must exceed guard {}",
                    self.train[axis], self.guard[axis]
                )));
            }
        }
        if !(self.threshold_factor.is_finite() && self.threshold_factor > 0.0) {
            return Err(CfarError::InvalidConfig(format!("threshold_factor {} must be > 0", self.threshold_factor)));
        }
        if !(self.min_intensity.is_finite() && self.min_intensity >= 0.0) {
            return Err(CfarError::InvalidConfig(format!("min_intensity {} must be >= 0", self.min_intensity)));
        }
        if self.max_points == 0 {
            return Err(CfarError::InvalidConfig("max_points must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadarPoint {
    pub position: Vec3,
    pub intensity: f32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RadarPointCloud {
    pub points: Vec<RadarPoint>,
}

impl RadarPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `M4PC` record: magic, version u16, reserved u16, count u32, then
    /// `count` rows of `(x, y, z, intensity)` as little-endian `f32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 16 * self.points.len());
        out.extend_from_slice(RPC_MAGIC);
        out.extend_from_slice(&RPC_VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(self.points.len() as u32).to_le_bytes());
        for p in &self.points {
            for v in [p.position.x as f32, p.position.y as f32, p.position.z as f32, p.intensity] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CfarError> {
        if bytes.len() < 12 || &bytes[0..4] != RPC_MAGIC {
            return Err(CfarError::Malformed("bad magic or short header".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != RPC_VERSION {
            return Err(CfarError::Malformed(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() != 12 + 16 * count {
            return Err(CfarError::Malformed(format!("length {} does not match {count} points", bytes.len())));
        }
        let points = bytes[12..]
            .chunks_exact(16)
            .map(|row| {
                let f = |o: usize| f32::from_le_bytes(row[o..o + 4].try_into().unwrap());
                RadarPoint { position: Vec3::new(f(0) as f64, f(4) as f64, f(8) as f64), intensity: f(12) }
            })
            .collect();
        Ok(RadarPointCloud { points })
    }
}

/// A detected voxel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub linear_index: usize,
    pub intensity: f32,
}

/// Summed-volume tables of values and of nonzero indicators.
struct VolumeTable {
    dims: [usize; 3],
    sums: Vec<f64>,
    nonzero: Vec<u32>,
}

impl VolumeTable {
    fn new(t: &RadarTensor) -> Self {
        let [nx, ny, nz] = t.geometry().dims();
        let (sy, sz) = (ny + 1, nz + 1);
        let mut sums = vec![0.0f64; (nx + 1) * sy * sz];
        let mut nonzero = vec![0u32; (nx + 1) * sy * sz];
        let at = |i: usize, j: usize, k: usize| (i * sy + j) * sz + k;
        for i in 1..=nx {
            for j in 1..=ny {
                for k in 1..=nz {
                    let v = t.get(i - 1, j - 1, k - 1);
                    let idx = at(i, j, k);
                    sums[idx] = v as f64 + sums[at(i - 1, j, k)] + sums[at(i, j - 1, k)] + sums[at(i, j, k - 1)]
                        - sums[at(i - 1, j - 1, k)]
                        - sums[at(i - 1, j, k - 1)]
                        - sums[at(i, j - 1, k - 1)]
                        + sums[at(i - 1, j - 1, k - 1)];
                    let nz_add = u32::from(v != 0.0) as i64;
                    let c = nz_add + nonzero[at(i - 1, j, k)] as i64 + nonzero[at(i, j - 1, k)] as i64
                        + nonzero[at(i, j, k - 1)] as i64
                        - nonzero[at(i - 1, j - 1, k)] as i64
                        - nonzero[at(i - 1, j, k - 1)] as i64
                        - nonzero[at(i, j - 1, k - 1)] as i64
                        + nonzero[at(i - 1, j - 1, k - 1)] as i64;
                    nonzero[idx] = c as u32;
                }
            }
        }
        VolumeTable { dims: [nx, ny, nz], sums, nonzero }
    }

    /// Sum, nonzero count and cell count over the half-open box `[lo, hi)`.
    fn query(&self, lo: [usize; 3], hi: [usize; 3]) -> (f64, i64, i64) {
        let (sy, sz) = (self.dims[1] + 1, self.dims[2] + 1);
        let at = |i: usize, j: usize, k: usize| (i * sy + j) * sz + k;
        let corners = [
            (hi[0], hi[1], hi[2], 1.0),
            (lo[0], hi[1], hi[2], -1.0),
            (hi[0], lo[1], hi[2], -1.0),
            (hi[0], hi[1], lo[2], -1.0),
            (lo[0], lo[1], hi[2], 1.0),
            (lo[0], hi[1], lo[2], 1.0),
            (hi[0], lo[1], lo[2], 1.0),
            (lo[0], lo[1], lo[2], -1.0),
        ];
        let mut sum = 0.0;
        let mut nonzero = 0i64;
        for (i, j, k, sign) in corners {
            sum += sign * self.sums[at(i, j, k)];
            nonzero += sign as i64 * self.nonzero[at(i, j, k)] as i64;
        }
        let cells = (0..3).map(|a| (hi[a] - lo[a]) as i64).product();
        (sum, nonzero, cells)
    }

    fn clipped_box(&self, center: [usize; 3], half: [usize; 3]) -> ([usize; 3], [usize; 3]) {
        let lo = [0, 1, 2].map(|a| center[a].saturating_sub(half[a]));
        let hi = [0, 1, 2].map(|a| (center[a] + half[a] + 1).min(self.dims[a]));
        (lo, hi)
    }
}

/// Detected voxels sorted by intensity descending, ties by ascending linear
/// index, truncated to `max_points`.
pub fn detect_voxels(t: &RadarTensor, c: &CfarConfig) -> Result<Vec<Detection>, CfarError> {
    c.validate()?;
    let g = t.geometry();
    let [nx, ny, nz] = g.dims();
    let table = VolumeTable::new(t);
    let factor = c.threshold_factor;
    let floor = c.min_intensity;
    let mut hits: Vec<Detection> = (0..nx)
        .into_par_iter()
        .flat_map_iter(|i| {
            let table = &table;
            let mut local = Vec::new();
            for j in 0..ny {
                for k in 0..nz {
                    let v = t.get(i, j, k);
                    if v <= 0.0 || (v as f64) < floor {
                        continue;
                    }
                    let (olo, ohi) = table.clipped_box([i, j, k], c.train);
                    let (glo, ghi) = table.clipped_box([i, j, k], c.guard);
                    let (osum, onz, ocells) = table.query(olo, ohi);
                    let (gsum, gnz, gcells) = table.query(glo, ghi);
                    let ring_nonzero = onz - gnz;
                    let detected = if ring_nonzero == 0 {
                        true
                    } else {
                        let mean = (osum - gsum) / (ocells - gcells) as f64;
                        v as f64 >= factor * mean
                    };
                    if detected {
                        local.push(Detection { linear_index: g.linear_index(i, j, k), intensity: v });
                    }
                }
            }
            local
        })
        .collect();
    hits.sort_by(|a, b| b.intensity.total_cmp(&a.intensity).then(a.linear_index.cmp(&b.linear_index)));
    hits.truncate(c.max_points);
    Ok(hits)
}

pub fn cfar_detect(t: &RadarTensor, c: &CfarConfig) -> Result<RadarPointCloud, CfarError> {
    let g: &GridGeometry = t.geometry();
    let points = detect_voxels(t, c)?
        .into_iter()
        .map(|d| {
            let idx = g.unravel(d.linear_index).map(|i| i as i64);
            RadarPoint { position: g.voxel_center(idx), intensity: d.intensity }
        })
        .collect();
    Ok(RadarPointCloud { points })
}

/// Fixed-size `(x, y, z, intensity)` rows plus the number of real points.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedPoints {
    pub rows: Vec<[f32; 4]>,
    pub valid: usize,
}

/// Keeps the `n` strongest points (stable on ties) and zero-pads to `n` rows.
pub fn pad_points(p: &RadarPointCloud, n: usize) -> PaddedPoints {
    let mut order: Vec<&RadarPoint> = p.points.iter().collect();
    order.sort_by(|a, b| b.intensity.total_cmp(&a.intensity));
    let valid = order.len().min(n);
    let mut rows: Vec<[f32; 4]> = order
        .iter()
        .take(valid)
        .map(|q| [q.position.x as f32, q.position.y as f32, q.position.z as f32, q.intensity])
        .collect();
    rows.resize(n, [0.0; 4]);
    PaddedPoints { rows, valid }
}

/// Fraction of points within `radius` of the nearest body joint; 0 for an
/// empty cloud.
pub fn effective_rpc_ratio(p: &RadarPointCloud, body_joints: &[Vec3], radius: f64) -> f64 {
    if p.is_empty() {
        return 0.0;
    }
    let near = p
        .points
        .iter()
        .filter(|q| body_joints.iter().any(|j| (q.position - j).norm() <= radius))
        .count();
    near as f64 / p.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geometry(dims: [usize; 3]) -> GridGeometry {
        GridGeometry::new(dims, Vec3::zeros(), Vec3::new(0.1, 0.1, 0.1)).unwrap()
    }

    #[test]
    fn default_config_is_valid() {
        CfarConfig::default().validate().unwrap();
    }

    #[test]
    fn empty_ring_config_rejected() {
        let c = CfarConfig { guard: [2, 2, 2], train: [2, 5, 5], ..CfarConfig::default() };
        assert!(matches!(c.validate(), Err(CfarError::InvalidConfig(_))));
        let c = CfarConfig { max_points: 0, ..CfarConfig::default() };
        assert!(c.validate().is_err());
        let c = CfarConfig { threshold_factor: 0.0, ..CfarConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_tensor_has_no_detections() {
        let t = RadarTensor::zeros(geometry([9, 9, 5]));
        assert!(cfar_detect(&t, &CfarConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn isolated_peak_follows_zero_mean_rule() {
        let g = geometry([9, 9, 5]);
        let mut v = vec![0.0; g.len()];
        v[g.linear_index(4, 4, 2)] = 0.25;
        let t = RadarTensor::new(g, v).unwrap();
        let cloud = cfar_detect(&t, &CfarConfig::default()).unwrap();
        assert_eq!(cloud.len(), 1);
        assert!((cloud.points[0].position - Vec3::new(0.4, 0.4, 0.2)).norm() < 1e-6);
        let floor = CfarConfig { min_intensity: 0.5, ..CfarConfig::default() };
        assert!(cfar_detect(&t, &floor).unwrap().is_empty());
        let floor = CfarConfig { min_intensity: 0.25, ..CfarConfig::default() };
        assert_eq!(cfar_detect(&t, &floor).unwrap().len(), 1);
    }

    #[test]
    fn detections_sorted_and_truncated() {
        let g = geometry([30, 30, 6]);
        let mut v = vec![0.0; g.len()];
        // Two equal peaks far apart plus a weaker one.
        v[g.linear_index(5, 5, 3)] = 2.0;
        v[g.linear_index(20, 20, 3)] = 2.0;
        v[g.linear_index(5, 20, 3)] = 1.0;
        let t = RadarTensor::new(g, v).unwrap();
        let d = detect_voxels(&t, &CfarConfig::default()).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d[0].linear_index, g.linear_index(5, 5, 3));
        assert_eq!(d[1].linear_index, g.linear_index(20, 20, 3));
        let d = detect_voxels(&t, &CfarConfig { max_points: 2, ..CfarConfig::default() }).unwrap();
        assert_eq!(d.len(), 2);
    }

    #[test]
    fn pad_points_cases() {
        let empty = pad_points(&RadarPointCloud::default(), 4);
        assert_eq!(empty.valid, 0);
        assert_eq!(empty.rows, vec![[0.0; 4]; 4]);

        let cloud = RadarPointCloud {
            points: vec![
                RadarPoint { position: Vec3::new(1.0, 2.0, 3.0), intensity: 0.5 },
                RadarPoint { position: Vec3::new(4.0, 5.0, 6.0), intensity: 0.9 },
            ],
        };
        let padded = pad_points(&cloud, 4);
        assert_eq!(padded.valid, 2);
        assert_eq!(padded.rows[0], [4.0, 5.0, 6.0, 0.9]);
        assert_eq!(padded.rows[1], [1.0, 2.0, 3.0, 0.5]);
        assert_eq!(padded.rows[3], [0.0; 4]);
    }

    #[test]
    fn pad_points_keeps_strongest() {
        let points: Vec<_> = (0..1500)
            .map(|n| RadarPoint { position: Vec3::new(n as f64, 0.0, 0.0), intensity: ((n * 7919) % 1500) as f32 })
            .collect();
        let cloud = RadarPointCloud { points };
        let padded = pad_points(&cloud, 1000);
        assert_eq!(padded.valid, 1000);
        let mut oracle: Vec<f32> = cloud.points.iter().map(|p| p.intensity).collect();
        oracle.sort_by(|a, b| b.total_cmp(a));
        let got: Vec<f32> = padded.rows.iter().map(|r| r[3]).collect();
        assert_eq!(got, oracle[..1000]);
    }

    #[test]
    fn effective_ratio_fixtures() {
        let joints = vec![Vec3::new(0.0, 2.0, 1.0), Vec3::new(0.0, 2.0, 0.5)];
        let mut points = Vec::new();
        for n in 0..7 {
            points.push(RadarPoint { position: Vec3::new(0.05 * n as f64, 2.0, 1.0), intensity: 1.0 });
        }
        for n in 0..3 {
            points.push(RadarPoint { position: Vec3::new(2.0 + n as f64, 4.0, 1.0), intensity: 1.0 });
        }
        let cloud = RadarPointCloud { points };
        assert!((effective_rpc_ratio(&cloud, &joints, 0.5) - 0.7).abs() < 1e-12);
        assert_eq!(effective_rpc_ratio(&RadarPointCloud::default(), &joints, 0.5), 0.0);
        let near = RadarPointCloud { points: cloud.points[..7].to_vec() };
        assert_eq!(effective_rpc_ratio(&near, &joints, 0.5), 1.0);
    }

    #[test]
    fn rpc_record_round_trip() {
        let cloud = RadarPointCloud {
            points: vec![RadarPoint { position: Vec3::new(0.5, 2.25, 1.0), intensity: 3.5 }],
        };
        let bytes = cloud.to_bytes();
        assert_eq!(bytes.len(), 28);
        assert_eq!(RadarPointCloud::from_bytes(&bytes).unwrap(), cloud);
        assert!(RadarPointCloud::from_bytes(&bytes[..20]).is_err());
    }
}
