//! Radar tensors, frame stacks, BEV collapse and RoI cropping.
//!
//! Dense arrays are row-major with x outermost and z innermost:
//! `linear = (i * ny + j) * nz + k`. Every byte format in the crate relies on
//! this order.

use std::io::{Read, Write};

use thiserror::Error;

use crate::geometry::Vec3;

/// Default RoI size in voxels used by the local regression stage.
pub const DEFAULT_ROI: [usize; 3] = [24, 24, 31];
/// Default number of stacked frames.
pub const DEFAULT_STACK: usize = 4;

const DUMP_MAGIC: &[u8; 4] = b"M4RT";
const DUMP_VERSION: u16 = 1;
pub const DUMP_HEADER_LEN: usize = 64;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("voxel index ({0}, {1}, {2}) outside grid")]
    OutOfBounds(i64, i64, i64),
    #[error("malformed tensor dump: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Voxel grid placement. `origin` is the centre of voxel (0, 0, 0).
///
/// Origin and pitch are held at `f32` precision so the on-disk headers (which
/// store them as `f32`) reproduce a geometry exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry {
    dims: [usize; 3],
    origin: Vec3,
    pitch: Vec3,
}

fn quantize(v: Vec3) -> Vec3 {
    v.map(|c| c as f32 as f64)
}

impl GridGeometry {
    pub fn new(dims: [usize; 3], origin: Vec3, pitch: Vec3) -> Result<Self, TensorError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidArgument(format!("grid dims must be positive, got {dims:?}")));
        }
        if !origin.iter().all(|c| c.is_finite()) {
            return Err(TensorError::InvalidArgument("grid origin must be finite".into()));
        }
        if !pitch.iter().all(|p| p.is_finite() && *p > 0.0) {
            return Err(TensorError::InvalidArgument("grid pitch must be positive".into()));
        }
        Ok(GridGeometry { dims, origin: quantize(origin), pitch: quantize(pitch) })
    }

    /// 121 x 111 x 31 grid spanning x in [-3, 3] m, y in [0.25, 5.75] m and
    /// z in [0, 2.4] m.
    pub fn radar_default() -> Self {
        GridGeometry::new([121, 111, 31], Vec3::new(-3.0, 0.25, 0.0), Vec3::new(0.05, 0.05, 0.08))
            .expect("default geometry is valid")
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn pitch(&self) -> Vec3 {
        self.pitch
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cubic metres per voxel.
    pub fn voxel_volume(&self) -> f64 {
        self.pitch.x * self.pitch.y * self.pitch.z
    }

    #[inline]
    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn unravel(&self, linear: usize) -> [usize; 3] {
        let k = linear % self.dims[2];
        let rest = linear / self.dims[2];
        [rest / self.dims[1], rest % self.dims[1], k]
    }

    pub fn contains_index(&self, idx: [i64; 3]) -> bool {
        idx.iter().zip(self.dims.iter()).all(|(&i, &d)| i >= 0 && (i as usize) < d)
    }

    pub fn voxel_to_world(&self, idx: [usize; 3]) -> Result<Vec3, TensorError> {
        let signed = idx.map(|i| i as i64);
        if !self.contains_index(signed) {
            return Err(TensorError::OutOfBounds(signed[0], signed[1], signed[2]));
        }
        Ok(self.voxel_center(signed))
    }

    /// World position of a possibly out-of-grid voxel index.
    #[inline]
    pub fn voxel_center(&self, idx: [i64; 3]) -> Vec3 {
        Vec3::new(
            self.origin.x + idx[0] as f64 * self.pitch.x,
            self.origin.y + idx[1] as f64 * self.pitch.y,
            self.origin.z + idx[2] as f64 * self.pitch.z,
        )
    }

    /// Nearest voxel index, not bounds-checked.
    pub fn nearest_voxel(&self, p: &Vec3) -> [i64; 3] {
        [
            ((p.x - self.origin.x) / self.pitch.x).round() as i64,
            ((p.y - self.origin.y) / self.pitch.y).round() as i64,
            ((p.z - self.origin.z) / self.pitch.z).round() as i64,
        ]
    }

    pub fn world_to_voxel(&self, p: &Vec3) -> Result<[usize; 3], TensorError> {
        if !p.iter().all(|c| c.is_finite()) {
            return Err(TensorError::InvalidArgument("non-finite world point".into()));
        }
        let idx = self.nearest_voxel(p);
        if !self.contains_index(idx) {
            return Err(TensorError::OutOfBounds(idx[0], idx[1], idx[2]));
        }
        Ok(idx.map(|i| i as usize))
    }

    /// Centre of the last voxel along each axis.
    pub fn max_corner(&self) -> Vec3 {
        self.voxel_center([self.dims[0] as i64 - 1, self.dims[1] as i64 - 1, self.dims[2] as i64 - 1])
    }
}

impl Default for GridGeometry {
    fn default() -> Self {
        GridGeometry::radar_default()
    }
}

/// Dense non-negative intensity volume.
#[derive(Debug, Clone, PartialEq)]
pub struct RadarTensor {
    geometry: GridGeometry,
    values: Vec<f32>,
}

impl RadarTensor {
    /// Validates shape, finiteness and non-negativity. Negative zeros are
    /// normalised to `+0.0`.
    pub fn new(geometry: GridGeometry, mut values: Vec<f32>) -> Result<Self, TensorError> {
        if values.len() != geometry.len() {
            return Err(TensorError::InvalidArgument(format!(
                "expected {} values for dims {:?}, got {}",
                geometry.len(),
                geometry.dims(),
                values.len()
            )));
        }
        for (n, v) in values.iter_mut().enumerate() {
            if !v.is_finite() || *v < 0.0 {
                return Err(TensorError::InvalidArgument(format!("value {v} at linear index {n}")));
            }
            if *v == 0.0 {
                *v = 0.0;
            }
        }
        Ok(RadarTensor { geometry, values })
    }

    pub fn zeros(geometry: GridGeometry) -> Self {
        RadarTensor { values: vec![0.0; geometry.len()], geometry }
    }

    pub fn from_fn(geometry: GridGeometry, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self, TensorError> {
        let [nx, ny, nz] = geometry.dims();
        let mut values = Vec::with_capacity(geometry.len());
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..nz {
                    values.push(f(i, j, k));
                }
            }
        }
        RadarTensor::new(geometry, values)
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.values[self.geometry.linear_index(i, j, k)]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum()
    }

    pub fn nonzero_count(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0.0).count()
    }

    /// Writes the dense debug dump: 64-byte `M4RT` header followed by the
    /// little-endian `f32` values in array order.
    pub fn write_dense_dump<W: Write>(&self, mut w: W) -> Result<(), TensorError> {
        let mut header = [0u8; DUMP_HEADER_LEN];
        header[0..4].copy_from_slice(DUMP_MAGIC);
        header[4..6].copy_from_slice(&DUMP_VERSION.to_le_bytes());
        for (n, d) in self.geometry.dims().iter().enumerate() {
            let d = u16::try_from(*d).map_err(|_| TensorError::InvalidArgument(format!("dim {d} exceeds u16")))?;
            header[6 + 2 * n..8 + 2 * n].copy_from_slice(&d.to_le_bytes());
        }
        let o = self.geometry.origin();
        let p = self.geometry.pitch();
        for n in 0..3 {
            header[12 + 4 * n..16 + 4 * n].copy_from_slice(&(o[n] as f32).to_le_bytes());
            header[24 + 4 * n..28 + 4 * n].copy_from_slice(&(p[n] as f32).to_le_bytes());
        }
        w.write_all(&header)?;
        let mut body = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            body.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&body)?;
        Ok(())
    }

    pub fn read_dense_dump<R: Read>(mut r: R) -> Result<Self, TensorError> {
        let mut header = [0u8; DUMP_HEADER_LEN];
        r.read_exact(&mut header)?;
        if &header[0..4] != DUMP_MAGIC {
            return Err(TensorError::Malformed("bad magic".into()));
        }
        let version = u16::from_le_bytes([header[4], header[5]]);
        if version != DUMP_VERSION {
            return Err(TensorError::Malformed(format!("unsupported version {version}")));
        }
        let u16_at = |o: usize| u16::from_le_bytes([header[o], header[o + 1]]) as usize;
        let f32_at = |o: usize| f32::from_le_bytes(header[o..o + 4].try_into().unwrap()) as f64;
        let dims = [u16_at(6), u16_at(8), u16_at(10)];
        let origin = Vec3::new(f32_at(12), f32_at(16), f32_at(20));
        let pitch = Vec3::new(f32_at(24), f32_at(28), f32_at(32));
        let geometry = GridGeometry::new(dims, origin, pitch)?;
        let mut body = vec![0u8; geometry.len() * 4];
        r.read_exact(&mut body)?;
        let values = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        RadarTensor::new(geometry, values)
    }
}

/// `T` consecutive tensors on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStack {
    frames: Vec<RadarTensor>,
}

impl FrameStack {
    pub fn new(frames: Vec<RadarTensor>) -> Result<Self, TensorError> {
        let first = frames
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("frame stack must not be empty".into()))?;
        if frames.iter().any(|f| f.geometry() != first.geometry()) {
            return Err(TensorError::InvalidArgument("frames in a stack must share one geometry".into()));
        }
        Ok(FrameStack { frames })
    }

    pub fn frames(&self) -> &[RadarTensor] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn geometry(&self) -> &GridGeometry {
        self.frames[0].geometry()
    }
}

/// Bird's-eye view: an `(nx, ny)` map with `nz * T` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct BevMap {
    nx: usize,
    ny: usize,
    nz: usize,
    frames: usize,
    values: Vec<f32>,
}

impl BevMap {
    pub fn dims(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn channels(&self) -> usize {
        self.nz * self.frames
    }

    /// Channel `c` of cell `(i, j)`; channel `k + t * nz` holds frame `t`, slice `k`.
    pub fn get(&self, i: usize, j: usize, c: usize) -> f32 {
        self.values[(i * self.ny + j) * self.channels() + c]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Channel-summed 2D map, row-major over `(i, j)`.
    pub fn channel_sum(&self) -> Vec<f64> {
        self.values
            .chunks_exact(self.channels())
            .map(|cell| cell.iter().map(|&v| v as f64).sum())
            .collect()
    }

    /// Inverse of [`bev_collapse`].
    pub fn to_stack(&self, geometry: GridGeometry) -> Result<FrameStack, TensorError> {
        if geometry.dims() != [self.nx, self.ny, self.nz] {
            return Err(TensorError::InvalidArgument("geometry does not match BEV shape".into()));
        }
        let frames = (0..self.frames)
            .map(|t| RadarTensor::from_fn(geometry, |i, j, k| self.get(i, j, k + t * self.nz)))
            .collect::<Result<Vec<_>, _>>()?;
        FrameStack::new(frames)
    }
}

pub fn bev_collapse(s: &FrameStack) -> BevMap {
    let [nx, ny, nz] = s.geometry().dims();
    let t_count = s.len();
    let channels = nz * t_count;
    let mut values = vec![0.0f32; nx * ny * channels];
    for (t, frame) in s.frames().iter().enumerate() {
        for cell in 0..nx * ny {
            let src = &frame.values()[cell * nz..(cell + 1) * nz];
            let dst = cell * channels + t * nz;
            values[dst..dst + nz].copy_from_slice(src);
        }
    }
    BevMap { nx, ny, nz, frames: t_count, values }
}

/// Crops an `roi`-sized window around the voxel nearest `center_xy`.
///
/// The window starts `roi / 2` voxels before the centre voxel in x and y and
/// is centred on the grid in z. Out-of-grid voxels are zero.
pub fn crop_roi(s: &FrameStack, center_xy: (f64, f64), roi: [usize; 3]) -> Result<FrameStack, TensorError> {
    if !center_xy.0.is_finite() || !center_xy.1.is_finite() {
        return Err(TensorError::InvalidArgument("crop centre must be finite".into()));
    }
    let g = *s.geometry();
    let [nx, ny, nz] = g.dims();
    if roi.iter().any(|&r| r == 0) {
        return Err(TensorError::InvalidArgument(format!("roi must be positive, got {roi:?}")));
    }
    if roi[2] > nz {
        return Err(TensorError::InvalidArgument(format!("roi depth {} exceeds grid depth {nz}", roi[2])));
    }
    let c = g.nearest_voxel(&Vec3::new(center_xy.0, center_xy.1, g.origin().z));
    let start = [c[0] - (roi[0] / 2) as i64, c[1] - (roi[1] / 2) as i64, ((nz - roi[2]) / 2) as i64];
    let crop_geometry = GridGeometry::new(roi, g.voxel_center(start), g.pitch())?;
    let frames = s
        .frames()
        .iter()
        .map(|f| {
            let mut values = vec![0.0f32; crop_geometry.len()];
            for a in 0..roi[0] {
                let si = start[0] + a as i64;
                if si < 0 || si as usize >= nx {
                    continue;
                }
                for b in 0..roi[1] {
                    let sj = start[1] + b as i64;
                    if sj < 0 || sj as usize >= ny {
                        continue;
                    }
                    let src = g.linear_index(si as usize, sj as usize, start[2] as usize);
                    let dst = crop_geometry.linear_index(a, b, 0);
                    values[dst..dst + roi[2]].copy_from_slice(&f.values()[src..src + roi[2]]);
                }
            }
            RadarTensor { geometry: crop_geometry, values }
        })
        .collect();
    FrameStack::new(frames)
}

/// Frames `t - count + 1 ..= t`, repeating frame 0 for indices before the start.
pub fn stack_window(frames: &[RadarTensor], t: usize, count: usize) -> Result<FrameStack, TensorError> {
    if frames.is_empty() {
        return Err(TensorError::InvalidArgument("cannot stack an empty sequence".into()));
    }
    if count == 0 {
        return Err(TensorError::InvalidArgument("stack size must be positive".into()));
    }
    if t >= frames.len() {
        return Err(TensorError::InvalidArgument(format!("frame {t} past sequence end {}", frames.len())));
    }
    let picked = (0..count)
        .map(|n| {
            let back = count - 1 - n;
            frames[t.saturating_sub(back)].clone()
        })
        .collect();
    FrameStack::new(picked)
}
