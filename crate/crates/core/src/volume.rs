//! Voxel lattices: world/voxel transforms, binary morphology, peak-field
//! interpolation and exact segment rasterization.
//!
//! Voxel `(i, j, k)` is centered on the continuous voxel coordinate
//! `(i, j, k)` and covers `[i - 0.5, i + 0.5)` along each axis. Linear indices
//! are x-fastest: `i + nx * (j + ny * k)`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{GestaError, Result};
use crate::geometry::Streamline;
use crate::vec3::{self, Vec3};

/// Number of peak slots stored per voxel.
pub const PEAK_SLOTS: usize = 5;

pub type Affine = [[f64; 4]; 4];

/// Lattice shape plus the voxel-index to world (mm) transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridGeometryRepr", into = "GridGeometryRepr")]
pub struct GridGeometry {
    dims: [usize; 3],
    affine: Affine,
    inverse: Affine,
}

#[derive(Serialize, Deserialize)]
struct GridGeometryRepr {
    dims: [usize; 3],
    affine: Affine,
}

impl TryFrom<GridGeometryRepr> for GridGeometry {
    type Error = GestaError;
    fn try_from(r: GridGeometryRepr) -> Result<Self> {
        GridGeometry::new(r.dims, r.affine)
    }
}

impl From<GridGeometry> for GridGeometryRepr {
    fn from(g: GridGeometry) -> Self {
        GridGeometryRepr {
            dims: g.dims,
            affine: g.affine,
        }
    }
}

impl GridGeometry {
    pub fn new(dims: [usize; 3], affine: Affine) -> Result<Self> {
        if dims.contains(&0) {
            return Err(GestaError::Geometry(format!("non-positive dims {dims:?}")));
        }
        if affine.iter().flatten().any(|v| !v.is_finite()) {
            return Err(GestaError::Geometry("non-finite affine".into()));
        }
        if affine[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(GestaError::Geometry("affine bottom row must be [0, 0, 0, 1]".into()));
        }
        let inverse = invert_affine(&affine).ok_or_else(|| GestaError::Geometry("affine is not invertible".into()))?;
        Ok(GridGeometry { dims, affine, inverse })
    }

    /// Axis-aligned grid with the given voxel size; voxel (0,0,0) is centered at `origin`.
    pub fn axis_aligned(dims: [usize; 3], voxel_size: [f64; 3], origin: Vec3) -> Result<Self> {
        let mut affine = [[0.0; 4]; 4];
        for a in 0..3 {
            affine[a][a] = voxel_size[a];
            affine[a][3] = origin[a];
        }
        affine[3][3] = 1.0;
        Self::new(dims, affine)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn affine(&self) -> &Affine {
        &self.affine
    }

    pub fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// Millimeters per voxel along each index axis.
    pub fn voxel_size(&self) -> [f64; 3] {
        let col = |c: usize| vec3::norm([self.affine[0][c], self.affine[1][c], self.affine[2][c]]);
        [col(0), col(1), col(2)]
    }

    /// Volume of one voxel in mm³.
    pub fn voxel_volume(&self) -> f64 {
        let a = &self.affine;
        let c0 = [a[0][0], a[1][0], a[2][0]];
        let c1 = [a[0][1], a[1][1], a[2][1]];
        let c2 = [a[0][2], a[1][2], a[2][2]];
        vec3::dot(c0, vec3::cross(c1, c2)).abs()
    }

    pub fn world_to_voxel(&self, p: Vec3) -> Vec3 {
        apply_affine(&self.inverse, p)
    }

    pub fn voxel_to_world(&self, c: Vec3) -> Vec3 {
        apply_affine(&self.affine, c)
    }

    #[inline]
    pub fn linear_index(&self, ijk: [usize; 3]) -> usize {
        ijk[0] + self.dims[0] * (ijk[1] + self.dims[1] * ijk[2])
    }

    #[inline]
    pub fn unravel(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let j = (idx / self.dims[0]) % self.dims[1];
        let k = idx / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }

    /// Voxel containing a continuous voxel coordinate, if inside the lattice.
    #[inline]
    pub fn voxel_of_coord(&self, c: Vec3) -> Option<[usize; 3]> {
        let mut ijk = [0usize; 3];
        for a in 0..3 {
            let r = (c[a] + 0.5).floor();
            if !(r >= 0.0 && r < self.dims[a] as f64) {
                return None;
            }
            ijk[a] = r as usize;
        }
        Some(ijk)
    }

    /// Voxel containing a world point, if inside the lattice.
    #[inline]
    pub fn voxel_of_point(&self, p: Vec3) -> Option<[usize; 3]> {
        self.voxel_of_coord(self.world_to_voxel(p))
    }

    pub fn check_same(&self, other: &GridGeometry, what: &str) -> Result<()> {
        if self.dims != other.dims || self.affine != other.affine {
            return Err(GestaError::Geometry(format!(
                "{what}: grids differ ({:?} vs {:?})",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    /// Exact set of voxels crossed by a streamline's segments (linear indices).
    pub fn voxels_traversed(&self, s: &Streamline) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        self.rasterize(s, |idx| {
            out.insert(idx);
        });
        out
    }

    /// Calls `visit` for every voxel crossed by any segment of `s`.
    ///
    /// Voxels may be reported more than once when segments share them.
    pub fn rasterize(&self, s: &Streamline, mut visit: impl FnMut(usize)) {
        let coords: Vec<Vec3> = s.vertices().iter().map(|&p| self.world_to_voxel(p)).collect();
        for w in coords.windows(2) {
            self.traverse_segment(w[0], w[1], &mut visit);
        }
    }

    /// Calls `visit` for every voxel crossed by the world-space segment `a`-`b`.
    pub fn rasterize_segment(&self, a: Vec3, b: Vec3, mut visit: impl FnMut(usize)) {
        self.traverse_segment(self.world_to_voxel(a), self.world_to_voxel(b), &mut visit);
    }

    /// Amanatides-Woo traversal of one segment given in continuous voxel coordinates.
    fn traverse_segment(&self, a: Vec3, b: Vec3, visit: &mut impl FnMut(usize)) {
        // Shift so voxel v spans [v, v+1).
        let p0 = [a[0] + 0.5, a[1] + 0.5, a[2] + 0.5];
        let p1 = [b[0] + 0.5, b[1] + 0.5, b[2] + 0.5];
        let d = vec3::sub(p1, p0);

        // Liang-Barsky clip against the lattice box.
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        for ax in 0..3 {
            let hi = self.dims[ax] as f64;
            if d[ax] == 0.0 {
                if p0[ax] < 0.0 || p0[ax] >= hi {
                    return;
                }
            } else {
                let ta = (0.0 - p0[ax]) / d[ax];
                let tb = (hi - p0[ax]) / d[ax];
                let (lo_t, hi_t) = if ta < tb { (ta, tb) } else { (tb, ta) };
                t0 = t0.max(lo_t);
                t1 = t1.min(hi_t);
            }
        }
        if t0 > t1 {
            return;
        }

        let start = vec3::add(p0, vec3::scale(d, t0));
        let end = vec3::add(p0, vec3::scale(d, t1));
        let clamp_idx = |v: f64, ax: usize| -> i64 { (v.floor() as i64).clamp(0, self.dims[ax] as i64 - 1) };
        let mut cur = [0i64; 3];
        let mut last = [0i64; 3];
        let mut step = [0i64; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for ax in 0..3 {
            cur[ax] = clamp_idx(start[ax], ax);
            last[ax] = clamp_idx(end[ax], ax);
            if d[ax] > 0.0 {
                step[ax] = 1;
                t_delta[ax] = 1.0 / d[ax];
                t_max[ax] = ((cur[ax] + 1) as f64 - p0[ax]) / d[ax];
            } else if d[ax] < 0.0 {
                step[ax] = -1;
                t_delta[ax] = -1.0 / d[ax];
                t_max[ax] = (cur[ax] as f64 - p0[ax]) / d[ax];
            }
        }

        let budget: i64 = (0..3).map(|ax| (last[ax] - cur[ax]).abs()).sum::<i64>() + 1;
        for _ in 0..budget {
            visit(self.linear_index([cur[0] as usize, cur[1] as usize, cur[2] as usize]));
            if cur == last {
                break;
            }
            let ax = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
                0
            } else if t_max[1] <= t_max[2] {
                1
            } else {
                2
            };
            if t_max[ax] > t1 {
                break;
            }
            cur[ax] += step[ax];
            if cur[ax] < 0 || cur[ax] >= self.dims[ax] as i64 {
                break;
            }
            t_max[ax] += t_delta[ax];
        }
    }
}

fn apply_affine(m: &Affine, p: Vec3) -> Vec3 {
    [
        m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2] + m[0][3],
        m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2] + m[1][3],
        m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2] + m[2][3],
    ]
}

#[allow(clippy::needless_range_loop)] // cofactor indices read clearer than iterators
fn invert_affine(m: &Affine) -> Option<Affine> {
    let a = [
        [m[0][0], m[0][1], m[0][2]],
        [m[1][0], m[1][1], m[1][2]],
        [m[2][0], m[2][1], m[2][2]],
    ];
    let det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
    if !det.is_finite() || det.abs() < 1e-300 {
        return None;
    }
    let inv_det = 1.0 / det;
    let mut inv = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            let (r1, r2) = ((c + 1) % 3, (c + 2) % 3);
            let (c1, c2) = ((r + 1) % 3, (r + 2) % 3);
            inv[r][c] = (a[r1][c1] * a[r2][c2] - a[r1][c2] * a[r2][c1]) * inv_det;
        }
    }
    let t = [m[0][3], m[1][3], m[2][3]];
    let mut out = [[0.0; 4]; 4];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = inv[r][c];
        }
        out[r][3] = -(inv[r][0] * t[0] + inv[r][1] * t[1] + inv[r][2] * t[2]);
    }
    out[3][3] = 1.0;
    Some(out)
}

/// Voxel values carried by a [`VolumeGrid`].
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Binary(Vec<bool>),
    Scalar(Vec<f32>),
}

/// A voxel lattice holding a binary mask or a scalar field.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    geometry: GridGeometry,
    payload: Payload,
}

impl VolumeGrid {
    pub fn new(geometry: GridGeometry, payload: Payload) -> Result<Self> {
        let len = match &payload {
            Payload::Binary(v) => v.len(),
            Payload::Scalar(v) => v.len(),
        };
        if len != geometry.n_voxels() {
            return Err(GestaError::Geometry(format!(
                "payload has {len} values for {} voxels",
                geometry.n_voxels()
            )));
        }
        Ok(VolumeGrid { geometry, payload })
    }

    pub fn empty_mask(geometry: GridGeometry) -> Self {
        let n = geometry.n_voxels();
        VolumeGrid {
            geometry,
            payload: Payload::Binary(vec![false; n]),
        }
    }

    /// Binary mask with the listed linear indices set.
    pub fn mask_from_indices(geometry: GridGeometry, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut m = Self::empty_mask(geometry);
        if let Payload::Binary(v) = &mut m.payload {
            for i in indices {
                v[i] = true;
            }
        }
        m
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn payload(&self) -> &Payload {
        &self.payload
    }

    pub fn mask(&self) -> Result<&[bool]> {
        match &self.payload {
            Payload::Binary(v) => Ok(v),
            Payload::Scalar(_) => Err(GestaError::PayloadType(
                "expected a binary mask, found a scalar field".into(),
            )),
        }
    }

    pub fn mask_mut(&mut self) -> Result<&mut Vec<bool>> {
        match &mut self.payload {
            Payload::Binary(v) => Ok(v),
            Payload::Scalar(_) => Err(GestaError::PayloadType(
                "expected a binary mask, found a scalar field".into(),
            )),
        }
    }

    pub fn is_binary(&self) -> bool {
        matches!(self.payload, Payload::Binary(_))
    }

    /// Number of true voxels (binary) or nonzero voxels (scalar).
    pub fn count(&self) -> usize {
        match &self.payload {
            Payload::Binary(v) => v.iter().filter(|&&b| b).count(),
            Payload::Scalar(v) => v.iter().filter(|&&x| x != 0.0).count(),
        }
    }

    pub fn true_indices(&self) -> Vec<usize> {
        match &self.payload {
            Payload::Binary(v) => v.iter().enumerate().filter_map(|(i, &b)| b.then_some(i)).collect(),
            Payload::Scalar(v) => v
                .iter()
                .enumerate()
                .filter_map(|(i, &x)| (x != 0.0).then_some(i))
                .collect(),
        }
    }

    /// Voxel-inclusive membership of a world point; false outside the lattice.
    #[inline]
    pub fn contains_point(&self, p: Vec3) -> bool {
        match (&self.payload, self.geometry.voxel_of_point(p)) {
            (Payload::Binary(v), Some(ijk)) => v[self.geometry.linear_index(ijk)],
            (Payload::Scalar(v), Some(ijk)) => v[self.geometry.linear_index(ijk)] != 0.0,
            (_, None) => false,
        }
    }

    pub fn union(&self, other: &VolumeGrid) -> Result<VolumeGrid> {
        self.geometry.check_same(&other.geometry, "union")?;
        let (a, b) = (self.mask()?, other.mask()?);
        Ok(VolumeGrid {
            geometry: self.geometry.clone(),
            payload: Payload::Binary(a.iter().zip(b).map(|(&x, &y)| x || y).collect()),
        })
    }

    pub fn dilate(&self, iterations: usize, connectivity: u8) -> Result<VolumeGrid> {
        self.morph(iterations, connectivity, true)
    }

    pub fn erode(&self, iterations: usize, connectivity: u8) -> Result<VolumeGrid> {
        self.morph(iterations, connectivity, false)
    }

    fn morph(&self, iterations: usize, connectivity: u8, dilate: bool) -> Result<VolumeGrid> {
        let offsets = structuring_offsets(connectivity)?;
        let mut cur = self.mask()?.to_vec();
        let [nx, ny, nz] = self.geometry.dims;
        let g = &self.geometry;
        for _ in 0..iterations {
            let mut next = cur.clone();
            for k in 0..nz {
                for j in 0..ny {
                    for i in 0..nx {
                        let idx = g.linear_index([i, j, k]);
                        if cur[idx] == dilate {
                            continue;
                        }
                        // Dilation turns a false voxel on if any neighbor is on;
                        // erosion turns a true voxel off unless every neighbor is on.
                        let flip = offsets.iter().any(|o| {
                            let n = [i as i64 + o[0], j as i64 + o[1], k as i64 + o[2]];
                            let inside = n[0] >= 0
                                && n[1] >= 0
                                && n[2] >= 0
                                && n[0] < nx as i64
                                && n[1] < ny as i64
                                && n[2] < nz as i64;
                            let value = inside && cur[g.linear_index([n[0] as usize, n[1] as usize, n[2] as usize])];
                            value == dilate
                        });
                        if flip {
                            next[idx] = dilate;
                        }
                    }
                }
            }
            cur = next;
        }
        Ok(VolumeGrid {
            geometry: self.geometry.clone(),
            payload: Payload::Binary(cur),
        })
    }
}

/// Neighbor offsets of the 3D structuring element with the given connectivity
/// (1 = faces, 2 = faces and edges, 3 = full 26-neighborhood).
pub fn structuring_offsets(connectivity: u8) -> Result<Vec<[i64; 3]>> {
    if !(1..=3).contains(&connectivity) {
        return Err(GestaError::InvalidInput(format!(
            "connectivity must be 1, 2 or 3, got {connectivity}"
        )));
    }
    let mut out = Vec::new();
    for dz in -1i64..=1 {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let l1 = dx.abs() + dy.abs() + dz.abs();
                if l1 > 0 && l1 <= connectivity as i64 {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    Ok(out)
}

/// Five fiber-orientation peaks per voxel. Absent peaks are zero vectors;
/// peaks are axial (v and -v describe the same orientation).
#[derive(Debug, Clone, PartialEq)]
pub struct PeakField {
    geometry: GridGeometry,
    peaks: Vec<[[f32; 3]; PEAK_SLOTS]>,
}

impl PeakField {
    pub fn new(geometry: GridGeometry, peaks: Vec<[[f32; 3]; PEAK_SLOTS]>) -> Result<Self> {
        if peaks.len() != geometry.n_voxels() {
            return Err(GestaError::Geometry(format!(
                "{} peak entries for {} voxels",
                peaks.len(),
                geometry.n_voxels()
            )));
        }
        Ok(PeakField { geometry, peaks })
    }

    pub fn uniform(geometry: GridGeometry, slots: [[f32; 3]; PEAK_SLOTS]) -> Self {
        let n = geometry.n_voxels();
        PeakField {
            geometry,
            peaks: vec![slots; n],
        }
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn peaks(&self) -> &[[[f32; 3]; PEAK_SLOTS]] {
        &self.peaks
    }

    pub fn voxel_peaks(&self, ijk: [usize; 3]) -> &[[f32; 3]; PEAK_SLOTS] {
        &self.peaks[self.geometry.linear_index(ijk)]
    }

    /// Copy with every peak negated.
    pub fn flipped(&self) -> PeakField {
        let peaks = self
            .peaks
            .iter()
            .map(|slots| slots.map(|p| [-p[0], -p[1], -p[2]]))
            .collect();
        PeakField {
            geometry: self.geometry.clone(),
            peaks,
        }
    }

    /// Trilinearly interpolated peaks at a world point.
    ///
    /// Each slot is averaged across the 8 surrounding voxels after flipping
    /// every corner peak into the hemisphere of the reference peak, taken from
    /// the highest-weight corner whose slot is nonzero. Points outside the
    /// lattice get zero vectors.
    pub fn interpolate(&self, p: Vec3) -> [Vec3; PEAK_SLOTS] {
        let mut out = [[0.0; 3]; PEAK_SLOTS];
        let c = self.geometry.world_to_voxel(p);
        let dims = self.geometry.dims;
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let n = dims[a] as f64;
            if !(c[a] >= -0.5 && c[a] < n - 0.5) {
                return out;
            }
            let x = c[a].clamp(0.0, n - 1.0);
            let f = x.floor();
            lo[a] = f as usize;
            hi[a] = (lo[a] + 1).min(dims[a] - 1);
            frac[a] = x - f;
        }

        let mut corners = [(0usize, 0.0f64); 8];
        for (n, corner) in corners.iter_mut().enumerate() {
            let mut ijk = [0usize; 3];
            let mut w = 1.0;
            for a in 0..3 {
                if n >> a & 1 == 1 {
                    ijk[a] = hi[a];
                    w *= frac[a];
                } else {
                    ijk[a] = lo[a];
                    w *= 1.0 - frac[a];
                }
            }
            *corner = (self.geometry.linear_index(ijk), w);
        }
        // Highest weight first; stable order keeps ties deterministic.
        corners.sort_by(|x, y| y.1.total_cmp(&x.1));

        for (slot, acc) in out.iter_mut().enumerate() {
            let reference = corners.iter().find_map(|&(idx, w)| {
                let v = to_f64(self.peaks[idx][slot]);
                (w > 0.0 && v != [0.0; 3]).then_some(v)
            });
            let Some(reference) = reference else { continue };
            for &(idx, w) in &corners {
                if w == 0.0 {
                    continue;
                }
                let v = to_f64(self.peaks[idx][slot]);
                let sign = if vec3::dot(v, reference) < 0.0 { -w } else { w };
                *acc = vec3::add(*acc, vec3::scale(v, sign));
            }
        }
        out
    }
}

#[inline]
fn to_f64(v: [f32; 3]) -> Vec3 {
    [v[0] as f64, v[1] as f64, v[2] as f64]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(dims: [usize; 3], vs: f64) -> GridGeometry {
        GridGeometry::axis_aligned(dims, [vs; 3], [0.0; 3]).unwrap()
    }

    #[test]
    fn world_voxel_transforms() {
        let g = grid([4, 4, 4], 1.0);
        assert_eq!(g.world_to_voxel([1.5, 0.0, 0.0]), [1.5, 0.0, 0.0]);
        let g3 = grid([4, 4, 4], 3.0);
        assert_eq!(g3.world_to_voxel([6.0, 3.0, 0.0]), [2.0, 1.0, 0.0]);
        assert_eq!(g3.voxel_volume(), 27.0);
        assert_eq!(g3.voxel_size(), [3.0; 3]);
    }

    #[test]
    fn rejects_singular_affine() {
        let mut a = *grid([2, 2, 2], 1.0).affine();
        a[2][2] = 0.0;
        assert!(GridGeometry::new([2, 2, 2], a).is_err());
        assert!(GridGeometry::axis_aligned([0, 2, 2], [1.0; 3], [0.0; 3]).is_err());
    }

    #[test]
    fn single_voxel_dilation_and_erosion() {
        let g = grid([7, 7, 7], 1.0);
        let center = g.linear_index([3, 3, 3]);
        let m = VolumeGrid::mask_from_indices(g.clone(), [center]);
        assert_eq!(m.dilate(1, 1).unwrap().count(), 7);
        assert_eq!(m.dilate(2, 1).unwrap().count(), 25);
        assert_eq!(m.erode(1, 1).unwrap().count(), 0);
        assert_eq!(m.dilate(1, 3).unwrap().count(), 27);
    }

    #[test]
    fn full_mask_is_dilation_fixed_point() {
        let g = grid([4, 5, 6], 1.0);
        let m = VolumeGrid::mask_from_indices(g.clone(), 0..g.n_voxels());
        assert_eq!(m.dilate(2, 1).unwrap(), m);
    }

    #[test]
    fn block_erodes_to_inner_block() {
        let g = grid([7, 7, 7], 1.0);
        let mut idx = Vec::new();
        for k in 1..6 {
            for j in 1..6 {
                for i in 1..6 {
                    idx.push(g.linear_index([i, j, k]));
                }
            }
        }
        let m = VolumeGrid::mask_from_indices(g.clone(), idx);
        let e = m.erode(1, 1).unwrap();
        assert_eq!(e.count(), 27);
        assert!(e.contains_point([2.0, 2.0, 2.0]) && !e.contains_point([1.0, 1.0, 1.0]));
    }

    #[test]
    fn morphology_rejects_scalar_payload() {
        let g = grid([2, 2, 2], 1.0);
        let v = VolumeGrid::new(g, Payload::Scalar(vec![0.5; 8])).unwrap();
        assert!(matches!(v.dilate(1, 1), Err(GestaError::PayloadType(_))));
        assert!(v.erode(1, 1).is_err());
        assert!(structuring_offsets(0).is_err());
    }

    #[test]
    fn traversal_axis_aligned_three_mm_grid() {
        let g = grid([8, 8, 8], 3.0);
        // From the center of voxel (1,2,2) to the center of voxel (4,2,2).
        let s = Streamline::new(vec![[3.0, 6.0, 6.0], [12.0, 6.0, 6.0]]).unwrap();
        let got = g.voxels_traversed(&s);
        let want: BTreeSet<_> = (1..=4).map(|i| g.linear_index([i, 2, 2])).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn traversal_of_point_streamline() {
        let g = grid([8, 8, 8], 3.0);
        let s = Streamline::new(vec![[9.0, 9.0, 9.0], [9.0, 9.0, 9.0]]).unwrap();
        let got = g.voxels_traversed(&s);
        assert_eq!(got.into_iter().collect::<Vec<_>>(), vec![g.linear_index([3, 3, 3])]);
    }

    #[test]
    fn traversal_diagonal_in_plane() {
        // Segment from (0.1, 0.2) to (2.2, 1.6) in a unit grid, z fixed: hand-traced cells
        // (0,0) -> (1,0) -> (1,1) -> (2,1) -> (2,2)? Check against crossings:
        // shifted p0 = (0.6, 0.7), p1 = (2.7, 2.1); x crosses 1 at t=0.190, 2 at t=0.667;
        // y crosses 1 at t=0.214, 2 at t=0.929. Order: x1, y1, x2, y2.
        let g = grid([4, 4, 1], 1.0);
        let s = Streamline::new(vec![[0.1, 0.2, 0.0], [2.2, 1.6, 0.0]]).unwrap();
        let got: Vec<_> = g.voxels_traversed(&s).into_iter().map(|i| g.unravel(i)).collect();
        let mut want = vec![[0, 0, 0], [1, 0, 0], [1, 1, 0], [2, 1, 0], [2, 2, 0]];
        want.sort_by_key(|v| g.linear_index(*v));
        assert_eq!(got, want);
    }

    #[test]
    fn traversal_clips_outside_segments() {
        let g = grid([4, 4, 4], 1.0);
        let outside = Streamline::new(vec![[-5.0, -5.0, -5.0], [-2.0, -1.0, -3.0]]).unwrap();
        assert!(g.voxels_traversed(&outside).is_empty());
        let through = Streamline::new(vec![[-5.0, 1.0, 1.0], [10.0, 1.0, 1.0]]).unwrap();
        assert_eq!(g.voxels_traversed(&through).len(), 4);
    }

    #[test]
    fn interpolation_at_center_and_axial_midpoint() {
        let g = grid([2, 1, 1], 1.0);
        let mut a = [[0.0f32; 3]; PEAK_SLOTS];
        let mut b = [[0.0f32; 3]; PEAK_SLOTS];
        a[0] = [1.0, 0.0, 0.0];
        b[0] = [-1.0, 0.0, 0.0];
        let f = PeakField::new(g, vec![a, b]).unwrap();
        assert_eq!(f.interpolate([0.0, 0.0, 0.0])[0], [1.0, 0.0, 0.0]);
        let mid = f.interpolate([0.5, 0.0, 0.0])[0];
        assert!((mid[0].abs() - 1.0).abs() < 1e-12 && mid[1] == 0.0 && mid[2] == 0.0);
        assert_eq!(f.interpolate([5.0, 0.0, 0.0]), [[0.0; 3]; PEAK_SLOTS]);
    }

    #[test]
    fn constant_field_interpolates_constant() {
        let g = grid([3, 3, 3], 2.0);
        let mut slots = [[0.0f32; 3]; PEAK_SLOTS];
        slots[0] = [0.0, 0.6, 0.8];
        slots[1] = [1.0, 0.0, 0.0];
        let f = PeakField::uniform(g, slots);
        let got = f.interpolate([1.3, 2.9, 3.7]);
        assert!((got[0][1] - 0.6).abs() < 1e-6 && (got[0][2] - 0.8).abs() < 1e-6);
        assert!((got[1][0] - 1.0).abs() < 1e-12);
        assert_eq!(got[2], [0.0; 3]);
    }
}
