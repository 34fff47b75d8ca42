//! Synthetic Fiber-Cup-style phantom: seven planar bundles in a thin
//! 64 x 64 x 3 volume with ground-truth streamlines, tissue masks and a
//! five-peak orientation field derived from the streamline tangents.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{GestaError, Result};
use crate::geometry::{Streamline, Tractogram, STREAMLINE_VERTICES};
use crate::rng;
use crate::vec3::{self, Vec3};
use crate::volume::{GridGeometry, PeakField, VolumeGrid, PEAK_SLOTS};

/// One bundle: a planar centerline through control points (Catmull-Rom) and
/// the radius its streamlines are confined to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleSpec {
    pub name: String,
    /// In-plane (x, y) control points in millimeters.
    pub control_points: Vec<[f64; 2]>,
    pub radius_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub voxel_size_mm: f64,
    pub bundles: Vec<BundleSpec>,
    pub streamlines_per_bundle: usize,
    /// Standard deviation of the in-plane offset from the centerline.
    pub jitter_std_mm: f64,
    /// Standard deviation of the through-plane offset.
    pub z_jitter_std_mm: f64,
    /// Largest through-plane offset.
    pub z_extent_mm: f64,
    /// Standard deviation of the linear change of the in-plane offset from
    /// one end of a streamline to the other.
    pub fan_std_mm: f64,
    /// Angle under which two segment directions in a voxel share a peak.
    pub peak_cluster_angle_deg: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [64, 64, 3],
            voxel_size_mm: 3.0,
            bundles: default_bundles(),
            streamlines_per_bundle: 1000,
            jitter_std_mm: 3.0,
            z_jitter_std_mm: 1.5,
            z_extent_mm: 2.5,
            fan_std_mm: 3.0,
            peak_cluster_angle_deg: 30.0,
            seed: 1,
        }
    }
}

fn bundle(name: &str, radius_mm: f64, points: &[[f64; 2]]) -> BundleSpec {
    BundleSpec {
        name: name.into(),
        control_points: points.to_vec(),
        radius_mm,
    }
}

/// Seven bundles: two U-shapes, a long arc, a crossing pair and a kissing pair.
pub fn default_bundles() -> Vec<BundleSpec> {
    vec![
        bundle(
            "u_left",
            7.0,
            &[
                [25.0, 175.0],
                [25.0, 130.0],
                [48.0, 108.0],
                [71.0, 130.0],
                [71.0, 175.0],
            ],
        ),
        bundle(
            "arc_bottom",
            7.0,
            &[[15.0, 60.0], [45.0, 25.0], [95.0, 15.0], [145.0, 25.0], [175.0, 60.0]],
        ),
        bundle("cross_a", 7.0, &[[100.0, 60.0], [135.0, 95.0], [170.0, 130.0]]),
        bundle("cross_b", 7.0, &[[100.0, 130.0], [135.0, 95.0], [170.0, 60.0]]),
        bundle("kiss_left", 6.0, &[[95.0, 182.0], [114.0, 158.0], [95.0, 134.0]]),
        bundle("kiss_right", 6.0, &[[145.0, 182.0], [126.0, 158.0], [145.0, 134.0]]),
        bundle(
            "s_curve",
            7.0,
            &[[15.0, 80.0], [35.0, 97.0], [58.0, 82.0], [80.0, 67.0], [100.0, 85.0]],
        ),
    ]
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.dims.contains(&0) {
            problems.push(format!("dims must be positive, got {:?}", self.dims));
        }
        if !(self.voxel_size_mm > 0.0 && self.voxel_size_mm.is_finite()) {
            problems.push(format!("voxel_size_mm must be positive, got {}", self.voxel_size_mm));
        }
        if self.bundles.len() < 2 {
            problems.push(format!("need at least 2 bundles, got {}", self.bundles.len()));
        }
        if self.streamlines_per_bundle == 0 {
            problems.push("streamlines_per_bundle must be positive".into());
        }
        if !(self.jitter_std_mm >= 0.0) || !(self.z_jitter_std_mm >= 0.0) || !(self.fan_std_mm >= 0.0) {
            problems.push("jitter standard deviations must be non-negative".into());
        }
        if !(self.z_extent_mm >= 0.0) {
            problems.push("z_extent_mm must be non-negative".into());
        }
        if !(self.peak_cluster_angle_deg > 0.0 && self.peak_cluster_angle_deg <= 90.0) {
            problems.push("peak_cluster_angle_deg must lie in (0, 90]".into());
        }
        for b in &self.bundles {
            if b.control_points.len() < 2 {
                problems.push(format!("bundle {}: need at least 2 control points", b.name));
            }
            if !(b.radius_mm > 0.0) {
                problems.push(format!("bundle {}: radius must be positive", b.name));
            } else if self.jitter_std_mm >= b.radius_mm {
                problems.push(format!(
                    "bundle {}: jitter {} mm must be below the radius {} mm",
                    b.name, self.jitter_std_mm, b.radius_mm
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(GestaError::Spec(problems))
        }
    }

    pub fn geometry(&self) -> Result<GridGeometry> {
        GridGeometry::axis_aligned(self.dims, [self.voxel_size_mm; 3], [0.0; 3])
    }

    /// Through-plane coordinate of the centerlines: the middle slice.
    pub fn z_center(&self) -> f64 {
        self.voxel_size_mm * (self.dims[2] as f64 - 1.0) / 2.0
    }
}

/// Ground truth and derived maps of a generated phantom.
#[derive(Debug, Clone)]
pub struct PhantomDataset {
    /// Streamlines labeled 1..=n_bundles in catalog order.
    pub tractogram: Tractogram,
    pub wm: VolumeGrid,
    pub gm: VolumeGrid,
    pub brain: VolumeGrid,
    pub bundle_masks: BTreeMap<u32, VolumeGrid>,
    pub peaks: PeakField,
}

/// Centerline samples and unit in-plane tangents via uniform Catmull-Rom.
fn centerline(points: &[[f64; 2]], samples_per_piece: usize) -> Vec<([f64; 2], [f64; 2])> {
    let n = points.len();
    let get = |i: isize| -> [f64; 2] {
        if i < 0 {
            [2.0 * points[0][0] - points[1][0], 2.0 * points[0][1] - points[1][1]]
        } else if i as usize >= n {
            [
                2.0 * points[n - 1][0] - points[n - 2][0],
                2.0 * points[n - 1][1] - points[n - 2][1],
            ]
        } else {
            points[i as usize]
        }
    };
    let mut out = Vec::new();
    for seg in 0..n - 1 {
        let (p0, p1, p2, p3) = (
            get(seg as isize - 1),
            get(seg as isize),
            get(seg as isize + 1),
            get(seg as isize + 2),
        );
        let last = seg == n - 2;
        let count = if last { samples_per_piece + 1 } else { samples_per_piece };
        for k in 0..count {
            let t = k as f64 / samples_per_piece as f64;
            let (t2, t3) = (t * t, t * t * t);
            let mut pos = [0.0; 2];
            let mut tan = [0.0; 2];
            for a in 0..2 {
                pos[a] = 0.5
                    * (2.0 * p1[a]
                        + (-p0[a] + p2[a]) * t
                        + (2.0 * p0[a] - 5.0 * p1[a] + 4.0 * p2[a] - p3[a]) * t2
                        + (-p0[a] + 3.0 * p1[a] - 3.0 * p2[a] + p3[a]) * t3);
                tan[a] = 0.5
                    * ((-p0[a] + p2[a])
                        + 2.0 * (2.0 * p0[a] - 5.0 * p1[a] + 4.0 * p2[a] - p3[a]) * t
                        + 3.0 * (-p0[a] + 3.0 * p1[a] - 3.0 * p2[a] + p3[a]) * t2);
            }
            let len = (tan[0] * tan[0] + tan[1] * tan[1]).sqrt().max(1e-12);
            out.push((pos, [tan[0] / len, tan[1] / len]));
        }
    }
    out
}

fn truncated_normal(rng: &mut impl Rng, std: f64, bound: f64) -> f64 {
    if std == 0.0 || bound == 0.0 {
        return 0.0;
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= bound {
            return v;
        }
    }
}

fn bundle_streamlines(spec: &PhantomSpec, b: &BundleSpec, label: u32) -> Result<Vec<Streamline>> {
    let line = centerline(&b.control_points, 64);
    let z0 = spec.z_center();
    let mut rng = rng::stream(spec.seed, &[rng::TAG_PHANTOM, label as u64]);
    let mut out = Vec::with_capacity(spec.streamlines_per_bundle);
    let last = (line.len() - 1) as f64;
    for _ in 0..spec.streamlines_per_bundle {
        // Offset at the middle plus a linear fan, kept inside the bundle radius.
        let (mid, fan) = loop {
            let mid = truncated_normal(&mut rng, spec.jitter_std_mm, b.radius_mm);
            let fan = truncated_normal(&mut rng, spec.fan_std_mm, 2.0 * b.radius_mm);
            if mid.abs() + 0.5 * fan.abs() <= b.radius_mm {
                break (mid, fan);
            }
        };
        let dz = truncated_normal(&mut rng, spec.z_jitter_std_mm, spec.z_extent_mm);
        let vertices: Vec<Vec3> = line
            .iter()
            .enumerate()
            .map(|(k, (p, t))| {
                let off = mid + fan * (k as f64 / last - 0.5);
                [p[0] - t[1] * off, p[1] + t[0] * off, z0 + dz]
            })
            .collect();
        out.push(Streamline::new(vertices)?.resample(STREAMLINE_VERTICES)?);
    }
    Ok(out)
}

#[derive(Clone, Copy)]
struct Cluster {
    sum: Vec3,
    count: usize,
}

/// Generates the phantom; deterministic for a given spec.
pub fn generate(spec: &PhantomSpec) -> Result<PhantomDataset> {
    spec.validate()?;
    let geometry = spec.geometry()?;

    let mut streamlines = Vec::new();
    let mut labels = Vec::new();
    let mut names = BTreeMap::new();
    let mut outside = Vec::new();
    for (i, b) in spec.bundles.iter().enumerate() {
        let label = i as u32 + 1;
        names.insert(label, b.name.clone());
        let bundle = bundle_streamlines(spec, b, label)?;
        if bundle
            .iter()
            .any(|s| s.vertices().iter().any(|&v| geometry.voxel_of_point(v).is_none()))
        {
            outside.push(format!("bundle {} leaves the grid bounds", b.name));
        }
        labels.extend(std::iter::repeat_n(label, bundle.len()));
        streamlines.extend(bundle);
    }
    if !outside.is_empty() {
        return Err(GestaError::Spec(outside));
    }

    let n_vox = geometry.n_voxels();
    let mut wm = vec![false; n_vox];
    let mut endpoints = vec![false; n_vox];
    let mut per_bundle: BTreeMap<u32, Vec<bool>> = BTreeMap::new();
    let mut clusters: Vec<Vec<Cluster>> = vec![Vec::new(); n_vox];
    let cos_merge = spec.peak_cluster_angle_deg.to_radians().cos();

    for (s, &label) in streamlines.iter().zip(&labels) {
        let mask = per_bundle.entry(label).or_insert_with(|| vec![false; n_vox]);
        for end in [s.first(), s.last()] {
            if let Some(ijk) = geometry.voxel_of_point(end) {
                endpoints[geometry.linear_index(ijk)] = true;
            }
        }
        for (a, b) in s.segments() {
            let d = vec3::sub(b, a);
            let n = vec3::norm(d);
            if n == 0.0 {
                continue;
            }
            let dir = vec3::scale(d, 1.0 / n);
            geometry.rasterize_segment(a, b, |idx| {
                wm[idx] = true;
                mask[idx] = true;
                add_direction(&mut clusters[idx], dir, cos_merge);
            });
        }
    }

    let peaks: Vec<[[f32; 3]; PEAK_SLOTS]> = clusters.into_iter().map(voxel_peaks).collect();

    let wm = VolumeGrid::mask_from_indices(geometry.clone(), true_indices(&wm));
    let gm = VolumeGrid::mask_from_indices(geometry.clone(), true_indices(&endpoints)).dilate(1, 1)?;
    let brain = wm.union(&gm)?.dilate(2, 1)?;
    let bundle_masks = per_bundle
        .into_iter()
        .map(|(l, m)| (l, VolumeGrid::mask_from_indices(geometry.clone(), true_indices(&m))))
        .collect();
    let mut tractogram = Tractogram::with_labels(streamlines, labels)?;
    tractogram.label_names = names;
    tractogram.space_tag = "phantom_mm".into();

    Ok(PhantomDataset {
        tractogram,
        wm,
        gm,
        brain,
        bundle_masks,
        peaks: PeakField::new(geometry, peaks)?,
    })
}

fn true_indices(v: &[bool]) -> impl Iterator<Item = usize> + '_ {
    v.iter().enumerate().filter_map(|(i, &b)| b.then_some(i))
}

/// Greedy axial clustering: join the closest cluster within the merge cone.
fn add_direction(clusters: &mut Vec<Cluster>, dir: Vec3, cos_merge: f64) {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in clusters.iter().enumerate() {
        let cos = vec3::dot(c.sum, dir) / vec3::norm(c.sum);
        if cos.abs() >= cos_merge && best.is_none_or(|(_, b)| cos.abs() > b.abs()) {
            best = Some((i, cos));
        }
    }
    match best {
        Some((i, cos)) => {
            let signed = if cos < 0.0 { vec3::scale(dir, -1.0) } else { dir };
            clusters[i].sum = vec3::add(clusters[i].sum, signed);
            clusters[i].count += 1;
        }
        None => clusters.push(Cluster { sum: dir, count: 1 }),
    }
}

/// Up to five unit mean directions scaled by their share of the voxel's segments.
fn voxel_peaks(mut clusters: Vec<Cluster>) -> [[f32; 3]; PEAK_SLOTS] {
    let mut out = [[0.0f32; 3]; PEAK_SLOTS];
    let total: usize = clusters.iter().map(|c| c.count).sum();
    clusters.sort_by_key(|c| std::cmp::Reverse(c.count));
    for (slot, c) in out.iter_mut().zip(clusters.iter()) {
        let n = vec3::norm(c.sum);
        if n == 0.0 {
            continue;
        }
        let v = vec3::scale(c.sum, c.count as f64 / total as f64 / n);
        *slot = [v[0] as f32, v[1] as f32, v[2] as f32];
    }
    out
}

/// Random per-bundle subset of `⌈P/100 · count⌉` streamlines (at least 2).
///
/// Bundles with fewer than 2 streamlines are dropped and reported in the
/// returned warnings. The selection keeps input order.
pub fn subsample_seeds(t: &Tractogram, percent: f64, seed: u64) -> Result<(Tractogram, Vec<String>)> {
    if !(percent > 0.0 && percent <= 100.0) {
        return Err(GestaError::InvalidInput(format!(
            "seed percentage must lie in (0, 100], got {percent}"
        )));
    }
    let mut warnings = Vec::new();
    let mut out = Tractogram {
        streamlines: Vec::new(),
        labels: t.labels.as_ref().map(|_| Vec::new()),
        label_names: t.label_names.clone(),
        space_tag: t.space_tag.clone(),
    };
    for id in t.bundle_ids() {
        let members: Vec<usize> = (0..t.len()).filter(|&i| t.label(i).unwrap_or(0) == id).collect();
        if members.len() < 2 {
            let msg = format!("bundle {id} has {} streamline(s); excluded", members.len());
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        let want = ((percent * members.len() as f64 / 100.0).ceil() as usize).clamp(2, members.len());
        let mut rng = rng::stream(seed, &[rng::TAG_SUBSAMPLE, id as u64]);
        let mut picked = index::sample(&mut rng, members.len(), want).into_vec();
        picked.sort_unstable();
        for p in picked {
            out.streamlines.push(t.streamlines[members[p]].clone());
            if let Some(l) = out.labels.as_mut() {
                l.push(id);
            }
        }
    }
    Ok((out, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> PhantomSpec {
        PhantomSpec {
            streamlines_per_bundle: 40,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small_spec()).unwrap();
        let b = generate(&small_spec()).unwrap();
        assert_eq!(a.tractogram, b.tractogram);
        assert_eq!(a.peaks, b.peaks);
        assert_eq!(a.tractogram.bundle_ids(), (1..=7).collect::<Vec<_>>());
    }

    #[test]
    fn zero_jitter_bundles_share_voxels() {
        let spec = PhantomSpec {
            jitter_std_mm: 0.0,
            z_jitter_std_mm: 0.0,
            fan_std_mm: 0.0,
            streamlines_per_bundle: 5,
            ..PhantomSpec::default()
        };
        let d = generate(&spec).unwrap();
        let g = d.wm.geometry();
        for id in d.tractogram.bundle_ids() {
            let sets: Vec<_> = d.tractogram.bundle(id).iter().map(|s| g.voxels_traversed(s)).collect();
            assert!(sets.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn spec_errors_are_collected() {
        let spec = PhantomSpec {
            dims: [0, 64, 3],
            jitter_std_mm: 50.0,
            bundles: vec![default_bundles()[0].clone()],
            ..PhantomSpec::default()
        };
        match spec.validate() {
            Err(GestaError::Spec(p)) => assert!(p.len() >= 3, "{p:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn out_of_bounds_bundle_is_named() {
        let mut spec = small_spec();
        spec.bundles[2].control_points[0] = [-40.0, 60.0];
        match generate(&spec) {
            Err(GestaError::Spec(p)) => assert!(p.iter().any(|m| m.contains("cross_a"))),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn subsample_counts() {
        let d = generate(&PhantomSpec {
            streamlines_per_bundle: 1000,
            bundles: default_bundles()[..2].to_vec(),
            ..PhantomSpec::default()
        })
        .unwrap();
        let (s3, w) = subsample_seeds(&d.tractogram, 3.0, 4).unwrap();
        assert!(w.is_empty());
        assert_eq!(s3.bundle(1).len(), 30);
        assert_eq!(s3.bundle(2).len(), 30);
        let (again, _) = subsample_seeds(&d.tractogram, 3.0, 4).unwrap();
        assert_eq!(s3, again);
        let (all, _) = subsample_seeds(&d.tractogram, 100.0, 4).unwrap();
        assert_eq!(all, d.tractogram);
        assert!(subsample_seeds(&d.tractogram, 0.0, 4).is_err());
    }

    #[test]
    fn subsample_drops_singleton_bundles() {
        let s = Streamline::new(vec![[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
        let t = Tractogram::with_labels(vec![s.clone(), s.clone(), s], vec![1, 1, 2]).unwrap();
        let (out, warnings) = subsample_seeds(&t, 50.0, 0).unwrap();
        assert_eq!(out.bundle_ids(), vec![1]);
        assert_eq!(out.len(), 2);
        assert_eq!(warnings.len(), 1);
    }
}
