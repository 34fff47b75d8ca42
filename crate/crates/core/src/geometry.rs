//! Streamline polylines and the geometric features consumed by the evaluator.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{GestaError, Result};
use crate::vec3::{self, Vec3};
use crate::volume::VolumeGrid;

/// Vertex count every streamline is resampled to before encoding.
pub const STREAMLINE_VERTICES: usize = 256;

/// An ordered 3D polyline in millimeter world coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Streamline {
    vertices: Vec<Vec3>,
}

impl Streamline {
    /// Builds a streamline, rejecting fewer than two vertices or non-finite coordinates.
    pub fn new(vertices: Vec<Vec3>) -> Result<Self> {
        if vertices.len() < 2 {
            return Err(GestaError::InvalidStreamline(format!(
                "{} vertex(es), need at least 2",
                vertices.len()
            )));
        }
        if let Some(i) = vertices.iter().position(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(GestaError::InvalidStreamline(format!(
                "non-finite coordinate at vertex {i}"
            )));
        }
        Ok(Streamline { vertices })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn first(&self) -> Vec3 {
        self.vertices[0]
    }

    pub fn last(&self) -> Vec3 {
        self.vertices[self.vertices.len() - 1]
    }

    pub fn into_vertices(self) -> Vec<Vec3> {
        self.vertices
    }

    pub fn reversed(&self) -> Streamline {
        let mut vertices = self.vertices.clone();
        vertices.reverse();
        Streamline { vertices }
    }

    pub fn segments(&self) -> impl Iterator<Item = (Vec3, Vec3)> + '_ {
        self.vertices.windows(2).map(|w| (w[0], w[1]))
    }

    /// Total polyline length in millimeters.
    pub fn length(&self) -> f64 {
        self.segments().map(|(a, b)| vec3::distance(a, b)).sum()
    }

    /// Total unsigned turning angle in degrees.
    ///
    /// Zero-length segments are dropped before measuring turns, so duplicated
    /// vertices neither add nor hide curvature.
    pub fn winding(&self) -> f64 {
        let mut total = 0.0;
        let mut previous: Option<Vec3> = None;
        for (a, b) in self.segments() {
            let d = vec3::sub(b, a);
            if vec3::norm(d) == 0.0 {
                continue;
            }
            if let Some(p) = previous {
                total += vec3::angle_between(p, d);
            }
            previous = Some(d);
        }
        total.to_degrees()
    }

    /// Unit direction of every segment; `None` marks a zero-length segment.
    pub fn local_orientations(&self) -> Vec<Option<Vec3>> {
        self.segments()
            .map(|(a, b)| {
                let d = vec3::sub(b, a);
                let n = vec3::norm(d);
                (n > 0.0).then(|| vec3::scale(d, 1.0 / n))
            })
            .collect()
    }

    /// Resamples to `n` vertices spaced evenly in arc length along this polyline.
    pub fn resample(&self, n: usize) -> Result<Streamline> {
        if n < 2 {
            return Err(GestaError::InvalidInput(format!(
                "resample target must be at least 2 vertices, got {n}"
            )));
        }
        let mut cumulative = Vec::with_capacity(self.vertices.len());
        let mut acc = 0.0;
        cumulative.push(0.0);
        for (a, b) in self.segments() {
            acc += vec3::distance(a, b);
            cumulative.push(acc);
        }
        let total = acc;
        if !(total > 0.0) {
            return Err(GestaError::InvalidStreamline(
                "zero-length streamline cannot be resampled".into(),
            ));
        }

        let mut out = Vec::with_capacity(n);
        out.push(self.first());
        let mut seg = 0;
        for j in 1..n - 1 {
            let target = total * j as f64 / (n - 1) as f64;
            while seg + 2 < cumulative.len() && cumulative[seg + 1] < target {
                seg += 1;
            }
            let span = cumulative[seg + 1] - cumulative[seg];
            let t = if span > 0.0 {
                ((target - cumulative[seg]) / span).clamp(0.0, 1.0)
            } else {
                0.0
            };
            out.push(vec3::lerp(self.vertices[seg], self.vertices[seg + 1], t));
        }
        out.push(self.last());
        Ok(Streamline { vertices: out })
    }

    /// Keeps the longest contiguous run of vertices inside `mask`.
    ///
    /// Returns `None` when fewer than two vertices survive. Ties keep the
    /// earliest run.
    pub fn trim_to_mask(&self, mask: &VolumeGrid) -> Option<Streamline> {
        let mut best = (0usize, 0usize);
        let mut start = None;
        for (i, &v) in self.vertices.iter().enumerate() {
            if mask.contains_point(v) {
                let s = *start.get_or_insert(i);
                if i + 1 - s > best.1 - best.0 {
                    best = (s, i + 1);
                }
            } else {
                start = None;
            }
        }
        (best.1 - best.0 >= 2).then(|| Streamline {
            vertices: self.vertices[best.0..best.1].to_vec(),
        })
    }
}

/// A set of streamlines with optional per-streamline bundle labels.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Tractogram {
    pub streamlines: Vec<Streamline>,
    pub labels: Option<Vec<u32>>,
    /// Human-readable bundle names keyed by label.
    pub label_names: BTreeMap<u32, String>,
    pub space_tag: String,
}

impl Tractogram {
    pub fn new(streamlines: Vec<Streamline>) -> Self {
        Tractogram {
            streamlines,
            labels: None,
            label_names: BTreeMap::new(),
            space_tag: "world_mm".into(),
        }
    }

    pub fn with_labels(streamlines: Vec<Streamline>, labels: Vec<u32>) -> Result<Self> {
        if streamlines.len() != labels.len() {
            return Err(GestaError::InvalidInput(format!(
                "{} labels for {} streamlines",
                labels.len(),
                streamlines.len()
            )));
        }
        Ok(Tractogram {
            labels: Some(labels),
            ..Tractogram::new(streamlines)
        })
    }

    pub fn len(&self) -> usize {
        self.streamlines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streamlines.is_empty()
    }

    pub fn label(&self, i: usize) -> Option<u32> {
        self.labels.as_ref().map(|l| l[i])
    }

    /// Distinct labels in ascending order; an unlabeled tractogram is bundle 0.
    pub fn bundle_ids(&self) -> Vec<u32> {
        match &self.labels {
            Some(labels) => {
                let mut ids = labels.clone();
                ids.sort_unstable();
                ids.dedup();
                ids
            }
            None if self.is_empty() => Vec::new(),
            None => vec![0],
        }
    }

    /// Streamlines of one bundle, in input order.
    pub fn bundle(&self, id: u32) -> Vec<&Streamline> {
        match &self.labels {
            Some(labels) => self
                .streamlines
                .iter()
                .zip(labels)
                .filter(|(_, &l)| l == id)
                .map(|(s, _)| s)
                .collect(),
            None if id == 0 => self.streamlines.iter().collect(),
            None => Vec::new(),
        }
    }

    /// Splits into one tractogram per bundle, keyed by label.
    pub fn split_by_bundle(&self) -> BTreeMap<u32, Tractogram> {
        self.bundle_ids()
            .into_iter()
            .map(|id| {
                let streamlines: Vec<_> = self.bundle(id).into_iter().cloned().collect();
                let n = streamlines.len();
                let mut t = Tractogram::with_labels(streamlines, vec![id; n]).expect("label count matches");
                t.space_tag = self.space_tag.clone();
                if let Some(name) = self.label_names.get(&id) {
                    t.label_names.insert(id, name.clone());
                }
                (id, t)
            })
            .collect()
    }

    /// Appends `other`, carrying labels when both sides have them.
    pub fn extend(&mut self, other: Tractogram) {
        let own_len = self.streamlines.len();
        self.labels = match (self.labels.take(), other.labels) {
            (Some(mut a), Some(b)) => {
                a.extend(b);
                Some(a)
            }
            (None, Some(b)) if own_len == 0 => Some(b),
            _ => None,
        };
        self.streamlines.extend(other.streamlines);
        self.label_names.extend(other.label_names);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn s(v: &[[f64; 3]]) -> Streamline {
        Streamline::new(v.to_vec()).unwrap()
    }

    fn arc(radius: f64, sweep: f64, n: usize) -> Streamline {
        s(&(0..n)
            .map(|i| {
                let t = sweep * i as f64 / (n - 1) as f64;
                [radius * t.cos(), radius * t.sin(), 0.0]
            })
            .collect::<Vec<_>>())
    }

    #[test]
    fn rejects_short_or_non_finite() {
        assert!(Streamline::new(vec![[0.0; 3]]).is_err());
        assert!(Streamline::new(vec![[0.0; 3], [f64::NAN, 0.0, 0.0]]).is_err());
    }

    #[test]
    fn resample_straight_segment() {
        let r = s(&[[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]]).resample(3).unwrap();
        assert_eq!(r.vertices(), &[[0.0, 0.0, 0.0], [5.0, 0.0, 0.0], [10.0, 0.0, 0.0]]);
    }

    #[test]
    fn resample_identity_on_equidistant_input() {
        let line = s(&(0..9).map(|i| [i as f64 * 1.5, 2.0, -1.0]).collect::<Vec<_>>());
        let r = line.resample(9).unwrap();
        for (a, b) in r.vertices().iter().zip(line.vertices()) {
            assert!(vec3::distance(*a, *b) < 1e-9);
        }
    }

    #[test]
    fn resample_preserves_quarter_circle_length() {
        let quarter = arc(1.0, PI / 2.0, 1000);
        let r = quarter.resample(256).unwrap();
        assert_eq!(r.len(), 256);
        assert!((r.length() - PI / 2.0).abs() / (PI / 2.0) < 1e-3);
    }

    #[test]
    fn resample_degenerate_is_error() {
        let p = s(&[[1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]);
        assert!(matches!(p.resample(5), Err(GestaError::InvalidStreamline(_))));
        assert!(s(&[[0.0; 3], [1.0, 0.0, 0.0]]).resample(1).is_err());
    }

    #[test]
    fn length_cases() {
        assert_eq!(s(&[[0.0, 0.0, 0.0], [3.0, 4.0, 0.0]]).length(), 5.0);
        assert_eq!(s(&[[2.0, 2.0, 2.0], [2.0, 2.0, 2.0]]).length(), 0.0);
        let semi = arc(10.0, PI, 20_000);
        assert!((semi.length() - 10.0 * PI).abs() / (10.0 * PI) < 1e-3);
    }

    #[test]
    fn winding_cases() {
        let line = s(&[[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [3.0, 3.0, 3.0], [3.5, 3.5, 3.5]]);
        assert_eq!(line.winding(), 0.0);
        let l_shape = s(&[[0.0, 0.0, 0.0], [5.0, 0.0, 0.0], [5.0, 5.0, 0.0]]);
        assert!((l_shape.winding() - 90.0).abs() < 1e-12);
        let circle = arc(5.0, 2.0 * PI, 2001);
        assert!((circle.winding() - 360.0).abs() < 1.0);
    }

    #[test]
    fn winding_skips_duplicate_vertices() {
        let l_shape = s(&[[0.0, 0.0, 0.0], [5.0, 0.0, 0.0], [5.0, 0.0, 0.0], [5.0, 5.0, 0.0]]);
        assert!((l_shape.winding() - 90.0).abs() < 1e-12);
        let o = l_shape.local_orientations();
        assert_eq!(o.len(), 3);
        assert!(o[1].is_none());
    }

    #[test]
    fn local_orientations_are_unit() {
        let o = s(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).local_orientations();
        assert_eq!(o, vec![Some([1.0, 0.0, 0.0])]);
        let o = s(&[[0.0, 0.0, 0.0], [1.0, 1.0, 0.0]]).local_orientations();
        let h = 2f64.sqrt() / 2.0;
        let d = o[0].unwrap();
        assert!((d[0] - h).abs() < 1e-15 && (d[1] - h).abs() < 1e-15 && d[2] == 0.0);
    }

    #[test]
    fn tractogram_bundles() {
        let a = s(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        let t = Tractogram::with_labels(vec![a.clone(), a.clone(), a], vec![2, 1, 2]).unwrap();
        assert_eq!(t.bundle_ids(), vec![1, 2]);
        assert_eq!(t.bundle(2).len(), 2);
        let split = t.split_by_bundle();
        assert_eq!(split[&1].len(), 1);
        assert!(Tractogram::with_labels(vec![], vec![1]).is_err());
    }
}
