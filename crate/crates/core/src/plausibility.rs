//! Anatomical plausibility of candidate streamlines: anatomy (WM occupancy),
//! direction (alignment with fiber-orientation peaks), geometry (length,
//! winding) and optionally connectivity (GM endpoints).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GestaError, Result};
use crate::geometry::{Streamline, Tractogram};
use crate::vec3;
use crate::volume::{PeakField, VolumeGrid};

/// White-matter occupancy rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WmMode {
    /// Every non-skipped vertex must lie in WM.
    Binary,
    /// At least `wm_ratio` of the non-skipped vertices must lie in WM.
    Ratio,
}

/// Where peaks are looked up for a segment's orientation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeakLookup {
    Midpoint,
    /// The segment's first vertex.
    Vertex,
}

/// Thresholds of the plausibility criteria.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriteriaConfig {
    pub length_min_mm: f64,
    pub length_max_mm: f64,
    pub winding_max_deg: f64,
    /// Local orientation angle to the closest fODF peak.
    pub loa_max_angle_deg: f64,
    pub loa_compliance_ratio: f64,
    pub wm_mode: WmMode,
    pub wm_ratio: f64,
    /// Vertices ignored at each end by the WM check.
    pub endpoint_skip: usize,
    /// When false the skipped end vertices still count in the ratio denominator.
    pub wm_ratio_excludes_skipped: bool,
    pub gm_required: bool,
    pub mask_dilate_iterations: usize,
    pub brain_erode_iterations: usize,
    /// Binary phantom brain masks are used without erosion.
    pub erode_brain: bool,
    pub connectivity: u8,
    pub peak_lookup: PeakLookup,
}

impl Default for CriteriaConfig {
    fn default() -> Self {
        Self::fiber_cup()
    }
}

impl CriteriaConfig {
    pub fn fiber_cup() -> Self {
        CriteriaConfig {
            length_min_mm: 20.0,
            length_max_mm: 220.0,
            winding_max_deg: 330.0,
            loa_max_angle_deg: 30.0,
            loa_compliance_ratio: 0.75,
            wm_mode: WmMode::Binary,
            wm_ratio: 0.95,
            endpoint_skip: 10,
            wm_ratio_excludes_skipped: true,
            gm_required: false,
            mask_dilate_iterations: 2,
            brain_erode_iterations: 2,
            erode_brain: false,
            connectivity: 1,
            peak_lookup: PeakLookup::Midpoint,
        }
    }

    pub fn ismrm2015() -> Self {
        CriteriaConfig {
            wm_mode: WmMode::Ratio,
            erode_brain: true,
            ..Self::fiber_cup()
        }
    }

    pub fn hcp() -> Self {
        CriteriaConfig {
            winding_max_deg: 340.0,
            loa_max_angle_deg: 40.0,
            ..Self::ismrm2015()
        }
    }

    pub fn bil_gin_callosal() -> Self {
        CriteriaConfig {
            winding_max_deg: 360.0,
            loa_max_angle_deg: 40.0,
            ..Self::ismrm2015()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "fiber_cup" | "fibercup" => Some(Self::fiber_cup()),
            "ismrm2015" => Some(Self::ismrm2015()),
            "hcp" => Some(Self::hcp()),
            "bil_gin" | "bil_gin_callosal" => Some(Self::bil_gin_callosal()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.wm_ratio > 0.0 && self.wm_ratio <= 1.0) {
            problems.push(format!("wm_ratio must lie in (0, 1], got {}", self.wm_ratio));
        }
        if !(self.loa_compliance_ratio > 0.0 && self.loa_compliance_ratio <= 1.0) {
            problems.push(format!(
                "loa_compliance_ratio must lie in (0, 1], got {}",
                self.loa_compliance_ratio
            ));
        }
        if !(self.length_min_mm < self.length_max_mm) {
            problems.push("length_min_mm must be below length_max_mm".into());
        }
        for (name, v) in [
            ("winding_max_deg", self.winding_max_deg),
            ("loa_max_angle_deg", self.loa_max_angle_deg),
        ] {
            if !(v > 0.0 && v <= 180.0) && !(name == "winding_max_deg" && v > 0.0) {
                problems.push(format!("{name} must be positive and at most 180, got {v}"));
            }
        }
        if !(1..=3).contains(&self.connectivity) {
            problems.push(format!("connectivity must be 1, 2 or 3, got {}", self.connectivity));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(GestaError::Spec(problems))
        }
    }
}

/// The four named criteria: ADG or ADGC with a binary (B) or ratio (R) WM rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Criterion {
    #[serde(rename = "ADG_B")]
    AdgB,
    #[serde(rename = "ADG_R")]
    AdgR,
    #[serde(rename = "ADGC_B")]
    AdgcB,
    #[serde(rename = "ADGC_R")]
    AdgcR,
}

impl Criterion {
    pub const ALL: [Criterion; 4] = [Criterion::AdgB, Criterion::AdgR, Criterion::AdgcB, Criterion::AdgcR];

    /// `cfg` with the WM rule and GM requirement this criterion implies.
    pub fn apply(self, cfg: &CriteriaConfig) -> CriteriaConfig {
        let (wm_mode, gm_required) = match self {
            Criterion::AdgB => (WmMode::Binary, false),
            Criterion::AdgR => (WmMode::Ratio, false),
            Criterion::AdgcB => (WmMode::Binary, true),
            Criterion::AdgcR => (WmMode::Ratio, true),
        };
        CriteriaConfig {
            wm_mode,
            gm_required,
            ..cfg.clone()
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Criterion::AdgB => "ADG_B",
            Criterion::AdgR => "ADG_R",
            Criterion::AdgcB => "ADGC_B",
            Criterion::AdgcR => "ADGC_R",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Criterion {
    type Err = GestaError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "ADG_B" => Ok(Criterion::AdgB),
            "ADG_R" => Ok(Criterion::AdgR),
            "ADGC_B" => Ok(Criterion::AdgcB),
            "ADGC_R" => Ok(Criterion::AdgcR),
            _ => Err(GestaError::InvalidInput(format!(
                "unknown criterion {s:?}; expected ADG_B, ADG_R, ADGC_B or ADGC_R"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    Range { min: f64, max: f64 },
    Below(f64),
    AtLeast(f64),
}

/// Measured value of one criterion and whether it passed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriterionOutcome {
    pub passed: bool,
    pub value: f64,
    pub threshold: Threshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryOutcome {
    pub length: CriterionOutcome,
    pub winding: CriterionOutcome,
}

impl GeometryOutcome {
    pub fn passed(&self) -> bool {
        self.length.passed && self.winding.passed
    }
}

/// Direction compliance; `value` is the compliant fraction of unmasked segments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionOutcome {
    pub outcome: CriterionOutcome,
    pub compliant: usize,
    pub unmasked: usize,
    pub masked: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WmOutcome {
    /// `value` is the inside fraction of the vertices considered.
    pub outcome: CriterionOutcome,
    /// The streamline was too short for the endpoint skip and was checked in full.
    pub degenerate: bool,
}

/// Masks after the dilation/erosion the criteria call for.
#[derive(Debug, Clone)]
pub struct PreparedMasks {
    pub wm: VolumeGrid,
    pub gm: VolumeGrid,
    pub brain: VolumeGrid,
}

/// Dilates WM and GM, and erodes the brain mask unless `cfg.erode_brain` is off.
pub fn prepare_masks(
    wm: &VolumeGrid,
    gm: &VolumeGrid,
    brain: &VolumeGrid,
    cfg: &CriteriaConfig,
) -> Result<PreparedMasks> {
    wm.geometry().check_same(gm.geometry(), "WM vs GM")?;
    wm.geometry().check_same(brain.geometry(), "WM vs brain")?;
    let brain = if cfg.erode_brain {
        brain.erode(cfg.brain_erode_iterations, cfg.connectivity)?
    } else {
        brain.mask()?;
        brain.clone()
    };
    Ok(PreparedMasks {
        wm: wm.dilate(cfg.mask_dilate_iterations, cfg.connectivity)?,
        gm: gm.dilate(cfg.mask_dilate_iterations, cfg.connectivity)?,
        brain,
    })
}

pub fn check_geometry(s: &Streamline, cfg: &CriteriaConfig) -> GeometryOutcome {
    let length = s.length();
    let winding = s.winding();
    GeometryOutcome {
        length: CriterionOutcome {
            passed: length >= cfg.length_min_mm && length <= cfg.length_max_mm,
            value: length,
            threshold: Threshold::Range {
                min: cfg.length_min_mm,
                max: cfg.length_max_mm,
            },
        },
        winding: CriterionOutcome {
            passed: winding < cfg.winding_max_deg,
            value: winding,
            threshold: Threshold::Below(cfg.winding_max_deg),
        },
    }
}

/// Fraction of segments whose orientation lies within the cone of the closest
/// peak. Segments with no peak support are masked; with nothing unmasked the
/// check fails.
pub fn check_direction(s: &Streamline, peaks: &PeakField, cfg: &CriteriaConfig) -> DirectionOutcome {
    let cos_limit = cfg.loa_max_angle_deg.to_radians().cos();
    let (mut compliant, mut unmasked, mut masked) = (0usize, 0usize, 0usize);
    for ((a, b), dir) in s.segments().zip(s.local_orientations()) {
        let Some(dir) = dir else {
            masked += 1;
            continue;
        };
        let at = match cfg.peak_lookup {
            PeakLookup::Midpoint => vec3::lerp(a, b, 0.5),
            PeakLookup::Vertex => a,
        };
        let mut best: Option<f64> = None;
        for p in peaks.interpolate(at) {
            let n = vec3::norm(p);
            if n == 0.0 {
                continue;
            }
            let c = (vec3::dot(p, dir) / n).abs();
            best = Some(best.map_or(c, |b: f64| b.max(c)));
        }
        match best {
            // Strictly inside the cone: angle < limit  <=>  cos > cos(limit).
            Some(c) => {
                unmasked += 1;
                if c > cos_limit {
                    compliant += 1;
                }
            }
            None => masked += 1,
        }
    }
    let ratio = if unmasked > 0 {
        compliant as f64 / unmasked as f64
    } else {
        0.0
    };
    DirectionOutcome {
        outcome: CriterionOutcome {
            passed: unmasked > 0 && ratio >= cfg.loa_compliance_ratio,
            value: ratio,
            threshold: Threshold::AtLeast(cfg.loa_compliance_ratio),
        },
        compliant,
        unmasked,
        masked,
    }
}

pub fn check_wm(s: &Streamline, wm: &VolumeGrid, cfg: &CriteriaConfig) -> WmOutcome {
    let n = s.len();
    let skip = cfg.endpoint_skip;
    let degenerate = n <= 2 * skip + 1;
    let (lo, hi) = if degenerate { (0, n) } else { (skip, n - skip) };
    let inside = s.vertices()[lo..hi].iter().filter(|&&v| wm.contains_point(v)).count();
    let considered = hi - lo;
    let (value, passed, threshold) = match cfg.wm_mode {
        WmMode::Binary => {
            let f = inside as f64 / considered as f64;
            (f, inside == considered, Threshold::AtLeast(1.0))
        }
        WmMode::Ratio => {
            let denom = if cfg.wm_ratio_excludes_skipped { considered } else { n };
            let f = inside as f64 / denom as f64;
            (f, f >= cfg.wm_ratio, Threshold::AtLeast(cfg.wm_ratio))
        }
    };
    WmOutcome {
        outcome: CriterionOutcome {
            passed,
            value,
            threshold,
        },
        degenerate,
    }
}

/// Both endpoints must lie in the (dilated) GM mask; `value` counts the endpoints inside.
pub fn check_gm(s: &Streamline, gm: &VolumeGrid) -> CriterionOutcome {
    let inside = [s.first(), s.last()].iter().filter(|&&v| gm.contains_point(v)).count();
    CriterionOutcome {
        passed: inside == 2,
        value: inside as f64,
        threshold: Threshold::AtLeast(2.0),
    }
}

/// Whether to keep evaluating after the first failed criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluationMode {
    Full,
    Fast,
}

/// Diagnostics of one candidate. Criteria that were not reached (fast mode,
/// or a failed trim) are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamlineVerdict {
    pub index: usize,
    pub label: Option<u32>,
    pub accepted: bool,
    /// Vertices left after trimming to the brain mask; 0 when nothing survived.
    pub trimmed_vertices: usize,
    pub length: Option<CriterionOutcome>,
    pub winding: Option<CriterionOutcome>,
    pub direction: Option<DirectionOutcome>,
    pub wm: Option<WmOutcome>,
    pub gm: Option<CriterionOutcome>,
    pub first_failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub criterion: Criterion,
    pub total: usize,
    pub accepted: usize,
    pub rejected: usize,
    /// Streamlines failing each criterion (among those that reached it).
    pub failures: BTreeMap<String, usize>,
    /// Rejections attributed to the first failing stage; sums to `rejected`.
    pub first_failures: BTreeMap<String, usize>,
    /// Streamlines checked without the endpoint skip because they were too short.
    pub degenerate: usize,
    pub streamlines: Vec<StreamlineVerdict>,
}

pub const STAGES: [&str; 6] = ["trim", "length", "winding", "direction", "wm", "gm"];

impl EvaluationReport {
    fn from_verdicts(criterion: Criterion, verdicts: Vec<StreamlineVerdict>) -> Self {
        let mut failures: BTreeMap<String, usize> = STAGES.iter().map(|s| (s.to_string(), 0)).collect();
        let mut first_failures = failures.clone();
        let mut accepted = 0;
        let mut degenerate = 0;
        for v in &verdicts {
            if v.accepted {
                accepted += 1;
            }
            if let Some(f) = &v.first_failure {
                *first_failures.get_mut(f.as_str()).unwrap() += 1;
            }
            if v.trimmed_vertices == 0 {
                *failures.get_mut("trim").unwrap() += 1;
            }
            let outcomes = [
                ("length", v.length.map(|o| o.passed)),
                ("winding", v.winding.map(|o| o.passed)),
                ("direction", v.direction.map(|o| o.outcome.passed)),
                ("wm", v.wm.map(|o| o.outcome.passed)),
                ("gm", v.gm.map(|o| o.passed)),
            ];
            for (name, passed) in outcomes {
                if passed == Some(false) {
                    *failures.get_mut(name).unwrap() += 1;
                }
            }
            if v.wm.is_some_and(|w| w.degenerate) {
                degenerate += 1;
            }
        }
        EvaluationReport {
            criterion,
            total: verdicts.len(),
            accepted,
            rejected: verdicts.len() - accepted,
            failures,
            first_failures,
            degenerate,
            streamlines: verdicts,
        }
    }

    /// One CSV row per streamline.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "index",
            "label",
            "accepted",
            "trimmed_vertices",
            "length_mm",
            "winding_deg",
            "direction_ratio",
            "wm_fraction",
            "gm_endpoints",
            "first_failure",
        ])
        .map_err(csv_err)?;
        let fmt = |o: Option<f64>| o.map(|v| format!("{v}")).unwrap_or_default();
        for v in &self.streamlines {
            w.write_record([
                v.index.to_string(),
                v.label.map(|l| l.to_string()).unwrap_or_default(),
                v.accepted.to_string(),
                v.trimmed_vertices.to_string(),
                fmt(v.length.map(|o| o.value)),
                fmt(v.winding.map(|o| o.value)),
                fmt(v.direction.map(|o| o.outcome.value)),
                fmt(v.wm.map(|o| o.outcome.value)),
                fmt(v.gm.map(|o| o.value)),
                v.first_failure.clone().unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| GestaError::InvalidInput(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn csv_err(e: csv::Error) -> GestaError {
    GestaError::InvalidInput(format!("csv: {e}"))
}

/// Evaluates one candidate: trim to the brain mask, then geometry, direction,
/// WM and (if required) GM. Returns the trimmed streamline when accepted.
pub fn evaluate_streamline(
    s: &Streamline,
    masks: &PreparedMasks,
    peaks: &PeakField,
    cfg: &CriteriaConfig,
    mode: EvaluationMode,
) -> (StreamlineVerdict, Option<Streamline>) {
    let mut v = StreamlineVerdict {
        index: 0,
        label: None,
        accepted: false,
        trimmed_vertices: 0,
        length: None,
        winding: None,
        direction: None,
        wm: None,
        gm: None,
        first_failure: None,
    };
    let Some(trimmed) = s.trim_to_mask(&masks.brain) else {
        v.first_failure = Some("trim".into());
        return (v, None);
    };
    v.trimmed_vertices = trimmed.len();

    let fail = |v: &mut StreamlineVerdict, stage: &str| -> bool {
        if v.first_failure.is_none() {
            v.first_failure = Some(stage.to_string());
        }
        mode == EvaluationMode::Fast
    };

    let geo = check_geometry(&trimmed, cfg);
    v.length = Some(geo.length);
    if !geo.length.passed && fail(&mut v, "length") {
        return (v, None);
    }
    v.winding = Some(geo.winding);
    if !geo.winding.passed && fail(&mut v, "winding") {
        return (v, None);
    }
    let dir = check_direction(&trimmed, peaks, cfg);
    v.direction = Some(dir);
    if !dir.outcome.passed && fail(&mut v, "direction") {
        return (v, None);
    }
    let wm = check_wm(&trimmed, &masks.wm, cfg);
    v.wm = Some(wm);
    if !wm.outcome.passed && fail(&mut v, "wm") {
        return (v, None);
    }
    if cfg.gm_required {
        let gm = check_gm(&trimmed, &masks.gm);
        v.gm = Some(gm);
        if !gm.passed && fail(&mut v, "gm") {
            return (v, None);
        }
    }
    v.accepted = v.first_failure.is_none();
    let kept = v.accepted.then_some(trimmed);
    (v, kept)
}

/// Filters `candidates` with the given criterion. Accepted streamlines come
/// back trimmed, in input order, with their labels.
pub fn evaluate(
    candidates: &Tractogram,
    masks: &PreparedMasks,
    peaks: &PeakField,
    cfg: &CriteriaConfig,
    criterion: Criterion,
    mode: EvaluationMode,
) -> Result<(Tractogram, EvaluationReport)> {
    let cfg = criterion.apply(cfg);
    cfg.validate()?;
    masks.wm.geometry().check_same(peaks.geometry(), "masks vs peaks")?;

    let results: Vec<(StreamlineVerdict, Option<Streamline>)> = candidates
        .streamlines
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let (mut v, kept) = evaluate_streamline(s, masks, peaks, &cfg, mode);
            v.index = i;
            v.label = candidates.label(i);
            (v, kept)
        })
        .collect();

    let mut accepted = Tractogram {
        streamlines: Vec::new(),
        labels: candidates.labels.as_ref().map(|_| Vec::new()),
        label_names: candidates.label_names.clone(),
        space_tag: candidates.space_tag.clone(),
    };
    let mut verdicts = Vec::with_capacity(results.len());
    for (v, kept) in results {
        if let Some(s) = kept {
            accepted.streamlines.push(s);
            if let (Some(l), Some(label)) = (accepted.labels.as_mut(), v.label) {
                l.push(label);
            }
        }
        verdicts.push(v);
    }
    Ok((accepted, EvaluationReport::from_verdicts(criterion, verdicts)))
}
