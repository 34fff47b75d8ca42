//! Coverage scores: bundle volume overlap against a ground-truth mask and the
//! volume occupied by a set of streamlines.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GestaError, Result};
use crate::geometry::{Streamline, Tractogram};
use crate::volume::{GridGeometry, VolumeGrid};

/// Voxels traversed by at least one streamline, as a dense flag per voxel.
pub fn occupancy<'a>(streamlines: impl IntoIterator<Item = &'a Streamline>, geometry: &GridGeometry) -> Vec<bool> {
    let mut hit = vec![false; geometry.n_voxels()];
    for s in streamlines {
        geometry.rasterize(s, |i| hit[i] = true);
    }
    hit
}

/// Fraction of ground-truth voxels traversed by at least one streamline.
pub fn bundle_overlap<'a>(streamlines: impl IntoIterator<Item = &'a Streamline>, gt_mask: &VolumeGrid) -> Result<f64> {
    let gt = gt_mask.mask()?;
    let total = gt.iter().filter(|&&b| b).count();
    if total == 0 {
        return Err(GestaError::UndefinedMetric(
            "overlap against an empty ground-truth mask".into(),
        ));
    }
    let hit = occupancy(streamlines, gt_mask.geometry());
    let covered = gt.iter().zip(&hit).filter(|(g, h)| **g && **h).count();
    Ok(covered as f64 / total as f64)
}

/// Volume in mm³ of the union of voxels the streamlines traverse.
pub fn streamline_volume<'a>(streamlines: impl IntoIterator<Item = &'a Streamline>, geometry: &GridGeometry) -> f64 {
    let n = occupancy(streamlines, geometry).iter().filter(|&&b| b).count();
    n as f64 * geometry.voxel_volume()
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(MeanStd { mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleScore {
    pub bundle: u32,
    pub name: Option<String>,
    pub gt_voxels: usize,
    pub n_seeds: usize,
    pub n_generated: usize,
    pub seed_overlap: f64,
    pub seed_volume_mm3: f64,
    /// Overlap of the seeds together with the generated streamlines.
    pub union_overlap: f64,
    pub union_volume_mm3: f64,
    pub generated_only_overlap: f64,
    pub generated_only_volume_mm3: f64,
}

impl BundleScore {
    /// The overlap reported as "generated" under the chosen convention.
    pub fn generated_overlap(&self, union: bool) -> f64 {
        if union {
            self.union_overlap
        } else {
            self.generated_only_overlap
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub seed_overlap: Option<MeanStd>,
    pub generated_overlap: Option<MeanStd>,
    pub seed_volume_mm3: Option<MeanStd>,
    pub generated_volume_mm3: Option<MeanStd>,
}

/// Per-bundle scores of one experiment, ordered by bundle id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentScores {
    /// Free-form tag, e.g. the plausibility criterion.
    pub label: String,
    /// Whether "generated" figures include the seeds.
    pub union: bool,
    pub bundles: Vec<BundleScore>,
    pub summary: ScoreSummary,
    /// Bundles skipped for lack of a ground-truth mask.
    pub skipped: Vec<u32>,
}

/// Scores seeds and generated streamlines per bundle against `gt_masks`.
pub fn score_experiment(
    label: &str,
    seeds: &Tractogram,
    generated: &Tractogram,
    gt_masks: &BTreeMap<u32, VolumeGrid>,
    union: bool,
) -> Result<ExperimentScores> {
    let mut ids = seeds.bundle_ids();
    ids.extend(generated.bundle_ids());
    ids.sort_unstable();
    ids.dedup();
    let mut skipped = Vec::new();
    let present: Vec<u32> = ids
        .into_iter()
        .filter(|id| {
            let ok = gt_masks.contains_key(id);
            if !ok {
                log::warn!("bundle {id}: no ground-truth mask, skipped");
                skipped.push(*id);
            }
            ok
        })
        .collect();

    let bundles = present
        .par_iter()
        .map(|&id| {
            let gt = &gt_masks[&id];
            let geometry = gt.geometry();
            let gt_flags = gt.mask()?;
            let gt_voxels = gt_flags.iter().filter(|&&b| b).count();
            if gt_voxels == 0 {
                return Err(GestaError::UndefinedMetric(format!(
                    "bundle {id}: empty ground-truth mask"
                )));
            }
            let s = seeds.bundle(id);
            let g = generated.bundle(id);
            let seed_hit = occupancy(s.iter().copied(), geometry);
            let gen_hit = occupancy(g.iter().copied(), geometry);
            let union_hit: Vec<bool> = seed_hit.iter().zip(&gen_hit).map(|(a, b)| *a || *b).collect();
            let overlap =
                |hit: &[bool]| gt_flags.iter().zip(hit).filter(|(a, b)| **a && **b).count() as f64 / gt_voxels as f64;
            let volume = |hit: &[bool]| hit.iter().filter(|&&b| b).count() as f64 * geometry.voxel_volume();
            Ok(BundleScore {
                bundle: id,
                name: seeds
                    .label_names
                    .get(&id)
                    .or_else(|| generated.label_names.get(&id))
                    .cloned(),
                gt_voxels,
                n_seeds: s.len(),
                n_generated: g.len(),
                seed_overlap: overlap(&seed_hit),
                seed_volume_mm3: volume(&seed_hit),
                union_overlap: overlap(&union_hit),
                union_volume_mm3: volume(&union_hit),
                generated_only_overlap: overlap(&gen_hit),
                generated_only_volume_mm3: volume(&gen_hit),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let col = |f: &dyn Fn(&BundleScore) -> f64| MeanStd::of(&bundles.iter().map(f).collect::<Vec<_>>());
    let summary = ScoreSummary {
        seed_overlap: col(&|b| b.seed_overlap),
        generated_overlap: col(&|b| b.generated_overlap(union)),
        seed_volume_mm3: col(&|b| b.seed_volume_mm3),
        generated_volume_mm3: col(&|b| {
            if union {
                b.union_volume_mm3
            } else {
                b.generated_only_volume_mm3
            }
        }),
    };
    Ok(ExperimentScores {
        label: label.to_string(),
        union,
        bundles,
        summary,
        skipped,
    })
}

/// One row per bundle and experiment, then a `mean` and a `std` row per experiment.
pub fn scores_to_csv(experiments: &[ExperimentScores]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| GestaError::InvalidInput(format!("csv: {e}"));
    w.write_record([
        "experiment",
        "bundle",
        "name",
        "n_seeds",
        "n_generated",
        "seed_ol",
        "generated_ol",
        "generated_only_ol",
        "seed_volume_mm3",
        "generated_volume_mm3",
    ])
    .map_err(err)?;
    for e in experiments {
        for b in &e.bundles {
            let gen_volume = if e.union {
                b.union_volume_mm3
            } else {
                b.generated_only_volume_mm3
            };
            w.write_record([
                e.label.clone(),
                b.bundle.to_string(),
                b.name.clone().unwrap_or_default(),
                b.n_seeds.to_string(),
                b.n_generated.to_string(),
                format!("{:.6}", b.seed_overlap),
                format!("{:.6}", b.generated_overlap(e.union)),
                format!("{:.6}", b.generated_only_overlap),
                format!("{:.1}", b.seed_volume_mm3),
                format!("{gen_volume:.1}"),
            ])
            .map_err(err)?;
        }
        let s = &e.summary;
        for (row, pick) in [("mean", true), ("std", false)] {
            let f = |m: Option<MeanStd>, prec: usize| {
                m.map(|m| format!("{:.*}", prec, if pick { m.mean } else { m.std }))
                    .unwrap_or_default()
            };
            w.write_record([
                e.label.clone(),
                row.to_string(),
                String::new(),
                String::new(),
                String::new(),
                f(s.seed_overlap, 6),
                f(s.generated_overlap, 6),
                String::new(),
                f(s.seed_volume_mm3, 1),
                f(s.generated_volume_mm3, 1),
            ])
            .map_err(err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| GestaError::InvalidInput(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Grouped bar chart of seed vs generated overlap per bundle.
pub fn overlap_chart_svg(scores: &ExperimentScores) -> String {
    let (bar, gap, height, left, bottom) = (18.0, 14.0, 240.0, 48.0, 60.0);
    let group = 2.0 * bar + gap;
    let width = left + group * scores.bundles.len().max(1) as f64 + gap;
    let total_h = height + bottom + 30.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{total_h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{left}" y="16">{} (seed vs generated overlap)</text>"#,
        xml_escape(&scores.label)
    );
    let y0 = 24.0;
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        let y = y0 + height * (1.0 - v);
        let _ = writeln!(
            svg,
            r##"<line x1="{left}" x2="{width}" y1="{y}" y2="{y}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{v:.2}</text>"##,
            left - 4.0,
            y + 4.0
        );
    }
    for (i, b) in scores.bundles.iter().enumerate() {
        let x = left + gap + group * i as f64;
        for (j, (v, color)) in [
            (b.seed_overlap, "#9aa5b1"),
            (b.generated_overlap(scores.union), "#2f6f9f"),
        ]
        .into_iter()
        .enumerate()
        {
            let h = height * v.clamp(0.0, 1.0);
            let _ = writeln!(
                svg,
                r#"<rect x="{}" y="{}" width="{bar}" height="{h}" fill="{color}"/>"#,
                x + j as f64 * bar,
                y0 + height - h
            );
        }
        let name = b.name.clone().unwrap_or_else(|| b.bundle.to_string());
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end" transform="rotate(-40 {} {})">{}</text>"#,
            x + bar,
            y0 + height + 14.0,
            x + bar,
            y0 + height + 14.0,
            xml_escape(&name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
