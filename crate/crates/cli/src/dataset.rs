//! On-disk layout of a phantom dataset directory.
//!
//! ```text
//! tractogram.strb    labelled ground-truth streamlines
//! wm.json gm.json brain.json (+ .raw)
//! peaks.json (+ .raw)
//! gt/bundle_<id>.json (+ .raw)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use gesta_core::io;
use gesta_core::phantom::PhantomDataset;
use gesta_core::VolumeGrid;

pub const TRACTOGRAM: &str = "tractogram.strb";
pub const WM: &str = "wm.json";
pub const GM: &str = "gm.json";
pub const BRAIN: &str = "brain.json";
pub const PEAKS: &str = "peaks.json";
pub const GT_DIR: &str = "gt";

pub fn write_dataset(dir: &Path, d: &PhantomDataset) -> Result<()> {
    fs::create_dir_all(dir.join(GT_DIR))?;
    io::write_tractogram(dir.join(TRACTOGRAM), &d.tractogram)?;
    io::write_volume(dir.join(WM), &d.wm)?;
    io::write_volume(dir.join(GM), &d.gm)?;
    io::write_volume(dir.join(BRAIN), &d.brain)?;
    io::write_peaks(dir.join(PEAKS), &d.peaks)?;
    for (id, mask) in &d.bundle_masks {
        io::write_volume(dir.join(GT_DIR).join(format!("bundle_{id}.json")), mask)?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<PhantomDataset> {
    let read = |name: &str| io::read_volume(dir.join(name)).with_context(|| format!("reading {name}"));
    Ok(PhantomDataset {
        tractogram: io::read_tractogram(dir.join(TRACTOGRAM)).context("reading the tractogram")?,
        wm: read(WM)?,
        gm: read(GM)?,
        brain: read(BRAIN)?,
        peaks: io::read_peaks(dir.join(PEAKS)).context("reading peaks")?,
        bundle_masks: read_gt_masks(&dir.join(GT_DIR))?,
    })
}

/// Per-bundle masks named `bundle_<id>.json` in `dir`.
pub fn read_gt_masks(dir: &Path) -> Result<BTreeMap<u32, VolumeGrid>> {
    let mut masks = BTreeMap::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(id) = name.strip_prefix("bundle_").and_then(|n| n.strip_suffix(".json")) else {
            continue;
        };
        let id: u32 = id.parse().with_context(|| format!("bundle id in {name}"))?;
        masks.insert(id, io::read_volume(&path).with_context(|| format!("reading {name}"))?);
    }
    if masks.is_empty() {
        bail!("no bundle_<id>.json masks in {}", dir.display());
    }
    Ok(masks)
}
