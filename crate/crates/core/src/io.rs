//! File formats: a binary tractogram (`STRB`), volumes as a JSON sidecar with
//! a raw little-endian payload, and JSON configs.
//!
//! Tractogram layout:
//!
//! ```text
//! 0   b"STRB"
//! 4   u32 version (1)
//! 8   u32 streamline count
//! 12  u32 byte offset of the label block, 0 when unlabelled
//! 16  per streamline: u32 vertex count, then f32 x, y, z per vertex
//! ..  label block: u32 per streamline, u32 JSON length, JSON name table
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{GestaError, Result};
use crate::geometry::{Streamline, Tractogram};
use crate::volume::{Affine, GridGeometry, Payload, PeakField, VolumeGrid, PEAK_SLOTS};

pub const TRACTOGRAM_MAGIC: &[u8; 4] = b"STRB";
pub const TRACTOGRAM_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Serialize, Deserialize)]
struct NameTable {
    names: BTreeMap<u32, String>,
    space: String,
}

/// Serializes `t`; coordinates are stored as f32.
pub fn encode_tractogram(t: &Tractogram) -> Result<Vec<u8>> {
    let count =
        u32::try_from(t.len()).map_err(|_| GestaError::InvalidInput("too many streamlines for the format".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + t.streamlines.iter().map(|s| 4 + 12 * s.len()).sum::<usize>());
    out.extend_from_slice(TRACTOGRAM_MAGIC);
    out.extend_from_slice(&TRACTOGRAM_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for s in &t.streamlines {
        out.extend_from_slice(&(s.len() as u32).to_le_bytes());
        for v in s.vertices() {
            for c in v {
                out.extend_from_slice(&(*c as f32).to_le_bytes());
            }
        }
    }
    if let Some(labels) = &t.labels {
        let offset = u32::try_from(out.len())
            .map_err(|_| GestaError::InvalidInput("tractogram exceeds 4 GiB; labels cannot be addressed".into()))?;
        out[12..16].copy_from_slice(&offset.to_le_bytes());
        for l in labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        let table = serde_json::to_vec(&NameTable {
            names: t.label_names.clone(),
            space: t.space_tag.clone(),
        })?;
        out.extend_from_slice(&(table.len() as u32).to_le_bytes());
        out.extend_from_slice(&table);
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(GestaError::format(
                self.bytes.len() as u64,
                format!("truncated while reading {what} at byte {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_tractogram(bytes: &[u8]) -> Result<Tractogram> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic").ok() != Some(&TRACTOGRAM_MAGIC[..]) {
        return Err(GestaError::format(0, "not a tractogram file (bad magic)"));
    }
    let version = c.u32("version")?;
    if version != TRACTOGRAM_VERSION {
        return Err(GestaError::format(
            4,
            format!("unsupported tractogram version {version}"),
        ));
    }
    let count = c.u32("streamline count")? as usize;
    let label_offset = c.u32("label offset")? as usize;

    let mut streamlines = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        let at = c.pos as u64;
        let n = c.u32("vertex count")? as usize;
        let mut vertices = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let x = c.f32("vertex")?;
            let y = c.f32("vertex")?;
            let z = c.f32("vertex")?;
            vertices.push([x as f64, y as f64, z as f64]);
        }
        let s = Streamline::new(vertices).map_err(|e| GestaError::format(at, format!("streamline {i}: {e}")))?;
        streamlines.push(s);
    }

    let mut t = Tractogram::new(streamlines);
    if label_offset != 0 {
        if label_offset != c.pos {
            return Err(GestaError::format(
                12,
                format!(
                    "label block declared at byte {label_offset} but streamlines end at {}",
                    c.pos
                ),
            ));
        }
        let labels = (0..count).map(|_| c.u32("labels")).collect::<Result<Vec<_>>>()?;
        let len = c.u32("name table length")? as usize;
        let at = c.pos as u64;
        let table: NameTable = serde_json::from_slice(c.take(len, "name table")?)
            .map_err(|e| GestaError::format(at, format!("bad name table: {e}")))?;
        t.labels = Some(labels);
        t.label_names = table.names;
        t.space_tag = table.space;
    }
    if c.pos != bytes.len() {
        return Err(GestaError::format(
            c.pos as u64,
            format!("{} trailing bytes", bytes.len() - c.pos),
        ));
    }
    Ok(t)
}

pub fn write_tractogram(path: impl AsRef<Path>, t: &Tractogram) -> Result<()> {
    fs::write(path, encode_tractogram(t)?)?;
    Ok(())
}

pub fn read_tractogram(path: impl AsRef<Path>) -> Result<Tractogram> {
    decode_tractogram(&fs::read(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    U8,
    F32,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::F32 => 4,
        }
    }
}

/// JSON sidecar describing a raw volume payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
    /// Voxel-to-world, row-major.
    pub affine: Affine,
    pub dtype: Dtype,
    /// Values per voxel, stored consecutively; voxels run x-fastest.
    pub channels: usize,
    /// Payload file name, relative to the sidecar.
    pub payload: String,
}

fn payload_path(sidecar: &Path, header: &VolumeHeader) -> PathBuf {
    sidecar.with_file_name(&header.payload)
}

fn default_payload_name(sidecar: &Path) -> String {
    sidecar
        .with_extension("raw")
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "volume.raw".into())
}

fn write_raw(sidecar: &Path, geometry: &GridGeometry, dtype: Dtype, channels: usize, payload: &[u8]) -> Result<()> {
    let a = geometry.affine();
    let header = VolumeHeader {
        dims: geometry.dims(),
        voxel_size: geometry.voxel_size(),
        affine: *a,
        dtype,
        channels,
        payload: default_payload_name(sidecar),
    };
    fs::write(payload_path(sidecar, &header), payload)?;
    fs::write(sidecar, serde_json::to_vec_pretty(&header)?)?;
    Ok(())
}

fn read_raw(sidecar: &Path) -> Result<(VolumeHeader, GridGeometry, Vec<u8>)> {
    let header: VolumeHeader = serde_json::from_slice(&fs::read(sidecar)?)?;
    let geometry = GridGeometry::new(header.dims, header.affine)?;
    let bytes = fs::read(payload_path(sidecar, &header))?;
    let expected = geometry.n_voxels() * header.channels * header.dtype.size();
    if bytes.len() != expected {
        return Err(GestaError::format(
            bytes.len().min(expected) as u64,
            format!(
                "payload holds {} bytes but dims {:?} x {} channels of {:?} need {expected}",
                bytes.len(),
                header.dims,
                header.channels,
                header.dtype
            ),
        ));
    }
    Ok((header, geometry, bytes))
}

/// Writes a mask (u8) or scalar field (f32) to `sidecar` and a `.raw` payload beside it.
pub fn write_volume(sidecar: impl AsRef<Path>, v: &VolumeGrid) -> Result<()> {
    match v.payload() {
        Payload::Binary(b) => {
            let bytes: Vec<u8> = b.iter().map(|&x| x as u8).collect();
            write_raw(sidecar.as_ref(), v.geometry(), Dtype::U8, 1, &bytes)
        }
        Payload::Scalar(s) => {
            let bytes: Vec<u8> = s.iter().flat_map(|x| x.to_le_bytes()).collect();
            write_raw(sidecar.as_ref(), v.geometry(), Dtype::F32, 1, &bytes)
        }
    }
}

pub fn read_volume(sidecar: impl AsRef<Path>) -> Result<VolumeGrid> {
    let (header, geometry, bytes) = read_raw(sidecar.as_ref())?;
    if header.channels != 1 {
        return Err(GestaError::InvalidInput(format!(
            "expected a single-channel volume, found {} channels",
            header.channels
        )));
    }
    let payload = match header.dtype {
        Dtype::U8 => {
            if let Some(i) = bytes.iter().position(|&b| b > 1) {
                return Err(GestaError::format(
                    i as u64,
                    format!("mask value {} is not 0 or 1", bytes[i]),
                ));
            }
            Payload::Binary(bytes.iter().map(|&b| b == 1).collect())
        }
        Dtype::F32 => Payload::Scalar(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    VolumeGrid::new(geometry, payload)
}

const PEAK_CHANNELS: usize = PEAK_SLOTS * 3;

pub fn write_peaks(sidecar: impl AsRef<Path>, p: &PeakField) -> Result<()> {
    let bytes: Vec<u8> = p
        .peaks()
        .iter()
        .flat_map(|slots| slots.iter().flatten().flat_map(|x| x.to_le_bytes()))
        .collect();
    write_raw(sidecar.as_ref(), p.geometry(), Dtype::F32, PEAK_CHANNELS, &bytes)
}

pub fn read_peaks(sidecar: impl AsRef<Path>) -> Result<PeakField> {
    let (header, geometry, bytes) = read_raw(sidecar.as_ref())?;
    if header.dtype != Dtype::F32 || header.channels != PEAK_CHANNELS {
        return Err(GestaError::InvalidInput(format!(
            "a peak field needs {PEAK_CHANNELS} f32 channels, found {} {:?}",
            header.channels, header.dtype
        )));
    }
    let peaks = bytes
        .chunks_exact(4 * PEAK_CHANNELS)
        .map(|voxel| {
            let mut slots = [[0.0f32; 3]; PEAK_SLOTS];
            for (k, c) in voxel.chunks_exact(4).enumerate() {
                slots[k / 3][k % 3] = f32::from_le_bytes(c.try_into().unwrap());
            }
            slots
        })
        .collect();
    PeakField::new(geometry, peaks)
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_tractogram(n: usize, labelled: bool) -> Tractogram {
        let mut rng = crate::rng::stream(42, &[]);
        let streamlines: Vec<Streamline> = (0..n)
            .map(|_| {
                let len = rng.random_range(2..40);
                Streamline::new(
                    (0..len)
                        .map(|_| {
                            [
                                (rng.random::<f32>() * 100.0) as f64,
                                rng.random::<f32>() as f64,
                                -(rng.random::<f32>() as f64),
                            ]
                        })
                        .collect(),
                )
                .unwrap()
            })
            .collect();
        if labelled {
            let labels = (0..n).map(|i| (i % 3) as u32 + 1).collect();
            let mut t = Tractogram::with_labels(streamlines, labels).unwrap();
            t.label_names.insert(1, "arc".into());
            t.space_tag = "phantom_mm".into();
            t
        } else {
            Tractogram::new(streamlines)
        }
    }

    #[test]
    fn tractogram_round_trip_is_bit_exact() {
        for labelled in [false, true] {
            let t = random_tractogram(1000, labelled);
            let bytes = encode_tractogram(&t).unwrap();
            let back = decode_tractogram(&bytes).unwrap();
            assert_eq!(back, t);
            assert_eq!(encode_tractogram(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn empty_tractogram_is_a_bare_header() {
        let bytes = encode_tractogram(&Tractogram::new(vec![])).unwrap();
        assert_eq!(bytes.len(), 16);
        assert!(decode_tractogram(&bytes).unwrap().is_empty());
    }

    #[test]
    fn tractogram_errors_carry_offsets() {
        let t = random_tractogram(5, true);
        let bytes = encode_tractogram(&t).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_tractogram(&bad),
            Err(GestaError::Format { offset: 0, .. })
        ));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            decode_tractogram(&bad),
            Err(GestaError::Format { offset: 4, .. })
        ));
        let cut = &bytes[..40];
        assert!(matches!(
            decode_tractogram(cut),
            Err(GestaError::Format { offset: 40, .. })
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            decode_tractogram(&long),
            Err(GestaError::Format { offset, .. }) if offset == bytes.len() as u64
        ));
    }

    #[test]
    fn volumes_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = GridGeometry::axis_aligned([64, 64, 3], [3.0; 3], [-1.5, 2.25, 0.1]).unwrap();
        let mask = VolumeGrid::mask_from_indices(g.clone(), (0..g.n_voxels()).filter(|i| i % 7 == 0));
        let path = dir.path().join("mask.json");
        write_volume(&path, &mask).unwrap();
        assert_eq!(read_volume(&path).unwrap(), mask);

        let scalar = VolumeGrid::new(
            g.clone(),
            Payload::Scalar((0..g.n_voxels()).map(|i| i as f32 * 0.1).collect()),
        )
        .unwrap();
        let path = dir.path().join("fa.json");
        write_volume(&path, &scalar).unwrap();
        assert_eq!(read_volume(&path).unwrap(), scalar);

        let peaks = PeakField::new(
            g.clone(),
            (0..g.n_voxels())
                .map(|i| {
                    let mut s = [[0.0f32; 3]; PEAK_SLOTS];
                    for (k, slot) in s.iter_mut().enumerate() {
                        *slot = [i as f32, k as f32, -0.5];
                    }
                    s
                })
                .collect(),
        )
        .unwrap();
        let path = dir.path().join("peaks.json");
        write_peaks(&path, &peaks).unwrap();
        assert_eq!(read_peaks(&path).unwrap(), peaks);
        assert!(read_volume(&path).is_err());
    }

    #[test]
    fn payload_size_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let g = GridGeometry::axis_aligned([4, 4, 2], [1.0; 3], [0.0; 3]).unwrap();
        let path = dir.path().join("m.json");
        write_volume(&path, &VolumeGrid::empty_mask(g)).unwrap();
        fs::write(dir.path().join("m.raw"), [0u8; 31]).unwrap();
        assert!(matches!(read_volume(&path), Err(GestaError::Format { .. })));
    }
}
