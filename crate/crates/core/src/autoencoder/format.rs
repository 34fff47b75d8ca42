//! Binary model container.
//!
//! Layout (all integers little-endian):
//! `b"GAEM"`, format version `u32`, metadata length `u32`, metadata JSON
//! (UTF-8), then every weight as an `f32` in the order of the metadata's
//! `layers` list.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AEModel, Architecture, Normalization, ParamSpec, LATENT_DIM};
use crate::error::{GestaError, Result};
use crate::geometry::STREAMLINE_VERTICES;

pub const MODEL_MAGIC: &[u8; 4] = b"GAEM";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Metadata {
    architecture: Architecture,
    layers: Vec<ParamSpec>,
    normalization: Normalization,
    latent_dim: usize,
    input_vertices: usize,
}

pub fn write_model(model: &AEModel, mut w: impl Write) -> Result<()> {
    let meta = Metadata {
        architecture: *model.architecture(),
        layers: model.param_specs().to_vec(),
        normalization: model.normalization().clone(),
        latent_dim: model.latent_dim(),
        input_vertices: model.input_vertices(),
    };
    let json = serde_json::to_vec(&meta)?;
    let mut buf = Vec::with_capacity(12 + json.len() + 4 * model.weights().len());
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for w in model.weights() {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_model(mut r: impl Read) -> Result<AEModel> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse(&bytes)
}

pub fn save_model(model: &AEModel, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    write_model(model, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<AEModel> {
    parse(&fs::read(path)?)
}

fn take<'a>(bytes: &'a [u8], at: usize, n: usize, what: &str) -> Result<&'a [u8]> {
    bytes.get(at..at + n).ok_or_else(|| {
        GestaError::format(
            bytes.len() as u64,
            format!("truncated while reading {what}: need {n} bytes at offset {at}"),
        )
    })
}

fn parse(bytes: &[u8]) -> Result<AEModel> {
    if take(bytes, 0, 4, "magic")? != MODEL_MAGIC {
        return Err(GestaError::format(0, "bad magic, expected GAEM"));
    }
    let version = u32::from_le_bytes(take(bytes, 4, 4, "version")?.try_into().unwrap());
    if version != MODEL_FORMAT_VERSION {
        return Err(GestaError::format(
            4,
            format!("unsupported model version {version}, expected {MODEL_FORMAT_VERSION}"),
        ));
    }
    let meta_len = u32::from_le_bytes(take(bytes, 8, 4, "metadata length")?.try_into().unwrap()) as usize;
    let meta: Metadata = serde_json::from_slice(take(bytes, 12, meta_len, "metadata")?)
        .map_err(|e| GestaError::format(12, format!("metadata: {e}")))?;
    if meta.latent_dim != LATENT_DIM || meta.input_vertices != STREAMLINE_VERTICES {
        return Err(GestaError::format(
            12,
            format!(
                "unsupported shape: latent_dim {}, input_vertices {}",
                meta.latent_dim, meta.input_vertices
            ),
        ));
    }
    let expected = super::Network::autoencoder(&meta.architecture);
    if expected.param_specs() != meta.layers.as_slice() {
        return Err(GestaError::format(12, "layer table does not match the architecture"));
    }

    let start = 12 + meta_len;
    let n = expected.n_params();
    let payload = take(bytes, start, 4 * n, "weights")?;
    if bytes.len() != start + 4 * n {
        return Err(GestaError::format(
            (start + 4 * n) as u64,
            format!("{} trailing bytes", bytes.len() - start - 4 * n),
        ));
    }
    let weights: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    AEModel::from_weights(meta.architecture, meta.normalization, weights)
        .map_err(|e| GestaError::format(start as u64, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::Network;
    use crate::geometry::Streamline;
    use crate::rng;

    fn model() -> AEModel {
        let arch = Architecture {
            base_channels: 2,
            ..Architecture::default()
        };
        let net = Network::autoencoder(&arch);
        let w = net
            .init_params(&mut rng::stream(9, &[]))
            .iter()
            .map(|&p| p as f32)
            .collect();
        let s = Streamline::new(vec![[0.0, 0.0, 0.0], [50.0, 20.0, 5.0]]).unwrap();
        AEModel::from_weights(arch, Normalization::fit([&s]).unwrap(), w).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let mut buf = Vec::new();
        write_model(&m, &mut buf).unwrap();
        let back = read_model(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        let mut again = Vec::new();
        write_model(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn rejects_version_magic_truncation_and_trailing() {
        let m = model();
        let mut buf = Vec::new();
        write_model(&m, &mut buf).unwrap();

        let mut bad = buf.clone();
        bad[4] = 2;
        assert!(matches!(
            read_model(bad.as_slice()),
            Err(GestaError::Format { offset: 4, .. })
        ));

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_model(bad.as_slice()),
            Err(GestaError::Format { offset: 0, .. })
        ));

        let cut = &buf[..buf.len() - 3];
        match read_model(cut) {
            Err(GestaError::Format { offset, .. }) => assert_eq!(offset, cut.len() as u64),
            other => panic!("{other:?}"),
        }

        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(read_model(long.as_slice()), Err(GestaError::Format { .. })));
    }
}
