//! Binary artifact formats and content checksums.
//!
//! Checkpoints use the "RPDN" container: magic, version, a role tag, a
//! role-specific header, the layer topology, then all parameters as
//! little-endian f64 in the canonical flattening order. Optimizer state can be
//! appended as an "ADAM" section. Trajectory dumps use the "RPTJ" container.
//! Round trips are bit-exact.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use crate::denoiser::{ClassEmbedding, Denoiser, NoisePredictor};
use crate::diffusion::{Direction, Trajectory};
use crate::error::{Error, Result};
use crate::extractor::FeatureExtractor;
use crate::nn::{Activation, AdamState, DenseNet, LayerSpec};

const MODEL_MAGIC: &[u8; 4] = b"RPDN";
const TRAJECTORY_MAGIC: &[u8; 4] = b"RPTJ";
const ADAM_TAG: &[u8; 4] = b"ADAM";
const FORMAT_VERSION: u16 = 1;

const ROLE_DENOISER: u8 = 1;
const ROLE_EXTRACTOR: u8 = 2;

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::BadFormat {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn write_net(buf: &mut Vec<u8>, net: &DenseNet) {
    buf.write_u32::<LittleEndian>(net.layers().len() as u32)
        .expect("vec write");
    for layer in net.layers() {
        buf.write_u32::<LittleEndian>(layer.in_dim as u32)
            .expect("vec write");
        buf.write_u32::<LittleEndian>(layer.out_dim as u32)
            .expect("vec write");
        buf.push(layer.activation.code());
    }
    for p in net.params() {
        buf.write_f64::<LittleEndian>(*p).expect("vec write");
    }
}

fn read_net(cur: &mut Cursor<&[u8]>, path: &Path) -> Result<DenseNet> {
    let n_layers = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| bad(path, "truncated topology"))? as usize;
    if n_layers == 0 || n_layers > 1024 {
        return Err(bad(path, format!("implausible layer count {n_layers}")));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let in_dim = cur
            .read_u32::<LittleEndian>()
            .map_err(|_| bad(path, "truncated layer dims"))? as usize;
        let out_dim = cur
            .read_u32::<LittleEndian>()
            .map_err(|_| bad(path, "truncated layer dims"))? as usize;
        let code = cur
            .read_u8()
            .map_err(|_| bad(path, "truncated activation"))?;
        layers.push(LayerSpec {
            in_dim,
            out_dim,
            activation: Activation::from_code(code)?,
        });
    }
    let param_count: usize = layers
        .iter()
        .map(|l| l.out_dim * l.in_dim + l.out_dim)
        .sum();
    let mut params = Vec::with_capacity(param_count);
    for _ in 0..param_count {
        params.push(
            cur.read_f64::<LittleEndian>()
                .map_err(|_| bad(path, "truncated parameters"))?,
        );
    }
    DenseNet::from_parts(layers, params)
}

fn write_adam(buf: &mut Vec<u8>, state: &AdamState) {
    buf.extend_from_slice(ADAM_TAG);
    buf.write_u64::<LittleEndian>(state.step_count())
        .expect("vec write");
    for v in [
        state.learning_rate,
        state.beta1,
        state.beta2,
        state.epsilon,
    ] {
        buf.write_f64::<LittleEndian>(v).expect("vec write");
    }
    buf.write_u64::<LittleEndian>(state.first_moment().len() as u64)
        .expect("vec write");
    for m in state.first_moment().iter().chain(state.second_moment()) {
        buf.write_f64::<LittleEndian>(*m).expect("vec write");
    }
}

fn read_optional_adam(cur: &mut Cursor<&[u8]>, path: &Path) -> Result<Option<AdamState>> {
    let mut tag = [0u8; 4];
    match cur.read_exact(&mut tag) {
        Err(_) => return Ok(None), // no trailing section
        Ok(()) => {}
    }
    if &tag != ADAM_TAG {
        return Err(bad(path, "unknown trailing section"));
    }
    let step_count = cur
        .read_u64::<LittleEndian>()
        .map_err(|_| bad(path, "truncated adam section"))?;
    let mut hyper = [0.0f64; 4];
    for h in &mut hyper {
        *h = cur
            .read_f64::<LittleEndian>()
            .map_err(|_| bad(path, "truncated adam section"))?;
    }
    let len = cur
        .read_u64::<LittleEndian>()
        .map_err(|_| bad(path, "truncated adam section"))? as usize;
    let mut read_vec = |n: usize| -> Result<Vec<f64>> {
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(
                cur.read_f64::<LittleEndian>()
                    .map_err(|_| bad(path, "truncated adam moments"))?,
            );
        }
        Ok(v)
    };
    let first = read_vec(len)?;
    let second = read_vec(len)?;
    Ok(Some(AdamState::from_parts(
        first, second, step_count, hyper[0], hyper[1], hyper[2], hyper[3],
    )?))
}

/// Canonical checkpoint bytes for a denoiser, optimizer state excluded.
pub fn denoiser_bytes(model: &Denoiser) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.write_u16::<LittleEndian>(FORMAT_VERSION).expect("vec");
    buf.push(ROLE_DENOISER);
    buf.write_u32::<LittleEndian>(model.data_dim() as u32).expect("vec");
    buf.write_u32::<LittleEndian>(model.t_embed_dim() as u32)
        .expect("vec");
    buf.write_u32::<LittleEndian>(model.horizon()).expect("vec");
    match model.class_embed() {
        Some(c) => {
            buf.push(1);
            buf.write_u32::<LittleEndian>(c.n_classes as u32).expect("vec");
            buf.write_u32::<LittleEndian>(c.embed_dim as u32).expect("vec");
        }
        None => {
            buf.push(0);
            buf.write_u32::<LittleEndian>(0).expect("vec");
            buf.write_u32::<LittleEndian>(0).expect("vec");
        }
    }
    write_net(&mut buf, model.net());
    if let Some(c) = model.class_embed() {
        for v in c.table() {
            buf.write_f64::<LittleEndian>(*v).expect("vec");
        }
    }
    buf
}

/// Content hash of a denoiser (checkpoint bytes without optimizer state).
pub fn denoiser_checksum(model: &Denoiser) -> [u8; 32] {
    Sha256::digest(denoiser_bytes(model)).into()
}

pub fn save_denoiser(path: &Path, model: &Denoiser, adam: Option<&AdamState>) -> Result<()> {
    let mut buf = denoiser_bytes(model);
    if let Some(state) = adam {
        write_adam(&mut buf, state);
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_denoiser(path: &Path) -> Result<(Denoiser, Option<AdamState>)> {
    let data = std::fs::read(path)?;
    let mut cur = Cursor::new(data.as_slice());
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).map_err(|_| bad(path, "empty file"))?;
    if &magic != MODEL_MAGIC {
        return Err(bad(path, "bad magic"));
    }
    let version = cur
        .read_u16::<LittleEndian>()
        .map_err(|_| bad(path, "truncated header"))?;
    if version != FORMAT_VERSION {
        return Err(bad(path, format!("unsupported version {version}")));
    }
    let role = cur.read_u8().map_err(|_| bad(path, "truncated header"))?;
    if role != ROLE_DENOISER {
        return Err(bad(path, format!("expected denoiser checkpoint, found role {role}")));
    }
    let data_dim = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| bad(path, "truncated header"))? as usize;
    let t_embed_dim = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| bad(path, "truncated header"))? as usize;
    let horizon = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| bad(path, "truncated header"))?;
    let conditional = cur.read_u8().map_err(|_| bad(path, "truncated header"))?;
    let n_classes = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| bad(path, "truncated header"))? as usize;
    let class_dim = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| bad(path, "truncated header"))? as usize;
    let net = read_net(&mut cur, path)?;
    let class_embed = if conditional == 1 {
        let mut table = Vec::with_capacity(n_classes * class_dim);
        for _ in 0..n_classes * class_dim {
            table.push(
                cur.read_f64::<LittleEndian>()
                    .map_err(|_| bad(path, "truncated class table"))?,
            );
        }
        Some(ClassEmbedding::from_parts(n_classes, class_dim, table)?)
    } else {
        None
    };
    let model = Denoiser::from_parts(net, data_dim, t_embed_dim, horizon, class_embed)?;
    let adam = read_optional_adam(&mut cur, path)?;
    Ok((model, adam))
}

/// Canonical checkpoint bytes for an extractor, optimizer state excluded.
pub fn extractor_bytes(extractor: &FeatureExtractor) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.write_u16::<LittleEndian>(FORMAT_VERSION).expect("vec");
    buf.push(ROLE_EXTRACTOR);
    buf.write_u32::<LittleEndian>(extractor.key_timestep())
        .expect("vec");
    write_net(&mut buf, extractor.net());
    buf
}

pub fn extractor_checksum(extractor: &FeatureExtractor) -> [u8; 32] {
    Sha256::digest(extractor_bytes(extractor)).into()
}

pub fn save_extractor(
    path: &Path,
    extractor: &FeatureExtractor,
    adam: Option<&AdamState>,
) -> Result<()> {
    let mut buf = extractor_bytes(extractor);
    if let Some(state) = adam {
        write_adam(&mut buf, state);
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Loads an extractor checkpoint; `expected_key_timestep`, when given, is
/// validated against the stored header.
pub fn load_extractor(
    path: &Path,
    expected_key_timestep: Option<u32>,
) -> Result<(FeatureExtractor, Option<AdamState>)> {
    let data = std::fs::read(path)?;
    let mut cur = Cursor::new(data.as_slice());
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).map_err(|_| bad(path, "empty file"))?;
    if &magic != MODEL_MAGIC {
        return Err(bad(path, "bad magic"));
    }
    let version = cur
        .read_u16::<LittleEndian>()
        .map_err(|_| bad(path, "truncated header"))?;
    if version != FORMAT_VERSION {
        return Err(bad(path, format!("unsupported version {version}")));
    }
    let role = cur.read_u8().map_err(|_| bad(path, "truncated header"))?;
    if role != ROLE_EXTRACTOR {
        return Err(bad(path, format!("expected extractor checkpoint, found role {role}")));
    }
    let key_timestep = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| bad(path, "truncated header"))?;
    if let Some(expected) = expected_key_timestep {
        if expected != key_timestep {
            return Err(bad(
                path,
                format!("extractor trained at timestep {key_timestep}, expected {expected}"),
            ));
        }
    }
    let net = read_net(&mut cur, path)?;
    let extractor = FeatureExtractor::from_parts(net, key_timestep);
    let adam = read_optional_adam(&mut cur, path)?;
    Ok((extractor, adam))
}

/// Debug/eval dump of a trajectory: `(t, latent)` records, little-endian.
pub fn save_trajectory(path: &Path, trajectory: &Trajectory) -> Result<()> {
    let dim = trajectory.first().1.len();
    let mut buf = Vec::new();
    buf.extend_from_slice(TRAJECTORY_MAGIC);
    buf.write_u32::<LittleEndian>(dim as u32).expect("vec");
    buf.write_u32::<LittleEndian>(trajectory.latents().len() as u32)
        .expect("vec");
    for (t, latent) in trajectory.latents() {
        buf.write_u32::<LittleEndian>(*t).expect("vec");
        for v in latent {
            buf.write_f64::<LittleEndian>(*v).expect("vec");
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Reads a trajectory dump. Direction is inferred from the timestep order;
/// denoiser-call counts are not part of the format and load as zero.
pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    let data = std::fs::read(path)?;
    let mut cur = Cursor::new(data.as_slice());
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).map_err(|_| bad(path, "empty file"))?;
    if &magic != TRAJECTORY_MAGIC {
        return Err(bad(path, "bad magic"));
    }
    let dim = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| bad(path, "truncated header"))? as usize;
    let count = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| bad(path, "truncated header"))? as usize;
    let mut latents = Vec::with_capacity(count);
    for _ in 0..count {
        let t = cur
            .read_u32::<LittleEndian>()
            .map_err(|_| bad(path, "truncated record"))?;
        let mut latent = Vec::with_capacity(dim);
        for _ in 0..dim {
            latent.push(
                cur.read_f64::<LittleEndian>()
                    .map_err(|_| bad(path, "truncated record"))?,
            );
        }
        latents.push((t, latent));
    }
    let direction = match latents.as_slice() {
        [first, second, ..] if first.0 < second.0 => Direction::Forward,
        _ => Direction::Reverse,
    };
    Trajectory::new(latents, direction, 0)
}

/// SHA-256 of a file's bytes.
pub fn file_checksum(path: &Path) -> Result<[u8; 32]> {
    Ok(Sha256::digest(std::fs::read(path)?).into())
}

pub fn checksum_hex(checksum: &[u8; 32]) -> String {
    crate::data::hex(checksum)
}
