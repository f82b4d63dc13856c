//! Byte formats: the compressed-image container and the model archive.
//!
//! Container, all little-endian:
//!
//! ```text
//! "DCAE" | version u8 | profile_id u8 | lambda_index u8 | width u32 | height u32
//! | slice_count u8 | z_len u32 | slice_len u32 x slice_count
//! | z stream | slice streams in order
//! ```
//!
//! Width and height are the original, unpadded dimensions. Nothing else is
//! stored; in particular the dictionary never appears in a container.
//!
//! Model archive:
//!
//! ```text
//! "DCAEMODL" | version u8 | profile_id u8 | lambda_index u8
//! | y u32 | z u32 | n u32 | stage u32 x n | factor_y u32 | factor_z u32
//! | name_len u16 | profile name | slice_count u32
//! | dca_enabled u8 | N u32 | C_d u32 | m u32 | C_ms u32 | C_qk u32
//! | head_dim u32 | ffn_expansion u32 | head_hidden u32
//! | tensor_count u32
//! | per tensor, sorted by name:
//! |   name_len u16 | name | rank u8 | dim u32 x rank | f32 x numel
//! ```
//!
//! Rank drops trailing unit dimensions of the internal 4-D shape.

use crate::config::{AutoencoderConfig, DcaBlockConfig, ModelConfig, Profile, SliceConfig};
use crate::error::{DcaeError, Result};
use crate::model::DcaeModel;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CONTAINER_MAGIC: &[u8; 4] = b"DCAE";
pub const CONTAINER_VERSION: u8 = 1;
pub const ARCHIVE_MAGIC: &[u8; 8] = b"DCAEMODL";
pub const ARCHIVE_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Container {
    pub profile_id: u8,
    pub lambda_index: u8,
    pub width: u32,
    pub height: u32,
    pub z_stream: Vec<u8>,
    pub slice_streams: Vec<Vec<u8>>,
}

impl Container {
    pub fn header_size(&self) -> usize {
        header_size(self.slice_streams.len())
    }

    pub fn total_size(&self) -> usize {
        self.header_size()
            + self.z_stream.len()
            + self.slice_streams.iter().map(Vec::len).sum::<usize>()
    }
}

pub fn header_size(slice_count: usize) -> usize {
    4 + 3 + 8 + 1 + 4 + 4 * slice_count
}

pub fn write_container(c: &Container) -> Result<Vec<u8>> {
    let s = u8::try_from(c.slice_streams.len())
        .map_err(|_| DcaeError::Input("more than 255 slice streams".into()))?;
    let len32 = |v: &Vec<u8>| {
        u32::try_from(v.len()).map_err(|_| DcaeError::Input("stream exceeds 4 GiB".into()))
    };
    let mut out = Vec::with_capacity(c.total_size());
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&[CONTAINER_VERSION, c.profile_id, c.lambda_index]);
    out.extend_from_slice(&c.width.to_le_bytes());
    out.extend_from_slice(&c.height.to_le_bytes());
    out.push(s);
    out.extend_from_slice(&len32(&c.z_stream)?.to_le_bytes());
    for st in &c.slice_streams {
        out.extend_from_slice(&len32(st)?.to_le_bytes());
    }
    out.extend_from_slice(&c.z_stream);
    for st in &c.slice_streams {
        out.extend_from_slice(st);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }
    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }
    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn read_container(bytes: &[u8]) -> Result<Container> {
    let corrupt = |m: &str| DcaeError::CorruptContainer(m.to_string());
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4) != Some(CONTAINER_MAGIC.as_slice()) {
        return Err(corrupt("bad magic"));
    }
    let version = r.u8().ok_or_else(|| corrupt("truncated header"))?;
    if version != CONTAINER_VERSION {
        return Err(DcaeError::UnsupportedVersion(version));
    }
    let mut head = || -> Option<(u8, u8, u32, u32, u8, u32)> {
        Some((r.u8()?, r.u8()?, r.u32()?, r.u32()?, r.u8()?, r.u32()?))
    };
    let (profile_id, lambda_index, width, height, s, z_len) =
        head().ok_or_else(|| corrupt("truncated header"))?;
    let mut lens = Vec::with_capacity(s as usize);
    for _ in 0..s {
        lens.push(r.u32().ok_or_else(|| corrupt("truncated header"))? as usize);
    }
    let payload: usize = lens.iter().sum::<usize>() + z_len as usize;
    if payload != r.remaining() {
        return Err(DcaeError::CorruptContainer(format!(
            "header announces {payload} stream bytes, file holds {}",
            r.remaining()
        )));
    }
    let z_stream = r.take(z_len as usize).expect("length checked").to_vec();
    let slice_streams = lens
        .iter()
        .map(|&n| r.take(n).expect("length checked").to_vec())
        .collect();
    Ok(Container {
        profile_id,
        lambda_index,
        width,
        height,
        z_stream,
        slice_streams,
    })
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| DcaeError::Config(format!("{v} does not fit u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let n = u16::try_from(s.len()).map_err(|_| DcaeError::Config("name too long".into()))?;
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn save_model(model: &DcaeModel) -> Result<Vec<u8>> {
    let c = &model.config;
    let ae = &c.autoencoder;
    let d = &c.dca;
    let mut out = Vec::new();
    out.extend_from_slice(ARCHIVE_MAGIC);
    out.extend_from_slice(&[ARCHIVE_VERSION, c.profile.id(), c.lambda_index]);
    put_u32(&mut out, ae.y_channels)?;
    put_u32(&mut out, ae.z_channels)?;
    put_u32(&mut out, ae.stage_channels.len())?;
    for &s in &ae.stage_channels {
        put_u32(&mut out, s)?;
    }
    put_u32(&mut out, ae.downsample_factor_y)?;
    put_u32(&mut out, ae.downsample_factor_z)?;
    put_str(&mut out, &ae.profile_name)?;
    put_u32(&mut out, c.slices.slice_count)?;
    out.push(d.enabled as u8);
    for v in [
        d.dict_entries,
        d.dict_channels,
        d.msfa_layers,
        d.c_ms,
        d.c_qk,
        d.head_dim,
        d.ffn_expansion,
        c.head_hidden,
    ] {
        put_u32(&mut out, v)?;
    }
    put_u32(&mut out, model.params.len())?;
    for (name, p) in model.params.iter() {
        put_str(&mut out, name)?;
        let shape = p.value.shape();
        let mut rank = 4;
        while rank > 1 && shape[rank - 1] == 1 {
            rank -= 1;
        }
        out.push(rank as u8);
        for &dim in &shape[..rank] {
            put_u32(&mut out, dim)?;
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn read_config(r: &mut Reader<'_>) -> Option<ModelConfig> {
    let profile_id = r.u8()?;
    let lambda_index = r.u8()?;
    let y = r.u32()? as usize;
    let z = r.u32()? as usize;
    let n = r.u32()? as usize;
    if n > 64 {
        return None;
    }
    let mut stages = Vec::with_capacity(n);
    for _ in 0..n {
        stages.push(r.u32()? as usize);
    }
    let fy = r.u32()? as usize;
    let fz = r.u32()? as usize;
    let name_len = r.u16()? as usize;
    let name = String::from_utf8(r.take(name_len)?.to_vec()).ok()?;
    let slice_count = r.u32()? as usize;
    let enabled = r.u8()? != 0;
    let mut f = [0usize; 8];
    for v in &mut f {
        *v = r.u32()? as usize;
    }
    Some(ModelConfig {
        profile: Profile::from_id(profile_id).ok()?,
        lambda_index,
        autoencoder: AutoencoderConfig {
            y_channels: y,
            z_channels: z,
            stage_channels: stages,
            downsample_factor_y: fy,
            downsample_factor_z: fz,
            profile_name: name,
        },
        slices: SliceConfig { slice_count },
        dca: DcaBlockConfig {
            enabled,
            dict_entries: f[0],
            dict_channels: f[1],
            msfa_layers: f[2],
            c_ms: f[3],
            c_qk: f[4],
            head_dim: f[5],
            ffn_expansion: f[6],
        },
        head_hidden: f[7],
    })
}

/// Parse an archive and check every tensor against the configuration.
pub fn load_model(bytes: &[u8]) -> Result<DcaeModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8) != Some(ARCHIVE_MAGIC.as_slice()) {
        return Err(DcaeError::CorruptContainer("not a model archive".into()));
    }
    let version = r
        .u8()
        .ok_or_else(|| DcaeError::CorruptContainer("truncated archive".into()))?;
    if version != ARCHIVE_VERSION {
        return Err(DcaeError::UnsupportedVersion(version));
    }
    let config = read_config(&mut r)
        .ok_or_else(|| DcaeError::CorruptContainer("unreadable configuration block".into()))?;
    config.validate()?;
    let template = DcaeModel::new(config.clone(), 0)?;
    let count = r
        .u32()
        .ok_or_else(|| DcaeError::integrity("archive", "truncated tensor table"))?
        as usize;
    let mut params = ParamStore::new();
    let mut last: Option<String> = None;
    for k in 0..count {
        let broken = |detail: &str| DcaeError::integrity(format!("tensor #{k}"), detail);
        let n = r.u16().ok_or_else(|| broken("truncated name"))? as usize;
        let name = r
            .take(n)
            .and_then(|b| String::from_utf8(b.to_vec()).ok())
            .ok_or_else(|| broken("unreadable name"))?;
        if last.as_ref().is_some_and(|l| *l >= name) {
            return Err(DcaeError::integrity(&name, "tensor table not sorted or duplicated"));
        }
        let rank = r.u8().ok_or_else(|| DcaeError::integrity(&name, "truncated rank"))? as usize;
        if !(1..=4).contains(&rank) {
            return Err(DcaeError::integrity(&name, format!("rank {rank}")));
        }
        let mut shape = [1usize; 4];
        for s in shape.iter_mut().take(rank) {
            *s = r.u32().ok_or_else(|| DcaeError::integrity(&name, "truncated dims"))? as usize;
        }
        let expected = template
            .params
            .value(&name)
            .map_err(|_| DcaeError::integrity(&name, "unexpected tensor"))?
            .shape();
        if shape != expected {
            return Err(DcaeError::integrity(
                &name,
                format!("shape {shape:?} but configuration needs {expected:?}"),
            ));
        }
        let numel: usize = shape.iter().product();
        let raw = r
            .take(numel * 4)
            .ok_or_else(|| DcaeError::integrity(&name, "truncated values"))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::from_vec(shape, data)?;
        t.check_finite(&name)?;
        params.insert(name.clone(), t)?;
        last = Some(name);
    }
    if r.remaining() != 0 {
        return Err(DcaeError::integrity("archive", "trailing bytes after tensor table"));
    }
    if let Some(missing) = template.params.names().find(|n| !params.contains(n)) {
        return Err(DcaeError::integrity(missing, "missing from archive"));
    }
    Ok(DcaeModel { config, params })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        Container {
            profile_id: 0,
            lambda_index: 3,
            width: 100,
            height: 75,
            z_stream: vec![1, 2, 3, 4, 5],
            slice_streams: vec![vec![9; 7], vec![8; 4]],
        }
    }

    #[test]
    fn container_roundtrip_and_size() {
        let c = sample();
        let bytes = write_container(&c).unwrap();
        assert_eq!(bytes.len(), c.total_size());
        assert_eq!(bytes.len(), 20 + 4 * 2 + 5 + 11);
        let back = read_container(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!((back.width, back.height), (100, 75));
    }

    #[test]
    fn container_damage_detected() {
        let bytes = write_container(&sample()).unwrap();
        assert!(matches!(
            read_container(&bytes[..bytes.len() - 1]),
            Err(DcaeError::CorruptContainer(_))
        ));
        let mut b = bytes.clone();
        b[4] = 9;
        assert!(matches!(read_container(&b), Err(DcaeError::UnsupportedVersion(9))));
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(matches!(read_container(&b), Err(DcaeError::CorruptContainer(_))));
        let mut b = bytes;
        b.push(0);
        assert!(read_container(&b).is_err());
    }

    #[test]
    fn archive_is_canonical() {
        let m = DcaeModel::tiny(11).unwrap();
        let a = save_model(&m).unwrap();
        let back = load_model(&a).unwrap();
        assert_eq!(back, m);
        assert_eq!(save_model(&back).unwrap(), a);
    }

    #[test]
    fn archive_tamper_detected() {
        let m = DcaeModel::tiny(11).unwrap();
        let a = save_model(&m).unwrap();
        assert!(matches!(
            load_model(&a[..a.len() - 3]),
            Err(DcaeError::Integrity { .. })
        ));
        // Bump the first dimension of the first tensor.
        let first = m.params.names().next().unwrap().to_string();
        let at = a
            .windows(first.len())
            .position(|w| w == first.as_bytes())
            .unwrap()
            + first.len()
            + 1;
        let mut b = a.clone();
        b[at] ^= 1;
        assert!(matches!(load_model(&b), Err(DcaeError::Integrity { .. })));
    }

    #[test]
    fn archive_rejects_drifted_profile() {
        let mut m = DcaeModel::tiny(1).unwrap();
        m.config.head_hidden = 40;
        let a = save_model(&m).unwrap();
        assert!(matches!(load_model(&a), Err(DcaeError::Config(_))));
    }
}
