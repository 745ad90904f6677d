//! MVOL container: `"MVOL"`, version byte `1`, little-endian `u32` header
//! length, UTF-8 JSON header, then the raw little-endian payload in
//! D-fastest order. Deformation fields add `"components": 3` to the header
//! and interleave components after the last spatial axis.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::DeformationField;
use crate::volume::{voxel_count, LabelMap, Shape3, Spacing3, Volume};

pub const MAGIC: &[u8; 4] = b"MVOL";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MvolHeader {
    pub dtype: String,
    pub shape: Shape3,
    pub spacing: Spacing3,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<usize>,
}

/// Anything an MVOL file can hold.
#[derive(Clone, Debug, PartialEq)]
pub enum MvolObject {
    Volume(Volume),
    Labels(LabelMap),
    Field(DeformationField),
}

impl From<Volume> for MvolObject {
    fn from(v: Volume) -> Self {
        MvolObject::Volume(v)
    }
}

impl From<LabelMap> for MvolObject {
    fn from(v: LabelMap) -> Self {
        MvolObject::Labels(v)
    }
}

impl From<DeformationField> for MvolObject {
    fn from(v: DeformationField) -> Self {
        MvolObject::Field(v)
    }
}

pub fn encode(obj: &MvolObject) -> Vec<u8> {
    let (header, payload): (MvolHeader, Vec<u8>) = match obj {
        MvolObject::Volume(v) => (
            MvolHeader { dtype: "f32".into(), shape: v.shape(), spacing: v.spacing(), components: None },
            v.data().iter().flat_map(|x| x.to_le_bytes()).collect(),
        ),
        MvolObject::Labels(l) => (
            MvolHeader { dtype: "u16".into(), shape: l.shape(), spacing: l.spacing(), components: None },
            l.data().iter().flat_map(|x| x.to_le_bytes()).collect(),
        ),
        MvolObject::Field(f) => (
            MvolHeader { dtype: "f32".into(), shape: f.shape(), spacing: f.spacing(), components: Some(3) },
            f.data().iter().flat_map(|x| x.to_le_bytes()).collect(),
        ),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(9 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

pub fn decode(bytes: &[u8]) -> Result<MvolObject> {
    if bytes.len() < 4 {
        return Err(Error::Truncated { expected: 9, found: bytes.len() });
    }
    if &bytes[..4] != MAGIC {
        let mut found = [0u8; 4];
        found.copy_from_slice(&bytes[..4]);
        return Err(Error::BadMagic { found });
    }
    if bytes.len() < 9 {
        return Err(Error::Truncated { expected: 9, found: bytes.len() });
    }
    if bytes[4] != VERSION {
        return Err(Error::UnsupportedVersion(bytes[4]));
    }
    let hlen = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let body = &bytes[9..];
    if body.len() < hlen {
        return Err(Error::Truncated { expected: 9 + hlen, found: bytes.len() });
    }
    let header: MvolHeader =
        serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Header(e.to_string()))?;
    let payload = &body[hlen..];
    let comps = header.components.unwrap_or(1);
    if comps != 1 && comps != 3 {
        return Err(Error::Header(format!("unsupported component count {comps}")));
    }
    let n = voxel_count(header.shape) * comps;
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "u16" => 2,
        other => return Err(Error::UnsupportedDtype(other.to_string())),
    };
    if payload.len() < n * width {
        return Err(Error::Truncated { expected: 9 + hlen + n * width, found: bytes.len() });
    }
    if payload.len() > n * width {
        return Err(Error::Header(format!(
            "{} trailing bytes after payload",
            payload.len() - n * width
        )));
    }
    match (header.dtype.as_str(), comps) {
        ("f32", 1) => {
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Ok(MvolObject::Volume(Volume::new(header.shape, header.spacing, data)?))
        }
        ("f32", 3) => {
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Ok(MvolObject::Field(DeformationField::new(header.shape, data)?.with_spacing(header.spacing)))
        }
        ("u16", 1) => {
            let data = payload.chunks_exact(2).map(|c| u16::from_le_bytes(c.try_into().unwrap())).collect();
            Ok(MvolObject::Labels(LabelMap::new(header.shape, header.spacing, data)?))
        }
        (dtype, _) => Err(Error::UnsupportedDtype(format!("{dtype} with {comps} components"))),
    }
}

pub fn write_mvol(path: impl AsRef<Path>, obj: impl Into<MvolObject>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(&obj.into());
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_mvol(path: impl AsRef<Path>) -> Result<MvolObject> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn wrong_kind(path: &Path, want: &str) -> Error {
    Error::Header(format!("{} does not hold a {want}", path.display()))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    match read_mvol(path.as_ref())? {
        MvolObject::Volume(v) => Ok(v),
        _ => Err(wrong_kind(path.as_ref(), "scalar f32 volume")),
    }
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    match read_mvol(path.as_ref())? {
        MvolObject::Labels(v) => Ok(v),
        _ => Err(wrong_kind(path.as_ref(), "u16 label map")),
    }
}

pub fn read_field(path: impl AsRef<Path>) -> Result<DeformationField> {
    match read_mvol(path.as_ref())? {
        MvolObject::Field(v) => Ok(v),
        _ => Err(wrong_kind(path.as_ref(), "3-component field")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_voxel_layout() {
        let v = Volume::new([1, 1, 1], [1.0; 3], vec![0.5]).unwrap();
        let bytes = encode(&v.clone().into());
        let json = br#"{"dtype":"f32","shape":[1,1,1],"spacing":[1.0,1.0,1.0]}"#;
        assert_eq!(&bytes[..4], b"MVOL");
        assert_eq!(bytes[4], 1);
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize, json.len());
        assert_eq!(&bytes[9..9 + json.len()], json);
        assert_eq!(bytes.len(), 4 + 1 + 4 + json.len() + 4);
        assert_eq!(&bytes[bytes.len() - 4..], &0.5f32.to_le_bytes());
        assert_eq!(decode(&bytes).unwrap(), MvolObject::Volume(v));
    }

    #[test]
    fn ramp_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ramp.mvol");
        let v = Volume::new([2, 2, 2], [0.5, 1.0, 2.0], (0..8).map(|i| i as f32).collect()).unwrap();
        write_mvol(&path, v.clone()).unwrap();
        let raw = fs::read(&path).unwrap();
        let payload: Vec<f32> =
            raw[raw.len() - 32..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        assert_eq!(payload, v.data());
        assert_eq!(read_volume(&path).unwrap(), v);
    }

    #[test]
    fn labels_use_u16() {
        let l = LabelMap::new([3, 1, 1], [1.0; 3], vec![0, 1, 2]).unwrap();
        let bytes = encode(&l.clone().into());
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.contains(r#""dtype":"u16""#));
        assert_eq!(decode(&bytes).unwrap(), MvolObject::Labels(l));
    }

    #[test]
    fn field_header_carries_components() {
        let f = DeformationField::from_fn([2, 1, 1], |h, _, _| [h as f32, -1.0, 0.25]);
        let bytes = encode(&f.clone().into());
        assert!(String::from_utf8_lossy(&bytes).contains(r#""components":3"#));
        assert_eq!(decode(&bytes).unwrap(), MvolObject::Field(f));
    }

    #[test]
    fn error_kinds_are_distinct() {
        let good = encode(&Volume::zeros([2, 2, 2]).into());

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::BadMagic { found }) if &found == b"XVOL"));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode(&bad), Err(Error::UnsupportedVersion(2))));

        assert!(matches!(decode(&good[..good.len() - 3]), Err(Error::Truncated { .. })));

        let hdr = br#"{"dtype":"f64","shape":[1,1,1],"spacing":[1.0,1.0,1.0]}"#;
        let mut bad = b"MVOL\x01".to_vec();
        bad.extend_from_slice(&(hdr.len() as u32).to_le_bytes());
        bad.extend_from_slice(hdr);
        bad.extend_from_slice(&[0; 8]);
        assert!(matches!(decode(&bad), Err(Error::UnsupportedDtype(d)) if d == "f64"));
    }

    proptest! {
        #[test]
        fn encode_decode_is_bit_exact(
            dims in (1usize..5, 1usize..5, 1usize..5),
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let shape = [dims.0, dims.1, dims.2];
            let n = voxel_count(shape);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let v = Volume::new(shape, [1.0, 0.7, 1.3], (0..n).map(|_| rng.random::<f32>()).collect()).unwrap();
            let l = LabelMap::new(shape, [2.0; 3], (0..n).map(|_| rng.random_range(0..7u16)).collect()).unwrap();
            for obj in [MvolObject::from(v), MvolObject::from(l)] {
                let bytes = encode(&obj);
                let back = decode(&bytes).unwrap();
                prop_assert_eq!(encode(&back), bytes);
                prop_assert_eq!(back, obj);
            }
        }
    }
}
