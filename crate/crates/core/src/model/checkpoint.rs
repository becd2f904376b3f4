//! Self-describing binary checkpoint. The byte layout is documented in
//! `docs/FORMATS.md`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::params::{ModelConfig, ParamSet};
use super::proto::{Prototype, PrototypeClassifier};
use crate::error::{Error, Result};
use crate::tensor::Array;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"IFSSCKPT";
pub const CHECKPOINT_VERSION: u16 = 1;

const KEY_MODEL_CONFIG: &str = "model.config";
const KEY_FROZEN: &str = "model.extractor-frozen";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub arrays: Vec<(String, Array<f32>)>,
    pub classifier: Option<PrototypeClassifier>,
}

impl Checkpoint {
    pub fn from_model(params: &ParamSet, classifier: Option<&PrototypeClassifier>) -> Self {
        let mut metadata = BTreeMap::new();
        metadata.insert(
            KEY_MODEL_CONFIG.to_string(),
            serde_json::to_string(params.config()).expect("serializable config"),
        );
        metadata.insert(KEY_FROZEN.to_string(), params.extractor_frozen().to_string());
        Self {
            metadata,
            arrays: params
                .names()
                .iter()
                .cloned()
                .zip(params.values().iter().cloned())
                .collect(),
            classifier: classifier.cloned(),
        }
    }

    pub fn array(&self, name: &str) -> Option<&Array<f32>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    /// Rebuilds the network parameters stored under their layout names.
    pub fn params(&self) -> Result<ParamSet> {
        let bad = |r: String| Error::InvalidConfig(format!("checkpoint: {r}"));
        let config: ModelConfig = serde_json::from_str(
            self.metadata
                .get(KEY_MODEL_CONFIG)
                .ok_or_else(|| bad("missing model config".into()))?,
        )
        .map_err(|e| bad(e.to_string()))?;
        let values = config
            .layout()
            .into_iter()
            .map(|(name, _, _)| {
                self.array(&name)
                    .cloned()
                    .ok_or_else(|| bad(format!("missing array {name}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut p = ParamSet::from_values(&config, values)?;
        if self.metadata.get(KEY_FROZEN).map(String::as_str) == Some("true") {
            p.freeze_extractor();
        }
        Ok(p)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        put_u32(&mut out, self.metadata.len());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.arrays.len());
        for (name, a) in &self.arrays {
            put_str(&mut out, name);
            put_u32(&mut out, a.rank());
            for &e in a.shape() {
                put_u32(&mut out, e);
            }
            out.extend_from_slice(&a.to_le_bytes());
        }
        match &self.classifier {
            None => out.push(0),
            Some(c) => {
                out.push(1);
                put_u32(&mut out, c.session());
                put_u32(&mut out, c.len());
                put_u32(&mut out, c.dim());
                for p in c.prototypes() {
                    put_u32(&mut out, p.class_id as usize);
                    put_u32(&mut out, p.session_born);
                    put_f32s(&mut out, &p.vector);
                    match &p.anchor {
                        None => out.push(0),
                        Some(a) => {
                            out.push(1);
                            put_f32s(&mut out, a);
                        }
                    }
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if bytes.len() < 8 + 4 + 32 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(r.bad("missing checkpoint magic"));
        }
        let body = bytes.len() - 32;
        if Sha256::digest(&bytes[..body]).as_slice() != &bytes[body..] {
            return Err(r.bad("checksum mismatch"));
        }
        r.bytes = &bytes[..body];
        r.pos = 8;
        if r.u16()? != CHECKPOINT_VERSION {
            return Err(r.bad("unsupported checkpoint version"));
        }
        r.u16()?;
        let mut metadata = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            metadata.insert(k, v);
        }
        let mut arrays = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().product();
            let data = r.f32s(n)?;
            arrays.push((name, Array::new(shape, data)?));
        }
        let classifier = match r.u8()? {
            0 => None,
            1 => {
                let session = r.u32()?;
                let count = r.u32()?;
                let d = r.u32()?;
                let mut protos = Vec::with_capacity(count);
                for _ in 0..count {
                    let class_id = r.u32()? as u32;
                    let session_born = r.u32()?;
                    let vector = r.f32s(d)?;
                    let anchor = match r.u8()? {
                        0 => None,
                        1 => Some(r.f32s(d)?),
                        _ => return Err(r.bad("bad anchor flag")),
                    };
                    protos.push(Prototype {
                        class_id,
                        vector,
                        session_born,
                        anchor,
                    });
                }
                Some(PrototypeClassifier::from_parts(protos, session)?)
            }
            _ => return Err(r.bad("bad classifier flag")),
        };
        if r.pos != r.bytes.len() {
            return Err(r.bad("trailing bytes"));
        }
        Ok(Self {
            metadata,
            arrays,
            classifier,
        })
    }

    /// Writes the checkpoint and returns the hex SHA-256 of the file.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, &bytes)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    /// Loads a checkpoint and the hex SHA-256 of its file.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = fs::read(path)?;
        let ck = Self::from_bytes(&bytes, path)?;
        Ok((ck, hex::encode(Sha256::digest(&bytes))))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn bad(&self, reason: &str) -> Error {
        Error::format(self.path, reason)
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.bad("truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        let b = self.take(n)?.to_vec();
        String::from_utf8(b).map_err(|_| self.bad("invalid UTF-8"))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let b = self.take(n.checked_mul(4).ok_or_else(|| self.bad("array too large"))?)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::expand_classifier;

    #[test]
    fn round_trip_preserves_everything() {
        let mut p = ParamSet::init(&ModelConfig::default(), 5).unwrap();
        p.freeze_extractor();
        let c = PrototypeClassifier::new(vec![1.0; 32], vec![(2, vec![0.5; 32])]).unwrap();
        let c = expand_classifier(&c, &p, vec![(4, vec![-1.0; 32])]).unwrap();
        let mut ck = Checkpoint::from_model(&p, Some(&c));
        ck.metadata.insert("method".into(), "meta".into());
        ck.arrays.push(("momentum.head.bias".into(), Array::full([32], 0.25)));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let hash = ck.save(&path).unwrap();
        let (back, hash2) = Checkpoint::load(&path).unwrap();
        assert_eq!(hash, hash2);
        assert_eq!(back, ck);
        assert_eq!(back.params().unwrap(), p);
    }

    #[test]
    fn corruption_is_detected() {
        let p = ParamSet::init(&ModelConfig::default(), 5).unwrap();
        let mut b = Checkpoint::from_model(&p, None).to_bytes();
        b[40] ^= 1;
        assert!(Checkpoint::from_bytes(&b, Path::new("x")).is_err());
    }
}
