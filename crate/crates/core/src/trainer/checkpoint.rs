//! Binary checkpoint container.
//!
//! ```text
//! b"UNMTCKPT" | u32 version | u64 header length | JSON header
//! | f64 LE tensor data, section by section in layout order
//! | sha256 of everything before it
//! ```

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::Parameters;

const MAGIC: &[u8; 8] = b"UNMTCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<H> {
    layout: Vec<(String, Vec<usize>)>,
    sections: Vec<String>,
    header: H,
}

/// Writes `header` and the named parameter sections (all sharing one
/// layout) atomically to `path`.
pub fn write_container<H: Serialize>(path: &Path, header: &H, sections: &[(&str, &Parameters)]) -> Result<()> {
    let layout = sections.first().map(|s| s.1.layout()).unwrap_or_default();
    if sections.iter().any(|s| s.1.layout() != layout) {
        return Err(Error::Checkpoint("sections disagree on tensor layout".into()));
    }
    let env = Envelope {
        layout,
        sections: sections.iter().map(|s| s.0.to_string()).collect(),
        header,
    };
    let json = serde_json::to_vec(&env)?;
    let values: usize = sections.iter().map(|s| s.1.num_values()).sum();
    let mut buf = Vec::with_capacity(8 + 4 + 8 + json.len() + 8 * values + 32);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, p) in sections {
        for (_, t) in p.named() {
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);

    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads a container. `template` builds, from the header, the parameter
/// tree each section is filled into; its layout must match the stored one.
pub fn read_container<H, F>(path: &Path, template: F) -> Result<(H, Vec<(String, Parameters)>)>
where
    H: DeserializeOwned,
    F: FnOnce(&H) -> Result<Parameters>,
{
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if buf.len() < 8 + 4 + 8 + 32 || &buf[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    if 20 + hlen > body.len() {
        return Err(bad("truncated header"));
    }
    let env: Envelope<H> = serde_json::from_slice(&body[20..20 + hlen])?;
    let template = template(&env.header)?;
    if env.layout != template.layout() {
        return Err(bad("tensor layout does not match the model configuration"));
    }
    let mut pos = 20 + hlen;
    let mut out = Vec::with_capacity(env.sections.len());
    for name in env.sections {
        let mut p = template.clone();
        for (_, t) in p.named_mut() {
            let need = 8 * t.data.len();
            if pos + need > body.len() {
                return Err(bad("truncated tensor data"));
            }
            for (v, chunk) in t.data.iter_mut().zip(body[pos..pos + need].chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
            pos += need;
        }
        out.push((name, p));
    }
    if pos != body.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok((env.header, out))
}

/// Serializable position of a ChaCha stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Checkpoint("malformed generator state".into());
        let bytes = hex::decode(&self.seed).map_err(|_| bad())?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};
    use rand::Rng;

    #[test]
    fn container_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let m = Model::new(ModelConfig::tiny(), 20, 3).unwrap();
        let z = m.params.zeros_like();
        write_container(&path, &"hello".to_string(), &[("params", &m.params), ("zeros", &z)]).unwrap();
        let (h, secs): (String, _) = read_container(&path, |_| Ok(z.clone())).unwrap();
        assert_eq!(h, "hello");
        assert_eq!(secs[0].1, m.params);
        assert_eq!(secs[1].1, z);

        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n / 2] ^= 1;
        std::fs::write(&path, bytes).unwrap();
        assert!(read_container::<String, _>(&path, |_| Ok(z.clone())).is_err());
    }

    #[test]
    fn rng_state_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..37 {
            rng.random::<u32>();
        }
        let mut restored = RngState::capture(&rng).restore().unwrap();
        for _ in 0..100 {
            assert_eq!(rng.random::<u64>(), restored.random::<u64>());
        }
    }
}
