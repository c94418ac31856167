//! Flat binary weight container.
//!
//! ```text
//! "SKWS" | version: u32 | count: u32 | count × entry
//! entry = name_len: u32 | name: utf-8 | rank: u32 | extents: u32 × rank | f32 × numel
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SKWS";
pub const VERSION: u32 = 1;

pub type Entry = (String, Tensor<f32>);

pub fn encode(entries: &[Entry]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos,
                reason: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            reason: "bad magic, expected SKWS".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Parse {
            offset: 4,
            reason: format!("unsupported container version {version}"),
        });
    }
    let count = r.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for idx in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Checkpoint {
                entry: format!("#{idx}"),
                reason: "name is not valid UTF-8".into(),
            })?
            .to_string();
        let wrap = |e: Error| Error::Checkpoint {
            entry: name.clone(),
            reason: e.to_string(),
        };
        let rank = r.u32("rank").map_err(wrap)? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32("extent").map_err(wrap)? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| wrap(Error::Contract("extent product overflows".into())))?;
        let payload = r
            .take(numel.saturating_mul(4), "payload")
            .map_err(wrap)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(&shape, data).map_err(wrap)?;
        entries.push((name, tensor));
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse {
            offset: r.pos,
            reason: format!("{} trailing bytes after last entry", bytes.len() - r.pos),
        });
    }
    Ok(entries)
}

pub fn save(path: &Path, entries: &[Entry]) -> Result<()> {
    std::fs::write(path, encode(entries)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<Entry>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Stores UTF-8 text as a rank-1 entry, one byte per element.
pub fn text_to_tensor(text: &str) -> Tensor<f32> {
    text.bytes().map(f32::from).collect::<Vec<_>>().into()
}

pub fn tensor_to_text(name: &str, t: &Tensor<f32>) -> Result<String> {
    let bad = |reason: &str| Error::Checkpoint {
        entry: name.to_string(),
        reason: reason.to_string(),
    };
    if t.rank() != 1 {
        return Err(bad("text entry must be rank 1"));
    }
    let bytes = t
        .data()
        .iter()
        .map(|&v| {
            if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                Ok(v as u8)
            } else {
                Err(bad("text entry holds a non-byte value"))
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    String::from_utf8(bytes).map_err(|_| bad("text entry is not valid UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::new(&[2], vec![1.0f32, -0.5]).unwrap();
        let bytes = encode(&[("w".to_string(), t)]);
        let mut want = Vec::new();
        want.extend_from_slice(b"SKWS");
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.push(b'w');
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-0.5f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn truncated_payload_names_entry() {
        let t = Tensor::new(&[3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let mut bytes = encode(&[("layer.weight".to_string(), t)]);
        bytes.truncate(bytes.len() - 2);
        match decode(&bytes) {
            Err(Error::Checkpoint { entry, .. }) => assert_eq!(entry, "layer.weight"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic() {
        assert!(matches!(decode(b"NOPE\x01\0\0\0\0\0\0\0"), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn text_entry_round_trip() {
        let text = "a=1\nb=x,y\n";
        let t = text_to_tensor(text);
        assert_eq!(tensor_to_text("config", &t).unwrap(), text);
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(
            shapes in prop::collection::vec(prop::collection::vec(0usize..4, 0..3), 0..4),
            seed in any::<u32>(),
        ) {
            let entries: Vec<Entry> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let n: usize = s.iter().product();
                    let data = (0..n).map(|k| (k as f32 + seed as f32) * 0.25 - 3.0).collect();
                    (format!("e{i}"), Tensor::new(s, data).unwrap())
                })
                .collect();
            let back = decode(&encode(&entries)).unwrap();
            prop_assert_eq!(back, entries);
        }
    }
}
