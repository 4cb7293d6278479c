//! `ARDX1` checkpoint files.
//!
//! ```text
//! ARDX1
//! kind <model kind>
//! meta <key> <value>            (zero or more)
//! array <name> <d0,d1,..|-> <byte offset> <element count>
//! end
//! <little-endian f64 payload>
//! ```
//!
//! Offsets are relative to the first payload byte. A scalar array writes
//! `-` for its shape.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &str = "ARDX1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<(String, Tensor)>,
}

fn check_token(what: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(|c| c.is_whitespace()) {
        return Err(Error::invalid(format!("checkpoint {what} {s:?} must be a non-empty token")));
    }
    Ok(())
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Checkpoint {
            kind: kind.to_string(),
            ..Default::default()
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn push(&mut self, name: &str, t: Tensor) {
        self.arrays.push((name.to_string(), t));
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::invalid(format!("checkpoint lacks meta key {key:?}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| Error::invalid(format!("checkpoint meta {key}={raw:?} does not parse")))
    }

    pub fn array(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::invalid(format!("checkpoint lacks array {name:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        check_token("kind", &self.kind)?;
        let mut header = format!("{MAGIC}\nkind {}\n", self.kind);
        for (k, v) in &self.meta {
            check_token("meta key", k)?;
            if v.contains('\n') {
                return Err(Error::invalid(format!("meta value for {k} contains a newline")));
            }
            header.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in &self.arrays {
            check_token("array name", name)?;
            let shape = if t.rank() == 0 {
                "-".to_string()
            } else {
                t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
            };
            header.push_str(&format!("array {name} {shape} {offset} {}\n", t.len()));
            offset += 8 * t.len();
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        out.reserve(offset);
        for (_, t) in &self.arrays {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, msg: String| Error::Format {
            what: "checkpoint",
            offset,
            msg,
        };
        let mut pos = 0usize;
        let next_line = |pos: &mut usize| -> Result<(usize, String)> {
            let start = *pos;
            let rel = bytes[start..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| fmt(start, "unterminated header line".into()))?;
            *pos = start + rel + 1;
            let line = std::str::from_utf8(&bytes[start..start + rel])
                .map_err(|_| fmt(start, "header is not UTF-8".into()))?;
            Ok((start, line.to_string()))
        };

        let (at, magic) = next_line(&mut pos)?;
        if magic != MAGIC {
            return Err(fmt(at, format!("bad magic {magic:?}")));
        }
        let (at, kind_line) = next_line(&mut pos)?;
        let kind = kind_line
            .strip_prefix("kind ")
            .ok_or_else(|| fmt(at, format!("expected kind line, got {kind_line:?}")))?
            .to_string();
        let mut ck = Checkpoint::new(&kind);
        let mut layout = Vec::new();
        loop {
            let (at, line) = next_line(&mut pos)?;
            if line == "end" {
                break;
            }
            let mut parts = line.splitn(3, ' ');
            match parts.next() {
                Some("meta") => {
                    let k = parts.next().ok_or_else(|| fmt(at, "meta without key".into()))?;
                    let v = parts.next().unwrap_or("");
                    ck.meta.insert(k.to_string(), v.to_string());
                }
                Some("array") => {
                    let fields: Vec<&str> = line.split(' ').collect();
                    if fields.len() != 5 {
                        return Err(fmt(at, format!("bad array line {line:?}")));
                    }
                    let shape: Vec<usize> = if fields[2] == "-" {
                        Vec::new()
                    } else {
                        fields[2]
                            .split(',')
                            .map(|d| d.parse().map_err(|_| fmt(at, format!("bad extent {d:?}"))))
                            .collect::<Result<_>>()?
                    };
                    let off: usize = fields[3].parse().map_err(|_| fmt(at, "bad offset".into()))?;
                    let count: usize = fields[4].parse().map_err(|_| fmt(at, "bad count".into()))?;
                    let expect = shape
                        .iter()
                        .try_fold(1usize, |a, &d| a.checked_mul(d))
                        .ok_or_else(|| fmt(at, "shape overflows".into()))?;
                    if expect != count {
                        return Err(fmt(at, format!("shape {shape:?} disagrees with count {count}")));
                    }
                    layout.push((fields[1].to_string(), shape, off, count, at));
                }
                _ => return Err(fmt(at, format!("unrecognized header line {line:?}"))),
            }
        }
        let payload = &bytes[pos..];
        for (name, shape, off, count, at) in layout {
            let end = count
                .checked_mul(8)
                .and_then(|n| n.checked_add(off))
                .ok_or_else(|| fmt(at, "array extent overflows".into()))?;
            if end > payload.len() {
                return Err(fmt(pos + payload.len(), format!("payload truncated in array {name}")));
            }
            let data: Vec<f64> = payload[off..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = if shape.is_empty() {
                Tensor::scalar(data[0])
            } else {
                Tensor::new(shape, data).map_err(|e| fmt(at, e.to_string()))?
            };
            ck.arrays.push((name, t));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bitwise(values in proptest::collection::vec(any::<f64>(), 1..40), split in 0usize..40) {
            let split = split.min(values.len());
            let mut ck = Checkpoint::new("test").with_meta("steps", 12);
            if split > 0 {
                ck.push("a", Tensor::from_vec(values[..split].to_vec()));
            }
            ck.push("s", Tensor::scalar(values[0]));
            if split < values.len() {
                ck.push("b", Tensor::new(vec![1, values.len() - split], values[split..].to_vec()).unwrap());
            }
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back.kind.as_str(), "test");
            prop_assert_eq!(back.arrays.len(), ck.arrays.len());
            for ((n1, t1), (n2, t2)) in ck.arrays.iter().zip(&back.arrays) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(t1.shape(), t2.shape());
                let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
                let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(b1, b2);
            }
        }
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        let mut ck = Checkpoint::new("made");
        ck.push("w", Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let bytes = ck.to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[4] = b'2';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        let short = &bytes[..bytes.len() - 3];
        assert!(matches!(Checkpoint::from_bytes(short), Err(Error::Format { .. })));
    }

    #[test]
    fn header_is_human_readable() {
        let mut ck = Checkpoint::new("made").with_meta("dims", 2);
        ck.push("layer0.w", Tensor::zeros(&[2, 3]));
        let bytes = ck.to_bytes().unwrap();
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.starts_with("ARDX1\nkind made\nmeta dims 2\narray layer0.w 2,3 0 6\nend\n"));
    }
}
