//! Versioned container: a text header followed by named arrays stored as
//! little-endian `f32`.
//!
//! ```text
//! TADA <kind> v<version>
//! key = value
//! list <name> <count>
//! <count lines>
//! array <name> <d0>x<d1>...
//! <4 * product(dims) bytes>
//! end
//! ```

use std::collections::BTreeMap;

use thiserror::Error;

use crate::numerics::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("not a container: {0}")]
    Malformed(String),
    #[error("expected a `{expected}` container, found `{found}`")]
    WrongKind { expected: String, found: String },
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("missing header key `{0}`")]
    MissingKey(String),
    #[error("missing array `{0}`")]
    MissingArray(String),
    #[error("array `{name}` has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub kind: String,
    pub header: BTreeMap<String, String>,
    pub lists: BTreeMap<String, Vec<String>>,
    pub arrays: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(kind: &str) -> Self {
        Container {
            kind: kind.to_string(),
            ..Default::default()
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.header.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str, ContainerError> {
        self.header
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| ContainerError::MissingKey(key.to_string()))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, ContainerError> {
        self.get(key)?
            .parse()
            .map_err(|_| ContainerError::Malformed(format!("bad value for `{key}`")))
    }

    pub fn list(&self, name: &str) -> Result<&[String], ContainerError> {
        self.lists
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| ContainerError::MissingKey(name.to_string()))
    }

    pub fn array(&self, name: &str) -> Result<&Tensor, ContainerError> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| ContainerError::MissingArray(name.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("TADA {} v{}\n", self.kind, FORMAT_VERSION).into_bytes();
        for (k, v) in &self.header {
            out.extend_from_slice(format!("{k} = {v}\n").as_bytes());
        }
        for (name, items) in &self.lists {
            out.extend_from_slice(format!("list {name} {}\n", items.len()).as_bytes());
            for item in items {
                out.extend_from_slice(item.as_bytes());
                out.push(b'\n');
            }
        }
        for (name, t) in &self.arrays {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            out.extend_from_slice(format!("array {name} {}\n", dims.join("x")).as_bytes());
            for v in t.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            out.push(b'\n');
        }
        out.extend_from_slice(b"end\n");
        out
    }

    pub fn from_bytes(bytes: &[u8], expected_kind: &str) -> Result<Self, ContainerError> {
        let mut pos = 0usize;
        let next_line = |pos: &mut usize| -> Result<String, ContainerError> {
            let rest = &bytes[*pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| ContainerError::Malformed("unexpected end of input".into()))?;
            let line = std::str::from_utf8(&rest[..end])
                .map_err(|_| ContainerError::Malformed("header is not UTF-8".into()))?
                .to_string();
            *pos += end + 1;
            Ok(line)
        };

        let first = next_line(&mut pos)?;
        let parts: Vec<&str> = first.split(' ').collect();
        if parts.len() != 3 || parts[0] != "TADA" {
            return Err(ContainerError::Malformed("missing magic line".into()));
        }
        if parts[1] != expected_kind {
            return Err(ContainerError::WrongKind {
                expected: expected_kind.into(),
                found: parts[1].into(),
            });
        }
        let version: u32 = parts[2]
            .strip_prefix('v')
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| ContainerError::Malformed("bad version".into()))?;
        if version != FORMAT_VERSION {
            return Err(ContainerError::Version(version));
        }
        let mut c = Container::new(expected_kind);
        loop {
            let line = next_line(&mut pos)?;
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("list ") {
                let (name, count) = rest
                    .rsplit_once(' ')
                    .ok_or_else(|| ContainerError::Malformed(line.clone()))?;
                let count: usize = count
                    .parse()
                    .map_err(|_| ContainerError::Malformed(line.clone()))?;
                let mut items = Vec::with_capacity(count);
                for _ in 0..count {
                    items.push(next_line(&mut pos)?);
                }
                c.lists.insert(name.to_string(), items);
            } else if let Some(rest) = line.strip_prefix("array ") {
                let (name, dims) = rest
                    .rsplit_once(' ')
                    .ok_or_else(|| ContainerError::Malformed(line.clone()))?;
                let shape: Vec<usize> = dims
                    .split('x')
                    .map(|d| d.parse())
                    .collect::<Result<_, _>>()
                    .map_err(|_| ContainerError::Malformed(line.clone()))?;
                let n: usize = shape.iter().product();
                let end = pos + 4 * n;
                if end + 1 > bytes.len() || bytes[end] != b'\n' {
                    return Err(ContainerError::Malformed(format!("truncated array `{name}`")));
                }
                let data = bytes[pos..end]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                    .collect();
                pos = end + 1;
                let t = Tensor::new(shape, data).map_err(|e| ContainerError::Malformed(e.to_string()))?;
                c.arrays.push((name.to_string(), t));
            } else if let Some((k, v)) = line.split_once(" = ") {
                c.header.insert(k.to_string(), v.to_string());
            } else {
                return Err(ContainerError::Malformed(format!("unrecognised line `{line}`")));
            }
        }
        Ok(c)
    }

    pub fn write(&self, path: &std::path::Path) -> Result<(), ContainerError> {
        // write-then-rename so readers never observe a partial file
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &std::path::Path, expected_kind: &str) -> Result<Self, ContainerError> {
        Self::from_bytes(&std::fs::read(path)?, expected_kind)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_header_lists_and_f32_arrays() {
        let mut c = Container::new("model");
        c.set("k", 5);
        c.set("note", "a = b");
        c.lists.insert("vocab".into(), vec!["x y".into(), "z".into()]);
        c.arrays.push(("w".into(), Tensor::matrix(2, 2, vec![1.0, -2.5, 0.1, 3.0]).unwrap()));
        let back = Container::from_bytes(&c.to_bytes(), "model").unwrap();
        assert_eq!(back.get("note").unwrap(), "a = b");
        assert_eq!(back.list("vocab").unwrap(), &["x y".to_string(), "z".to_string()]);
        let w = back.array("w").unwrap();
        assert_eq!(w.shape(), &[2, 2]);
        assert_eq!(w.data()[2], 0.1f32 as f64);
    }

    #[test]
    fn rejects_wrong_kind_and_truncation() {
        let c = Container::new("topics");
        assert!(matches!(
            Container::from_bytes(&c.to_bytes(), "model"),
            Err(ContainerError::WrongKind { .. })
        ));
        let mut c = Container::new("model");
        c.arrays.push(("w".into(), Tensor::zeros(&[3])));
        let bytes = c.to_bytes();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 9], "model").is_err());
    }
}
