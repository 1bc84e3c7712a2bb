//! A single-file archive for named `f64` arrays, strings, and integers, used
//! for checkpoints. Entries are written in sorted name order with a SHA-256
//! trailer, so serializing the same contents always produces identical bytes
//! and corruption is detected on read.

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"TNSRAR01";
const KIND_ARRAY: u8 = 1;
const KIND_TEXT: u8 = 2;
const KIND_UINT: u8 = 3;

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    Array(ArrayD<f64>),
    Text(String),
    Uint(u64),
}

#[derive(Debug, Default)]
pub struct Archive {
    entries: BTreeMap<String, Entry>,
}

fn corrupt(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

impl Archive {
    pub fn new() -> Archive {
        Archive::default()
    }

    pub fn put_array(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.entries.insert(name.into(), Entry::Array(value));
    }

    pub fn put_text(&mut self, name: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(name.into(), Entry::Text(value.into()));
    }

    pub fn put_uint(&mut self, name: impl Into<String>, value: u64) {
        self.entries.insert(name.into(), Entry::Uint(value));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.get(name)
    }

    pub fn get_array(&self, name: &str) -> io::Result<&ArrayD<f64>> {
        match self.entries.get(name) {
            Some(Entry::Array(a)) => Ok(a),
            Some(_) => Err(corrupt(format!("entry {name} is not an array"))),
            None => Err(corrupt(format!("missing archive entry {name}"))),
        }
    }

    pub fn get_text(&self, name: &str) -> io::Result<&str> {
        match self.entries.get(name) {
            Some(Entry::Text(s)) => Ok(s),
            Some(_) => Err(corrupt(format!("entry {name} is not text"))),
            None => Err(corrupt(format!("missing archive entry {name}"))),
        }
    }

    pub fn get_uint(&self, name: &str) -> io::Result<u64> {
        match self.entries.get(name) {
            Some(Entry::Uint(v)) => Ok(*v),
            Some(_) => Err(corrupt(format!("entry {name} is not an integer"))),
            None => Err(corrupt(format!("missing archive entry {name}"))),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (name, entry) in &self.entries {
            let name_bytes = name.as_bytes();
            match entry {
                Entry::Array(a) => {
                    buf.push(KIND_ARRAY);
                    buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
                    buf.extend_from_slice(name_bytes);
                    buf.extend_from_slice(&(a.ndim() as u32).to_le_bytes());
                    for &d in a.shape() {
                        buf.extend_from_slice(&(d as u64).to_le_bytes());
                    }
                    let std = a.as_standard_layout();
                    for &v in std.as_slice().unwrap() {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::Text(s) => {
                    buf.push(KIND_TEXT);
                    buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
                    buf.extend_from_slice(name_bytes);
                    buf.extend_from_slice(&(s.len() as u64).to_le_bytes());
                    buf.extend_from_slice(s.as_bytes());
                }
                Entry::Uint(v) => {
                    buf.push(KIND_UINT);
                    buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
                    buf.extend_from_slice(name_bytes);
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(b"SHA2");
        buf.extend_from_slice(&digest);
        buf
    }

    pub fn write_to(&self, path: &Path) -> io::Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let bytes = self.encode();
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        f.sync_all()
    }

    pub fn read_from(path: &Path) -> io::Result<Archive> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Archive::decode(&bytes)
    }

    fn decode(bytes: &[u8]) -> io::Result<Archive> {
        if bytes.len() < MAGIC.len() + 8 + 36 {
            return Err(corrupt("archive truncated"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 36);
        if &trailer[..4] != b"SHA2" {
            return Err(corrupt("archive trailer missing"));
        }
        let digest = Sha256::digest(body);
        if digest.as_slice() != &trailer[4..] {
            return Err(corrupt("archive checksum mismatch"));
        }
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> io::Result<&[u8]> {
            if *pos + n > body.len() {
                return Err(corrupt("archive truncated"));
            }
            let s = &body[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 8)? != MAGIC {
            return Err(corrupt("bad archive magic"));
        }
        let count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let kind = take(&mut pos, 1)?[0];
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(&mut pos, name_len)?)
                .map_err(|_| corrupt("entry name is not utf-8"))?
                .to_string();
            let entry = match kind {
                KIND_ARRAY => {
                    let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
                    let mut shape = Vec::with_capacity(ndim);
                    for _ in 0..ndim {
                        shape.push(
                            u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize
                        );
                    }
                    let n: usize = shape.iter().product();
                    let raw = take(&mut pos, n * 8)?;
                    let data: Vec<f64> = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Entry::Array(
                        ArrayD::from_shape_vec(IxDyn(&shape), data)
                            .map_err(|e| corrupt(format!("bad array shape: {e}")))?,
                    )
                }
                KIND_TEXT => {
                    let len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
                    let s = std::str::from_utf8(take(&mut pos, len)?)
                        .map_err(|_| corrupt("text entry is not utf-8"))?;
                    Entry::Text(s.to_string())
                }
                KIND_UINT => {
                    Entry::Uint(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()))
                }
                other => return Err(corrupt(format!("unknown entry kind {other}"))),
            };
            entries.insert(name, entry);
        }
        if pos != body.len() {
            return Err(corrupt("trailing bytes after archive entries"));
        }
        Ok(Archive { entries })
    }
}
