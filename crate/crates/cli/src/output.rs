//! In-memory artifacts, written to disk only once a run has succeeded.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Default)]
pub struct Artifacts {
    files: BTreeMap<String, Vec<u8>>,
}

impl Artifacts {
    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) {
        let mut bytes = serde_json::to_vec_pretty(value).expect("reports serialize");
        bytes.push(b'\n');
        self.files.insert(name.to_string(), bytes);
    }

    pub fn csv(&mut self, name: &str, header: &[String], rows: &[Vec<String>]) {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).expect("in-memory write");
        for row in rows {
            w.write_record(row).expect("in-memory write");
        }
        self.files.insert(name.to_string(), w.into_inner().expect("in-memory flush"));
    }

    pub fn hashes(&self) -> BTreeMap<String, String> {
        self.files.iter().map(|(k, v)| (k.clone(), sha256_hex(v))).collect()
    }

    /// Combined digest over file names and contents.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.files {
            h.update(k.as_bytes());
            h.update([0u8]);
            h.update(v);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn write_all(&self, dir: &Path) -> io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, bytes) in &self.files {
            std::fs::write(dir.join(name), bytes)?;
        }
        Ok(())
    }
}

/// Reproducibility record written next to every result set.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: &'static str,
    pub config_sha256: String,
    pub seed: u64,
    pub workers: usize,
    pub digest: String,
    pub files: BTreeMap<String, String>,
}

pub fn num(v: f64) -> String {
    format!("{v:e}")
}

pub fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn digest_tracks_names_and_contents() {
        let mut a = Artifacts::default();
        a.csv("t.csv", &["x".into()], &[vec![num(1.0)]]);
        let d0 = a.digest();
        a.json("r.json", &[1, 2]);
        assert_ne!(a.digest(), d0);
        assert_eq!(a.hashes().len(), 2);
        assert_eq!(String::from_utf8(a.files["t.csv"].clone()).unwrap(), "x\n1e0\n");
    }
}
