//! Append-only results ledger, one JSON record per line. Writers hold an
//! exclusive lock on the file for the duration of a single append.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub experiment: String,
    pub stage: String,
    pub config_hash: String,
    /// Relative to the artifact root.
    pub run_dir: String,
    pub wall_clock_s: f64,
    pub metrics: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Ledger {
    path: PathBuf,
}

impl Ledger {
    pub fn new(path: PathBuf) -> Self {
        Self { path }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, entry: &LedgerEntry) -> Result<()> {
        if let Some(dir) = self.path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut line = serde_json::to_vec(entry)?;
        line.push(b'\n');
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        f.lock()?;
        let res = f.write_all(&line).and_then(|_| f.flush());
        f.unlock()?;
        res?;
        Ok(())
    }

    /// Every entry in append order; a missing ledger reads as empty. A
    /// trailing partial line (a writer killed mid-append) is ignored.
    pub fn entries(&self) -> Result<Vec<LedgerEntry>> {
        let f = match File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        f.lock_shared()?;
        let mut out = Vec::new();
        let mut lines = BufReader::new(&f).lines().peekable();
        while let Some(line) = lines.next() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line) {
                Ok(e) => out.push(e),
                Err(_) if lines.peek().is_none() => break,
                Err(e) => return Err(HarnessError::Report(format!("corrupt ledger line: {e}"))),
            }
        }
        f.unlock()?;
        Ok(out)
    }

    pub fn contains(&self, stage: &str, config_hash: &str) -> Result<bool> {
        Ok(self.entries()?.iter().any(|e| e.stage == stage && e.config_hash == config_hash))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn appends_are_read_back_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let l = Ledger::new(dir.path().join("results.jsonl"));
        assert!(l.entries().unwrap().is_empty());
        for i in 0..3 {
            let e = LedgerEntry {
                experiment: "x".into(),
                stage: "eval-pck".into(),
                config_hash: format!("{i}"),
                run_dir: String::new(),
                wall_clock_s: 0.0,
                metrics: serde_json::json!({ "i": i }),
            };
            l.append(&e).unwrap();
        }
        let got = l.entries().unwrap();
        assert_eq!(got.iter().map(|e| e.config_hash.as_str()).collect::<Vec<_>>(), ["0", "1", "2"]);
        assert!(l.contains("eval-pck", "1").unwrap());
        assert!(!l.contains("eval-pck", "7").unwrap());
    }

    #[test]
    fn torn_final_line_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("results.jsonl");
        let good = r#"{"experiment":"x","stage":"s","config_hash":"h","run_dir":"","wall_clock_s":0.0,"metrics":null}"#;
        std::fs::write(&p, format!("{good}\n{{\"experi")).unwrap();
        assert_eq!(Ledger::new(p).entries().unwrap().len(), 1);
    }
}
