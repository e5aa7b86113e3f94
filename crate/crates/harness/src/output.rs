//! Trajectory files, JSON documents and the content digests recorded in the
//! run manifest.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use filippov_core::{FlowState, Region, Trajectory};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::TrajectoryFormat;
use crate::error::HarnessError;

/// One written file, relative to the output directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// An output directory that keeps an inventory of what was written to it.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    files: Vec<FileEntry>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self, HarnessError> {
        fs::create_dir_all(root).map_err(|e| HarnessError::io(root, e))?;
        Ok(OutputDir {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn files(&self) -> &[FileEntry] {
        &self.files
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<FileEntry, HarnessError> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        }
        let mut f = File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
        f.write_all(bytes).map_err(|e| HarnessError::io(&path, e))?;
        let entry = FileEntry {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        };
        self.files.push(entry.clone());
        Ok(entry)
    }

    pub fn write_json<T: Serialize>(
        &mut self,
        rel: &str,
        value: &T,
    ) -> Result<FileEntry, HarnessError> {
        let mut bytes = serde_json::to_vec_pretty(value).expect("output types serialize");
        bytes.push(b'\n');
        self.write(rel, &bytes)
    }

    /// Writes `<stem>.csv` (or `.json`) with the samples and
    /// `<stem>.events.json` with the event log. Returns both entries.
    pub fn write_trajectory(
        &mut self,
        stem: &str,
        names: &[String],
        traj: &Trajectory,
        format: TrajectoryFormat,
    ) -> Result<(FileEntry, FileEntry), HarnessError> {
        let samples = match format {
            TrajectoryFormat::Csv => self.write(
                &format!("{stem}.csv"),
                &trajectory_csv(names, &traj.samples),
            )?,
            TrajectoryFormat::Json => self.write_json(&format!("{stem}.json"), &traj.samples)?,
        };
        let events = self.write_json(&format!("{stem}.events.json"), &traj.events)?;
        Ok((samples, events))
    }
}

/// CSV with columns `t`, the state components and `region`; numbers are
/// printed with 17 significant digits so they read back exactly.
pub fn trajectory_csv(names: &[String], samples: &[FlowState]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["t".to_string()];
    header.extend(names.iter().cloned());
    header.push("region".into());
    w.write_record(&header).expect("in-memory write");
    for s in samples {
        let mut row = Vec::with_capacity(s.x.len() + 2);
        row.push(format!("{:.16e}", s.t));
        row.extend(s.x.iter().map(|v| format!("{v:.16e}")));
        row.push(s.region.tag().to_string());
        w.write_record(&row).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// Reads a trajectory CSV written by [`trajectory_csv`]; returns the
/// component names and the samples.
pub fn read_trajectory_csv(path: &Path) -> Result<(Vec<String>, Vec<FlowState>), HarnessError> {
    let bad = |msg: String| HarnessError::Config(format!("{}: {msg}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| bad(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.len() < 3 || header[0] != "t" || header[header.len() - 1] != "region" {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let names = header[1..header.len() - 1].to_vec();
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let num = |j: usize| -> Result<f64, HarnessError> {
            rec[j]
                .parse()
                .map_err(|_| bad(format!("row {}: '{}' is not a number", i + 1, &rec[j])))
        };
        let t = num(0)?;
        let x = (1..=names.len()).map(num).collect::<Result<Vec<_>, _>>()?;
        let tag = &rec[names.len() + 1];
        let region = Region::from_tag(tag)
            .ok_or_else(|| bad(format!("row {}: unknown region '{tag}'", i + 1)))?;
        out.push(FlowState::new(t, x, region));
    }
    Ok((names, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digests_are_lowercase_hex() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
