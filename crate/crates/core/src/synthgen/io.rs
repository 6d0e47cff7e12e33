use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{LabCatalog, PatientRecord};

use super::{Cohort, SynthError};

pub const COHORT_FORMAT_VERSION: u32 = 1;
const COHORT_FORMAT: &str = "edcopilot-cohort";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    config_digest: String,
    catalog_hash: String,
    n_patients: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadWarning {
    EmptyFile,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedCohort {
    pub cohort: Cohort,
    pub warnings: Vec<ReadWarning>,
}

/// One header line followed by one JSON patient per line.
pub fn write_cohort(cohort: &Cohort, path: &Path) -> Result<(), SynthError> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = Header {
        format: COHORT_FORMAT.into(),
        version: COHORT_FORMAT_VERSION,
        config_digest: cohort.config_digest.clone(),
        catalog_hash: cohort.catalog_hash.clone(),
        n_patients: cohort.patients.len(),
    };
    serde_json::to_writer(&mut w, &header).map_err(std::io::Error::other)?;
    w.write_all(b"\n")?;
    for p in &cohort.patients {
        serde_json::to_writer(&mut w, p).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads and validates a cohort file against `catalog`. An empty file yields
/// an empty cohort and [`ReadWarning::EmptyFile`].
pub fn read_cohort(path: &Path, catalog: &LabCatalog) -> Result<LoadedCohort, SynthError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let header: Header = loop {
        match lines.next() {
            None => {
                log::warn!("{} is empty", path.display());
                return Ok(LoadedCohort {
                    cohort: Cohort {
                        patients: Vec::new(),
                        config_digest: String::new(),
                        catalog_hash: catalog.hash(),
                    },
                    warnings: vec![ReadWarning::EmptyFile],
                });
            }
            Some((i, line)) => {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|e| SynthError::Parse {
                    line: i + 1,
                    message: format!("header: {e}"),
                })?;
            }
        }
    };
    if header.format != COHORT_FORMAT || header.version != COHORT_FORMAT_VERSION {
        return Err(SynthError::Parse {
            line: 1,
            message: format!("unsupported format {} v{}", header.format, header.version),
        });
    }
    let expected = catalog.hash();
    if header.catalog_hash != expected {
        return Err(SynthError::Parse {
            line: 1,
            message: format!(
                "catalog hash mismatch: file {} vs loaded {}",
                header.catalog_hash, expected
            ),
        });
    }
    let mut patients = Vec::with_capacity(header.n_patients);
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PatientRecord = serde_json::from_str(&line).map_err(|e| SynthError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        p.validate(catalog).map_err(|e| SynthError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        patients.push(p);
    }
    if patients.len() != header.n_patients {
        return Err(SynthError::Parse {
            line: 1,
            message: format!(
                "header announces {} patients, file holds {}",
                header.n_patients,
                patients.len()
            ),
        });
    }
    Ok(LoadedCohort {
        cohort: Cohort {
            patients,
            config_digest: header.config_digest,
            catalog_hash: header.catalog_hash,
        },
        warnings: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::default_catalog;
    use crate::synthgen::{generate, GeneratorConfig};

    fn three() -> (Cohort, LabCatalog) {
        let c = default_catalog();
        let mut cfg = GeneratorConfig::default_for(&c);
        cfg.n_patients = 3;
        (generate(&cfg, &c).unwrap(), c)
    }

    #[test]
    fn round_trip_is_exact() {
        let (coh, c) = three();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        write_cohort(&coh, &path).unwrap();
        let back = read_cohort(&path, &c).unwrap();
        assert!(back.warnings.is_empty());
        assert_eq!(back.cohort, coh);
        let path2 = dir.path().join("d.jsonl");
        write_cohort(&back.cohort, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn duplicate_group_names_the_patient() {
        let (mut coh, c) = three();
        let dup = coh.patients[1].observed[0].clone();
        coh.patients[1].observed.push(dup);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        write_cohort(&coh, &path).unwrap();
        let err = read_cohort(&path, &c).unwrap_err().to_string();
        assert!(err.contains("P000001"), "{err}");
        assert!(err.starts_with("line 3"), "{err}");
    }

    #[test]
    fn unknown_field_is_rejected_with_line_number() {
        let (coh, c) = three();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        write_cohort(&coh, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[2] = lines[2].replacen('{', "{\"extra\":1,", 1);
        std::fs::write(&path, lines.join("\n")).unwrap();
        let err = read_cohort(&path, &c).unwrap_err().to_string();
        assert!(err.starts_with("line 3") && err.contains("extra"), "{err}");
    }

    #[test]
    fn empty_file_warns() {
        let c = default_catalog();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        std::fs::write(&path, "").unwrap();
        let got = read_cohort(&path, &c).unwrap();
        assert!(got.cohort.is_empty());
        assert_eq!(got.warnings, vec![ReadWarning::EmptyFile]);
    }
}
