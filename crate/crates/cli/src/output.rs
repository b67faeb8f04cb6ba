use std::path::{Path, PathBuf};

use npb_hte::data::write_csv;
use serde::Serialize;

use crate::config::SCHEMA_VERSION;
use crate::error::{CliError, CliResult};

/// A file produced by a command, held in memory until the whole report is ready.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputFile {
    pub name: String,
    pub contents: Vec<u8>,
}

impl OutputFile {
    pub fn csv(name: &str, header: &[&str], columns: &[&[f64]]) -> CliResult<Self> {
        let header: Vec<String> = header.iter().map(|h| h.to_string()).collect();
        let mut contents = Vec::new();
        write_csv(&mut contents, &header, columns)?;
        Ok(OutputFile {
            name: name.into(),
            contents,
        })
    }

    /// Writes a row-major B x p matrix of draws with the given column names.
    pub fn draws_csv(name: &str, header: &[String], rows: &[Vec<f64>]) -> CliResult<Self> {
        let columns: Vec<Vec<f64>> = (0..header.len())
            .map(|j| rows.iter().map(|r| r[j]).collect())
            .collect();
        let refs: Vec<&[f64]> = columns.iter().map(Vec::as_slice).collect();
        let mut contents = Vec::new();
        write_csv(&mut contents, header, &refs)?;
        Ok(OutputFile {
            name: name.into(),
            contents,
        })
    }

    /// Pretty JSON with the schema version and command name prepended.
    pub fn report<T: Serialize>(name: &str, command: &str, body: &T) -> CliResult<Self> {
        #[derive(Serialize)]
        struct Envelope<'a, T> {
            schema_version: u32,
            command: &'a str,
            #[serde(flatten)]
            body: &'a T,
        }
        let env = Envelope {
            schema_version: SCHEMA_VERSION,
            command,
            body,
        };
        let mut contents = serde_json::to_vec_pretty(&env).map_err(npb_hte::Error::from)?;
        contents.push(b'\n');
        Ok(OutputFile {
            name: name.into(),
            contents,
        })
    }

    pub fn raw(name: &str, text: String) -> Self {
        OutputFile {
            name: name.into(),
            contents: text.into_bytes(),
        }
    }
}

/// Writes every file into `dir`. On any failure the files already written are removed.
pub fn commit(dir: &Path, files: &[OutputFile]) -> CliResult<Vec<PathBuf>> {
    let fail = |path: &Path, source| CliError::Write {
        path: path.to_path_buf(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(|e| fail(dir, e))?;
    let mut written = Vec::with_capacity(files.len());
    for f in files {
        let path = dir.join(&f.name);
        if let Err(e) = std::fs::write(&path, &f.contents) {
            for p in &written {
                let _ = std::fs::remove_file(p);
            }
            let _ = std::fs::remove_file(&path);
            return Err(fail(&path, e));
        }
        written.push(path);
    }
    Ok(written)
}
