//! Run directory layout:
//!
//! ```text
//! <root>/<run>/
//!   config.toml      resolved configuration
//!   manifest.json    command line, input and output digests
//!   metrics.jsonl    one line per training step
//!   checkpoints/     step-NNNNNN.ckpt, final.ckpt
//!   reports/         analysis tables and summaries
//! ```

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const OUTPUT_ROOT_ENV: &str = "HRM_OUTPUT_ROOT";

pub struct RunDir {
    pub path: PathBuf,
    inputs: Vec<PathBuf>,
}

#[derive(Serialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest {
    tool: &'static str,
    version: &'static str,
    argv: Vec<String>,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex(&hasher.finalize()))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// `out_dir` if given, then the environment override, then `runs`.
pub fn output_root(out_dir: Option<&Path>) -> PathBuf {
    match out_dir {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from),
    }
}

pub fn is_taken(path: &Path) -> bool {
    fs::read_dir(path).is_ok_and(|mut d| d.next().is_some())
}

impl RunDir {
    /// Creates `<root>/<name>`, refusing an existing non-empty directory.
    pub fn create(root: &Path, name: &str) -> Result<Self> {
        let path = root.join(name);
        if is_taken(&path) {
            bail!("run directory {} already exists and is not empty", path.display());
        }
        fs::create_dir_all(path.join("reports"))
            .with_context(|| format!("creating {}", path.display()))?;
        log::info!("run directory {}", path.display());
        Ok(Self {
            path,
            inputs: Vec::new(),
        })
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn file(&self, rel: &str) -> PathBuf {
        self.path.join(rel)
    }

    pub fn write(&self, rel: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.file(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    /// Writes `manifest.json` covering every input and every file in the run
    /// directory.
    pub fn finish(self) -> Result<PathBuf> {
        let mut inputs = Vec::new();
        for p in &self.inputs {
            inputs.push(FileDigest {
                path: p.display().to_string(),
                sha256: sha256_file(p)?,
            });
        }
        let mut files = Vec::new();
        collect(&self.path, &mut files)?;
        files.sort();
        let mut outputs = Vec::new();
        for p in files {
            let rel = p.strip_prefix(&self.path).expect("inside run dir");
            if rel == Path::new("manifest.json") {
                continue;
            }
            outputs.push(FileDigest {
                path: rel.display().to_string(),
                sha256: sha256_file(&p)?,
            });
        }
        let manifest = Manifest {
            tool: "hrm",
            version: env!("CARGO_PKG_VERSION"),
            argv: std::env::args().collect(),
            inputs,
            outputs,
        };
        self.write("manifest.json", serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(self.path)
    }
}

fn collect(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Default run name: the command plus a digest of its arguments and
/// resolved configuration.
pub fn default_name(command: &str, fingerprint: &str) -> String {
    format!("{command}-{}", &sha256_bytes(fingerprint.as_bytes())[..10])
}
