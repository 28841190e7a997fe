//! Output manifest: every file in the output directory listed with its
//! SHA-256 digest and size; CSV headers are appended for column reference.

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};
use vns_core::Result;

pub fn write_manifest(out_dir: &Path) -> Result<()> {
    let mut names: Vec<String> = std::fs::read_dir(out_dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n != "manifest.txt")
        .collect();
    names.sort();
    let mut out = std::io::BufWriter::new(std::fs::File::create(out_dir.join("manifest.txt"))?);
    for name in names {
        let path = out_dir.join(&name);
        let data = std::fs::read(&path)?;
        let digest = Sha256::digest(&data);
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        write!(out, "{hex}  {:>10}  {name}", data.len())?;
        if name.ends_with(".csv") {
            if let Some(header) = data
                .split(|&b| b == b'\n')
                .next()
                .and_then(|l| std::str::from_utf8(l).ok())
            {
                write!(out, "  [columns: {}]", header.trim())?;
            }
        }
        writeln!(out)?;
    }
    Ok(())
}
