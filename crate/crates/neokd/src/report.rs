//! Report emission: CSV tables and JSON summaries, written atomically
//! (temp file + rename) so reruns either fully replace an output or leave
//! the previous one intact.

use std::path::Path;

use crate::error::{Error, Result};

/// Write `bytes` to `path` via a temporary sibling file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    if !dir.as_os_str().is_empty() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::config("out", format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// A CSV table with a fixed header. Comma separators, dot decimals, LF line
/// endings; values are formatted by the caller.
pub struct Csv {
    lines: Vec<String>,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Csv {
            lines: vec![header.join(",")],
        }
    }

    pub fn row(&mut self, fields: &[String]) {
        self.lines.push(fields.join(","));
    }

    pub fn render(&self) -> String {
        let mut out = self.lines.join("\n");
        out.push('\n');
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.render().as_bytes())
    }
}

/// Shortest round-tripping decimal form of an f32 (what `{}` prints), used
/// everywhere a float lands in a CSV cell so reruns are bitwise identical.
pub fn fmt_f32(v: f32) -> String {
    format!("{v}")
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("json serialization");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout_is_lf_with_header() {
        let mut csv = Csv::new(&["exit", "metric", "attack", "value"]);
        csv.row(&[
            "1".to_string(),
            "top1".to_string(),
            "clean".to_string(),
            fmt_f32(0.5),
        ]);
        assert_eq!(csv.render(), "exit,metric,attack,value\n1,top1,clean,0.5\n");
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        write_atomic(&path, b"first").unwrap();
        write_atomic(&path, b"second").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"second");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
