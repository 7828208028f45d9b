//! Result files. CSV bodies are RFC-4180 (via the `csv` crate); every file opens
//! with a header block carrying the config hash: `#`-prefixed lines for CSV and
//! data files, a `config_hash` key for JSON.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

pub struct OutputDir {
    dir: PathBuf,
    hash: String,
}

impl OutputDir {
    pub fn create(dir: &Path, hash: &str) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            hash: hash.to_string(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn header(&self) -> String {
        format!("# ergomfg {}\n# config_sha256 {}\n", env!("CARGO_PKG_VERSION"), self.hash)
    }

    /// One CSV row per record, column names from the record's fields.
    pub fn write_csv<T: Serialize>(&self, name: &str, rows: &[T]) -> anyhow::Result<PathBuf> {
        let mut body = csv::Writer::from_writer(Vec::new());
        for r in rows {
            body.serialize(r)?;
        }
        let bytes = body.into_inner()?;
        let path = self.path(name);
        let mut f = fs::File::create(&path)?;
        f.write_all(self.header().as_bytes())?;
        f.write_all(&bytes)?;
        Ok(path)
    }

    /// `{"config_hash": ..., "config": ..., "result": ...}`, pretty-printed.
    pub fn write_json<C: Serialize, T: Serialize>(&self, name: &str, config: &C, result: &T) -> anyhow::Result<PathBuf> {
        #[derive(Serialize)]
        struct Document<'a, C, T> {
            config_hash: &'a str,
            config: &'a C,
            result: &'a T,
        }
        let doc = Document {
            config_hash: &self.hash,
            config,
            result,
        };
        let path = self.path(name);
        let mut text = serde_json::to_string_pretty(&doc)?;
        text.push('\n');
        fs::write(&path, text)?;
        Ok(path)
    }

    /// Whitespace-separated two-column data for plotting.
    pub fn write_columns(&self, name: &str, columns: (&str, &str), points: &[(f64, f64)]) -> anyhow::Result<PathBuf> {
        let mut text = self.header();
        text.push_str(&format!("# {} {}\n", columns.0, columns.1));
        for (x, y) in points {
            text.push_str(&format!("{x} {y}\n"));
        }
        let path = self.path(name);
        fs::write(&path, text)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Row {
        name: &'static str,
        value: f64,
    }

    #[test]
    fn csv_has_header_block_and_quoted_fields() {
        let dir = tempfile::tempdir().unwrap();
        let out = OutputDir::create(dir.path(), "abc").unwrap();
        let path = out
            .write_csv("t.csv", &[Row { name: "a,b", value: 0.1 }, Row { name: "say \"hi\"", value: -2.0 }])
            .unwrap();
        let text = fs::read_to_string(path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[1], "# config_sha256 abc");
        assert_eq!(lines[2], "name,value");
        assert_eq!(lines[3], "\"a,b\",0.1");
        assert_eq!(lines[4], "\"say \"\"hi\"\"\",-2.0");
    }

    #[test]
    fn json_wraps_the_result() {
        let dir = tempfile::tempdir().unwrap();
        let out = OutputDir::create(&dir.path().join("nested"), "abc").unwrap();
        let path = out.write_json("r.json", &1, &Row { name: "x", value: 1.5 }).unwrap();
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
        assert_eq!(v["config_hash"], "abc");
        assert_eq!(v["result"]["value"], 1.5);
    }
}
