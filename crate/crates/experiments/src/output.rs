//! CSV tables with a `#` metadata header, and key=value summaries.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

/// SHA-256 of the canonical JSON form of `config`.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_string(config).expect("configs serialize");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    /// Renders the table with a header naming the experiment, the config
    /// hash, the seeds and the config itself.
    pub fn render<T: Serialize>(&self, experiment: &str, config: &T, seeds: &[u64]) -> String {
        let seeds: Vec<String> = seeds.iter().map(u64::to_string).collect();
        let mut out = String::new();
        let _ = writeln!(out, "# experiment={experiment}");
        let _ = writeln!(out, "# table={}", self.name);
        let _ = writeln!(out, "# config_hash={}", config_hash(config));
        let _ = writeln!(out, "# seeds={}", seeds.join(","));
        let _ = writeln!(out, "# config={}", serde_json::to_string(config).expect("configs serialize"));
        let _ = writeln!(out, "{}", self.columns.join(","));
        for row in &self.rows {
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }
}

/// Shortest round-tripping representation of a float.
pub fn num(x: f64) -> String {
    format!("{x}")
}

/// Ordered key=value lines; assertion keys start with `assert.`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Summary {
    pub entries: Vec<(String, String)>,
}

impl Summary {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string().replace('\n', " ");
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn assert(&mut self, name: &str, ok: bool) {
        self.set(&format!("assert.{name}"), if ok { "PASS" } else { "FAIL" });
    }

    pub fn assertions(&self) -> impl Iterator<Item = (&str, bool)> {
        self.entries
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("assert.").map(|n| (n, v == "PASS")))
    }

    pub fn all_passed(&self) -> bool {
        self.assertions().all(|(_, ok)| ok)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k}={v}");
        }
        let _ = writeln!(out, "pass={}", self.all_passed());
        out
    }
}

/// Output of one experiment run.
#[derive(Debug, Clone)]
pub struct Report {
    pub experiment: String,
    pub tables: Vec<String>,
    pub table_names: Vec<String>,
    pub summary: Summary,
}

impl Report {
    pub fn new(experiment: &str) -> Self {
        Self {
            experiment: experiment.to_string(),
            tables: Vec::new(),
            table_names: Vec::new(),
            summary: Summary::default(),
        }
    }

    pub fn add_table<T: Serialize>(&mut self, table: &Table, config: &T, seeds: &[u64]) {
        self.table_names.push(table.name.clone());
        self.tables.push(table.render(&self.experiment, config, seeds));
    }

    /// Writes `<name>.csv` per table and `<experiment>.summary` into `dir`.
    pub fn write(&self, dir: &Path) -> std::io::Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for (name, body) in self.table_names.iter().zip(&self.tables) {
            let p = dir.join(format!("{name}.csv"));
            std::fs::write(&p, body)?;
            written.push(p);
        }
        let p = dir.join(format!("{}.summary", self.experiment));
        std::fs::write(&p, self.summary.render())?;
        written.push(p);
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_rows() {
        let mut t = Table::new("demo", &["a", "b"]);
        t.push(vec![num(1.0), num(0.25)]);
        let s = t.render("fig", &serde_json::json!({"x": 1}), &[3, 4]);
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "# experiment=fig");
        assert!(lines[2].starts_with("# config_hash=") && lines[2].len() == "# config_hash=".len() + 64);
        assert_eq!(lines[3], "# seeds=3,4");
        assert_eq!(lines[5], "a,b");
        assert_eq!(lines[6], "1,0.25");
    }

    #[test]
    fn hash_tracks_config() {
        let a = config_hash(&serde_json::json!({"lambda": 0.1}));
        assert_eq!(a, config_hash(&serde_json::json!({"lambda": 0.1})));
        assert_ne!(a, config_hash(&serde_json::json!({"lambda": 0.2})));
    }

    #[test]
    fn summary_pass_flag() {
        let mut s = Summary::default();
        s.set("k", 1);
        s.assert("one", true);
        assert!(s.render().ends_with("pass=true\n"));
        s.assert("two", false);
        assert!(!s.all_passed());
        assert!(s.render().contains("assert.two=FAIL\n"));
    }
}
