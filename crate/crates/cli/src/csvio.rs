//! CSV artifacts. Every file starts with `# config_hash=<h> seed=<s>`,
//! then a column header; floats carry 17 significant digits.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn comment(&self) -> String {
        format!("# config_hash={} seed={}", self.config_hash, self.seed)
    }

    /// Hash of an ad-hoc parameter string, for commands without a config file.
    pub fn of_params(params: &str, seed: u64) -> Self {
        use sha2::{Digest, Sha256};
        let d = Sha256::digest(params.as_bytes());
        Self {
            config_hash: d[..8].iter().map(|b| format!("{b:02x}")).collect(),
            seed,
        }
    }
}

/// Scientific notation with 17 significant digits; round-trips exactly.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else {
        format!("{x:.16e}")
    }
}

/// Writes `path` via a temporary sibling and a rename, so readers never see
/// a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

/// In-memory table rendered once, then written atomically.
pub struct Table {
    text: String,
    columns: usize,
}

impl Table {
    pub fn new(prov: &Provenance, columns: &[&str]) -> Self {
        let mut text = prov.comment();
        text.push('\n');
        text.push_str(&columns.join(","));
        text.push('\n');
        Self {
            text,
            columns: columns.len(),
        }
    }

    pub fn row<S: AsRef<str>>(&mut self, cells: &[S]) {
        assert_eq!(cells.len(), self.columns, "row width");
        let parts: Vec<&str> = cells.iter().map(|c| c.as_ref()).collect();
        self.text.push_str(&parts.join(","));
        self.text.push('\n');
    }

    /// Rows of floats, `d` values per point.
    pub fn points(&mut self, xs: &[f64], d: usize) {
        for p in xs.chunks_exact(d) {
            let cells: Vec<String> = p.iter().map(|&v| fmt_f64(v)).collect();
            self.row(&cells);
        }
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.text.as_bytes())
    }
}

pub fn point_columns(d: usize) -> Vec<String> {
    (0..d).map(|i| format!("x{i}")).collect()
}

/// Reads a numeric CSV (comment rows start with `#`, one header row).
/// Returns the header and the row-major values.
pub fn read_numeric(path: &Path) -> Result<(Vec<String>, Vec<f64>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .has_headers(true)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let mut values = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.with_context(|| format!("{}: row {}", path.display(), i + 1))?;
        if rec.len() != header.len() {
            bail!("{}: row {} has {} fields, header has {}", path.display(), i + 1, rec.len(), header.len());
        }
        for f in rec.iter() {
            let v: f64 = f
                .trim()
                .parse()
                .with_context(|| format!("{}: row {}: bad number {f:?}", path.display(), i + 1))?;
            values.push(v);
        }
    }
    Ok((header, values))
}

/// Reads the `# config_hash=.. seed=..` row, if present.
pub fn read_provenance(path: &Path) -> Result<Option<Provenance>> {
    let text = fs::read_to_string(path)?;
    let Some(first) = text.lines().next() else { return Ok(None) };
    let Some(rest) = first.strip_prefix("# ") else { return Ok(None) };
    let mut hash = None;
    let mut seed = None;
    for kv in rest.split_whitespace() {
        if let Some(h) = kv.strip_prefix("config_hash=") {
            hash = Some(h.to_string());
        } else if let Some(s) = kv.strip_prefix("seed=") {
            seed = s.parse().ok();
        }
    }
    Ok(match (hash, seed) {
        (Some(config_hash), Some(seed)) => Some(Provenance { config_hash, seed }),
        _ => None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_through_text() {
        for x in [0.1, -1.0 / 3.0, 1e-300, 6.02214076e23, 0.0] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(fmt_f64(f64::NAN), "NaN");
    }

    #[test]
    fn table_write_and_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/pts.csv");
        let prov = Provenance {
            config_hash: "abc".into(),
            seed: 7,
        };
        let mut t = Table::new(&prov, &["x0", "x1"]);
        t.points(&[1.0, 2.0, 0.5, -0.25], 2);
        t.write(&path).unwrap();
        let (h, v) = read_numeric(&path).unwrap();
        assert_eq!(h, vec!["x0", "x1"]);
        assert_eq!(v, vec![1.0, 2.0, 0.5, -0.25]);
        assert_eq!(read_provenance(&path).unwrap(), Some(prov));
        assert!(!dir.path().join("sub/pts.csv.tmp").exists());
    }

    #[test]
    fn ragged_rows_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "x0,x1\n1,2\n3\n").unwrap();
        assert!(read_numeric(&path).is_err());
    }
}
