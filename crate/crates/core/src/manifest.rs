//! Tile manifests and the small CSV conventions shared by every output:
//! a header row, plain comma-separated fields, and a trailing provenance
//! comment line starting with `#`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 8] = [
    "tile_id",
    "slide_id",
    "patient_index",
    "batch",
    "outcome",
    "x",
    "y",
    "path",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Batch {
    A,
    B,
}

impl Batch {
    pub fn other(self) -> Batch {
        match self {
            Batch::A => Batch::B,
            Batch::B => Batch::A,
        }
    }
}

impl fmt::Display for Batch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Batch::A => "A",
            Batch::B => "B",
        })
    }
}

impl FromStr for Batch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Batch::A),
            "B" | "b" => Ok(Batch::B),
            other => Err(Error::InvalidArgument(format!("batch must be A or B, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileRecord {
    pub tile_id: String,
    pub slide_id: String,
    pub patient_index: usize,
    pub batch: Batch,
    /// 1 = Met+, 0 = Met-.
    pub outcome: u8,
    pub x: u64,
    pub y: u64,
    /// Absolute, or relative to the manifest's directory.
    pub path: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TileManifest {
    pub tiles: Vec<TileRecord>,
    /// Directory that relative tile paths resolve against.
    pub root: PathBuf,
}

impl TileManifest {
    pub fn new(tiles: Vec<TileRecord>, root: impl Into<PathBuf>) -> Self {
        TileManifest {
            tiles,
            root: root.into(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn resolve(&self, rec: &TileRecord) -> PathBuf {
        if rec.path.is_absolute() {
            rec.path.clone()
        } else {
            self.root.join(&rec.path)
        }
    }

    pub fn filter(&self, keep: impl Fn(&TileRecord) -> bool) -> TileManifest {
        TileManifest {
            tiles: self.tiles.iter().filter(|r| keep(r)).cloned().collect(),
            root: self.root.clone(),
        }
    }

    /// Slide ids in first-appearance order.
    pub fn slide_ids(&self) -> Vec<String> {
        let mut seen = std::collections::HashSet::new();
        self.tiles
            .iter()
            .filter(|r| seen.insert(r.slide_id.clone()))
            .map(|r| r.slide_id.clone())
            .collect()
    }

    /// Tiles grouped by slide, slides in first-appearance order.
    pub fn by_slide(&self) -> Vec<(String, Vec<&TileRecord>)> {
        let mut groups: Vec<(String, Vec<&TileRecord>)> = Vec::new();
        let mut index = std::collections::HashMap::new();
        for rec in &self.tiles {
            let i = *index.entry(rec.slide_id.clone()).or_insert_with(|| {
                groups.push((rec.slide_id.clone(), Vec::new()));
                groups.len() - 1
            });
            groups[i].1.push(rec);
        }
        groups
    }

    pub fn read(path: &Path) -> Result<Self> {
        let rows = read_csv(path, &MANIFEST_HEADER)?;
        let mut tiles = Vec::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            let bad = |what: &str| Error::Parse {
                path: path.display().to_string(),
                message: format!("row {}: bad {what}", i + 2),
            };
            let outcome: u8 = row[4].parse().map_err(|_| bad("outcome"))?;
            if outcome > 1 {
                return Err(bad("outcome (must be 0 or 1)"));
            }
            tiles.push(TileRecord {
                tile_id: row[0].clone(),
                slide_id: row[1].clone(),
                patient_index: row[2].parse().map_err(|_| bad("patient_index"))?,
                batch: row[3].parse().map_err(|_| bad("batch"))?,
                outcome,
                x: row[5].parse().map_err(|_| bad("x"))?,
                y: row[6].parse().map_err(|_| bad("y"))?,
                path: PathBuf::from(&row[7]),
            });
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(TileManifest { tiles, root })
    }

    pub fn write(&self, path: &Path, provenance: &str) -> Result<()> {
        let rows = self.tiles.iter().map(|r| {
            vec![
                r.tile_id.clone(),
                r.slide_id.clone(),
                r.patient_index.to_string(),
                r.batch.to_string(),
                r.outcome.to_string(),
                r.x.to_string(),
                r.y.to_string(),
                r.path.display().to_string(),
            ]
        });
        write_csv(path, &MANIFEST_HEADER, rows, provenance)
    }
}

/// Render rows as CSV text with a header and a trailing `# provenance` line.
pub fn csv_text<I>(header: &[&str], rows: I, provenance: &str) -> String
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        debug_assert!(row.iter().all(|f| !f.contains([',', '\n', '"'])));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out.push_str("# ");
    out.push_str(provenance);
    out.push('\n');
    out
}

pub fn write_csv<I>(path: &Path, header: &[&str], rows: I, provenance: &str) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, csv_text(header, rows, provenance)).map_err(|e| Error::io(path, e))
}

/// Read a CSV whose header must be exactly `header`; `#` lines are skipped.
pub fn read_csv(path: &Path, header: &[&str]) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, header).map_err(|message| Error::Parse {
        path: path.display().to_string(),
        message,
    })
}

pub(crate) fn parse_csv(
    text: &str,
    header: &[&str],
) -> std::result::Result<Vec<Vec<String>>, String> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let found: Vec<String> = reader
        .headers()
        .map_err(|e| e.to_string())?
        .iter()
        .map(str::to_string)
        .collect();
    if found != header {
        return Err(format!(
            "expected columns {}, found {}",
            header.join(","),
            found.join(",")
        ));
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok(rows)
}

/// Fixed-precision float formatting used in every CSV output.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.6}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(i: usize) -> TileRecord {
        TileRecord {
            tile_id: format!("t{i}"),
            slide_id: format!("s{}", i / 2),
            patient_index: i / 2 + 1,
            batch: if i.is_multiple_of(2) { Batch::A } else { Batch::B },
            outcome: (i % 2) as u8,
            x: 10 * i as u64,
            y: 3,
            path: PathBuf::from(format!("tiles/t{i}.png")),
        }
    }

    #[test]
    fn manifest_round_trip_and_provenance_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let m = TileManifest::new((0..5).map(rec).collect(), dir.path());
        m.write(&path, "stainbench test").unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("tile_id,slide_id,patient_index,batch,outcome,x,y,path\n"));
        assert_eq!(text.lines().last().unwrap(), "# stainbench test");
        let back = TileManifest::read(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.resolve(&back.tiles[0]), dir.path().join("tiles/t0.png"));
    }

    #[test]
    fn wrong_header_is_rejected() {
        let err = parse_csv("a,b\n1,2\n", &["a", "c"]).unwrap_err();
        assert!(err.contains("expected columns a,c"));
    }

    #[test]
    fn grouping_keeps_first_appearance_order() {
        let m = TileManifest::new((0..6).map(rec).collect(), "");
        let g = m.by_slide();
        assert_eq!(
            g.iter().map(|(s, t)| (s.as_str(), t.len())).collect::<Vec<_>>(),
            vec![("s0", 2), ("s1", 2), ("s2", 2)]
        );
    }
}
