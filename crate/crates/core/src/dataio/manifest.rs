//! Dataset manifests (CSV) and labeled samples.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::features::{read_features, write_features, FeatureSequence};
use crate::error::{Error, Result};
use crate::tasks::{TargetValue, Targets, TaskId, COUNTRIES, CULTURE_EMOTIONS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn token(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// One sample: frame features plus every label the manifest provides.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub id: String,
    pub split: Split,
    pub features: FeatureSequence,
    pub targets: Targets,
}

impl LabeledSample {
    pub fn country(&self) -> Option<usize> {
        match self.targets.get(&TaskId::Country) {
            Some(TargetValue::Class(c)) => Some(*c),
            _ => None,
        }
    }
}

pub fn split_histogram(samples: &[LabeledSample]) -> BTreeMap<Split, usize> {
    let mut hist = BTreeMap::new();
    for s in samples {
        *hist.entry(s.split).or_insert(0) += 1;
    }
    hist
}

pub fn high_columns() -> Vec<String> {
    (0..TaskId::High.default_dim())
        .map(|i| format!("high_{i}"))
        .collect()
}

pub fn culture_columns() -> Vec<String> {
    (0..CULTURE_EMOTIONS * COUNTRIES)
        .map(|i| format!("culture_{i}"))
        .collect()
}

fn required_columns() -> Vec<String> {
    let mut cols: Vec<String> = [
        "id",
        "split",
        "feature_file",
        "country",
        "type",
        "valence",
        "arousal",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    cols.extend(high_columns());
    cols
}

/// Reads a manifest and loads every referenced feature file. Relative feature
/// paths resolve against the manifest's directory. Row numbers in errors are
/// 1-based data rows (the header is row 0).
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<LabeledSample>> {
    let path = path.as_ref();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows = parse_manifest(&text, path)?;
    rows.into_iter()
        .enumerate()
        .map(|(i, row)| {
            let file = if row.feature_file.is_absolute() {
                row.feature_file.clone()
            } else {
                base.join(&row.feature_file)
            };
            let features = read_features(&file).map_err(|e| Error::Manifest {
                path: path.to_path_buf(),
                row: i + 1,
                message: e.to_string(),
            })?;
            Ok(LabeledSample {
                id: row.id,
                split: row.split,
                features,
                targets: row.targets,
            })
        })
        .collect()
}

/// A parsed manifest row before its features are loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    pub split: Split,
    pub feature_file: PathBuf,
    pub targets: Targets,
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            row: 0,
            message: e.to_string(),
        })?
        .clone();
    let index: BTreeMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    for col in required_columns() {
        if !index.contains_key(col.as_str()) {
            return Err(Error::MissingColumn {
                path: path.to_path_buf(),
                column: col,
            });
        }
    }
    let culture_cols = culture_columns();
    let culture_present = culture_cols
        .iter()
        .filter(|c| index.contains_key(c.as_str()))
        .count();
    if culture_present != 0 && culture_present != culture_cols.len() {
        let missing = culture_cols
            .iter()
            .find(|c| !index.contains_key(c.as_str()))
            .unwrap();
        return Err(Error::MissingColumn {
            path: path.to_path_buf(),
            column: missing.clone(),
        });
    }
    let has_culture = culture_present != 0;

    let mut rows = Vec::new();
    let mut ids = HashSet::new();
    for (i, record) in reader.records().enumerate() {
        let row_no = i + 1;
        let err = |message: String| Error::Manifest {
            path: path.to_path_buf(),
            row: row_no,
            message,
        };
        let record = record.map_err(|e| err(e.to_string()))?;
        let field = |name: &str| record.get(index[name]).unwrap_or("");
        let number = |name: &str| -> Result<f64> {
            let raw = field(name);
            raw.parse::<f64>()
                .map_err(|_| err(format!("malformed number `{raw}` in column `{name}`")))
        };
        let class = |name: &str, classes: usize| -> Result<usize> {
            let raw = field(name);
            let c: usize = raw
                .parse()
                .map_err(|_| err(format!("malformed class index `{raw}` in column `{name}`")))?;
            if c >= classes {
                return Err(err(format!(
                    "class index {c} in column `{name}` out of range 0..{classes}"
                )));
            }
            Ok(c)
        };

        let id = field("id").to_string();
        if id.is_empty() {
            return Err(err("empty id".into()));
        }
        if !ids.insert(id.clone()) {
            return Err(err(format!("duplicate id `{id}`")));
        }
        let split: Split = field("split")
            .parse()
            .map_err(|_| err(format!("unknown split token `{}`", field("split"))))?;
        let feature_file = PathBuf::from(field("feature_file"));

        let mut targets = Targets::new();
        let country = class("country", TaskId::Country.default_dim())?;
        targets.insert(TaskId::Country, TargetValue::Class(country));
        targets.insert(
            TaskId::Type,
            TargetValue::Class(class("type", TaskId::Type.default_dim())?),
        );
        targets.insert(
            TaskId::Two,
            TargetValue::Regression(vec![number("valence")?, number("arousal")?]),
        );
        let high = high_columns()
            .iter()
            .map(|c| number(c))
            .collect::<Result<Vec<_>>>()?;
        targets.insert(TaskId::High, TargetValue::Regression(high));
        if has_culture {
            let native = country * CULTURE_EMOTIONS..(country + 1) * CULTURE_EMOTIONS;
            let mut culture = Vec::with_capacity(culture_cols.len());
            for (k, c) in culture_cols.iter().enumerate() {
                // only the native country's block must be filled in
                if field(c).is_empty() && !native.contains(&k) {
                    culture.push(0.0);
                } else {
                    culture.push(number(c)?);
                }
            }
            targets.insert(TaskId::Culture, TargetValue::Regression(culture));
        }
        rows.push(ManifestRow {
            id,
            split,
            feature_file,
            targets,
        });
    }
    Ok(rows)
}

fn fmt_value(v: f64) -> String {
    // shortest representation that parses back to the same f64
    format!("{v:?}")
}

/// Writes a manifest for the given rows. Culture columns are emitted when any
/// row carries a Culture target.
pub fn write_manifest(path: impl AsRef<Path>, rows: &[ManifestRow]) -> Result<()> {
    let path = path.as_ref();
    let with_culture = rows
        .iter()
        .any(|r| r.targets.contains_key(&TaskId::Culture));
    let mut header = required_columns();
    if with_culture {
        header.extend(culture_columns());
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    w.write_record(&header).map_err(csv_err)?;
    for row in rows {
        let class = |t: TaskId| match row.targets.get(&t) {
            Some(TargetValue::Class(c)) => c.to_string(),
            _ => String::new(),
        };
        let values = |t: TaskId| match row.targets.get(&t) {
            Some(TargetValue::Regression(v)) => v.iter().map(|&x| fmt_value(x)).collect(),
            _ => vec![String::new(); t.default_dim()],
        };
        let mut rec = vec![
            row.id.clone(),
            row.split.token().to_string(),
            row.feature_file.display().to_string(),
            class(TaskId::Country),
            class(TaskId::Type),
        ];
        rec.extend(values(TaskId::Two));
        rec.extend(values(TaskId::High));
        if with_culture {
            rec.extend(values(TaskId::Culture));
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes each sample's frames to `dir/features/<id>.vbf` and a
/// `dir/manifest.csv` referencing them. Returns the manifest path.
pub fn export_samples(samples: &[LabeledSample], dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let features = dir.join("features");
    fs::create_dir_all(&features).map_err(|e| Error::io(&features, e))?;
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let rel = PathBuf::from("features").join(format!("{}.vbf", s.id));
        write_features(&s.features, dir.join(&rel))?;
        rows.push(ManifestRow {
            id: s.id.clone(),
            split: s.split,
            feature_file: rel,
            targets: s.targets.clone(),
        });
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &rows)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(with_country: bool) -> String {
        let mut cols = vec!["id", "split", "feature_file"];
        if with_country {
            cols.push("country");
        }
        cols.extend(["type", "valence", "arousal"]);
        let mut s = cols.join(",");
        for c in high_columns() {
            s.push(',');
            s.push_str(&c);
        }
        s
    }

    fn row(id: &str, split: &str) -> String {
        let mut s = format!("{id},{split},{id}.vbf,2,5,0.3,0.7");
        for _ in 0..10 {
            s.push_str(",0.5");
        }
        s
    }

    #[test]
    fn parses_rows_and_splits() {
        let text = format!(
            "{}\n{}\n{}\n{}\n",
            header(true),
            row("a", "train"),
            row("b", "train"),
            row("c", "val")
        );
        let rows = parse_manifest(&text, Path::new("m.csv")).unwrap();
        assert_eq!(rows.len(), 3);
        let mut hist = BTreeMap::new();
        for r in &rows {
            *hist.entry(r.split).or_insert(0) += 1;
        }
        assert_eq!(hist, BTreeMap::from([(Split::Train, 2), (Split::Val, 1)]));
        assert_eq!(rows[0].targets[&TaskId::Country], TargetValue::Class(2));
        assert_eq!(
            rows[0].targets[&TaskId::Two],
            TargetValue::Regression(vec![0.3, 0.7])
        );
        assert!(!rows[0].targets.contains_key(&TaskId::Culture));
    }

    #[test]
    fn missing_country_column() {
        let text = format!("{}\n", header(false));
        let err = parse_manifest(&text, Path::new("m.csv")).unwrap_err();
        assert!(matches!(err, Error::MissingColumn { ref column, .. } if column == "country"));
    }

    #[test]
    fn row_errors_carry_row_numbers() {
        let text = format!(
            "{}\n{}\n{}\n",
            header(true),
            row("a", "train"),
            row("a", "val")
        );
        let err = parse_manifest(&text, Path::new("m.csv")).unwrap_err();
        assert!(matches!(err, Error::Manifest { row: 2, .. }), "{err}");
        assert!(err.to_string().contains("duplicate id"));

        let text = format!("{}\n{}\n", header(true), row("a", "dev"));
        let err = parse_manifest(&text, Path::new("m.csv")).unwrap_err();
        assert!(err.to_string().contains("unknown split token `dev`"));

        let text = format!(
            "{}\n{}\n",
            header(true),
            row("a", "val").replace("0.3", "zero")
        );
        let err = parse_manifest(&text, Path::new("m.csv")).unwrap_err();
        assert!(matches!(err, Error::Manifest { row: 1, .. }));
        assert!(err.to_string().contains("malformed number `zero`"));
    }

    #[test]
    fn culture_block_may_leave_other_countries_empty() {
        let mut text = header(true);
        for c in culture_columns() {
            text.push(',');
            text.push_str(&c);
        }
        text.push('\n');
        text.push_str(&row("a", "train"));
        for k in 0..40 {
            text.push(',');
            if (20..30).contains(&k) {
                text.push_str("0.25");
            }
        }
        text.push('\n');
        let rows = parse_manifest(&text, Path::new("m.csv")).unwrap();
        let TargetValue::Regression(v) = &rows[0].targets[&TaskId::Culture] else {
            panic!()
        };
        assert_eq!(v[25], 0.25);
        assert_eq!(v[0], 0.0);

        // an empty native cell is still an error
        let text = text.replacen(",0.25", ",", 1);
        assert!(parse_manifest(&text, Path::new("m.csv")).is_err());
    }
}
