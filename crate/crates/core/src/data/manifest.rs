//! Dataset manifests (`path,mask_path,label,class_name,split` CSV) and
//! per-split class statistics.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::losses::{inverse_freq_weights, ClassWeights};

pub const DEFAULT_CLASS_NAMES: [&str; 3] = ["normal", "osteopenia", "osteoporosis"];
const HEADER: [&str; 5] = ["path", "mask_path", "label", "class_name", "split"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?} (expected train, val or test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    /// As written in the manifest; relative paths resolve against its directory.
    pub path: PathBuf,
    pub mask_path: Option<PathBuf>,
    pub label: usize,
    pub class_name: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    classes: Vec<String>,
    records: Vec<SampleRecord>,
    root: PathBuf,
}

impl Manifest {
    /// Checks every record against the class table.
    pub fn new(classes: Vec<String>, records: Vec<SampleRecord>, root: PathBuf) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::Config(format!("class table needs at least 2 classes, got {}", classes.len())));
        }
        for (row, r) in records.iter().enumerate() {
            let Some(name) = classes.get(r.label) else {
                return Err(Error::LabelOutOfRange {
                    row,
                    label: r.label,
                    classes: classes.len(),
                });
            };
            if name != &r.class_name {
                return Err(Error::Config(format!(
                    "row {row}: label {} is {name:?} in the class table but the row says {:?}",
                    r.label, r.class_name
                )));
            }
        }
        Ok(Self { classes, records, root })
    }

    /// Reads a manifest CSV; the class table is rebuilt from the rows and
    /// must cover ids `0..C` with one name each.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).at(path)?;
        let mut rdr = csv::Reader::from_reader(file);
        let head = rdr.headers()?.clone();
        if head.iter().collect::<Vec<_>>() != HEADER {
            return Err(Error::Config(format!(
                "{}: manifest header must be {}",
                path.display(),
                HEADER.join(",")
            )));
        }
        let mut records = Vec::new();
        let mut names: Vec<Option<String>> = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let label: usize = rec[2]
                .parse()
                .map_err(|_| Error::Config(format!("{} row {row}: bad label {:?}", path.display(), &rec[2])))?;
            if names.len() <= label {
                names.resize(label + 1, None);
            }
            match &names[label] {
                Some(n) if n != &rec[3] => {
                    return Err(Error::Config(format!(
                        "{} row {row}: label {label} named both {n:?} and {:?}",
                        path.display(),
                        &rec[3]
                    )))
                }
                Some(_) => {}
                None => names[label] = Some(rec[3].to_string()),
            }
            records.push(SampleRecord {
                path: PathBuf::from(&rec[0]),
                mask_path: (!rec[1].is_empty()).then(|| PathBuf::from(&rec[1])),
                label,
                class_name: rec[3].to_string(),
                split: rec[4].parse()?,
            });
        }
        let classes = names
            .into_iter()
            .enumerate()
            .map(|(id, n)| n.ok_or_else(|| Error::Config(format!("class ids are not dense: no rows for class {id}"))))
            .collect::<Result<Vec<_>>>()?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(classes, records, root)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(HEADER)?;
        for r in &self.records {
            let mask = r.mask_path.as_ref().map(|p| p.to_string_lossy().into_owned()).unwrap_or_default();
            w.write_record([
                r.path.to_string_lossy().as_ref(),
                &mask,
                &r.label.to_string(),
                &r.class_name,
                r.split.as_str(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))?;
        Ok(String::from_utf8(bytes).expect("csv writer emits UTF-8 for UTF-8 input"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).at(path)
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Record indices of `split`, in manifest order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }

    pub fn labels(&self, split: Split) -> Vec<usize> {
        self.records.iter().filter(|r| r.split == split).map(|r| r.label).collect()
    }
}

/// Class counts and frequencies of one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    counts: Vec<usize>,
    frequencies: Vec<f64>,
}

impl ClassStats {
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::EmptySplit("counts".into()));
        }
        Ok(Self {
            counts: counts.to_vec(),
            frequencies: counts.iter().map(|&n| n as f64 / total as f64).collect(),
        })
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Largest count, lowest index on ties.
    pub fn head_class(&self) -> usize {
        self.counts
            .iter()
            .enumerate()
            .fold(0, |best, (i, &n)| if n > self.counts[best] { i } else { best })
    }

    /// Inverse-frequency loss weights; fails when a class is absent.
    pub fn weights(&self) -> Result<ClassWeights> {
        inverse_freq_weights(&self.counts)
    }
}

pub fn class_stats(manifest: &Manifest, split: Split) -> Result<ClassStats> {
    let mut counts = vec![0; manifest.num_classes()];
    for r in manifest.records().iter().filter(|r| r.split == split) {
        counts[r.label] += 1;
    }
    if counts.iter().all(|&n| n == 0) {
        return Err(Error::EmptySplit(split.to_string()));
    }
    ClassStats::from_counts(&counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(label: usize, split: Split) -> SampleRecord {
        SampleRecord {
            path: format!("v{label}.mcvl").into(),
            mask_path: None,
            label,
            class_name: DEFAULT_CLASS_NAMES[label].into(),
            split,
        }
    }

    fn names() -> Vec<String> {
        DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn rejects_inconsistent_names() {
        let mut r = rec(1, Split::Train);
        r.class_name = "normal".into();
        assert!(Manifest::new(names(), vec![r], PathBuf::new()).is_err());
        assert!(Manifest::new(names(), vec![rec(0, Split::Train)], PathBuf::new()).is_ok());
    }

    #[test]
    fn head_class_tie_break() {
        assert_eq!(ClassStats::from_counts(&[3, 5, 5]).unwrap().head_class(), 1);
        assert!(ClassStats::from_counts(&[0, 0]).is_err());
    }

    #[test]
    fn split_parsing() {
        assert_eq!("val".parse::<Split>().unwrap(), Split::Val);
        assert!("holdout".parse::<Split>().is_err());
    }
}
