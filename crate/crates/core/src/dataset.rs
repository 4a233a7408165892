//! Manifest-driven dataset ingestion and stratified train/test splitting.
//!
//! A manifest is a CSV file with the header `id,path,label,split`. Leading
//! lines starting with `#` are kept as free-text provenance. Paths are
//! resolved relative to the directory holding the manifest.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fsio;
use crate::rng::{derive_seed, SplitMix64};

/// The four tissue classes. The ordinal encoding (0..3, in declaration
/// order) is stable and used by the classifier outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClassLabel {
    Normal = 0,
    Benign = 1,
    InSitu = 2,
    Invasive = 3,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 4] = [
        ClassLabel::Normal,
        ClassLabel::Benign,
        ClassLabel::InSitu,
        ClassLabel::Invasive,
    ];
    pub const COUNT: usize = 4;

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn from_ordinal(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Normal => "normal",
            ClassLabel::Benign => "benign",
            ClassLabel::InSitu => "insitu",
            ClassLabel::Invasive => "invasive",
        }
    }

    /// Case-insensitive; spaces and hyphens are ignored ("In situ", "in-situ").
    pub fn parse(s: &str) -> Option<Self> {
        let norm: String = s
            .chars()
            .filter(|c| *c != ' ' && *c != '-')
            .flat_map(char::to_lowercase)
            .collect();
        match norm.as_str() {
            "normal" => Some(ClassLabel::Normal),
            "benign" => Some(ClassLabel::Benign),
            "insitu" => Some(ClassLabel::InSitu),
            "invasive" => Some(ClassLabel::Invasive),
            _ => None,
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ClassLabel::Normal => "Normal",
            ClassLabel::Benign => "Benign",
            ClassLabel::InSitu => "InSitu",
            ClassLabel::Invasive => "Invasive",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
    Unassigned,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Test, Split::Unassigned];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }

    fn index(self) -> usize {
        match self {
            Split::Train => 0,
            Split::Test => 1,
            Split::Unassigned => 2,
        }
    }
}

impl FromStr for Split {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "" | "unassigned" => Ok(Split::Unassigned),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub label: ClassLabel,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub provenance: String,
    /// Directory that relative entry paths are resolved against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            entries,
            provenance: String::new(),
            base_dir: base_dir.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.base_dir.join(&entry.path)
    }

    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Re-root the manifest at `new_base`, rewriting relative paths so they
    /// still point at the same files.
    pub fn rebase(&self, new_base: &Path) -> DatasetManifest {
        let new_base = absolute(new_base);
        let entries = self
            .entries
            .iter()
            .map(|e| {
                let target = absolute(&self.resolve(e));
                let path = pathdiff::diff_paths(&target, &new_base).unwrap_or(target);
                ManifestEntry {
                    path,
                    ..e.clone()
                }
            })
            .collect();
        DatasetManifest {
            entries,
            provenance: self.provenance.clone(),
            base_dir: new_base,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for line in self.provenance.lines() {
            out.push_str("# ");
            out.push_str(line);
            out.push('\n');
        }
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(["id", "path", "label", "split"]).unwrap();
        for e in &self.entries {
            let path = e.path.to_string_lossy().replace('\\', "/");
            w.write_record([e.id.as_str(), &path, e.label.as_str(), e.split.as_str()])
                .unwrap();
        }
        out.push_str(&String::from_utf8(w.into_inner().unwrap()).unwrap());
        out
    }

    /// Write to `path`, rebasing entry paths onto the file's directory.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().unwrap_or(Path::new("."));
        let rebased = self.rebase(dir);
        fsio::write_atomic(path, rebased.to_csv().as_bytes())
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Parse manifest text. `base_dir` anchors relative paths.
pub fn parse_manifest(text: &str, base_dir: &Path) -> Result<DatasetManifest> {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let mut provenance = Vec::new();
    let mut skipped_lines = 0u64;
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if !trimmed.starts_with('#') {
            break;
        }
        provenance.push(trimmed.trim_start_matches('#').trim().to_string());
        skipped_lines += 1;
        offset += line.len();
    }
    let rest = &text[offset..];

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(rest.as_bytes());

    let line_of = |pos: Option<&csv::Position>| pos.map_or(0, |p| p.line()) + skipped_lines;

    let headers = reader
        .headers()
        .map_err(|e| Error::MalformedRow {
            line: 1 + skipped_lines,
            message: e.to_string(),
        })?
        .clone();
    if headers.is_empty() {
        return Ok(DatasetManifest {
            entries: Vec::new(),
            provenance: provenance.join("\n"),
            base_dir: base_dir.to_path_buf(),
        });
    }
    let want = ["id", "path", "label", "split"];
    let got: Vec<String> = headers.iter().map(|h| h.to_ascii_lowercase()).collect();
    if got.len() < 3 || got[..3] != want[..3] || (got.len() > 3 && got[3] != "split") {
        return Err(Error::MalformedRow {
            line: 1 + skipped_lines,
            message: format!("expected header `id,path,label,split`, found {:?}", got),
        });
    }

    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::MalformedRow {
            line: line_of(e.position()),
            message: e.to_string(),
        })?;
        let line = line_of(rec.position());
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() < 3 || rec.len() > 4 {
            return Err(Error::MalformedRow {
                line,
                message: format!("expected 4 fields, found {}", rec.len()),
            });
        }
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(Error::MalformedRow {
                line,
                message: "empty id".into(),
            });
        }
        if rec[1].is_empty() {
            return Err(Error::MalformedRow {
                line,
                message: "empty path".into(),
            });
        }
        let label = ClassLabel::parse(&rec[2]).ok_or_else(|| Error::UnknownLabel {
            line,
            label: rec[2].to_string(),
        })?;
        let split_raw = rec.get(3).unwrap_or("");
        let split = split_raw.parse::<Split>().map_err(|_| Error::MalformedRow {
            line,
            message: format!("unknown split {split_raw:?}"),
        })?;
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateId { line, id });
        }
        entries.push(ManifestEntry {
            id,
            path: PathBuf::from(&rec[1]),
            label,
            split,
        });
    }

    Ok(DatasetManifest {
        entries,
        provenance: provenance.join("\n"),
        base_dir: base_dir.to_path_buf(),
    })
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fsio::read_string(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, &absolute(dir))
}

/// Stratified split: per class, ids are sorted, shuffled with a seeded
/// Fisher-Yates and the first `train_per_class` become `train`.
pub fn split_dataset(
    m: &DatasetManifest,
    train_per_class: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    let mut out = m.clone();
    for class in ClassLabel::ALL {
        let mut ids: Vec<&str> = m
            .entries
            .iter()
            .filter(|e| e.label == class)
            .map(|e| e.id.as_str())
            .collect();
        if ids.len() < train_per_class {
            return Err(Error::InsufficientEntries {
                class: class.to_string(),
                available: ids.len(),
                required: train_per_class,
            });
        }
        ids.sort_unstable();
        let mut rng = SplitMix64::new(derive_seed(seed, &[class.ordinal() as u64]));
        rng.shuffle(&mut ids);
        let train: HashSet<String> = ids[..train_per_class]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for e in out.entries.iter_mut().filter(|e| e.label == class) {
            e.split = if train.contains(&e.id) {
                Split::Train
            } else {
                Split::Test
            };
        }
    }
    Ok(out)
}

/// Counts indexed by split then class ordinal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassCounts {
    pub counts: [[usize; ClassLabel::COUNT]; 3],
}

impl ClassCounts {
    pub fn get(&self, split: Split, class: ClassLabel) -> usize {
        self.counts[split.index()][class.ordinal()]
    }

    pub fn split_total(&self, split: Split) -> usize {
        self.counts[split.index()].iter().sum()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }
}

impl fmt::Display for ClassCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<12}", "")?;
        for c in ClassLabel::ALL {
            write!(f, "{:>10}", c.to_string())?;
        }
        writeln!(f, "{:>10}", "Total")?;
        for s in Split::ALL {
            write!(f, "{:<12}", s.as_str())?;
            for c in ClassLabel::ALL {
                write!(f, "{:>10}", self.get(s, c))?;
            }
            writeln!(f, "{:>10}", self.split_total(s))?;
        }
        Ok(())
    }
}

pub fn class_counts(m: &DatasetManifest) -> ClassCounts {
    let mut c = ClassCounts::default();
    for e in &m.entries {
        c.counts[e.split.index()][e.label.ordinal()] += 1;
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn four_class_manifest(per_class: usize) -> DatasetManifest {
        let mut entries = Vec::new();
        for class in ClassLabel::ALL {
            for i in 0..per_class {
                entries.push(ManifestEntry {
                    id: format!("{}_{:03}", class.as_str(), i),
                    path: PathBuf::from(format!("{}/{:03}.tif", class.as_str(), i)),
                    label: class,
                    split: Split::Unassigned,
                });
            }
        }
        DatasetManifest::new(entries, "/data")
    }

    #[test]
    fn label_spellings() {
        let accepted = [
            ("normal", ClassLabel::Normal),
            ("Normal", ClassLabel::Normal),
            ("BENIGN", ClassLabel::Benign),
            ("insitu", ClassLabel::InSitu),
            ("in situ", ClassLabel::InSitu),
            ("In Situ", ClassLabel::InSitu),
            ("in-situ", ClassLabel::InSitu),
            ("InSitu", ClassLabel::InSitu),
            ("Invasive", ClassLabel::Invasive),
        ];
        for (s, want) in accepted {
            assert_eq!(ClassLabel::parse(s), Some(want), "{s}");
        }
        for bad in ["", "tumor", "in_situ", "normals"] {
            assert_eq!(ClassLabel::parse(bad), None, "{bad}");
        }
    }

    #[test]
    fn ordinals_are_stable() {
        for (i, c) in ClassLabel::ALL.iter().enumerate() {
            assert_eq!(c.ordinal(), i);
            assert_eq!(ClassLabel::from_ordinal(i), Some(*c));
        }
    }

    #[test]
    fn header_only_is_empty() {
        let m = parse_manifest("id,path,label,split\n", Path::new("/d")).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn parses_rows_and_crlf() {
        let text = "# histology subset\r\nid,path,label,split\r\na,x/a.tif,in situ,train\r\nb,x/b.tif,Benign,\r\n";
        let m = parse_manifest(text, Path::new("/d")).unwrap();
        assert_eq!(m.provenance, "histology subset");
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[0].label, ClassLabel::InSitu);
        assert_eq!(m.entries[0].split, Split::Train);
        assert_eq!(m.entries[1].split, Split::Unassigned);
        assert_eq!(m.resolve(&m.entries[0]), PathBuf::from("/d/x/a.tif"));
    }

    #[test]
    fn errors_report_line_numbers() {
        let text = "id,path,label,split\na,a.png,normal,train\nb,b.png,tumour,train\n";
        match parse_manifest(text, Path::new(".")) {
            Err(Error::UnknownLabel { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let text = "id,path,label,split\na,a.png,normal,train\na,b.png,benign,test\n";
        match parse_manifest(text, Path::new(".")) {
            Err(Error::DuplicateId { line, id }) => {
                assert_eq!(line, 3);
                assert_eq!(id, "a");
            }
            other => panic!("{other:?}"),
        }
        let text = "id,path,label,split\na,a.png,normal,train,extra,more\n";
        assert!(matches!(
            parse_manifest(text, Path::new(".")),
            Err(Error::MalformedRow { line: 2, .. })
        ));
        let text = "# note\nid,path,label,split\na,,normal,train\n";
        assert!(matches!(
            parse_manifest(text, Path::new(".")),
            Err(Error::MalformedRow { line: 3, .. })
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_manifest(Path::new("/nonexistent/manifest.csv")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn four_hundred_rows_count_one_hundred_per_class() {
        let m = four_class_manifest(100);
        let text = m.to_csv();
        let back = parse_manifest(&text, Path::new("/data")).unwrap();
        let c = class_counts(&back);
        for class in ClassLabel::ALL {
            assert_eq!(c.get(Split::Unassigned, class), 100);
        }
        assert_eq!(c.total(), 400);
    }

    #[test]
    fn split_75_25_per_class() {
        let m = split_dataset(&four_class_manifest(100), 75, 1).unwrap();
        let c = class_counts(&m);
        for class in ClassLabel::ALL {
            assert_eq!(c.get(Split::Train, class), 75);
            assert_eq!(c.get(Split::Test, class), 25);
        }
        assert_eq!(c.split_total(Split::Train), 300);
        assert_eq!(c.split_total(Split::Test), 100);
        let ids: Vec<_> = m.entries.iter().map(|e| &e.id).collect();
        let orig = four_class_manifest(100);
        let orig_ids: Vec<_> = orig.entries.iter().map(|e| &e.id).collect();
        assert_eq!(ids, orig_ids);
    }

    #[test]
    fn split_boundary_and_errors() {
        let m = split_dataset(&four_class_manifest(10), 10, 9).unwrap();
        assert_eq!(class_counts(&m).split_total(Split::Test), 0);
        assert!(matches!(
            split_dataset(&four_class_manifest(10), 11, 9),
            Err(Error::InsufficientEntries { .. })
        ));
    }

    #[test]
    fn split_depends_on_ids_not_order() {
        let m = four_class_manifest(20);
        let mut rev = m.clone();
        rev.entries.reverse();
        let a = split_dataset(&m, 5, 3).unwrap();
        let b = split_dataset(&rev, 5, 3).unwrap();
        for e in &a.entries {
            let other = b.entries.iter().find(|x| x.id == e.id).unwrap();
            assert_eq!(e.split, other.split);
        }
        let c = split_dataset(&m, 5, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn empty_manifest_counts_zero() {
        let c = class_counts(&DatasetManifest::new(Vec::new(), "."));
        assert_eq!(c, ClassCounts::default());
    }

    #[test]
    fn rebase_keeps_targets() {
        let m = four_class_manifest(1);
        let r = m.rebase(Path::new("/data/out/aug"));
        assert_eq!(r.entries[0].path, PathBuf::from("../../normal/000.tif"));
        assert_eq!(r.resolve(&r.entries[0]), PathBuf::from("/data/out/aug/../../normal/000.tif"));
    }
}
