//! Dataset manifests, frame subsampling, stratified splits and the
//! synthetic face generator.

mod frames;
mod preprocess;
pub mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use frames::{ingest_videos, DirectoryFrames, FrameSource};
pub use preprocess::{load_samples, preprocess, Sample};
pub use synth::{generate_synthetic, ArtifactKind, PoseDistribution, SyntheticSpec};

use crate::artifact::write_atomic;
use crate::error::{Error, Result};
use crate::geometry::FaceRecord;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Split fractions for train and validation; test takes the rest.
pub const TRAIN_FRACTION: f64 = 0.70;
pub const VAL_FRACTION: f64 = 0.15;

/// Fewest source units per label that leave every split non-empty.
pub const MIN_UNITS_PER_LABEL: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn as_f64(self) -> f64 {
        match self {
            Label::Real => 0.0,
            Label::Fake => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Fake => "fake",
        }
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(Label::Real),
            1 => Ok(Label::Fake),
            other => Err(format!("label must be 0 (real) or 1 (fake), got {other}")),
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        match l {
            Label::Real => 0,
            Label::Fake => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
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

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}` (train|val|test)"))),
        }
    }
}

/// Paths of precomputed view images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewPaths {
    pub global: String,
    pub middle: String,
    pub local: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Image path, relative to the manifest directory unless absolute.
    pub image: String,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    /// Source unit (video or synthetic item); splits never divide a unit.
    pub unit: String,
    pub faces: Vec<FaceRecord>,
    /// Set by `preprocess`: one entry per face with its views on disk.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub views: Option<ViewPaths>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestHeader {
    schema_version: u32,
    seed: u64,
    source: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
    pub source: String,
    /// Directory relative paths resolve against; not serialized.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == Some(split))
    }

    pub fn count(&self, split: Split, label: Label) -> usize {
        self.split(split).filter(|e| e.label == label).count()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            let key = (e.image.as_str(), e.views.as_ref().map(|v| v.local.as_str()));
            if !seen.insert(key) {
                return Err(Error::Config(format!("manifest lists `{}` twice", e.image)));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let header = ManifestHeader {
            schema_version: MANIFEST_SCHEMA_VERSION,
            seed: self.seed,
            source: self.source.clone(),
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (i, first) = lines.next().ok_or_else(|| parse_err(1, "empty manifest".into()))?;
        let header: ManifestHeader = serde_json::from_str(first).map_err(|e| parse_err(i + 1, format!("header: {e}")))?;
        if header.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(parse_err(
                i + 1,
                format!(
                    "manifest schema {} is not supported (expected {MANIFEST_SCHEMA_VERSION})",
                    header.schema_version
                ),
            ));
        }
        let entries = lines
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| parse_err(i + 1, e.to_string())))
            .collect::<Result<Vec<ManifestEntry>>>()?;
        let m = DatasetManifest {
            entries,
            seed: header.seed,
            source: header.source,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl()?.as_bytes())
    }
}

/// Frame indices kept when taking one frame per `stride`: every `i` with
/// `i % stride == 0`, ascending.
pub fn sample_frames(frame_count: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 {
        return Err(Error::Config("frame stride must be at least 1".into()));
    }
    Ok((0..frame_count).step_by(stride).collect())
}

const FRACTIONS: [f64; 3] = [TRAIN_FRACTION, VAL_FRACTION, 1.0 - TRAIN_FRACTION - VAL_FRACTION];

/// Largest-remainder rounding of `n * FRACTIONS`.
fn round_shares(n: usize) -> [usize; 3] {
    let exact = FRACTIONS.map(|f| f * n as f64);
    let mut out = exact.map(|e| e.floor() as usize);
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    for &k in order.iter().take(n - out.iter().sum::<usize>()) {
        out[k] += 1;
    }
    out
}

/// Split sizes per group such that every cell is its exact share rounded
/// up or down, each group's sizes sum to its count, and the split totals
/// equal the rounded shares of the grand total. Rounding a table while
/// keeping both margins is always possible; the search is over the
/// up/down choice per cell.
fn allocate(counts: &[usize]) -> Vec<[usize; 3]> {
    let floors: Vec<[usize; 3]> = counts.iter().map(|&n| FRACTIONS.map(|f| (f * n as f64).floor() as usize)).collect();
    let totals = round_shares(counts.iter().sum());
    let cells = counts.len() * 3;
    assert!(cells <= 24, "too many groups for exhaustive rounding");
    let mut best: Option<(f64, Vec<[usize; 3]>)> = None;
    for mask in 0u32..(1 << cells) {
        let table: Vec<[usize; 3]> = floors
            .iter()
            .enumerate()
            .map(|(g, f)| [0, 1, 2].map(|k| f[k] + ((mask >> (g * 3 + k)) & 1) as usize))
            .collect();
        if table.iter().zip(counts).any(|(row, &n)| row.iter().sum::<usize>() != n) {
            continue;
        }
        if (0..3).any(|k| table.iter().map(|r| r[k]).sum::<usize>() != totals[k]) {
            continue;
        }
        let err: f64 = table
            .iter()
            .zip(counts)
            .flat_map(|(row, &n)| (0..3).map(move |k| (row[k] as f64 - FRACTIONS[k] * n as f64).abs()))
            .sum();
        if best.as_ref().is_none_or(|(e, _)| err < *e - 1e-12) {
            best = Some((err, table));
        }
    }
    best.map(|(_, t)| t)
        .unwrap_or_else(|| counts.iter().map(|&n| round_shares(n)).collect())
}

/// Assigns every entry to train/val/test, stratified by label and keeping
/// each source unit in one split.
pub fn make_splits(mut entries: Vec<ManifestEntry>, seed: u64, source: &str) -> Result<DatasetManifest> {
    let mut units: BTreeMap<Label, BTreeMap<&str, ()>> = BTreeMap::new();
    let mut unit_label: BTreeMap<String, Label> = BTreeMap::new();
    for e in &entries {
        if let Some(&l) = unit_label.get(&e.unit) {
            if l != e.label {
                return Err(Error::Config(format!("unit `{}` mixes real and fake entries", e.unit)));
            }
        }
        unit_label.insert(e.unit.clone(), e.label);
    }
    for (unit, label) in &unit_label {
        units.entry(*label).or_default().insert(unit.as_str(), ());
    }
    for label in [Label::Real, Label::Fake] {
        let n = units.get(&label).map_or(0, |u| u.len());
        if n < MIN_UNITS_PER_LABEL {
            return Err(Error::TooFewEntries(format!(
                "{} {} units; at least {MIN_UNITS_PER_LABEL} per label are needed for a 70/15/15 split",
                n,
                label.name()
            )));
        }
    }
    let labels: Vec<Label> = units.keys().copied().collect();
    let sizes = allocate(&labels.iter().map(|l| units[l].len()).collect::<Vec<_>>());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assigned: BTreeMap<String, Split> = BTreeMap::new();
    for (label, [t, v, _]) in labels.iter().zip(sizes) {
        let mut list: Vec<&str> = units[label].keys().copied().collect();
        list.shuffle(&mut rng);
        for (i, u) in list.into_iter().enumerate() {
            let split = if i < t {
                Split::Train
            } else if i < t + v {
                Split::Val
            } else {
                Split::Test
            };
            assigned.insert(u.to_string(), split);
        }
    }
    for e in &mut entries {
        e.split = Some(assigned[&e.unit]);
    }
    let m = DatasetManifest {
        entries,
        seed,
        source: source.to_string(),
        base_dir: PathBuf::new(),
    };
    m.validate()?;
    Ok(m)
}
