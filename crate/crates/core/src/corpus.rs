//! Annotated utterance manifests.
//!
//! A manifest is a CSV file with one row per utterance carrying speaker,
//! speech category, split membership and 1..=7 ratings for the seven voice
//! quality dimensions. External evaluation sets reuse the same layout and
//! fill the `severity` or `emotion` columns instead of (or in addition to)
//! the ratings.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics;

/// Column names of the manifest CSV, in order.
pub const MANIFEST_HEADER: [&str; 14] = [
    "utterance_id",
    "speaker_id",
    "category",
    "split",
    "intelligibility",
    "imprecise_consonants",
    "harsh_voice",
    "naturalness",
    "monoloudness",
    "monopitch",
    "breathiness",
    "severity",
    "emotion",
    "duration_s",
];

/// Smallest and largest valid rating.
pub const SCORE_MIN: u8 = 1;
pub const SCORE_MAX: u8 = 7;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("unexpected column `{found}` at position {position}, expected `{expected}`")]
    UnexpectedColumn {
        position: usize,
        expected: String,
        found: String,
    },
    #[error("duplicate utterance id `{0}`")]
    DuplicateUtteranceId(String),
    #[error("row {row}: score {value} outside 1..=7")]
    ScoreOutOfRange { row: usize, value: String },
    #[error("row {row}: unknown category `{value}`")]
    UnknownCategory { row: usize, value: String },
    #[error("row {row}: unknown split `{value}`")]
    UnknownSplit { row: usize, value: String },
    #[error("row {row}: unknown emotion `{value}`")]
    UnknownEmotion { row: usize, value: String },
    #[error("row {row}: invalid value `{value}` in column `{column}`")]
    InvalidField {
        row: usize,
        column: &'static str,
        value: String,
    },
    #[error("row {row}: empty utterance id")]
    EmptyUtteranceId { row: usize },
}

/// Error produced when parsing one of the enumerated manifest values.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown {kind} `{value}`")]
pub struct ParseEnumError {
    pub kind: &'static str,
    pub value: String,
}

macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident, $kind:literal, { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(
                #[serde(rename = $text)]
                $variant,
            )+
        }

        impl $name {
            pub const ALL: [$name; [$($text),+].len()] = [$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text,)+
                }
            }

            /// Position of the variant in [`Self::ALL`].
            pub fn index(self) -> usize {
                self as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = ParseEnumError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(ParseEnumError { kind: $kind, value: s.to_string() }),
                }
            }
        }
    };
}

string_enum!(
    /// The seven rated voice quality dimensions.
    Dimension, "dimension", {
        Intelligibility => "intelligibility",
        ImpreciseConsonants => "imprecise_consonants",
        HarshVoice => "harsh_voice",
        Naturalness => "naturalness",
        Monoloudness => "monoloudness",
        Monopitch => "monopitch",
        Breathiness => "breathiness",
    }
);

string_enum!(
    /// Speech elicitation category.
    Category, "category", {
        DigitalCommand => "digital_command",
        NovelSentence => "novel_sentence",
        SpontaneousSpeech => "spontaneous",
    }
);

string_enum!(
    Split, "split", {
        Train => "train",
        Validation => "validation",
        Test => "test",
    }
);

string_enum!(
    /// Categorical emotion labels of acted affect corpora.
    Emotion, "emotion", {
        Calm => "calm",
        Happy => "happy",
        Sad => "sad",
        Angry => "angry",
        Fearful => "fearful",
        Disgust => "disgust",
        Surprised => "surprised",
    }
);

/// One annotated utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub utterance_id: String,
    pub speaker_id: String,
    /// Absent for external sets that do not carry a category.
    pub category: Option<Category>,
    /// Absent for external sets that are never split.
    pub split: Option<Split>,
    /// Rating per dimension, indexed by [`Dimension::index`].
    pub scores: [Option<u8>; 7],
    pub severity: Option<u32>,
    pub emotion: Option<Emotion>,
    pub duration_s: Option<f64>,
}

impl UtteranceRecord {
    pub fn new(utterance_id: impl Into<String>, speaker_id: impl Into<String>) -> Self {
        Self {
            utterance_id: utterance_id.into(),
            speaker_id: speaker_id.into(),
            category: None,
            split: None,
            scores: [None; 7],
            severity: None,
            emotion: None,
            duration_s: None,
        }
    }

    pub fn score(&self, dimension: Dimension) -> Option<u8> {
        self.scores[dimension.index()]
    }

    pub fn set_score(&mut self, dimension: Dimension, score: Option<u8>) {
        self.scores[dimension.index()] = score;
    }
}

/// A parsed manifest. Records keep file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<UtteranceRecord>,
    pub source_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub unassigned: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SpeakerDisjointReport {
    pub ok: bool,
    /// Speakers seen in more than one split, sorted.
    pub offending_speakers: Vec<String>,
}

impl Manifest {
    pub fn new(source_name: impl Into<String>, records: Vec<UtteranceRecord>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.utterance_id.as_str()) {
                return Err(CorpusError::DuplicateUtteranceId(r.utterance_id.clone()));
            }
        }
        Ok(Self {
            records,
            source_name: source_name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split_sizes(&self) -> SplitSizes {
        let mut sizes = SplitSizes {
            train: 0,
            validation: 0,
            test: 0,
            unassigned: 0,
        };
        for r in &self.records {
            match r.split {
                Some(Split::Train) => sizes.train += 1,
                Some(Split::Validation) => sizes.validation += 1,
                Some(Split::Test) => sizes.test += 1,
                None => sizes.unassigned += 1,
            }
        }
        sizes
    }

    pub fn categories_present(&self) -> BTreeSet<Category> {
        self.records.iter().filter_map(|r| r.category).collect()
    }
}

fn parse_opt<T: FromStr>(cell: &str) -> Option<Result<T, T::Err>> {
    let cell = cell.trim();
    if cell.is_empty() {
        None
    } else {
        Some(cell.parse())
    }
}

fn parse_score(row: usize, cell: &str) -> Result<Option<u8>, CorpusError> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Ok(None);
    }
    let out_of_range = || CorpusError::ScoreOutOfRange {
        row,
        value: cell.to_string(),
    };
    // Accept "3" and "3.0" but nothing fractional.
    let value: f64 = cell.parse().map_err(|_| CorpusError::InvalidField {
        row,
        column: "score",
        value: cell.to_string(),
    })?;
    if value.fract() != 0.0 {
        return Err(CorpusError::InvalidField {
            row,
            column: "score",
            value: cell.to_string(),
        });
    }
    if !(f64::from(SCORE_MIN)..=f64::from(SCORE_MAX)).contains(&value) {
        return Err(out_of_range());
    }
    Ok(Some(value as u8))
}

/// Parses a manifest from any reader. `source_name` is kept for reporting.
pub fn read_manifest<R: Read>(reader: R, source_name: &str) -> Result<Manifest, CorpusError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);

    let headers = rdr.headers()?.clone();
    for (position, expected) in MANIFEST_HEADER.iter().enumerate() {
        match headers.get(position).map(str::trim) {
            None => return Err(CorpusError::MissingColumn((*expected).to_string())),
            Some(found) if found != *expected => {
                if headers.iter().any(|h| h.trim() == *expected) {
                    return Err(CorpusError::UnexpectedColumn {
                        position,
                        expected: (*expected).to_string(),
                        found: found.to_string(),
                    });
                }
                return Err(CorpusError::MissingColumn((*expected).to_string()));
            }
            Some(_) => {}
        }
    }

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        // 1-based data row number, header excluded.
        let row_no = i + 1;
        let cell = |k: usize| row.get(k).unwrap_or("");

        let utterance_id = cell(0).trim().to_string();
        if utterance_id.is_empty() {
            return Err(CorpusError::EmptyUtteranceId { row: row_no });
        }
        if !seen.insert(utterance_id.clone()) {
            return Err(CorpusError::DuplicateUtteranceId(utterance_id));
        }
        let mut rec = UtteranceRecord::new(utterance_id, cell(1).trim());
        rec.category = parse_opt::<Category>(cell(2))
            .transpose()
            .map_err(|e| CorpusError::UnknownCategory {
                row: row_no,
                value: e.value,
            })?;
        rec.split = parse_opt::<Split>(cell(3))
            .transpose()
            .map_err(|e| CorpusError::UnknownSplit {
                row: row_no,
                value: e.value,
            })?;
        for d in Dimension::ALL {
            rec.scores[d.index()] = parse_score(row_no, cell(4 + d.index()))?;
        }
        rec.severity = parse_opt::<u32>(cell(11))
            .transpose()
            .map_err(|_| CorpusError::InvalidField {
                row: row_no,
                column: "severity",
                value: cell(11).to_string(),
            })?;
        rec.emotion = parse_opt::<Emotion>(cell(12))
            .transpose()
            .map_err(|e| CorpusError::UnknownEmotion {
                row: row_no,
                value: e.value,
            })?;
        rec.duration_s = parse_opt::<f64>(cell(13))
            .transpose()
            .map_err(|_| CorpusError::InvalidField {
                row: row_no,
                column: "duration_s",
                value: cell(13).to_string(),
            })?;
        records.push(rec);
    }

    Ok(Manifest {
        records,
        source_name: source_name.to_string(),
    })
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest, CorpusError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_manifest(std::io::BufReader::new(file), &name)
}

fn opt_to_string<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

pub fn write_manifest_to<W: Write>(m: &Manifest, writer: W) -> Result<(), CorpusError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(MANIFEST_HEADER)?;
    for r in &m.records {
        let mut row: Vec<String> = Vec::with_capacity(MANIFEST_HEADER.len());
        row.push(r.utterance_id.clone());
        row.push(r.speaker_id.clone());
        row.push(opt_to_string(&r.category));
        row.push(opt_to_string(&r.split));
        row.extend(r.scores.iter().map(opt_to_string));
        row.push(opt_to_string(&r.severity));
        row.push(opt_to_string(&r.emotion));
        // `{}` on f64 prints the shortest representation that parses back exactly.
        row.push(opt_to_string(&r.duration_s));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_manifest(m: &Manifest, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let file = std::fs::File::create(path)?;
    write_manifest_to(m, std::io::BufWriter::new(file))
}

/// Reports speakers that occur in more than one split. Records without a
/// split are ignored.
pub fn check_speaker_disjoint(m: &Manifest) -> SpeakerDisjointReport {
    let mut splits_by_speaker: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
    for r in &m.records {
        if let Some(s) = r.split {
            splits_by_speaker.entry(r.speaker_id.as_str()).or_default().insert(s);
        }
    }
    let offending_speakers: Vec<String> = splits_by_speaker
        .into_iter()
        .filter(|(_, splits)| splits.len() > 1)
        .map(|(spk, _)| spk.to_string())
        .collect();
    SpeakerDisjointReport {
        ok: offending_speakers.is_empty(),
        offending_speakers,
    }
}

/// Pairwise Pearson correlations between dimension ratings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationMatrix {
    /// `None` where fewer than two records share both dimensions or one of
    /// them is constant over the overlap.
    pub values: [[Option<f64>; 7]; 7],
    /// Number of records annotated on both dimensions.
    pub overlap: [[usize; 7]; 7],
}

impl CorrelationMatrix {
    pub fn get(&self, a: Dimension, b: Dimension) -> Option<f64> {
        self.values[a.index()][b.index()]
    }
}

/// Pearson correlation matrix over all records of the manifest, using for
/// each pair only the records annotated on both dimensions.
pub fn annotation_correlations(m: &Manifest) -> CorrelationMatrix {
    let mut values = [[None; 7]; 7];
    let mut overlap = [[0usize; 7]; 7];
    for a in Dimension::ALL {
        for b in Dimension::ALL {
            let (i, j) = (a.index(), b.index());
            if j < i {
                continue;
            }
            let (xs, ys): (Vec<f64>, Vec<f64>) = m
                .records
                .iter()
                .filter_map(|r| Some((f64::from(r.scores[i]?), f64::from(r.scores[j]?))))
                .unzip();
            overlap[i][j] = xs.len();
            overlap[j][i] = xs.len();
            let v = if i == j {
                Some(1.0)
            } else {
                metrics::pearson(&xs, &ys).ok()
            };
            values[i][j] = v;
            values[j][i] = v;
        }
    }
    CorrelationMatrix { values, overlap }
}

/// Histogram group: a speech category or, for pooled counts and
/// uncategorized records, `None`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreHistograms {
    pub by_category: bool,
    /// Group labels; `None` collects uncategorized records (or everything
    /// when `by_category` is false).
    pub groups: Vec<Option<Category>>,
    /// `counts[dimension][group][score - 1]`.
    pub counts: Vec<Vec<[usize; 7]>>,
}

impl ScoreHistograms {
    pub fn bins(&self, dimension: Dimension, group: Option<Category>) -> Option<&[usize; 7]> {
        let g = self.groups.iter().position(|x| *x == group)?;
        Some(&self.counts[dimension.index()][g])
    }
}

pub fn score_histograms(m: &Manifest, by_category: bool) -> ScoreHistograms {
    let mut groups: Vec<Option<Category>> = if by_category {
        Category::ALL.iter().copied().map(Some).collect()
    } else {
        vec![None]
    };
    if by_category && m.records.iter().any(|r| r.category.is_none()) {
        groups.push(None);
    }
    let mut counts = vec![vec![[0usize; 7]; groups.len()]; 7];
    for r in &m.records {
        let key = if by_category { r.category } else { None };
        let g = groups
            .iter()
            .position(|x| *x == key)
            .expect("every record maps to a group");
        for d in Dimension::ALL {
            if let Some(s) = r.score(d) {
                counts[d.index()][g][usize::from(s - 1)] += 1;
            }
        }
    }
    ScoreHistograms {
        by_category,
        groups,
        counts,
    }
}

/// Minimum fraction of ratings ≥ 2 for a dimension to be usable.
pub const ELIGIBILITY_MIN_FRACTION: f64 = 0.10;

/// A dimension is eligible when at least 10% of its annotated records are
/// rated 2 or higher. Dimensions with no annotations are not eligible.
pub fn dimension_eligibility(m: &Manifest) -> BTreeMap<Dimension, bool> {
    Dimension::ALL
        .iter()
        .map(|&d| {
            let (annotated, atypical) = m
                .records
                .iter()
                .filter_map(|r| r.score(d))
                .fold((0usize, 0usize), |(n, k), s| (n + 1, k + usize::from(s >= 2)));
            // k / n >= 1/10 in integers, so the boundary is exact.
            (d, annotated > 0 && atypical * 10 >= annotated)
        })
        .collect()
}
