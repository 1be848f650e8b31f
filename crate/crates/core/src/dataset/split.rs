use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetError, Manifest};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
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
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// Parses `subject_id,split` rows (header optional). A subject listed under
/// two different splits is a leakage error.
pub fn parse_split_csv(text: &str) -> Result<BTreeMap<String, Split>, DatasetError> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.starts_with("subject_id")) {
            continue;
        }
        let err = |msg: String| DatasetError::SplitCsv { line: n + 1, msg };
        let (subject, split) = line
            .split_once(',')
            .ok_or_else(|| err("expected `subject_id,split`".into()))?;
        let split: Split = split.trim().parse().map_err(err)?;
        let subject = subject.trim().to_string();
        if subject.is_empty() {
            return Err(err("empty subject_id".into()));
        }
        if let Some(&prev) = map.get(&subject) {
            if prev != split {
                return Err(DatasetError::Leakage {
                    subject,
                    splits: vec![prev, split],
                });
            }
        }
        map.insert(subject, split);
    }
    Ok(map)
}

pub fn split_csv(map: &BTreeMap<String, Split>) -> String {
    let mut s = String::from("subject_id,split\n");
    for (subject, split) in map {
        s.push_str(subject);
        s.push(',');
        s.push_str(split.as_str());
        s.push('\n');
    }
    s
}

/// Seeded subject-level assignment. `val_frac` and `test_frac` are rounded
/// to whole subjects; the remainder goes to train, which keeps at least one
/// subject whenever any exist.
pub fn assign_splits(
    subjects: &[String],
    val_frac: f64,
    test_frac: f64,
    seed: u64,
) -> Result<BTreeMap<String, Split>, DatasetError> {
    if !(0.0..1.0).contains(&val_frac) || !(0.0..1.0).contains(&test_frac) || val_frac + test_frac >= 1.0 {
        return Err(DatasetError::InvalidArgument(format!(
            "split fractions val={val_frac}, test={test_frac} must be in [0, 1) with sum < 1"
        )));
    }
    let mut unique: Vec<String> = subjects.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    unique.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = unique.len();
    let mut n_val = (val_frac * n as f64).round() as usize;
    let mut n_test = (test_frac * n as f64).round() as usize;
    while n > 0 && n_val + n_test >= n {
        if n_test >= n_val && n_test > 0 {
            n_test -= 1;
        } else {
            n_val -= 1;
        }
    }
    Ok(unique
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let split = if i < n_val {
                Split::Val
            } else if i < n_val + n_test {
                Split::Test
            } else {
                Split::Train
            };
            (s, split)
        })
        .collect())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub subjects: usize,
    pub windows: usize,
    pub windows_per_class: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub counts: BTreeMap<Split, SplitCounts>,
    pub warnings: Vec<String>,
}

/// Checks subject-disjointness and tallies subjects and per-class windows
/// for each split. Empty splits are reported as warnings.
pub fn validate_split(manifest: &Manifest) -> Result<SplitReport, DatasetError> {
    let k = manifest.class_map.len();
    let mut seen: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
    for e in &manifest.entries {
        seen.entry(e.subject.as_str()).or_default().insert(e.split);
    }
    if let Some((subject, splits)) = seen.iter().find(|(_, s)| s.len() > 1) {
        return Err(DatasetError::Leakage {
            subject: subject.to_string(),
            splits: splits.iter().copied().collect(),
        });
    }

    let mut counts: BTreeMap<Split, SplitCounts> = Split::ALL
        .iter()
        .map(|&s| {
            (
                s,
                SplitCounts {
                    windows_per_class: vec![0; k],
                    ..Default::default()
                },
            )
        })
        .collect();
    for splits in seen.values() {
        let s = *splits.iter().next().unwrap();
        counts.get_mut(&s).unwrap().subjects += 1;
    }
    for e in &manifest.entries {
        let c = counts.get_mut(&e.split).unwrap();
        c.windows += 1;
        if e.label < k {
            c.windows_per_class[e.label] += 1;
        }
    }
    let warnings = counts
        .iter()
        .filter(|(_, c)| c.windows == 0)
        .map(|(s, _)| format!("split `{s}` is empty"))
        .collect();
    Ok(SplitReport { counts, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ClassMap, ManifestEntry, NormMeta};

    fn entry(subject: &str, split: Split, label: usize) -> ManifestEntry {
        ManifestEntry {
            path: format!("{subject}.agw"),
            label,
            subject: subject.into(),
            split,
            len: 250,
            norm: NormMeta::none(),
            source: None,
        }
    }

    #[test]
    fn leakage_names_subject() {
        let mut m = Manifest::new("h".into(), 0, ClassMap::canonical());
        m.entries.push(entry("s01", Split::Train, 0));
        m.entries.push(entry("s02", Split::Val, 1));
        m.entries.push(entry("s01", Split::Test, 0));
        match validate_split(&m) {
            Err(DatasetError::Leakage { subject, splits }) => {
                assert_eq!(subject, "s01");
                assert_eq!(splits, vec![Split::Train, Split::Test]);
            }
            other => panic!("expected leakage, got {other:?}"),
        }
    }

    #[test]
    fn disjoint_counts_and_empty_warning() {
        let mut m = Manifest::new("h".into(), 0, ClassMap::canonical());
        m.entries.push(entry("s01", Split::Train, 0));
        m.entries.push(entry("s01", Split::Train, 4));
        m.entries.push(entry("s02", Split::Train, 4));
        m.entries.push(entry("s03", Split::Val, 1));
        let r = validate_split(&m).unwrap();
        let train = &r.counts[&Split::Train];
        assert_eq!(train.subjects, 2);
        assert_eq!(train.windows_per_class, vec![1, 0, 0, 0, 2]);
        assert_eq!(r.warnings, vec!["split `test` is empty".to_string()]);
    }

    #[test]
    fn csv_roundtrip_and_conflict() {
        let text = "subject_id,split\ns01,train\ns02,val\ns03,test\n";
        let map = parse_split_csv(text).unwrap();
        assert_eq!(split_csv(&map), text);
        assert!(matches!(
            parse_split_csv("s01,train\ns01,test\n"),
            Err(DatasetError::Leakage { .. })
        ));
        assert!(parse_split_csv("s01,holdout\n").is_err());
    }

    #[test]
    fn assignment_is_seeded_and_disjoint() {
        let subjects: Vec<String> = (0..10).map(|i| format!("s{i:02}")).collect();
        let a = assign_splits(&subjects, 0.2, 0.2, 3).unwrap();
        let b = assign_splits(&subjects, 0.2, 0.2, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        let count = |s| a.values().filter(|&&v| v == s).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (6, 2, 2));
        let one = assign_splits(&subjects[..1], 0.2, 0.2, 3).unwrap();
        assert_eq!(one.values().next(), Some(&Split::Train));
    }
}
