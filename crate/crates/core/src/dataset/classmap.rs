use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::DatasetError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub name: String,
    pub index: usize,
}

/// Ordered label names with dense indices `0..K`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassMap {
    entries: Vec<ClassEntry>,
}

impl ClassMap {
    /// The five artifact classes in their fixed order.
    pub fn canonical() -> Self {
        Self::from_names(&["muscle", "eye", "electrode", "chewing", "shiver"])
            .expect("canonical names are unique")
    }

    pub fn from_names(names: &[&str]) -> Result<Self, DatasetError> {
        Self::new(
            names
                .iter()
                .enumerate()
                .map(|(i, n)| ClassEntry {
                    name: n.to_string(),
                    index: i,
                })
                .collect(),
        )
    }

    pub fn new(mut entries: Vec<ClassEntry>) -> Result<Self, DatasetError> {
        entries.sort_by_key(|e| e.index);
        for (i, e) in entries.iter().enumerate() {
            if e.index != i {
                return Err(DatasetError::ClassMap(format!(
                    "indices must be 0..{} without gaps, found {} at position {}",
                    entries.len(),
                    e.index,
                    i
                )));
            }
            if e.name.is_empty() || entries[..i].iter().any(|o| o.name == e.name) {
                return Err(DatasetError::ClassMap(format!(
                    "label name `{}` empty or duplicated",
                    e.name
                )));
            }
        }
        if entries.is_empty() {
            return Err(DatasetError::ClassMap("no classes".into()));
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.index)
    }

    pub fn name_of(&self, index: usize) -> Option<&str> {
        self.entries.get(index).map(|e| e.name.as_str())
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    /// `label_name,index` with a header row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("label_name,index\n");
        for e in &self.entries {
            let _ = writeln!(s, "{},{}", e.name, e.index);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, DatasetError> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (n == 0 && line.starts_with("label_name")) {
                continue;
            }
            let (name, idx) = line
                .split_once(',')
                .ok_or_else(|| DatasetError::ClassMap(format!("line {}: expected `name,index`", n + 1)))?;
            let index = idx.trim().parse().map_err(|_| {
                DatasetError::ClassMap(format!("line {}: bad index `{}`", n + 1, idx.trim()))
            })?;
            entries.push(ClassEntry {
                name: name.trim().to_string(),
                index,
            });
        }
        Self::new(entries)
    }
}
