//! One-hot encoding over combinations of label factors.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use super::label::LabelRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FactorGroup {
    /// The `Y.M` age string, as a category.
    Age,
    WhoDrew,
    WhoIsDrawn,
    AgeCategory,
    AgeInMonths,
}

impl FactorGroup {
    pub const ALL: [FactorGroup; 5] = [
        FactorGroup::Age,
        FactorGroup::WhoDrew,
        FactorGroup::WhoIsDrawn,
        FactorGroup::AgeCategory,
        FactorGroup::AgeInMonths,
    ];

    pub fn value(self, r: &LabelRecord) -> String {
        match self {
            FactorGroup::Age => r.age_text(),
            FactorGroup::WhoDrew => r.author_code.to_string(),
            FactorGroup::WhoIsDrawn => r.drawn_gender.letter().to_string(),
            FactorGroup::AgeCategory => r.age_category.clone(),
            FactorGroup::AgeInMonths => r.age_months.to_string(),
        }
    }
}

impl fmt::Display for FactorGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FactorGroup::Age => "age",
            FactorGroup::WhoDrew => "who_drew",
            FactorGroup::WhoIsDrawn => "who_is_drawn",
            FactorGroup::AgeCategory => "age_category",
            FactorGroup::AgeInMonths => "age_in_months",
        })
    }
}

impl FromStr for FactorGroup {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FactorGroup::ALL
            .into_iter()
            .find(|g| g.to_string() == s)
            .ok_or_else(|| {
                format!("unknown factor group '{s}' (age, who_drew, who_is_drawn, age_category, age_in_months)")
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("no factor groups selected")]
    EmptySelection,
    #[error("no records to encode")]
    NoRecords,
    #[error("label combination {0} is not in the category table")]
    UnknownCategory(String),
    #[error("malformed category table: {0}")]
    Table(String),
}

/// The factor groups that together define a category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderSpec {
    groups: Vec<FactorGroup>,
}

impl EncoderSpec {
    /// Keeps the first occurrence of each group, in the given order.
    pub fn new(groups: &[FactorGroup]) -> Result<Self, EncodeError> {
        let mut seen = BTreeSet::new();
        let groups: Vec<_> = groups.iter().copied().filter(|g| seen.insert(*g)).collect();
        if groups.is_empty() {
            return Err(EncodeError::EmptySelection);
        }
        Ok(EncoderSpec { groups })
    }

    pub fn groups(&self) -> &[FactorGroup] {
        &self.groups
    }

    pub fn key(&self, r: &LabelRecord) -> Vec<String> {
        self.groups.iter().map(|g| g.value(r)).collect()
    }
}

/// Sorted list of the distinct factor combinations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryTable {
    spec: EncoderSpec,
    combos: Vec<Vec<String>>,
}

impl CategoryTable {
    pub fn from_records(records: &[LabelRecord], spec: &EncoderSpec) -> Result<Self, EncodeError> {
        if records.is_empty() {
            return Err(EncodeError::NoRecords);
        }
        let set: BTreeSet<Vec<String>> = records.iter().map(|r| spec.key(r)).collect();
        Ok(CategoryTable {
            spec: spec.clone(),
            combos: set.into_iter().collect(),
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.combos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.combos.is_empty()
    }

    pub fn combos(&self) -> &[Vec<String>] {
        &self.combos
    }

    pub fn index_of(&self, r: &LabelRecord) -> Option<usize> {
        self.combos.binary_search(&self.spec.key(r)).ok()
    }

    pub fn one_hot(&self, r: &LabelRecord) -> Result<Vec<f64>, EncodeError> {
        let i = self
            .index_of(r)
            .ok_or_else(|| EncodeError::UnknownCategory(self.spec.key(r).join(",")))?;
        let mut v = vec![0.0; self.len()];
        v[i] = 1.0;
        Ok(v)
    }

    /// Header line naming the groups, then one comma-separated combination per line.
    pub fn to_text(&self) -> String {
        let mut out = self
            .spec
            .groups
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",");
        out.push('\n');
        for c in &self.combos {
            out.push_str(&c.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, EncodeError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| EncodeError::Table("empty".into()))?;
        let groups = header
            .split(',')
            .map(str::parse)
            .collect::<Result<Vec<FactorGroup>, _>>()
            .map_err(EncodeError::Table)?;
        let spec = EncoderSpec::new(&groups)?;
        let combos: Vec<Vec<String>> = lines
            .map(|l| l.split(',').map(str::to_string).collect())
            .collect();
        if combos.iter().any(|c: &Vec<String>| c.len() != groups.len()) {
            return Err(EncodeError::Table("row width differs from header".into()));
        }
        if combos.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EncodeError::Table("rows must be sorted and distinct".into()));
        }
        Ok(CategoryTable { spec, combos })
    }
}

/// Builds the category table from `records` and one vector per record.
pub fn encode_onehot(
    records: &[LabelRecord],
    spec: &EncoderSpec,
) -> Result<(CategoryTable, Vec<Vec<f64>>), EncodeError> {
    let table = CategoryTable::from_records(records, spec)?;
    let vectors = records.iter().map(|r| table.one_hot(r)).collect::<Result<_, _>>()?;
    Ok((table, vectors))
}
