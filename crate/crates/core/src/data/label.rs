//! Labels encoded in drawing filenames: `<cat>-<id><letter>-<Y.M><g>.<ext>`.
//!
//! `p3-67w-6.7f.jpeg` reads as age category `p3`, subject 67, author code
//! `w`, age 6 years 7 months (79 months), drawn figure female.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Gender {
    Female,
    Male,
}

impl Gender {
    pub fn letter(self) -> char {
        match self {
            Gender::Female => 'f',
            Gender::Male => 'm',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        match c {
            'f' => Some(Gender::Female),
            'm' => Some(Gender::Male),
            _ => None,
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gender::Female => "female",
            Gender::Male => "male",
        })
    }
}

impl FromStr for Gender {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f" | "female" | "girl" => Ok(Gender::Female),
            "m" | "male" | "boy" => Ok(Gender::Male),
            other => Err(format!("unknown gender '{other}'")),
        }
    }
}

/// Who made the drawing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AuthorDescriptor {
    pub gender: Gender,
    pub self_portrait: bool,
}

impl fmt::Display for AuthorDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let who = match self.gender {
            Gender::Female => "girl",
            Gender::Male => "boy",
        };
        if self.self_portrait {
            write!(f, "{who}, self-portrait")
        } else {
            f.write_str(who)
        }
    }
}

/// Author letter codes. Only `w` (a girl) and `s` (a boy drawing himself)
/// are known by default; others can be added from configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeTable {
    entries: BTreeMap<char, AuthorDescriptor>,
}

impl Default for CodeTable {
    fn default() -> Self {
        let mut entries = BTreeMap::new();
        entries.insert(
            'w',
            AuthorDescriptor {
                gender: Gender::Female,
                self_portrait: false,
            },
        );
        entries.insert(
            's',
            AuthorDescriptor {
                gender: Gender::Male,
                self_portrait: true,
            },
        );
        CodeTable { entries }
    }
}

impl CodeTable {
    pub fn insert(&mut self, code: char, author: AuthorDescriptor) {
        self.entries.insert(code, author);
    }

    pub fn get(&self, code: char) -> Option<AuthorDescriptor> {
        self.entries.get(&code).copied()
    }

    pub fn codes(&self) -> impl Iterator<Item = char> + '_ {
        self.entries.keys().copied()
    }

    fn describe(&self) -> String {
        self.entries
            .iter()
            .map(|(c, a)| format!("{c}={a}"))
            .collect::<Vec<_>>()
            .join("; ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRecord {
    pub age_category: String,
    pub subject_id: u32,
    pub author_code: char,
    pub age_months: u32,
    pub drawn_gender: Gender,
    pub author: AuthorDescriptor,
}

impl LabelRecord {
    /// The `Y.M` age field as written in filenames.
    pub fn age_text(&self) -> String {
        format!("{}.{}", self.age_months / 12, self.age_months % 12)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LabelError {
    #[error("'{0}' does not match <cat>-<id><letter>-<Y.M><g>.<ext>")]
    Pattern(String),
    #[error("invalid {field} '{value}' in '{name}'")]
    Field {
        name: String,
        field: &'static str,
        value: String,
    },
    #[error("unknown author code '{code}' in '{name}' (known: {known})")]
    UnknownCode {
        name: String,
        code: char,
        known: String,
    },
}

fn is_token(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Decodes a filename (directory components are ignored).
pub fn parse_filename(name: &str, codes: &CodeTable) -> Result<LabelRecord, LabelError> {
    let base = Path::new(name)
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or(name);
    let pattern = || LabelError::Pattern(base.to_string());
    let field = |field: &'static str, value: &str| LabelError::Field {
        name: base.to_string(),
        field,
        value: value.to_string(),
    };

    let (stem, ext) = base.rsplit_once('.').ok_or_else(pattern)?;
    if !is_token(ext) {
        return Err(pattern());
    }
    let parts: Vec<&str> = stem.split('-').collect();
    let [cat, id_part, age_part] = parts[..] else {
        return Err(pattern());
    };
    if !is_token(cat) {
        return Err(field("age category", cat));
    }

    let code = id_part.chars().last().ok_or_else(pattern)?;
    let digits = &id_part[..id_part.len() - code.len_utf8()];
    if !code.is_ascii_alphabetic() || digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(field("subject id and author code", id_part));
    }
    let subject_id: u32 = digits.parse().map_err(|_| field("subject id", digits))?;
    let author = codes.get(code).ok_or_else(|| LabelError::UnknownCode {
        name: base.to_string(),
        code,
        known: codes.describe(),
    })?;

    let g = age_part.chars().last().ok_or_else(pattern)?;
    let drawn_gender = Gender::from_letter(g).ok_or_else(|| field("drawn gender", &g.to_string()))?;
    let age = &age_part[..age_part.len() - g.len_utf8()];
    let (y, m) = age.split_once('.').ok_or_else(|| field("age", age))?;
    let num = |s: &str| -> Option<u32> {
        (!s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()))
            .then(|| s.parse().ok())
            .flatten()
    };
    let (years, months) = match (num(y), num(m)) {
        (Some(y), Some(m)) if m < 12 => (y, m),
        _ => return Err(field("age", age)),
    };

    Ok(LabelRecord {
        age_category: cat.to_string(),
        subject_id,
        author_code: code,
        age_months: 12 * years + months,
        drawn_gender,
        author,
    })
}

/// Inverse of [`parse_filename`].
pub fn render_filename(record: &LabelRecord, ext: &str) -> String {
    format!(
        "{}-{}{}-{}{}.{}",
        record.age_category,
        record.subject_id,
        record.author_code,
        record.age_text(),
        record.drawn_gender.letter(),
        ext
    )
}

/// Age in months as a regression target.
pub fn regression_target(record: &LabelRecord) -> f64 {
    f64::from(record.age_months)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decodes_documented_examples() {
        let t = CodeTable::default();
        let a = parse_filename("p3-67w-6.7f.jpeg", &t).unwrap();
        assert_eq!(a.age_category, "p3");
        assert_eq!(a.subject_id, 67);
        assert_eq!(a.age_months, 79);
        assert_eq!(a.drawn_gender, Gender::Female);
        assert_eq!(a.author.to_string(), "girl");
        assert_eq!(regression_target(&a), 79.0);

        let b = parse_filename("data/nu-21s-4.5m.jpeg", &t).unwrap();
        assert_eq!(b.age_category, "nu");
        assert_eq!(b.subject_id, 21);
        assert_eq!(b.age_months, 53);
        assert_eq!(b.drawn_gender, Gender::Male);
        assert_eq!(b.author.to_string(), "boy, self-portrait");
        assert_eq!(regression_target(&b), 53.0);
    }

    #[test]
    fn rejects_malformed_names() {
        let t = CodeTable::default();
        assert!(matches!(parse_filename("portrait.jpeg", &t), Err(LabelError::Pattern(_))));
        assert!(matches!(
            parse_filename("p3-67w-6.7x.jpeg", &t),
            Err(LabelError::Field { field: "drawn gender", .. })
        ));
        assert!(matches!(parse_filename("p3-67w-6.12f.pgm", &t), Err(LabelError::Field { field: "age", .. })));
        assert!(matches!(parse_filename("p3-w-6.7f.pgm", &t), Err(LabelError::Field { .. })));
        assert!(parse_filename("p3-67w-6.7f", &t).is_err());
        let err = parse_filename("p3-67q-6.7f.pgm", &t).unwrap_err();
        assert!(err.to_string().contains("s=boy, self-portrait"), "{err}");
    }

    #[test]
    fn zero_age_is_zero_target() {
        let r = parse_filename("nu-1w-0.0f.pgm", &CodeTable::default()).unwrap();
        assert_eq!(regression_target(&r), 0.0);
    }

    #[test]
    fn custom_codes_extend_the_table() {
        let mut t = CodeTable::default();
        t.insert(
            'b',
            AuthorDescriptor {
                gender: Gender::Male,
                self_portrait: false,
            },
        );
        assert_eq!(parse_filename("p1-3b-5.0m.pgm", &t).unwrap().author.gender, Gender::Male);
    }

    proptest! {
        #[test]
        fn render_parse_round_trip(
            cat in "[a-z][a-z0-9]{0,3}",
            id in 0u32..100_000,
            code in prop::sample::select(vec!['w', 's']),
            months in 0u32..300,
            g in prop::sample::select(vec![Gender::Female, Gender::Male]),
        ) {
            let t = CodeTable::default();
            let rec = LabelRecord {
                age_category: cat,
                subject_id: id,
                author_code: code,
                age_months: months,
                drawn_gender: g,
                author: t.get(code).unwrap(),
            };
            prop_assert_eq!(parse_filename(&render_filename(&rec, "pgm"), &t).unwrap(), rec);
        }
    }
}
