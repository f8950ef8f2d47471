use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    /// Two conv3x3 + batch norm + ReLU layers.
    Conv,
    /// Conv, KAN, ReLU, self-attention.
    Kan,
}

impl BlockKind {
    pub fn symbol(self) -> char {
        match self {
            BlockKind::Conv => 'C',
            BlockKind::Kan => 'K',
        }
    }
}

/// Encoder stage types, one letter per stage over `{C, K}`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ArchString(Vec<BlockKind>);

pub fn parse_arch(s: &str) -> Result<ArchString> {
    if s.is_empty() {
        return Err(Error::Parse {
            input: s.to_string(),
            position: 0,
            reason: "empty architecture".into(),
        });
    }
    s.chars()
        .enumerate()
        .map(|(i, c)| match c {
            'C' => Ok(BlockKind::Conv),
            'K' => Ok(BlockKind::Kan),
            other => Err(Error::Parse {
                input: s.to_string(),
                position: i,
                reason: format!("unexpected character {other:?}, expected 'C' or 'K'"),
            }),
        })
        .collect::<Result<Vec<_>>>()
        .map(ArchString)
}

impl ArchString {
    pub fn blocks(&self) -> &[BlockKind] {
        &self.0
    }

    pub fn stages(&self) -> usize {
        self.0.len()
    }
}

impl FromStr for ArchString {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_arch(s)
    }
}

impl TryFrom<String> for ArchString {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        parse_arch(&s)
    }
}

impl From<ArchString> for String {
    fn from(a: ArchString) -> String {
        a.to_string()
    }
}

impl fmt::Display for ArchString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.iter().try_for_each(|b| write!(f, "{}", b.symbol()))
    }
}
