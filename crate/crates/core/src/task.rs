use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The ten prediction targets, in token-table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Parsing,
    Landmarks,
    #[serde(rename = "headpose")]
    HeadPose,
    Attributes,
    Age,
    Gender,
    Race,
    Expression,
    Recognition,
    Visibility,
}

impl Task {
    pub const ALL: [Task; 10] = [
        Task::Parsing,
        Task::Landmarks,
        Task::HeadPose,
        Task::Attributes,
        Task::Age,
        Task::Gender,
        Task::Race,
        Task::Expression,
        Task::Recognition,
        Task::Visibility,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Parsing => "parsing",
            Task::Landmarks => "landmarks",
            Task::HeadPose => "headpose",
            Task::Attributes => "attributes",
            Task::Age => "age",
            Task::Gender => "gender",
            Task::Race => "race",
            Task::Expression => "expression",
            Task::Recognition => "recognition",
            Task::Visibility => "visibility",
        }
    }

    pub fn index(self) -> usize {
        Task::ALL.iter().position(|&t| t == self).expect("listed")
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown task `{s}`")))
    }
}
