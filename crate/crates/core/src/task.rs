use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Recognition task a question probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Task {
    /// Action recognition.
    AR,
    /// Character recognition.
    CR,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::AR, Task::CR];

    pub fn as_str(&self) -> &'static str {
        match self {
            Task::AR => "AR",
            Task::CR => "CR",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "AR" => Ok(Task::AR),
            "CR" => Ok(Task::CR),
            other => Err(format!("unknown task `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QaFormat {
    Binary,
    Mc,
    Oe,
}

impl QaFormat {
    pub const ALL: [QaFormat; 3] = [QaFormat::Binary, QaFormat::Mc, QaFormat::Oe];

    pub fn as_str(&self) -> &'static str {
        match self {
            QaFormat::Binary => "binary",
            QaFormat::Mc => "mc",
            QaFormat::Oe => "oe",
        }
    }

    /// N-gram order used for ROUGE on this format.
    pub fn rouge_order(&self) -> usize {
        match self {
            QaFormat::Binary => 2,
            QaFormat::Mc | QaFormat::Oe => 3,
        }
    }
}

impl fmt::Display for QaFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QaFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "binary" => Ok(QaFormat::Binary),
            "mc" => Ok(QaFormat::Mc),
            "oe" => Ok(QaFormat::Oe),
            other => Err(format!("unknown format `{other}`")),
        }
    }
}

/// Every (task, format) stratum in canonical order.
pub fn strata() -> impl Iterator<Item = (Task, QaFormat)> {
    Task::ALL
        .into_iter()
        .flat_map(|t| QaFormat::ALL.into_iter().map(move |f| (t, f)))
}
