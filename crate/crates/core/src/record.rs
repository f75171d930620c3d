use std::fmt;

use serde::{Deserialize, Serialize};

use crate::volume::{PathologyMask, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Healthy,
    Pathological,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Healthy => "healthy",
            Domain::Pathological => "pathological",
        })
    }
}

impl std::str::FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "healthy" => Ok(Domain::Healthy),
            "pathological" => Ok(Domain::Pathological),
            other => Err(format!("unknown domain tag `{other}`")),
        }
    }
}

/// One subject: image, lesion mask, domain tag and id.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord<T> {
    pub volume: Volume<T>,
    pub mask: PathologyMask,
    pub domain: Domain,
    pub subject_id: String,
}
