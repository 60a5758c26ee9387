use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Object category. Small integers; 1–3 are the reserved super-classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u16);

impl ClassId {
    pub const VEHICLE: ClassId = ClassId(1);
    pub const PEDESTRIAN: ClassId = ClassId(2);
    pub const CYCLIST: ClassId = ClassId(3);

    pub const DEFAULTS: [ClassId; 3] = [Self::VEHICLE, Self::PEDESTRIAN, Self::CYCLIST];

    /// Name of a reserved class, if any.
    pub fn name(self) -> Option<&'static str> {
        match self {
            Self::VEHICLE => Some("vehicle"),
            Self::PEDESTRIAN => Some("pedestrian"),
            Self::CYCLIST => Some("cyclist"),
            _ => None,
        }
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown class `{0}`")]
pub struct UnknownClass(pub String);

impl FromStr for ClassId {
    type Err = UnknownClass;

    /// Accepts a numeric id or one of the reserved names (`car` aliases `vehicle`).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Ok(n) = s.parse::<u16>() {
            return Ok(ClassId(n));
        }
        match s.to_ascii_lowercase().as_str() {
            "vehicle" | "car" => Ok(Self::VEHICLE),
            "pedestrian" => Ok(Self::PEDESTRIAN),
            "cyclist" => Ok(Self::CYCLIST),
            _ => Err(UnknownClass(s.to_string())),
        }
    }
}
