//! Identifiers for user equipment and applications.
//!
//! Both travel inside space-separated `key=value` wire records, so they are
//! restricted to a conservative character set.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_ID_LEN: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid identifier {0:?}: expected 1-64 characters from [A-Za-z0-9._:-]")]
pub struct IdError(pub String);

fn check(s: &str) -> Result<(), IdError> {
    let ok = !s.is_empty()
        && s.len() <= MAX_ID_LEN
        && s.bytes()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, b'.' | b'_' | b':' | b'-'));
    if ok {
        Ok(())
    } else {
        Err(IdError(s.to_owned()))
    }
}

macro_rules! id_type {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(try_from = "String", into = "String")]
        pub struct $name(String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Result<Self, IdError> {
                let s = s.into();
                check(&s)?;
                Ok(Self(s))
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl std::str::FromStr for $name {
            type Err = IdError;
            fn from_str(s: &str) -> Result<Self, IdError> {
                Self::new(s)
            }
        }

        impl TryFrom<String> for $name {
            type Error = IdError;
            fn try_from(s: String) -> Result<Self, IdError> {
                Self::new(s)
            }
        }

        impl From<$name> for String {
            fn from(id: $name) -> String {
                id.0
            }
        }
    };
}

id_type!(
    /// User equipment (a phone, in the testbed).
    UeId
);
id_type!(
    /// One application flow; unique across the whole allocation problem.
    AppId
);
