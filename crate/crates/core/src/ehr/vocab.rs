use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Disease,
    Procedure,
    Medication,
}

impl EntityKind {
    pub fn label(&self) -> &'static str {
        match self {
            EntityKind::Disease => "disease",
            EntityKind::Procedure => "procedure",
            EntityKind::Medication => "medication",
        }
    }
}

/// Code list for one entity kind. Ordinals are assigned by declaration
/// order, so the same input file always yields the same indexing.
#[derive(Debug, Clone)]
pub struct EntityVocab {
    kind: EntityKind,
    codes: Vec<String>,
    index: HashMap<String, usize>,
}

impl EntityVocab {
    pub fn new<S: AsRef<str>>(kind: EntityKind, codes: &[S]) -> Result<Self> {
        let mut index = HashMap::with_capacity(codes.len());
        let mut owned = Vec::with_capacity(codes.len());
        for code in codes {
            let code = code.as_ref();
            if code.is_empty() {
                return Err(Error::Validation(format!("empty {} code", kind.label())));
            }
            if index.insert(code.to_string(), owned.len()).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate {} code {:?}",
                    kind.label(),
                    code
                )));
            }
            owned.push(code.to_string());
        }
        Ok(EntityVocab { kind, codes: owned, index })
    }

    pub fn kind(&self) -> EntityKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn code(&self, ordinal: usize) -> &str {
        &self.codes[ordinal]
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn ordinal(&self, code: &str) -> Option<usize> {
        self.index.get(code).copied()
    }

    /// Lookup that reports the offending code on failure.
    pub fn require(&self, code: &str) -> Result<usize> {
        self.ordinal(code).ok_or_else(|| {
            Error::Validation(format!("unknown {} code {:?}", self.kind.label(), code))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assigns_ordinals_in_declaration_order() {
        let v = EntityVocab::new(EntityKind::Medication, &["b", "a", "c"]).unwrap();
        assert_eq!(v.ordinal("b"), Some(0));
        assert_eq!(v.ordinal("a"), Some(1));
        assert_eq!(v.code(2), "c");
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn rejects_duplicates_and_names_them() {
        let err = EntityVocab::new(EntityKind::Disease, &["x", "x"]).unwrap_err();
        assert!(err.to_string().contains("\"x\""));
    }

    #[test]
    fn unknown_code_error_names_the_code() {
        let v = EntityVocab::new(EntityKind::Procedure, &["p0"]).unwrap();
        let err = v.require("nope").unwrap_err();
        assert!(err.to_string().contains("\"nope\""));
        assert!(err.to_string().contains("procedure"));
    }
}
