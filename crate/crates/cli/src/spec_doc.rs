//! Versioned JSON documents for network specs.

use std::path::Path;

use robustnet_core::arch::NetworkSpec;
use serde::{Deserialize, Serialize};

use crate::error::{IoError, Result};
use crate::fsutil::{read_string, write_atomic};

pub const SPEC_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecDocument {
    pub schema_version: u32,
    pub spec: NetworkSpec,
}

pub fn spec_to_json(spec: &NetworkSpec) -> Result<String> {
    let doc = SpecDocument { schema_version: SPEC_SCHEMA_VERSION, spec: spec.clone() };
    Ok(serde_json::to_string_pretty(&doc)?)
}

/// Parses and validates a spec document. Every failed invariant is reported.
pub fn spec_from_json(text: &str) -> Result<NetworkSpec> {
    let doc: SpecDocument = serde_json::from_str(text)?;
    if doc.schema_version != SPEC_SCHEMA_VERSION {
        return Err(IoError::Format(format!(
            "spec schema version {} is not supported (expected {SPEC_SCHEMA_VERSION})",
            doc.schema_version
        )));
    }
    doc.spec.validate()?;
    Ok(doc.spec)
}

pub fn load_spec(path: &Path) -> Result<NetworkSpec> {
    spec_from_json(&read_string(path)?)
}

pub fn save_spec(path: &Path, spec: &NetworkSpec) -> Result<()> {
    write_atomic(path, spec_to_json(spec)?.as_bytes())
}
