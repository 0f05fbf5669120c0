//! Run manifests embedded in every output file.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::Failure;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputRef {
    pub path: String,
    pub sha256: String,
}

/// Everything that determines the content of an output. Thread counts and
/// output locations are excluded since they do not change results.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub formula: Option<String>,
    pub input: Option<InputRef>,
    pub seed: u64,
    pub options: BTreeMap<String, serde_json::Value>,
    /// From `SOURCE_DATE_EPOCH` when set, so reruns stay byte-identical.
    pub timestamp: Option<String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        Self {
            tool: "transmod".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            formula: None,
            input: None,
            seed,
            options: BTreeMap::new(),
            timestamp: source_date(),
        }
    }

    pub fn input(mut self, path: &Path) -> Result<Self, Failure> {
        let bytes = std::fs::read(path).map_err(|e| Failure::user(format!("cannot read {}: {e}", path.display())))?;
        self.input = Some(InputRef {
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(self)
    }

    pub fn option(mut self, key: &str, value: impl Serialize) -> Self {
        self.options.insert(key.into(), serde_json::to_value(value).expect("option serializes"));
        self
    }

    pub fn compact(&self) -> String {
        serde_json::to_string(self).expect("manifest serializes")
    }
}

fn source_date() -> Option<String> {
    let secs: i64 = std::env::var("SOURCE_DATE_EPOCH").ok()?.trim().parse().ok()?;
    Some(rfc3339(secs))
}

/// UTC timestamp from Unix seconds (proleptic Gregorian calendar).
fn rfc3339(secs: i64) -> String {
    let days = secs.div_euclid(86_400);
    let rem = secs.rem_euclid(86_400);
    let z = days + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z - era * 146_097;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let day = doy - (153 * mp + 2) / 5 + 1;
    let month = if mp < 10 { mp + 3 } else { mp - 9 };
    let year = yoe + era * 400 + i64::from(month <= 2);
    format!(
        "{year:04}-{month:02}-{day:02}T{:02}:{:02}:{:02}Z",
        rem / 3600,
        rem % 3600 / 60,
        rem % 60
    )
}

fn create(path: &Path) -> Result<std::fs::File, Failure> {
    std::fs::File::create(path).map_err(|e| Failure::user(format!("cannot write {}: {e}", path.display())))
}

/// JSON document `{"manifest": …, <payload fields>}`.
pub fn write_json(path: &Path, manifest: &RunManifest, payload: serde_json::Value) -> Result<(), Failure> {
    let mut doc = serde_json::Map::new();
    doc.insert("manifest".into(), serde_json::to_value(manifest).expect("manifest serializes"));
    match payload {
        serde_json::Value::Object(fields) => doc.extend(fields),
        other => {
            doc.insert("result".into(), other);
        }
    }
    let mut text = serde_json::to_string_pretty(&serde_json::Value::Object(doc)).expect("document serializes");
    text.push('\n');
    create(path)?
        .write_all(text.as_bytes())
        .map_err(|e| Failure::user(format!("cannot write {}: {e}", path.display())))
}

/// Text or CSV output preceded by a `# manifest:` comment line.
pub fn write_text(path: &Path, manifest: &RunManifest, body: &[u8]) -> Result<(), Failure> {
    let mut out = format!("# manifest: {}\n", manifest.compact()).into_bytes();
    out.extend_from_slice(body);
    create(path)?
        .write_all(&out)
        .map_err(|e| Failure::user(format!("cannot write {}: {e}", path.display())))
}
