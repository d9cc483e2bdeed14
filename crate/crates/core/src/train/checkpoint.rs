use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainReport;
use crate::error::{Error, Result};
use crate::nets::archive::{self, DType};
use crate::nets::ParameterStore;

/// Writes float64 NTA so that a reload is bit-identical.
pub fn save_checkpoint(params: &ParameterStore, path: &Path) -> Result<()> {
    archive::write(params, path, DType::F64)
}

pub fn save_report(report: &TrainReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    /// Template tensors replaced from the archive.
    pub loaded: Vec<String>,
    /// Archive tensors absent from the template or of a different shape.
    pub skipped: Vec<String>,
    /// Template tensors the archive did not provide; left as initialized.
    pub untouched: Vec<String>,
}

/// Loads an archive into a copy of `template`. Strict mode demands identical
/// names and shapes; otherwise only the name-and-shape intersection is
/// replaced.
pub fn load_pretrained(template: &ParameterStore, path: &Path, strict: bool) -> Result<(ParameterStore, LoadReport)> {
    let loaded = archive::read(path)?;
    let mut out = template.clone();
    let mut report = LoadReport::default();
    for (name, t) in loaded.iter() {
        match template.get(name) {
            Some(current) if current.shape() == t.shape() => {
                out.set(name, t.clone())?;
                report.loaded.push(name.to_string());
            }
            Some(current) => {
                if strict {
                    return Err(Error::StrictMismatch {
                        name: name.to_string(),
                        message: format!("archive shape {:?}, model shape {:?}", t.shape(), current.shape()),
                    });
                }
                report.skipped.push(name.to_string());
            }
            None => {
                if strict {
                    return Err(Error::StrictMismatch { name: name.to_string(), message: "not in the model".into() });
                }
                report.skipped.push(name.to_string());
            }
        }
    }
    for name in template.names() {
        if !loaded.contains(name) {
            if strict {
                return Err(Error::StrictMismatch { name: name.to_string(), message: "missing from the archive".into() });
            }
            report.untouched.push(name.to_string());
        }
    }
    Ok((out, report))
}
