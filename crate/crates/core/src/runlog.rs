use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Line log for a run. Lines are kept in memory and, when a file is
/// attached, appended to it as they arrive.
#[derive(Debug, Default)]
pub struct RunLog {
    file: Option<File>,
    pub lines: Vec<String>,
    pub echo: bool,
}

impl RunLog {
    pub fn memory() -> Self {
        RunLog::default()
    }

    pub fn to_file(path: &Path, echo: bool) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(RunLog { file: Some(file), lines: Vec::new(), echo })
    }

    pub fn log(&mut self, line: impl Into<String>) {
        let line = line.into();
        if self.echo {
            eprintln!("{line}");
        }
        if let Some(f) = self.file.as_mut() {
            // A failed log write must not abort training.
            let _ = writeln!(f, "{line}");
        }
        self.lines.push(line);
    }
}
