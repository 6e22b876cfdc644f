//! Outputs are staged in memory and only written once a command succeeds,
//! each file through a temporary sibling and a rename.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::CliError;

pub struct Staged {
    dir: PathBuf,
    files: Vec<(String, Vec<u8>)>,
}

impl Staged {
    pub fn new(dir: &Path) -> Self {
        Staged { dir: dir.to_path_buf(), files: Vec::new() }
    }

    pub fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    pub fn path_of(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn commit(self) -> Result<Vec<PathBuf>, CliError> {
        fs::create_dir_all(&self.dir).map_err(|e| CliError::file(&self.dir, e))?;
        let mut written = Vec::with_capacity(self.files.len());
        for (name, bytes) in &self.files {
            let path = self.dir.join(name);
            let tmp = self.dir.join(format!(".{name}.tmp"));
            let mut f = fs::File::create(&tmp).map_err(|e| CliError::file(&tmp, e))?;
            f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| CliError::file(&tmp, e))?;
            fs::rename(&tmp, &path).map_err(|e| CliError::file(&path, e))?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Output names are bare file names inside `--out`.
pub fn check_name(key: &str, name: &str) -> Result<(), CliError> {
    let bad = name.is_empty()
        || name.starts_with('.')
        || name.contains('/')
        || name.contains('\\')
        || name == "..";
    if bad {
        return Err(CliError::schema(key, format!("'{name}' must be a plain file name")));
    }
    Ok(())
}
