//! Output directories: run configuration, completion marker and atomic writes.

use std::fs;
use std::path::{Path, PathBuf};

use disentangle::{Error, Result};
use serde::Serialize;

pub const RUN_CONFIG: &str = "run_config.toml";
pub const COMPLETE: &str = ".complete";

/// What to do with an output directory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Prepared {
    /// A previous run finished; nothing to do.
    Complete,
    /// The directory is empty and ready.
    Fresh,
    /// An unfinished run of ours is present and kept for resuming.
    Partial,
}

pub struct OutDir {
    pub root: PathBuf,
}

impl OutDir {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn is_complete(&self) -> bool {
        self.path(COMPLETE).is_file()
    }

    /// Makes the directory ready for a run.
    ///
    /// A directory that has content but no run configuration is never
    /// touched. With `keep_partial`, an unfinished run is left in place;
    /// otherwise it is cleared.
    pub fn prepare(&self, overwrite: bool, keep_partial: bool) -> Result<Prepared> {
        if !self.root.exists() {
            fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
            return Ok(Prepared::Fresh);
        }
        if !self.root.is_dir() {
            return Err(Error::Config(format!("{} is not a directory", self.root.display())));
        }
        let empty = fs::read_dir(&self.root)
            .map_err(|e| Error::io(&self.root, e))?
            .next()
            .is_none();
        if empty {
            return Ok(Prepared::Fresh);
        }
        if self.is_complete() && !overwrite {
            return Ok(Prepared::Complete);
        }
        if !self.path(RUN_CONFIG).is_file() {
            return Err(Error::Config(format!(
                "{} is not empty and holds no previous run; refusing to write there",
                self.root.display()
            )));
        }
        if keep_partial && !overwrite {
            return Ok(Prepared::Partial);
        }
        fs::remove_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        Ok(Prepared::Fresh)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.path(name);
        let tmp = self.path(&format!(".{name}.tmp"));
        fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    pub fn write_toml<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        self.write(name, to_toml(value)?)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
            context: name.into(),
            source: e,
        })?;
        self.write(name, text + "\n")
    }

    pub fn mark_complete(&self, command: &str) -> Result<()> {
        self.write(COMPLETE, format!("{command}\n"))
    }
}

pub fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string_pretty(value).map_err(|e| Error::Config(format!("cannot serialize configuration: {e}")))
}
