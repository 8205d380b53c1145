//! Output directories: exclusive lock for the run, deterministic artifacts,
//! and a separate timestamped log.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};

pub const LOCK_FILE: &str = ".kdlab.lock";
pub const LOG_FILE: &str = "run.log";

pub struct OutDir {
    root: PathBuf,
    lock: PathBuf,
    log: File,
    started: Instant,
}

impl OutDir {
    pub fn open(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        let lock = root.join(LOCK_FILE);
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .with_context(|| format!("output directory {} is locked by another run", root.display()))?;
        let log = match OpenOptions::new().create(true).append(true).open(root.join(LOG_FILE)) {
            Ok(f) => f,
            Err(e) => {
                let _ = std::fs::remove_file(&lock);
                return Err(e).context("opening run log");
            }
        };
        Ok(Self { root: root.to_path_buf(), lock, log, started: Instant::now() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.path(name);
        std::fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    /// Appends a line with wall-clock and elapsed time to the run log.
    pub fn log(&mut self, message: &str) {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let _ = writeln!(self.log, "[{now} +{:.1}s] {message}", self.started.elapsed().as_secs_f64());
        log::info!("{message}");
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.lock);
    }
}
