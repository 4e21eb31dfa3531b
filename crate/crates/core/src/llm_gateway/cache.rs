use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

/// One cache record as stored on disk. `created_at` is seconds since the Unix epoch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub response: String,
    pub created_at: u64,
}

/// Append-only response cache backed by a JSON Lines file.
///
/// Later records win over earlier ones with the same key. A truncated final line
/// (from an interrupted write) is skipped on load.
pub struct ResponseCache {
    path: Option<PathBuf>,
    entries: Mutex<HashMap<String, String>>,
    writer: Mutex<Option<File>>,
}

impl ResponseCache {
    pub fn open(path: impl AsRef<Path>) -> io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let mut entries = HashMap::new();
        let mut needs_newline = false;
        if path.exists() {
            needs_newline = fs::read(&path)?.last().is_some_and(|b| *b != b'\n');
            let reader = BufReader::new(File::open(&path)?);
            for line in reader.lines() {
                let line = line?;
                match serde_json::from_str::<CacheEntry>(&line) {
                    Ok(e) => {
                        entries.insert(e.key, e.response);
                    }
                    Err(err) if !line.trim().is_empty() => {
                        log::warn!("{}: skipping unreadable cache record: {err}", path.display());
                    }
                    Err(_) => {}
                }
            }
        }
        let mut file = OpenOptions::new().create(true).append(true).open(&path)?;
        if needs_newline {
            file.write_all(b"\n")?;
        }
        Ok(ResponseCache { path: Some(path), entries: Mutex::new(entries), writer: Mutex::new(Some(file)) })
    }

    /// A cache that lives only for the process.
    pub fn in_memory() -> Self {
        ResponseCache { path: None, entries: Mutex::new(HashMap::new()), writer: Mutex::new(None) }
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.entries.lock().unwrap().get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&self, key: &str, response: &str) -> io::Result<()> {
        let created_at = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let entry = CacheEntry { key: key.to_string(), response: response.to_string(), created_at };
        {
            let mut writer = self.writer.lock().unwrap();
            if let Some(file) = writer.as_mut() {
                let mut line = serde_json::to_string(&entry).expect("cache entry serializes");
                line.push('\n');
                file.write_all(line.as_bytes())?;
                file.flush()?;
            }
        }
        self.entries.lock().unwrap().insert(entry.key, entry.response);
        Ok(())
    }
}
