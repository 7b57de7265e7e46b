//! Local blob store keyed by UUID, standing in for a cloud bucket.
//!
//! Every blob is one file named by its canonical UUID under the store root.
//! Writes go through a temporary file and a rename, so concurrent readers
//! never observe a half-written blob.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use uuid::Uuid;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct ObjectStore {
    root: PathBuf,
}

impl ObjectStore {
    /// Opens (creating if needed) a store rooted at `root`.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)
            .map_err(|e| Error::Store(format!("cannot create {}: {e}", root.display())))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_for(&self, key: &str) -> Result<PathBuf> {
        let id = Uuid::parse_str(key).map_err(|_| Error::NotFound(format!("invalid key {key:?}")))?;
        Ok(self.root.join(id.hyphenated().to_string()))
    }

    /// Stores `bytes` under a fresh UUID and returns the key.
    pub fn put(&self, bytes: &[u8]) -> Result<String> {
        let key = Uuid::new_v4().hyphenated().to_string();
        self.put_with_key(&key, bytes)?;
        Ok(key)
    }

    /// Stores `bytes` under `key`. Re-putting identical bytes is a no-op;
    /// putting different bytes under an existing key fails.
    pub fn put_with_key(&self, key: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path_for(key)?;
        match fs::read(&path) {
            Ok(existing) if existing == bytes => return Ok(()),
            Ok(_) => {
                return Err(Error::Store(format!(
                    "key {key} already holds a different blob"
                )))
            }
            Err(e) if e.kind() == ErrorKind::NotFound => {}
            Err(e) => return Err(Error::Store(format!("cannot read {key}: {e}"))),
        }
        let tmp = self.root.join(format!(".tmp-{}", Uuid::new_v4()));
        fs::write(&tmp, bytes).map_err(|e| Error::Store(format!("cannot write {key}: {e}")))?;
        fs::rename(&tmp, &path).map_err(|e| {
            let _ = fs::remove_file(&tmp);
            Error::Store(format!("cannot commit {key}: {e}"))
        })
    }

    pub fn get(&self, key: &str) -> Result<Vec<u8>> {
        let path = self.path_for(key)?;
        fs::read(&path).map_err(|e| match e.kind() {
            ErrorKind::NotFound => Error::NotFound(format!("no blob under key {key}")),
            _ => Error::Store(format!("cannot read {key}: {e}")),
        })
    }

    pub fn contains(&self, key: &str) -> bool {
        self.path_for(key).map(|p| p.is_file()).unwrap_or(false)
    }

    /// Number of committed blobs.
    pub fn len(&self) -> Result<usize> {
        let mut n = 0;
        for entry in fs::read_dir(&self.root)? {
            let name = entry?.file_name();
            if Uuid::parse_str(&name.to_string_lossy()).is_ok() {
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn is_empty(&self) -> Result<bool> {
        Ok(self.len()? == 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_uniqueness() {
        let dir = tempfile::tempdir().unwrap();
        let store = ObjectStore::open(dir.path()).unwrap();
        let a = store.put(b"alpha").unwrap();
        let b = store.put(b"beta").unwrap();
        assert_ne!(a, b);
        assert_eq!(a.len(), 36);
        assert_eq!(store.get(&a).unwrap(), b"alpha");
        assert_eq!(store.get(&b).unwrap(), b"beta");
        assert_eq!(store.len().unwrap(), 2);
    }

    #[test]
    fn no_silent_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let store = ObjectStore::open(dir.path()).unwrap();
        let key = store.put(b"one").unwrap();
        store.put_with_key(&key, b"one").unwrap();
        assert!(matches!(store.put_with_key(&key, b"two"), Err(Error::Store(_))));
        assert_eq!(store.get(&key).unwrap(), b"one");
    }

    #[test]
    fn missing_and_malformed_keys() {
        let dir = tempfile::tempdir().unwrap();
        let store = ObjectStore::open(dir.path()).unwrap();
        let unknown = Uuid::new_v4().to_string();
        assert!(matches!(store.get(&unknown), Err(Error::NotFound(_))));
        assert!(matches!(store.get("../etc/passwd"), Err(Error::NotFound(_))));
        assert!(!store.contains(&unknown));
    }

    #[test]
    fn concurrent_puts_and_gets() {
        let dir = tempfile::tempdir().unwrap();
        let store = ObjectStore::open(dir.path()).unwrap();
        std::thread::scope(|s| {
            for t in 0..8u8 {
                let store = &store;
                s.spawn(move || {
                    for i in 0..20u8 {
                        let blob = vec![t, i, t ^ i];
                        let key = store.put(&blob).unwrap();
                        assert_eq!(store.get(&key).unwrap(), blob);
                    }
                });
            }
        });
        assert_eq!(store.len().unwrap(), 160);
    }
}
