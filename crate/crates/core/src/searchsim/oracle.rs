//! Brute-force reference manager: every checkpoint is a deep copy and every
//! restore replaces the whole state. No sharing anywhere.

use std::collections::{BTreeMap, BTreeSet};

use crate::layerfs::FsError;
use crate::procstate::PAGE_SIZE;

/// Complete sandbox state in plain maps.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OracleState {
    pub files: BTreeMap<String, Vec<u8>>,
    /// Explicitly created directories. Parents of files are implied.
    pub dirs: BTreeSet<String>,
    pub pages: BTreeMap<u64, Vec<u8>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    File,
    Dir,
    Missing,
}

fn normalize(path: &str) -> Result<String, FsError> {
    if !path.starts_with('/') {
        return Err(FsError::InvalidPath(path.to_string()));
    }
    let parts: Vec<&str> = path.split('/').filter(|c| !c.is_empty()).collect();
    if parts.iter().any(|c| *c == "." || *c == "..") {
        return Err(FsError::InvalidPath(path.to_string()));
    }
    Ok(format!("/{}", parts.join("/")))
}

impl OracleState {
    fn kind(&self, path: &str) -> Kind {
        if path == "/" || self.dirs.contains(path) {
            return Kind::Dir;
        }
        if self.files.contains_key(path) {
            return Kind::File;
        }
        let prefix = format!("{path}/");
        let below = |p: &String| p.starts_with(&prefix);
        if self.files.keys().any(below) || self.dirs.iter().any(below) {
            Kind::Dir
        } else {
            Kind::Missing
        }
    }

    fn check_parents(&self, path: &str) -> Result<(), FsError> {
        let mut cur = path;
        while let Some(i) = cur.rfind('/') {
            if i == 0 {
                break;
            }
            cur = &cur[..i];
            if self.files.contains_key(cur) {
                return Err(FsError::NotADirectory(cur.to_string()));
            }
        }
        Ok(())
    }

    pub fn write_file(&mut self, path: &str, offset: u64, data: &[u8]) -> Result<(), FsError> {
        let path = normalize(path)?;
        match self.kind(&path) {
            Kind::Dir => return Err(FsError::IsDirectory(path)),
            Kind::Missing => self.check_parents(&path)?,
            Kind::File => {}
        }
        let buf = self.files.entry(path).or_default();
        let start = offset as usize;
        let end = start + data.len();
        if buf.len() < end {
            buf.resize(end, 0);
        }
        buf[start..end].copy_from_slice(data);
        Ok(())
    }

    pub fn read_file(&self, path: &str) -> Result<Vec<u8>, FsError> {
        let path = normalize(path)?;
        match self.kind(&path) {
            Kind::File => Ok(self.files[&path].clone()),
            Kind::Dir => Err(FsError::IsDirectory(path)),
            Kind::Missing => Err(FsError::NotFound(path)),
        }
    }

    pub fn unlink(&mut self, path: &str) -> Result<(), FsError> {
        let path = normalize(path)?;
        match self.kind(&path) {
            Kind::File => {
                self.files.remove(&path);
                Ok(())
            }
            Kind::Dir => Err(FsError::IsDirectory(path)),
            Kind::Missing => Err(FsError::NotFound(path)),
        }
    }

    pub fn mkdir(&mut self, path: &str) -> Result<(), FsError> {
        let path = normalize(path)?;
        if self.kind(&path) != Kind::Missing {
            return Err(FsError::AlreadyExists(path));
        }
        self.check_parents(&path)?;
        self.dirs.insert(path);
        Ok(())
    }

    pub fn mem_write(&mut self, page: u64, offset: usize, data: &[u8]) {
        let p = self.pages.entry(page).or_insert_with(|| vec![0; PAGE_SIZE]);
        p[offset..offset + data.len()].copy_from_slice(data);
    }
}

/// Reference manager holding one deep copy per checkpoint.
#[derive(Clone, Debug, Default)]
pub struct OracleManager {
    cur: OracleState,
    snapshots: Vec<Option<OracleState>>,
}

impl OracleManager {
    /// Starts from `base`, which becomes snapshot 0.
    pub fn new(base: OracleState) -> Self {
        OracleManager {
            snapshots: vec![Some(base.clone())],
            cur: base,
        }
    }

    pub fn state(&self) -> &OracleState {
        &self.cur
    }

    pub fn state_mut(&mut self) -> &mut OracleState {
        &mut self.cur
    }

    pub fn checkpoint(&mut self) -> usize {
        self.snapshots.push(Some(self.cur.clone()));
        self.snapshots.len() - 1
    }

    /// Replaces the current state. Returns false for unknown or dropped ids.
    pub fn restore(&mut self, id: usize) -> bool {
        match self.snapshots.get(id) {
            Some(Some(s)) => {
                self.cur = s.clone();
                true
            }
            _ => false,
        }
    }

    pub fn snapshot(&self, id: usize) -> Option<&OracleState> {
        self.snapshots.get(id).and_then(Option::as_ref)
    }

    pub fn drop_snapshot(&mut self, id: usize) {
        if let Some(s) = self.snapshots.get_mut(id) {
            *s = None;
        }
    }

    pub fn live_snapshots(&self) -> usize {
        self.snapshots.iter().filter(|s| s.is_some()).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_semantics() {
        let mut s = OracleState::default();
        s.write_file("/a/b.txt", 5, b"hi").unwrap();
        assert_eq!(s.read_file("/a/b.txt").unwrap(), b"\0\0\0\0\0hi");
        assert!(matches!(
            s.write_file("/a", 0, b"x"),
            Err(FsError::IsDirectory(_))
        ));
        assert!(matches!(
            s.write_file("/a/b.txt/c", 0, b"x"),
            Err(FsError::NotADirectory(_))
        ));
        assert!(matches!(s.mkdir("/a"), Err(FsError::AlreadyExists(_))));
        assert!(matches!(s.unlink("/a"), Err(FsError::IsDirectory(_))));
        assert!(matches!(s.read_file("/zz"), Err(FsError::NotFound(_))));
        assert!(matches!(s.read_file("rel"), Err(FsError::InvalidPath(_))));
        s.unlink("//a/b.txt/").unwrap();
        assert!(s.files.is_empty());
        s.mkdir("/d").unwrap();
        assert!(matches!(s.unlink("/d"), Err(FsError::IsDirectory(_))));
    }

    #[test]
    fn restore_is_replacement() {
        let mut m = OracleManager::new(OracleState::default());
        m.state_mut().mem_write(3, 10, b"abc");
        let s1 = m.checkpoint();
        m.state_mut().mem_write(3, 10, b"xyz");
        m.state_mut().write_file("/f", 0, b"1").unwrap();
        assert!(m.restore(s1));
        assert_eq!(&m.state().pages[&3][10..13], b"abc");
        assert!(m.state().files.is_empty());
        assert!(m.restore(0));
        assert!(m.state().pages.is_empty());
        m.drop_snapshot(s1);
        assert!(!m.restore(s1));
        assert!(!m.restore(99));
    }
}
