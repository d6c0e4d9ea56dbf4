//! Append-only JSON-lines store backing the in-memory index. Each line is
//! one committed transaction; a torn final line is discarded on replay.

use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Serialize};

use super::ArchiveError;

pub(crate) struct Journal {
    path: PathBuf,
    file: File,
}

impl Journal {
    /// Opens or creates the journal and returns it with every committed entry.
    pub(crate) fn open<T: DeserializeOwned>(path: &Path) -> Result<(Journal, Vec<T>), ArchiveError> {
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)?;
        let mut text = Vec::new();
        file.read_to_end(&mut text)?;
        let committed = text.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        if committed < text.len() {
            tracing::warn!(path = %path.display(), dropped = text.len() - committed, "discarding torn journal tail");
            file.set_len(committed as u64)?;
            file.sync_all()?;
        }
        let mut entries = Vec::new();
        for (n, line) in text[..committed].split(|&b| b == b'\n').enumerate() {
            if line.is_empty() {
                continue;
            }
            let entry = serde_json::from_slice(line).map_err(|e| {
                ArchiveError::Corrupt(format!("{} line {}: {e}", path.display(), n + 1))
            })?;
            entries.push(entry);
        }
        file.seek(SeekFrom::End(0))?;
        Ok((
            Journal {
                path: path.to_path_buf(),
                file,
            },
            entries,
        ))
    }

    /// Appends one entry and waits for it to reach stable storage.
    pub(crate) fn append<T: Serialize>(&mut self, entry: &T) -> Result<(), ArchiveError> {
        let mut line = serde_json::to_vec(entry).map_err(|e| ArchiveError::Corrupt(e.to_string()))?;
        line.push(b'\n');
        let before = self.file.metadata()?.len();
        if let Err(e) = self.file.write_all(&line).and_then(|_| self.file.sync_data()) {
            // The next append must start on a line boundary.
            let _ = self.file.set_len(before);
            return Err(e.into());
        }
        Ok(())
    }

    pub(crate) fn path(&self) -> &Path {
        &self.path
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn torn_tail_is_discarded() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j.jsonl");
        {
            let (mut j, e) = Journal::open::<u32>(&path).unwrap();
            assert!(e.is_empty());
            j.append(&1u32).unwrap();
            j.append(&2u32).unwrap();
        }
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"3").unwrap();
        drop(f);
        let (mut j, e) = Journal::open::<u32>(&path).unwrap();
        assert_eq!(e, vec![1, 2]);
        j.append(&4u32).unwrap();
        drop(j);
        assert_eq!(Journal::open::<u32>(&path).unwrap().1, vec![1, 2, 4]);
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j.jsonl");
        std::fs::write(&path, b"1\nnot json\n3\n").unwrap();
        assert!(matches!(Journal::open::<u32>(&path), Err(ArchiveError::Corrupt(_))));
    }
}
