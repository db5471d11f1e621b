//! SQLite records plus filesystem blobs under the data directory.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rusqlite::{params, Connection, OptionalExtension};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

pub const DB_FILE: &str = "lyricmuse.sqlite3";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub filename: String,
    pub duration: f64,
    pub peak_db: f64,
    /// Blob path of the embedding, relative to the data directory.
    pub embedding_ref: String,
    pub created_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FavoriteRecord {
    pub favorite_id: String,
    pub clip_id: String,
    pub line: String,
    pub created_at: String,
}

pub struct Store {
    conn: Mutex<Connection>,
    root: PathBuf,
}

fn io_err(path: &Path, e: std::io::Error) -> ServiceError {
    ServiceError::Internal(format!("{}: {e}", path.display()))
}

impl Store {
    pub fn open(data_dir: &Path) -> Result<Self> {
        for sub in ["audio", "spectrograms", "embeddings"] {
            let dir = data_dir.join(sub);
            std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        }
        let conn = Connection::open(data_dir.join(DB_FILE))?;
        conn.execute_batch(
            "CREATE TABLE IF NOT EXISTS clips (
                 clip_id TEXT PRIMARY KEY,
                 filename TEXT NOT NULL,
                 duration REAL NOT NULL,
                 peak_db REAL NOT NULL,
                 embedding_ref TEXT NOT NULL,
                 created_at TEXT NOT NULL
             );
             CREATE TABLE IF NOT EXISTS favorites (
                 favorite_id TEXT PRIMARY KEY,
                 clip_id TEXT NOT NULL REFERENCES clips(clip_id),
                 line TEXT NOT NULL,
                 created_at TEXT NOT NULL
             );",
        )?;
        Ok(Self {
            conn: Mutex::new(conn),
            root: data_dir.to_path_buf(),
        })
    }

    fn conn(&self) -> std::sync::MutexGuard<'_, Connection> {
        self.conn.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write_blob(&self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        std::fs::write(&path, bytes).map_err(|e| io_err(&path, e))
    }

    pub fn read_blob(&self, rel: &str) -> Result<Vec<u8>> {
        let path = self.root.join(rel);
        std::fs::read(&path).map_err(|e| io_err(&path, e))
    }

    pub fn insert_clip(&self, r: &ClipRecord) -> Result<()> {
        self.conn().execute(
            "INSERT INTO clips (clip_id, filename, duration, peak_db, embedding_ref, created_at)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
            params![r.clip_id, r.filename, r.duration, r.peak_db, r.embedding_ref, r.created_at],
        )?;
        Ok(())
    }

    pub fn get_clip(&self, clip_id: &str) -> Result<Option<ClipRecord>> {
        Ok(self
            .conn()
            .query_row(
                "SELECT clip_id, filename, duration, peak_db, embedding_ref, created_at FROM clips WHERE clip_id = ?1",
                params![clip_id],
                clip_row,
            )
            .optional()?)
    }

    pub fn list_clips(&self) -> Result<Vec<ClipRecord>> {
        let conn = self.conn();
        let mut stmt = conn.prepare(
            "SELECT clip_id, filename, duration, peak_db, embedding_ref, created_at FROM clips ORDER BY rowid",
        )?;
        let rows = stmt.query_map([], clip_row)?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    pub fn insert_favorite(&self, r: &FavoriteRecord) -> Result<()> {
        self.conn().execute(
            "INSERT INTO favorites (favorite_id, clip_id, line, created_at) VALUES (?1, ?2, ?3, ?4)",
            params![r.favorite_id, r.clip_id, r.line, r.created_at],
        )?;
        Ok(())
    }

    pub fn list_favorites(&self) -> Result<Vec<FavoriteRecord>> {
        let conn = self.conn();
        let mut stmt =
            conn.prepare("SELECT favorite_id, clip_id, line, created_at FROM favorites ORDER BY rowid")?;
        let rows = stmt.query_map([], |row| {
            Ok(FavoriteRecord {
                favorite_id: row.get(0)?,
                clip_id: row.get(1)?,
                line: row.get(2)?,
                created_at: row.get(3)?,
            })
        })?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    pub fn load_embedding(&self, clip: &ClipRecord) -> Result<Vec<f64>> {
        let bytes = self.read_blob(&clip.embedding_ref)?;
        serde_json::from_slice(&bytes).map_err(|e| ServiceError::Internal(format!("corrupt embedding blob: {e}")))
    }
}

fn clip_row(row: &rusqlite::Row<'_>) -> rusqlite::Result<ClipRecord> {
    Ok(ClipRecord {
        clip_id: row.get(0)?,
        filename: row.get(1)?,
        duration: row.get(2)?,
        peak_db: row.get(3)?,
        embedding_ref: row.get(4)?,
        created_at: row.get(5)?,
    })
}
