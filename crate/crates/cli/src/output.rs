use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use explorer_core::fmt::sig12;
use serde::Serialize;
use serde_json::Value;

/// A CSV cell: numbers go through the 12-significant-digit formatter.
#[derive(Debug, Clone)]
pub enum Cell {
    Num(f64),
    Int(u64),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Num(v) => sig12(*v),
            Cell::Int(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FileEntry {
    pub name: String,
    pub rows: usize,
    pub columns: Vec<String>,
}

/// Collects files written into one output directory for the manifest.
pub struct OutputDir {
    root: PathBuf,
    files: Vec<FileEntry>,
}

impl OutputDir {
    pub fn create(root: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    /// RFC-4180 table with a header row and LF line endings.
    pub fn write_table(&mut self, name: &str, header: &[&str], rows: &[Vec<Cell>]) -> std::io::Result<()> {
        let file = File::create(self.root.join(name))?;
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(BufWriter::new(file));
        w.write_record(header)?;
        for row in rows {
            debug_assert_eq!(row.len(), header.len());
            w.write_record(row.iter().map(Cell::render))?;
        }
        w.flush()?;
        self.record(name, rows.len(), header.iter().map(|h| h.to_string()).collect());
        Ok(())
    }

    /// Runs a writer that produces its own CSV, then counts its rows.
    pub fn write_with<F>(&mut self, name: &str, f: F) -> std::io::Result<()>
    where
        F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
    {
        let path = self.root.join(name);
        let mut w = BufWriter::new(File::create(&path)?);
        f(&mut w)?;
        w.flush()?;
        drop(w);
        let text = std::fs::read_to_string(&path)?;
        let mut lines = text.lines();
        let columns = lines.next().unwrap_or_default().split(',').map(str::to_string).collect();
        self.record(name, lines.count(), columns);
        Ok(())
    }

    fn record(&mut self, name: &str, rows: usize, columns: Vec<String>) {
        self.files.push(FileEntry {
            name: name.to_string(),
            rows,
            columns,
        });
    }

    pub fn files(&self) -> &[FileEntry] {
        &self.files
    }
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a, C: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub experiment: &'static str,
    pub seeds: &'a [u64],
    pub config: &'a C,
    pub files: &'a [FileEntry],
    pub summary: Value,
}

pub fn write_manifest<C: Serialize>(dir: &Path, manifest: &Manifest<'_, C>) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(manifest).map_err(std::io::Error::other)?;
    text.push('\n');
    std::fs::write(dir.join("manifest.json"), text)
}

/// Stable file-name fragment for a number, e.g. `0.01` or `1e-5`.
pub fn tag(v: f64) -> String {
    sig12(v)
}
