//! Line-delimited JSON readers and writers for corpus, QA and noise files.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAExample {
    pub question: String,
    pub answers: Vec<String>,
    #[serde(default)]
    pub gold_chunk_ids: Vec<String>,
    pub split: Split,
}

/// Parses one JSON record per non-blank line, reporting the 1-based line
/// number of the first malformed one.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads `{doc_id, text}` records; duplicate ids are a data error.
pub fn load_corpus(path: &Path) -> Result<Vec<Document>> {
    let docs: Vec<Document> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    for d in &docs {
        if !seen.insert(d.doc_id.as_str()) {
            return Err(Error::Data(format!("{}: duplicate doc_id {}", path.display(), d.doc_id)));
        }
    }
    Ok(docs)
}

/// Reads `{question, answers[], gold_chunk_ids[], split}` records.
pub fn load_dataset(path: &Path) -> Result<Vec<QAExample>> {
    let examples: Vec<QAExample> = read_jsonl(path)?;
    if let Some((i, _)) = examples.iter().enumerate().find(|(_, e)| e.answers.is_empty()) {
        return Err(Error::Data(format!("{}: example {} has no answers", path.display(), i + 1)));
    }
    Ok(examples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("qa.jsonl");
        std::fs::write(&p, "").unwrap();
        assert!(load_dataset(&p).unwrap().is_empty());
    }

    #[test]
    fn one_line_one_example() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("qa.jsonl");
        std::fs::write(
            &p,
            r#"{"question":"q?","answers":["a"],"gold_chunk_ids":["d#0"],"split":"test"}"#,
        )
        .unwrap();
        let ex = load_dataset(&p).unwrap();
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].split, Split::Test);
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        std::fs::write(&p, "{\"doc_id\":\"a\",\"text\":\"x\"}\n{oops\n").unwrap();
        match load_corpus(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_doc_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let d = Document { doc_id: "a".into(), text: "x".into() };
        write_jsonl(&p, &[d.clone(), d]).unwrap();
        assert!(matches!(load_corpus(&p), Err(Error::Data(_))));
    }
}
