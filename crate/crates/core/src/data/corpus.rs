use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ItemId = u64;

/// One catalog entry: id, two modality feature vectors and generation targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: ItemId,
    pub feat_txt: Vec<f64>,
    pub feat_img: Vec<f64>,
    /// Visual-keyword class.
    pub vk: usize,
    /// Category set, kept sorted ascending.
    pub cats: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub sid: u64,
    pub items: Vec<ItemId>,
}

/// Items sorted by id plus chronological sessions over them.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    items: Vec<Item>,
    sessions: Vec<Session>,
    index: HashMap<ItemId, usize>,
}

impl Corpus {
    pub fn new(mut items: Vec<Item>, sessions: Vec<Session>) -> Result<Self> {
        items.sort_by_key(|i| i.id);
        let mut index = HashMap::with_capacity(items.len());
        for (pos, it) in items.iter_mut().enumerate() {
            if index.insert(it.id, pos).is_some() {
                return Err(Error::Config(format!("duplicate item id {}", it.id)));
            }
            it.cats.sort_unstable();
        }
        if let Some(first) = items.first() {
            let (dt, di, kc) = (first.feat_txt.len(), first.feat_img.len(), first.cats.len());
            for it in &items {
                if it.feat_txt.len() != dt || it.feat_img.len() != di {
                    return Err(Error::shape(
                        format!("features of item {}", it.id),
                        format!("txt {dt} / img {di}"),
                        format!("txt {} / img {}", it.feat_txt.len(), it.feat_img.len()),
                    ));
                }
                if it.cats.len() != kc {
                    return Err(Error::shape(format!("categories of item {}", it.id), kc, it.cats.len()));
                }
                if it.feat_txt.iter().chain(&it.feat_img).any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("features of item {}", it.id)));
                }
            }
        }
        for s in &sessions {
            for &i in &s.items {
                if !index.contains_key(&i) {
                    return Err(Error::Referential {
                        item: i,
                        context: format!("session {}", s.sid),
                    });
                }
            }
        }
        Ok(Self { items, sessions, index })
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn sessions(&self) -> &[Session] {
        &self.sessions
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn num_sessions(&self) -> usize {
        self.sessions.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.sessions.iter().map(|s| s.items.len()).sum()
    }

    /// Dense position of an item id.
    pub fn position(&self, id: ItemId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn item(&self, id: ItemId) -> Result<&Item> {
        self.position(id)
            .map(|p| &self.items[p])
            .ok_or_else(|| Error::Referential {
                item: id,
                context: "corpus lookup".into(),
            })
    }

    pub fn session(&self, sid: u64) -> Option<&Session> {
        self.sessions.iter().find(|s| s.sid == sid)
    }

    pub fn feature_dim(&self) -> usize {
        self.items.first().map_or(0, |i| i.feat_txt.len())
    }

    pub fn num_categories_per_item(&self) -> usize {
        self.items.first().map_or(0, |i| i.cats.len())
    }

    pub fn num_vk_classes(&self) -> usize {
        self.items.iter().map(|i| i.vk + 1).max().unwrap_or(0)
    }

    pub fn num_cat_classes(&self) -> usize {
        self.items
            .iter()
            .flat_map(|i| i.cats.iter().map(|c| c + 1))
            .max()
            .unwrap_or(0)
    }

    pub fn sessions_by_id(&self, ids: &[u64]) -> Vec<&Session> {
        let by: HashMap<u64, &Session> = self.sessions.iter().map(|s| (s.sid, s)).collect();
        ids.iter().filter_map(|i| by.get(i).copied()).collect()
    }

    pub fn save(&self, items_path: &Path, sessions_path: &Path) -> Result<()> {
        write_jsonl(items_path, &self.items)?;
        write_jsonl(sessions_path, &self.sessions)
    }
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: n + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Reads the items and sessions JSON Lines files.
pub fn load_corpus(items_path: &Path, sessions_path: &Path) -> Result<Corpus> {
    let items: Vec<Item> = read_jsonl(items_path)?;
    let sessions: Vec<Session> = read_jsonl(sessions_path)?;
    Corpus::new(items, sessions)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    const ITEMS: &str = r#"{"id": 1, "feat_txt": [0.1, 0.2], "feat_img": [1.0, 0.0], "vk": 0, "cats": [1, 0]}
{"id": 2, "feat_txt": [0.3, 0.2], "feat_img": [0.5, 0.5], "vk": 1, "cats": [2, 3]}
{"id": 3, "feat_txt": [0.0, 0.0], "feat_img": [0.0, 1.0], "vk": 1, "cats": [0, 3]}
"#;

    #[test]
    fn loads_small_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let items = write(dir.path(), "items.jsonl", ITEMS);
        let sessions = write(dir.path(), "sessions.jsonl", "{\"sid\": 7, \"items\": [1, 2, 3]}\n");
        let c = load_corpus(&items, &sessions).unwrap();
        assert_eq!((c.num_items(), c.num_sessions()), (3, 1));
        assert_eq!(c.item(1).unwrap().cats, vec![0, 1]);
        assert_eq!(c.num_vk_classes(), 2);
        assert_eq!(c.num_cat_classes(), 4);
    }

    #[test]
    fn empty_sessions_file() {
        let dir = tempfile::tempdir().unwrap();
        let items = write(dir.path(), "items.jsonl", ITEMS);
        let sessions = write(dir.path(), "sessions.jsonl", "");
        assert_eq!(load_corpus(&items, &sessions).unwrap().num_sessions(), 0);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let items = write(dir.path(), "items.jsonl", ITEMS);
        let sessions = write(dir.path(), "sessions.jsonl", "{\"sid\": 1, \"items\": [1, 2]}\n{\"sid\": 2, \"items\": [1,\n");
        match load_corpus(&items, &sessions) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn dangling_item_is_referential_error() {
        let dir = tempfile::tempdir().unwrap();
        let items = write(dir.path(), "items.jsonl", ITEMS);
        let sessions = write(dir.path(), "sessions.jsonl", "{\"sid\": 1, \"items\": [1, 9]}\n");
        assert!(matches!(
            load_corpus(&items, &sessions),
            Err(Error::Referential { item: 9, .. })
        ));
    }

    #[test]
    fn save_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let items = write(dir.path(), "items.jsonl", ITEMS);
        let sessions = write(dir.path(), "sessions.jsonl", "{\"sid\": 7, \"items\": [1, 2, 3]}\n");
        let c = load_corpus(&items, &sessions).unwrap();
        let (i2, s2) = (dir.path().join("i2.jsonl"), dir.path().join("s2.jsonl"));
        c.save(&i2, &s2).unwrap();
        assert_eq!(load_corpus(&i2, &s2).unwrap(), c);
    }
}
