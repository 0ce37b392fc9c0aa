//! Retrieval corpus: word-bounded chunking and the on-disk chunk store.
//!
//! A store file is UTF-8 with one header line `#chunkstore v1 max_words=<n>`
//! followed by one record per chunk: `id<TAB>source<TAB>word_count<TAB>text`,
//! with tab, newline and backslash escaped inside the text.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::text::{escape_field, unescape_field, words};

/// Default chunk limit for encyclopedia-style sources.
pub const WIKI_MAX_WORDS: usize = 200;
/// Default chunk limit for web-crawl-style sources.
pub const WEB_MAX_WORDS: usize = 100;

const HEADER_PREFIX: &str = "#chunkstore v1 max_words=";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub id: usize,
    pub source: String,
    pub text: String,
    pub word_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkStore {
    chunks: Vec<Chunk>,
    max_words: usize,
}

/// A raw document tagged with the source it came from.
#[derive(Debug, Clone)]
pub struct Document {
    pub source: String,
    pub text: String,
}

impl Document {
    pub fn new(source: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            source: source.into(),
            text: text.into(),
        }
    }
}

/// Per-source word limits with a fallback.
#[derive(Debug, Clone)]
pub struct WordLimits {
    pub default: usize,
    pub per_source: BTreeMap<String, usize>,
}

impl WordLimits {
    pub fn uniform(max_words: usize) -> Self {
        Self {
            default: max_words,
            per_source: BTreeMap::new(),
        }
    }

    pub fn with_source(mut self, source: impl Into<String>, max_words: usize) -> Self {
        self.per_source.insert(source.into(), max_words);
        self
    }

    pub fn for_source(&self, source: &str) -> usize {
        self.per_source.get(source).copied().unwrap_or(self.default)
    }

    fn largest(&self) -> usize {
        self.per_source
            .values()
            .copied()
            .chain(std::iter::once(self.default))
            .max()
            .unwrap_or(self.default)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BuildReport {
    pub documents: usize,
    pub duplicates_dropped: usize,
}

/// Split a document into `ceil(W / max_words)` chunks whose sizes differ by
/// at most one word. Earlier chunks take the remainder words.
///
/// The returned chunks carry id 0 and an empty source; [`build_store`]
/// assigns both.
pub fn chunk_document(text: &str, max_words: usize) -> Result<Vec<Chunk>> {
    if max_words == 0 {
        return Err(Error::InvalidDocument("max_words must be at least 1".into()));
    }
    let all: Vec<&str> = words(text).collect();
    if all.is_empty() {
        return Err(Error::InvalidDocument("document has no words".into()));
    }
    let total = all.len();
    let n = total.div_ceil(max_words);
    let base = total / n;
    let extra = total % n;

    let mut chunks = Vec::with_capacity(n);
    let mut start = 0;
    for i in 0..n {
        let len = base + usize::from(i < extra);
        let piece = &all[start..start + len];
        chunks.push(Chunk {
            id: 0,
            source: String::new(),
            text: piece.join(" "),
            word_count: len,
        });
        start += len;
    }
    debug_assert_eq!(start, total);
    Ok(chunks)
}

/// Chunk every document and assign dense ids in input order, dropping
/// chunks whose `(source, text)` pair was already seen.
pub fn build_store(documents: &[Document], limits: &WordLimits) -> Result<(ChunkStore, BuildReport)> {
    if documents.is_empty() {
        return Err(Error::InvalidDocument("no documents supplied".into()));
    }
    let mut seen: HashSet<(String, String)> = HashSet::new();
    let mut chunks = Vec::new();
    let mut report = BuildReport {
        documents: documents.len(),
        duplicates_dropped: 0,
    };
    for doc in documents {
        for mut chunk in chunk_document(&doc.text, limits.for_source(&doc.source))? {
            if !seen.insert((doc.source.clone(), chunk.text.clone())) {
                report.duplicates_dropped += 1;
                continue;
            }
            chunk.id = chunks.len();
            chunk.source = doc.source.clone();
            chunks.push(chunk);
        }
    }
    Ok((
        ChunkStore {
            chunks,
            max_words: limits.largest(),
        },
        report,
    ))
}

impl ChunkStore {
    /// Assemble a store from chunks that already carry dense ids.
    pub fn from_chunks(chunks: Vec<Chunk>, max_words: usize) -> Result<Self> {
        let store = Self { chunks, max_words };
        store.validate()?;
        Ok(store)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, c) in self.chunks.iter().enumerate() {
            if c.id != i {
                return Err(Error::format("chunk store", format!("id {} at position {i}", c.id)));
            }
            if c.text.trim().is_empty() {
                return Err(Error::format("chunk store", format!("chunk {i} is empty")));
            }
            if words(&c.text).count() != c.word_count {
                return Err(Error::format("chunk store", format!("chunk {i} word count mismatch")));
            }
            if !seen.insert((&c.source, &c.text)) {
                return Err(Error::format("chunk store", format!("chunk {i} duplicates an earlier chunk")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn max_words(&self) -> usize {
        self.max_words
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn get(&self, id: usize) -> Option<&Chunk> {
        self.chunks.get(id)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "{HEADER_PREFIX}{}", self.max_words)?;
        for c in &self.chunks {
            writeln!(
                out,
                "{}\t{}\t{}\t{}",
                c.id,
                escape_field(&c.source),
                c.word_count,
                escape_field(&c.text)
            )?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let content = fs::read_to_string(path)?;
        Self::parse(&content, path)
    }

    pub fn parse(content: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = content.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
        let max_words = header
            .strip_prefix(HEADER_PREFIX)
            .and_then(|n| n.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
            .ok_or_else(|| err(1, format!("bad header {header:?}")))?;

        let mut chunks = Vec::new();
        let mut seen = HashSet::new();
        for (idx, line) in lines {
            let lineno = idx + 1;
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(err(lineno, format!("expected 4 fields, found {}", fields.len())));
            }
            let id: usize = fields[0]
                .parse()
                .map_err(|_| err(lineno, format!("bad id {:?}", fields[0])))?;
            if id != chunks.len() {
                return Err(err(lineno, format!("id {id} out of order, expected {}", chunks.len())));
            }
            let source = unescape_field(fields[1]).ok_or_else(|| err(lineno, "bad escape in source".into()))?;
            let word_count: usize = fields[2]
                .parse()
                .map_err(|_| err(lineno, format!("bad word count {:?}", fields[2])))?;
            let text = unescape_field(fields[3]).ok_or_else(|| err(lineno, "bad escape in text".into()))?;
            if text.trim().is_empty() {
                return Err(err(lineno, "empty chunk text".into()));
            }
            let actual = words(&text).count();
            if actual != word_count {
                return Err(err(lineno, format!("word count {word_count} but text has {actual} words")));
            }
            if !seen.insert((source.clone(), text.clone())) {
                return Err(err(lineno, "duplicate chunk".into()));
            }
            chunks.push(Chunk {
                id,
                source,
                text,
                word_count,
            });
        }
        Ok(Self { chunks, max_words })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc_of(n: usize) -> String {
        (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn splits_450_words_into_three_equal_chunks() {
        let chunks = chunk_document(&doc_of(450), WIKI_MAX_WORDS).unwrap();
        let sizes: Vec<usize> = chunks.iter().map(|c| c.text.split_whitespace().count()).collect();
        assert_eq!(sizes, vec![150, 150, 150]);
        assert!(chunks.iter().all(|c| c.word_count == 150));
    }

    #[test]
    fn short_document_is_one_chunk() {
        let chunks = chunk_document(&doc_of(50), WIKI_MAX_WORDS).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].word_count, 50);
    }

    #[test]
    fn web_limit_is_smaller() {
        assert_eq!(WIKI_MAX_WORDS, 200);
        assert_eq!(WEB_MAX_WORDS, 100);
        assert_eq!(chunk_document(&doc_of(150), WEB_MAX_WORDS).unwrap().len(), 2);
    }

    #[test]
    fn whitespace_collapses() {
        let chunks = chunk_document("  a \t b\n\nc  ", 10).unwrap();
        assert_eq!(chunks[0].text, "a b c");
        assert_eq!(chunks[0].word_count, 3);
    }

    #[test]
    fn empty_document_is_rejected() {
        assert!(matches!(chunk_document(" \n\t ", 5), Err(Error::InvalidDocument(_))));
        assert!(matches!(chunk_document("a", 0), Err(Error::InvalidDocument(_))));
    }

    #[test]
    fn store_of_two_documents() {
        let docs = vec![Document::new("wiki", doc_of(150)), Document::new("wiki", doc_of(450))];
        let (store, report) = build_store(&docs, &WordLimits::uniform(200)).unwrap();
        // 150 words -> 1 chunk; 450 words -> 3 chunks. The first 150 words of
        // both documents coincide, so use distinct texts to avoid dedup.
        assert_eq!(report.duplicates_dropped, 1);
        assert_eq!(store.len(), 3);

        let docs = vec![
            Document::new("wiki", doc_of(150)),
            Document::new("wiki", doc_of(450).replace('w', "v")),
        ];
        let (store, report) = build_store(&docs, &WordLimits::uniform(200)).unwrap();
        assert_eq!(report.duplicates_dropped, 0);
        assert_eq!(store.len(), 4);
        let ids: Vec<usize> = store.chunks().iter().map(|c| c.id).collect();
        assert_eq!(ids, vec![0, 1, 2, 3]);
    }

    #[test]
    fn duplicate_documents_are_dropped() {
        let docs = vec![Document::new("cc", "same text here"), Document::new("cc", "same text here")];
        let (store, report) = build_store(&docs, &WordLimits::uniform(100)).unwrap();
        assert_eq!(store.len(), 1);
        assert_eq!(report.duplicates_dropped, 1);
        // Same text under another source is a distinct chunk.
        let docs = vec![Document::new("cc", "same text here"), Document::new("wiki", "same text here")];
        let (store, _) = build_store(&docs, &WordLimits::uniform(100)).unwrap();
        assert_eq!(store.len(), 2);
    }

    #[test]
    fn empty_document_list_is_rejected() {
        assert!(matches!(
            build_store(&[], &WordLimits::uniform(100)),
            Err(Error::InvalidDocument(_))
        ));
    }

    #[test]
    fn per_source_limits_apply() {
        let limits = WordLimits::uniform(200).with_source("cc", 100);
        let docs = vec![Document::new("wiki", doc_of(150)), Document::new("cc", doc_of(150))];
        let (store, _) = build_store(&docs, &limits).unwrap();
        assert_eq!(store.len(), 3);
        assert_eq!(store.max_words(), 200);
    }

    #[test]
    fn round_trip_preserves_unicode_and_escapes() {
        let docs = vec![
            Document::new("wiki", "Zürich liegt am See. 東京 は 大きい"),
            Document::new("cc", "tab\there back\\slash"),
            Document::new("synthetic", "plain words"),
        ];
        let (store, _) = build_store(&docs, &WordLimits::uniform(200)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.tsv");
        store.save(&path).unwrap();
        let loaded = ChunkStore::load(&path).unwrap();
        assert_eq!(loaded, store);
        assert_eq!(loaded.get(0).unwrap().text, "Zürich liegt am See. 東京 は 大きい");
    }

    #[test]
    fn truncated_file_reports_line() {
        let docs = vec![
            Document::new("wiki", "alpha beta gamma"),
            Document::new("wiki", "delta epsilon"),
            Document::new("wiki", "zeta eta theta iota"),
        ];
        let (store, _) = build_store(&docs, &WordLimits::uniform(200)).unwrap();
        let mut buf = Vec::new();
        store.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cut = &text[..text.len() - 12];
        match ChunkStore::parse(cut, Path::new("x.tsv")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
        let cut = &text[..text.rfind('\t').unwrap()];
        match ChunkStore::parse(cut, Path::new("x.tsv")) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 4);
                assert!(message.contains("fields"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn chunking_is_balanced_and_lossless(
            doc in proptest::collection::vec("[a-z]{1,6}", 1..700),
            max_words in 1usize..=500,
        ) {
            let text = doc.join(" ");
            let chunks = chunk_document(&text, max_words).unwrap();
            let total = doc.len();
            prop_assert_eq!(chunks.len(), total.div_ceil(max_words));
            let sizes: Vec<usize> = chunks.iter().map(|c| c.word_count).collect();
            let (lo, hi) = (*sizes.iter().min().unwrap(), *sizes.iter().max().unwrap());
            prop_assert!(hi - lo <= 1);
            prop_assert!(hi <= max_words);
            prop_assert!(hi <= total.div_ceil(chunks.len()));
            let rejoined: Vec<&str> = chunks.iter().flat_map(|c| c.text.split_whitespace()).collect();
            prop_assert_eq!(rejoined, doc.iter().map(String::as_str).collect::<Vec<_>>());
        }

        #[test]
        fn build_store_is_deterministic(
            docs in proptest::collection::vec(("[a-c]", "[a-z ]{1,80}"), 1..20),
        ) {
            let docs: Vec<Document> = docs
                .into_iter()
                .filter(|(_, t)| !t.trim().is_empty())
                .map(|(s, t)| Document::new(s, t))
                .collect();
            prop_assume!(!docs.is_empty());
            let a = build_store(&docs, &WordLimits::uniform(5)).unwrap();
            let b = build_store(&docs, &WordLimits::uniform(5)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
