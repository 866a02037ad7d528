//! Documents, sentences and span labels.
//!
//! Labels are canonically held as per-token bit vectors ([`TokenLabelVector`]);
//! spans are end-exclusive token ranges and only exist at the edges (gold
//! files, worker submissions, HIT examples).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("document {doc_id:?} has no text")]
    EmptyDocument { doc_id: String },
    #[error("duplicate document id {0:?}")]
    DuplicateDocument(String),
    #[error("sentence {0:?} has no tokens")]
    EmptySentence(String),
    #[error("span [{start}, {end}) is invalid for a sentence of {len} tokens")]
    SpanOutOfRange { start: usize, end: usize, len: usize },
    #[error("label vector for {sentence_id:?} has {got} bits, sentence has {expected} tokens")]
    LengthMismatch {
        sentence_id: String,
        expected: usize,
        got: usize,
    },
    #[error("line {line}: unknown sentence id {sentence_id:?}")]
    UnknownSentence { line: usize, sentence_id: String },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("invalid bit string {0:?}")]
    BitString(String),
    #[error("unknown subtask {0:?}")]
    UnknownSubtask(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One of the three annotation passes: participants, interventions, outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Subtask {
    P,
    I,
    O,
}

impl Subtask {
    pub const ALL: [Subtask; 3] = [Subtask::P, Subtask::I, Subtask::O];

    pub fn as_str(self) -> &'static str {
        match self {
            Subtask::P => "P",
            Subtask::I => "I",
            Subtask::O => "O",
        }
    }
}

impl fmt::Display for Subtask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Subtask {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "P" | "p" => Ok(Subtask::P),
            "I" | "i" => Ok(Subtask::I),
            "O" | "o" => Ok(Subtask::O),
            other => Err(CorpusError::UnknownSubtask(other.to_string())),
        }
    }
}

/// End-exclusive token range. Serialized as `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn validate(&self, token_count: usize) -> Result<(), CorpusError> {
        if self.start < self.end && self.end <= token_count {
            Ok(())
        } else {
            Err(CorpusError::SpanOutOfRange {
                start: self.start,
                end: self.end,
                len: token_count,
            })
        }
    }
}

impl From<(usize, usize)> for Span {
    fn from((start, end): (usize, usize)) -> Self {
        Span { start, end }
    }
}

impl From<Span> for (usize, usize) {
    fn from(span: Span) -> Self {
        (span.start, span.end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: String,
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub char_offsets: Option<Vec<(usize, usize)>>,
}

impl Sentence {
    pub fn new(id: impl Into<String>, tokens: Vec<String>) -> Result<Self, CorpusError> {
        let id = id.into();
        if tokens.is_empty() {
            return Err(CorpusError::EmptySentence(id));
        }
        Ok(Sentence {
            id,
            tokens,
            char_offsets: None,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

pub fn sentence_id(doc_id: &str, index: usize) -> String {
    format!("{doc_id}:{index}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    #[serde(default)]
    pub title: String,
    #[serde(default, rename = "abstract")]
    pub abstract_text: String,
    pub sentences: Vec<Sentence>,
}

impl Document {
    /// Builds a document from already tokenized sentences.
    pub fn from_tokens(doc_id: &str, sentences: Vec<Vec<String>>) -> Result<Self, CorpusError> {
        if sentences.is_empty() {
            return Err(CorpusError::EmptyDocument {
                doc_id: doc_id.to_string(),
            });
        }
        let sentences = sentences
            .into_iter()
            .enumerate()
            .map(|(i, tokens)| Sentence::new(sentence_id(doc_id, i), tokens))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Document {
            doc_id: doc_id.to_string(),
            title: String::new(),
            abstract_text: String::new(),
            sentences,
        })
    }
}

/// Sentence boundary detection over raw text. Returns byte ranges.
pub trait Segmenter {
    fn segment(&self, text: &str) -> Vec<(usize, usize)>;
}

/// Splits after `.`, `!` or `?` when followed by whitespace, unless the
/// next word starts lowercase or the terminated word is a known abbreviation.
#[derive(Debug, Clone, Default)]
pub struct RuleSegmenter;

const ABBREVIATIONS: &[&str] = &["e.g.", "i.e.", "vs.", "al.", "approx.", "dr.", "fig.", "no."];

impl Segmenter for RuleSegmenter {
    fn segment(&self, text: &str) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = 0;
        let chars: Vec<(usize, char)> = text.char_indices().collect();
        for (pos, &(byte, c)) in chars.iter().enumerate() {
            if !matches!(c, '.' | '!' | '?') {
                continue;
            }
            let end = byte + c.len_utf8();
            let at_end = pos + 1 == chars.len();
            if !at_end && !chars[pos + 1].1.is_whitespace() {
                continue;
            }
            if !at_end {
                let next_word = chars[pos + 1..].iter().find(|(_, ch)| !ch.is_whitespace());
                if matches!(next_word, Some((_, ch)) if ch.is_lowercase()) {
                    continue;
                }
                let word_start = text[..end]
                    .rfind(char::is_whitespace)
                    .map(|i| i + 1)
                    .unwrap_or(0);
                let word = text[word_start..end].to_lowercase();
                if ABBREVIATIONS.contains(&word.as_str()) {
                    continue;
                }
            }
            push_trimmed(text, start, end, &mut out);
            start = end;
        }
        push_trimmed(text, start, text.len(), &mut out);
        out
    }
}

/// One sentence per non-blank line.
#[derive(Debug, Clone, Default)]
pub struct LineSegmenter;

impl Segmenter for LineSegmenter {
    fn segment(&self, text: &str) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = 0;
        for line in text.split_inclusive('\n') {
            push_trimmed(text, start, start + line.len(), &mut out);
            start += line.len();
        }
        out
    }
}

fn push_trimmed(text: &str, start: usize, end: usize, out: &mut Vec<(usize, usize)>) {
    let slice = &text[start..end];
    let lead = slice.len() - slice.trim_start().len();
    let trimmed = slice.trim();
    if !trimmed.is_empty() {
        out.push((start + lead, start + lead + trimmed.len()));
    }
}

const PUNCTUATION: &[char] = &[
    '(', ')', '[', ']', '{', '}', ',', ';', ':', '.', '!', '?', '"', '\'',
];

/// Whitespace tokenization, then leading and trailing punctuation characters
/// are split off one per token. Punctuation inside a word (`n=110`, `2.5`,
/// `double-blind`) stays attached.
pub fn tokenize(text: &str) -> Vec<(String, (usize, usize))> {
    let mut tokens = Vec::new();
    let mut offset = 0;
    for chunk in text.split_inclusive(char::is_whitespace) {
        let word = chunk.trim_end();
        let base = offset;
        offset += chunk.len();
        if word.is_empty() {
            continue;
        }
        let mut lo = 0;
        let mut hi = word.len();
        let mut trailing = Vec::new();
        while let Some(c) = word[lo..hi].chars().next() {
            if !PUNCTUATION.contains(&c) {
                break;
            }
            tokens.push((c.to_string(), (base + lo, base + lo + c.len_utf8())));
            lo += c.len_utf8();
        }
        while let Some(c) = word[lo..hi].chars().next_back() {
            if !PUNCTUATION.contains(&c) {
                break;
            }
            hi -= c.len_utf8();
            trailing.push((c.to_string(), (base + hi, base + hi + c.len_utf8())));
        }
        if lo < hi {
            tokens.push((word[lo..hi].to_string(), (base + lo, base + hi)));
        }
        tokens.extend(trailing.into_iter().rev());
    }
    tokens
}

/// Segments and tokenizes a title and abstract into a [`Document`].
///
/// Title and abstract are segmented separately; character offsets index into
/// `title + "\n" + abstract`.
pub fn ingest_document(
    doc_id: &str,
    title: &str,
    abstract_text: &str,
    segmenter: &dyn Segmenter,
) -> Result<Document, CorpusError> {
    if title.trim().is_empty() && abstract_text.trim().is_empty() {
        return Err(CorpusError::EmptyDocument {
            doc_id: doc_id.to_string(),
        });
    }
    let mut sentences = Vec::new();
    let abstract_base = title.len() + 1;
    for (text, base) in [(title, 0), (abstract_text, abstract_base)] {
        for (start, end) in segmenter.segment(text) {
            let toks = tokenize(&text[start..end]);
            if toks.is_empty() {
                continue;
            }
            let (tokens, offsets): (Vec<_>, Vec<_>) = toks
                .into_iter()
                .map(|(t, (s, e))| (t, (base + start + s, base + start + e)))
                .unzip();
            sentences.push(Sentence {
                id: sentence_id(doc_id, sentences.len()),
                tokens,
                char_offsets: Some(offsets),
            });
        }
    }
    if sentences.is_empty() {
        return Err(CorpusError::EmptyDocument {
            doc_id: doc_id.to_string(),
        });
    }
    Ok(Document {
        doc_id: doc_id.to_string(),
        title: title.to_string(),
        abstract_text: abstract_text.to_string(),
        sentences,
    })
}

/// Per-token inside/outside labels for one sentence and sub-task.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenLabelVector {
    pub sentence_id: String,
    pub subtask: Subtask,
    pub labels: Vec<bool>,
}

impl TokenLabelVector {
    pub fn zeros(sentence_id: impl Into<String>, subtask: Subtask, len: usize) -> Self {
        TokenLabelVector {
            sentence_id: sentence_id.into(),
            subtask,
            labels: vec![false; len],
        }
    }

    /// Bit `i` is set iff some span covers token `i`; overlaps merge.
    pub fn from_spans(
        sentence_id: impl Into<String>,
        subtask: Subtask,
        len: usize,
        spans: &[Span],
    ) -> Result<Self, CorpusError> {
        let mut v = Self::zeros(sentence_id, subtask, len);
        for span in spans {
            span.validate(len)?;
            v.labels[span.start..span.end].fill(true);
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn ones(&self) -> usize {
        self.labels.iter().filter(|&&b| b).count()
    }

    /// Maximal runs of set bits.
    pub fn spans(&self) -> Vec<Span> {
        let mut spans = Vec::new();
        let mut run_start = None;
        for (i, &bit) in self.labels.iter().enumerate() {
            match (bit, run_start) {
                (true, None) => run_start = Some(i),
                (false, Some(s)) => {
                    spans.push(Span::new(s, i));
                    run_start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = run_start {
            spans.push(Span::new(s, self.labels.len()));
        }
        spans
    }

    pub fn to_bit_string(&self) -> String {
        self.labels.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn from_bit_string(
        sentence_id: impl Into<String>,
        subtask: Subtask,
        bits: &str,
    ) -> Result<Self, CorpusError> {
        let labels = bits
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(CorpusError::BitString(bits.to_string())),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(TokenLabelVector {
            sentence_id: sentence_id.into(),
            subtask,
            labels,
        })
    }
}

pub fn spans_to_token_labels(
    spans: &[Span],
    sentence: &Sentence,
    subtask: Subtask,
) -> Result<TokenLabelVector, CorpusError> {
    TokenLabelVector::from_spans(sentence.id.clone(), subtask, sentence.len(), spans)
}

pub fn token_labels_to_spans(v: &TokenLabelVector) -> Vec<Span> {
    v.spans()
}

/// Merges overlapping or adjacent spans into sorted maximal runs.
pub fn normalize_spans(spans: &[Span]) -> Vec<Span> {
    let mut sorted: Vec<Span> = spans.iter().copied().filter(|s| !s.is_empty()).collect();
    sorted.sort();
    let mut out: Vec<Span> = Vec::with_capacity(sorted.len());
    for span in sorted {
        match out.last_mut() {
            Some(last) if span.start <= last.end => last.end = last.end.max(span.end),
            _ => out.push(span),
        }
    }
    out
}

/// Anything that can resolve a sentence id.
pub trait SentenceLookup {
    fn sentence(&self, id: &str) -> Option<&Sentence>;
}

impl SentenceLookup for HashMap<String, Sentence> {
    fn sentence(&self, id: &str) -> Option<&Sentence> {
        self.get(id)
    }
}

impl SentenceLookup for BTreeMap<String, Sentence> {
    fn sentence(&self, id: &str) -> Option<&Sentence> {
        self.get(id)
    }
}

/// An ordered set of documents with a sentence index.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    documents: Vec<Document>,
    by_sentence: HashMap<String, (usize, usize)>,
}

impl Corpus {
    pub fn new(documents: Vec<Document>) -> Result<Self, CorpusError> {
        let mut by_sentence = HashMap::new();
        let mut seen = BTreeSet::new();
        for (d, doc) in documents.iter().enumerate() {
            if !seen.insert(doc.doc_id.clone()) {
                return Err(CorpusError::DuplicateDocument(doc.doc_id.clone()));
            }
            for (s, sentence) in doc.sentences.iter().enumerate() {
                if sentence.tokens.is_empty() {
                    return Err(CorpusError::EmptySentence(sentence.id.clone()));
                }
                by_sentence.insert(sentence.id.clone(), (d, s));
            }
        }
        Ok(Corpus {
            documents,
            by_sentence,
        })
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn sentences(&self) -> impl Iterator<Item = &Sentence> {
        self.documents.iter().flat_map(|d| d.sentences.iter())
    }

    pub fn sentence_count(&self) -> usize {
        self.by_sentence.len()
    }
}

impl SentenceLookup for Corpus {
    fn sentence(&self, id: &str) -> Option<&Sentence> {
        self.by_sentence
            .get(id)
            .map(|&(d, s)| &self.documents[d].sentences[s])
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CorpusLine {
    Tokenized {
        doc_id: String,
        sentences: Vec<Vec<String>>,
        #[serde(default)]
        title: String,
        #[serde(default, rename = "abstract")]
        abstract_text: String,
    },
    Raw {
        doc_id: String,
        #[serde(default)]
        title: String,
        #[serde(default, rename = "abstract")]
        abstract_text: String,
    },
}

/// Reads a JSON-lines corpus. Lines are either raw (`title`/`abstract`) or
/// pre-tokenized (`sentences`).
pub fn read_corpus(path: &Path, segmenter: &dyn Segmenter) -> Result<Corpus, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut documents = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let parsed: CorpusLine = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: lineno,
            message: e.to_string(),
        })?;
        let doc = match parsed {
            CorpusLine::Tokenized {
                doc_id,
                sentences,
                title,
                abstract_text,
            } => {
                let mut doc = Document::from_tokens(&doc_id, sentences)?;
                doc.title = title;
                doc.abstract_text = abstract_text;
                doc
            }
            CorpusLine::Raw {
                doc_id,
                title,
                abstract_text,
            } => ingest_document(&doc_id, &title, &abstract_text, segmenter)?,
        };
        documents.push(doc);
    }
    Corpus::new(documents)
}

/// Writes the corpus in pre-tokenized form.
pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<(), CorpusError> {
    let mut out = std::io::BufWriter::new(File::create(path)?);
    for doc in corpus.documents() {
        let line = serde_json::json!({
            "doc_id": doc.doc_id,
            "title": doc.title,
            "abstract": doc.abstract_text,
            "sentences": doc.sentences.iter().map(|s| &s.tokens).collect::<Vec<_>>(),
        });
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldEntry {
    pub token_count: usize,
    pub spans: BTreeMap<Subtask, Vec<Span>>,
}

/// Expert span labels keyed by sentence id. Spans are stored merged and sorted.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldLabels {
    entries: BTreeMap<String, GoldEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldLine {
    pub sentence_id: String,
    pub subtask: Subtask,
    pub spans: Vec<Span>,
}

impl GoldLabels {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds spans for a sentence; repeated calls for the same sub-task accumulate.
    pub fn insert(
        &mut self,
        sentence: &Sentence,
        subtask: Subtask,
        spans: &[Span],
    ) -> Result<(), CorpusError> {
        for span in spans {
            span.validate(sentence.len())?;
        }
        let entry = self
            .entries
            .entry(sentence.id.clone())
            .or_insert_with(|| GoldEntry {
                token_count: sentence.len(),
                spans: BTreeMap::new(),
            });
        let slot = entry.spans.entry(subtask).or_default();
        slot.extend_from_slice(spans);
        *slot = normalize_spans(slot);
        Ok(())
    }

    /// Registers a sentence as gold-covered without adding spans.
    pub fn cover(&mut self, sentence: &Sentence) {
        self.entries
            .entry(sentence.id.clone())
            .or_insert_with(|| GoldEntry {
                token_count: sentence.len(),
                spans: BTreeMap::new(),
            });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, sentence_id: &str) -> bool {
        self.entries.contains_key(sentence_id)
    }

    pub fn sentence_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn token_count(&self, sentence_id: &str) -> Option<usize> {
        self.entries.get(sentence_id).map(|e| e.token_count)
    }

    /// Gold spans for one sentence and sub-task; empty when the sentence has none.
    pub fn spans(&self, sentence_id: &str, subtask: Subtask) -> &[Span] {
        self.entries
            .get(sentence_id)
            .and_then(|e| e.spans.get(&subtask))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn vector(&self, sentence_id: &str, subtask: Subtask) -> Option<TokenLabelVector> {
        let entry = self.entries.get(sentence_id)?;
        let spans = entry.spans.get(&subtask).map(Vec::as_slice).unwrap_or(&[]);
        // Spans were validated on insertion.
        TokenLabelVector::from_spans(sentence_id, subtask, entry.token_count, spans).ok()
    }

    /// Keeps only the listed sentences.
    pub fn restrict<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> GoldLabels {
        let entries = ids
            .into_iter()
            .filter_map(|id| self.entries.get(id).map(|e| (id.to_string(), e.clone())))
            .collect();
        GoldLabels { entries }
    }

    pub fn lines(&self) -> Vec<GoldLine> {
        self.entries
            .iter()
            .flat_map(|(id, entry)| {
                entry.spans.iter().map(move |(&subtask, spans)| GoldLine {
                    sentence_id: id.clone(),
                    subtask,
                    spans: spans.clone(),
                })
            })
            .collect()
    }
}

/// Loads JSON-lines gold labels, validating every line against `corpus`.
pub fn load_gold(path: &Path, corpus: &dyn SentenceLookup) -> Result<GoldLabels, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut gold = GoldLabels::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let parsed: GoldLine = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: lineno,
            message: e.to_string(),
        })?;
        let sentence =
            corpus
                .sentence(&parsed.sentence_id)
                .ok_or_else(|| CorpusError::UnknownSentence {
                    line: lineno,
                    sentence_id: parsed.sentence_id.clone(),
                })?;
        gold.insert(sentence, parsed.subtask, &parsed.spans)
            .map_err(|e| CorpusError::Malformed {
                line: lineno,
                message: e.to_string(),
            })?;
    }
    Ok(gold)
}

/// Writes one line per (sentence, sub-task) present in `gold`.
pub fn write_gold(path: &Path, gold: &GoldLabels) -> Result<(), CorpusError> {
    let mut out = std::io::BufWriter::new(File::create(path)?);
    for line in gold.lines() {
        writeln!(out, "{}", serde_json::to_string(&line).expect("gold line serializes"))?;
    }
    out.flush()?;
    Ok(())
}
