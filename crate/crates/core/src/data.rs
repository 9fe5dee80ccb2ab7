//! Verse corpora, trivia questions and the question groups built from them.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate verse {0}")]
    Duplicate(String),
    #[error("{translation} {book} {chapter}: verse {missing} is missing")]
    Gap {
        translation: Translation,
        book: String,
        chapter: u32,
        missing: u32,
    },
    #[error("unknown translation {0:?}")]
    UnknownTranslation(String),
    #[error("unknown context mode {0:?}")]
    UnknownMode(String),
    #[error("question {question}: {message}")]
    Validation { question: String, message: String },
    #[error("record {index}: {message}")]
    Record { index: usize, message: String },
    #[error("need at least 10 question ids to split, got {0}")]
    TooFewQuestions(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Lowercase `text` and split it into word tokens.
///
/// Tokens are runs of alphanumeric characters and apostrophes; apostrophes
/// survive only inside a token.
///
/// ```
/// use anssel::data::tokenize;
/// assert_eq!(tokenize("Jesus' mother, Mary!"), ["jesus", "mother", "mary"]);
/// assert_eq!(tokenize("don't"), ["don't"]);
/// ```
pub fn tokenize(text: &str) -> Vec<String> {
    let is_apostrophe = |c: char| c == '\'' || c == '\u{2019}';
    text.split(|c: char| !(c.is_alphanumeric() || is_apostrophe(c)))
        .map(|run| run.trim_matches(is_apostrophe))
        .filter(|run| !run.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Translation {
    #[serde(rename = "KJV")]
    Kjv,
    #[serde(rename = "ASV")]
    Asv,
    #[serde(rename = "YLT")]
    Ylt,
    #[serde(rename = "WEB")]
    Web,
}

impl Translation {
    pub const ALL: [Translation; 4] = [
        Translation::Kjv,
        Translation::Asv,
        Translation::Ylt,
        Translation::Web,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Translation::Kjv => "KJV",
            Translation::Asv => "ASV",
            Translation::Ylt => "YLT",
            Translation::Web => "WEB",
        }
    }
}

impl fmt::Display for Translation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Translation {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        Translation::ALL
            .into_iter()
            .find(|t| t.code().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| DataError::UnknownTranslation(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct VerseRef {
    pub translation: Translation,
    pub book: String,
    pub chapter: u32,
    pub verse: u32,
}

impl fmt::Display for VerseRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {}:{}",
            self.translation, self.book, self.chapter, self.verse
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Book {
    name: String,
    chapters: BTreeMap<u32, Vec<String>>,
}

/// Verse texts of every translation, grouped by chapter. Books keep the order in
/// which they first appear in the input.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BibleCorpus {
    translations: BTreeMap<Translation, Vec<Book>>,
}

impl BibleCorpus {
    pub fn translations(&self) -> impl Iterator<Item = Translation> + '_ {
        self.translations.keys().copied()
    }

    fn book(&self, translation: Translation, name: &str) -> Option<&Book> {
        self.translations
            .get(&translation)?
            .iter()
            .find(|b| b.name.eq_ignore_ascii_case(name.trim()))
    }

    /// Canonical spelling of `name` in `translation`.
    pub fn book_name(&self, translation: Translation, name: &str) -> Option<&str> {
        self.book(translation, name).map(|b| b.name.as_str())
    }

    /// Position of `name` in the book order of `translation`.
    pub fn book_index(&self, translation: Translation, name: &str) -> Option<usize> {
        self.translations
            .get(&translation)?
            .iter()
            .position(|b| b.name.eq_ignore_ascii_case(name.trim()))
    }

    /// All verses of a chapter; verse `n` is at index `n - 1`.
    pub fn chapter(&self, translation: Translation, book: &str, chapter: u32) -> Option<&[String]> {
        self.book(translation, book)?
            .chapters
            .get(&chapter)
            .map(Vec::as_slice)
    }

    pub fn verse(&self, r: &VerseRef) -> Option<&str> {
        let verses = self.chapter(r.translation, &r.book, r.chapter)?;
        verses
            .get((r.verse as usize).checked_sub(1)?)
            .map(String::as_str)
    }

    /// Every verse as a token sequence, in corpus order.
    pub fn token_sequences(&self) -> Vec<Vec<String>> {
        self.translations
            .values()
            .flat_map(|books| books.iter())
            .flat_map(|b| b.chapters.values())
            .flat_map(|verses| verses.iter().map(|v| tokenize(v)))
            .collect()
    }
}

/// Parse `translation TAB book TAB chapter TAB verse TAB text` lines.
pub fn parse_bible<R: BufRead>(reader: R) -> Result<BibleCorpus> {
    let mut raw: BTreeMap<Translation, Vec<(String, BTreeMap<u32, BTreeMap<u32, String>>)>> =
        BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(5, '\t').collect();
        let parse_err = |message: String| DataError::Parse {
            line: lineno,
            message,
        };
        if fields.len() != 5 {
            return Err(parse_err(format!("expected 5 tab-separated fields, got {}", fields.len())));
        }
        let translation: Translation = fields[0]
            .parse()
            .map_err(|_| parse_err(format!("unknown translation {:?}", fields[0])))?;
        let book = fields[1].trim();
        let number = |s: &str, what: &str| -> Result<u32> {
            match s.trim().parse::<u32>() {
                Ok(n) if n > 0 => Ok(n),
                _ => Err(parse_err(format!("bad {what} number {s:?}"))),
            }
        };
        let chapter = number(fields[2], "chapter")?;
        let verse = number(fields[3], "verse")?;
        let text = fields[4].trim();
        if book.is_empty() {
            return Err(parse_err("empty book name".into()));
        }
        if text.is_empty() {
            return Err(parse_err("empty verse text".into()));
        }

        let books = raw.entry(translation).or_default();
        let pos = match books.iter().position(|(name, _)| name == book) {
            Some(p) => p,
            None => {
                books.push((book.to_string(), BTreeMap::new()));
                books.len() - 1
            }
        };
        let verses = books[pos].1.entry(chapter).or_default();
        if verses.insert(verse, text.to_string()).is_some() {
            return Err(DataError::Duplicate(format!(
                "{translation} {book} {chapter}:{verse}"
            )));
        }
    }

    let mut corpus = BibleCorpus::default();
    for (translation, books) in raw {
        let mut out = Vec::with_capacity(books.len());
        for (name, chapters) in books {
            let mut book = Book {
                name: name.clone(),
                chapters: BTreeMap::new(),
            };
            for (chapter, verses) in chapters {
                for (expected, &found) in (1u32..).zip(verses.keys()) {
                    if found != expected {
                        return Err(DataError::Gap {
                            translation,
                            book: name,
                            chapter,
                            missing: expected,
                        });
                    }
                }
                book.chapters.insert(chapter, verses.into_values().collect());
            }
            out.push(book);
        }
        corpus.translations.insert(translation, out);
    }
    Ok(corpus)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriviaQuestion {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub book: String,
    pub chapter: u32,
    pub verse: u32,
}

#[derive(Deserialize)]
struct TriviaRecord {
    question: String,
    answer: String,
    book: String,
    chapter: u32,
    verse: u32,
}

/// Parse trivia records in TSV (`question TAB answer TAB book TAB chapter
/// TAB verse`) or JSON-lines form; the form is detected per line. When a
/// corpus is given every reference must resolve in all of its translations.
pub fn parse_trivia<R: BufRead>(reader: R, corpus: Option<&BibleCorpus>) -> Result<Vec<TriviaQuestion>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let record = if trimmed.starts_with('{') {
            serde_json::from_str::<TriviaRecord>(trimmed).map_err(|e| DataError::Parse {
                line: lineno,
                message: e.to_string(),
            })?
        } else {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(DataError::Parse {
                    line: lineno,
                    message: format!("expected 5 tab-separated fields, got {}", fields.len()),
                });
            }
            if out.is_empty() && fields[0].trim().eq_ignore_ascii_case("question") {
                continue;
            }
            let number = |s: &str| {
                s.trim().parse::<u32>().map_err(|_| DataError::Parse {
                    line: lineno,
                    message: format!("bad number {s:?}"),
                })
            };
            TriviaRecord {
                question: fields[0].trim().to_string(),
                answer: fields[1].trim().to_string(),
                book: fields[2].trim().to_string(),
                chapter: number(fields[3])?,
                verse: number(fields[4])?,
            }
        };
        out.push(TriviaQuestion {
            id: format!("q{}", out.len() + 1),
            question: record.question,
            answer: record.answer,
            book: record.book,
            chapter: record.chapter,
            verse: record.verse,
        });
    }
    if let Some(corpus) = corpus {
        validate_trivia(&out, corpus)?;
    }
    Ok(out)
}

pub fn validate_trivia(questions: &[TriviaQuestion], corpus: &BibleCorpus) -> Result<()> {
    for q in questions {
        for translation in corpus.translations() {
            let r = VerseRef {
                translation,
                book: q.book.clone(),
                chapter: q.chapter,
                verse: q.verse,
            };
            if corpus.verse(&r).is_none() {
                return Err(DataError::Validation {
                    question: q.id.clone(),
                    message: format!("reference {r} does not resolve"),
                });
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContextMode {
    /// This many consecutive verses, gold included.
    Window(usize),
    /// The whole gold chapter.
    Chapter,
}

impl FromStr for ContextMode {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("chapter") {
            return Ok(ContextMode::Chapter);
        }
        s.strip_prefix("window-")
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .map(ContextMode::Window)
            .ok_or_else(|| DataError::UnknownMode(s.to_string()))
    }
}

impl fmt::Display for ContextMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ContextMode::Window(n) => write!(f, "window-{n}"),
            ContextMode::Chapter => f.write_str("chapter"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub mode: ContextMode,
    pub translations: Vec<Translation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub book: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chapter: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verse: Option<u32>,
    pub text: String,
    pub label: u8,
}

/// One question with its ordered candidates; exactly one is labelled 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionGroup {
    pub qid: String,
    pub translation: String,
    pub question: String,
    pub candidates: Vec<Candidate>,
}

impl QuestionGroup {
    pub fn gold_index(&self) -> Option<usize> {
        self.candidates.iter().position(|c| c.label == 1)
    }

    pub fn labels(&self) -> Vec<u8> {
        self.candidates.iter().map(|c| c.label).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |message: String| DataError::Validation {
            question: self.qid.clone(),
            message,
        };
        if self.candidates.is_empty() {
            return Err(invalid("no candidates".into()));
        }
        if let Some(c) = self.candidates.iter().find(|c| c.label > 1) {
            return Err(invalid(format!("label {} is not 0 or 1", c.label)));
        }
        let positives = self.candidates.iter().filter(|c| c.label == 1).count();
        if positives != 1 {
            return Err(invalid(format!("expected one positive candidate, got {positives}")));
        }
        Ok(())
    }
}

pub fn read_groups<R: BufRead>(reader: R) -> Result<Vec<QuestionGroup>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let group: QuestionGroup = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        group.validate()?;
        out.push(group);
    }
    Ok(out)
}

pub fn write_groups<W: Write>(mut writer: W, groups: &[QuestionGroup]) -> Result<()> {
    for g in groups {
        let line = serde_json::to_string(g).expect("groups always serialize");
        writeln!(writer, "{line}")?;
    }
    Ok(())
}

/// Zero-based index of the first candidate verse for a window of `size`
/// verses around `gold` (zero-based) in a chapter of `len` verses.
fn window_start(gold: usize, len: usize, size: usize) -> usize {
    if len <= size {
        return 0;
    }
    let before = (size - 1) / 2;
    gold.saturating_sub(before).min(len - size)
}

/// One group per (question, translation), in question-major order.
pub fn build_bibleqa(
    corpus: &BibleCorpus,
    questions: &[TriviaQuestion],
    spec: &DatasetSpec,
) -> Result<Vec<QuestionGroup>> {
    let mut groups = Vec::with_capacity(questions.len() * spec.translations.len());
    for q in questions {
        for &translation in &spec.translations {
            let unresolved = || DataError::Validation {
                question: q.id.clone(),
                message: format!(
                    "reference {} {}:{} not found in {translation}",
                    q.book, q.chapter, q.verse
                ),
            };
            let verses = corpus
                .chapter(translation, &q.book, q.chapter)
                .ok_or_else(unresolved)?;
            let gold = (q.verse as usize)
                .checked_sub(1)
                .filter(|&g| g < verses.len())
                .ok_or_else(unresolved)?;
            let book = corpus
                .book_name(translation, &q.book)
                .unwrap_or(&q.book)
                .to_string();
            let range = match spec.mode {
                ContextMode::Chapter => 0..verses.len(),
                ContextMode::Window(size) => {
                    let start = window_start(gold, verses.len(), size);
                    start..(start + size).min(verses.len())
                }
            };
            let candidates = range
                .map(|i| Candidate {
                    book: Some(book.clone()),
                    chapter: Some(q.chapter),
                    verse: Some(i as u32 + 1),
                    text: verses[i].clone(),
                    label: u8::from(i == gold),
                })
                .collect();
            groups.push(QuestionGroup {
                qid: q.id.clone(),
                translation: translation.code().to_string(),
                question: q.question.clone(),
                candidates,
            });
        }
    }
    Ok(groups)
}

/// Half-open character range `[start, end)` of one sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

const ABBREVIATIONS: [&str; 9] = [
    "Mr.", "Mrs.", "Dr.", "St.", "e.g.", "i.e.", "etc.", "vs.", "No.",
];

/// Split a paragraph into sentence spans (character offsets).
///
/// A sentence ends after `.`, `!` or `?` when it is followed by whitespace
/// and then an uppercase letter or the end of the text. A period closing one
/// of a fixed set of abbreviations never ends a sentence. Trailing
/// whitespace belongs to the sentence it follows, so spans tile the input.
pub fn split_sentences(paragraph: &str) -> Vec<Span> {
    let chars: Vec<char> = paragraph.chars().collect();
    let n = chars.len();
    let mut spans = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < n {
        let c = chars[i];
        if matches!(c, '.' | '!' | '?') && i + 1 < n && chars[i + 1].is_whitespace() {
            let mut next = i + 1;
            while next < n && chars[next].is_whitespace() {
                next += 1;
            }
            let boundary = next == n || chars[next].is_uppercase();
            if boundary && !(c == '.' && ends_with_abbreviation(&chars[start..=i])) {
                spans.push(Span { start, end: next });
                start = next;
                i = next;
                continue;
            }
        }
        i += 1;
    }
    if start < n {
        spans.push(Span { start, end: n });
    }
    spans
}

fn ends_with_abbreviation(text: &[char]) -> bool {
    let word_start = text
        .iter()
        .rposition(|c| c.is_whitespace())
        .map_or(0, |p| p + 1);
    let word: String = text[word_start..]
        .iter()
        .skip_while(|c| !c.is_alphanumeric())
        .collect();
    ABBREVIATIONS.contains(&word.as_str())
}

/// A span-annotated reading-comprehension record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanRecord {
    pub context: String,
    pub question: String,
    pub answer_text: String,
    pub answer_start: usize,
}

#[derive(Debug, Default)]
pub struct SpanConversion {
    pub groups: Vec<QuestionGroup>,
    /// Records whose answer crosses a sentence boundary.
    pub dropped: usize,
    pub rejected: Vec<DataError>,
}

/// Turn span-level records into sentence-selection groups: the sentence
/// holding the answer start is the positive.
pub fn convert_span_dataset(records: &[SpanRecord]) -> SpanConversion {
    let mut out = SpanConversion::default();
    for (index, r) in records.iter().enumerate() {
        let chars: Vec<char> = r.context.chars().collect();
        if r.answer_start >= chars.len() {
            out.rejected.push(DataError::Record {
                index,
                message: format!(
                    "answer_start {} outside context of {} characters",
                    r.answer_start,
                    chars.len()
                ),
            });
            continue;
        }
        let spans = split_sentences(&r.context);
        let text_of = |s: &Span| chars[s.start..s.end].iter().collect::<String>();
        let Some(hit) = spans
            .iter()
            .position(|s| s.start <= r.answer_start && r.answer_start < s.end)
        else {
            continue;
        };
        let answer_end = r.answer_start + r.answer_text.chars().count();
        let content_end = spans[hit].start + text_of(&spans[hit]).trim_end().chars().count();
        if answer_end > content_end.max(r.answer_start + 1) {
            log::warn!("record {index}: answer crosses a sentence boundary, dropped");
            out.dropped += 1;
            continue;
        }
        let candidates = spans
            .iter()
            .enumerate()
            .map(|(k, s)| Candidate {
                book: None,
                chapter: None,
                verse: None,
                text: text_of(s).trim().to_string(),
                label: u8::from(k == hit),
            })
            .collect();
        out.groups.push(QuestionGroup {
            qid: format!("s{}", index + 1),
            translation: "span".to_string(),
            question: r.question.clone(),
            candidates,
        });
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<QuestionGroup>,
    pub val: Vec<QuestionGroup>,
    pub test: Vec<QuestionGroup>,
}

/// Seeded 63/7/30 split over question ids: 30% test, then 10% of the rest
/// for validation. Every translation of a question lands in one partition.
pub fn split_dataset(groups: &[QuestionGroup], seed: u64) -> Result<DatasetSplit> {
    let mut seen = HashSet::new();
    let mut ids: Vec<&str> = groups
        .iter()
        .map(|g| g.qid.as_str())
        .filter(|id| seen.insert(*id))
        .collect();
    let n = ids.len();
    if n < 10 {
        return Err(DataError::TooFewQuestions(n));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test_count = n * 3 / 10;
    let val_count = (n - test_count) / 10;
    let test: HashSet<&str> = ids[..test_count].iter().copied().collect();
    let val: HashSet<&str> = ids[test_count..test_count + val_count]
        .iter()
        .copied()
        .collect();

    let mut split = DatasetSplit::default();
    for g in groups {
        let bucket = if test.contains(g.qid.as_str()) {
            &mut split.test
        } else if val.contains(g.qid.as_str()) {
            &mut split.val
        } else {
            &mut split.train
        };
        bucket.push(g.clone());
    }
    Ok(split)
}
