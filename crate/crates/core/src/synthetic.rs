//! Seeded generators for test corpora: a separable answer-selection task,
//! a two-cluster embedding corpus, and a miniature multi-translation Bible
//! with trivia questions.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Candidate, QuestionGroup, Translation};
use crate::embeddings::{EmbeddingMatrix, Vocabulary};

/// Answer selection where the positive candidate repeats one question word.
///
/// Questions are drawn from `content` words; candidates are `filler` words,
/// and the positive one additionally carries one word copied from its
/// question. Words are named `{prefix}c{i}` and `{prefix}f{i}`, so two
/// prefixes give two disjoint vocabularies for the same task.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableTask {
    pub content: usize,
    pub filler: usize,
    pub candidates: usize,
    pub question_len: usize,
    pub answer_len: usize,
}

impl Default for SeparableTask {
    fn default() -> Self {
        SeparableTask {
            content: 40,
            filler: 40,
            candidates: 3,
            question_len: 4,
            answer_len: 5,
        }
    }
}

impl SeparableTask {
    pub fn content_words(&self, prefix: &str) -> Vec<String> {
        (0..self.content).map(|i| format!("{prefix}c{i}")).collect()
    }

    pub fn filler_words(&self, prefix: &str) -> Vec<String> {
        (0..self.filler).map(|i| format!("{prefix}f{i}")).collect()
    }

    /// `n` groups; the gold position is uniform over candidates.
    pub fn groups(&self, prefix: &str, n: usize, seed: u64) -> Vec<QuestionGroup> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let content = self.content_words(prefix);
        let filler = self.filler_words(prefix);
        (0..n)
            .map(|i| {
                let question: Vec<&String> = (0..self.question_len)
                    .map(|_| content.choose(&mut rng).expect("content words"))
                    .collect();
                let gold = rng.gen_range(0..self.candidates);
                let candidates = (0..self.candidates)
                    .map(|c| {
                        let mut words: Vec<&String> = (0..self.answer_len)
                            .map(|_| filler.choose(&mut rng).expect("filler words"))
                            .collect();
                        if c == gold {
                            let at = rng.gen_range(0..words.len());
                            words[at] = question.choose(&mut rng).expect("question words");
                        }
                        Candidate {
                            book: None,
                            chapter: None,
                            verse: None,
                            text: join(&words),
                            label: u8::from(c == gold),
                        }
                    })
                    .collect();
                QuestionGroup {
                    qid: format!("{prefix}{i}"),
                    translation: "synthetic".into(),
                    question: join(&question),
                    candidates,
                }
            })
            .collect()
    }

    /// Embeddings for the vocabularies of every prefix. Each word is its
    /// class centroid (content or filler) plus scaled noise; the
    /// centroids depend only on `seed`, so every prefix shares them.
    pub fn embeddings(&self, prefixes: &[&str], dim: usize, noise: f64, seed: u64) -> EmbeddingMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centroid = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let content_c = centroid(&mut rng);
        let filler_c = centroid(&mut rng);

        let mut vocab = Vocabulary::new();
        let mut table = vec![0.0; vocab.len() * dim];
        for prefix in prefixes {
            for (words, c) in [
                (self.content_words(prefix), &content_c),
                (self.filler_words(prefix), &filler_c),
            ] {
                for w in words {
                    vocab.add(&w);
                    table.extend(c.iter().map(|&x| x + noise * small_noise(&mut rng)));
                }
            }
        }
        EmbeddingMatrix::new(vocab, dim, table).expect("table matches vocabulary")
    }
}

/// Sum of three uniforms on [-1, 1): roughly normal, unit variance.
fn small_noise(rng: &mut ChaCha8Rng) -> f64 {
    (0..3).map(|_| rng.gen_range(-1.0..1.0)).sum()
}

fn join(words: &[&String]) -> String {
    words.iter().map(|w| w.as_str()).collect::<Vec<_>>().join(" ")
}

/// Sentences that each use words from only one of two clusters,
/// `a0..a{k}` and `b0..b{k}`.
pub fn two_cluster_corpus(words_per_cluster: usize, sentences: usize, len: usize, seed: u64) -> Vec<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..sentences)
        .map(|s| {
            let cluster = if s % 2 == 0 { 'a' } else { 'b' };
            (0..len)
                .map(|_| format!("{cluster}{}", rng.gen_range(0..words_per_cluster)))
                .collect()
        })
        .collect()
}

/// A tiny parallel Bible and trivia file in the on-disk TSV formats.
#[derive(Debug, Clone, PartialEq)]
pub struct BibleFixture {
    pub bible_tsv: String,
    pub trivia_tsv: String,
    /// Verse count of every chapter, `chapters[book][chapter - 1]`.
    pub chapters: Vec<Vec<usize>>,
}

/// Books `Book1..`, each with `chapters_per_book` chapters of 1 to 30
/// verses. Every translation words each verse differently. Questions point
/// at uniformly chosen verses.
pub fn bible_fixture(books: usize, chapters_per_book: usize, questions: usize, seed: u64) -> BibleFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chapters: Vec<Vec<usize>> = (0..books)
        .map(|_| (0..chapters_per_book).map(|_| rng.gen_range(1..=30)).collect())
        .collect();
    let lexicon: Vec<String> = (0..300).map(|i| format!("w{i}")).collect();

    let mut texts = Vec::new();
    for (b, book) in chapters.iter().enumerate() {
        for (c, &verses) in book.iter().enumerate() {
            for v in 0..verses {
                let words: Vec<&String> = (0..rng.gen_range(6..14))
                    .map(|_| lexicon.choose(&mut rng).expect("lexicon"))
                    .collect();
                texts.push((b, c + 1, v + 1, join(&words)));
            }
        }
    }

    let mut bible_tsv = String::new();
    for (t, translation) in Translation::ALL.iter().enumerate() {
        for (b, c, v, text) in &texts {
            let marker = ["thee", "you", "ye", "one"][t];
            let _ = writeln!(bible_tsv, "{}\tBook{}\t{c}\t{v}\t{text} {marker}", translation.code(), b + 1);
        }
    }

    let mut trivia_tsv = String::from("question\tanswer\tbook\tchapter\tverse\n");
    for i in 0..questions {
        let (b, c, v, text) = texts.choose(&mut rng).expect("verses");
        let answer = text.split(' ').next().unwrap_or("w0");
        let _ = writeln!(trivia_tsv, "who is {answer} number {i}\t{answer}\tBook{}\t{c}\t{v}", b + 1);
    }
    BibleFixture {
        bible_tsv,
        trivia_tsv,
        chapters,
    }
}
