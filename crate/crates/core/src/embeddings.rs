//! Word-vector tables and a CBOW trainer.
//!
//! Index 0 is always the padding token and index 1 the unknown-word token.
//! The padding row is all zeros in every table this module produces.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("token {0:?} is not in the vocabulary")]
    NotFound(String),
    #[error("corpus has {got} tokens, need at least {needed}")]
    InsufficientData { needed: usize, got: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EmbeddingError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::new()
    }
}

impl Vocabulary {
    /// A vocabulary holding only the reserved entries.
    pub fn new() -> Self {
        let mut v = Vocabulary {
            index: HashMap::new(),
            tokens: Vec::new(),
        };
        v.add(PAD_TOKEN);
        v.add(UNK_TOKEN);
        v
    }

    /// Index of `token`, inserting it if new.
    pub fn add(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Index of `token`, or [`UNK`] when absent.
    pub fn lookup(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Non-reserved tokens in index order.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.tokens[2..].iter().map(String::as_str)
    }
}

/// A `|V| x dim` table of word vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub vocab: Vocabulary,
    pub dim: usize,
    table: Vec<f64>,
    pub trainable: bool,
}

impl EmbeddingMatrix {
    /// Build a matrix from a vocabulary and a row-major table. The padding
    /// row is forced to zero.
    pub fn new(vocab: Vocabulary, dim: usize, mut table: Vec<f64>) -> Result<Self> {
        if dim == 0 || table.len() != vocab.len() * dim {
            return Err(EmbeddingError::InvalidConfig(format!(
                "table of {} values does not fit {} rows of dimension {dim}",
                table.len(),
                vocab.len()
            )));
        }
        table[..dim].fill(0.0);
        Ok(EmbeddingMatrix {
            vocab,
            dim,
            table,
            trainable: false,
        })
    }

    pub fn row(&self, index: usize) -> &[f64] {
        &self.table[index * self.dim..(index + 1) * self.dim]
    }

    pub fn vector(&self, token: &str) -> Option<&[f64]> {
        self.vocab.get(token).map(|i| self.row(i))
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    /// Uniformly rescale every row.
    pub fn scaled(&self, factor: f64) -> EmbeddingMatrix {
        let mut out = self.clone();
        out.table.iter_mut().for_each(|v| *v *= factor);
        out
    }

    /// Write the non-reserved rows in `token v1 v2 ...` text form.
    pub fn write_text<W: Write>(&self, mut writer: W) -> Result<()> {
        for (i, word) in self.vocab.words().enumerate() {
            write!(writer, "{word}")?;
            for v in self.row(i + 2) {
                write!(writer, " {v}")?;
            }
            writeln!(writer)?;
        }
        Ok(())
    }
}

fn set_unk_to_mean(table: &mut [f64], rows: usize, dim: usize) {
    if rows <= 2 {
        return;
    }
    let count = (rows - 2) as f64;
    for d in 0..dim {
        let mut acc = 0.0;
        for r in 2..rows {
            acc += table[r * dim + d];
        }
        table[UNK * dim + d] = acc / count;
    }
}

/// Read `token v1 ... v_dim` lines. The unknown-word row becomes the mean
/// of all loaded vectors; a repeated token keeps its first vector.
pub fn load_pretrained<R: BufRead>(reader: R, expected_dim: usize) -> Result<EmbeddingMatrix> {
    if expected_dim == 0 {
        return Err(EmbeddingError::InvalidConfig("dimension must be positive".into()));
    }
    let mut vocab = Vocabulary::new();
    let mut table = vec![0.0; 2 * expected_dim];
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let mut fields = line.split(' ').filter(|f| !f.is_empty());
        let Some(token) = fields.next() else {
            continue;
        };
        let values = fields
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| EmbeddingError::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
        if values.len() != expected_dim {
            return Err(EmbeddingError::Parse {
                line: lineno,
                message: format!("expected {expected_dim} components, got {}", values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::Parse {
                line: lineno,
                message: "non-finite component".into(),
            });
        }
        if vocab.get(token).is_some() {
            log::warn!("line {lineno}: duplicate token {token:?} ignored");
            continue;
        }
        vocab.add(token);
        table.extend_from_slice(&values);
    }
    set_unk_to_mean(&mut table, vocab.len(), expected_dim);
    EmbeddingMatrix::new(vocab, expected_dim, table)
}

/// Join two tables column-wise over the union of their vocabularies.
/// A token missing from one side gets zeros in that side's columns.
pub fn concat_embeddings(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> EmbeddingMatrix {
    let mut vocab = a.vocab.clone();
    for word in b.vocab.words() {
        vocab.add(word);
    }
    let dim = a.dim + b.dim;
    let mut table = vec![0.0; vocab.len() * dim];
    for i in 1..vocab.len() {
        let token = vocab.token(i).expect("dense indices");
        let row = &mut table[i * dim..(i + 1) * dim];
        if let Some(v) = a.vector(token) {
            row[..a.dim].copy_from_slice(v);
        }
        if let Some(v) = b.vector(token) {
            row[a.dim..].copy_from_slice(v);
        }
    }
    EmbeddingMatrix {
        vocab,
        dim,
        table,
        trainable: a.trainable || b.trainable,
    }
}

/// A padded `[max_len, dim]` block of word vectors plus the number of real
/// (non-padding) rows at its head.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedSequence {
    pub values: Tensor,
    pub len: usize,
}

impl EmbeddedSequence {
    /// Treat every row of a `[T, dim]` tensor as a real token.
    pub fn from_rows(values: Tensor) -> Self {
        let len = values.shape()[0];
        EmbeddedSequence { values, len }
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn max_len(&self) -> usize {
        self.values.shape()[0]
    }

    /// The real rows, with at least one row kept so that an empty input is
    /// seen as a single padding row.
    pub fn active_rows(&self) -> usize {
        self.len.max(1)
    }

    /// Append `extra` padding rows.
    pub fn padded(&self, extra: usize) -> EmbeddedSequence {
        let mut data = self.values.data().to_vec();
        data.resize(data.len() + extra * self.dim(), 0.0);
        EmbeddedSequence {
            values: Tensor::matrix(self.max_len() + extra, self.dim(), data).expect("consistent"),
            len: self.len,
        }
    }
}

/// Look up each token, truncating at the tail beyond `max_len` and padding
/// with zero rows up to it. Unknown tokens map to the unknown-word row.
pub fn embed_sequence(tokens: &[String], m: &EmbeddingMatrix, max_len: usize) -> EmbeddedSequence {
    let max_len = max_len.max(1);
    let len = tokens.len().min(max_len);
    let mut data = vec![0.0; max_len * m.dim];
    for (i, token) in tokens.iter().take(len).enumerate() {
        data[i * m.dim..(i + 1) * m.dim].copy_from_slice(m.row(m.vocab.lookup(token)));
    }
    EmbeddedSequence {
        values: Tensor::matrix(max_len, m.dim, data).expect("shape matches data"),
        len,
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// The `k` words closest to `word` by cosine similarity, best first.
pub fn nearest_neighbors(word: &str, m: &EmbeddingMatrix, k: usize) -> Result<Vec<(String, f64)>> {
    let query = m
        .vocab
        .get(word)
        .filter(|&i| i > UNK)
        .ok_or_else(|| EmbeddingError::NotFound(word.to_string()))?;
    let q = m.row(query);
    let mut scored: Vec<(usize, f64)> = (2..m.vocab.len())
        .filter(|&i| i != query)
        .map(|i| (i, cosine(q, m.row(i))))
        .collect();
    // Stable sort keeps vocabulary order among equal scores.
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(i, s)| (m.vocab.token(i).expect("dense").to_string(), s))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CbowObjective {
    /// Logistic loss on the centre word and `negative` noise words drawn
    /// from the unigram distribution raised to 0.75.
    NegativeSampling,
    /// Exact softmax over the vocabulary; only sensible for tiny vocabularies.
    FullSoftmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbowConfig {
    /// Context words taken on each side of the centre word.
    pub window: usize,
    pub dim: usize,
    pub negative: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub objective: CbowObjective,
}

impl Default for CbowConfig {
    fn default() -> Self {
        CbowConfig {
            window: 5,
            dim: 200,
            negative: 5,
            epochs: 5,
            learning_rate: 0.05,
            seed: 1,
            objective: CbowObjective::NegativeSampling,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CbowOutcome {
    pub matrix: EmbeddingMatrix,
    /// Mean loss per example before any update.
    pub initial_loss: f64,
    /// Mean loss per example after the last epoch, measured the same way.
    pub final_loss: f64,
    /// Running mean loss seen during each epoch.
    pub epoch_losses: Vec<f64>,
}

struct NoiseTable {
    cumulative: Vec<f64>,
}

impl NoiseTable {
    fn new(counts: &[u64]) -> Self {
        let mut acc = 0.0;
        let cumulative = counts
            .iter()
            .map(|&c| {
                acc += (c as f64).powf(0.75);
                acc
            })
            .collect();
        NoiseTable { cumulative }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let total = *self.cumulative.last().expect("non-empty vocabulary");
        let u = rng.gen::<f64>() * total;
        self.cumulative
            .partition_point(|&c| c <= u)
            .min(self.cumulative.len() - 1)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

struct Cbow<'a> {
    cfg: &'a CbowConfig,
    dim: usize,
    input: Vec<f64>,
    output: Vec<f64>,
    noise: NoiseTable,
}

impl Cbow<'_> {
    fn context_mean(&self, context: &[usize]) -> Vec<f64> {
        let mut h = vec![0.0; self.dim];
        for &c in context {
            for (hd, v) in h.iter_mut().zip(&self.input[c * self.dim..(c + 1) * self.dim]) {
                *hd += v;
            }
        }
        let n = context.len() as f64;
        h.iter_mut().for_each(|v| *v /= n);
        h
    }

    fn score(&self, h: &[f64], word: usize) -> f64 {
        h.iter()
            .zip(&self.output[word * self.dim..(word + 1) * self.dim])
            .map(|(a, b)| a * b)
            .sum()
    }

    /// Targets (word, label) for one example.
    fn targets(&self, centre: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, f64)> {
        let mut t = vec![(centre, 1.0)];
        for _ in 0..self.cfg.negative {
            let w = self.noise.sample(rng);
            if w != centre {
                t.push((w, 0.0));
            }
        }
        t
    }

    /// Loss of one example; when `lr` is given the tables are updated.
    fn example(&mut self, centre: usize, context: &[usize], rng: &mut ChaCha8Rng, lr: Option<f64>) -> f64 {
        let dim = self.dim;
        let h = self.context_mean(context);
        let mut grad_h = vec![0.0; dim];
        let loss = match self.cfg.objective {
            CbowObjective::NegativeSampling => {
                let mut loss = 0.0;
                for (word, label) in self.targets(centre, rng) {
                    let s = self.score(&h, word);
                    loss -= if label == 1.0 { log_sigmoid(s) } else { log_sigmoid(-s) };
                    if let Some(lr) = lr {
                        let g = (label - sigmoid(s)) * lr;
                        let out = &mut self.output[word * dim..(word + 1) * dim];
                        for d in 0..dim {
                            grad_h[d] += g * out[d];
                            out[d] += g * h[d];
                        }
                    }
                }
                loss
            }
            CbowObjective::FullSoftmax => {
                let vocab = self.output.len() / dim;
                let scores: Vec<f64> = (0..vocab).map(|w| self.score(&h, w)).collect();
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                let loss = -(scores[centre] - max - total.ln());
                if let Some(lr) = lr {
                    for (w, s) in scores.iter().enumerate() {
                        let p = (s - max).exp() / total;
                        let g = (f64::from(u8::from(w == centre)) - p) * lr;
                        let out = &mut self.output[w * dim..(w + 1) * dim];
                        for d in 0..dim {
                            grad_h[d] += g * out[d];
                            out[d] += g * h[d];
                        }
                    }
                }
                loss
            }
        };
        if lr.is_some() {
            let n = context.len() as f64;
            for &c in context {
                // Reserved rows never appear as context, so padding stays zero.
                let row = &mut self.input[c * dim..(c + 1) * dim];
                for d in 0..dim {
                    row[d] += grad_h[d] / n;
                }
            }
        }
        loss
    }
}

/// (centre, context) index pairs for every position with a non-empty
/// context, in corpus order.
fn examples(sentences: &[Vec<usize>], window: usize) -> Vec<(usize, Vec<usize>)> {
    let mut out = Vec::new();
    for s in sentences {
        for (i, &centre) in s.iter().enumerate() {
            let lo = i.saturating_sub(window);
            let hi = (i + window + 1).min(s.len());
            let context: Vec<usize> = (lo..hi).filter(|&j| j != i).map(|j| s[j]).collect();
            if !context.is_empty() {
                out.push((centre, context));
            }
        }
    }
    out
}

/// Train CBOW word vectors over `corpus` (one token sequence per sentence).
pub fn train_cbow(corpus: &[Vec<String>], cfg: &CbowConfig) -> Result<CbowOutcome> {
    if cfg.window == 0 || cfg.dim == 0 {
        return Err(EmbeddingError::InvalidConfig("window and dim must be at least 1".into()));
    }
    if !(cfg.learning_rate > 0.0) {
        return Err(EmbeddingError::InvalidConfig("learning rate must be positive".into()));
    }
    let total_tokens: usize = corpus.iter().map(Vec::len).sum();
    if total_tokens < cfg.window + 1 {
        return Err(EmbeddingError::InsufficientData {
            needed: cfg.window + 1,
            got: total_tokens,
        });
    }

    let mut counts: HashMap<&str, u64> = HashMap::new();
    for token in corpus.iter().flatten() {
        *counts.entry(token.as_str()).or_default() += 1;
    }
    let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let mut vocab = Vocabulary::new();
    let mut freq = vec![0u64; 2];
    for (token, count) in &ranked {
        vocab.add(token);
        freq.push(*count);
    }
    let sentences: Vec<Vec<usize>> = corpus
        .iter()
        .map(|s| s.iter().map(|t| vocab.lookup(t)).collect())
        .collect();
    let examples = examples(&sentences, cfg.window);
    if examples.is_empty() {
        return Err(EmbeddingError::InsufficientData {
            needed: cfg.window + 1,
            got: total_tokens,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = cfg.dim;
    let rows = vocab.len();
    let mut input = vec![0.0; rows * dim];
    for v in input[2 * dim..].iter_mut() {
        *v = (rng.gen::<f64>() - 0.5) / dim as f64;
    }
    let mut model = Cbow {
        cfg,
        dim,
        input,
        output: vec![0.0; rows * dim],
        noise: NoiseTable::new(&freq),
    };

    let eval_seed = cfg.seed ^ 0x9e37_79b9_7f4a_7c15;
    let measure = |model: &mut Cbow| {
        let mut eval_rng = ChaCha8Rng::seed_from_u64(eval_seed);
        let total: f64 = examples
            .iter()
            .map(|(c, ctx)| model.example(*c, ctx, &mut eval_rng, None))
            .sum();
        total / examples.len() as f64
    };
    let initial_loss = measure(&mut model);

    let total_steps = (cfg.epochs * examples.len()).max(1) as f64;
    let mut step = 0usize;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut acc = 0.0;
        for (centre, context) in &examples {
            let lr = cfg.learning_rate * (1.0 - step as f64 / total_steps).max(1e-4);
            acc += model.example(*centre, context, &mut rng, Some(lr));
            step += 1;
        }
        epoch_losses.push(acc / examples.len() as f64);
    }
    let final_loss = measure(&mut model);

    let mut table = model.input;
    set_unk_to_mean(&mut table, rows, dim);
    let mut matrix = EmbeddingMatrix::new(vocab, dim, table)?;
    matrix.trainable = true;
    Ok(CbowOutcome {
        matrix,
        initial_loss,
        final_loss,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn load_examples() {
        let m = load_pretrained("cat 0.1 0.2\n".as_bytes(), 2).unwrap();
        assert_eq!(m.vector("cat").unwrap(), &[0.1, 0.2]);
        assert_eq!(m.row(UNK), &[0.1, 0.2]);
        assert_eq!(m.row(PAD), &[0.0, 0.0]);

        let m = load_pretrained("".as_bytes(), 2).unwrap();
        assert_eq!(m.vocab.len(), 2);

        match load_pretrained("cat 0.1 0.2\ndog 1 2 3\n".as_bytes(), 2) {
            Err(EmbeddingError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn load_keeps_first_duplicate_and_averages_unk() {
        let m = load_pretrained("a 1 0\nb 3 2\na 9 9\n".as_bytes(), 2).unwrap();
        assert_eq!(m.vocab.len(), 4);
        assert_eq!(m.vector("a").unwrap(), &[1.0, 0.0]);
        assert_eq!(m.row(UNK), &[2.0, 1.0]);
    }

    #[test]
    fn text_round_trip() {
        let m = load_pretrained("a 0.1 -2.5\nb 3e-7 2\n".as_bytes(), 2).unwrap();
        let mut buf = Vec::new();
        m.write_text(&mut buf).unwrap();
        let back = load_pretrained(buf.as_slice(), 2).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn concat_examples() {
        let a = load_pretrained("both 1 2\nonly_a 3 4\n".as_bytes(), 2).unwrap();
        let b = load_pretrained("both 5 6 7\nonly_b 8 9 10\n".as_bytes(), 3).unwrap();
        let c = concat_embeddings(&a, &b);
        assert_eq!(c.dim, 5);
        assert_eq!(c.vector("both").unwrap(), &[1.0, 2.0, 5.0, 6.0, 7.0]);
        assert_eq!(c.vector("only_a").unwrap(), &[3.0, 4.0, 0.0, 0.0, 0.0]);
        assert_eq!(c.vector("only_b").unwrap(), &[0.0, 0.0, 8.0, 9.0, 10.0]);
        assert_eq!(c.row(PAD), &[0.0; 5]);
        assert_eq!(c.vocab.len(), 2 + 3);
    }

    #[test]
    fn concat_disjoint_vocabularies() {
        let a = load_pretrained("x 1\ny 2\n".as_bytes(), 1).unwrap();
        let b = load_pretrained("z 1\n".as_bytes(), 1).unwrap();
        assert_eq!(concat_embeddings(&a, &b).vocab.len(), 2 + 2 + 1);
    }

    #[test]
    fn embed_examples() {
        let m = load_pretrained("a 1 1\nb 2 2\n".as_bytes(), 2).unwrap();
        let s = embed_sequence(&toks("a b"), &m, 4);
        assert_eq!(s.values.shape(), &[4, 2]);
        assert_eq!(s.values.data(), &[1.0, 1.0, 2.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(s.len, 2);

        let s = embed_sequence(&toks("zzz"), &m, 2);
        assert_eq!(s.values.row(0), m.row(UNK));

        let long = toks("a b a b a b a b a b");
        let s = embed_sequence(&long, &m, 4);
        assert_eq!(s.len, 4);
        assert_eq!(s.values.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);

        let s = embed_sequence(&[], &m, 3);
        assert_eq!(s.len, 0);
        assert_eq!(s.active_rows(), 1);
        assert!(s.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn neighbour_examples() {
        let m = load_pretrained("v 1 0\nw 2 0\nu 0 1\n".as_bytes(), 2).unwrap();
        let n = nearest_neighbors("v", &m, 2).unwrap();
        assert_eq!(n[0], ("w".to_string(), 1.0));
        assert_eq!(n[1], ("u".to_string(), 0.0));
        assert!(matches!(
            nearest_neighbors("nope", &m, 1),
            Err(EmbeddingError::NotFound(_))
        ));
    }

    #[test]
    fn cbow_rejects_tiny_corpus() {
        let cfg = CbowConfig::default();
        assert!(matches!(
            train_cbow(&[toks("a b c")], &cfg),
            Err(EmbeddingError::InsufficientData { .. })
        ));
    }

    #[test]
    fn cbow_full_softmax_lowers_loss() {
        let corpus: Vec<Vec<String>> = (0..40).map(|i| toks(if i % 2 == 0 { "a b c d" } else { "e f g h" })).collect();
        let cfg = CbowConfig {
            window: 2,
            dim: 8,
            epochs: 5,
            objective: CbowObjective::FullSoftmax,
            ..CbowConfig::default()
        };
        let out = train_cbow(&corpus, &cfg).unwrap();
        assert!(out.final_loss < out.initial_loss);
        assert!(out.matrix.row(PAD).iter().all(|&v| v == 0.0));
    }
}
