//! Pair scorers mapping an embedded question and an embedded candidate to
//! the probability that the candidate answers the question.
//!
//! Three architectures share one parameter-naming scheme and one forward
//! contract:
//!
//! * [`RnnPairModel`]: separate LSTMs read the question and the candidate;
//!   their final hidden states are concatenated and fed to a sigmoid unit.
//! * [`CnnPairModel`]: one filter bank slides over `k`-token windows of each
//!   side. Relu and max-pooling give a fixed vector per side, and the pair
//!   goes to the same sigmoid unit.
//! * [`BidafModel`]: a shared LSTM encodes both sides and a trainable
//!   similarity matrix drives attention in both directions. A second LSTM
//!   reads the query-aware candidate representation; its last state is scored.
//!
//! Every model consumes only the real rows of an [`EmbeddedSequence`], so
//! trailing padding never changes an output.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::EmbeddedSequence;
use crate::tensor::{concat_all, Graph, ParamVars, ParameterSet, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("embedding dimension {got} does not match the model's {expected}")]
    EmbeddingDim { expected: usize, got: usize },
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    Parameter {
        name: String,
        expected: Vec<usize>,
        found: Option<Vec<usize>>,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Rnn,
    Cnn,
    Bidaf,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Rnn, ModelKind::Cnn, ModelKind::Bidaf];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Rnn => "rnn",
            ModelKind::Cnn => "cnn",
            ModelKind::Bidaf => "bidaf",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| ModelError::Config(format!("unknown model kind {s:?}")))
    }
}

/// How the attention-flow model turns its modeling-layer states into one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Readout {
    FinalState,
    MaxPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub hidden: usize,
    pub filters: usize,
    pub window: usize,
    pub dropout: f64,
    pub readout: Readout,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embedding_dim: 300,
            hidden: 100,
            filters: 100,
            window: 3,
            dropout: 0.5,
            readout: Readout::FinalState,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.hidden == 0 || self.filters == 0 {
            return Err(ModelError::Config("dimensions must be positive".into()));
        }
        if self.window == 0 {
            return Err(ModelError::Config("window must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Rows of a weight matrix that line up with embedding inputs: `blocks`
/// consecutive runs of `embedding_dim` rows followed by `tail` other rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputLayout {
    pub blocks: usize,
    pub tail: usize,
}

/// Names and sizes of one LSTM's parameters. Each gate owns an
/// `[input + hidden, hidden]` matrix `w_<gate>` and a `[1, hidden]` bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub prefix: String,
    pub input: usize,
    pub hidden: usize,
}

const GATES: [&str; 4] = ["i", "f", "o", "c"];

impl LstmCell {
    pub fn new(prefix: &str, input: usize, hidden: usize) -> Self {
        LstmCell {
            prefix: prefix.to_string(),
            input,
            hidden,
        }
    }

    fn name(&self, kind: &str, gate: &str) -> String {
        format!("{}.{kind}_{gate}", self.prefix)
    }

    fn shapes(&self, out: &mut BTreeMap<String, Vec<usize>>) {
        for gate in GATES {
            out.insert(self.name("w", gate), vec![self.input + self.hidden, self.hidden]);
            out.insert(self.name("b", gate), vec![1, self.hidden]);
        }
    }

    fn layouts(&self, out: &mut BTreeMap<String, InputLayout>) {
        for gate in GATES {
            out.insert(
                self.name("w", gate),
                InputLayout {
                    blocks: 1,
                    tail: self.hidden,
                },
            );
        }
    }

    pub fn zero_state<'g>(&self, g: &'g Graph) -> (Var<'g>, Var<'g>) {
        let zeros = Tensor::zeros(&[1, self.hidden]).expect("positive hidden size");
        (g.leaf(zeros.clone()), g.leaf(zeros))
    }

    /// One recurrence step on a `[1, input]` row; returns `(cell, hidden)`.
    pub fn step<'g>(
        &self,
        vars: &ParamVars<'g>,
        state: (Var<'g>, Var<'g>),
        x: Var<'g>,
    ) -> Result<(Var<'g>, Var<'g>)> {
        let (cell, hidden) = state;
        let width = x.shape();
        if width != [1, self.input] {
            return Err(ModelError::EmbeddingDim {
                expected: self.input,
                got: width.last().copied().unwrap_or(0),
            });
        }
        let xh = x.concat(hidden, 1)?;
        let gate = |g: &str| -> Result<Var<'g>> {
            let w = vars.get(&self.name("w", g))?;
            let b = vars.get(&self.name("b", g))?;
            Ok(xh.matmul(w)?.add(b)?)
        };
        let input_gate = gate("i")?.sigmoid()?;
        let forget_gate = gate("f")?.sigmoid()?;
        let output_gate = gate("o")?.sigmoid()?;
        let candidate = gate("c")?.tanh()?;
        let cell = forget_gate.mul(cell)?.add(input_gate.mul(candidate)?)?;
        let hidden = output_gate.mul(cell.tanh()?)?;
        Ok((cell, hidden))
    }

    /// Hidden state after each of the first `steps` rows of `seq` (`[T, input]`).
    pub fn run<'g>(&self, vars: &ParamVars<'g>, seq: Var<'g>, steps: usize) -> Result<Vec<Var<'g>>> {
        let mut state = self.zero_state(seq.graph());
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            state = self.step(vars, state, seq.row(t)?)?;
            outputs.push(state.1);
        }
        Ok(outputs)
    }

    /// Final hidden state over the first `steps` rows; zeros when `steps` is 0.
    pub fn encode<'g>(&self, vars: &ParamVars<'g>, seq: Var<'g>, steps: usize) -> Result<Var<'g>> {
        match self.run(vars, seq, steps)?.pop() {
            Some(h) => Ok(h),
            None => Ok(self.zero_state(seq.graph()).1),
        }
    }
}

fn ones<'g>(g: &'g Graph, rows: usize, cols: usize) -> Var<'g> {
    g.leaf(Tensor::full(&[rows, cols], 1.0).expect("positive extents"))
}

fn sigmoid_output<'g>(vars: &ParamVars<'g>, features: Var<'g>) -> Result<Var<'g>> {
    let w = vars.get("output.w")?;
    let b = vars.get("output.b")?;
    Ok(features.matmul(w)?.add(b)?.sigmoid()?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RnnPairModel {
    pub question: LstmCell,
    pub answer: LstmCell,
}

impl RnnPairModel {
    pub fn new(config: &ModelConfig) -> Self {
        RnnPairModel {
            question: LstmCell::new("question", config.embedding_dim, config.hidden),
            answer: LstmCell::new("answer", config.embedding_dim, config.hidden),
        }
    }

    fn shapes(&self, out: &mut BTreeMap<String, Vec<usize>>) {
        self.question.shapes(out);
        self.answer.shapes(out);
        out.insert("output.w".into(), vec![2 * self.question.hidden, 1]);
        out.insert("output.b".into(), vec![1, 1]);
    }

    pub fn forward<'g>(
        &self,
        vars: &ParamVars<'g>,
        q: (Var<'g>, usize),
        a: (Var<'g>, usize),
    ) -> Result<Var<'g>> {
        let hq = self.question.encode(vars, q.0, q.1)?;
        let ha = self.answer.encode(vars, a.0, a.1)?;
        sigmoid_output(vars, hq.concat(ha, 1)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnPairModel {
    pub embedding_dim: usize,
    pub filters: usize,
    pub window: usize,
    pub dropout: f64,
}

impl CnnPairModel {
    pub fn new(config: &ModelConfig) -> Self {
        CnnPairModel {
            embedding_dim: config.embedding_dim,
            filters: config.filters,
            window: config.window,
            dropout: config.dropout,
        }
    }

    fn shapes(&self, out: &mut BTreeMap<String, Vec<usize>>) {
        out.insert("conv.w".into(), vec![self.window * self.embedding_dim, self.filters]);
        out.insert("conv.b".into(), vec![1, self.filters]);
        out.insert("output.w".into(), vec![2 * self.filters, 1]);
        out.insert("output.b".into(), vec![1, 1]);
    }

    /// Max-pooled relu filter responses over every `window`-row slice of
    /// the first `rows` rows; `[1, filters]`.
    pub fn pooled<'g>(&self, vars: &ParamVars<'g>, seq: Var<'g>, rows: usize) -> Result<Var<'g>> {
        let g = seq.graph();
        let k = self.window;
        let rows = rows.max(k);
        let windows = (0..=rows - k)
            .map(|i| seq.slice(0, i, k)?.reshape(&[1, k * self.embedding_dim]))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let unfolded = concat_all(&windows, 0)?;
        let bias = ones(g, windows.len(), 1).matmul(vars.get("conv.b")?)?;
        let responses = unfolded.matmul(vars.get("conv.w")?)?.add(bias)?.relu()?;
        Ok(responses.max(0)?.reshape(&[1, self.filters])?)
    }

    fn dropout<'g>(&self, v: Var<'g>, rng: &mut ChaCha8Rng) -> Result<Var<'g>> {
        let keep = 1.0 - self.dropout;
        let mask: Vec<f64> = (0..self.filters)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = v.graph().leaf(Tensor::matrix(1, self.filters, mask)?);
        Ok(v.mul(mask)?)
    }

    pub fn forward<'g>(
        &self,
        vars: &ParamVars<'g>,
        q: (Var<'g>, usize),
        a: (Var<'g>, usize),
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var<'g>> {
        let mut qv = self.pooled(vars, q.0, q.1)?;
        let mut av = self.pooled(vars, a.0, a.1)?;
        if self.dropout > 0.0 {
            if let Some(rng) = dropout.as_deref_mut() {
                qv = self.dropout(qv, rng)?;
                av = self.dropout(av, rng)?;
            }
        }
        sigmoid_output(vars, qv.concat(av, 1)?)
    }
}

/// Intermediate products of bidirectional attention between a candidate
/// encoding `[t', h]` and a question encoding `[t, h]`.
#[derive(Debug, Clone, Copy)]
pub struct Attention<'g> {
    /// `[t', t]` similarity between candidate word j and question word k.
    pub similarity: Var<'g>,
    /// `[t', t]` row-softmax of the similarity (candidate-to-question weights).
    pub c2q_weights: Var<'g>,
    /// `[t', h]` attended question vector per candidate word.
    pub attended_question: Var<'g>,
    /// `[t', h]` question-weighted candidate summary, tiled over rows.
    pub attended_answer: Var<'g>,
    /// `[t', 4h]` query-aware candidate representation.
    pub merged: Var<'g>,
}

/// Bidirectional attention from the similarity `w . [a | q | a*q]`. Each
/// candidate row of the result is `[a | q~ | a*q~ | a*a~]`.
pub fn bidaf_attention<'g>(q_enc: Var<'g>, a_enc: Var<'g>, alpha: Var<'g>) -> Result<Attention<'g>> {
    let g = q_enc.graph();
    let (qs, as_) = (q_enc.shape(), a_enc.shape());
    if qs.len() != 2 || as_.len() != 2 || qs[1] != as_[1] {
        return Err(TensorError::ShapeMismatch {
            op: "bidaf_attention",
            lhs: as_,
            rhs: qs,
        }
        .into());
    }
    let (t, t_ans, h) = (qs[0], as_[0], qs[1]);
    if alpha.shape() != [3 * h, 1] {
        return Err(TensorError::ShapeMismatch {
            op: "bidaf_attention weights",
            lhs: alpha.shape(),
            rhs: vec![3 * h, 1],
        }
        .into());
    }
    let w_answer = alpha.slice(0, 0, h)?;
    let w_question = alpha.slice(0, h, h)?;
    let w_product = alpha.slice(0, 2 * h, h)?;

    let from_answer = a_enc.matmul(w_answer)?.matmul(ones(g, 1, t))?;
    let from_question = ones(g, t_ans, 1).matmul(q_enc.matmul(w_question)?.transpose()?)?;
    let scaled = a_enc.mul(ones(g, t_ans, 1).matmul(w_product.transpose()?)?)?;
    let from_product = scaled.matmul(q_enc.transpose()?)?;
    let similarity = from_answer.add(from_question)?.add(from_product)?;

    let c2q_weights = similarity.softmax()?;
    let attended_question = c2q_weights.matmul(q_enc)?;

    let q2c_weights = similarity.max(1)?.reshape(&[1, t_ans])?.softmax()?;
    let summary = q2c_weights.matmul(a_enc)?;
    let attended_answer = ones(g, t_ans, 1).matmul(summary)?;

    let merged = concat_all(
        &[
            a_enc,
            attended_question,
            a_enc.mul(attended_question)?,
            a_enc.mul(attended_answer)?,
        ],
        1,
    )?;
    Ok(Attention {
        similarity,
        c2q_weights,
        attended_question,
        attended_answer,
        merged,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BidafModel {
    pub encoder: LstmCell,
    pub modeling: LstmCell,
    pub readout: Readout,
}

impl BidafModel {
    pub fn new(config: &ModelConfig) -> Self {
        BidafModel {
            encoder: LstmCell::new("encoder", config.embedding_dim, config.hidden),
            modeling: LstmCell::new("modeling", 4 * config.hidden, config.hidden),
            readout: config.readout,
        }
    }

    fn shapes(&self, out: &mut BTreeMap<String, Vec<usize>>) {
        self.encoder.shapes(out);
        self.modeling.shapes(out);
        out.insert("attention.w".into(), vec![3 * self.encoder.hidden, 1]);
        out.insert("output.w".into(), vec![self.modeling.hidden, 1]);
        out.insert("output.b".into(), vec![1, 1]);
    }

    pub fn forward<'g>(
        &self,
        vars: &ParamVars<'g>,
        q: (Var<'g>, usize),
        a: (Var<'g>, usize),
    ) -> Result<Var<'g>> {
        let q_enc = concat_all(&self.encoder.run(vars, q.0, q.1.max(1))?, 0)?;
        let a_enc = concat_all(&self.encoder.run(vars, a.0, a.1.max(1))?, 0)?;
        let attention = bidaf_attention(q_enc, a_enc, vars.get("attention.w")?)?;
        let states = self
            .modeling
            .run(vars, attention.merged, a.1.max(1))?;
        let summary = match self.readout {
            Readout::FinalState => *states.last().expect("at least one row"),
            Readout::MaxPool => concat_all(&states, 0)?
                .max(0)?
                .reshape(&[1, self.modeling.hidden])?,
        };
        sigmoid_output(vars, summary)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Architecture {
    Rnn(RnnPairModel),
    Cnn(CnnPairModel),
    Bidaf(BidafModel),
}

/// An architecture together with its parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    kind: ModelKind,
    config: ModelConfig,
    arch: Architecture,
    params: ParameterSet,
}

/// Round every value to the nearest `f32`.
pub fn round_to_f32(params: &ParameterSet) -> ParameterSet {
    params.map_values(|v| v as f32 as f64)
}

impl Model {
    /// Parameter names and shapes for an architecture.
    pub fn expected_shapes(kind: ModelKind, config: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
        let mut out = BTreeMap::new();
        match Self::architecture(kind, config) {
            Architecture::Rnn(m) => m.shapes(&mut out),
            Architecture::Cnn(m) => m.shapes(&mut out),
            Architecture::Bidaf(m) => m.shapes(&mut out),
        }
        out
    }

    fn architecture(kind: ModelKind, config: &ModelConfig) -> Architecture {
        match kind {
            ModelKind::Rnn => Architecture::Rnn(RnnPairModel::new(config)),
            ModelKind::Cnn => Architecture::Cnn(CnnPairModel::new(config)),
            ModelKind::Bidaf => Architecture::Bidaf(BidafModel::new(config)),
        }
    }

    /// Xavier-uniform weights and zero biases, except forget-gate biases of 1.
    /// Values are rounded to `f32` so that checkpoints hold them exactly.
    pub fn new(kind: ModelKind, config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        for (name, shape) in Self::expected_shapes(kind, &config) {
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = if name.contains(".b_f") {
                vec![1.0; numel]
            } else if name.contains(".b") {
                vec![0.0; numel]
            } else {
                let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..numel)
                    .map(|_| ((rng.gen::<f64>() * 2.0 - 1.0) * limit) as f32 as f64)
                    .collect()
            };
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        Model::from_parts(kind, config, params)
    }

    /// A model whose every parameter is zero.
    pub fn zeros(kind: ModelKind, config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut params = ParameterSet::new();
        for (name, shape) in Self::expected_shapes(kind, &config) {
            params.insert(name, Tensor::zeros(&shape)?)?;
        }
        Model::from_parts(kind, config, params)
    }

    /// Assemble a model, checking that `params` has exactly the expected
    /// names and shapes.
    pub fn from_parts(kind: ModelKind, config: ModelConfig, params: ParameterSet) -> Result<Model> {
        config.validate()?;
        let expected = Self::expected_shapes(kind, &config);
        for (name, shape) in &expected {
            let found = params.get(name).map(|t| t.shape().to_vec());
            if found.as_ref() != Some(shape) {
                return Err(ModelError::Parameter {
                    name: name.clone(),
                    expected: shape.clone(),
                    found,
                });
            }
        }
        if let Some(extra) = params.names().find(|n| !expected.contains_key(*n)) {
            return Err(ModelError::Parameter {
                name: extra.to_string(),
                expected: Vec::new(),
                found: params.get(extra).map(|t| t.shape().to_vec()),
            });
        }
        Ok(Model {
            kind,
            arch: Self::architecture(kind, &config),
            config,
            params,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn architecture_ref(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    /// Replace the parameters; names and shapes must not change.
    pub fn set_params(&mut self, params: ParameterSet) -> Result<()> {
        let model = Model::from_parts(self.kind, self.config.clone(), params)?;
        self.params = model.params;
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    /// Weight matrices whose leading rows read embedding components.
    pub fn input_layouts(&self) -> BTreeMap<String, InputLayout> {
        let mut out = BTreeMap::new();
        match &self.arch {
            Architecture::Rnn(m) => {
                m.question.layouts(&mut out);
                m.answer.layouts(&mut out);
            }
            Architecture::Cnn(m) => {
                out.insert(
                    "conv.w".into(),
                    InputLayout {
                        blocks: m.window,
                        tail: 0,
                    },
                );
            }
            Architecture::Bidaf(m) => m.encoder.layouts(&mut out),
        }
        out
    }

    fn input<'g>(&self, g: &'g Graph, seq: &EmbeddedSequence) -> Result<(Var<'g>, usize)> {
        if seq.dim() != self.config.embedding_dim {
            return Err(ModelError::EmbeddingDim {
                expected: self.config.embedding_dim,
                got: seq.dim(),
            });
        }
        // The convolution reads `window` rows even when the sequence is shorter.
        let rows_needed = match self.kind {
            ModelKind::Cnn => self.config.window.max(seq.active_rows()),
            _ => seq.active_rows(),
        };
        let values = if seq.max_len() < rows_needed {
            seq.padded(rows_needed - seq.max_len()).values
        } else {
            seq.values.clone()
        };
        Ok((g.leaf(values), seq.len))
    }

    /// Probability (a `[1, 1]` node) that `answer` answers `question`.
    /// Dropout is applied only when a mask generator is supplied.
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        vars: &ParamVars<'g>,
        question: &EmbeddedSequence,
        answer: &EmbeddedSequence,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var<'g>> {
        let q = self.input(g, question)?;
        let a = self.input(g, answer)?;
        match &self.arch {
            Architecture::Rnn(m) => m.forward(vars, q, a),
            Architecture::Cnn(m) => m.forward(vars, q, a, dropout),
            Architecture::Bidaf(m) => m.forward(vars, q, a),
        }
    }

    /// Inference-mode probability for one pair.
    pub fn score(&self, question: &EmbeddedSequence, answer: &EmbeddedSequence) -> Result<f64> {
        let g = Graph::new();
        let vars = self.params.register(&g);
        Ok(self.forward(&g, &vars, question, answer, None)?.item()?)
    }

    /// Inference-mode probabilities for every candidate of one question.
    pub fn score_candidates(
        &self,
        question: &EmbeddedSequence,
        candidates: &[EmbeddedSequence],
    ) -> Result<Vec<f64>> {
        candidates.iter().map(|c| self.score(question, c)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn small(dim: usize) -> ModelConfig {
        ModelConfig {
            embedding_dim: dim,
            hidden: 3,
            filters: 4,
            window: 2,
            dropout: 0.5,
            readout: Readout::FinalState,
        }
    }

    fn random_seq(rows: usize, dim: usize, seed: u64) -> EmbeddedSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        EmbeddedSequence::from_rows(Tensor::matrix(rows, dim, data).unwrap())
    }

    #[test]
    fn lstm_step_zero_weights() {
        let cell = LstmCell::new("c", 2, 1);
        let mut shapes = BTreeMap::new();
        cell.shapes(&mut shapes);
        let mut params = ParameterSet::new();
        for (n, s) in shapes {
            params.insert(n, Tensor::zeros(&s).unwrap()).unwrap();
        }
        let g = Graph::new();
        let vars = params.register(&g);
        let x = g.leaf(Tensor::matrix(1, 2, vec![0.7, -3.0]).unwrap());
        let (c, h) = cell.step(&vars, cell.zero_state(&g), x).unwrap();
        assert_eq!(c.item().unwrap(), 0.0);
        assert_eq!(h.item().unwrap(), 0.0);

        let one = g.leaf(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let zero = g.leaf(Tensor::matrix(1, 1, vec![0.0]).unwrap());
        let (c, h) = cell.step(&vars, (one, zero), x).unwrap();
        assert_eq!(c.item().unwrap(), 0.5);
        assert!((h.item().unwrap() - 0.5 * 0.5f64.tanh()).abs() < 1e-15);
        assert!((h.item().unwrap() - 0.23106).abs() < 1e-5);
    }

    #[test]
    fn lstm_step_gradient() {
        let model = Model::new(ModelKind::Rnn, small(3), 5).unwrap();
        let cell = match model.architecture_ref() {
            Architecture::Rnn(m) => m.question.clone(),
            _ => unreachable!(),
        };
        let x = random_seq(1, 3, 2).values;
        let err = grad_check(
            |g, vars| {
                let (c, h) = cell.step(vars, cell.zero_state(g), g.leaf(x.clone()))?;
                let (c, h) = cell.step(vars, (c, h), g.leaf(x.clone()))?;
                Ok::<_, ModelError>(c.add(h)?.sum(1)?.sum(0)?)
            },
            model.params(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn encode_length_one_matches_single_step() {
        let model = Model::new(ModelKind::Rnn, small(3), 11).unwrap();
        let Architecture::Rnn(rnn) = model.architecture_ref() else {
            unreachable!()
        };
        let seq = random_seq(1, 3, 4);
        let g = Graph::new();
        let vars = model.params().register(&g);
        let x = g.leaf(seq.values.clone());
        let encoded = rnn.question.encode(&vars, x, 1).unwrap().value();
        let (_, h) = rnn.question.step(&vars, rnn.question.zero_state(&g), x).unwrap();
        assert_eq!(encoded, h.value());
        let empty = rnn.question.encode(&vars, x, 0).unwrap().value();
        assert!(empty.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_is_order_sensitive() {
        let model = Model::new(ModelKind::Rnn, small(3), 11).unwrap();
        let Architecture::Rnn(rnn) = model.architecture_ref() else {
            unreachable!()
        };
        let seq = random_seq(3, 3, 9);
        let mut rows: Vec<Vec<f64>> = (0..3).map(|i| seq.values.row(i).to_vec()).collect();
        rows.swap(0, 2);
        let swapped = Tensor::from_rows(&rows).unwrap();
        let g = Graph::new();
        let vars = model.params().register(&g);
        let a = rnn.question.encode(&vars, g.leaf(seq.values.clone()), 3).unwrap().value();
        let b = rnn.question.encode(&vars, g.leaf(swapped), 3).unwrap().value();
        assert_ne!(a, b);
    }

    #[test]
    fn zero_models_output_one_half() {
        for kind in ModelKind::ALL {
            let m = Model::zeros(kind, small(3)).unwrap();
            let p = m.score(&random_seq(4, 3, 1), &random_seq(5, 3, 2)).unwrap();
            assert_eq!(p, 0.5, "{kind}");
        }
    }

    #[test]
    fn outputs_ignore_trailing_padding() {
        for kind in ModelKind::ALL {
            let m = Model::new(kind, small(3), 3).unwrap();
            let q = random_seq(4, 3, 1);
            let a = random_seq(5, 3, 2);
            let base = m.score(&q, &a).unwrap();
            assert_eq!(base, m.score(&q.padded(3), &a).unwrap(), "{kind}");
            assert_eq!(base, m.score(&q, &a.padded(2)).unwrap(), "{kind}");
            assert!(base > 0.0 && base < 1.0);
        }
    }

    #[test]
    fn embedding_dim_mismatch_is_reported() {
        let m = Model::new(ModelKind::Rnn, small(3), 3).unwrap();
        assert!(matches!(
            m.score(&random_seq(2, 4, 1), &random_seq(2, 4, 2)),
            Err(ModelError::EmbeddingDim { expected: 3, got: 4 })
        ));
    }

    #[test]
    fn cnn_pooling_is_position_invariant() {
        let dim = 2;
        let cfg = ModelConfig {
            embedding_dim: dim,
            hidden: 2,
            filters: 1,
            window: 2,
            dropout: 0.0,
            readout: Readout::FinalState,
        };
        let mut m = Model::zeros(ModelKind::Cnn, cfg).unwrap();
        let mut params = m.params().clone();
        // Filter fires on the bigram ([1,0], [0,1]).
        params
            .set("conv.w", Tensor::matrix(4, 1, vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        params
            .set("output.w", Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap())
            .unwrap();
        m.set_params(params).unwrap();
        let seq_with = |pos: usize| {
            let mut rows = vec![vec![0.0, 0.0]; 8];
            rows[pos] = vec![1.0, 0.0];
            rows[pos + 1] = vec![0.0, 1.0];
            EmbeddedSequence::from_rows(Tensor::from_rows(&rows).unwrap())
        };
        let q = seq_with(0);
        let at2 = m.score(&q, &seq_with(2)).unwrap();
        let at5 = m.score(&q, &seq_with(5)).unwrap();
        assert_eq!(at2, at5);
        assert_eq!(at2, 1.0 / (1.0 + (-2.0f64).exp()));
    }

    #[test]
    fn cnn_dropout_is_reproducible() {
        let m = Model::new(ModelKind::Cnn, small(3), 3).unwrap();
        let (q, a) = (random_seq(4, 3, 1), random_seq(5, 3, 2));
        assert_eq!(m.score(&q, &a).unwrap(), m.score(&q, &a).unwrap());
        let run = |seed| {
            let g = Graph::new();
            let vars = m.params().register(&g);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            m.forward(&g, &vars, &q, &a, Some(&mut rng)).unwrap().item().unwrap()
        };
        assert_eq!(run(7), run(7));
    }

    #[test]
    fn cnn_handles_sequences_shorter_than_window() {
        let cfg = ModelConfig {
            window: 3,
            ..small(3)
        };
        let m = Model::new(ModelKind::Cnn, cfg, 1).unwrap();
        let p = m.score(&random_seq(1, 3, 1), &random_seq(2, 3, 2)).unwrap();
        assert!(p > 0.0 && p < 1.0);
    }

    #[test]
    fn attention_shapes_and_normalisation() {
        let h = 3;
        let g = Graph::new();
        let q = g.leaf(random_seq(5, h, 1).values);
        let a = g.leaf(random_seq(3, h, 2).values);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = g.leaf(Tensor::matrix(3 * h, 1, (0..3 * h).map(|_| rng.gen()).collect()).unwrap());
        let att = bidaf_attention(q, a, w).unwrap();
        assert_eq!(att.similarity.shape(), vec![3, 5]);
        assert_eq!(att.merged.shape(), vec![3, 4 * h]);
        let weights = att.c2q_weights.value();
        for j in 0..3 {
            let total: f64 = weights.row(j).iter().sum();
            assert!((total - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_similarity_averages_question() {
        let h = 2;
        let g = Graph::new();
        let qv = random_seq(4, h, 1).values;
        let q = g.leaf(qv.clone());
        let a = g.leaf(random_seq(3, h, 2).values);
        let w = g.leaf(Tensor::zeros(&[3 * h, 1]).unwrap());
        let att = bidaf_attention(q, a, w).unwrap();
        let tilde = att.attended_question.value();
        for d in 0..h {
            let mean = (0..4).map(|k| qv.at(k, d)).sum::<f64>() / 4.0;
            for j in 0..3 {
                assert!((tilde.at(j, d) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rejects_mismatched_width() {
        let g = Graph::new();
        let q = g.leaf(random_seq(2, 3, 1).values);
        let a = g.leaf(random_seq(2, 4, 2).values);
        let w = g.leaf(Tensor::zeros(&[9, 1]).unwrap());
        assert!(bidaf_attention(q, a, w).is_err());
    }

    #[test]
    fn from_parts_checks_shapes() {
        let m = Model::new(ModelKind::Cnn, small(3), 1).unwrap();
        let mut params = m.params().clone();
        params.set("output.w", Tensor::zeros(&[3, 1]).unwrap()).unwrap();
        assert!(matches!(
            Model::from_parts(ModelKind::Cnn, small(3), params),
            Err(ModelError::Parameter { .. })
        ));
    }

    #[test]
    fn initialisation_rules() {
        let m = Model::new(ModelKind::Bidaf, small(3), 1).unwrap();
        assert!(m.params().get("encoder.b_f").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(m.params().get("encoder.b_i").unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(m.params().get("attention.w").unwrap().shape(), &[9, 1]);
        assert_eq!(m.params().get("modeling.w_i").unwrap().shape(), &[12 + 3, 3]);
        let again = Model::new(ModelKind::Bidaf, small(3), 1).unwrap();
        assert_eq!(m, again);
    }
}
