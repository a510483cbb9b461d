//! Synthetic classification task over an orthonormal token vocabulary.
//!
//! Every sequence holds exactly one task-relevant token from
//! `{o1, -o1, o2, -o2}`; the label is `+1` for `+-o1` and `-1` for `+-o2`.
//! The positive tokens `o1`, `o2` appear with probability `alpha`, their
//! negations with `1 - alpha`. All other positions are drawn i.i.d. (with
//! replacement) from the vocabulary minus `{o1, o2}`.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabMode {
    /// The first `vocab_size` standard basis vectors.
    Basis,
    /// Orthonormal columns of a random rotation.
    Rotated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub d: usize,
    pub vocab_size: usize,
    pub n: usize,
    pub alpha: f64,
    /// Vocabulary indices of `o1` and `o2`.
    pub relevant: [usize; 2],
    pub vocab_mode: VocabMode,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            d: 64,
            vocab_size: 32,
            n: 8,
            alpha: 0.125,
            relevant: [0, 1],
            vocab_mode: VocabMode::Basis,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 0.25) {
            return Err(Error::param(format!(
                "alpha must lie in (0, 1/4), got {}",
                self.alpha
            )));
        }
        self.validate_shape()
    }

    fn validate_shape(&self) -> Result<()> {
        if self.vocab_size > self.d {
            return Err(Error::param(format!(
                "vocabulary of {} orthonormal tokens does not fit in dimension {}",
                self.vocab_size, self.d
            )));
        }
        let [o1, o2] = self.relevant;
        if o1 == o2 || o1 >= self.vocab_size || o2 >= self.vocab_size {
            return Err(Error::param("relevant tokens must be two distinct vocabulary entries"));
        }
        if self.vocab_size < 3 {
            return Err(Error::param("vocabulary has no irrelevant tokens"));
        }
        if self.n == 0 {
            return Err(Error::param("sequence length must be positive"));
        }
        Ok(())
    }
}

/// A vocabulary entry with a sign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenId {
    pub index: u32,
    pub negative: bool,
}

impl TokenId {
    pub fn positive(index: usize) -> Self {
        Self {
            index: index as u32,
            negative: false,
        }
    }

    pub fn sign(self) -> f64 {
        if self.negative {
            -1.0
        } else {
            1.0
        }
    }

    pub fn negated(self) -> Self {
        Self {
            index: self.index,
            negative: !self.negative,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relevant {
    O1,
    NegO1,
    O2,
    NegO2,
}

impl Relevant {
    pub const ALL: [Relevant; 4] = [Relevant::O1, Relevant::NegO1, Relevant::O2, Relevant::NegO2];

    pub fn label(self) -> f64 {
        match self {
            Relevant::O1 | Relevant::NegO1 => 1.0,
            Relevant::O2 | Relevant::NegO2 => -1.0,
        }
    }

    /// The rare (positive) tokens `o1`, `o2`.
    pub fn is_rare(self) -> bool {
        matches!(self, Relevant::O1 | Relevant::O2)
    }

    pub fn name(self) -> &'static str {
        match self {
            Relevant::O1 => "o1",
            Relevant::NegO1 => "-o1",
            Relevant::O2 => "o2",
            Relevant::NegO2 => "-o2",
        }
    }
}

/// A sampled sequence in compact form. [`SequenceSample::x`] builds the
/// dense `d x n` token matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub tokens: Vec<TokenId>,
    pub label: f64,
    pub relevant: Relevant,
    pub position: usize,
}

impl SequenceSample {
    pub fn x(&self, task: &Task) -> Matrix {
        let mut x = Matrix::zeros(task.spec.d, self.tokens.len());
        for (j, t) in self.tokens.iter().enumerate() {
            for i in 0..task.spec.d {
                x.set(i, j, t.sign() * task.vocab.get(i, t.index as usize));
            }
        }
        x
    }
}

/// A task instance: the spec plus its vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    spec: TaskSpec,
    /// `d x vocab_size`, one token per column.
    vocab: Matrix,
    irrelevant: Vec<usize>,
}

impl Task {
    /// Builds the vocabulary; `rng` is only consumed in rotated mode.
    pub fn new(spec: TaskSpec, rng: &mut RngStream) -> Result<Self> {
        spec.validate()?;
        Self::build(spec, rng)
    }

    /// Like [`Task::new`] but accepts any `alpha` in `(0, 1)`, for symmetric
    /// frequency controls outside the task's nominal domain.
    pub fn with_any_alpha(spec: TaskSpec, rng: &mut RngStream) -> Result<Self> {
        if !(spec.alpha > 0.0 && spec.alpha < 1.0) {
            return Err(Error::param(format!("alpha must lie in (0, 1), got {}", spec.alpha)));
        }
        spec.validate_shape()?;
        Self::build(spec, rng)
    }

    fn build(spec: TaskSpec, rng: &mut RngStream) -> Result<Self> {
        let vocab = build_vocab(spec.d, spec.vocab_size, spec.vocab_mode, rng)?;
        let irrelevant = (0..spec.vocab_size)
            .filter(|i| !spec.relevant.contains(i))
            .collect();
        Ok(Self {
            spec,
            vocab,
            irrelevant,
        })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn vocab(&self) -> &Matrix {
        &self.vocab
    }

    pub fn token_vector(&self, t: TokenId) -> Vec<f64> {
        self.vocab
            .column(t.index as usize)
            .into_iter()
            .map(|v| t.sign() * v)
            .collect()
    }

    pub fn relevant_token(&self, r: Relevant) -> TokenId {
        let [o1, o2] = self.spec.relevant;
        match r {
            Relevant::O1 => TokenId::positive(o1),
            Relevant::NegO1 => TokenId::positive(o1).negated(),
            Relevant::O2 => TokenId::positive(o2),
            Relevant::NegO2 => TokenId::positive(o2).negated(),
        }
    }

    pub fn irrelevant_indices(&self) -> &[usize] {
        &self.irrelevant
    }

    pub fn sample(&self, rng: &mut RngStream) -> SequenceSample {
        let label_positive = rng.bernoulli(0.5);
        let rare = rng.bernoulli(self.spec.alpha);
        let relevant = match (label_positive, rare) {
            (true, true) => Relevant::O1,
            (true, false) => Relevant::NegO1,
            (false, true) => Relevant::O2,
            (false, false) => Relevant::NegO2,
        };
        self.sample_with(relevant, rng)
    }

    /// A sequence whose relevant token is `relevant`; the rest of the draw
    /// follows the unconditioned sampler.
    pub fn sample_with(&self, relevant: Relevant, rng: &mut RngStream) -> SequenceSample {
        let n = self.spec.n;
        let position = rng.index(n);
        let tokens = (0..n)
            .map(|j| {
                if j == position {
                    self.relevant_token(relevant)
                } else {
                    TokenId::positive(self.irrelevant[rng.index(self.irrelevant.len())])
                }
            })
            .collect();
        SequenceSample {
            tokens,
            label: relevant.label(),
            relevant,
            position,
        }
    }

    pub fn sample_many(&self, count: usize, rng: &mut RngStream) -> Vec<SequenceSample> {
        (0..count).map(|_| self.sample(rng)).collect()
    }
}

/// `vocab_size` orthonormal vectors in `R^d` as the columns of a matrix.
pub fn build_vocab(d: usize, vocab_size: usize, mode: VocabMode, rng: &mut RngStream) -> Result<Matrix> {
    if vocab_size > d {
        return Err(Error::param(format!(
            "vocabulary of {vocab_size} orthonormal tokens does not fit in dimension {d}"
        )));
    }
    match mode {
        VocabMode::Basis => {
            let mut v = Matrix::zeros(d, vocab_size);
            for i in 0..vocab_size {
                v.set(i, i, 1.0);
            }
            Ok(v)
        }
        VocabMode::Rotated => {
            let g = DMatrix::from_fn(d, d, |_, _| rng.standard_normal());
            let q = g.qr().q();
            let mut v = Matrix::zeros(d, vocab_size);
            for j in 0..vocab_size {
                for i in 0..d {
                    v.set(i, j, q[(i, j)]);
                }
            }
            Ok(v)
        }
    }
}

/// One row per sequence: `sample,label,relevant,position,tokens` where tokens
/// are signed vocabulary indices joined by `;`.
pub fn write_dataset_csv<W: Write>(out: &mut W, samples: &[SequenceSample]) -> Result<()> {
    writeln!(out, "sample,label,relevant,position,tokens")?;
    for (i, s) in samples.iter().enumerate() {
        let tokens: Vec<String> = s
            .tokens
            .iter()
            .map(|t| format!("{}{}", if t.negative { "-" } else { "" }, t.index))
            .collect();
        writeln!(
            out,
            "{i},{},{},{},{}",
            s.label,
            s.relevant.name(),
            s.position,
            tokens.join(";")
        )?;
    }
    Ok(())
}
