//! Arithmetic question/answer text: generation, independent verification and
//! packing into fixed-length rows with answer-span loss masks.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{self, EOS, PAD};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Op {
    #[serde(rename = "+")]
    Add,
    #[serde(rename = "-")]
    Sub,
    #[serde(rename = "*")]
    Mul,
}

impl Op {
    pub fn symbol(self) -> char {
        match self {
            Op::Add => '+',
            Op::Sub => '-',
            Op::Mul => '*',
        }
    }

    pub fn apply(self, a: i64, b: i64) -> i64 {
        match self {
            Op::Add => a + b,
            Op::Sub => a - b,
            Op::Mul => a * b,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Grammar {
    pub operand_min: i64,
    pub operand_max: i64,
    pub operators: Vec<Op>,
    /// Fraction of examples rendered as a short word problem.
    pub word_problem_frac: f64,
}

impl Default for Grammar {
    fn default() -> Self {
        Grammar { operand_min: 0, operand_max: 99, operators: vec![Op::Add, Op::Sub, Op::Mul], word_problem_frac: 0.0 }
    }
}

impl Grammar {
    pub fn validate(&self) -> Result<()> {
        if self.operand_min < 0 || self.operand_max < self.operand_min {
            return Err(Error::Config("operand range must be non-negative and non-empty".into()));
        }
        if self.operators.is_empty() {
            return Err(Error::Config("grammar needs at least one operator".into()));
        }
        if !(0.0..=1.0).contains(&self.word_problem_frac) {
            return Err(Error::Config("word_problem_frac outside [0, 1]".into()));
        }
        Ok(())
    }

    /// Number of distinct problems the grammar can produce.
    pub fn problem_count(&self) -> u64 {
        let n = (self.operand_max - self.operand_min + 1) as u64;
        let forms = if self.word_problem_frac > 0.0 && self.word_problem_frac < 1.0 { 2 } else { 1 };
        n * n * self.operators.len() as u64 * forms
    }

    fn draw(&self, rng: &mut impl Rng) -> Problem {
        let a = rng.random_range(self.operand_min..=self.operand_max);
        let b = rng.random_range(self.operand_min..=self.operand_max);
        let op = *self.operators.choose(rng).expect("validated non-empty");
        let word = rng.random_bool(self.word_problem_frac);
        Problem { a, b, op, word }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
struct Problem {
    a: i64,
    b: i64,
    op: Op,
    word: bool,
}

const NAMES: [&str; 8] = ["Ada", "Ben", "Cat", "Eve", "Hal", "Ivy", "Sam", "Tom"];
const ITEMS: [&str; 6] = ["apple", "coin", "book", "shell", "card", "plum"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextExample {
    pub id: u64,
    pub a: i64,
    pub b: i64,
    pub op: Op,
    /// `"Question: ...\nAnswer:"`
    pub prompt: String,
    pub answer: String,
}

impl TextExample {
    fn render(id: u64, p: Problem, rng: &mut impl Rng) -> Self {
        let question = if p.word {
            let name = NAMES.choose(rng).expect("non-empty");
            let item = ITEMS.choose(rng).expect("non-empty");
            match p.op {
                Op::Add => format!("{name} has {} {item}s and gets {} more. How many {item}s now?", p.a, p.b),
                Op::Sub => format!("{name} has {} {item}s and gives away {}. How many {item}s now?", p.a, p.b),
                Op::Mul => format!("{name} fills {} boxes with {} {item}s each. How many {item}s in total?", p.a, p.b),
            }
        } else {
            format!("{}{}{}?", p.a, p.op.symbol(), p.b)
        };
        TextExample {
            id,
            a: p.a,
            b: p.b,
            op: p.op,
            prompt: format!("Question: {question}\nAnswer:"),
            answer: p.op.apply(p.a, p.b).to_string(),
        }
    }

    pub fn text(&self) -> String {
        format!("{} {}", self.prompt, self.answer)
    }

    /// Tokens with EOS, and the loss mask (true on the answer span: the
    /// space, the answer digits and EOS).
    pub fn tokens(&self) -> Result<(Vec<u32>, Vec<bool>)> {
        let mut toks = vocab::encode(&self.prompt)?;
        let n_prompt = toks.len();
        toks.extend(vocab::encode(&format!(" {}", self.answer))?);
        toks.push(EOS);
        let mask = (0..toks.len()).map(|i| i >= n_prompt).collect();
        Ok((toks, mask))
    }

    pub fn prompt_tokens(&self) -> Result<Vec<u32>> {
        vocab::encode(&self.prompt)
    }
}

/// Draws `n` examples, each problem distinct from the ones in `taken`, and
/// adds them to `taken`.
fn draw_unique(grammar: &Grammar, n: usize, first_id: u64, taken: &mut HashSet<Problem>, rng: &mut impl Rng) -> Result<Vec<TextExample>> {
    if (taken.len() + n) as u64 > grammar.problem_count() {
        return Err(Error::Config(format!("grammar cannot produce {n} more distinct problems")));
    }
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let p = grammar.draw(rng);
        if taken.insert(p) {
            out.push(TextExample::render(first_id + out.len() as u64, p, rng));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextCorpusSpec {
    pub seed: u64,
    pub n_examples: usize,
    pub grammar: Grammar,
}

impl Default for TextCorpusSpec {
    fn default() -> Self {
        TextCorpusSpec { seed: 0, n_examples: 4096, grammar: Grammar::default() }
    }
}

/// Unlabeled-stream examples (problems may repeat).
pub fn gen_text_examples(spec: &TextCorpusSpec) -> Result<Vec<TextExample>> {
    if spec.n_examples == 0 {
        return Err(Error::Empty("corpus"));
    }
    spec.grammar.validate()?;
    let mut rng = rng::stream(spec.seed, "corpus");
    Ok((0..spec.n_examples)
        .map(|i| {
            let p = spec.grammar.draw(&mut rng);
            TextExample::render(i as u64, p, &mut rng)
        })
        .collect())
}

/// Where one example sits inside a packed row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Boundary {
    pub start: usize,
    pub len: usize,
    pub example_id: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedRow {
    pub tokens: Vec<u32>,
    pub loss_mask: Vec<bool>,
    /// Segment id per position: 1-based example slot, 0 on padding.
    pub segments: Vec<u32>,
    pub boundaries: Vec<Boundary>,
}

/// Greedy in-order packing; an example never straddles two rows.
pub fn pack(examples: &[TextExample], seq_len: usize) -> Result<Vec<PackedRow>> {
    let mut rows = Vec::new();
    let mut cur = PackedRow { tokens: vec![], loss_mask: vec![], segments: vec![], boundaries: vec![] };
    let finish = |mut r: PackedRow| {
        let pad = seq_len - r.tokens.len();
        r.tokens.extend(std::iter::repeat_n(PAD, pad));
        r.loss_mask.extend(std::iter::repeat_n(false, pad));
        r.segments.extend(std::iter::repeat_n(0, pad));
        r
    };
    for ex in examples {
        let (toks, mask) = ex.tokens()?;
        if toks.len() > seq_len {
            return Err(Error::TemplateOverflow { len: toks.len(), seq_len });
        }
        if cur.tokens.len() + toks.len() > seq_len {
            rows.push(finish(std::mem::replace(
                &mut cur,
                PackedRow { tokens: vec![], loss_mask: vec![], segments: vec![], boundaries: vec![] },
            )));
        }
        let seg = cur.boundaries.len() as u32 + 1;
        cur.boundaries.push(Boundary { start: cur.tokens.len(), len: toks.len(), example_id: ex.id });
        cur.segments.extend(std::iter::repeat_n(seg, toks.len()));
        cur.tokens.extend(toks);
        cur.loss_mask.extend(mask);
    }
    if !cur.tokens.is_empty() {
        rows.push(finish(cur));
    }
    Ok(rows)
}

/// Re-derives the answer from the rendered text alone, with its own parser.
/// Returns `None` when the text is not in a recognised format.
pub fn verify_text(text: &str) -> Option<bool> {
    let rest = text.strip_prefix("Question: ")?;
    let (question, answer) = rest.split_once("\nAnswer: ")?;
    let claimed: i64 = answer.trim().parse().ok()?;
    let nums: Vec<i64> = question
        .split(|c: char| !c.is_ascii_digit())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().ok())
        .collect::<Option<_>>()?;
    if nums.len() != 2 {
        return None;
    }
    let (a, b) = (nums[0], nums[1]);
    let truth = if question.contains("gets") || question.contains('+') {
        a.checked_add(b)?
    } else if question.contains("gives away") || question.contains('-') {
        a.checked_sub(b)?
    } else if question.contains("boxes") || question.contains('*') {
        a.checked_mul(b)?
    } else {
        return None;
    };
    Some(truth == claimed)
}

/// Exact-answer normalization: trim whitespace and parse as an integer.
pub fn normalize_answer(s: &str) -> Option<i64> {
    s.trim().parse().ok()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Feedback,
    HeldoutEval,
    Probe,
}

/// Labeled examples with a role tag. The learner never trains on these.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackSet {
    pub role: Role,
    pub examples: Vec<TextExample>,
}

/// First id given to labeled examples; corpus ids stay below it, so batch-id
/// audits can tell the two apart.
pub const LABELED_ID_BASE: u64 = 1 << 32;

/// Disjoint labeled splits drawn from one grammar.
pub fn gen_labeled_splits(grammar: &Grammar, seed: u64, sizes: &[(Role, usize)]) -> Result<Vec<FeedbackSet>> {
    grammar.validate()?;
    let mut rng = rng::stream(seed, "labeled");
    let mut taken = HashSet::new();
    let mut next_id = LABELED_ID_BASE;
    let mut out = Vec::new();
    for &(role, n) in sizes {
        let examples = draw_unique(grammar, n, next_id, &mut taken, &mut rng)?;
        next_id += n as u64;
        out.push(FeedbackSet { role, examples });
    }
    Ok(out)
}
