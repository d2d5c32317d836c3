//! The language task bundle: unlabeled corpus plus disjoint labeled splits,
//! decontaminated and packed.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{read_jsonl, write_jsonl};
use super::decontam::{decontaminate, jaccard, ngrams, DecontamReport, DecontamSpec};
use super::text::{gen_labeled_splits, gen_text_examples, pack, FeedbackSet, Grammar, Op, PackedRow, Role, TextCorpusSpec, TextExample};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamSpec {
    pub grammar: Grammar,
    pub n_feedback: usize,
    pub n_heldout: usize,
    pub n_probe: usize,
}

impl Default for DownstreamSpec {
    fn default() -> Self {
        DownstreamSpec {
            grammar: Grammar { operators: vec![Op::Add], ..Grammar::default() },
            n_feedback: 256,
            n_heldout: 256,
            n_probe: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LanguageTaskSpec {
    pub seed: u64,
    pub seq_len: usize,
    pub corpus: TextCorpusSpec,
    pub downstream: DownstreamSpec,
    pub decontam: DecontamSpec,
    /// Near-copies of labeled examples planted in the corpus, for auditing
    /// the decontamination filter.
    pub planted_duplicates: usize,
}

impl Default for LanguageTaskSpec {
    fn default() -> Self {
        LanguageTaskSpec {
            seed: 0,
            seq_len: 128,
            corpus: TextCorpusSpec::default(),
            downstream: DownstreamSpec::default(),
            decontam: DecontamSpec::default(),
            planted_duplicates: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageTask {
    pub spec: LanguageTaskSpec,
    /// Corpus before decontamination (including planted copies).
    pub raw_corpus: Vec<TextExample>,
    /// Indices into `raw_corpus` of the planted copies.
    pub planted: Vec<usize>,
    pub corpus: Vec<TextExample>,
    pub rows: Vec<PackedRow>,
    pub feedback: FeedbackSet,
    pub heldout: FeedbackSet,
    pub probe: FeedbackSet,
    pub report: DecontamReport,
}

impl LanguageTask {
    /// Every labeled example, in split order.
    pub fn labeled(&self) -> impl Iterator<Item = &TextExample> {
        self.feedback.examples.iter().chain(&self.heldout.examples).chain(&self.probe.examples)
    }
}

/// A close variant of a labeled example: a word problem gets one extra word
/// when that keeps the n-gram similarity at or above the threshold; anything
/// else is copied verbatim.
fn near_copy(src: &TextExample, id: u64, spec: &DecontamSpec) -> TextExample {
    let mut out = src.clone();
    out.id = id;
    if let Some(rest) = src.prompt.strip_prefix("Question: ") {
        let variant = format!("Question: Now {rest}");
        let sim = jaccard(&ngrams(&format!("{variant} {}", src.answer), spec.n), &ngrams(&src.text(), spec.n));
        if sim >= spec.threshold {
            out.prompt = variant;
        }
    }
    out
}

pub fn gen_language_task(spec: &LanguageTaskSpec) -> Result<LanguageTask> {
    spec.decontam.validate()?;
    let ds = &spec.downstream;
    let mut splits = gen_labeled_splits(
        &ds.grammar,
        spec.seed,
        &[(Role::Feedback, ds.n_feedback), (Role::HeldoutEval, ds.n_heldout), (Role::Probe, ds.n_probe)],
    )?
    .into_iter();
    let (feedback, heldout, probe) = (splits.next().unwrap(), splits.next().unwrap(), splits.next().unwrap());

    let corpus_spec = TextCorpusSpec { seed: spec.seed, ..spec.corpus.clone() };
    let mut raw = gen_text_examples(&corpus_spec)?;
    let mut planted = Vec::new();
    if spec.planted_duplicates > 0 {
        let labeled: Vec<&TextExample> = feedback.examples.iter().chain(&heldout.examples).chain(&probe.examples).collect();
        if labeled.is_empty() {
            return Err(Error::Config("cannot plant duplicates without labeled examples".into()));
        }
        let mut r = rng::stream(spec.seed, "plant");
        for k in 0..spec.planted_duplicates {
            let src = labeled[r.random_range(0..labeled.len())];
            let at = r.random_range(0..=raw.len());
            raw.insert(at, near_copy(src, (corpus_spec.n_examples + k) as u64, &spec.decontam));
        }
        planted = raw.iter().enumerate().filter(|(_, e)| e.id >= corpus_spec.n_examples as u64).map(|(i, _)| i).collect();
    }

    let texts: Vec<String> = raw.iter().map(TextExample::text).collect();
    let reference: Vec<String> = feedback.examples.iter().chain(&heldout.examples).chain(&probe.examples).map(TextExample::text).collect();
    let (keep, report) = decontaminate(&texts, &reference, &spec.decontam)?;
    let corpus: Vec<TextExample> = keep.iter().map(|&i| raw[i].clone()).collect();
    if corpus.is_empty() {
        return Err(Error::Empty("decontaminated corpus"));
    }
    let rows = pack(&corpus, spec.seq_len)?;
    Ok(LanguageTask { spec: spec.clone(), raw_corpus: raw, planted, corpus, rows, feedback, heldout, probe, report })
}

#[derive(Serialize, Deserialize)]
struct Index {
    kind: String,
    spec: LanguageTaskSpec,
    corpus: usize,
    feedback: usize,
    heldout: usize,
    probe: usize,
    removed: usize,
}

/// Writes line-delimited records, a decontamination CSV and an index file.
pub fn save_language_task(task: &LanguageTask, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_jsonl(&dir.join("corpus.jsonl"), &task.corpus)?;
    write_jsonl(&dir.join("feedback.jsonl"), &task.feedback.examples)?;
    write_jsonl(&dir.join("heldout.jsonl"), &task.heldout.examples)?;
    write_jsonl(&dir.join("probe.jsonl"), &task.probe.examples)?;
    let mut w = csv::Writer::from_path(dir.join("decontamination.csv"))?;
    w.write_record(["corpus_id", "corpus_text", "reference_text", "jaccard"])?;
    let reference: Vec<&TextExample> = task.labeled().collect();
    for r in &task.report.removals {
        let c = &task.raw_corpus[r.corpus_index];
        w.write_record([
            c.id.to_string(),
            c.text(),
            reference[r.reference_index].text(),
            format!("{:.6}", r.score),
        ])?;
    }
    w.flush()?;
    let index = Index {
        kind: "language".into(),
        spec: task.spec.clone(),
        corpus: task.corpus.len(),
        feedback: task.feedback.examples.len(),
        heldout: task.heldout.examples.len(),
        probe: task.probe.examples.len(),
        removed: task.report.removals.len(),
    };
    fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

/// Reads a bundle written by [`save_language_task`]. The raw corpus and the
/// decontamination report are not restored.
pub fn load_language_task(dir: &Path) -> Result<LanguageTask> {
    let index: Index = serde_json::from_str(&fs::read_to_string(dir.join("index.json"))?)?;
    if index.kind != "language" {
        return Err(Error::Config(format!("{} holds a {} task", dir.display(), index.kind)));
    }
    let corpus: Vec<TextExample> = read_jsonl(&dir.join("corpus.jsonl"))?;
    let rows = pack(&corpus, index.spec.seq_len)?;
    Ok(LanguageTask {
        raw_corpus: Vec::new(),
        planted: Vec::new(),
        rows,
        feedback: FeedbackSet { role: Role::Feedback, examples: read_jsonl(&dir.join("feedback.jsonl"))? },
        heldout: FeedbackSet { role: Role::HeldoutEval, examples: read_jsonl(&dir.join("heldout.jsonl"))? },
        probe: FeedbackSet { role: Role::Probe, examples: read_jsonl(&dir.join("probe.jsonl"))? },
        report: DecontamReport::default(),
        corpus,
        spec: index.spec,
    })
}
