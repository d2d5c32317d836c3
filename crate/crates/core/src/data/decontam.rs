//! Near-duplicate removal by word n-gram Jaccard similarity.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecontamSpec {
    pub n: usize,
    pub threshold: f64,
}

impl Default for DecontamSpec {
    fn default() -> Self {
        DecontamSpec { n: 3, threshold: 0.8 }
    }
}

impl DecontamSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("n-gram size must be at least 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 1]", self.threshold)));
        }
        Ok(())
    }
}

/// Word n-grams (whitespace tokens). Texts shorter than `n` words contribute
/// their whole token sequence as a single gram.
pub fn ngrams(text: &str, n: usize) -> HashSet<String> {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.is_empty() {
        return HashSet::new();
    }
    if words.len() < n {
        return HashSet::from([words.join("\u{1f}")]);
    }
    words.windows(n).map(|w| w.join("\u{1f}")).collect()
}

pub fn jaccard(a: &HashSet<String>, b: &HashSet<String>) -> f64 {
    let union = a.len() + b.len();
    if union == 0 {
        return 0.0;
    }
    let inter = a.intersection(b).count();
    inter as f64 / (union - inter) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Removal {
    pub corpus_index: usize,
    pub reference_index: usize,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecontamReport {
    pub checked: usize,
    pub removals: Vec<Removal>,
}

/// Indices of corpus texts to keep, and a report of the removed ones with
/// their best-matching reference and score.
pub fn decontaminate(corpus: &[String], reference: &[String], spec: &DecontamSpec) -> Result<(Vec<usize>, DecontamReport)> {
    spec.validate()?;
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let ref_grams: Vec<HashSet<String>> = reference.iter().map(|t| ngrams(t, spec.n)).collect();
    let mut index: HashMap<&str, Vec<usize>> = HashMap::new();
    for (j, grams) in ref_grams.iter().enumerate() {
        for g in grams {
            index.entry(g.as_str()).or_default().push(j);
        }
    }
    let mut keep = Vec::with_capacity(corpus.len());
    let mut report = DecontamReport { checked: corpus.len(), removals: Vec::new() };
    let mut shared: HashMap<usize, usize> = HashMap::new();
    for (i, text) in corpus.iter().enumerate() {
        let grams = ngrams(text, spec.n);
        shared.clear();
        for g in &grams {
            if let Some(js) = index.get(g.as_str()) {
                for &j in js {
                    *shared.entry(j).or_default() += 1;
                }
            }
        }
        let best = shared
            .iter()
            .map(|(&j, &inter)| (j, inter as f64 / (grams.len() + ref_grams[j].len() - inter) as f64))
            .max_by(|x, y| x.1.total_cmp(&y.1).then(y.0.cmp(&x.0)));
        match best {
            Some((j, score)) if score >= spec.threshold => {
                report.removals.push(Removal { corpus_index: i, reference_index: j, score })
            }
            _ => keep.push(i),
        }
    }
    Ok((keep, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_enumerated_bigram_similarity() {
        let a = ngrams("a b c d e", 2);
        let b = ngrams("a b c x y", 2);
        assert!((jaccard(&a, &b) - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(jaccard(&ngrams("p q r", 3), &ngrams("p q r", 3)), 1.0);
        assert_eq!(jaccard(&ngrams("p q r", 1), &ngrams("s t u", 1)), 0.0);
    }

    #[test]
    fn removes_identical_keeps_disjoint() {
        let corpus = vec!["one two three four".to_string(), "five six seven eight".to_string()];
        let reference = vec!["one two three four".to_string()];
        let (keep, report) = decontaminate(&corpus, &reference, &DecontamSpec::default()).unwrap();
        assert_eq!(keep, vec![1]);
        assert_eq!(report.removals.len(), 1);
        assert_eq!(report.removals[0].score, 1.0);
        assert!(decontaminate(&[], &reference, &DecontamSpec::default()).is_err());
    }
}
