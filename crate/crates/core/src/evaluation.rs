//! Span decoding and exact-match precision / recall / F1.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::corpus::{BioTag, TaggedDocument, OUTSIDE};

/// Type assigned to a predicted span whose tokens are all classified O.
pub const UNKNOWN_TYPE: &str = "Unknown";

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub doc_id: String,
    /// Inclusive.
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub kind: Option<String>,
}

/// Lenient BIO decoding: a B, or an I not continuing a span, opens a span.
pub fn decode_spans(tags: &[BioTag]) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut open: Option<usize> = None;
    for (i, &tag) in tags.iter().enumerate() {
        match tag {
            BioTag::O => {
                if let Some(s) = open.take() {
                    spans.push((s, i));
                }
            }
            BioTag::B => {
                if let Some(s) = open.replace(i) {
                    spans.push((s, i));
                }
            }
            BioTag::I => {
                open.get_or_insert(i);
            }
        }
    }
    if let Some(s) = open {
        spans.push((s, tags.len()));
    }
    spans
}

/// Re-encodes spans as strict BIO over `len` tokens.
pub fn encode_spans(spans: &[(usize, usize)], len: usize) -> Vec<BioTag> {
    let mut tags = vec![BioTag::O; len];
    for &(s, e) in spans {
        tags[s] = BioTag::B;
        for t in &mut tags[s + 1..e] {
            *t = BioTag::I;
        }
    }
    tags
}

/// KI spans typed by majority vote of the non-O KC labels inside each span.
pub fn typed_spans<S: AsRef<str>>(ki: &[BioTag], kc: &[S]) -> Vec<(usize, usize, String)> {
    assert_eq!(ki.len(), kc.len(), "KI and KC sequences differ in length");
    decode_spans(ki)
        .into_iter()
        .map(|(s, e)| {
            let mut votes: BTreeMap<&str, usize> = BTreeMap::new();
            for label in &kc[s..e] {
                let label = label.as_ref();
                if label != OUTSIDE {
                    *votes.entry(label).or_default() += 1;
                }
            }
            // BTreeMap iterates in lexicographic order, so the first maximum wins ties
            let mut best: Option<(&str, usize)> = None;
            for (label, n) in votes {
                if best.map_or(true, |(_, m)| n > m) {
                    best = Some((label, n));
                }
            }
            (s, e, best.map_or(UNKNOWN_TYPE, |(l, _)| l).to_string())
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Scores {
    fn from_counts(tp: usize, predicted: usize, gold: usize) -> Self {
        let precision = if predicted == 0 {
            if gold == 0 { 1.0 } else { 0.0 }
        } else {
            tp as f64 / predicted as f64
        };
        let recall = if gold == 0 { 1.0 } else { tp as f64 / gold as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Scores {
            precision,
            recall,
            f1,
            true_positives: tp,
            predicted,
            gold,
        }
    }
}

/// Micro-averaged exact span match. With `typed = false` span types are ignored.
pub fn exact_match_f1(predicted: &[Span], gold: &[Span], typed: bool) -> Scores {
    let key = |s: &Span| (s.doc_id.clone(), s.start, s.end, if typed { s.kind.clone() } else { None });
    let p: BTreeSet<_> = predicted.iter().map(key).collect();
    let g: BTreeSet<_> = gold.iter().map(key).collect();
    let tp = p.intersection(&g).count();
    Scores::from_counts(tp, p.len(), g.len())
}

/// Typed spans of one document's tag sequences.
pub fn document_spans<S: AsRef<str>>(doc_id: &str, ki: &[BioTag], kc: &[S]) -> Vec<Span> {
    typed_spans(ki, kc)
        .into_iter()
        .map(|(start, end, kind)| Span {
            doc_id: doc_id.to_string(),
            start,
            end,
            kind: Some(kind),
        })
        .collect()
}

pub fn gold_spans(docs: &[TaggedDocument]) -> Vec<Span> {
    docs.iter()
        .flat_map(|d| document_spans(&d.doc_id, &d.ki_tags, &d.kc_tags))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvaluationReport {
    pub ki: Scores,
    pub kic: Scores,
    pub per_type: BTreeMap<String, Scores>,
}

impl EvaluationReport {
    pub fn from_spans(predicted: &[Span], gold: &[Span]) -> Self {
        let mut types: BTreeSet<&str> = BTreeSet::new();
        for s in gold.iter().chain(predicted) {
            if let Some(k) = &s.kind {
                types.insert(k);
            }
        }
        let per_type = types
            .into_iter()
            .map(|t| {
                let only = |spans: &[Span]| -> Vec<Span> {
                    spans.iter().filter(|s| s.kind.as_deref() == Some(t)).cloned().collect()
                };
                (t.to_string(), exact_match_f1(&only(predicted), &only(gold), true))
            })
            .collect();
        EvaluationReport {
            ki: exact_match_f1(predicted, gold, false),
            kic: exact_match_f1(predicted, gold, true),
            per_type,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let row = |out: &mut String, name: &str, s: &Scores| {
            let _ = writeln!(
                out,
                "{name:<16} P={:.4} R={:.4} F1={:.4}  (tp={} pred={} gold={})",
                s.precision, s.recall, s.f1, s.true_positives, s.predicted, s.gold
            );
        };
        row(&mut out, "KI", &self.ki);
        row(&mut out, "KIC", &self.kic);
        for (t, s) in &self.per_type {
            row(&mut out, &format!("  {t}"), s);
        }
        out
    }

    /// `metric<TAB>precision<TAB>recall<TAB>f1<TAB>tp<TAB>predicted<TAB>gold`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("metric\tprecision\trecall\tf1\ttp\tpredicted\tgold\n");
        let mut row = |name: &str, s: &Scores| {
            let _ = writeln!(
                out,
                "{name}\t{:.4}\t{:.4}\t{:.4}\t{}\t{}\t{}",
                s.precision, s.recall, s.f1, s.true_positives, s.predicted, s.gold
            );
        };
        row("KI", &self.ki);
        row("KIC", &self.kic);
        for (t, s) in &self.per_type {
            row(&format!("KIC:{t}"), s);
        }
        out
    }
}
