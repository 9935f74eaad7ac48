//! CoNLL-style corpora: parsing, vocabularies and padded batches.
//!
//! A corpus file holds one token per line as `token<TAB>KI<TAB>KC`; a blank
//! line closes a document. A line `#doc <id>` directly before a block names
//! that document; unnamed documents get `d<index>`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::numerics::Tensor;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
/// Label value at padded positions.
pub const IGNORE_LABEL: usize = usize::MAX;
pub const OUTSIDE: &str = "O";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorpusError {
    #[error("line {line}: expected at least 3 tab-separated columns, found {found}")]
    Ragged { line: usize, found: usize },
    #[error("line {line}: invalid BIO tag `{tag}`")]
    InvalidTag { line: usize, tag: String },
    #[error("line {line}: I tag follows O or document start")]
    IllegalInside { line: usize },
    #[error("line {line}: type column must be O exactly when the BIO column is O")]
    TypeMismatch { line: usize },
    #[error("empty corpus")]
    Empty,
    #[error("unknown keyphrase type `{0}` (not in the declared inventory)")]
    UnknownType(String),
    #[error("document `{0}` has no domain label")]
    MissingDomain(String),
    #[error("domain label {label} out of range for {topics} topics")]
    DomainOutOfRange { label: usize, topics: usize },
    #[error("embeddings: {0}")]
    Embeddings(String),
    #[error("min_count must be at least 1")]
    InvalidMinCount,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BioTag {
    O,
    B,
    I,
}

impl BioTag {
    pub const ALL: [BioTag; 3] = [BioTag::O, BioTag::B, BioTag::I];

    /// Fixed label id: O=0, B=1, I=2.
    pub fn id(self) -> usize {
        match self {
            BioTag::O => 0,
            BioTag::B => 1,
            BioTag::I => 2,
        }
    }

    pub fn from_id(id: usize) -> Option<BioTag> {
        BioTag::ALL.get(id).copied()
    }
}

impl FromStr for BioTag {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "O" => Ok(BioTag::O),
            "B" => Ok(BioTag::B),
            "I" => Ok(BioTag::I),
            other => Err(other.to_string()),
        }
    }
}

impl fmt::Display for BioTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BioTag::O => "O",
            BioTag::B => "B",
            BioTag::I => "I",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaggedDocument {
    pub doc_id: String,
    pub tokens: Vec<String>,
    pub ki_tags: Vec<BioTag>,
    pub kc_tags: Vec<String>,
    pub precomputed_embeddings: Option<Vec<Vec<f64>>>,
}

impl TaggedDocument {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn embedding_width(&self) -> Option<usize> {
        self.precomputed_embeddings
            .as_ref()
            .and_then(|e| e.first().map(Vec::len))
    }
}

struct Block {
    doc_id: Option<String>,
    rows: Vec<(usize, String, BioTag, String)>,
}

fn finish_block(block: Block, index: usize) -> Result<TaggedDocument, CorpusError> {
    let mut prev = None;
    for (line, _, tag, _) in &block.rows {
        if *tag == BioTag::I && matches!(prev, None | Some(BioTag::O)) {
            return Err(CorpusError::IllegalInside { line: *line });
        }
        prev = Some(*tag);
    }
    let doc_id = block.doc_id.unwrap_or_else(|| format!("d{index}"));
    let (mut tokens, mut ki_tags, mut kc_tags) = (Vec::new(), Vec::new(), Vec::new());
    for (_, tok, ki, kc) in block.rows {
        tokens.push(tok);
        ki_tags.push(ki);
        kc_tags.push(kc);
    }
    Ok(TaggedDocument {
        doc_id,
        tokens,
        ki_tags,
        kc_tags,
        precomputed_embeddings: None,
    })
}

/// Parses a corpus. Line numbers in errors are 1-based.
pub fn parse_conll(text: &str) -> Result<Vec<TaggedDocument>, CorpusError> {
    let mut docs = Vec::new();
    let mut pending_id: Option<String> = None;
    let mut block: Option<Block> = None;

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            if let Some(b) = block.take() {
                docs.push(finish_block(b, docs.len())?);
            }
            continue;
        }
        if block.is_none() {
            if let Some(id) = line.strip_prefix("#doc ") {
                pending_id = Some(id.trim().to_string());
                continue;
            }
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 3 {
            return Err(CorpusError::Ragged {
                line: line_no,
                found: cols.len(),
            });
        }
        let ki: BioTag = cols[1].parse().map_err(|tag| CorpusError::InvalidTag {
            line: line_no,
            tag,
        })?;
        let kc = cols[2].to_string();
        if kc.is_empty() {
            return Err(CorpusError::InvalidTag {
                line: line_no,
                tag: kc,
            });
        }
        if (ki == BioTag::O) != (kc == OUTSIDE) {
            return Err(CorpusError::TypeMismatch { line: line_no });
        }
        let b = block.get_or_insert_with(|| Block {
            doc_id: pending_id.take(),
            rows: Vec::new(),
        });
        b.rows.push((line_no, cols[0].to_string(), ki, kc));
    }
    if let Some(b) = block.take() {
        docs.push(finish_block(b, docs.len())?);
    }
    Ok(docs)
}

/// Writes documents back in the corpus format, naming each block.
pub fn write_conll(docs: &[TaggedDocument]) -> String {
    let mut out = String::new();
    for doc in docs {
        out.push_str("#doc ");
        out.push_str(&doc.doc_id);
        out.push('\n');
        for ((tok, ki), kc) in doc.tokens.iter().zip(&doc.ki_tags).zip(&doc.kc_tags) {
            out.push_str(&format!("{tok}\t{ki}\t{kc}\n"));
        }
        out.push('\n');
    }
    out
}

/// Parses a precomputed-embeddings file into `doc_id -> per-token vectors`.
pub fn parse_embeddings(text: &str) -> Result<BTreeMap<String, Vec<Vec<f64>>>, CorpusError> {
    let err = |line: usize, msg: &str| CorpusError::Embeddings(format!("line {line}: {msg}"));
    let mut out = BTreeMap::new();
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    while let Some((i, header)) = lines.next() {
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "#doc" {
            return Err(err(i + 1, "expected `#doc <doc_id> <n_tokens> <width>`"));
        }
        let n: usize = parts[2].parse().map_err(|_| err(i + 1, "bad token count"))?;
        let width: usize = parts[3].parse().map_err(|_| err(i + 1, "bad width"))?;
        if n == 0 || width == 0 {
            return Err(err(i + 1, "token count and width must be positive"));
        }
        let mut vectors = Vec::with_capacity(n);
        for _ in 0..n {
            let (j, row) = lines.next().ok_or_else(|| err(i + 1, "truncated block"))?;
            let v: Vec<f64> = row
                .split_whitespace()
                .map(|x| x.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| err(j + 1, "unparseable float"))?;
            if v.len() != width || v.iter().any(|x| !x.is_finite()) {
                return Err(err(j + 1, "wrong width or non-finite value"));
            }
            vectors.push(v);
        }
        out.insert(parts[1].to_string(), vectors);
    }
    Ok(out)
}

/// Attaches precomputed vectors to documents by id; every document must be covered.
pub fn attach_embeddings(
    docs: &mut [TaggedDocument],
    mut table: BTreeMap<String, Vec<Vec<f64>>>,
) -> Result<(), CorpusError> {
    let mut width = None;
    for doc in docs.iter_mut() {
        let v = table
            .remove(&doc.doc_id)
            .ok_or_else(|| CorpusError::Embeddings(format!("no vectors for document `{}`", doc.doc_id)))?;
        if v.len() != doc.len() {
            return Err(CorpusError::Embeddings(format!(
                "document `{}` has {} tokens but {} vectors",
                doc.doc_id,
                doc.len(),
                v.len()
            )));
        }
        let w = v[0].len();
        if *width.get_or_insert(w) != w {
            return Err(CorpusError::Embeddings("inconsistent widths across documents".into()));
        }
        doc.precomputed_embeddings = Some(v);
    }
    Ok(())
}

/// Token-to-id map with reserved padding (0) and unknown (1) ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    frozen: bool,
}

impl Vocabulary {
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut v = Vocabulary {
            tokens: vec!["<pad>".into(), "<unk>".into()],
            ids: HashMap::new(),
            frozen: true,
        };
        for t in tokens {
            if !v.ids.contains_key(&t) {
                v.ids.insert(t.clone(), v.tokens.len());
                v.tokens.push(t);
            }
        }
        v
    }

    /// Id for a token; unknown tokens map to [`UNK_ID`].
    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    /// Size including the two reserved ids.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Non-reserved tokens in id order.
    pub fn entries(&self) -> &[String] {
        &self.tokens[2..]
    }
}

/// Tokens with frequency >= `min_count`, ordered by descending frequency then
/// lexicographically, starting at id 2.
pub fn build_vocab(docs: &[TaggedDocument], min_count: usize) -> Result<Vocabulary, CorpusError> {
    if min_count == 0 {
        return Err(CorpusError::InvalidMinCount);
    }
    if docs.iter().all(TaggedDocument::is_empty) {
        return Err(CorpusError::Empty);
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for doc in docs {
        for t in &doc.tokens {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Ok(Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t.to_string())))
}

/// Sorted, de-duplicated keyphrase types. KC label 0 is O; type `i` gets id `i + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TypeInventory {
    types: Vec<String>,
}

impl TypeInventory {
    pub fn new<S: AsRef<str>>(types: impl IntoIterator<Item = S>) -> Self {
        let set: BTreeSet<String> = types
            .into_iter()
            .map(|s| s.as_ref().to_string())
            .filter(|s| s != OUTSIDE)
            .collect();
        TypeInventory {
            types: set.into_iter().collect(),
        }
    }

    pub fn from_corpus(docs: &[TaggedDocument]) -> Self {
        Self::new(docs.iter().flat_map(|d| d.kc_tags.iter()))
    }

    pub fn types(&self) -> &[String] {
        &self.types
    }

    /// Number of KC classes including O.
    pub fn num_classes(&self) -> usize {
        self.types.len() + 1
    }

    pub fn label_id(&self, tag: &str) -> Result<usize, CorpusError> {
        if tag == OUTSIDE {
            return Ok(0);
        }
        self.types
            .binary_search_by(|t| t.as_str().cmp(tag))
            .map(|i| i + 1)
            .map_err(|_| CorpusError::UnknownType(tag.to_string()))
    }

    pub fn label_name(&self, id: usize) -> &str {
        if id == 0 {
            OUTSIDE
        } else {
            self.types.get(id - 1).map(String::as_str).unwrap_or(OUTSIDE)
        }
    }
}

/// Right-padded batch, row-major `[batch, max_len]` layouts.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedBatch {
    pub doc_ids: Vec<String>,
    pub batch: usize,
    pub max_len: usize,
    pub lengths: Vec<usize>,
    pub token_ids: Vec<usize>,
    pub mask: Vec<u8>,
    pub ki_labels: Vec<usize>,
    pub kc_labels: Vec<usize>,
    pub domain_labels: Vec<usize>,
    /// `[batch, max_len, width]`, zero under padding.
    pub embeddings: Option<Tensor>,
}

impl EncodedBatch {
    pub fn at(&self, b: usize, t: usize) -> usize {
        b * self.max_len + t
    }

    pub fn is_real(&self, b: usize, t: usize) -> bool {
        self.mask[self.at(b, t)] == 1
    }

    pub fn token_count(&self) -> usize {
        self.mask.iter().map(|&m| m as usize).sum()
    }
}

/// Encodes documents with their per-document domain labels (`domains[i]` belongs to `docs[i]`).
pub fn encode_batch(
    docs: &[&TaggedDocument],
    vocab: &Vocabulary,
    domains: &[usize],
    inventory: &TypeInventory,
    num_domains: usize,
) -> Result<EncodedBatch, CorpusError> {
    if docs.is_empty() || docs.iter().any(|d| d.is_empty()) {
        return Err(CorpusError::Empty);
    }
    if domains.len() != docs.len() {
        let missing = docs.get(domains.len()).map(|d| d.doc_id.clone()).unwrap_or_default();
        return Err(CorpusError::MissingDomain(missing));
    }
    if let Some(&label) = domains.iter().find(|&&d| d >= num_domains) {
        return Err(CorpusError::DomainOutOfRange {
            label,
            topics: num_domains,
        });
    }
    let batch = docs.len();
    let max_len = docs.iter().map(|d| d.len()).max().unwrap_or(0);
    let size = batch * max_len;
    let mut token_ids = vec![PAD_ID; size];
    let mut mask = vec![0u8; size];
    let mut ki_labels = vec![IGNORE_LABEL; size];
    let mut kc_labels = vec![IGNORE_LABEL; size];

    let width = match docs[0].embedding_width() {
        Some(w) => {
            if docs.iter().any(|d| d.embedding_width() != Some(w)) {
                return Err(CorpusError::Embeddings("batch mixes documents with and without vectors, or widths differ".into()));
            }
            Some(w)
        }
        None => {
            if docs.iter().any(|d| d.precomputed_embeddings.is_some()) {
                return Err(CorpusError::Embeddings("batch mixes documents with and without vectors".into()));
            }
            None
        }
    };
    let mut emb = width.map(|w| vec![0.0; size * w]);

    for (b, doc) in docs.iter().enumerate() {
        for t in 0..doc.len() {
            let i = b * max_len + t;
            token_ids[i] = vocab.id(&doc.tokens[t]);
            mask[i] = 1;
            ki_labels[i] = doc.ki_tags[t].id();
            kc_labels[i] = inventory.label_id(&doc.kc_tags[t])?;
            if let (Some(w), Some(buf), Some(vecs)) = (width, emb.as_mut(), doc.precomputed_embeddings.as_ref()) {
                buf[i * w..(i + 1) * w].copy_from_slice(&vecs[t]);
            }
        }
    }

    let embeddings = match (width, emb) {
        (Some(w), Some(data)) => Some(
            Tensor::new(vec![batch, max_len, w], data).map_err(|e| CorpusError::Embeddings(e.to_string()))?,
        ),
        _ => None,
    };

    Ok(EncodedBatch {
        doc_ids: docs.iter().map(|d| d.doc_id.clone()).collect(),
        batch,
        max_len,
        lengths: docs.iter().map(|d| d.len()).collect(),
        token_ids,
        mask,
        ki_labels,
        kc_labels,
        domain_labels: domains.to_vec(),
        embeddings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(tokens: &[&str]) -> TaggedDocument {
        TaggedDocument {
            doc_id: "x".into(),
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            ki_tags: vec![BioTag::O; tokens.len()],
            kc_tags: vec![OUTSIDE.into(); tokens.len()],
            precomputed_embeddings: None,
        }
    }

    #[test]
    fn parses_two_token_keyphrase() {
        let docs = parse_conll("deep\tB\tProcess\nlearning\tI\tProcess\n\n").unwrap();
        assert_eq!(docs.len(), 1);
        assert_eq!(docs[0].tokens, vec!["deep", "learning"]);
        assert_eq!(docs[0].ki_tags, vec![BioTag::B, BioTag::I]);
        assert_eq!(docs[0].kc_tags, vec!["Process", "Process"]);
    }

    #[test]
    fn parses_outside_token_without_trailing_blank() {
        let docs = parse_conll("the\tO\tO\n").unwrap();
        assert_eq!(docs.len(), 1);
        assert_eq!(docs[0].ki_tags, vec![BioTag::O]);
        assert_eq!(docs[0].kc_tags, vec!["O"]);
    }

    #[test]
    fn empty_input_gives_no_documents() {
        assert!(parse_conll("").unwrap().is_empty());
        assert!(parse_conll("\n\n").unwrap().is_empty());
    }

    #[test]
    fn ragged_line_reports_line_number() {
        let err = parse_conll("a\tO\tO\nb\tO\n").unwrap_err();
        assert_eq!(err, CorpusError::Ragged { line: 2, found: 2 });
    }

    #[test]
    fn invalid_tag_is_named() {
        let err = parse_conll("a\tX\tO\n").unwrap_err();
        assert_eq!(err, CorpusError::InvalidTag { line: 1, tag: "X".into() });
    }

    #[test]
    fn inside_after_outside_rejected() {
        assert_eq!(
            parse_conll("a\tO\tO\nb\tI\tTask\n").unwrap_err(),
            CorpusError::IllegalInside { line: 2 }
        );
        assert_eq!(
            parse_conll("a\tO\tO\n\nb\tI\tTask\n").unwrap_err(),
            CorpusError::IllegalInside { line: 3 }
        );
    }

    #[test]
    fn fourth_column_ignored_and_ids_honoured() {
        let docs = parse_conll("#doc abstract-7\na\tB\tTask\textra\n\nb\tO\tO\n").unwrap();
        assert_eq!(docs[0].doc_id, "abstract-7");
        assert_eq!(docs[1].doc_id, "d1");
    }

    #[test]
    fn type_column_must_agree_with_bio() {
        assert!(matches!(parse_conll("a\tB\tO\n"), Err(CorpusError::TypeMismatch { line: 1 })));
        assert!(matches!(parse_conll("a\tO\tTask\n"), Err(CorpusError::TypeMismatch { line: 1 })));
    }

    #[test]
    fn vocab_min_count_filters() {
        let docs = vec![doc(&["a", "a", "b", "a"])];
        let v = build_vocab(&docs, 2).unwrap();
        assert_eq!(v.entries(), &["a".to_string()]);
        assert_eq!(v.id("b"), UNK_ID);
    }

    #[test]
    fn vocab_orders_by_frequency_then_lexicographic() {
        let v = build_vocab(&[doc(&["b", "a", "a", "a"])], 1).unwrap();
        assert_eq!((v.id("a"), v.id("b")), (2, 3));
        let v = build_vocab(&[doc(&["b", "a", "b", "a"])], 1).unwrap();
        assert_eq!((v.id("a"), v.id("b")), (2, 3));
    }

    #[test]
    fn vocab_rejects_empty_corpus() {
        assert_eq!(build_vocab(&[], 1).unwrap_err(), CorpusError::Empty);
    }

    #[test]
    fn batch_padding_and_mask() {
        let inv = TypeInventory::new(["Task"]);
        let d1 = doc(&["a", "b", "c"]);
        let d2 = doc(&["zzz"]);
        let v = build_vocab(&[d1.clone()], 1).unwrap();
        let b = encode_batch(&[&d1, &d2], &v, &[0, 1], &inv, 2).unwrap();
        assert_eq!((b.batch, b.max_len), (2, 3));
        assert_eq!(&b.mask[3..], &[1, 0, 0]);
        assert_eq!(b.token_ids[3], UNK_ID);
        assert_eq!(b.ki_labels[4], IGNORE_LABEL);
        assert_eq!(b.token_count(), 4);
    }

    #[test]
    fn batch_rejects_unknown_type_and_bad_domain() {
        let mut d = doc(&["a"]);
        d.ki_tags[0] = BioTag::B;
        d.kc_tags[0] = "Method".into();
        let v = build_vocab(&[d.clone()], 1).unwrap();
        let inv = TypeInventory::new(["Task"]);
        assert_eq!(
            encode_batch(&[&d], &v, &[0], &inv, 2).unwrap_err(),
            CorpusError::UnknownType("Method".into())
        );
        let d = doc(&["a"]);
        assert!(matches!(
            encode_batch(&[&d], &v, &[2], &inv, 2),
            Err(CorpusError::DomainOutOfRange { .. })
        ));
    }

    #[test]
    fn embedding_block_zero_under_padding() {
        let mut d1 = doc(&["a", "b", "c"]);
        d1.precomputed_embeddings = Some(vec![vec![1.0; 8]; 3]);
        let mut d2 = doc(&["a"]);
        d2.precomputed_embeddings = Some(vec![vec![2.0; 8]]);
        let v = build_vocab(&[d1.clone()], 1).unwrap();
        let b = encode_batch(&[&d1, &d2], &v, &[0, 0], &TypeInventory::new::<&str>([]), 2).unwrap();
        let e = b.embeddings.unwrap();
        assert_eq!(e.shape(), &[2, 3, 8]);
        assert!(e.data()[(3 + 1) * 8..].iter().all(|&x| x == 0.0));
        assert!(e.data()[3 * 8..4 * 8].iter().all(|&x| x == 2.0));
    }

    #[test]
    fn embeddings_file_roundtrip_into_docs() {
        let text = "#doc d0 2 3\n0.1 0.2 0.3\n1 2 3\n";
        let table = parse_embeddings(text).unwrap();
        let mut docs = parse_conll("a\tO\tO\nb\tB\tTask\n").unwrap();
        attach_embeddings(&mut docs, table).unwrap();
        assert_eq!(docs[0].embedding_width(), Some(3));
        assert!(parse_embeddings("#doc d0 2 3\n0.1 0.2\n").is_err());
    }

    #[test]
    fn label_maps_fixed() {
        let inv = TypeInventory::new(["Task", "Material", "Process", "Task"]);
        assert_eq!(inv.types(), &["Material", "Process", "Task"]);
        assert_eq!(inv.label_id("O").unwrap(), 0);
        assert_eq!(inv.label_id("Material").unwrap(), 1);
        assert_eq!(inv.label_id("Task").unwrap(), 3);
        assert_eq!(inv.label_name(2), "Process");
    }

    fn arb_doc() -> impl Strategy<Value = (Vec<String>, Vec<(BioTag, usize)>)> {
        prop::collection::vec(("[a-z]{1,4}", 0usize..3, 0usize..2), 1..8).prop_map(|rows| {
            let mut prev = BioTag::O;
            let mut toks = Vec::new();
            let mut tags = Vec::new();
            for (tok, t, ty) in rows {
                let mut tag = BioTag::from_id(t).unwrap();
                if tag == BioTag::I && prev == BioTag::O {
                    tag = BioTag::B;
                }
                prev = tag;
                toks.push(tok);
                tags.push((tag, ty));
            }
            (toks, tags)
        })
    }

    proptest! {
        #[test]
        fn parse_write_parse_is_identity(raw in prop::collection::vec(arb_doc(), 0..5)) {
            let types = ["Process", "Task"];
            let docs: Vec<TaggedDocument> = raw.into_iter().enumerate().map(|(i, (toks, tags))| TaggedDocument {
                doc_id: format!("doc-{i}"),
                kc_tags: tags.iter().map(|(t, ty)| if *t == BioTag::O { OUTSIDE.to_string() } else { types[*ty].to_string() }).collect(),
                ki_tags: tags.iter().map(|(t, _)| *t).collect(),
                tokens: toks,
                precomputed_embeddings: None,
            }).collect();
            let text = write_conll(&docs);
            prop_assert_eq!(parse_conll(&text).unwrap(), docs.clone());
            if !docs.is_empty() {
                let v = build_vocab(&docs, 1).unwrap();
                let refs: Vec<&TaggedDocument> = docs.iter().collect();
                let b = encode_batch(&refs, &v, &vec![0; docs.len()], &TypeInventory::new(types), 1).unwrap();
                prop_assert_eq!(b.token_count(), docs.iter().map(|d| d.len()).sum::<usize>());
            }
        }
    }
}
