//! Captured inner states and their on-disk container.
//!
//! A capture file holds one model's per-prompt inner states: the layer-wise
//! feed-forward activation map, the rank of the finally generated token in
//! every layer's logit-lens distribution, and each layer's top-k token ids and
//! probabilities. A per-file embedding dictionary carries the token vectors
//! needed to compare top-k tokens across layers.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "LFSC"  u16 version=1
//! meta:    str model_id, u32 L, u32 D, u32 |V|, u32 k, u32 d_e, u8 decoding
//! u32 record count
//! record:  f32[L·D] activation_map, u32[L] ranks, u32[L·k] topk_indices,
//!          f32[L·k] topk_probs, str prompt, str answer, str generated_word,
//!          str category, str relation, u8 label
//! embeddings: u32 count, then per entry u32 token_id + f32[d_e]
//! u64 CRC-64/XZ over every preceding byte
//! ```
//! `str` is a u32 byte length followed by UTF-8.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LFSC";
pub const VERSION: u16 = 1;

const CRC64: crc::Crc<u64> = crc::Crc::<u64>::new(&crc::CRC_64_XZ);

/// Allowed slack on the sum of a top-k probability row.
pub const PROB_SUM_TOLERANCE: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Decoding {
    Greedy,
}

impl Decoding {
    fn tag(self) -> u8 {
        match self {
            Decoding::Greedy => 0,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Decoding::Greedy),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Factual,
    Nonfactual,
}

impl Label {
    pub fn tag(self) -> u8 {
        match self {
            Label::Factual => 1,
            Label::Nonfactual => 0,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Label::Factual),
            0 => Some(Label::Nonfactual),
            _ => None,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Label::Factual => Label::Nonfactual,
            Label::Nonfactual => Label::Factual,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Factual => "factual",
            Label::Nonfactual => "nonfactual",
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptureMeta {
    pub model_id: String,
    pub num_layers: usize,
    pub activation_dim: usize,
    pub vocab_size: usize,
    pub top_k: usize,
    pub embed_dim: usize,
    pub decoding: Decoding,
}

impl CaptureMeta {
    /// Violations of the dimension invariants, empty when valid.
    pub fn check(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.num_layers < 2 {
            out.push(format!("meta.num_layers: {} < 2", self.num_layers));
        }
        if self.activation_dim < 1 {
            out.push("meta.activation_dim: must be >= 1".to_string());
        }
        if self.top_k < 1 || self.vocab_size <= self.top_k {
            out.push(format!(
                "meta.top_k: need |V| > k >= 1, got |V|={} k={}",
                self.vocab_size, self.top_k
            ));
        }
        if self.embed_dim < 1 {
            out.push("meta.embed_dim: must be >= 1".to_string());
        }
        out
    }
}

/// One prompt's captured inner states. Matrices are row-major with one row
/// per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct InnerStateRecord {
    pub prompt: String,
    pub answer: String,
    pub generated_word: String,
    pub category: String,
    pub relation: String,
    pub label: Label,
    /// L×D
    pub activation_map: Vec<f32>,
    /// L entries, 1-based ranks.
    pub rank_sequence: Vec<u32>,
    /// L×k
    pub topk_indices: Vec<u32>,
    /// L×k
    pub topk_probs: Vec<f32>,
}

impl InnerStateRecord {
    pub fn activation_row(&self, layer: usize, dim: usize) -> &[f32] {
        &self.activation_map[layer * dim..(layer + 1) * dim]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostic {
    /// Dotted path of the offending field, e.g. `topk_probs[3]`.
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Token id → embedding vector. Ordered so serialization is canonical.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingDictionary {
    pub entries: BTreeMap<u32, Vec<f32>>,
}

impl EmbeddingDictionary {
    pub fn get(&self, token: u32) -> Option<&[f32]> {
        self.entries.get(&token).map(|v| v.as_slice())
    }

    pub fn insert(&mut self, token: u32, vector: Vec<f32>) {
        self.entries.insert(token, vector);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptureFile {
    pub meta: CaptureMeta,
    pub records: Vec<InnerStateRecord>,
    pub embeddings: EmbeddingDictionary,
}

impl CaptureFile {
    /// Check meta, every record and dictionary coverage; the first failure is
    /// reported with its record index (meta and dictionary problems use the
    /// index of the first record that exposes them, or 0).
    pub fn validate(&self) -> Result<()> {
        if let Some(msg) = self.meta.check().into_iter().next() {
            return Err(Error::Validation { index: 0, message: msg });
        }
        for (i, r) in self.records.iter().enumerate() {
            let diags = validate_record(r, &self.meta);
            if !diags.is_empty() {
                let message = diags.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; ");
                return Err(Error::Validation { index: i, message });
            }
            for &t in &r.topk_indices {
                if self.embeddings.get(t).is_none() {
                    return Err(Error::Validation {
                        index: i,
                        message: format!("token id {t} has no embedding dictionary entry"),
                    });
                }
            }
        }
        for (t, v) in &self.embeddings.entries {
            if v.len() != self.meta.embed_dim {
                return Err(Error::Validation {
                    index: 0,
                    message: format!(
                        "embedding for token {t} has length {}, expected {}",
                        v.len(),
                        self.meta.embed_dim
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Every violated record invariant, one diagnostic per violation.
pub fn validate_record(r: &InnerStateRecord, meta: &CaptureMeta) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut push = |field: String, message: String| out.push(Diagnostic { field, message });
    let (l, d, k, v) = (meta.num_layers, meta.activation_dim, meta.top_k, meta.vocab_size);

    if r.activation_map.len() != l * d {
        push(
            "activation_map".into(),
            format!("length {} does not match L×D = {}", r.activation_map.len(), l * d),
        );
    } else if let Some(i) = r.activation_map.iter().position(|x| !x.is_finite()) {
        push(format!("activation_map[{}][{}]", i / d, i % d), "non-finite value".into());
    }

    let ranks_ok = r.rank_sequence.len() == l;
    if !ranks_ok {
        push(
            "rank_sequence".into(),
            format!("length {} does not match L = {l}", r.rank_sequence.len()),
        );
    } else {
        for (layer, &rank) in r.rank_sequence.iter().enumerate() {
            if rank < 1 || rank as usize > v {
                push(format!("rank_sequence[{layer}]"), format!("rank {rank} out of [1,|V|] with |V|={v}"));
            }
        }
        if meta.decoding == Decoding::Greedy && r.rank_sequence[l - 1] != 1 {
            push(
                format!("rank_sequence[{}]", l - 1),
                format!("greedy decoding requires final-layer rank 1, got {}", r.rank_sequence[l - 1]),
            );
        }
    }

    let idx_ok = r.topk_indices.len() == l * k && k > 0;
    if !idx_ok {
        push(
            "topk_indices".into(),
            format!("length {} does not match L×k = {}", r.topk_indices.len(), l * k),
        );
    } else {
        for (layer, row) in r.topk_indices.chunks(k).enumerate() {
            for (j, &t) in row.iter().enumerate() {
                if t as usize >= v {
                    push(format!("topk_indices[{layer}][{j}]"), format!("token id {t} out of [0,|V|) with |V|={v}"));
                }
            }
            let mut seen = HashSet::new();
            let dups: Vec<u32> = row.iter().filter(|t| !seen.insert(**t)).copied().collect();
            if !dups.is_empty() {
                push(
                    format!("topk_indices[{layer}]"),
                    format!("duplicate token ids {dups:?} at layer {layer}"),
                );
            }
        }
    }

    if r.topk_probs.len() != l * k || k == 0 {
        push(
            "topk_probs".into(),
            format!("length {} does not match L×k = {}", r.topk_probs.len(), l * k),
        );
    } else {
        for (layer, row) in r.topk_probs.chunks(k).enumerate() {
            if let Some(j) = row.iter().position(|p| !(*p > 0.0 && *p <= 1.0)) {
                push(format!("topk_probs[{layer}][{j}]"), format!("probability {} outside (0,1]", row[j]));
            }
            if let Some(j) = (1..k).find(|&j| row[j] > row[j - 1]) {
                push(
                    format!("topk_probs[{layer}]"),
                    format!(
                        "row is not non-increasing at layer {layer}: position {j} ({}) exceeds position {} ({})",
                        row[j],
                        j - 1,
                        row[j - 1]
                    ),
                );
            }
            let sum: f32 = row.iter().sum();
            if sum > 1.0 + PROB_SUM_TOLERANCE {
                push(format!("topk_probs[{layer}]"), format!("row sums to {sum} > 1"));
            }
        }
    }

    if ranks_ok && idx_ok {
        if let Some(diag) = rank_one_consistency(r, meta) {
            out.push(diag);
        }
    }
    out
}

/// Rank 1 at a layer means the generated token heads that layer's top-k list.
/// The generated token's id is not stored separately, so the check is that
/// every rank-1 layer agrees on the same top-1 token.
pub fn rank_one_consistency(r: &InnerStateRecord, meta: &CaptureMeta) -> Option<Diagnostic> {
    let k = meta.top_k;
    let mut tops = r
        .rank_sequence
        .iter()
        .enumerate()
        .filter(|(_, &rank)| rank == 1)
        .map(|(l, _)| (l, r.topk_indices.get(l * k).copied()));
    let (_, first) = tops.next()?;
    tops.find(|(_, t)| *t != first).map(|(l, t)| Diagnostic {
        field: format!("topk_indices[{l}][0]"),
        message: format!("rank-1 layers disagree on the generated token ({first:?} vs {t:?})"),
    })
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, vs: &[f32]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn u32s(&mut self, vs: &[u32]) {
        for v in vs {
            self.u32(*v);
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
}

fn dim_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::param(format!("{what} {v} does not fit in u32")))
}

/// Serialize to the capture layout in memory.
pub fn encode_capture(file: &CaptureFile) -> Result<Vec<u8>> {
    file.validate()?;
    let m = &file.meta;
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u16(VERSION);
    w.str(&m.model_id);
    for (v, what) in [
        (m.num_layers, "L"),
        (m.activation_dim, "D"),
        (m.vocab_size, "|V|"),
        (m.top_k, "k"),
        (m.embed_dim, "d_e"),
    ] {
        w.u32(dim_u32(v, what)?);
    }
    w.u8(m.decoding.tag());
    w.u32(dim_u32(file.records.len(), "record count")?);
    for r in &file.records {
        w.f32s(&r.activation_map);
        w.u32s(&r.rank_sequence);
        w.u32s(&r.topk_indices);
        w.f32s(&r.topk_probs);
        for s in [&r.prompt, &r.answer, &r.generated_word, &r.category, &r.relation] {
            w.str(s);
        }
        w.u8(r.label.tag());
    }
    w.u32(dim_u32(file.embeddings.len(), "embedding count")?);
    for (t, v) in &file.embeddings.entries {
        w.u32(*t);
        w.f32s(v);
    }
    let crc = CRC64.checksum(&w.buf);
    w.buf.extend_from_slice(&crc.to_le_bytes());
    Ok(w.buf)
}

pub fn write_capture(file: &CaptureFile, path: &Path) -> Result<()> {
    let bytes = encode_capture(file)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or_else(|| Error::corrupt(section))?;
        if end > self.buf.len() {
            return Err(Error::corrupt(section));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self, section: &str) -> Result<u8> {
        Ok(self.take(1, section)?[0])
    }
    fn u16(&mut self, section: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, section)?.try_into().unwrap()))
    }
    fn u32(&mut self, section: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }
    fn usize(&mut self, section: &str) -> Result<usize> {
        Ok(self.u32(section)? as usize)
    }
    fn f32s(&mut self, n: usize, section: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::corrupt(section))?, section)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn u32s(&mut self, n: usize, section: &str) -> Result<Vec<u32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::corrupt(section))?, section)?;
        Ok(bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn str(&mut self, section: &str) -> Result<String> {
        let n = self.usize(section)?;
        let bytes = self.take(n, section)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Format(format!("invalid UTF-8 string in {section} section")))
    }
}

/// Parse and validate a capture image. Fails without partial results.
pub fn decode_capture(bytes: &[u8]) -> Result<CaptureFile> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic: not a capture file".into()));
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u16("header")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let model_id = r.str("meta")?;
    let num_layers = r.usize("meta")?;
    let activation_dim = r.usize("meta")?;
    let vocab_size = r.usize("meta")?;
    let top_k = r.usize("meta")?;
    let embed_dim = r.usize("meta")?;
    let tag = r.u8("meta")?;
    let decoding = Decoding::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown decoding tag {tag}")))?;
    let meta = CaptureMeta {
        model_id,
        num_layers,
        activation_dim,
        vocab_size,
        top_k,
        embed_dim,
        decoding,
    };
    if let Some(msg) = meta.check().into_iter().next() {
        return Err(Error::Format(msg));
    }
    let (l, d, k) = (num_layers, activation_dim, top_k);
    let count = r.usize("records")?;
    // each record needs at least its fixed numeric block
    let min_record = 4 * (l * d + l + 2 * l * k) + 5 * 4 + 1;
    if count.saturating_mul(min_record) > bytes.len() {
        return Err(Error::corrupt("records"));
    }
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let activation_map = r.f32s(l * d, "records")?;
        let rank_sequence = r.u32s(l, "records")?;
        let topk_indices = r.u32s(l * k, "records")?;
        let topk_probs = r.f32s(l * k, "records")?;
        let prompt = r.str("records")?;
        let answer = r.str("records")?;
        let generated_word = r.str("records")?;
        let category = r.str("records")?;
        let relation = r.str("records")?;
        let tag = r.u8("records")?;
        let label = Label::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown label tag {tag}")))?;
        records.push(InnerStateRecord {
            prompt,
            answer,
            generated_word,
            category,
            relation,
            label,
            activation_map,
            rank_sequence,
            topk_indices,
            topk_probs,
        });
    }
    let n_emb = r.usize("embeddings")?;
    if n_emb.saturating_mul(4 + 4 * embed_dim) > bytes.len() {
        return Err(Error::corrupt("embeddings"));
    }
    let mut embeddings = EmbeddingDictionary::default();
    for _ in 0..n_emb {
        let t = r.u32("embeddings")?;
        let v = r.f32s(embed_dim, "embeddings")?;
        embeddings.insert(t, v);
    }
    let body_end = r.pos;
    let stored = u64::from_le_bytes(r.take(8, "checksum")?.try_into().unwrap());
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checksum", bytes.len() - r.pos)));
    }
    let actual = CRC64.checksum(&bytes[..body_end]);
    if stored != actual {
        return Err(Error::Format(format!(
            "checksum mismatch: stored {stored:#018x}, computed {actual:#018x}"
        )));
    }
    let file = CaptureFile {
        meta,
        records,
        embeddings,
    };
    file.validate()?;
    Ok(file)
}

pub fn read_capture(path: &Path) -> Result<CaptureFile> {
    let bytes = fs::read(path)?;
    decode_capture(&bytes)
}

/// Union of every top-k token id across records.
pub fn referenced_tokens(records: &[InnerStateRecord]) -> Vec<u32> {
    let set: std::collections::BTreeSet<u32> = records.iter().flat_map(|r| r.topk_indices.iter().copied()).collect();
    set.into_iter().collect()
}
