//! Corpus ingestion: byte-level tokenization or pretokenized `.tok` streams,
//! packed into fixed-length (input, target) pairs and batched in a
//! seed-deterministic order.

use crate::error::{Error, Result};
use crate::rng::Prng;
use alloc::vec::Vec;

/// Magic prefix of the pretokenized binary format.
pub const TOK_MAGIC: &[u8; 8] = b"VLTOK001";

/// Where a stream's ids came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamSource {
    ByteCorpus,
    Pretokenized,
}

/// A flat, validated sequence of token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    ids: Vec<u32>,
    vocab_size: usize,
    source: StreamSource,
}

impl TokenStream {
    /// Builds a stream, rejecting ids outside `[0, vocab_size)`.
    pub fn new(ids: Vec<u32>, vocab_size: usize, source: StreamSource) -> Result<Self> {
        if vocab_size == 0 {
            return Err(Error::invalid("vocab_size must be >= 1"));
        }
        if let Some(pos) = ids.iter().position(|&id| id as usize >= vocab_size) {
            return Err(Error::invalid(format_args!(
                "token id {} at position {pos} out of range for vocab {vocab_size}",
                ids[pos]
            )));
        }
        Ok(TokenStream { ids, vocab_size, source })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn source(&self) -> StreamSource {
        self.source
    }
}

/// Identity byte → id mapping; vocab is exactly 256.
pub fn byte_encode(text: &[u8]) -> TokenStream {
    TokenStream {
        ids: text.iter().map(|&b| u32::from(b)).collect(),
        vocab_size: 256,
        source: StreamSource::ByteCorpus,
    }
}

/// Inverse of `byte_encode`; rejects ids above 255.
pub fn byte_decode(stream: &TokenStream) -> Result<Vec<u8>> {
    stream
        .ids
        .iter()
        .map(|&id| {
            u8::try_from(id).map_err(|_| {
                Error::invalid(format_args!("token id {id} is not a byte; cannot decode"))
            })
        })
        .collect()
}

/// One packed training sequence: `target[j]` is the next token after
/// `input[j]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pair {
    pub input: Vec<u32>,
    pub target: Vec<u32>,
}

/// Cuts the stream into contiguous ctx-length windows advancing by ctx;
/// the final partial window is dropped. Documents are simply concatenated —
/// no cross-document masking.
pub fn pack(stream: &TokenStream, ctx_len: usize) -> Result<Vec<Pair>> {
    if ctx_len < 2 {
        return Err(Error::invalid("ctx_len must be >= 2"));
    }
    if stream.len() < ctx_len + 1 {
        return Err(Error::invalid(format_args!(
            "stream of {} tokens is shorter than ctx_len + 1 = {}",
            stream.len(),
            ctx_len + 1
        )));
    }
    let n_pairs = (stream.len() - 1) / ctx_len;
    let mut pairs = Vec::with_capacity(n_pairs);
    for p in 0..n_pairs {
        let k = p * ctx_len;
        pairs.push(Pair {
            input: stream.ids[k..k + ctx_len].to_vec(),
            target: stream.ids[k + 1..k + ctx_len + 1].to_vec(),
        });
    }
    Ok(pairs)
}

/// One step's worth of sequences, flattened row-major for the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub batch_size: usize,
    pub ctx_len: usize,
}

/// Deterministic batch iterator over a shuffled epoch.
pub struct Batches<'a> {
    pairs: &'a [Pair],
    order: Vec<usize>,
    batch_size: usize,
    next_batch: usize,
}

impl<'a> Batches<'a> {
    /// Number of full batches in the epoch; the trailing partial batch is
    /// dropped.
    pub fn n_batches(&self) -> usize {
        self.order.len() / self.batch_size
    }

    /// Resumes mid-epoch (used when restoring from a checkpoint).
    pub fn skip_to(&mut self, batch_index: usize) {
        self.next_batch = batch_index;
    }
}

impl<'a> Iterator for Batches<'a> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.next_batch >= self.n_batches() {
            return None;
        }
        let start = self.next_batch * self.batch_size;
        let ctx_len = self.pairs[0].input.len();
        let mut inputs = Vec::with_capacity(self.batch_size * ctx_len);
        let mut targets = Vec::with_capacity(self.batch_size * ctx_len);
        for &idx in &self.order[start..start + self.batch_size] {
            inputs.extend_from_slice(&self.pairs[idx].input);
            targets.extend_from_slice(&self.pairs[idx].target);
        }
        self.next_batch += 1;
        Some(Batch { inputs, targets, batch_size: self.batch_size, ctx_len })
    }
}

/// Shuffles pair order with a seed-derived permutation and yields full
/// batches in that order.
pub fn batches(pairs: &[Pair], batch_size: usize, seed: u64) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut prng = Prng::substream(seed, u64::from_le_bytes(*b"batchper"));
    prng.shuffle(&mut order);
    Ok(Batches { pairs, order, batch_size, next_batch: 0 })
}

/// Serializes a stream to the pretokenized binary format: 8-byte magic,
/// u32 LE vocab_size, then ids as u16 LE when vocab ≤ 65536, else u32 LE.
pub fn encode_tok(stream: &TokenStream) -> Result<Vec<u8>> {
    let vocab = u32::try_from(stream.vocab_size)
        .map_err(|_| Error::invalid("vocab_size too large for the .tok header"))?;
    let narrow = stream.vocab_size <= 65_536;
    let width = if narrow { 2 } else { 4 };
    let mut out = Vec::with_capacity(12 + stream.len() * width);
    out.extend_from_slice(TOK_MAGIC);
    out.extend_from_slice(&vocab.to_le_bytes());
    for &id in &stream.ids {
        if narrow {
            out.extend_from_slice(&(id as u16).to_le_bytes());
        } else {
            out.extend_from_slice(&id.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses the pretokenized binary format back into a stream.
pub fn decode_tok(bytes: &[u8]) -> Result<TokenStream> {
    if bytes.len() < 12 {
        return Err(Error::invalid("truncated .tok input: missing header"));
    }
    if &bytes[..8] != TOK_MAGIC {
        return Err(Error::invalid("bad .tok magic; not a pretokenized stream"));
    }
    let vocab = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if vocab == 0 {
        return Err(Error::invalid(".tok header declares vocab_size 0"));
    }
    let body = &bytes[12..];
    let width = if vocab <= 65_536 { 2 } else { 4 };
    if body.len() % width != 0 {
        return Err(Error::invalid(format_args!(
            ".tok body length {} is not a multiple of the id width {width}",
            body.len()
        )));
    }
    let ids: Vec<u32> = body
        .chunks_exact(width)
        .map(|c| {
            if width == 2 {
                u32::from(u16::from_le_bytes([c[0], c[1]]))
            } else {
                u32::from_le_bytes([c[0], c[1], c[2], c[3]])
            }
        })
        .collect();
    TokenStream::new(ids, vocab, StreamSource::Pretokenized)
}
