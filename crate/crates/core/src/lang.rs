//! Query encoding: tokenizer, frozen embeddings, single-layer LSTM, and the
//! word-level dynamic filter bank.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Embedding width. Fixed; the embedding table is never trained.
pub const EMBEDDING_DIM: usize = 300;
/// Queries are truncated to this many tokens.
pub const MAX_QUERY_TOKENS: usize = 15;
/// Token that out-of-vocabulary words map to.
pub const UNKNOWN_TOKEN: &str = "<unk>";

/// Token-to-id map with a designated unknown id.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    unknown_id: usize,
}

impl Vocabulary {
    /// Build from an ordered token list; ids are the positions. The list must
    /// contain [`UNKNOWN_TOKEN`] and no duplicates.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (id, token) in tokens.iter().enumerate() {
            if ids.insert(token.clone(), id).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token '{token}'")));
            }
        }
        let unknown_id = *ids
            .get(UNKNOWN_TOKEN)
            .ok_or_else(|| Error::Config(format!("vocabulary is missing '{UNKNOWN_TOKEN}'")))?;
        Ok(Self { tokens, ids, unknown_id })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unknown_id(&self) -> usize {
        self.unknown_id
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(self.unknown_id)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Lowercase, strip ASCII punctuation, split on whitespace, map through the
/// vocabulary, truncate to [`MAX_QUERY_TOKENS`].
pub fn tokenize(query: &str, vocab: &Vocabulary) -> Result<Vec<usize>> {
    let mut ids = Vec::new();
    for raw in query.split_whitespace() {
        let cleaned: String = raw
            .chars()
            .flat_map(|c| c.to_lowercase())
            .filter(|c| !c.is_ascii_punctuation())
            .collect();
        if cleaned.is_empty() {
            continue;
        }
        ids.push(vocab.id(&cleaned));
        if ids.len() == MAX_QUERY_TOKENS {
            break;
        }
    }
    if ids.is_empty() {
        return Err(Error::Input(format!("query '{query}' has no tokens after normalization")));
    }
    Ok(ids)
}

/// Frozen per-token embeddings.
///
/// Each row is a pure function of (seed, token string): the token string is
/// hashed into a dedicated RNG stream and the row drawn uniformly from
/// [-0.05, 0.05], so regenerating the table with the same seed reproduces it
/// bit-exactly regardless of vocabulary order.
pub struct EmbeddingTable {
    rows: Vec<Tensor>,
}

impl EmbeddingTable {
    pub fn build(vocab: &Vocabulary, seed: u64) -> Self {
        let rows = vocab
            .tokens()
            .iter()
            .map(|token| {
                let mut rng = RngState::derive(seed, &format!("embedding/{token}"));
                Tensor::uniform(vec![1, EMBEDDING_DIM], -0.05, 0.05, &mut rng)
            })
            .collect();
        Self { rows }
    }

    pub fn row(&self, id: usize) -> &Tensor {
        &self.rows[id]
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Single-layer LSTM weights. Gate order along the 4d axis is fixed:
/// input, forget, cell, output.
pub struct LstmParams {
    /// `[EMBEDDING_DIM, 4d]` input weights on the tape.
    pub w_input: Var,
    /// `[d, 4d]` recurrent weights on the tape.
    pub w_recurrent: Var,
    /// `[1, 4d]` bias on the tape; the forget slice initializes to 1.0.
    pub bias: Var,
    pub hidden: usize,
}

/// Per-word hidden states `f_l: [L, d]` of the query.
pub struct SentenceEncoding {
    pub hidden_states: Var,
    pub len: usize,
}

/// Run the LSTM over the embedded tokens, returning all hidden states.
/// Initial hidden and cell states are zero.
pub fn lstm_forward(
    tape: &mut Tape,
    ids: &[usize],
    params: &LstmParams,
    table: &EmbeddingTable,
) -> Result<SentenceEncoding> {
    if ids.is_empty() || ids.len() > MAX_QUERY_TOKENS {
        return Err(Error::Input(format!(
            "token count {} outside 1..={MAX_QUERY_TOKENS}",
            ids.len()
        )));
    }
    let d = params.hidden;
    let mut h = tape.constant(Tensor::zeros(vec![1, d]));
    let mut c = tape.constant(Tensor::zeros(vec![1, d]));
    let mut states = Vec::with_capacity(ids.len());
    for &id in ids {
        let x = tape.constant(table.row(id).clone());
        let from_input = tape.matmul(x, params.w_input)?;
        let from_hidden = tape.matmul(h, params.w_recurrent)?;
        let pre = tape.add(from_input, from_hidden)?;
        let gates = tape.add_bias(pre, params.bias)?;
        let i_gate = tape.slice_cols(gates, 0, d)?;
        let f_gate = tape.slice_cols(gates, d, d)?;
        let g_gate = tape.slice_cols(gates, 2 * d, d)?;
        let o_gate = tape.slice_cols(gates, 3 * d, d)?;
        let i_act = tape.sigmoid(i_gate);
        let f_act = tape.sigmoid(f_gate);
        let g_act = tape.tanh(g_gate);
        let o_act = tape.sigmoid(o_gate);
        let keep = tape.mul(f_act, c)?;
        let write = tape.mul(i_act, g_act)?;
        c = tape.add(keep, write)?;
        let c_squashed = tape.tanh(c);
        h = tape.mul(o_act, c_squashed)?;
        states.push(h);
    }
    let hidden_states = tape.concat_rows(&states)?;
    Ok(SentenceEncoding { hidden_states, len: ids.len() })
}

/// Word-level dynamic filter bank `[d, L]`: column i is
/// tanh(W f_l^i + b), the same affine map shared by all words (a width-1
/// convolution over the word axis).
pub struct DynamicFilter {
    pub gamma: Var,
    pub words: usize,
}

pub fn make_dynamic_filters(
    tape: &mut Tape,
    encoding: &SentenceEncoding,
    weight: Var,
    bias: Var,
) -> Result<DynamicFilter> {
    let weight_t = tape.transpose(weight)?;
    let mapped = tape.matmul(encoding.hidden_states, weight_t)?;
    let shifted = tape.add_bias(mapped, bias)?;
    let activated = tape.tanh(shifted);
    let gamma = tape.transpose(activated)?;
    Ok(DynamicFilter { gamma, words: encoding.len })
}
