//! Caption and dialogue encoders.
//!
//! Sentences are embedded by mean-pooling a trainable token table followed by
//! one affine map and `tanh`. Dialogues are encoded either flat (all turns
//! joined into one token stream, then embedded once) or recurrently (each
//! turn embedded, then a bidirectional LSTM over the ten turn vectors whose
//! final forward and backward states are concatenated).

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data_synth::Dialogue;
use crate::engine::{Float, ParamStore, Session, Tensor, Var};
use crate::error::{Error, IoContext, Result};

/// Lowercases and splits on whitespace and ASCII punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const SEP: usize = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<unk>", "<sep>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Specials first, then every distinct token of `texts` in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Vocabulary {
        let mut words: Vec<String> = texts.into_iter().flat_map(tokenize).collect();
        words.sort_unstable();
        words.dedup();
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())))
            .collect();
        Self::from_tokens(tokens).expect("specials lead the list")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocabulary> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::InvalidArgument(
                "vocabulary must start with <pad>, <unk>, <sep>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// One token per line; the line number is the index.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s).at(path)
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let s = fs::read_to_string(path).at(path)?;
        Self::from_tokens(s.lines().map(str::to_string).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DialogueEncoder {
    /// Caption only (the single-condition baseline).
    None,
    Flat,
    Recurrent,
}

impl FromStr for DialogueEncoder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(DialogueEncoder::None),
            "flat" => Ok(DialogueEncoder::Flat),
            "recurrent" => Ok(DialogueEncoder::Recurrent),
            other => Err(Error::Config(format!(
                "unknown dialogue encoder `{other}` (expected flat, recurrent or none)"
            ))),
        }
    }
}

impl DialogueEncoder {
    pub fn name(self) -> &'static str {
        match self {
            DialogueEncoder::None => "none",
            DialogueEncoder::Flat => "flat",
            DialogueEncoder::Recurrent => "recurrent",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextDims {
    pub d_word: usize,
    pub d_cap: usize,
    pub d_dlg: usize,
    pub d_turn: usize,
    pub h_rnn: usize,
}

impl TextDims {
    pub fn desk() -> Self {
        TextDims {
            d_word: 32,
            d_cap: 16,
            d_dlg: 32,
            d_turn: 32,
            h_rnn: 32,
        }
    }
}

/// Token ids of one sample, prepared once per dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedText {
    pub caption: Vec<usize>,
    /// `q SEP a SEP ...` over all turns.
    pub flat: Vec<usize>,
    /// `q SEP a` per turn.
    pub turns: Vec<Vec<usize>>,
}

impl EncodedText {
    pub fn new(vocab: &Vocabulary, caption: &str, dialogue: &Dialogue) -> Self {
        let mut flat = Vec::new();
        let mut turns = Vec::with_capacity(dialogue.turns().len());
        for t in dialogue.turns() {
            let mut ids = vocab.encode(&t.question);
            ids.push(SEP);
            ids.extend(vocab.encode(&t.answer));
            flat.extend_from_slice(&ids);
            flat.push(SEP);
            turns.push(ids);
        }
        EncodedText {
            caption: vocab.encode(caption),
            flat,
            turns,
        }
    }
}

/// `phi_t`, `zeta_d` and their concatenation `e`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBundle {
    pub phi_t: Vec<f64>,
    pub zeta_d: Vec<f64>,
    pub e: Vec<f64>,
}

impl EmbeddingBundle {
    pub fn new(phi_t: Vec<f64>, zeta_d: Vec<f64>) -> Self {
        let e = phi_t.iter().chain(&zeta_d).copied().collect();
        EmbeddingBundle { phi_t, zeta_d, e }
    }
}

/// Parameter group prefix shared by every text encoder parameter.
pub const GROUP: &str = "enc";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEncoder {
    pub dims: TextDims,
    pub variant: DialogueEncoder,
}

/// Names of one sentence embedder's parameters.
#[derive(Clone, Copy, Debug)]
pub struct SentenceParams {
    prefix: &'static str,
}

impl SentenceParams {
    pub const CAPTION: SentenceParams = SentenceParams { prefix: "enc.cap" };
    pub const FLAT: SentenceParams = SentenceParams { prefix: "enc.dlg" };
    pub const TURN: SentenceParams = SentenceParams { prefix: "enc.turn" };

    pub fn table(&self) -> String {
        format!("{}.embed", self.prefix)
    }

    pub fn proj(&self) -> String {
        format!("{}.proj", self.prefix)
    }

    fn init<T: Float, R: Rng>(
        &self,
        store: &mut ParamStore<T>,
        vocab: usize,
        d_word: usize,
        d_out: usize,
        rng: &mut R,
    ) {
        store.insert(self.table(), Tensor::randn(&[vocab, d_word], 1.0, rng));
        store.init_linear(&self.proj(), d_out, d_word, rng);
    }

    /// Mean-pooled embeddings of each token list, then affine + tanh.
    pub fn forward<T: Float>(&self, s: &mut Session<'_, T>, lists: &[Vec<usize>]) -> Result<Var> {
        let table = s.param(&self.table())?;
        let proj = self.proj();
        let w = s.param(&format!("{proj}.w"))?;
        let b = s.param(&format!("{proj}.b"))?;
        let vocab = s.tape.shape(table)[0];
        if let Some(bad) = lists.iter().flatten().find(|&&t| t >= vocab) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside the vocabulary of {vocab}"
            )));
        }
        let pooled = s.tape.embed_mean(table, lists);
        let h = s.tape.linear(pooled, w, Some(b));
        Ok(s.tape.tanh(h))
    }
}

fn lstm_names(dir: &str) -> [String; 3] {
    [
        format!("enc.rnn.{dir}.w_ih"),
        format!("enc.rnn.{dir}.w_hh"),
        format!("enc.rnn.{dir}.b"),
    ]
}

impl TextEncoder {
    pub fn new(dims: TextDims, variant: DialogueEncoder) -> Self {
        TextEncoder { dims, variant }
    }

    pub fn caption_dim(&self) -> usize {
        self.dims.d_cap
    }

    pub fn dialogue_dim(&self) -> usize {
        match self.variant {
            DialogueEncoder::None => 0,
            DialogueEncoder::Flat => self.dims.d_dlg,
            DialogueEncoder::Recurrent => 2 * self.dims.h_rnn,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.caption_dim() + self.dialogue_dim()
    }

    pub fn init_params<T: Float, R: Rng>(&self, store: &mut ParamStore<T>, vocab_size: usize, rng: &mut R) {
        let d = self.dims;
        SentenceParams::CAPTION.init(store, vocab_size, d.d_word, d.d_cap, rng);
        match self.variant {
            DialogueEncoder::None => {}
            DialogueEncoder::Flat => SentenceParams::FLAT.init(store, vocab_size, d.d_word, d.d_dlg, rng),
            DialogueEncoder::Recurrent => {
                SentenceParams::TURN.init(store, vocab_size, d.d_word, d.d_turn, rng);
                let h = d.h_rnn;
                let scale = (1.0 / h as f64).sqrt();
                for dir in ["fwd", "bwd"] {
                    let [w_ih, w_hh, b] = lstm_names(dir);
                    store.insert(w_ih, Tensor::randn(&[4 * h, d.d_turn], scale, rng));
                    store.insert(w_hh, Tensor::randn(&[4 * h, h], scale, rng));
                    // Forget-gate bias starts at 1.
                    let mut bias = vec![T::zero(); 4 * h];
                    for v in &mut bias[h..2 * h] {
                        *v = T::one();
                    }
                    store.insert(b, Tensor::from_vec(&[4 * h], bias));
                }
            }
        }
    }

    /// Caption embedding `phi_t` for a batch, `(B, d_cap)`.
    pub fn caption<T: Float>(&self, s: &mut Session<'_, T>, batch: &[&EncodedText]) -> Result<Var> {
        let lists: Vec<Vec<usize>> = batch.iter().map(|t| t.caption.clone()).collect();
        SentenceParams::CAPTION.forward(s, &lists)
    }

    /// Dialogue embedding `zeta_d` for a batch, or `None` for the
    /// caption-only variant.
    pub fn dialogue<T: Float>(&self, s: &mut Session<'_, T>, batch: &[&EncodedText]) -> Result<Option<Var>> {
        match self.variant {
            DialogueEncoder::None => Ok(None),
            DialogueEncoder::Flat => {
                let lists: Vec<Vec<usize>> = batch.iter().map(|t| t.flat.clone()).collect();
                SentenceParams::FLAT.forward(s, &lists).map(Some)
            }
            DialogueEncoder::Recurrent => self.recurrent(s, batch).map(Some),
        }
    }

    fn recurrent<T: Float>(&self, s: &mut Session<'_, T>, batch: &[&EncodedText]) -> Result<Var> {
        let steps = batch.first().map_or(0, |t| t.turns.len());
        if steps == 0 || batch.iter().any(|t| t.turns.len() != steps) {
            return Err(Error::InvalidArgument(
                "dialogues in a batch must share a turn count".into(),
            ));
        }
        // Rows ordered (sample, turn).
        let lists: Vec<Vec<usize>> = batch.iter().flat_map(|t| t.turns.iter().cloned()).collect();
        let turn_vecs = SentenceParams::TURN.forward(s, &lists)?;
        let b = batch.len();
        let inputs: Vec<Var> = (0..steps)
            .map(|t| {
                let rows: Vec<usize> = (0..b).map(|i| i * steps + t).collect();
                s.tape.gather_rows(turn_vecs, &rows)
            })
            .collect();
        let fwd = self.lstm(s, "fwd", inputs.iter().copied())?;
        let bwd = self.lstm(s, "bwd", inputs.iter().rev().copied())?;
        Ok(s.tape.concat(&[fwd, bwd]))
    }

    /// Runs one LSTM direction and returns the final hidden state.
    fn lstm<T: Float>(&self, s: &mut Session<'_, T>, dir: &str, inputs: impl Iterator<Item = Var>) -> Result<Var> {
        let [w_ih, w_hh, b] = lstm_names(dir);
        let (w_ih, w_hh, bias) = (s.param(&w_ih)?, s.param(&w_hh)?, s.param(&b)?);
        let h_dim = self.dims.h_rnn;
        let mut h: Option<Var> = None;
        let mut c: Option<Var> = None;
        for x in inputs {
            let mut gates = s.tape.linear(x, w_ih, Some(bias));
            if let Some(h_prev) = h {
                let rec = s.tape.linear(h_prev, w_hh, None);
                gates = s.tape.add(gates, rec);
            }
            let i_raw = s.tape.slice(gates, 0, h_dim);
            let f_raw = s.tape.slice(gates, h_dim, h_dim);
            let g_raw = s.tape.slice(gates, 2 * h_dim, h_dim);
            let o_raw = s.tape.slice(gates, 3 * h_dim, h_dim);
            let i = s.tape.sigmoid(i_raw);
            let f = s.tape.sigmoid(f_raw);
            let g = s.tape.tanh(g_raw);
            let o = s.tape.sigmoid(o_raw);
            let ig = s.tape.mul(i, g);
            let c_new = match c {
                Some(c_prev) => {
                    let fc = s.tape.mul(f, c_prev);
                    s.tape.add(fc, ig)
                }
                None => ig,
            };
            let tc = s.tape.tanh(c_new);
            h = Some(s.tape.mul(o, tc));
            c = Some(c_new);
        }
        h.ok_or_else(|| Error::InvalidArgument("empty dialogue".into()))
    }

    /// Concatenated condition `e = phi_t || zeta_d` for a batch, `(B, |e|)`.
    pub fn embed<T: Float>(&self, s: &mut Session<'_, T>, batch: &[&EncodedText]) -> Result<Var> {
        let phi = self.caption(s, batch)?;
        match self.dialogue(s, batch)? {
            Some(zeta) => Ok(s.tape.concat(&[phi, zeta])),
            None => Ok(phi),
        }
    }

    /// Embedding bundle of a single sample, evaluated against `store`.
    pub fn bundle<T: Float>(&self, store: &ParamStore<T>, text: &EncodedText) -> Result<EmbeddingBundle> {
        let mut s = Session::new(store, &[]);
        let phi = self.caption(&mut s, &[text])?;
        let zeta = self.dialogue(&mut s, &[text])?;
        let phi_t = s.tape.value(phi).to_f64_vec();
        let zeta_d = zeta.map(|z| s.tape.value(z).to_f64_vec()).unwrap_or_default();
        let bundle = EmbeddingBundle::new(phi_t, zeta_d);
        if !bundle.e.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("text embedding".into()));
        }
        Ok(bundle)
    }
}

/// `encode_sentence` on a single token list.
pub fn encode_sentence<T: Float>(store: &ParamStore<T>, params: SentenceParams, tokens: &[usize]) -> Result<Vec<f64>> {
    let mut s = Session::new(store, &[]);
    let v = params.forward(&mut s, &[tokens.to_vec()])?;
    Ok(s.tape.value(v).to_f64_vec())
}
