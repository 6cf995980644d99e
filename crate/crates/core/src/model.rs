// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-only transformer definition, file loading, tokenization and the
//! plain forward pass.
//!
//! The residual recurrence is `z^l = z^{l-1} + Σ_h head_h + b_O + mlp`, with a
//! pre-LayerNorm in front of each sublayer. In [`ResidualStyle::Parallel`]
//! both sublayers read `z^{l-1}`; in [`ResidualStyle::Sequential`] the MLP
//! reads `z^{l-1} + attn`. Logits are `LN_final(z^L) W_U + b_U`.
//! Attention scores are scaled by `1/√d_head`; positions use learned absolute
//! embeddings.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{layer_norm, vec_mat, LnStats, Matrix, Precision};
use crate::tensor_file::TensorFile;

pub type TokenId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualStyle {
    #[default]
    Parallel,
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub ln_eps: f64,
    #[serde(default)]
    pub residual_style: ResidualStyle,
    #[serde(default)]
    pub precision: Precision,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ] {
            if v == 0 {
                return Err(Error::Invalid(format!("config field {name} must be > 0")));
            }
        }
        if !(self.ln_eps > 0.0 && self.ln_eps.is_finite()) {
            return Err(Error::Invalid(format!("ln_eps must be > 0, got {}", self.ln_eps)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LnParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LnParams {
    pub fn identity(d: usize) -> Self {
        Self {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
        }
    }

    pub fn apply(&self, x: &[f64], eps: f64) -> Result<(Vec<f64>, LnStats)> {
        layer_norm(x, &self.gamma, &self.beta, eps)
    }
}

/// One attention head. `W_Q`, `W_K`, `W_V` are `d_model × d_head`; `W_O` is
/// `d_head × d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
}

impl Head {
    pub fn zeros(d_model: usize, d_head: usize) -> Self {
        Self {
            w_q: Matrix::zeros(d_model, d_head),
            w_k: Matrix::zeros(d_model, d_head),
            w_v: Matrix::zeros(d_model, d_head),
            w_o: Matrix::zeros(d_head, d_model),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w_in: Matrix,
    pub b_in: Vec<f64>,
    pub w_out: Matrix,
    pub b_out: Vec<f64>,
}

impl Mlp {
    pub fn zeros(d_model: usize, d_mlp: usize) -> Self {
        Self {
            w_in: Matrix::zeros(d_model, d_mlp),
            b_in: vec![0.0; d_mlp],
            w_out: Matrix::zeros(d_mlp, d_model),
            b_out: vec![0.0; d_model],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub ln_attn: LnParams,
    pub ln_mlp: LnParams,
    pub heads: Vec<Head>,
    /// Attention output bias, shared by the layer's heads.
    pub attn_bias: Option<Vec<f64>>,
    pub mlp: Mlp,
}

/// Ordered token strings with a reverse index.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    max_len: usize,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Vocab(format!("empty token string at id {i}")));
            }
            if let Some(prev) = index.insert(t.clone(), i) {
                return Err(Error::Vocab(format!("duplicate token {t:?} at ids {prev} and {i}")));
            }
        }
        let max_len = tokens.iter().map(String::len).max().unwrap_or(0);
        Ok(Self { tokens, index, max_len })
    }

    /// One token per line; line number is the id. Tokens may contain leading
    /// spaces, so lines are not trimmed beyond the line terminator.
    pub fn parse(text: &str) -> Result<Self> {
        let tokens = text
            .split('\n')
            .map(|l| l.strip_suffix('\r').unwrap_or(l).to_string())
            .collect::<Vec<_>>();
        let tokens = match tokens.last() {
            Some(last) if last.is_empty() => tokens[..tokens.len() - 1].to_vec(),
            _ => tokens,
        };
        Self::new(tokens)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Greedy longest match, left to right.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < text.len() {
            let rest = &text[pos..];
            let mut end = rest.len().min(self.max_len);
            let found = loop {
                if end == 0 {
                    break None;
                }
                if rest.is_char_boundary(end) {
                    if let Some(id) = self.id(&rest[..end]) {
                        break Some((id, end));
                    }
                }
                end -= 1;
            };
            match found {
                Some((id, len)) => {
                    out.push(id);
                    pos += len;
                }
                None => {
                    let ch = rest.chars().next().expect("non-empty rest");
                    return Err(Error::Untokenizable { ch, offset: pos });
                }
            }
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&i| self.token(i).unwrap_or("<?>")).collect()
    }
}

/// Free-function form of [`Vocab::tokenize`].
pub fn tokenize(text: &str, vocab: &Vocab) -> Result<Vec<TokenId>> {
    vocab.tokenize(text)
}

/// Config, weights and vocab of one model. Immutable once validated.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub vocab: Vocab,
    /// `V × d_model`.
    pub token_embed: Matrix,
    /// `max_seq × d_model`.
    pub pos_embed: Matrix,
    pub layers: Vec<Layer>,
    pub final_ln: LnParams,
    /// `d_model × V`, stored independently of `token_embed`.
    pub unembed: Matrix,
    pub unembed_bias: Option<Vec<f64>>,
}

fn check_matrix(name: &str, m: &Matrix, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::dims(
            name,
            format!("{rows}x{cols}"),
            format!("{}x{}", m.rows(), m.cols()),
        ));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite(name.to_string()));
    }
    Ok(())
}

fn check_vec(name: &str, v: &[f64], len: usize) -> Result<()> {
    if v.len() != len {
        return Err(Error::dims(name, len, v.len()));
    }
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite(name.to_string()));
    }
    Ok(())
}

impl ModelBundle {
    /// All-zero weights with identity LayerNorms.
    pub fn zeros(config: ModelConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let layers = (0..c.n_layers)
            .map(|_| Layer {
                ln_attn: LnParams::identity(c.d_model),
                ln_mlp: LnParams::identity(c.d_model),
                heads: (0..c.n_heads).map(|_| Head::zeros(c.d_model, c.d_head)).collect(),
                attn_bias: None,
                mlp: Mlp::zeros(c.d_model, c.d_mlp),
            })
            .collect();
        let bundle = Self {
            token_embed: Matrix::zeros(c.vocab_size, c.d_model),
            pos_embed: Matrix::zeros(c.max_seq, c.d_model),
            layers,
            final_ln: LnParams::identity(c.d_model),
            unembed: Matrix::zeros(c.d_model, c.vocab_size),
            unembed_bias: None,
            vocab,
            config,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Checks every tensor against the config; errors name the tensor.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        if self.vocab.len() != c.vocab_size {
            return Err(Error::dims("vocab", c.vocab_size, self.vocab.len()));
        }
        check_matrix("embed.W_E", &self.token_embed, c.vocab_size, c.d_model)?;
        check_matrix("embed.W_pos", &self.pos_embed, c.max_seq, c.d_model)?;
        if self.layers.len() != c.n_layers {
            return Err(Error::dims("blocks", c.n_layers, self.layers.len()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            check_vec(&format!("blocks.{l}.ln_attn.w"), &layer.ln_attn.gamma, c.d_model)?;
            check_vec(&format!("blocks.{l}.ln_attn.b"), &layer.ln_attn.beta, c.d_model)?;
            check_vec(&format!("blocks.{l}.ln_mlp.w"), &layer.ln_mlp.gamma, c.d_model)?;
            check_vec(&format!("blocks.{l}.ln_mlp.b"), &layer.ln_mlp.beta, c.d_model)?;
            if layer.heads.len() != c.n_heads {
                return Err(Error::dims(format!("blocks.{l}.attn"), c.n_heads, layer.heads.len()));
            }
            for (h, head) in layer.heads.iter().enumerate() {
                let p = format!("blocks.{l}.attn.{h}");
                check_matrix(&format!("{p}.W_Q"), &head.w_q, c.d_model, c.d_head)?;
                check_matrix(&format!("{p}.W_K"), &head.w_k, c.d_model, c.d_head)?;
                check_matrix(&format!("{p}.W_V"), &head.w_v, c.d_model, c.d_head)?;
                check_matrix(&format!("{p}.W_O"), &head.w_o, c.d_head, c.d_model)?;
            }
            if let Some(b) = &layer.attn_bias {
                check_vec(&format!("blocks.{l}.attn.b_O"), b, c.d_model)?;
            }
            let m = &layer.mlp;
            check_matrix(&format!("blocks.{l}.mlp.W_in"), &m.w_in, c.d_model, c.d_mlp)?;
            check_vec(&format!("blocks.{l}.mlp.b_in"), &m.b_in, c.d_mlp)?;
            check_matrix(&format!("blocks.{l}.mlp.W_out"), &m.w_out, c.d_mlp, c.d_model)?;
            check_vec(&format!("blocks.{l}.mlp.b_out"), &m.b_out, c.d_model)?;
        }
        check_vec("ln_final.w", &self.final_ln.gamma, c.d_model)?;
        check_vec("ln_final.b", &self.final_ln.beta, c.d_model)?;
        check_matrix("unembed.W_U", &self.unembed, c.d_model, c.vocab_size)?;
        if let Some(b) = &self.unembed_bias {
            check_vec("unembed.b_U", b, c.vocab_size)?;
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.config.n_heads
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    /// Final LayerNorm then unembedding for one residual row. Used by both the
    /// forward pass and the logit lens so the two agree bit for bit.
    pub fn final_logits(&self, resid_row: &[f64]) -> Result<(Vec<f64>, LnStats)> {
        let p = self.config.precision;
        let (mut normed, stats) = self.final_ln.apply(resid_row, self.config.ln_eps)?;
        p.round_slice(&mut normed);
        let mut logits = vec_mat(&normed, &self.unembed);
        if let Some(b) = &self.unembed_bias {
            crate::numerics::add_assign(&mut logits, b);
        }
        p.round_slice(&mut logits);
        Ok((logits, stats))
    }

    pub fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        if tokens.len() > self.config.max_seq {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let mut tf = TensorFile::new();
        let mat = |tf: &mut TensorFile, name: String, m: &Matrix| {
            tf.insert(name, vec![m.rows(), m.cols()], m.data().to_vec());
        };
        let vector = |tf: &mut TensorFile, name: String, v: &[f64]| {
            tf.insert(name, vec![v.len()], v.to_vec());
        };
        mat(&mut tf, "embed.W_E".into(), &self.token_embed);
        mat(&mut tf, "embed.W_pos".into(), &self.pos_embed);
        for (l, layer) in self.layers.iter().enumerate() {
            vector(&mut tf, format!("blocks.{l}.ln_attn.w"), &layer.ln_attn.gamma);
            vector(&mut tf, format!("blocks.{l}.ln_attn.b"), &layer.ln_attn.beta);
            vector(&mut tf, format!("blocks.{l}.ln_mlp.w"), &layer.ln_mlp.gamma);
            vector(&mut tf, format!("blocks.{l}.ln_mlp.b"), &layer.ln_mlp.beta);
            for (h, head) in layer.heads.iter().enumerate() {
                mat(&mut tf, format!("blocks.{l}.attn.{h}.W_Q"), &head.w_q);
                mat(&mut tf, format!("blocks.{l}.attn.{h}.W_K"), &head.w_k);
                mat(&mut tf, format!("blocks.{l}.attn.{h}.W_V"), &head.w_v);
                mat(&mut tf, format!("blocks.{l}.attn.{h}.W_O"), &head.w_o);
            }
            if let Some(b) = &layer.attn_bias {
                vector(&mut tf, format!("blocks.{l}.attn.b_O"), b);
            }
            mat(&mut tf, format!("blocks.{l}.mlp.W_in"), &layer.mlp.w_in);
            vector(&mut tf, format!("blocks.{l}.mlp.b_in"), &layer.mlp.b_in);
            mat(&mut tf, format!("blocks.{l}.mlp.W_out"), &layer.mlp.w_out);
            vector(&mut tf, format!("blocks.{l}.mlp.b_out"), &layer.mlp.b_out);
        }
        vector(&mut tf, "ln_final.w".into(), &self.final_ln.gamma);
        vector(&mut tf, "ln_final.b".into(), &self.final_ln.beta);
        mat(&mut tf, "unembed.W_U".into(), &self.unembed);
        if let Some(b) = &self.unembed_bias {
            vector(&mut tf, "unembed.b_U".into(), b);
        }
        tf
    }

    pub fn from_tensor_file(config: ModelConfig, vocab: Vocab, tf: &TensorFile) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let fetch = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let (s, d) = tf.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))?;
            if s != shape {
                return Err(Error::dims(name, format!("{shape:?}"), format!("{s:?}")));
            }
            if !d.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(name.to_string()));
            }
            Ok(d.to_vec())
        };
        let mat = |name: &str, r: usize, cols: usize| -> Result<Matrix> {
            Matrix::from_vec(r, cols, fetch(name, &[r, cols])?)
        };
        let optional = |name: &str, len: usize| -> Result<Option<Vec<f64>>> {
            if tf.contains(name) {
                fetch(name, &[len]).map(Some)
            } else {
                Ok(None)
            }
        };
        let mut layers = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let heads = (0..c.n_heads)
                .map(|h| {
                    let p = format!("blocks.{l}.attn.{h}");
                    Ok(Head {
                        w_q: mat(&format!("{p}.W_Q"), c.d_model, c.d_head)?,
                        w_k: mat(&format!("{p}.W_K"), c.d_model, c.d_head)?,
                        w_v: mat(&format!("{p}.W_V"), c.d_model, c.d_head)?,
                        w_o: mat(&format!("{p}.W_O"), c.d_head, c.d_model)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            layers.push(Layer {
                ln_attn: LnParams {
                    gamma: fetch(&format!("blocks.{l}.ln_attn.w"), &[c.d_model])?,
                    beta: fetch(&format!("blocks.{l}.ln_attn.b"), &[c.d_model])?,
                },
                ln_mlp: LnParams {
                    gamma: fetch(&format!("blocks.{l}.ln_mlp.w"), &[c.d_model])?,
                    beta: fetch(&format!("blocks.{l}.ln_mlp.b"), &[c.d_model])?,
                },
                heads,
                attn_bias: optional(&format!("blocks.{l}.attn.b_O"), c.d_model)?,
                mlp: Mlp {
                    w_in: mat(&format!("blocks.{l}.mlp.W_in"), c.d_model, c.d_mlp)?,
                    b_in: fetch(&format!("blocks.{l}.mlp.b_in"), &[c.d_mlp])?,
                    w_out: mat(&format!("blocks.{l}.mlp.W_out"), c.d_mlp, c.d_model)?,
                    b_out: fetch(&format!("blocks.{l}.mlp.b_out"), &[c.d_model])?,
                },
            });
        }
        let bundle = Self {
            token_embed: mat("embed.W_E", c.vocab_size, c.d_model)?,
            pos_embed: mat("embed.W_pos", c.max_seq, c.d_model)?,
            layers,
            final_ln: LnParams {
                gamma: fetch("ln_final.w", &[c.d_model])?,
                beta: fetch("ln_final.b", &[c.d_model])?,
            },
            unembed: mat("unembed.W_U", c.d_model, c.vocab_size)?,
            unembed_bias: optional("unembed.b_U", c.vocab_size)?,
            vocab,
            config,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Writes `config.json`, `weights.json` + `weights.bin` and `vocab.txt`
    /// into `dir`.
    pub fn save(&self, dir: &Path) -> Result<ModelPaths> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = ModelPaths::in_dir(dir);
        let cfg = serde_json::to_string_pretty(&self.config)?;
        fs::write(&paths.config, cfg + "\n").map_err(|e| Error::io(&paths.config, e))?;
        self.to_tensor_file().write(&paths.weights, "weights.bin")?;
        fs::write(&paths.vocab, self.vocab.to_text()).map_err(|e| Error::io(&paths.vocab, e))?;
        Ok(paths)
    }
}

/// Standard file names for a saved model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPaths {
    pub config: std::path::PathBuf,
    pub weights: std::path::PathBuf,
    pub vocab: std::path::PathBuf,
}

impl ModelPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            config: dir.join("config.json"),
            weights: dir.join("weights.json"),
            vocab: dir.join("vocab.txt"),
        }
    }
}

/// Loads and validates a model. `weights_path` is the tensor manifest.
pub fn load_model(config_path: &Path, weights_path: &Path, vocab_path: &Path) -> Result<ModelBundle> {
    let text = fs::read_to_string(config_path).map_err(|e| Error::io(config_path, e))?;
    let config: ModelConfig =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", config_path.display())))?;
    let vocab = Vocab::load(vocab_path)?;
    let tf = TensorFile::read(weights_path)?;
    ModelBundle::from_tensor_file(config, vocab, &tf)
}

/// Logits (`T × V`) of a clean forward pass.
pub fn forward(model: &ModelBundle, tokens: &[TokenId]) -> Result<Matrix> {
    crate::trace::run_forward(model, tokens)
}
