//! Miniature decoder-only multimodal transformer.
//!
//! Images enter as one token per grid cell: a learned embedding of the cell
//! code plus learned row and column embeddings. Every position also gets a
//! learned absolute sequence embedding. The stack is pre-norm (RMSNorm),
//! causal multi-head attention followed by a GELU MLP.

pub mod sequence;

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::synthworld::{self, SerializeMode, TrajectoryExample, Vocab};
use crate::tensor::{Graph, NodeId};
pub use sequence::{Item, Special, TokenSequence};

/// Longest question prompt the templates produce, in tokens.
pub const MAX_QUESTION_TOKENS: usize = 13;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Output classes: every vocabulary word plus end-of-sequence.
    pub vocab_size: usize,
    pub n_cell_codes: usize,
    pub max_seq: usize,
    pub k_pred: usize,
    pub nextlat_horizon: usize,
    pub grid_max: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            vocab_size: Vocab::standard().n_classes(),
            n_cell_codes: synthworld::N_CELL_CODES,
            max_seq: 256,
            k_pred: 4,
            nextlat_horizon: 4,
            grid_max: synthworld::MAX_GRID,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_layers == 0 {
            return bad("n_layers must be at least 1".into());
        }
        if self.nextlat_horizon == 0 {
            return bad("nextlat_horizon must be at least 1".into());
        }
        if self.vocab_size < 2 || self.n_cell_codes == 0 || self.grid_max == 0 {
            return bad("vocabulary sizes and grid_max must be positive".into());
        }
        let need = self.grid_max * self.grid_max + 2 + MAX_QUESTION_TOKENS;
        if self.max_seq < need {
            return bad(format!(
                "max_seq {} cannot hold a {}x{} input view ({need} tokens)",
                self.max_seq, self.grid_max, self.grid_max
            ));
        }
        Ok(())
    }

    /// Closed-form parameter count of [`Model::new`].
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let v = self.vocab_size;
        let embeds = (v - 1) * d
            + self.n_cell_codes * d
            + Special::TABLE.len() * d
            + self.k_pred * d
            + self.max_seq * d
            + 2 * self.grid_max * d;
        let layer = d + 3 * d * d + d * d + d + 4 * d * d + 4 * d + 4 * d * d + d;
        embeds + self.n_layers * layer + d + d * v + v + self.nextlat_horizon * (d * d + d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal,
    Ones,
    Zeros,
}

#[derive(Debug, Clone)]
struct LayerIdx {
    norm1: usize,
    w_qkv: usize,
    w_o: usize,
    norm2: usize,
    w_fc: usize,
    b_fc: usize,
    w_proj: usize,
    b_proj: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    word: usize,
    cell: usize,
    special: usize,
    pred: Option<usize>,
    pos: usize,
    row: usize,
    col: usize,
    layers: Vec<LayerIdx>,
    final_norm: usize,
    head_w: usize,
    head_b: usize,
    nextlat: Vec<(usize, usize)>,
}

/// Parameter names, shapes and init rules in canonical order.
fn param_specs(cfg: &ModelConfig) -> (Vec<(String, Vec<usize>, Init)>, Layout) {
    let d = cfg.d_model;
    let mut specs: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| {
        specs.push((name, shape, init));
        specs.len() - 1
    };
    let word = add("embed.word".into(), vec![cfg.vocab_size - 1, d], Init::Normal);
    let cell = add("embed.cell".into(), vec![cfg.n_cell_codes, d], Init::Normal);
    let special = add("embed.special".into(), vec![Special::TABLE.len(), d], Init::Normal);
    let pred = (cfg.k_pred > 0).then(|| add("embed.pred".into(), vec![cfg.k_pred, d], Init::Normal));
    let pos = add("embed.pos".into(), vec![cfg.max_seq, d], Init::Normal);
    let row = add("embed.row".into(), vec![cfg.grid_max, d], Init::Normal);
    let col = add("embed.col".into(), vec![cfg.grid_max, d], Init::Normal);
    let layers = (0..cfg.n_layers)
        .map(|l| LayerIdx {
            norm1: add(format!("layer{l}.norm1"), vec![d], Init::Ones),
            w_qkv: add(format!("layer{l}.attn.w_qkv"), vec![d, 3 * d], Init::Normal),
            w_o: add(format!("layer{l}.attn.w_o"), vec![d, d], Init::Normal),
            norm2: add(format!("layer{l}.norm2"), vec![d], Init::Ones),
            w_fc: add(format!("layer{l}.mlp.w_fc"), vec![d, 4 * d], Init::Normal),
            b_fc: add(format!("layer{l}.mlp.b_fc"), vec![4 * d], Init::Zeros),
            w_proj: add(format!("layer{l}.mlp.w_proj"), vec![4 * d, d], Init::Normal),
            b_proj: add(format!("layer{l}.mlp.b_proj"), vec![d], Init::Zeros),
        })
        .collect();
    let final_norm = add("final_norm".into(), vec![d], Init::Ones);
    let head_w = add("head.w".into(), vec![d, cfg.vocab_size], Init::Normal);
    let head_b = add("head.b".into(), vec![cfg.vocab_size], Init::Zeros);
    let nextlat = (0..cfg.nextlat_horizon)
        .map(|i| {
            (
                add(format!("nextlat{}.w", i + 1), vec![d, d], Init::Normal),
                add(format!("nextlat{}.b", i + 1), vec![d], Init::Zeros),
            )
        })
        .collect();
    let layout = Layout { word, cell, special, pred, pos, row, col, layers, final_norm, head_w, head_b, nextlat };
    (specs, layout)
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: Vec<Param>,
    layout: Layout,
}

/// Parameters inserted into one graph as leaves.
#[derive(Debug, Clone)]
pub struct Bound {
    pub ids: Vec<NodeId>,
}

/// Hidden states of one forward pass, after the final norm.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub hiddens: NodeId,
    pub logits: NodeId,
}

/// Serialized views of one example, prepared once and reused every step.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub id: String,
    pub input: TokenSequence,
    pub full: TokenSequence,
    pub traj: TokenSequence,
    pub answer_class: usize,
}

impl PreparedExample {
    pub fn new(ex: &TrajectoryExample, vocab: &Vocab) -> Result<Self> {
        let answer_class = vocab
            .id(&ex.question.gold)
            .ok_or_else(|| Error::Data(format!("gold {:?} is not a letter", ex.question.gold)))?;
        Ok(PreparedExample {
            id: ex.id.clone(),
            input: synthworld::serialize_example(ex, SerializeMode::InputView, vocab)?,
            full: synthworld::serialize_example(ex, SerializeMode::FullContext, vocab)?,
            traj: synthworld::serialize_example(ex, SerializeMode::TrajectoryView, vocab)?,
            answer_class,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VlmContext {
    /// Text targets conditioned on the image-question pair and the trajectory.
    #[default]
    Full,
    /// Text targets conditioned on the trajectory alone.
    TrajOnly,
}

/// Everything the training objectives consume for one example.
#[derive(Debug, Clone)]
pub struct ViewEncodings {
    pub h_x: NodeId,
    pub h_hat_r: NodeId,
    /// Stop-gradient copy of the trajectory encoding.
    pub h_r: NodeId,
    pub traj_hiddens: NodeId,
    /// Logits of the pass the language-modelling loss reads; the sequence
    /// they align with is `full` or `traj` depending on [`VlmContext`].
    pub vlm_logits: NodeId,
    /// Logits at the last input-view position (the first answer token).
    pub answer_logits: NodeId,
    /// Graph nodes created by the trajectory-only pass.
    pub traj_pass: Range<usize>,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (specs, layout) = param_specs(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("positive std");
        let params = specs
            .into_iter()
            .map(|(name, shape, init)| {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                    Init::Ones => vec![1.0; n],
                    Init::Zeros => vec![0.0; n],
                };
                Param { name, shape, data }
            })
            .collect();
        Ok(Model { cfg, params, layout })
    }

    /// Rebuilds a model from stored tensors, checking names and shapes.
    pub fn from_params(cfg: ModelConfig, params: Vec<Param>) -> Result<Self> {
        cfg.validate()?;
        let (specs, layout) = param_specs(&cfg);
        if specs.len() != params.len() {
            return Err(Error::Config(format!("expected {} tensors, found {}", specs.len(), params.len())));
        }
        for ((name, shape, _), p) in specs.iter().zip(&params) {
            if *name != p.name || *shape != p.shape || p.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Config(format!(
                    "tensor {} {:?} does not match expected {name} {shape:?}",
                    p.name, p.shape
                )));
            }
        }
        Ok(Model { cfg, params, layout })
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn pred_param(&self) -> Option<usize> {
        self.layout.pred
    }

    /// Indices of the next-latent head tensors.
    pub fn nextlat_params(&self) -> Vec<usize> {
        self.layout.nextlat.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// SHA-256 over every parameter value, for immutability audits.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            for v in &p.data {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Bound {
        let ids = self
            .params
            .iter()
            .map(|p| g.leaf(p.shape.clone(), p.data.clone(), requires_grad).expect("parameter shapes are valid"))
            .collect();
        Bound { ids }
    }

    fn p(&self, b: &Bound, idx: usize) -> NodeId {
        b.ids[idx]
    }

    /// Input embeddings for `seq`; `latents` supplies rows for latent slots.
    fn embed(&self, g: &mut Graph, b: &Bound, seq: &TokenSequence, latents: Option<NodeId>) -> Result<NodeId> {
        let t_len = seq.len();
        if t_len == 0 {
            return Err(Error::Contract("empty sequence".into()));
        }
        if t_len > self.cfg.max_seq {
            return Err(Error::Length { len: t_len, max: self.cfg.max_seq });
        }
        let mut word = vec![None; t_len];
        let mut cell = vec![None; t_len];
        let mut row = vec![None; t_len];
        let mut col = vec![None; t_len];
        let mut special = vec![None; t_len];
        let mut pred = vec![None; t_len];
        let mut latent = vec![None; t_len];
        let mut n_pred = 0;
        for (p, item) in seq.items.iter().enumerate() {
            match *item {
                Item::Text(id) => word[p] = Some(id),
                Item::Patch { code, row: r, col: c } => {
                    if r >= self.cfg.grid_max || c >= self.cfg.grid_max {
                        return Err(Error::Index { id: r.max(c), len: self.cfg.grid_max });
                    }
                    cell[p] = Some(code as usize);
                    row[p] = Some(r);
                    col[p] = Some(c);
                }
                Item::Special(Special::Pred) => {
                    if n_pred >= self.cfg.k_pred {
                        return Err(Error::Contract(format!("more than k_pred={} PRED tokens", self.cfg.k_pred)));
                    }
                    pred[p] = Some(n_pred);
                    n_pred += 1;
                }
                Item::Special(s) => special[p] = s.table_row(),
                Item::Latent(slot) => latent[p] = Some(slot),
            }
        }
        let pos_ids: Vec<usize> = (0..t_len).collect();
        let mut x = g.embed_lookup(self.p(b, self.layout.pos), &pos_ids)?;
        let l = &self.layout;
        let mut tables: Vec<(Option<NodeId>, Vec<Option<usize>>)> = vec![
            (Some(self.p(b, l.word)), word),
            (Some(self.p(b, l.cell)), cell),
            (Some(self.p(b, l.row)), row),
            (Some(self.p(b, l.col)), col),
            (Some(self.p(b, l.special)), special),
            (l.pred.map(|i| self.p(b, i)), pred),
        ];
        if latent.iter().any(Option::is_some) {
            let src = latents.ok_or_else(|| Error::Contract("latent slots need latent inputs".into()))?;
            tables.push((Some(src), latent));
        }
        for (table, ids) in tables {
            if ids.iter().all(Option::is_none) {
                continue;
            }
            let table = table.ok_or_else(|| Error::Contract("PRED token with k_pred = 0".into()))?;
            let e = g.gather_rows(table, &ids)?;
            x = g.add(x, e)?;
        }
        Ok(x)
    }

    /// Top-layer hidden states (after the final norm), `T×d_model`.
    pub fn hidden_states(
        &self,
        g: &mut Graph,
        b: &Bound,
        seq: &TokenSequence,
        latents: Option<NodeId>,
    ) -> Result<NodeId> {
        let mut x = self.embed(g, b, seq, latents)?;
        for layer in &self.layout.layers {
            let h = g.rmsnorm(x, self.p(b, layer.norm1))?;
            let qkv = g.matmul(h, self.p(b, layer.w_qkv))?;
            let att = g.causal_attention(qkv, self.cfg.n_heads)?;
            let o = g.matmul(att, self.p(b, layer.w_o))?;
            x = g.add(x, o)?;
            let h = g.rmsnorm(x, self.p(b, layer.norm2))?;
            let f = g.matmul(h, self.p(b, layer.w_fc))?;
            let f = g.add_row_bias(f, self.p(b, layer.b_fc))?;
            let f = g.gelu(f);
            let f = g.matmul(f, self.p(b, layer.w_proj))?;
            let f = g.add_row_bias(f, self.p(b, layer.b_proj))?;
            x = g.add(x, f)?;
        }
        g.rmsnorm(x, self.p(b, self.layout.final_norm))
    }

    pub fn logits(&self, g: &mut Graph, b: &Bound, hiddens: NodeId) -> Result<NodeId> {
        let z = g.matmul(hiddens, self.p(b, self.layout.head_w))?;
        g.add_row_bias(z, self.p(b, self.layout.head_b))
    }

    pub fn forward_hidden(
        &self,
        g: &mut Graph,
        b: &Bound,
        seq: &TokenSequence,
        latents: Option<NodeId>,
    ) -> Result<Forward> {
        let hiddens = self.hidden_states(g, b, seq, latents)?;
        let logits = self.logits(g, b, hiddens)?;
        Ok(Forward { hiddens, logits })
    }

    /// Input view with the PRED suffix: returns `(h_x, h_hat_r, answer_logits)`.
    fn input_pass(
        &self,
        g: &mut Graph,
        b: &Bound,
        input: &TokenSequence,
        k_pred: usize,
    ) -> Result<(NodeId, NodeId, NodeId)> {
        let seq = input.with_pred_suffix(k_pred);
        let h = self.hidden_states(g, b, &seq, None)?;
        let last_input = input.len() - 1;
        let h_x = g.row(h, last_input)?;
        let h_hat_r = if k_pred == 0 { h_x } else { g.row(h, seq.len() - 1)? };
        let answer_logits = self.logits(g, b, h_x)?;
        Ok((h_x, h_hat_r, answer_logits))
    }

    /// The three training passes: input view plus PRED suffix, full context
    /// (or trajectory only, per `ctx`) for the text loss, and the trajectory
    /// alone for the target encoding.
    pub fn encode_views(
        &self,
        g: &mut Graph,
        b: &Bound,
        ex: &PreparedExample,
        ctx: VlmContext,
    ) -> Result<ViewEncodings> {
        if ex.traj.is_empty() {
            return Err(Error::Contract(format!("example {} has an empty trajectory", ex.id)));
        }
        let (h_x, h_hat_r, answer_logits) = self.input_pass(g, b, &ex.input, self.cfg.k_pred)?;
        let full_logits = match ctx {
            VlmContext::Full => Some(self.forward_hidden(g, b, &ex.full, None)?.logits),
            VlmContext::TrajOnly => None,
        };
        let start = g.len();
        let traj_hiddens = self.hidden_states(g, b, &ex.traj, None)?;
        let last = g.row(traj_hiddens, ex.traj.len() - 1)?;
        let h_r = g.stop_gradient(last);
        let traj_pass = start..g.len();
        let vlm_logits = match full_logits {
            Some(z) => z,
            None => self.logits(g, b, traj_hiddens)?,
        };
        Ok(ViewEncodings { h_x, h_hat_r, h_r, traj_hiddens, vlm_logits, answer_logits, traj_pass })
    }

    /// Passes used by the SFT arm: `(answer_logits, vlm_logits)`.
    pub fn encode_sft(
        &self,
        g: &mut Graph,
        b: &Bound,
        ex: &PreparedExample,
        ctx: VlmContext,
    ) -> Result<(NodeId, NodeId)> {
        let (_, _, answer_logits) = self.input_pass(g, b, &ex.input, 0)?;
        let vlm_logits = match ctx {
            VlmContext::Full => self.forward_hidden(g, b, &ex.full, None)?.logits,
            VlmContext::TrajOnly => {
                let h = self.hidden_states(g, b, &ex.traj, None)?;
                self.logits(g, b, h)?
            }
        };
        Ok((answer_logits, vlm_logits))
    }

    /// Predictions of `h_{t+1..t+d'}` from `h_t`, one affine head per offset.
    pub fn nextlat_predict(&self, g: &mut Graph, b: &Bound, traj_hiddens: NodeId, t: usize) -> Result<NodeId> {
        let t_len = g.tensor(traj_hiddens).rows();
        if t + 1 >= t_len {
            return Err(Error::Contract(format!("no future state after position {t} of {t_len}")));
        }
        let horizon = self.cfg.nextlat_horizon.min(t_len - 1 - t);
        let h_t = g.row(traj_hiddens, t)?;
        let preds = (0..horizon).map(|i| self.nextlat_head(g, b, i, h_t)).collect::<Result<Vec<_>>>()?;
        g.concat_rows(&preds)
    }

    /// Applies head `i` (offset `i + 1`) to every row of `h`.
    pub fn nextlat_head(&self, g: &mut Graph, b: &Bound, i: usize, h: NodeId) -> Result<NodeId> {
        let (w, bias) = self.layout.nextlat[i];
        let z = g.matmul(h, self.p(b, w))?;
        g.add_row_bias(z, self.p(b, bias))
    }

    /// Input embeddings of a scene's patches without sequence position,
    /// the regression targets of latent slots.
    pub fn patch_embeddings(&self, g: &mut Graph, b: &Bound, scene: &synthworld::Scene) -> Result<NodeId> {
        let mut codes = Vec::with_capacity(scene.n_patches());
        let mut rows = Vec::with_capacity(scene.n_patches());
        let mut cols = Vec::with_capacity(scene.n_patches());
        for r in 0..scene.rows {
            for c in 0..scene.cols {
                codes.push(scene.get(r, c) as usize);
                rows.push(r);
                cols.push(c);
            }
        }
        let e = g.embed_lookup(self.p(b, self.layout.cell), &codes)?;
        let er = g.embed_lookup(self.p(b, self.layout.row), &rows)?;
        let ec = g.embed_lookup(self.p(b, self.layout.col), &cols)?;
        let s = g.add(e, er)?;
        g.add(s, ec)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Frozen-weight inference: parameters are bound once and every forward
/// reuses them.
pub struct Inference<'m> {
    pub model: &'m Model,
    g: Graph,
    bound: Bound,
    mark: usize,
}

impl<'m> Inference<'m> {
    pub fn new(model: &'m Model) -> Self {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let mark = g.len();
        Inference { model, g, bound, mark }
    }

    /// Output-class logits at the last position of `seq`.
    pub fn next_logits(&mut self, seq: &TokenSequence, latents: Option<&[Vec<f64>]>) -> Result<Vec<f64>> {
        self.g.truncate(self.mark);
        let lat = match latents {
            Some(rows) if !rows.is_empty() => {
                let d = self.model.cfg.d_model;
                let data: Vec<f64> = rows.iter().flatten().copied().collect();
                Some(self.g.constant(vec![rows.len(), d], data)?)
            }
            _ => None,
        };
        let h = self.model.hidden_states(&mut self.g, &self.bound, seq, lat)?;
        let last = self.g.row(h, seq.len() - 1)?;
        let z = self.model.logits(&mut self.g, &self.bound, last)?;
        Ok(self.g.value(z).to_vec())
    }

    /// Top-layer hidden state at the last position of `seq`.
    pub fn last_hidden(&mut self, seq: &TokenSequence, latents: Option<&[Vec<f64>]>) -> Result<Vec<f64>> {
        self.g.truncate(self.mark);
        let lat = match latents {
            Some(rows) if !rows.is_empty() => {
                let d = self.model.cfg.d_model;
                let data: Vec<f64> = rows.iter().flatten().copied().collect();
                Some(self.g.constant(vec![rows.len(), d], data)?)
            }
            _ => None,
        };
        let h = self.model.hidden_states(&mut self.g, &self.bound, seq, lat)?;
        let d = self.model.cfg.d_model;
        let v = self.g.value(h);
        Ok(v[v.len() - d..].to_vec())
    }

    /// Greedy decoding of up to `max_new` tokens; stops after EOS or after
    /// any class for which `stop` returns true.
    pub fn greedy(
        &mut self,
        seq: &TokenSequence,
        latents: Option<&[Vec<f64>]>,
        max_new: usize,
        eos_class: usize,
        stop: impl Fn(usize) -> bool,
    ) -> Result<Decoded> {
        let mut seq = seq.clone();
        let mut out = Decoded::default();
        for _ in 0..max_new {
            if seq.len() >= self.model.cfg.max_seq {
                break;
            }
            let z = self.next_logits(&seq, latents)?;
            let c = argmax(&z);
            if out.tokens.is_empty() {
                out.first_logits = z;
            }
            out.tokens.push(c);
            if c == eos_class || stop(c) {
                break;
            }
            let seg = seq.segment_id.last().copied().unwrap_or(0);
            seq.push(Item::Text(c), seg);
        }
        Ok(out)
    }
}

/// Greedy output classes, plus the logits of the first decoding step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    pub first_logits: Vec<f64>,
}

/// Greedy answer from the input view alone (no trajectory, tools or PRED).
pub fn generate_answer(model: &Model, input_view: &TokenSequence, max_new: usize) -> Result<Vec<usize>> {
    let eos = model.cfg.vocab_size - 1;
    Ok(Inference::new(model).greedy(input_view, None, max_new, eos, |_| false)?.tokens)
}
