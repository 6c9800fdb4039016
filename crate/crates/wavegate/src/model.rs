//! The character transformer: configuration, vocabulary, parameter
//! construction per variant, the differentiable forward pass, and
//! checkpoint serialization.

use std::collections::HashMap;
use std::io::{Read as _, Write as _};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::attention::{
    self, scale_init_qk_matrix, EgaParams, LagWeights, MqFeatureSpec,
};
use crate::optim::ParamSet;
use crate::pe::{sincos_encode, MopeParams, PeKind, ROPE_BASE};
use crate::rng::SplitMix64;
use crate::spectral::mq_features;
use crate::tensor::{Graph, Real, Tensor, Var};

/// Attention scoring mechanism.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttnKind {
    Dot,
    Conv { l_max: usize },
}

/// Post-softmax gate applied to attention rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateKind {
    None,
    Ega,
    Mq(MqFeatureSpec),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub pe: PeKind,
    pub attn: AttnKind,
    pub gate: GateKind,
    pub scale_init: bool,
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        assert_eq!(self.d_model % self.n_heads, 0);
        self.d_model / self.n_heads
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }
}

/// Character vocabulary: sorted unique characters of the corpus.
#[derive(Clone, Debug)]
pub struct CharVocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl CharVocab {
    pub fn from_text(text: &str) -> Self {
        let mut chars: Vec<char> = text.chars().collect();
        chars.sort_unstable();
        chars.dedup();
        Self::from_chars(chars)
    }

    pub fn from_chars(chars: Vec<char>) -> Self {
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        CharVocab { chars, index }
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.index
                    .get(&c)
                    .copied()
                    .with_context(|| format!("character {c:?} not in vocabulary"))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.chars[i]).collect()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }
}

const INIT_STD: f64 = 0.02;

/// Analytic trainable-parameter count for a configuration.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let (d, v, h) = (cfg.d_model, cfg.vocab_size, cfg.n_heads);
    let dh = cfg.d_head();
    let dff = cfg.d_ff();
    let mut n = v * d; // token embedding
    match cfg.pe {
        PeKind::Learned => n += cfg.seq_len * d,
        PeKind::Mope => n += d, // log-frequencies and log-bandwidths
        PeKind::SinCos | PeKind::Rope => {}
    }
    let mut per_layer = 2 * d // ln1
        + 4 * (d * d + d)     // q, k, v, o projections with bias
        + 2 * d               // ln2
        + d * dff + dff       // mlp in
        + dff * d + d; // mlp out
    match cfg.attn {
        AttnKind::Conv { l_max } => per_layer += 2 * l_max + 1,
        AttnKind::Dot => {}
    }
    match cfg.gate {
        GateKind::Ega => per_layer += EgaParams::<f64>::param_count(h, dh),
        GateKind::Mq(spec) => per_layer += spec.n_features() + 1 + 2,
        GateKind::None => {}
    }
    n += cfg.n_layers * per_layer;
    n += 2 * d; // final norm
    n += d * v + v; // untied output head
    n
}

/// Builds the full parameter set for a configuration, seeded.
pub fn build_params<F: Real>(cfg: &ModelConfig, seed: u64) -> ParamSet<F> {
    let mut rng = SplitMix64::new(seed);
    let (d, v) = (cfg.d_model, cfg.vocab_size);
    let (h, dh, dff) = (cfg.n_heads, cfg.d_head(), cfg.d_ff());
    // residual projections start smaller so depth does not inflate variance
    let resid_std = INIT_STD / (2.0 * cfg.n_layers as f64).sqrt();
    let mut ps = ParamSet::new();
    ps.insert("tok_emb", Tensor::randn(vec![v, d], INIT_STD, &mut rng));
    match cfg.pe {
        PeKind::Learned => {
            ps.insert("pos_emb", Tensor::randn(vec![cfg.seq_len, d], INIT_STD, &mut rng));
        }
        PeKind::Mope => {
            let mp = MopeParams::<F>::init(d);
            ps.insert("mope.log_omega", mp.log_omega);
            ps.insert("mope.log_sigma", mp.log_sigma);
        }
        PeKind::SinCos | PeKind::Rope => {}
    }
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("l{l}.{s}");
        ps.insert(p("ln1.g"), Tensor::full(vec![d], F::one()));
        ps.insert(p("ln1.b"), Tensor::zeros(vec![d]));
        for (name, is_qk) in [("wq", true), ("wk", true), ("wv", false), ("wo", false)] {
            let w = if is_qk && cfg.scale_init {
                scale_init_qk_matrix(h, d, dh, &mut rng)
            } else if name == "wo" {
                Tensor::randn(vec![d, d], resid_std, &mut rng)
            } else {
                Tensor::randn(vec![d, d], INIT_STD, &mut rng)
            };
            ps.insert(p(&format!("attn.{name}")), w);
            ps.insert(p(&format!("attn.{name}.b")), Tensor::zeros(vec![d]));
        }
        if let AttnKind::Conv { l_max } = cfg.attn {
            ps.insert(p("attn.lambda"), LagWeights::<F>::init(l_max).lambda);
        }
        match cfg.gate {
            GateKind::Ega => {
                let ega = EgaParams::<F>::init(h, dh, &mut rng);
                ps.insert(p("ega.w_proj"), ega.w_proj);
                ps.insert(p("ega.alpha"), ega.alpha);
                ps.insert(p("ega.tau"), ega.tau);
            }
            GateKind::Mq(spec) => {
                ps.insert(
                    p("mq.w"),
                    Tensor::randn(vec![spec.n_features(), 1], INIT_STD, &mut rng),
                );
                ps.insert(p("mq.b"), Tensor::zeros(vec![1]));
                ps.insert(p("mq.alpha"), Tensor::full(vec![1], F::one()));
                ps.insert(p("mq.tau"), Tensor::zeros(vec![1]));
            }
            GateKind::None => {}
        }
        ps.insert(p("ln2.g"), Tensor::full(vec![d], F::one()));
        ps.insert(p("ln2.b"), Tensor::zeros(vec![d]));
        ps.insert(p("mlp.w1"), Tensor::randn(vec![d, dff], INIT_STD, &mut rng));
        ps.insert(p("mlp.b1"), Tensor::zeros(vec![dff]));
        ps.insert(p("mlp.w2"), Tensor::randn(vec![dff, d], resid_std, &mut rng));
        ps.insert(p("mlp.b2"), Tensor::zeros(vec![d]));
    }
    ps.insert("ln_f.g", Tensor::full(vec![d], F::one()));
    ps.insert("ln_f.b", Tensor::zeros(vec![d]));
    ps.insert("head.w", Tensor::randn(vec![d, v], INIT_STD, &mut rng));
    ps.insert("head.b", Tensor::zeros(vec![v]));
    ps
}

/// Parameter leaves bound into a graph, aligned with the set's order.
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn bind<F: Real>(g: &mut Graph<F>, ps: &ParamSet<F>) -> Bound {
        let vars = ps.iter().map(|(_, t)| g.leaf(t.clone(), true)).collect();
        let index = ps
            .names()
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Bound { vars, index }
    }

    pub fn var(&self, name: &str) -> Var {
        self.vars[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients after a backward pass, in parameter order.
    pub fn grads<F: Real>(&self, g: &Graph<F>) -> Vec<Option<Tensor<F>>> {
        self.vars.iter().map(|&v| g.grad(v)).collect()
    }
}

/// Forward pass artifacts worth inspecting beyond the logits.
pub struct Forward {
    pub logits: Var,
    /// One gate tensor per layer when the variant gates at all.
    pub gates: Vec<Var>,
    /// Post-encoding embedding output, the input to block 0.
    pub embedded: Var,
    /// Residual stream after the embedding and after each block: L+1 stages.
    pub layer_outputs: Vec<Var>,
}

/// Runs the model on a `[b, t]` batch of token ids and returns `[b*t, V]`
/// logits. All trainable leaves come pre-bound through `bound`.
pub fn forward<F: Real>(
    g: &mut Graph<F>,
    cfg: &ModelConfig,
    bound: &Bound,
    ids: &[usize],
    b: usize,
    t: usize,
) -> Forward {
    assert_eq!(ids.len(), b * t);
    assert!(t <= cfg.seq_len, "sequence length {t} exceeds model limit {}", cfg.seq_len);
    let (d, h) = (cfg.d_model, cfg.n_heads);

    let tok = bound.var("tok_emb");
    let mut x = g.embedding(tok, ids, vec![b, t]);
    match cfg.pe {
        PeKind::Learned => {
            let full = bound.var("pos_emb");
            let rows = g.take_rows(full, t);
            x = g.add_broadcast(x, rows);
        }
        PeKind::SinCos => {
            let enc = g.constant(sincos_encode(t, d));
            x = g.add_broadcast(x, enc);
        }
        PeKind::Mope => {
            let enc = g.mope_encode(bound.var("mope.log_omega"), bound.var("mope.log_sigma"), t);
            x = g.add_broadcast(x, enc);
        }
        PeKind::Rope => {}
    }
    let embedded = x;

    // spectral gate features are measurements of the embedded sequence, not
    // part of the differentiable path
    let mq_feats = match cfg.gate {
        GateKind::Mq(spec) => {
            let f = mq_features(g.value(embedded), spec);
            Some(g.constant(f))
        }
        _ => None,
    };

    let mut gates = Vec::new();
    let mut layer_outputs = vec![embedded];
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("l{l}.{s}");
        let normed = g.layer_norm(x, bound.var(&p("ln1.g")), bound.var(&p("ln1.b")));
        let q = g.linear(normed, bound.var(&p("attn.wq")), bound.var(&p("attn.wq.b")));
        let k = g.linear(normed, bound.var(&p("attn.wk")), bound.var(&p("attn.wk.b")));
        let v = g.linear(normed, bound.var(&p("attn.wv")), bound.var(&p("attn.wv.b")));
        let mut qh = g.split_heads(q, h);
        let mut kh = g.split_heads(k, h);
        let vh = g.split_heads(v, h);
        if cfg.pe == PeKind::Rope {
            qh = g.rope_apply(qh, ROPE_BASE);
            kh = g.rope_apply(kh, ROPE_BASE);
        }
        let mut attn = match cfg.attn {
            AttnKind::Dot => attention::dot_attention_weights(g, qh, kh),
            AttnKind::Conv { l_max } => {
                let w = g.softmax(bound.var(&p("attn.lambda")));
                let s = g.conv_scores(qh, kh, w, l_max);
                g.causal_softmax(s)
            }
        };
        match cfg.gate {
            GateKind::Ega => {
                let xh = g.split_heads(x, h);
                let gate = attention::ega_gate(
                    g,
                    xh,
                    bound.var(&p("ega.w_proj")),
                    bound.var(&p("ega.alpha")),
                    bound.var(&p("ega.tau")),
                );
                attn = g.gate_renorm(attn, gate);
                gates.push(gate);
            }
            GateKind::Mq(_) => {
                let gate = attention::mq_gate(
                    g,
                    mq_feats.unwrap(),
                    bound.var(&p("mq.w")),
                    bound.var(&p("mq.b")),
                    bound.var(&p("mq.alpha")),
                    bound.var(&p("mq.tau")),
                );
                attn = g.gate_renorm(attn, gate);
                gates.push(gate);
            }
            GateKind::None => {}
        }
        let ctx = g.matmul(attn, vh);
        let merged = g.merge_heads(ctx);
        let proj = g.linear(merged, bound.var(&p("attn.wo")), bound.var(&p("attn.wo.b")));
        x = g.add(x, proj);

        let normed2 = g.layer_norm(x, bound.var(&p("ln2.g")), bound.var(&p("ln2.b")));
        let up = g.linear(normed2, bound.var(&p("mlp.w1")), bound.var(&p("mlp.b1")));
        let act = g.gelu(up);
        let down = g.linear(act, bound.var(&p("mlp.w2")), bound.var(&p("mlp.b2")));
        x = g.add(x, down);
        layer_outputs.push(x);
    }
    let xf = g.layer_norm(x, bound.var("ln_f.g"), bound.var("ln_f.b"));
    let flat = g.reshape(xf, vec![b * t, d]);
    let logits = g.linear(flat, bound.var("head.w"), bound.var("head.b"));
    Forward { logits, gates, embedded, layer_outputs }
}

/// Forward plus mean next-character cross-entropy.
pub fn forward_loss<F: Real>(
    g: &mut Graph<F>,
    cfg: &ModelConfig,
    bound: &Bound,
    ids: &[usize],
    targets: &[usize],
    b: usize,
    t: usize,
) -> (Var, Forward) {
    let fwd = forward(g, cfg, bound, ids, b, t);
    let loss = g.cross_entropy(fwd.logits, targets);
    (loss, fwd)
}

/// Greedy continuation of a prompt, for smoke checks, not sampling quality.
pub fn greedy_generate<F: Real>(
    cfg: &ModelConfig,
    ps: &ParamSet<F>,
    vocab: &CharVocab,
    prompt: &str,
    n_new: usize,
) -> Result<String> {
    let mut ids = vocab.encode(prompt)?;
    if ids.len() < 2 {
        bail!("prompt must be at least 2 characters");
    }
    for _ in 0..n_new {
        let start = ids.len().saturating_sub(cfg.seq_len);
        let window = &ids[start..];
        let mut g: Graph<F> = Graph::new();
        let bound = Bound::bind(&mut g, ps);
        let fwd = forward(&mut g, cfg, &bound, window, 1, window.len());
        let logits = g.value(fwd.logits);
        let v = cfg.vocab_size;
        let last = &logits.data[(window.len() - 1) * v..window.len() * v];
        let next = last
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        ids.push(next);
    }
    Ok(vocab.decode(&ids))
}

// ---- checkpoints -----------------------------------------------------------

const CKPT_MAGIC: &str = "WAVEGATE-CKPT v1";

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    config: ModelConfig,
    vocab: Vec<char>,
    step: usize,
    rng_state: u64,
    manifest: Vec<CkptEntry>,
}

#[derive(Serialize, Deserialize)]
struct CkptEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// Checkpoint payload after loading.
pub struct Checkpoint<F> {
    pub config: ModelConfig,
    pub vocab: CharVocab,
    pub step: usize,
    pub rng_state: u64,
    pub params: ParamSet<F>,
}

/// Writes a checkpoint: a magic line, a JSON header, then all parameters as
/// little-endian f64 in manifest order. Round trips bit-exactly.
pub fn save_checkpoint<F: Real>(
    path: &Path,
    cfg: &ModelConfig,
    vocab: &CharVocab,
    ps: &ParamSet<F>,
    step: usize,
    rng_state: u64,
) -> Result<()> {
    let mut manifest = Vec::new();
    let mut offset = 0usize;
    for (name, t) in ps.iter() {
        manifest.push(CkptEntry { name: name.to_string(), shape: t.shape.clone(), offset });
        offset += t.numel() * 8;
    }
    let header = CkptHeader {
        config: *cfg,
        vocab: vocab.chars().to_vec(),
        step,
        rng_state,
        manifest,
    };
    let header_json = serde_json::to_string(&header)?;
    let mut f = std::fs::File::create(path)
        .with_context(|| format!("creating checkpoint at {}", path.display()))?;
    writeln!(f, "{CKPT_MAGIC}")?;
    writeln!(f, "{}", header_json.len())?;
    f.write_all(header_json.as_bytes())?;
    for (_, t) in ps.iter() {
        for &x in &t.data {
            f.write_all(&x.to_f64().to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint<F: Real>(path: &Path) -> Result<Checkpoint<F>> {
    let mut f = std::fs::File::open(path)
        .with_context(|| format!("opening checkpoint at {}", path.display()))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    let first_nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .context("truncated checkpoint: no magic line")?;
    if &bytes[..first_nl] != CKPT_MAGIC.as_bytes() {
        bail!("not a checkpoint file (bad magic)");
    }
    let rest = &bytes[first_nl + 1..];
    let second_nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .context("truncated checkpoint: no header length")?;
    let hlen: usize = std::str::from_utf8(&rest[..second_nl])?
        .trim()
        .parse()
        .context("bad header length")?;
    let header_bytes = &rest[second_nl + 1..second_nl + 1 + hlen];
    let header: CkptHeader = serde_json::from_slice(header_bytes)?;
    let blob = &rest[second_nl + 1 + hlen..];
    let mut params = ParamSet::new();
    for e in &header.manifest {
        let n: usize = e.shape.iter().product();
        if e.offset + n * 8 > blob.len() {
            bail!("checkpoint blob truncated at parameter {}", e.name);
        }
        let data: Vec<F> = (0..n)
            .map(|i| {
                let o = e.offset + i * 8;
                let x = f64::from_le_bytes(blob[o..o + 8].try_into().unwrap());
                crate::tensor::real(x)
            })
            .collect();
        params.insert(&e.name, Tensor::new(e.shape.clone(), data));
    }
    Ok(Checkpoint {
        config: header.config,
        vocab: CharVocab::from_chars(header.vocab),
        step: header.step,
        rng_state: header.rng_state,
        params,
    })
}
