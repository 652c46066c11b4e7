//! Toy dual encoders with a global (BGE) head and a token selection (TSE)
//! head.
//!
//! Per modality, a raw feature vector `x` is turned into `N` local tokens
//! `tok_j = tanh(W_j x + b_j)`. A learned global query scores the tokens,
//! `attn = softmax(tok · q / √d)`, and the global feature is the
//! attention-weighted token sum. The BGE embedding is the normalised global
//! feature.
//!
//! The TSE head keeps the `⌊R·N⌋` tokens with the largest attention, L2
//! normalises each, passes it through `MLP(x̂) + FC(x̂)` and max-pools
//! elementwise; the pooled vector is normalised again. Attention weights only
//! drive selection, they do not scale the selected tokens.
//!
//! Gradients are propagated by hand ([`backward`]), including through the TSE
//! branch into the shared token projections.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::math::{
    axpy, cosine, dot, l2_normalize, l2_normalize_backward, rng_from, softmax, Matrix,
};

const CHECKPOINT_TAG: &str = "rml-checkpoint v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Image,
    Text,
}

/// Fraction of local tokens kept by the TSE head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectRatio(f64);

impl SelectRatio {
    pub fn new(value: f64, num_tokens: usize) -> Result<Self> {
        if !(value > 0.0 && value <= 1.0) {
            return Err(Error::Config(format!("select ratio must lie in (0, 1], got {value}")));
        }
        let r = Self(value);
        if r.count(num_tokens) == 0 {
            return Err(Error::Config(format!(
                "select ratio {value} keeps no token out of {num_tokens}"
            )));
        }
        Ok(r)
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// `⌊ratio · n⌋`
    pub fn count(self, n: usize) -> usize {
        // Guard against 0.3 * 10 = 2.9999999999999996.
        (self.0 * n as f64 + 1e-9).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub raw_dim: usize,
    pub embed_dim: usize,
    pub num_tokens: usize,
    pub hidden_dim: usize,
    pub select_ratio: SelectRatio,
}

impl EncoderConfig {
    pub fn new(raw_dim: usize, embed_dim: usize, num_tokens: usize, select_ratio: f64) -> Result<Self> {
        let cfg = Self {
            raw_dim,
            embed_dim,
            num_tokens,
            hidden_dim: 2 * embed_dim,
            select_ratio: SelectRatio::new(select_ratio, num_tokens)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 2 || self.num_tokens < 2 || self.raw_dim < 2 || self.hidden_dim == 0 {
            return Err(Error::Config(format!(
                "encoder needs embed_dim >= 2, num_tokens >= 2, raw_dim >= 2 and hidden_dim > 0, got {self:?}"
            )));
        }
        SelectRatio::new(self.select_ratio.value(), self.num_tokens)?;
        Ok(())
    }

    pub fn num_selected(&self) -> usize {
        self.select_ratio.count(self.num_tokens)
    }
}

/// Trainable weights for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityParams {
    /// One `d × raw_dim` projection per token slot.
    pub token_proj: Vec<Matrix>,
    /// Row `j` is the bias of token slot `j`.
    pub token_bias: Matrix,
    pub global_query: Vec<f64>,
    pub mlp_w1: Matrix,
    pub mlp_b1: Vec<f64>,
    pub mlp_w2: Matrix,
    pub mlp_b2: Vec<f64>,
    pub fc_w: Matrix,
    pub fc_b: Vec<f64>,
}

impl ModalityParams {
    fn zeros(cfg: &EncoderConfig) -> Self {
        let (d, h) = (cfg.embed_dim, cfg.hidden_dim);
        Self {
            token_proj: (0..cfg.num_tokens)
                .map(|_| Matrix::zeros(d, cfg.raw_dim))
                .collect(),
            token_bias: Matrix::zeros(cfg.num_tokens, d),
            global_query: vec![0.0; d],
            mlp_w1: Matrix::zeros(h, d),
            mlp_b1: vec![0.0; h],
            mlp_w2: Matrix::zeros(d, h),
            mlp_b2: vec![0.0; d],
            fc_w: Matrix::zeros(d, d),
            fc_b: vec![0.0; d],
        }
    }

    fn random<R: Rng>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(cfg);
        let mut fill = |m: &mut [f64], scale: f64| {
            for v in m {
                *v = scale * rng.sample::<f64, _>(StandardNormal);
            }
        };
        let proj_scale = 1.0 / (cfg.raw_dim as f64).sqrt();
        for w in &mut p.token_proj {
            fill(w.as_mut_slice(), proj_scale);
        }
        fill(&mut p.global_query, 1.0);
        fill(p.mlp_w1.as_mut_slice(), 1.0 / (cfg.embed_dim as f64).sqrt());
        fill(p.mlp_w2.as_mut_slice(), 1.0 / (cfg.hidden_dim as f64).sqrt());
        fill(p.fc_w.as_mut_slice(), 1.0 / (cfg.embed_dim as f64).sqrt());
        p
    }

    fn blocks(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.token_proj.iter().map(Matrix::as_slice).collect();
        out.extend([
            self.token_bias.as_slice(),
            self.global_query.as_slice(),
            self.mlp_w1.as_slice(),
            &self.mlp_b1,
            self.mlp_w2.as_slice(),
            &self.mlp_b2,
            self.fc_w.as_slice(),
            &self.fc_b,
        ]);
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self
            .token_proj
            .iter_mut()
            .map(Matrix::as_mut_slice)
            .collect();
        out.push(self.token_bias.as_mut_slice());
        out.push(&mut self.global_query);
        out.push(self.mlp_w1.as_mut_slice());
        out.push(&mut self.mlp_b1);
        out.push(self.mlp_w2.as_mut_slice());
        out.push(&mut self.mlp_b2);
        out.push(self.fc_w.as_mut_slice());
        out.push(&mut self.fc_b);
        out
    }

    fn block_names(num_tokens: usize) -> Vec<String> {
        let mut names: Vec<String> = (0..num_tokens).map(|j| format!("token_proj.{j}")).collect();
        names.extend(
            ["token_bias", "global_query", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2", "fc_w", "fc_b"]
                .iter()
                .map(|s| s.to_string()),
        );
        names
    }

    fn block_shapes(cfg: &EncoderConfig) -> Vec<(usize, usize)> {
        let (d, h) = (cfg.embed_dim, cfg.hidden_dim);
        let mut shapes = vec![(d, cfg.raw_dim); cfg.num_tokens];
        shapes.extend([(cfg.num_tokens, d), (1, d), (h, d), (1, h), (d, h), (1, d), (d, d), (1, d)]);
        shapes
    }
}

/// Both modalities' weights plus the architecture they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub image: ModalityParams,
    pub text: ModalityParams,
}

impl EncoderParams {
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from(seed);
        let image = ModalityParams::random(&config, &mut rng);
        let text = ModalityParams::random(&config, &mut rng);
        Ok(Self { config, image, text })
    }

    /// Same shapes, all zeros. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            image: ModalityParams::zeros(&self.config),
            text: ModalityParams::zeros(&self.config),
        }
    }

    pub fn modality(&self, m: Modality) -> &ModalityParams {
        match m {
            Modality::Image => &self.image,
            Modality::Text => &self.text,
        }
    }

    pub fn modality_mut(&mut self, m: Modality) -> &mut ModalityParams {
        match m {
            Modality::Image => &mut self.image,
            Modality::Text => &mut self.text,
        }
    }

    /// Parameter blocks in a fixed order (image first, then text).
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut b = self.image.blocks();
        b.extend(self.text.blocks());
        b
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut b = self.image.blocks_mut();
        b.extend(self.text.blocks_mut());
        b
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn named_blocks(&self) -> Vec<(String, (usize, usize), &[f64])> {
        let names = ModalityParams::block_names(self.config.num_tokens);
        let shapes = ModalityParams::block_shapes(&self.config);
        let mut out = Vec::new();
        for (prefix, m) in [("image", &self.image), ("text", &self.text)] {
            for ((name, shape), block) in names.iter().zip(&shapes).zip(m.blocks()) {
                out.push((format!("{prefix}.{name}"), *shape, block));
            }
        }
        out
    }

    /// Text checkpoint:
    ///
    /// ```text
    /// rml-checkpoint v1
    /// raw_dim 64
    /// embed_dim 32
    /// num_tokens 8
    /// hidden_dim 64
    /// select_ratio 0.3
    /// block image.token_proj.0 32 64
    /// <one row of space-separated reals per line>
    /// ...
    /// end
    /// ```
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let c = &self.config;
        writeln!(w, "{CHECKPOINT_TAG}")?;
        writeln!(w, "raw_dim {}", c.raw_dim)?;
        writeln!(w, "embed_dim {}", c.embed_dim)?;
        writeln!(w, "num_tokens {}", c.num_tokens)?;
        writeln!(w, "hidden_dim {}", c.hidden_dim)?;
        writeln!(w, "select_ratio {}", c.select_ratio.value())?;
        let mut line = String::new();
        for (name, (rows, cols), data) in self.named_blocks() {
            writeln!(w, "block {name} {rows} {cols}")?;
            for r in 0..rows {
                line.clear();
                for (k, v) in data[r * cols..(r + 1) * cols].iter().enumerate() {
                    if k > 0 {
                        line.push(' ');
                    }
                    let _ = write!(line, "{v}");
                }
                writeln!(w, "{line}")?;
            }
        }
        writeln!(w, "end")?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate().map(|(k, l)| (k + 1, l));
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((n, Ok(l))) => Ok((n, l)),
                Some((_, Err(e))) => Err(e.into()),
                None => Err(Error::parse(0, format!("unexpected end of file, expected {what}"))),
            }
        };
        let (n, tag) = next("version tag")?;
        if tag.trim() != CHECKPOINT_TAG {
            return Err(Error::parse(n, format!("expected `{CHECKPOINT_TAG}`, found `{tag}`")));
        }
        let mut header = |key: &str| -> Result<(usize, String)> {
            let (n, l) = next(key)?;
            match l.split_once(' ') {
                Some((k, v)) if k == key => Ok((n, v.trim().to_string())),
                _ => Err(Error::parse(n, format!("expected `{key} <value>`, found `{l}`"))),
            }
        };
        let mut uint = |key: &str| -> Result<usize> {
            let (n, v) = header(key)?;
            v.parse().map_err(|e| Error::parse(n, format!("bad {key}: {e}")))
        };
        let raw_dim = uint("raw_dim")?;
        let embed_dim = uint("embed_dim")?;
        let num_tokens = uint("num_tokens")?;
        let hidden_dim = uint("hidden_dim")?;
        let (n, ratio) = header("select_ratio")?;
        let ratio: f64 = ratio
            .parse()
            .map_err(|e| Error::parse(n, format!("bad select_ratio: {e}")))?;
        let config = EncoderConfig {
            raw_dim,
            embed_dim,
            num_tokens,
            hidden_dim,
            select_ratio: SelectRatio::new(ratio, num_tokens)
                .map_err(|e| Error::parse(n, e.to_string()))?,
        };
        config.validate().map_err(|e| Error::parse(n, e.to_string()))?;

        let mut params = EncoderParams {
            image: ModalityParams::zeros(&config),
            text: ModalityParams::zeros(&config),
            config,
        };
        let expected: Vec<(String, (usize, usize))> = params
            .named_blocks()
            .into_iter()
            .map(|(name, shape, _)| (name, shape))
            .collect();
        for ((name, (rows, cols)), block) in expected.into_iter().zip(params.blocks_mut()) {
            let (n, head) = next("block header")?;
            let want = format!("block {name} {rows} {cols}");
            if head.trim() != want {
                return Err(Error::parse(n, format!("expected `{want}`, found `{head}`")));
            }
            for r in 0..rows {
                let (n, l) = next("parameter row")?;
                let vals: Vec<f64> = l
                    .split_whitespace()
                    .map(|s| s.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::parse(n, format!("bad real: {e}")))?;
                if vals.len() != cols {
                    return Err(Error::parse(
                        n,
                        format!("expected {cols} values in {name}, found {}", vals.len()),
                    ));
                }
                block[r * cols..(r + 1) * cols].copy_from_slice(&vals);
            }
        }
        let (n, end) = next("end")?;
        if end.trim() != "end" {
            return Err(Error::parse(n, format!("expected `end`, found `{end}`")));
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::file(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::file(path, e))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::file(path, e))?;
        Self::read_from(BufReader::new(file))
    }
}

/// Output of [`encode`]: local tokens, their attention and the global feature.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEncoding {
    pub tokens: Vec<Vec<f64>>,
    pub attn: Vec<f64>,
    pub global: Vec<f64>,
}

pub fn encode(params: &EncoderParams, raw: &[f64], modality: Modality) -> Result<TokenEncoding> {
    if raw.len() != params.config.raw_dim {
        return Err(Error::Shape(format!(
            "raw feature has {} dims, encoder expects {}",
            raw.len(),
            params.config.raw_dim
        )));
    }
    let p = params.modality(modality);
    let tokens: Vec<Vec<f64>> = p
        .token_proj
        .iter()
        .enumerate()
        .map(|(j, w)| {
            w.matvec(raw)
                .into_iter()
                .zip(p.token_bias.row(j))
                .map(|(z, b)| (z + b).tanh())
                .collect()
        })
        .collect();
    let scale = 1.0 / (params.config.embed_dim as f64).sqrt();
    let scores: Vec<f64> = tokens
        .iter()
        .map(|t| scale * dot(t, &p.global_query))
        .collect();
    let attn = softmax(&scores);
    let mut global = vec![0.0; params.config.embed_dim];
    for (a, t) in attn.iter().zip(&tokens) {
        axpy(*a, t, &mut global);
    }
    Ok(TokenEncoding {
        tokens,
        attn,
        global,
    })
}

/// Indices of the `⌊ratio·N⌋` largest attention weights, ties to the lower
/// index, returned in ascending order.
pub fn select_indices(attn: &[f64], ratio: SelectRatio) -> Vec<usize> {
    let k = ratio.count(attn.len()).min(attn.len());
    let mut order: Vec<usize> = (0..attn.len()).collect();
    order.sort_by(|&a, &b| attn[b].total_cmp(&attn[a]).then(a.cmp(&b)));
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    chosen
}

/// The selected tokens and their weights, original order preserved.
pub fn select_tokens(
    tokens: &[Vec<f64>],
    attn: &[f64],
    ratio: SelectRatio,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    select_indices(attn, ratio)
        .into_iter()
        .map(|j| (tokens[j].clone(), attn[j]))
        .unzip()
}

/// Intermediate values of the TSE head needed for backpropagation.
#[derive(Debug, Clone)]
struct TseCache {
    unit_tokens: Vec<Vec<f64>>,
    token_norms: Vec<f64>,
    hidden_pre: Vec<Vec<f64>>,
    /// For every output coordinate, which selected token won the max.
    winners: Vec<usize>,
    pooled_norm: f64,
}

fn tse_forward(p: &ModalityParams, selected: &[&[f64]]) -> (Vec<f64>, TseCache) {
    let d = p.fc_b.len();
    let mut unit_tokens = Vec::with_capacity(selected.len());
    let mut token_norms = Vec::with_capacity(selected.len());
    let mut hidden_pre = Vec::with_capacity(selected.len());
    let mut pooled = vec![f64::NEG_INFINITY; d];
    let mut winners = vec![0usize; d];
    for (s, tok) in selected.iter().enumerate() {
        let (x, n) = l2_normalize(tok);
        let mut a1 = p.mlp_w1.matvec(&x);
        axpy(1.0, &p.mlp_b1, &mut a1);
        let relu: Vec<f64> = a1.iter().map(|v| v.max(0.0)).collect();
        let mut u = p.mlp_w2.matvec(&relu);
        axpy(1.0, &p.mlp_b2, &mut u);
        axpy(1.0, &p.fc_w.matvec(&x), &mut u);
        axpy(1.0, &p.fc_b, &mut u);
        for k in 0..d {
            if u[k] > pooled[k] {
                pooled[k] = u[k];
                winners[k] = s;
            }
        }
        unit_tokens.push(x);
        token_norms.push(n);
        hidden_pre.push(a1);
    }
    let (out, pooled_norm) = l2_normalize(&pooled);
    (
        out,
        TseCache {
            unit_tokens,
            token_norms,
            hidden_pre,
            winners,
            pooled_norm,
        },
    )
}

/// TSE embedding of an already-selected token set.
pub fn tse_embed(params: &EncoderParams, modality: Modality, selected: &[Vec<f64>]) -> Result<Vec<f64>> {
    if selected.is_empty() {
        return Err(Error::Contract("tse_embed needs at least one token".into()));
    }
    let d = params.config.embed_dim;
    if let Some(bad) = selected.iter().find(|t| t.len() != d) {
        return Err(Error::Shape(format!("token has {} dims, expected {d}", bad.len())));
    }
    let refs: Vec<&[f64]> = selected.iter().map(Vec::as_slice).collect();
    Ok(tse_forward(params.modality(modality), &refs).0)
}

/// Everything the forward pass produced for one item and one modality.
#[derive(Debug, Clone)]
pub struct ItemEncoding {
    pub modality: Modality,
    pub tokens: TokenEncoding,
    pub selected: Vec<usize>,
    /// Unit-norm global embedding.
    pub bge: Vec<f64>,
    pub global_norm: f64,
    /// Unit-norm token-selection embedding.
    pub tse: Vec<f64>,
    tse_cache: TseCache,
}

/// Full forward pass: tokens, attention, selection and both embeddings.
pub fn encode_item(params: &EncoderParams, raw: &[f64], modality: Modality) -> Result<ItemEncoding> {
    let tokens = encode(params, raw, modality)?;
    let selected = select_indices(&tokens.attn, params.config.select_ratio);
    let refs: Vec<&[f64]> = selected.iter().map(|&j| tokens.tokens[j].as_slice()).collect();
    let (tse, tse_cache) = tse_forward(params.modality(modality), &refs);
    let (bge, global_norm) = l2_normalize(&tokens.global);
    Ok(ItemEncoding {
        modality,
        tokens,
        selected,
        bge,
        global_norm,
        tse,
        tse_cache,
    })
}

/// Accumulate into `grads` the parameter gradient of a loss whose gradients
/// with respect to this item's unit BGE and TSE embeddings are `d_bge` and
/// `d_tse`. Token selection is treated as a constant routing decision.
pub fn backward(
    params: &EncoderParams,
    raw: &[f64],
    enc: &ItemEncoding,
    d_bge: &[f64],
    d_tse: &[f64],
    grads: &mut EncoderParams,
) {
    let p = params.modality(enc.modality);
    let g = grads.modality_mut(enc.modality);
    let n_tok = enc.tokens.tokens.len();
    let d = params.config.embed_dim;
    let mut d_tokens = vec![vec![0.0; d]; n_tok];

    // TSE head.
    let cache = &enc.tse_cache;
    let d_pooled = l2_normalize_backward(&enc.tse, cache.pooled_norm, d_tse);
    for (s, &tok_idx) in enc.selected.iter().enumerate() {
        let d_u: Vec<f64> = (0..d)
            .map(|k| if cache.winners[k] == s { d_pooled[k] } else { 0.0 })
            .collect();
        if d_u.iter().all(|v| *v == 0.0) {
            continue;
        }
        let x = &cache.unit_tokens[s];
        let a1 = &cache.hidden_pre[s];
        let relu: Vec<f64> = a1.iter().map(|v| v.max(0.0)).collect();
        g.mlp_w2.add_outer(1.0, &d_u, &relu);
        axpy(1.0, &d_u, &mut g.mlp_b2);
        let d_relu = p.mlp_w2.t_matvec(&d_u);
        let d_a1: Vec<f64> = d_relu
            .iter()
            .zip(a1)
            .map(|(gr, a)| if *a > 0.0 { *gr } else { 0.0 })
            .collect();
        g.mlp_w1.add_outer(1.0, &d_a1, x);
        axpy(1.0, &d_a1, &mut g.mlp_b1);
        g.fc_w.add_outer(1.0, &d_u, x);
        axpy(1.0, &d_u, &mut g.fc_b);
        let mut d_x = p.mlp_w1.t_matvec(&d_a1);
        axpy(1.0, &p.fc_w.t_matvec(&d_u), &mut d_x);
        let d_tok = l2_normalize_backward(x, cache.token_norms[s], &d_x);
        axpy(1.0, &d_tok, &mut d_tokens[tok_idx]);
    }

    // BGE head: global = Σ attn_j tok_j, attn = softmax(tok · q / √d).
    let d_global = l2_normalize_backward(&enc.bge, enc.global_norm, d_bge);
    let attn = &enc.tokens.attn;
    let toks = &enc.tokens.tokens;
    let d_attn: Vec<f64> = toks.iter().map(|t| dot(t, &d_global)).collect();
    let mean_d: f64 = attn.iter().zip(&d_attn).map(|(a, da)| a * da).sum();
    let scale = 1.0 / (d as f64).sqrt();
    for j in 0..n_tok {
        axpy(attn[j], &d_global, &mut d_tokens[j]);
        let d_score = attn[j] * (d_attn[j] - mean_d);
        if d_score != 0.0 {
            axpy(d_score * scale, &p.global_query, &mut d_tokens[j]);
            axpy(d_score * scale, &toks[j], &mut g.global_query);
        }
    }

    // tok_j = tanh(W_j x + b_j)
    for j in 0..n_tok {
        let d_pre: Vec<f64> = d_tokens[j]
            .iter()
            .zip(&toks[j])
            .map(|(gt, t)| gt * (1.0 - t * t))
            .collect();
        g.token_proj[j].add_outer(1.0, &d_pre, raw);
        axpy(1.0, &d_pre, g.token_bias.row_mut(j));
    }
}

/// Cosine of the two global features.
pub fn bge_similarity(a: &ItemEncoding, b: &ItemEncoding) -> f64 {
    cosine(&a.tokens.global, &b.tokens.global)
}

/// Cosine of the two TSE embeddings.
pub fn tse_similarity(a: &ItemEncoding, b: &ItemEncoding) -> f64 {
    cosine(&a.tse, &b.tse)
}

/// Image and text encodings of one pair.
#[derive(Debug, Clone)]
pub struct PairEncoding {
    pub image: ItemEncoding,
    pub text: ItemEncoding,
}

/// Encode both sides of every pair, in order.
pub fn encode_pairs<'a>(
    params: &EncoderParams,
    items: impl IntoIterator<Item = &'a crate::synth_data::PairItem>,
) -> Result<Vec<PairEncoding>> {
    items
        .into_iter()
        .map(|it| {
            Ok(PairEncoding {
                image: encode_item(params, &it.image_raw, Modality::Image)?,
                text: encode_item(params, &it.text_raw, Modality::Text)?,
            })
        })
        .collect()
}

/// `S[i][j]` = similarity of image `images[i]` and text `texts[j]` on one
/// branch. Embeddings are unit-norm, so this is a dot product.
pub fn similarity_block(
    images: &[&ItemEncoding],
    texts: &[&ItemEncoding],
    branch: crate::losses::Branch,
) -> Matrix {
    use crate::losses::Branch;
    let pick = |e: &'_ ItemEncoding| -> Vec<f64> {
        match branch {
            Branch::Bge => e.bge.clone(),
            Branch::Tse => e.tse.clone(),
        }
    };
    let vi: Vec<Vec<f64>> = images.iter().map(|e| pick(e)).collect();
    let vt: Vec<Vec<f64>> = texts.iter().map(|e| pick(e)).collect();
    Matrix::from_fn(vi.len(), vt.len(), |i, j| dot(&vi[i], &vt[j]).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::norm;

    fn cfg(ratio: f64) -> EncoderConfig {
        EncoderConfig::new(6, 4, 5, ratio).unwrap()
    }

    fn raw(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = rng_from(seed);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn identical_projections_give_uniform_attention() {
        let mut p = EncoderParams::init(cfg(0.4), 1).unwrap();
        let w0 = p.image.token_proj[0].clone();
        for w in &mut p.image.token_proj {
            *w = w0.clone();
        }
        let enc = encode(&p, &raw(2, 6), Modality::Image).unwrap();
        for a in &enc.attn {
            assert!((a - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_is_a_probability_vector() {
        let p = EncoderParams::init(cfg(0.4), 3).unwrap();
        for s in 0..20 {
            let enc = encode(&p, &raw(s, 6), Modality::Text).unwrap();
            assert!(enc.attn.iter().all(|a| *a >= 0.0));
            assert!((enc.attn.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn query_toward_token_raises_its_attention() {
        let mut p = EncoderParams::init(cfg(0.4), 5).unwrap();
        let x = raw(9, 6);
        let before = encode(&p, &x, Modality::Image).unwrap();
        let dir = before.tokens[3].clone();
        axpy(0.05, &dir, &mut p.image.global_query);
        let after = encode(&p, &x, Modality::Image).unwrap();
        assert!(after.attn[3] > before.attn[3]);
    }

    #[test]
    fn dimension_mismatch_is_a_shape_error() {
        let p = EncoderParams::init(cfg(0.4), 1).unwrap();
        assert!(matches!(encode(&p, &[1.0; 3], Modality::Image), Err(Error::Shape(_))));
    }

    #[test]
    fn selection_counts_and_ties() {
        let r = SelectRatio::new(1.0, 4).unwrap();
        assert_eq!(select_indices(&[0.1, 0.2, 0.3, 0.4], r), vec![0, 1, 2, 3]);

        let attn = [0.05, 0.2, 0.01, 0.15, 0.09, 0.1, 0.12, 0.08, 0.1, 0.1];
        let r = SelectRatio::new(0.3, 10).unwrap();
        assert_eq!(select_indices(&attn, r), vec![1, 3, 6]);

        let r = SelectRatio::new(0.34, 3).unwrap();
        assert_eq!(select_indices(&[0.4, 0.4, 0.2], r), vec![0]);
    }

    #[test]
    fn ratio_that_keeps_nothing_is_rejected() {
        assert!(SelectRatio::new(0.1, 5).is_err());
        assert!(SelectRatio::new(0.0, 5).is_err());
        assert!(SelectRatio::new(1.5, 5).is_err());
    }

    fn mlp_plus_fc(p: &ModalityParams, x: &[f64]) -> Vec<f64> {
        let (xh, _) = l2_normalize(x);
        let h: Vec<f64> = p
            .mlp_w1
            .matvec(&xh)
            .iter()
            .zip(&p.mlp_b1)
            .map(|(a, b)| (a + b).max(0.0))
            .collect();
        let mlp = p.mlp_w2.matvec(&h);
        let fc = p.fc_w.matvec(&xh);
        (0..x.len()).map(|k| mlp[k] + p.mlp_b2[k] + fc[k] + p.fc_b[k]).collect()
    }

    #[test]
    fn tse_single_token_and_idempotence() {
        let p = EncoderParams::init(cfg(0.4), 7).unwrap();
        let x = raw(1, 4);
        let single = tse_embed(&p, Modality::Image, &[x.clone()]).unwrap();
        let expect = l2_normalize(&mlp_plus_fc(&p.image, &x)).0;
        for (a, b) in single.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14);
        }
        let doubled = tse_embed(&p, Modality::Image, &[x.clone(), x]).unwrap();
        assert_eq!(single, doubled);
    }

    #[test]
    fn tse_matches_independent_max_pool() {
        let p = EncoderParams::init(cfg(0.4), 8).unwrap();
        let toks: Vec<Vec<f64>> = (0..3).map(|s| raw(100 + s, 4)).collect();
        let got = tse_embed(&p, Modality::Text, &toks).unwrap();
        let transformed: Vec<Vec<f64>> = toks.iter().map(|t| mlp_plus_fc(&p.text, t)).collect();
        let pooled: Vec<f64> = (0..4)
            .map(|k| transformed.iter().map(|u| u[k]).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let n = norm(&pooled);
        for k in 0..4 {
            assert!((got[k] - pooled[k] / n).abs() < 1e-14);
        }
        assert!((norm(&got) - 1.0).abs() < 1e-9);
        let reversed: Vec<Vec<f64>> = toks.iter().rev().cloned().collect();
        assert_eq!(got, tse_embed(&p, Modality::Text, &reversed).unwrap());
    }

    #[test]
    fn zero_token_does_not_produce_nan() {
        let p = EncoderParams::init(cfg(0.4), 8).unwrap();
        let out = tse_embed(&p, Modality::Text, &[vec![0.0; 4]]).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn similarity_edge_cases() {
        let p = EncoderParams::init(cfg(0.4), 2).unwrap();
        let mut a = encode_item(&p, &raw(1, 6), Modality::Image).unwrap();
        let mut b = a.clone();
        assert!((bge_similarity(&a, &b) - 1.0).abs() < 1e-12);
        assert!((tse_similarity(&a, &b) - 1.0).abs() < 1e-12);
        a.tokens.global = vec![1.0, 0.0, 0.0, 0.0];
        b.tokens.global = vec![0.0, 2.0, 0.0, 0.0];
        a.tse = vec![0.0, 0.0, 1.0, 0.0];
        b.tse = vec![0.0, 0.0, 0.0, 1.0];
        assert_eq!(bge_similarity(&a, &b), 0.0);
        assert_eq!(tse_similarity(&a, &b), 0.0);
        b.tokens.global = vec![-1.0, 0.0, 0.0, 0.0];
        b.tse = vec![0.0, 0.0, -1.0, 0.0];
        assert_eq!(bge_similarity(&a, &b), -1.0);
        assert_eq!(tse_similarity(&a, &b), -1.0);
    }

    /// Scalar probe `c_b · bge + c_t · tse`, differentiated by hand and by
    /// central differences over every parameter.
    #[test]
    fn backward_matches_finite_differences() {
        let params = EncoderParams::init(cfg(0.4), 21).unwrap();
        let x = raw(4, 6);
        let c_b = raw(5, 4);
        let c_t = raw(6, 4);
        for modality in [Modality::Image, Modality::Text] {
            let probe = |p: &EncoderParams| {
                let e = encode_item(p, &x, modality).unwrap();
                dot(&c_b, &e.bge) + dot(&c_t, &e.tse)
            };
            let enc = encode_item(&params, &x, modality).unwrap();
            let mut grads = params.zeros_like();
            backward(&params, &x, &enc, &c_b, &c_t, &mut grads);

            let h = 1e-6;
            let mut worst: f64 = 0.0;
            let n_blocks = params.blocks().len();
            for b in 0..n_blocks {
                let len = params.blocks()[b].len();
                for k in 0..len {
                    let mut plus = params.clone();
                    plus.blocks_mut()[b][k] += h;
                    let mut minus = params.clone();
                    minus.blocks_mut()[b][k] -= h;
                    let fd = (probe(&plus) - probe(&minus)) / (2.0 * h);
                    let an = grads.blocks()[b][k];
                    worst = worst.max((fd - an).abs() / (1.0 + fd.abs().max(an.abs())));
                }
            }
            assert!(worst < 1e-6, "{modality:?}: worst relative error {worst}");
        }
    }

    #[test]
    fn checkpoint_round_trips_exactly() {
        let p = EncoderParams::init(cfg(0.4), 13).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let back = EncoderParams::read_from(&buf[..]).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let p = EncoderParams::init(cfg(0.4), 13).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap().replace("block text.fc_b", "block text.fc_x");
        assert!(matches!(
            EncoderParams::read_from(text.as_bytes()),
            Err(Error::Parse { .. })
        ));
    }
}
