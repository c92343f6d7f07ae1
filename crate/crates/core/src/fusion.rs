//! Emotion head: weighted block fusion into utterance tokens, two-stage
//! cross-attention against the final-block features, and the classifier.

use rand::Rng;

use crate::autograd::Var;
use crate::encoder::BlockOutputs;
use crate::error::{Error, Result};
use crate::params::{ParamStore, Session};
use crate::tensor::{Real, Tensor};

pub const NUM_EMOTIONS: usize = 4;
pub const EMOTION_NAMES: [&str; NUM_EMOTIONS] = ["happy", "sad", "neutral", "angry"];

/// Parameter prefixes owned by the head, in the order they appear.
pub const PREFIXES: [&str; 3] = ["classifier.", "cma.", "mmf."];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    /// Emotion tokens go straight to the classifier.
    NoCma,
    /// Tokens are segment means of the final block alone; no block fusion.
    NoMmf,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCma => "no-cma",
            Variant::NoMmf => "no-mmf",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no-cma" => Ok(Variant::NoCma),
            "no-mmf" => Ok(Variant::NoMmf),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct FusionConfig {
    /// Trailing encoder blocks fused by MMF.
    pub fuse_count: usize,
    pub num_tokens: usize,
    /// Attention width; `None` means the model width.
    pub att_dim: Option<usize>,
    pub hidden: usize,
    pub variant: Variant,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            fuse_count: 6,
            // Shortest utterances reach the last block with 6 frames on backbone 1.
            num_tokens: 6,
            att_dim: None,
            hidden: 256,
            variant: Variant::Full,
        }
    }
}

impl FusionConfig {
    pub fn att_dim(&self, d: usize) -> usize {
        self.att_dim.unwrap_or(d)
    }

    pub fn validate(&self, num_blocks: usize, d: usize) -> Result<()> {
        if self.fuse_count == 0 || self.fuse_count > num_blocks {
            return Err(Error::Config(format!(
                "cannot fuse {} blocks from a {num_blocks}-block encoder",
                self.fuse_count
            )));
        }
        if self.num_tokens == 0 || self.hidden == 0 || self.att_dim(d) == 0 {
            return Err(Error::Config(
                "tokens, hidden and att_dim must be positive".into(),
            ));
        }
        if self.variant == Variant::NoCma && self.att_dim(d) != d {
            return Err(Error::Config(
                "the CMA bypass needs att_dim equal to the model width".into(),
            ));
        }
        Ok(())
    }

    /// Fresh head parameters, uniform in `±1/sqrt(fan_in)`; block logits start uniform.
    pub fn init_params<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        d: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let k = self.fuse_count;
        let a = self.att_dim(d);
        store.insert("mmf.block_logits", Tensor::zeros([k]))?;
        store.init_uniform("mmf.conv.kernel", [1, k, 3, 3], 9 * k, rng)?;
        store.insert("mmf.conv.bias", Tensor::zeros([1]))?;
        for m in ["q", "k", "v"] {
            store.init_uniform(format!("cma.w_{m}"), [d, a], d, rng)?;
        }
        store.init_uniform("classifier.hidden.w", [a, self.hidden], a, rng)?;
        store.insert("classifier.hidden.b", Tensor::zeros([self.hidden]))?;
        store.init_uniform("classifier.out.w", [self.hidden, NUM_EMOTIONS], self.hidden, rng)?;
        store.insert("classifier.out.b", Tensor::zeros([NUM_EMOTIONS]))
    }

    pub fn to_meta(&self) -> String {
        format!(
            "fuse={};tokens={};att={};hidden={};variant={}",
            self.fuse_count,
            self.num_tokens,
            self.att_dim.map_or("model".to_string(), |a| a.to_string()),
            self.hidden,
            self.variant.name()
        )
    }

    pub fn from_meta(text: &str) -> Result<Self> {
        let mut cfg = FusionConfig::default();
        for item in text.split(';').filter(|s| !s.is_empty()) {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad fusion field {item:?}")))?;
            let num = || {
                v.parse::<usize>()
                    .map_err(|_| Error::Checkpoint(format!("bad value for {k}: {v:?}")))
            };
            match k {
                "fuse" => cfg.fuse_count = num()?,
                "tokens" => cfg.num_tokens = num()?,
                "att" if v == "model" => cfg.att_dim = None,
                "att" => cfg.att_dim = Some(num()?),
                "hidden" => cfg.hidden = num()?,
                "variant" => cfg.variant = Variant::parse(v)?,
                other => return Err(Error::Checkpoint(format!("unknown fusion field {other}"))),
            }
        }
        Ok(cfg)
    }
}

/// Source row for output frame `j` when resampling `from` frames to `to`.
pub fn nearest_index(j: usize, from: usize, to: usize) -> usize {
    j * from / to
}

/// Softmax-weighted block stack fused by a 3×3 conv and pooled into
/// `num_tokens` segment means. Returns `[n, d]`.
pub fn mmf_forward<T: Real>(
    s: &mut Session<'_, T>,
    blocks: &BlockOutputs,
    cfg: &FusionConfig,
) -> Result<Var> {
    let l = blocks.blocks.len();
    let k = cfg.fuse_count;
    if k == 0 || k > l {
        return Err(Error::Config(format!("cannot fuse {k} blocks out of {l}")));
    }
    let ppg = blocks.ppg();
    let t_last = s.value(ppg).shape()[0];
    let d = s.value(ppg).shape()[1];
    let logits = s.param("mmf.block_logits")?;
    let weights = s.graph.softmax(logits);
    let mut layers = Vec::with_capacity(k);
    for (i, &b) in blocks.blocks[l - k..].iter().enumerate() {
        let t_i = s.value(b).shape()[0];
        let aligned = if t_i == t_last {
            b
        } else {
            let index: Vec<usize> = (0..t_last).map(|j| nearest_index(j, t_i, t_last)).collect();
            s.graph.gather_rows(b, &index)?
        };
        layers.push(s.graph.scale_by_element(aligned, weights, i)?);
    }
    let stacked = s.graph.stack(&layers)?;
    let kernel = s.param("mmf.conv.kernel")?;
    let bias = s.param("mmf.conv.bias")?;
    let fused = s.graph.conv2d(stacked, kernel, bias)?;
    let fused = s.graph.reshape(fused, &[t_last, d])?;
    s.graph.segment_mean(fused, cfg.num_tokens)
}

#[derive(Clone, Copy, Debug)]
pub struct CmaOutputs {
    pub q_att: Var,
    pub o_att: Var,
    pub stage1_attention: Var,
    pub stage2_attention: Var,
}

/// Emotion tokens attend to the final-block frames twice: the first stage's
/// output becomes the second stage's query, with keys and values reused.
pub fn cma_forward<T: Real>(s: &mut Session<'_, T>, tokens: Var, ppg: Var) -> Result<CmaOutputs> {
    let wq = s.param("cma.w_q")?;
    let wk = s.param("cma.w_k")?;
    let wv = s.param("cma.w_v")?;
    let g = &mut s.graph;
    let q = g.matmul(tokens, wq)?;
    let k = g.matmul(ppg, wk)?;
    let v = g.matmul(ppg, wv)?;
    let att = g.value(k).shape()[1];
    let scale = T::of(1.0 / (att as f64).sqrt());
    let kt = g.transpose(k)?;
    let mut stage = |query: Var| -> Result<(Var, Var)> {
        let scores = g.matmul(query, kt)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax(scores);
        let mixed = g.matmul(attn, v)?;
        Ok((g.relu(mixed), attn))
    };
    let (q_att, stage1_attention) = stage(q)?;
    let (o_att, stage2_attention) = stage(q_att)?;
    Ok(CmaOutputs {
        q_att,
        o_att,
        stage1_attention,
        stage2_attention,
    })
}

/// Mean over tokens, one relu hidden layer, then `[1, 4]` logits.
pub fn classify_logits<T: Real>(s: &mut Session<'_, T>, tokens: Var) -> Result<Var> {
    let pooled = s.graph.segment_mean(tokens, 1)?;
    let w = s.param("classifier.hidden.w")?;
    let b = s.param("classifier.hidden.b")?;
    let h = s.graph.linear(pooled, w, b)?;
    let h = s.graph.relu(h);
    let w = s.param("classifier.out.w")?;
    let b = s.param("classifier.out.b")?;
    s.graph.linear(h, w, b)
}

/// Intermediate nodes of one head pass.
#[derive(Clone, Debug)]
pub struct HeadOutputs {
    pub tokens: Var,
    pub cma: Option<CmaOutputs>,
    pub logits: Var,
}

/// MMF, CMA and the classifier wired according to `cfg.variant`.
pub fn head_forward<T: Real>(
    s: &mut Session<'_, T>,
    blocks: &BlockOutputs,
    cfg: &FusionConfig,
) -> Result<HeadOutputs> {
    let ppg = blocks.ppg();
    let tokens = match cfg.variant {
        Variant::NoMmf => s.graph.segment_mean(ppg, cfg.num_tokens)?,
        _ => mmf_forward(s, blocks, cfg)?,
    };
    let (cma, top) = match cfg.variant {
        Variant::NoCma => (None, tokens),
        _ => {
            let c = cma_forward(s, tokens, ppg)?;
            (Some(c), c.o_att)
        }
    };
    let logits = classify_logits(s, top)?;
    Ok(HeadOutputs { tokens, cma, logits })
}
