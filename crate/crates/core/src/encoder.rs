//! Conformer encoder with macaron feed-forward halves and optional
//! progressive temporal down-sampling.
//!
//! Each block computes, in order:
//!
//! ```text
//! h1 = x  + FFN1(x) / 2
//! h2 = h1 + MHSA(h1)
//! h3 = h2 + Conv(h2)
//! h4 = h3 + FFN2(h3) / 2
//! y  = LayerNorm(h4)
//! ```
//!
//! Every sub-module applies its own pre-norm. There is no positional encoding.

use std::collections::BTreeSet;

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{ParamStore, Session};
use crate::tensor::{Real, Tensor};

pub const PREFIX: &str = "encoder.";

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct EncoderConfig {
    pub num_blocks: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_expansion: usize,
    pub conv_kernel: usize,
    /// 1-based block indices after which time is halved.
    pub downsample_blocks: BTreeSet<usize>,
    pub num_symbols: usize,
    pub input_bins: usize,
    /// Layer-norm epsilon, in units of 1e-9 so the config stays `Eq`/`Hash`.
    pub eps_nano: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::backbone1()
    }
}

impl EncoderConfig {
    /// Desk-scale backbone with down-sampling after blocks 4 and 8.
    pub fn backbone1() -> Self {
        EncoderConfig {
            num_blocks: 12,
            model_dim: 64,
            num_heads: 4,
            ffn_expansion: 4,
            conv_kernel: 7,
            downsample_blocks: BTreeSet::from([4, 8]),
            num_symbols: 12,
            input_bins: 40,
            eps_nano: 10_000,
        }
    }

    /// Same stack without down-sampling.
    pub fn backbone2() -> Self {
        EncoderConfig {
            downsample_blocks: BTreeSet::new(),
            ..Self::backbone1()
        }
    }

    pub fn backbone(which: u8) -> Result<Self> {
        match which {
            1 => Ok(Self::backbone1()),
            2 => Ok(Self::backbone2()),
            other => Err(Error::Config(format!(
                "unknown backbone {other}, expected 1 or 2"
            ))),
        }
    }

    pub fn eps(&self) -> f64 {
        self.eps_nano as f64 * 1e-9
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_blocks == 0 || self.model_dim == 0 || self.num_heads == 0 {
            return bad("blocks, model_dim and heads must be positive".into());
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.num_heads
            ));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return bad(format!("conv kernel {} must be odd", self.conv_kernel));
        }
        if self.ffn_expansion == 0 || self.num_symbols == 0 || self.input_bins == 0 {
            return bad("ffn_expansion, num_symbols and input_bins must be positive".into());
        }
        if let Some(&b) = self
            .downsample_blocks
            .iter()
            .find(|&&b| b == 0 || b >= self.num_blocks)
        {
            return bad(format!("downsample block {b} outside [1, {})", self.num_blocks));
        }
        if self.eps_nano == 0 {
            return bad("layer-norm eps must be positive".into());
        }
        Ok(())
    }

    /// Shortest utterance the encoder accepts.
    pub fn min_frames(&self) -> usize {
        2 << self.downsample_blocks.len()
    }

    /// Temporal length of every block output for an input of `frames` frames.
    pub fn frame_schedule(&self, frames: usize) -> Vec<usize> {
        let mut t = frames;
        (1..=self.num_blocks)
            .map(|i| {
                let here = t;
                if self.downsample_blocks.contains(&i) {
                    t = t.div_ceil(2);
                }
                here
            })
            .collect()
    }

    /// Index of the input frame that block `block` (1-based) frame `j` is centred on.
    pub fn source_frame(&self, block: usize, j: usize) -> usize {
        let halvings = self.downsample_blocks.iter().filter(|&&b| b < block).count();
        j << halvings
    }

    /// Fresh parameters under `encoder.`, uniform in `±1/sqrt(fan_in)`.
    pub fn init_params<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        self.validate()?;
        let d = self.model_dim;
        let e = self.ffn_expansion * d;
        store.init_uniform("encoder.input.w", [self.input_bins, d], self.input_bins, rng)?;
        store.insert("encoder.input.b", Tensor::zeros([d]))?;
        for i in 1..=self.num_blocks {
            let p = block_prefix(i);
            for ffn in ["ffn1", "ffn2"] {
                norm_params(store, &format!("{p}.{ffn}.norm"), d)?;
                store.init_uniform(format!("{p}.{ffn}.w_in"), [d, e], d, rng)?;
                store.insert(format!("{p}.{ffn}.b_in"), Tensor::zeros([e]))?;
                store.init_uniform(format!("{p}.{ffn}.w_out"), [e, d], e, rng)?;
                store.insert(format!("{p}.{ffn}.b_out"), Tensor::zeros([d]))?;
            }
            norm_params(store, &format!("{p}.mhsa.norm"), d)?;
            for m in ["q", "k", "v", "o"] {
                store.init_uniform(format!("{p}.mhsa.w_{m}"), [d, d], d, rng)?;
                store.insert(format!("{p}.mhsa.b_{m}"), Tensor::zeros([d]))?;
            }
            norm_params(store, &format!("{p}.conv.norm"), d)?;
            store.init_uniform(format!("{p}.conv.w_pw1"), [d, 2 * d], d, rng)?;
            store.insert(format!("{p}.conv.b_pw1"), Tensor::zeros([2 * d]))?;
            store.init_uniform(
                format!("{p}.conv.w_dw"),
                [d, self.conv_kernel],
                self.conv_kernel,
                rng,
            )?;
            store.insert(format!("{p}.conv.b_dw"), Tensor::zeros([d]))?;
            norm_params(store, &format!("{p}.conv.dw_norm"), d)?;
            store.init_uniform(format!("{p}.conv.w_pw2"), [d, d], d, rng)?;
            store.insert(format!("{p}.conv.b_pw2"), Tensor::zeros([d]))?;
            norm_params(store, &format!("{p}.final_norm"), d)?;
            if self.downsample_blocks.contains(&i) {
                let q = downsample_prefix(i);
                store.init_uniform(format!("{q}.w"), [3 * d, d], 3 * d, rng)?;
                store.insert(format!("{q}.b"), Tensor::zeros([d]))?;
            }
        }
        Ok(())
    }

    /// Key/value text form used in checkpoint metadata.
    pub fn to_meta(&self) -> String {
        let ds: Vec<String> = self.downsample_blocks.iter().map(|b| b.to_string()).collect();
        format!(
            "blocks={};dim={};heads={};ffn={};kernel={};down={};symbols={};bins={};eps_nano={}",
            self.num_blocks,
            self.model_dim,
            self.num_heads,
            self.ffn_expansion,
            self.conv_kernel,
            ds.join(","),
            self.num_symbols,
            self.input_bins,
            self.eps_nano
        )
    }

    pub fn from_meta(text: &str) -> Result<Self> {
        let mut cfg = Self::backbone1();
        for item in text.split(';').filter(|s| !s.is_empty()) {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad encoder field {item:?}")))?;
            let num = || {
                v.parse::<usize>()
                    .map_err(|_| Error::Checkpoint(format!("bad value for {k}: {v:?}")))
            };
            match k {
                "blocks" => cfg.num_blocks = num()?,
                "dim" => cfg.model_dim = num()?,
                "heads" => cfg.num_heads = num()?,
                "ffn" => cfg.ffn_expansion = num()?,
                "kernel" => cfg.conv_kernel = num()?,
                "symbols" => cfg.num_symbols = num()?,
                "bins" => cfg.input_bins = num()?,
                "eps_nano" => cfg.eps_nano = num()? as u64,
                "down" => {
                    cfg.downsample_blocks = v
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(|s| {
                            s.parse()
                                .map_err(|_| Error::Checkpoint(format!("bad block {s:?}")))
                        })
                        .collect::<Result<_>>()?
                }
                other => return Err(Error::Checkpoint(format!("unknown encoder field {other}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn norm_params<T: Real>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Result<()> {
    store.insert(format!("{prefix}.gamma"), Tensor::ones([d]))?;
    store.insert(format!("{prefix}.beta"), Tensor::zeros([d]))
}

pub fn block_prefix(i: usize) -> String {
    format!("encoder.block{i:02}")
}

pub fn downsample_prefix(i: usize) -> String {
    format!("encoder.down{i:02}")
}

/// A synthetic log-energy spectrogram, `[frames, bins]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub values: Tensor<f32>,
}

impl Spectrogram {
    pub fn new(values: Tensor<f32>) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::Input(format!(
                "spectrogram must be [frames, bins], got {:?}",
                values.shape()
            )));
        }
        if !values.is_finite() {
            return Err(Error::Input("spectrogram contains non-finite values".into()));
        }
        Ok(Spectrogram { values })
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn bins(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Outputs of every block for one utterance, as nodes on a session graph.
#[derive(Clone, Debug)]
pub struct BlockOutputs {
    pub input_proj: Var,
    pub blocks: Vec<Var>,
}

impl BlockOutputs {
    /// The final block's output (the phonetic-posteriorgram features).
    pub fn ppg(&self) -> Var {
        *self.blocks.last().expect("at least one block")
    }

    /// 1-based block access.
    pub fn block(&self, i: usize) -> Var {
        self.blocks[i - 1]
    }

    pub fn lengths<T: Real>(&self, s: &Session<'_, T>) -> Vec<usize> {
        self.blocks.iter().map(|&b| s.value(b).shape()[0]).collect()
    }
}

fn pre_norm<T: Real>(s: &mut Session<'_, T>, x: Var, prefix: &str, eps: f64) -> Result<Var> {
    let gamma = s.param(&format!("{prefix}.gamma"))?;
    let beta = s.param(&format!("{prefix}.beta"))?;
    s.graph.layer_norm(x, gamma, beta, eps)
}

fn affine<T: Real>(s: &mut Session<'_, T>, x: Var, w: &str, b: &str) -> Result<Var> {
    let w = s.param(w)?;
    let b = s.param(b)?;
    s.graph.linear(x, w, b)
}

/// `x + FFN(x) / 2` where `FFN = W_out · swish(W_in · LN(x))`. `prefix` names
/// the sub-module, e.g. `encoder.block01.ffn1`.
pub fn ffn_half_step<T: Real>(s: &mut Session<'_, T>, x: Var, prefix: &str, eps: f64) -> Result<Var> {
    let h = pre_norm(s, x, &format!("{prefix}.norm"), eps)?;
    let h = affine(s, h, &format!("{prefix}.w_in"), &format!("{prefix}.b_in"))?;
    let h = s.graph.swish(h);
    let h = affine(s, h, &format!("{prefix}.w_out"), &format!("{prefix}.b_out"))?;
    let h = s.graph.scale(h, T::of(0.5));
    s.graph.add(x, h)
}

/// `x + MHSA(LN(x))`; also returns each head's attention matrix `[T, T]`.
pub fn mhsa_step_with_maps<T: Real>(
    s: &mut Session<'_, T>,
    x: Var,
    prefix: &str,
    num_heads: usize,
    eps: f64,
) -> Result<(Var, Vec<Var>)> {
    let d = s.value(x).last_dim();
    if num_heads == 0 || !d.is_multiple_of(num_heads) {
        return Err(Error::Config(format!(
            "{d} channels not divisible by {num_heads} heads"
        )));
    }
    let dh = d / num_heads;
    let h = pre_norm(s, x, &format!("{prefix}.norm"), eps)?;
    let q = affine(s, h, &format!("{prefix}.w_q"), &format!("{prefix}.b_q"))?;
    let k = affine(s, h, &format!("{prefix}.w_k"), &format!("{prefix}.b_k"))?;
    let v = affine(s, h, &format!("{prefix}.w_v"), &format!("{prefix}.b_v"))?;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(num_heads);
    let mut maps = Vec::with_capacity(num_heads);
    for i in 0..num_heads {
        let g = &mut s.graph;
        let qh = g.slice_cols(q, i * dh, dh)?;
        let kh = g.slice_cols(k, i * dh, dh)?;
        let vh = g.slice_cols(v, i * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax(scores);
        heads.push(g.matmul(attn, vh)?);
        maps.push(attn);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        s.graph.concat_cols(&heads)?
    };
    let out = affine(s, cat, &format!("{prefix}.w_o"), &format!("{prefix}.b_o"))?;
    Ok((s.graph.add(x, out)?, maps))
}

pub fn mhsa_step<T: Real>(
    s: &mut Session<'_, T>,
    x: Var,
    prefix: &str,
    num_heads: usize,
    eps: f64,
) -> Result<Var> {
    mhsa_step_with_maps(s, x, prefix, num_heads, eps).map(|(y, _)| y)
}

/// `x + Conv(x)` with `Conv = pw2 ∘ swish ∘ LN ∘ depthwise ∘ GLU ∘ pw1 ∘ LN`.
pub fn conv_step<T: Real>(s: &mut Session<'_, T>, x: Var, prefix: &str, eps: f64) -> Result<Var> {
    let h = pre_norm(s, x, &format!("{prefix}.norm"), eps)?;
    let h = affine(s, h, &format!("{prefix}.w_pw1"), &format!("{prefix}.b_pw1"))?;
    let h = s.graph.glu(h)?;
    let kernel = s.param(&format!("{prefix}.w_dw"))?;
    let h = s.graph.depthwise_conv1d(h, kernel)?;
    let b_dw = s.param(&format!("{prefix}.b_dw"))?;
    let h = s.graph.add_bias(h, b_dw)?;
    let h = pre_norm(s, h, &format!("{prefix}.dw_norm"), eps)?;
    let h = s.graph.swish(h);
    let h = affine(s, h, &format!("{prefix}.w_pw2"), &format!("{prefix}.b_pw2"))?;
    s.graph.add(x, h)
}

/// One conformer block; `prefix` is e.g. `encoder.block03`.
pub fn block_forward<T: Real>(
    s: &mut Session<'_, T>,
    x: Var,
    prefix: &str,
    cfg: &EncoderConfig,
) -> Result<Var> {
    let eps = cfg.eps();
    let h = ffn_half_step(s, x, &format!("{prefix}.ffn1"), eps)?;
    let h = mhsa_step(s, h, &format!("{prefix}.mhsa"), cfg.num_heads, eps)?;
    let h = conv_step(s, h, &format!("{prefix}.conv"), eps)?;
    let h = ffn_half_step(s, h, &format!("{prefix}.ffn2"), eps)?;
    pre_norm(s, h, &format!("{prefix}.final_norm"), eps)
}

/// Stride-2, kernel-3 temporal convolution (`d -> d`) followed by swish.
pub fn downsample_step<T: Real>(s: &mut Session<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let t = s.value(x).shape()[0];
    if t < 2 {
        return Err(Error::Input(format!(
            "cannot down-sample {t} frame(s), need at least 2"
        )));
    }
    let cols = s.graph.unfold_time(x, 3, 2)?;
    let h = affine(s, cols, &format!("{prefix}.w"), &format!("{prefix}.b"))?;
    Ok(s.graph.swish(h))
}

/// Input projection followed by every block, down-sampling where configured.
pub fn encoder_forward<T: Real>(
    s: &mut Session<'_, T>,
    spec: &Spectrogram,
    cfg: &EncoderConfig,
) -> Result<BlockOutputs> {
    encoder_forward_until(s, spec, cfg, cfg.num_blocks)
}

/// Like [`encoder_forward`] but stops after block `last` (1-based).
pub fn encoder_forward_until<T: Real>(
    s: &mut Session<'_, T>,
    spec: &Spectrogram,
    cfg: &EncoderConfig,
    last: usize,
) -> Result<BlockOutputs> {
    if spec.frames() < cfg.min_frames() {
        return Err(Error::Input(format!(
            "utterance has {} frames, encoder needs at least {}",
            spec.frames(),
            cfg.min_frames()
        )));
    }
    if spec.bins() != cfg.input_bins {
        return Err(Error::Input(format!(
            "spectrogram has {} bins, encoder expects {}",
            spec.bins(),
            cfg.input_bins
        )));
    }
    let x = s.input(spec.values.cast());
    let input_proj = affine(s, x, "encoder.input.w", "encoder.input.b")?;
    let mut h = input_proj;
    let mut blocks = Vec::with_capacity(last);
    for i in 1..=last.min(cfg.num_blocks) {
        h = block_forward(s, h, &block_prefix(i), cfg)?;
        blocks.push(h);
        if cfg.downsample_blocks.contains(&i) && i < last {
            h = downsample_step(s, h, &downsample_prefix(i))?;
        }
    }
    Ok(BlockOutputs { input_proj, blocks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check_param, DEFAULT_STEP, DEFAULT_TOL};
    use crate::params::ParamStore;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn tiny(blocks: usize, down: &[usize]) -> EncoderConfig {
        EncoderConfig {
            num_blocks: blocks,
            model_dim: 8,
            num_heads: 2,
            ffn_expansion: 2,
            conv_kernel: 3,
            downsample_blocks: down.iter().copied().collect(),
            num_symbols: 4,
            input_bins: 5,
            eps_nano: 10_000,
        }
    }

    fn setup(cfg: &EncoderConfig, seed: u64) -> ParamStore<f64> {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut store = ParamStore::new();
        cfg.init_params(&mut store, &mut rng).unwrap();
        store
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn spec(frames: usize, bins: usize, seed: u64) -> Spectrogram {
        Spectrogram::new(random(&[frames, bins], seed).cast()).unwrap()
    }

    #[test]
    fn backbone_schedules() {
        let b1 = EncoderConfig::backbone1();
        assert_eq!(
            b1.frame_schedule(32),
            [32, 32, 32, 32, 16, 16, 16, 16, 8, 8, 8, 8]
        );
        assert_eq!(EncoderConfig::backbone2().frame_schedule(32), [32; 12]);
        assert_eq!(b1.min_frames(), 8);
        assert_eq!(b1.source_frame(12, 3), 12);
        assert_eq!(b1.source_frame(4, 3), 3);
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(2, &[]);
        c.num_heads = 3;
        assert!(c.validate().is_err());
        let c = tiny(2, &[2]);
        assert!(c.validate().is_err());
        let mut c = tiny(2, &[1]);
        c.conv_kernel = 4;
        assert!(c.validate().is_err());
        let meta = EncoderConfig::backbone1().to_meta();
        assert_eq!(
            EncoderConfig::from_meta(&meta).unwrap(),
            EncoderConfig::backbone1()
        );
    }

    #[test]
    fn zeroed_ffn_output_is_identity() {
        let cfg = tiny(1, &[]);
        let mut store = setup(&cfg, 1);
        store.set("encoder.block01.ffn1.w_out", Tensor::zeros([16, 8]));
        store.set("encoder.block01.ffn1.b_out", Tensor::zeros([8]));
        let mut s = Session::inference(&store);
        let x = s.input(random(&[4, 8], 2));
        let y = ffn_half_step(&mut s, x, "encoder.block01.ffn1", cfg.eps()).unwrap();
        assert_eq!(s.value(y), s.value(x));
    }

    #[test]
    fn ffn_residual_is_linear_in_output_projection() {
        let cfg = tiny(1, &[]);
        let store = setup(&cfg, 3);
        let mut doubled = store.clone();
        for p in ["encoder.block01.ffn1.w_out", "encoder.block01.ffn1.b_out"] {
            let t = doubled.get(p).unwrap().map(|v| 2.0 * v);
            doubled.set(p, t);
        }
        let input = random(&[5, 8], 4);
        let run = |st: &ParamStore<f64>| {
            let mut s = Session::inference(st);
            let x = s.input(input.clone());
            let y = ffn_half_step(&mut s, x, "encoder.block01.ffn1", cfg.eps()).unwrap();
            let v = s.value(y).to_f64_vec();
            v.iter().zip(input.data()).map(|(a, b)| a - b).collect::<Vec<_>>()
        };
        let (once, twice) = (run(&store), run(&doubled));
        for (a, b) in once.iter().zip(&twice) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ffn_gradient_matches_finite_differences() {
        let cfg = tiny(1, &[]);
        let store = setup(&cfg, 5);
        let input = random(&[3, 8], 6);
        let r = finite_diff_check_param(
            &store,
            "encoder.block01.ffn1.w_in",
            |s| {
                let x = s.input(input.clone());
                let y = ffn_half_step(s, x, "encoder.block01.ffn1", cfg.eps())?;
                Ok(s.graph.mean(y))
            },
            DEFAULT_STEP,
            DEFAULT_TOL,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn uniform_attention_adds_frame_mean() {
        // One head, zero query/key maps, identity value/output maps: every
        // frame attends uniformly, so the branch adds the mean of the
        // pre-normalized frames.
        let d = 4;
        let mut store = ParamStore::<f64>::new();
        let p = "m";
        store
            .insert(format!("{p}.norm.gamma"), Tensor::ones([d]))
            .unwrap();
        store
            .insert(format!("{p}.norm.beta"), Tensor::zeros([d]))
            .unwrap();
        for (m, w) in [
            ("q", Tensor::zeros([d, d])),
            ("k", Tensor::zeros([d, d])),
            ("v", Tensor::eye(d)),
            ("o", Tensor::eye(d)),
        ] {
            store.insert(format!("{p}.w_{m}"), w).unwrap();
            store.insert(format!("{p}.b_{m}"), Tensor::zeros([d])).unwrap();
        }
        let input = random(&[5, d], 9);
        let mut s = Session::inference(&store);
        let x = s.input(input.clone());
        let (y, maps) = mhsa_step_with_maps(&mut s, x, p, 1, 1e-5).unwrap();
        for &v in s.value(maps[0]).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
        let g1 = s.input(Tensor::ones([d]));
        let b0 = s.input(Tensor::zeros([d]));
        let normed = s.graph.layer_norm(x, g1, b0, 1e-5).unwrap();
        let n = s.value(normed).clone();
        let mut mean = vec![0.0; d];
        for t in 0..5 {
            for (c, m) in mean.iter_mut().enumerate() {
                *m += n.data()[t * d + c] / 5.0;
            }
        }
        let out = s.value(y);
        for t in 0..5 {
            for (c, m) in mean.iter().enumerate() {
                let want = input.data()[t * d + c] + m;
                assert!((out.data()[t * d + c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zeroed_mhsa_output_is_identity_and_rows_are_stochastic() {
        let cfg = tiny(1, &[]);
        let mut store = setup(&cfg, 11);
        let input = random(&[6, 8], 12);
        {
            let mut s = Session::inference(&store);
            let x = s.input(input.clone());
            let (_, maps) = mhsa_step_with_maps(&mut s, x, "encoder.block01.mhsa", 2, cfg.eps()).unwrap();
            for m in maps {
                for row in s.value(m).data().chunks(6) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                    assert!(row.iter().all(|&v| v >= 0.0));
                }
            }
        }
        store.set("encoder.block01.mhsa.w_o", Tensor::zeros([8, 8]));
        store.set("encoder.block01.mhsa.b_o", Tensor::zeros([8]));
        let mut s = Session::inference(&store);
        let x = s.input(input);
        let y = mhsa_step(&mut s, x, "encoder.block01.mhsa", 2, cfg.eps()).unwrap();
        assert_eq!(s.value(y), s.value(x));
    }

    #[test]
    fn conv_module_identities() {
        let cfg = tiny(1, &[]);
        let mut store = setup(&cfg, 13);
        let input = random(&[5, 8], 14);
        let mut s = Session::inference(&store);
        let z = s.input(Tensor::zeros([5, 8]));
        let y = conv_step(&mut s, z, "encoder.block01.conv", cfg.eps()).unwrap();
        assert!(s.value(y).data().iter().all(|&v| v == 0.0));

        store.set("encoder.block01.conv.w_pw2", Tensor::zeros([8, 8]));
        store.set("encoder.block01.conv.b_pw2", Tensor::zeros([8]));
        let mut s = Session::inference(&store);
        let x = s.input(input);
        let y = conv_step(&mut s, x, "encoder.block01.conv", cfg.eps()).unwrap();
        assert_eq!(s.value(y), s.value(x));
    }

    #[test]
    fn conv_gradient_matches_finite_differences() {
        let cfg = tiny(1, &[]);
        let store = setup(&cfg, 15);
        let input = random(&[5, 8], 16);
        for path in ["encoder.block01.conv.w_pw1", "encoder.block01.conv.w_dw"] {
            let r = finite_diff_check_param(
                &store,
                path,
                |s| {
                    let x = s.input(input.clone());
                    let y = conv_step(s, x, "encoder.block01.conv", cfg.eps())?;
                    Ok(s.graph.mean(y))
                },
                DEFAULT_STEP,
                DEFAULT_TOL,
            )
            .unwrap();
            assert!(r.passed(), "{path}: {r:?}");
        }
    }

    #[test]
    fn zeroed_branches_reduce_block_to_layer_norm() {
        let cfg = tiny(1, &[]);
        let mut store = setup(&cfg, 17);
        let p = "encoder.block01";
        for (w, b, shape) in [
            ("ffn1.w_out", "ffn1.b_out", [16, 8]),
            ("ffn2.w_out", "ffn2.b_out", [16, 8]),
            ("mhsa.w_o", "mhsa.b_o", [8, 8]),
            ("conv.w_pw2", "conv.b_pw2", [8, 8]),
        ] {
            store.set(format!("{p}.{w}"), Tensor::zeros(shape));
            store.set(format!("{p}.{b}"), Tensor::zeros([8]));
        }
        let mut s = Session::inference(&store);
        let x = s.input(random(&[6, 8], 18));
        let y = block_forward(&mut s, x, p, &cfg).unwrap();
        let g = s.param("encoder.block01.final_norm.gamma").unwrap();
        let b = s.param("encoder.block01.final_norm.beta").unwrap();
        let ln = s.graph.layer_norm(x, g, b, cfg.eps()).unwrap();
        assert_eq!(s.value(y), s.value(ln));
    }

    #[test]
    fn block_output_is_normalized() {
        let cfg = tiny(1, &[]);
        let store = setup(&cfg, 19);
        let mut s = Session::inference(&store);
        let x = s.input(random(&[7, 8], 20));
        let y = block_forward(&mut s, x, "encoder.block01", &cfg).unwrap();
        for row in s.value(y).data().chunks(8) {
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() <= 1e-6);
            assert!((var - 1.0).abs() <= 1e-3);
        }
    }

    #[test]
    fn block_gradient_matches_finite_differences() {
        let cfg = tiny(1, &[]);
        let store = setup(&cfg, 21);
        let input = random(&[3, 8], 22);
        for path in [
            "encoder.block01.ffn1.w_in",
            "encoder.block01.mhsa.w_q",
            "encoder.block01.mhsa.w_v",
            "encoder.block01.conv.w_dw",
            "encoder.block01.ffn2.w_out",
            "encoder.block01.final_norm.gamma",
        ] {
            let r = finite_diff_check_param(
                &store,
                path,
                |s| {
                    let x = s.input(input.clone());
                    let y = block_forward(s, x, "encoder.block01", &cfg)?;
                    // mean of a layer-normed output is ~0 for every input; weight it
                    let w = s.input(random(&[3, 8], 99));
                    let y = s.graph.mul(y, w)?;
                    Ok(s.graph.mean(y))
                },
                DEFAULT_STEP,
                DEFAULT_TOL,
            )
            .unwrap();
            assert!(r.passed(), "{path}: {r:?}");
        }
    }

    #[test]
    fn downsample_shapes_and_gradient() {
        let cfg = tiny(2, &[1]);
        let store = setup(&cfg, 23);
        for (t, want) in [(8, 4), (7, 4)] {
            let mut s = Session::inference(&store);
            let x = s.input(random(&[t, 8], 24));
            let y = downsample_step(&mut s, x, "encoder.down01").unwrap();
            assert_eq!(s.value(y).shape(), [want, 8]);
        }
        let mut s = Session::inference(&store);
        let x = s.input(random(&[1, 8], 25));
        assert!(matches!(
            downsample_step(&mut s, x, "encoder.down01"),
            Err(Error::Input(_))
        ));

        let input = random(&[5, 8], 26);
        let r = finite_diff_check_param(
            &store,
            "encoder.down01.w",
            |s| {
                let x = s.input(input.clone());
                let y = downsample_step(s, x, "encoder.down01")?;
                Ok(s.graph.mean(y))
            },
            DEFAULT_STEP,
            DEFAULT_TOL,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn encoder_single_block_base_case() {
        let cfg = tiny(1, &[]);
        let store = setup(&cfg, 27);
        let sp = spec(6, 5, 28);
        let mut s = Session::inference(&store);
        let out = encoder_forward(&mut s, &sp, &cfg).unwrap();
        assert_eq!(out.blocks.len(), 1);
        let manual = block_forward(&mut s, out.input_proj, "encoder.block01", &cfg).unwrap();
        assert_eq!(s.value(manual), s.value(out.ppg()));
    }

    #[test]
    fn encoder_lengths_follow_schedule() {
        let cfg = tiny(4, &[1, 3]);
        let store = setup(&cfg, 29);
        let sp = spec(13, 5, 30);
        let mut s = Session::inference(&store);
        let out = encoder_forward(&mut s, &sp, &cfg).unwrap();
        assert_eq!(out.lengths(&s), cfg.frame_schedule(13));
        assert_eq!(out.lengths(&s), [13, 7, 7, 4]);

        let short = spec(7, 5, 31);
        let mut s = Session::inference(&store);
        let err = encoder_forward(&mut s, &short, &cfg).unwrap_err().to_string();
        assert!(err.contains("at least 8"), "{err}");
    }

    #[test]
    fn encoder_is_deterministic() {
        let cfg = tiny(2, &[1]);
        let store = setup(&cfg, 32);
        let sp = spec(9, 5, 33);
        let run = || {
            let mut s = Session::inference(&store);
            let out = encoder_forward(&mut s, &sp, &cfg).unwrap();
            s.value(out.ppg()).clone()
        };
        let (a, b) = (run(), run());
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn whole_encoder_gradient() {
        let cfg = tiny(2, &[]);
        let store = setup(&cfg, 34);
        let sp = spec(6, 5, 35);
        let weights = random(&[6, 8], 36);
        for path in [
            "encoder.input.w",
            "encoder.block01.mhsa.w_k",
            "encoder.block02.conv.w_pw1",
        ] {
            let r = finite_diff_check_param(
                &store,
                path,
                |s| {
                    let out = encoder_forward(s, &sp, &cfg)?;
                    let w = s.input(weights.clone());
                    let y = s.graph.mul(out.ppg(), w)?;
                    Ok(s.graph.mean(y))
                },
                DEFAULT_STEP,
                DEFAULT_TOL,
            )
            .unwrap();
            assert!(r.passed(), "{path}: {r:?}");
        }
    }
}
