//! The full finite-difference suite: every differentiable op, each encoder and
//! fusion sub-module, and the whole encoder -> MMF -> CMA -> classifier chain.
//! Everything runs in f64 on shapes no larger than T=6, d=8, n=2, l=2.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::autograd::{Graph, Var};
use crate::encoder::{
    block_forward, conv_step, downsample_step, encoder_forward, ffn_half_step, mhsa_step, BlockOutputs,
    EncoderConfig, Spectrogram,
};
use crate::error::Result;
use crate::fusion::{classify_logits, cma_forward, head_forward, mmf_forward, FusionConfig};
use crate::gradcheck::{
    finite_diff_check, finite_diff_check_param, GradCheckReport, DEFAULT_STEP, DEFAULT_TOL,
};
use crate::params::{ParamStore, Session};
use crate::tensor::Tensor;

pub const SUITE_SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteCase {
    pub name: String,
    pub seed: u64,
    pub report: GradCheckReport,
}

impl SuiteCase {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

struct Cases {
    seed: u64,
    salt: u64,
    out: Vec<SuiteCase>,
}

impl Cases {
    fn random(&mut self, shape: &[usize]) -> Tensor<f64> {
        self.salt += 1;
        random(shape, self.seed.wrapping_mul(1_000_003) ^ self.salt)
    }

    fn push(&mut self, name: impl Into<String>, report: GradCheckReport) {
        self.out.push(SuiteCase {
            name: name.into(),
            seed: self.seed,
            report,
        });
    }

    /// Checks `d <R, f(x)> / dx` for a fixed random weighting `R`, so ops whose
    /// plain sum is constant (softmax, layer norm) are still exercised.
    fn op<F>(&mut self, name: &str, shape: &[usize], f: F) -> Result<()>
    where
        F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
    {
        let x = self.random(shape);
        let weight_seed = self.seed ^ 0x5EED ^ (self.salt << 8);
        let report = finite_diff_check(
            |g, x| {
                let y = f(g, x)?;
                let r = g.constant(random(g.shape(y), weight_seed));
                let p = g.mul(y, r)?;
                Ok(g.sum(p))
            },
            &x,
            DEFAULT_STEP,
            DEFAULT_TOL,
        )?;
        self.push(name, report);
        Ok(())
    }

    fn param<F>(&mut self, name: &str, store: &ParamStore<f64>, paths: &[&str], f: F) -> Result<()>
    where
        F: Fn(&mut Session<'_, f64>) -> Result<Var>,
    {
        for path in paths {
            let report = finite_diff_check_param(store, path, &f, DEFAULT_STEP, DEFAULT_TOL)?;
            self.push(format!("{name} / {path}"), report);
        }
        Ok(())
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("shape matches data")
}

/// Smallest encoder the suite uses: l=2, d=8, one halving after block 1.
pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        num_blocks: 2,
        model_dim: 8,
        num_heads: 2,
        ffn_expansion: 2,
        conv_kernel: 3,
        downsample_blocks: [1].into(),
        num_symbols: 4,
        input_bins: 5,
        eps_nano: 10_000,
    }
}

pub fn tiny_head() -> FusionConfig {
    FusionConfig {
        fuse_count: 2,
        num_tokens: 2,
        hidden: 6,
        ..Default::default()
    }
}

fn op_cases(c: &mut Cases) -> Result<()> {
    let b = c.random(&[4, 5]);
    c.op("matmul lhs", &[3, 4], |g, x| {
        let b = g.constant(b.clone());
        g.matmul(x, b)
    })?;
    let a = c.random(&[3, 4]);
    c.op("matmul rhs", &[4, 5], |g, x| {
        let a = g.constant(a.clone());
        g.matmul(a, x)
    })?;
    c.op("transpose", &[3, 4], |g, x| g.transpose(x))?;
    let (w, bias) = (c.random(&[4, 5]), c.random(&[5]));
    c.op("linear input", &[3, 4], |g, x| {
        let (w, b) = (g.constant(w.clone()), g.constant(bias.clone()));
        g.linear(x, w, b)
    })?;
    let other = c.random(&[3, 4]);
    c.op("add", &[3, 4], |g, x| {
        let o = g.constant(other.clone());
        g.add(x, o)
    })?;
    let m = c.random(&[3, 4]);
    c.op("add_bias bias", &[4], |g, x| {
        let m = g.constant(m.clone());
        g.add_bias(m, x)
    })?;
    c.op("mul", &[3, 4], |g, x| {
        let o = g.constant(other.clone());
        g.mul(x, o)
    })?;
    c.op("scale", &[3, 4], |g, x| Ok(g.scale(x, -1.7)))?;
    c.op("relu", &[4, 8], |g, x| Ok(g.relu(x)))?;
    c.op("swish", &[4, 8], |g, x| Ok(g.swish(x)))?;
    c.op("glu", &[3, 8], |g, x| g.glu(x))?;
    c.op("softmax", &[4, 8], |g, x| Ok(g.softmax(x)))?;

    let (gamma, beta, ln_x) = (c.random(&[8]), c.random(&[8]), c.random(&[4, 8]));
    c.op("layer_norm input", &[4, 8], |g, x| {
        let (ga, be) = (g.constant(gamma.clone()), g.constant(beta.clone()));
        g.layer_norm(x, ga, be, 1e-5)
    })?;
    c.op("layer_norm gamma", &[8], |g, x| {
        let (v, be) = (g.constant(ln_x.clone()), g.constant(beta.clone()));
        g.layer_norm(v, x, be, 1e-5)
    })?;
    c.op("layer_norm beta", &[8], |g, x| {
        let (v, ga) = (g.constant(ln_x.clone()), g.constant(gamma.clone()));
        g.layer_norm(v, ga, x, 1e-5)
    })?;

    let (kernel, kbias, image) = (c.random(&[3, 2, 3, 3]), c.random(&[3]), c.random(&[2, 4, 5]));
    c.op("conv2d input", &[2, 4, 5], |g, x| {
        let (k, b) = (g.constant(kernel.clone()), g.constant(kbias.clone()));
        g.conv2d(x, k, b)
    })?;
    c.op("conv2d kernel", &[3, 2, 3, 3], |g, x| {
        let (v, b) = (g.constant(image.clone()), g.constant(kbias.clone()));
        g.conv2d(v, x, b)
    })?;
    c.op("conv2d bias", &[3], |g, x| {
        let (v, k) = (g.constant(image.clone()), g.constant(kernel.clone()));
        g.conv2d(v, k, x)
    })?;

    let (dw, seq) = (c.random(&[4, 3]), c.random(&[6, 4]));
    c.op("depthwise_conv1d input", &[6, 4], |g, x| {
        let k = g.constant(dw.clone());
        g.depthwise_conv1d(x, k)
    })?;
    c.op("depthwise_conv1d kernel", &[4, 3], |g, x| {
        let v = g.constant(seq.clone());
        g.depthwise_conv1d(v, x)
    })?;

    c.op("unfold_time", &[7, 4], |g, x| g.unfold_time(x, 3, 2))?;
    c.op("slice_cols", &[3, 6], |g, x| g.slice_cols(x, 2, 3))?;
    let side = c.random(&[3, 2]);
    c.op("concat_cols", &[3, 4], |g, x| {
        let s = g.constant(side.clone());
        g.concat_cols(&[s, x, x])
    })?;
    let top = c.random(&[2, 4]);
    c.op("concat_rows", &[3, 4], |g, x| {
        let t = g.constant(top.clone());
        g.concat_rows(&[x, t, x])
    })?;
    c.op("gather_rows", &[4, 3], |g, x| g.gather_rows(x, &[0, 0, 3, 1, 3]))?;
    c.op("segment_mean", &[6, 4], |g, x| g.segment_mean(x, 2))?;
    let scaled = c.random(&[3, 4]);
    c.op("scale_by_element input", &[3, 4], |g, x| {
        let w = g.constant(Tensor::new([3], vec![0.3, -1.2, 0.8]).expect("3 weights"));
        g.scale_by_element(x, w, 1)
    })?;
    c.op("scale_by_element weights", &[3], |g, x| {
        let v = g.constant(scaled.clone());
        g.scale_by_element(v, x, 2)
    })?;
    c.op("stack", &[3, 4], |g, x| {
        let o = g.constant(other.clone());
        g.stack(&[x, o, x])
    })?;
    c.op("reshape", &[3, 4], |g, x| g.reshape(x, &[2, 6]))?;
    c.op("sum", &[3, 4], |g, x| Ok(g.sum(x)))?;
    c.op("mean", &[3, 4], |g, x| Ok(g.mean(x)))?;
    c.op("cross_entropy", &[2, 3], |g, x| g.cross_entropy(x, &[0, 2]))?;
    Ok(())
}

fn module_cases(c: &mut Cases) -> Result<()> {
    let enc = tiny_encoder();
    let head = tiny_head();
    let d = enc.model_dim;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(c.seed ^ 0xC0DE);
    let mut store = ParamStore::<f64>::new();
    enc.init_params(&mut store, &mut rng)?;
    head.init_params(&mut store, d, &mut rng)?;
    let eps = enc.eps();

    let x = c.random(&[5, d]);
    let weights = c.random(&[5, d]);
    // Weighted means keep layer-normed outputs from having a constant mean.
    let weighted = |s: &mut Session<'_, f64>, y: Var, w: &Tensor<f64>| -> Result<Var> {
        let w = s.input(w.clone());
        let p = s.graph.mul(y, w)?;
        Ok(s.graph.mean(p))
    };
    c.param(
        "ffn_half_step",
        &store,
        &["encoder.block01.ffn1.w_in", "encoder.block01.ffn1.norm.gamma"],
        |s| {
            let v = s.input(x.clone());
            let y = ffn_half_step(s, v, "encoder.block01.ffn1", eps)?;
            weighted(s, y, &weights)
        },
    )?;
    c.param(
        "mhsa_step",
        &store,
        &[
            "encoder.block01.mhsa.w_q",
            "encoder.block01.mhsa.w_k",
            "encoder.block01.mhsa.w_v",
            "encoder.block01.mhsa.w_o",
        ],
        |s| {
            let v = s.input(x.clone());
            let y = mhsa_step(s, v, "encoder.block01.mhsa", enc.num_heads, eps)?;
            weighted(s, y, &weights)
        },
    )?;
    c.param(
        "conv_step",
        &store,
        &[
            "encoder.block01.conv.w_pw1",
            "encoder.block01.conv.w_dw",
            "encoder.block01.conv.dw_norm.gamma",
            "encoder.block01.conv.w_pw2",
        ],
        |s| {
            let v = s.input(x.clone());
            let y = conv_step(s, v, "encoder.block01.conv", eps)?;
            weighted(s, y, &weights)
        },
    )?;
    c.param(
        "block_forward",
        &store,
        &[
            "encoder.block01.ffn1.w_in",
            "encoder.block01.mhsa.w_v",
            "encoder.block01.ffn2.w_out",
            "encoder.block01.final_norm.gamma",
        ],
        |s| {
            let v = s.input(x.clone());
            let y = block_forward(s, v, "encoder.block01", &enc)?;
            weighted(s, y, &weights)
        },
    )?;
    let ds_weights = c.random(&[3, d]);
    c.param(
        "downsample_step",
        &store,
        &["encoder.down01.w", "encoder.down01.b"],
        |s| {
            let v = s.input(x.clone());
            let y = downsample_step(s, v, "encoder.down01")?;
            weighted(s, y, &ds_weights)
        },
    )?;

    let spec = Spectrogram::new(c.random(&[6, enc.input_bins]).cast())?;
    let ppg_weights = c.random(&[3, d]);
    c.param(
        "encoder_forward",
        &store,
        &[
            "encoder.input.w",
            "encoder.block01.conv.w_dw",
            "encoder.down01.w",
            "encoder.block02.mhsa.w_k",
        ],
        |s| {
            let b = encoder_forward(s, &spec, &enc)?;
            weighted(s, b.ppg(), &ppg_weights)
        },
    )?;

    let block_inputs = [c.random(&[6, d]), c.random(&[3, d])];
    let bind = |s: &mut Session<'_, f64>| -> BlockOutputs {
        let blocks: Vec<Var> = block_inputs.iter().map(|t| s.input(t.clone())).collect();
        BlockOutputs {
            input_proj: blocks[0],
            blocks,
        }
    };
    let token_weights = c.random(&[2, d]);
    c.param(
        "mmf_forward",
        &store,
        &["mmf.block_logits", "mmf.conv.kernel", "mmf.conv.bias"],
        |s| {
            let b = bind(s);
            let e = mmf_forward(s, &b, &head)?;
            weighted(s, e, &token_weights)
        },
    )?;
    let tokens = c.random(&[2, d]);
    c.param("cma_forward", &store, &["cma.w_q", "cma.w_k", "cma.w_v"], |s| {
        let b = bind(s);
        let e = s.input(tokens.clone());
        let out = cma_forward(s, e, b.ppg())?;
        weighted(s, out.o_att, &token_weights)
    })?;
    c.param(
        "classify_logits",
        &store,
        &["classifier.hidden.w", "classifier.hidden.b", "classifier.out.w"],
        |s| {
            let e = s.input(tokens.clone());
            let logits = classify_logits(s, e)?;
            s.graph.cross_entropy(logits, &[3])
        },
    )?;
    c.param(
        "head_forward",
        &store,
        &["mmf.block_logits", "cma.w_q", "classifier.out.b"],
        |s| {
            let b = bind(s);
            let h = head_forward(s, &b, &head)?;
            s.graph.cross_entropy(h.logits, &[1])
        },
    )?;
    c.param(
        "encoder+mmf+cma+classifier",
        &store,
        &[
            "encoder.input.w",
            "encoder.block01.mhsa.w_q",
            "encoder.down01.w",
            "encoder.block02.conv.w_pw1",
            "mmf.conv.kernel",
            "cma.w_q",
            "cma.w_k",
            "cma.w_v",
            "classifier.hidden.w",
        ],
        |s| {
            let b = encoder_forward(s, &spec, &enc)?;
            let h = head_forward(s, &b, &head)?;
            s.graph.cross_entropy(h.logits, &[2])
        },
    )?;
    Ok(())
}

/// Runs every case for each seed.
pub fn gradient_suite(seeds: &[u64]) -> Result<Vec<SuiteCase>> {
    let mut all = Vec::new();
    for &seed in seeds {
        let mut c = Cases {
            seed,
            salt: 0,
            out: Vec::new(),
        };
        op_cases(&mut c)?;
        module_cases(&mut c)?;
        all.extend(c.out);
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_seed_passes() {
        let cases = gradient_suite(&[7]).unwrap();
        assert!(cases.len() > 40);
        for c in &cases {
            assert!(c.passed(), "{}: {:?}", c.name, c.report);
        }
    }
}
