//! The conditional noise predictor and its hand-derived gradients.
//!
//! Architecture (channel-major planes, all activations cached for backward):
//!   sinusoidal t-embedding (d_time) -> 2-layer MLP -> d_embed
//!   + condition embedding (d_embed)                       = emb
//!   conv 3x3 (1 -> ch)        -> FiLM(emb) -> ReLU
//!   conv 3x3 stride 2 (ch -> 2ch) -> FiLM(emb) -> ReLU
//!   tconv 6x6 stride 2 pad 2 (2ch -> ch) -> FiLM(emb) -> ReLU
//!   conv 3x3 (ch -> 1), zero-initialized
//!
//! The trainable label-embedding table (4 layout + 3 content + 4 material
//! rows plus the null row) lives in the same flat parameter vector as the
//! network weights, so one optimizer state covers everything and checkpoint
//! serialization is a straight walk of the layout.
//!
//! All convolutions run as im2col plus an outer-product GEMM whose inner
//! loops are contiguous axpy/dot runs over full output planes; the stride-2
//! transposed conv decomposes into four output-parity phases that each
//! reduce to a 3x3 conv over the same patch matrix.
//!
//! Everything is generic over [`Scalar`]: f32 is the production width, f64
//! instantiates the identical code for finite-difference gradient checks.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::synth::AttributeLabel;
use crate::tensor::Tensor;

pub const TCONV_K: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Image side length (even).
    pub img: usize,
    /// Channels after the first conv; the middle layer uses 2x this.
    pub ch: usize,
    /// Condition / combined embedding dimension.
    pub d_embed: usize,
    /// Sinusoidal timestep embedding dimension (even).
    pub d_time: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { img: 32, ch: 32, d_embed: 64, d_time: 32 }
    }
}

impl ModelConfig {
    /// Small instantiation for finite-difference gradient checks.
    pub fn reduced() -> Self {
        Self { img: 8, ch: 8, d_embed: 16, d_time: 8 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.img < 4 || self.img % 2 != 0 {
            return Err(Error::invalid("img must be even and >= 4"));
        }
        if self.ch == 0 || self.d_embed == 0 || self.d_time == 0 || self.d_time % 2 != 0 {
            return Err(Error::invalid("bad model dims"));
        }
        Ok(())
    }

    /// Named parameter blocks in serialization order.
    pub fn param_entries(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (c, d, dt) = (self.ch, self.d_embed, self.d_time);
        let c2 = 2 * c;
        vec![
            ("time_mlp.w1", vec![d, dt]),
            ("time_mlp.b1", vec![d]),
            ("time_mlp.w2", vec![d, d]),
            ("time_mlp.b2", vec![d]),
            ("conv1.w", vec![c, 1, 3, 3]),
            ("conv1.b", vec![c]),
            ("film1.w", vec![2 * c, d]),
            ("film1.b", vec![2 * c]),
            ("conv2.w", vec![c2, c, 3, 3]),
            ("conv2.b", vec![c2]),
            ("film2.w", vec![2 * c2, d]),
            ("film2.b", vec![2 * c2]),
            ("tconv.w", vec![c2, c, TCONV_K, TCONV_K]),
            ("tconv.b", vec![c]),
            ("film3.w", vec![2 * c, d]),
            ("film3.b", vec![2 * c]),
            ("conv_out.w", vec![1, c, 3, 3]),
            ("conv_out.b", vec![1]),
            ("embed.layout", vec![4, d]),
            ("embed.content", vec![3, d]),
            ("embed.material", vec![4, d]),
            ("embed.null", vec![d]),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.param_entries().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Flat-vector offsets of each parameter block.
#[derive(Debug, Clone)]
pub(crate) struct Offsets {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub conv1_w: usize,
    pub conv1_b: usize,
    pub film1_w: usize,
    pub film1_b: usize,
    pub conv2_w: usize,
    pub conv2_b: usize,
    pub film2_w: usize,
    pub film2_b: usize,
    pub tconv_w: usize,
    pub tconv_b: usize,
    pub film3_w: usize,
    pub film3_b: usize,
    pub conv_out_w: usize,
    pub conv_out_b: usize,
    pub embed_layout: usize,
    pub embed_content: usize,
    pub embed_material: usize,
    pub embed_null: usize,
    pub total: usize,
}

impl Offsets {
    fn new(cfg: &ModelConfig) -> Self {
        let entries = cfg.param_entries();
        let mut pos = std::collections::HashMap::new();
        let mut off = 0usize;
        for (name, shape) in &entries {
            pos.insert(*name, off);
            off += shape.iter().product::<usize>();
        }
        let g = |n: &str| pos[n];
        Offsets {
            w1: g("time_mlp.w1"),
            b1: g("time_mlp.b1"),
            w2: g("time_mlp.w2"),
            b2: g("time_mlp.b2"),
            conv1_w: g("conv1.w"),
            conv1_b: g("conv1.b"),
            film1_w: g("film1.w"),
            film1_b: g("film1.b"),
            conv2_w: g("conv2.w"),
            conv2_b: g("conv2.b"),
            film2_w: g("film2.w"),
            film2_b: g("film2.b"),
            tconv_w: g("tconv.w"),
            tconv_b: g("tconv.b"),
            film3_w: g("film3.w"),
            film3_b: g("film3.b"),
            conv_out_w: g("conv_out.w"),
            conv_out_b: g("conv_out.b"),
            embed_layout: g("embed.layout"),
            embed_content: g("embed.content"),
            embed_material: g("embed.material"),
            embed_null: g("embed.null"),
            total: off,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Denoiser<S: Scalar = f32> {
    pub cfg: ModelConfig,
    pub params: Vec<S>,
    pub(crate) off: Offsets,
}

/// Scratch for one forward/backward pair; reuse across calls to avoid
/// allocation in hot loops. The im2col matrices built by `forward` are
/// consumed again by `backward`.
#[derive(Debug, Clone)]
pub struct Workspace<S: Scalar> {
    cfg: ModelConfig,
    // forward
    te: Vec<S>,
    h1pre: Vec<S>,
    h1: Vec<S>,
    emb: Vec<S>,
    f1: Vec<S>,
    f2: Vec<S>,
    f3: Vec<S>,
    a1: Vec<S>,
    r1: Vec<S>,
    a2: Vec<S>,
    r2: Vec<S>,
    a3: Vec<S>,
    r3: Vec<S>,
    pub out: Vec<S>,
    // im2col caches: x1 over the input image, x2 over r1 (stride 2),
    // x3 over r2 (shared by all four tconv phases), x4 over r3
    x1: Vec<S>,
    x2: Vec<S>,
    x3: Vec<S>,
    x4: Vec<S>,
    // per-phase tconv weights, rebuilt from params on each forward
    wph: Vec<S>,
    // backward
    pub g_out: Vec<S>,
    g_r3: Vec<S>,
    g_r2: Vec<S>,
    g_r1: Vec<S>,
    gph: Vec<S>,
    gx_mid: Vec<S>,
    gx_big: Vec<S>,
    g_emb: Vec<S>,
    g_f: Vec<S>,
    g_h1: Vec<S>,
}

impl<S: Scalar> Workspace<S> {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (i, c, d, dt) = (cfg.img, cfg.ch, cfg.d_embed, cfg.d_time);
        let i2 = i / 2;
        let c2 = 2 * c;
        let (n, n2) = (i * i, i2 * i2);
        Workspace {
            cfg: *cfg,
            te: vec![S::ZERO; dt],
            h1pre: vec![S::ZERO; d],
            h1: vec![S::ZERO; d],
            emb: vec![S::ZERO; d],
            f1: vec![S::ZERO; 2 * c],
            f2: vec![S::ZERO; 2 * c2],
            f3: vec![S::ZERO; 2 * c],
            a1: vec![S::ZERO; c * n],
            r1: vec![S::ZERO; c * n],
            a2: vec![S::ZERO; c2 * n2],
            r2: vec![S::ZERO; c2 * n2],
            a3: vec![S::ZERO; c * n],
            r3: vec![S::ZERO; c * n],
            out: vec![S::ZERO; n],
            x1: vec![S::ZERO; 9 * n],
            x2: vec![S::ZERO; c * 9 * n2],
            x3: vec![S::ZERO; c2 * 9 * n2],
            x4: vec![S::ZERO; c * 9 * n],
            wph: vec![S::ZERO; 4 * c * c2 * 9],
            g_out: vec![S::ZERO; n],
            g_r3: vec![S::ZERO; c * n],
            g_r2: vec![S::ZERO; c2 * n2],
            g_r1: vec![S::ZERO; c * n],
            gph: vec![S::ZERO; c * n2],
            gx_mid: vec![S::ZERO; c2 * 9 * n2],
            gx_big: vec![S::ZERO; c * 9 * n],
            g_emb: vec![S::ZERO; d],
            g_f: vec![S::ZERO; 2 * c2.max(c)],
            g_h1: vec![S::ZERO; d],
        }
    }
}

impl Denoiser<f32> {
    /// Random initialization; the output conv starts at zero so the initial
    /// prediction is exactly zero.
    pub fn init(cfg: ModelConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let off = Offsets::new(&cfg);
        let mut params = vec![0.0f32; off.total];
        let (c, d, dt) = (cfg.ch, cfg.d_embed, cfg.d_time);
        let c2 = 2 * c;
        let mut fill = |range: std::ops::Range<usize>, std: f32, p: &mut Vec<f32>| {
            for v in &mut p[range] {
                *v = rng.next_gaussian() * std;
            }
        };
        let he = |fan_in: usize| (2.0 / fan_in as f32).sqrt();
        fill(off.w1..off.w1 + d * dt, he(dt), &mut params);
        fill(off.w2..off.w2 + d * d, he(d), &mut params);
        fill(off.conv1_w..off.conv1_w + c * 9, he(9), &mut params);
        fill(off.conv2_w..off.conv2_w + c2 * c * 9, he(c * 9), &mut params);
        fill(
            off.tconv_w..off.tconv_w + c2 * c * TCONV_K * TCONV_K,
            he(c2 * TCONV_K * TCONV_K / 4),
            &mut params,
        );
        // small FiLM weights keep (1+gamma) near one at the start
        fill(off.film1_w..off.film1_w + 2 * c * d, 0.05, &mut params);
        fill(off.film2_w..off.film2_w + 2 * c2 * d, 0.05, &mut params);
        fill(off.film3_w..off.film3_w + 2 * c * d, 0.05, &mut params);
        // conv_out stays zero; label embeddings start small, null stays zero
        fill(off.embed_layout..off.embed_layout + 4 * d, 0.1, &mut params);
        fill(off.embed_content..off.embed_content + 3 * d, 0.1, &mut params);
        fill(off.embed_material..off.embed_material + 4 * d, 0.1, &mut params);
        Ok(Denoiser { cfg, params, off })
    }

    pub fn to_f64(&self) -> Denoiser<f64> {
        Denoiser {
            cfg: self.cfg,
            params: self.params.iter().map(|&v| v as f64).collect(),
            off: self.off.clone(),
        }
    }

    /// Spec-facing wrapper: predict noise for a [H,W] image tensor.
    pub fn predict_eps(&self, x_t: &Tensor, t: usize, c: &[f32]) -> Result<Tensor> {
        let i = self.cfg.img;
        if x_t.shape() != [i, i] {
            return Err(Error::ShapeMismatch { expected: vec![i, i], got: x_t.shape().to_vec() });
        }
        if c.len() != self.cfg.d_embed {
            return Err(Error::DimMismatch { expected: self.cfg.d_embed, got: c.len() });
        }
        let mut ws = Workspace::new(&self.cfg);
        self.forward(x_t.data(), t, c, &mut ws);
        Tensor::new(vec![i, i], ws.out.clone())
    }
}

impl<S: Scalar> Denoiser<S> {
    pub fn from_params(cfg: ModelConfig, params: Vec<S>) -> Result<Self> {
        cfg.validate()?;
        let off = Offsets::new(&cfg);
        if params.len() != off.total {
            return Err(Error::DimMismatch { expected: off.total, got: params.len() });
        }
        Ok(Denoiser { cfg, params, off })
    }

    pub fn param_count(&self) -> usize {
        self.off.total
    }

    fn p(&self, start: usize, len: usize) -> &[S] {
        &self.params[start..start + len]
    }

    pub fn null_embedding(&self) -> &[S] {
        self.p(self.off.embed_null, self.cfg.d_embed)
    }

    /// Sum of the three per-factor embedding rows.
    pub fn label_embedding(&self, label: AttributeLabel) -> Vec<S> {
        let d = self.cfg.d_embed;
        let l = self.p(self.off.embed_layout + label.layout.index() * d, d);
        let c = self.p(self.off.embed_content + label.content.index() * d, d);
        let m = self.p(self.off.embed_material + label.material.index() * d, d);
        (0..d).map(|i| l[i] + c[i] + m[i]).collect()
    }

    /// Offsets of the three table rows for routing condition gradients.
    pub(crate) fn label_row_offsets(&self, label: AttributeLabel) -> [usize; 3] {
        let d = self.cfg.d_embed;
        [
            self.off.embed_layout + label.layout.index() * d,
            self.off.embed_content + label.content.index() * d,
            self.off.embed_material + label.material.index() * d,
        ]
    }

    pub(crate) fn null_row_offset(&self) -> usize {
        self.off.embed_null
    }

    /// Full forward pass; activations land in `ws`, prediction in `ws.out`.
    pub fn forward(&self, x: &[S], t: usize, c: &[S], ws: &mut Workspace<S>) {
        let cfg = &self.cfg;
        debug_assert_eq!(ws.cfg, *cfg);
        let (i, ch, d, dt) = (cfg.img, cfg.ch, cfg.d_embed, cfg.d_time);
        let i2 = i / 2;
        let c2 = 2 * ch;
        let (n, n2) = (i * i, i2 * i2);
        assert_eq!(x.len(), n);
        assert_eq!(c.len(), d);
        let o = &self.off;

        sinusoid(t, &mut ws.te);
        linear(self.p(o.w1, d * dt), self.p(o.b1, d), &ws.te, &mut ws.h1pre, d, dt);
        relu(&ws.h1pre, &mut ws.h1);
        linear(self.p(o.w2, d * d), self.p(o.b2, d), &ws.h1, &mut ws.emb, d, d);
        for k in 0..d {
            ws.emb[k] += c[k];
        }

        // conv1
        im2col_3x3(x, &mut ws.x1, 1, i, i);
        matmul_axpy(self.p(o.conv1_w, ch * 9), &ws.x1, &mut ws.a1, ch, 9, n, Some(self.p(o.conv1_b, ch)));
        linear(self.p(o.film1_w, 2 * ch * d), self.p(o.film1_b, 2 * ch), &ws.emb, &mut ws.f1, 2 * ch, d);
        film_relu(&ws.a1, &ws.f1, &mut ws.r1, ch, n);

        // conv2 (stride 2)
        im2col_3x3_s2(&ws.r1, &mut ws.x2, ch, i, i);
        matmul_axpy(
            self.p(o.conv2_w, c2 * ch * 9),
            &ws.x2,
            &mut ws.a2,
            c2,
            ch * 9,
            n2,
            Some(self.p(o.conv2_b, c2)),
        );
        linear(self.p(o.film2_w, 2 * c2 * d), self.p(o.film2_b, 2 * c2), &ws.emb, &mut ws.f2, 2 * c2, d);
        film_relu(&ws.a2, &ws.f2, &mut ws.r2, c2, n2);

        // tconv: four phase convs over one shared patch matrix
        im2col_3x3(&ws.r2, &mut ws.x3, c2, i2, i2);
        build_phase_weights(self.p(o.tconv_w, c2 * ch * TCONV_K * TCONV_K), &mut ws.wph, c2, ch);
        let kk = c2 * 9;
        for ph in 0..4 {
            let wp = &ws.wph[ph * ch * kk..(ph + 1) * ch * kk];
            matmul_axpy(wp, &ws.x3, &mut ws.gph, ch, kk, n2, None);
            scatter_phase(&ws.gph, &mut ws.a3, ph, ch, i2, i2);
        }
        let bt = self.p(o.tconv_b, ch);
        for oc in 0..ch {
            let b = bt[oc];
            for v in ws.a3[oc * n..(oc + 1) * n].iter_mut() {
                *v += b;
            }
        }
        linear(self.p(o.film3_w, 2 * ch * d), self.p(o.film3_b, 2 * ch), &ws.emb, &mut ws.f3, 2 * ch, d);
        film_relu(&ws.a3, &ws.f3, &mut ws.r3, ch, n);

        // conv_out
        im2col_3x3(&ws.r3, &mut ws.x4, ch, i, i);
        matmul_axpy(
            self.p(o.conv_out_w, ch * 9),
            &ws.x4,
            &mut ws.out,
            1,
            ch * 9,
            n,
            Some(self.p(o.conv_out_b, 1)),
        );
    }

    /// Backward from `ws.g_out`; accumulates parameter gradients into `grads`
    /// (same layout as `params`) and the condition gradient into `g_c`.
    /// Requires the activations of the matching `forward` call in `ws`.
    pub fn backward(&self, x: &[S], c: &[S], ws: &mut Workspace<S>, grads: &mut [S], g_c: &mut [S]) {
        let cfg = &self.cfg;
        let (i, ch, d, dt) = (cfg.img, cfg.ch, cfg.d_embed, cfg.d_time);
        let i2 = i / 2;
        let c2 = 2 * ch;
        let (n, n2) = (i * i, i2 * i2);
        let _ = (x, c);
        assert_eq!(grads.len(), self.off.total);
        assert_eq!(g_c.len(), d);
        let o = &self.off;

        // conv_out: gw = g_out . x4^T; g_r3 = W^T g_out via col2im
        {
            let (gw, gb) = grads[o.conv_out_w..o.conv_out_b + 1].split_at_mut(ch * 9);
            matmul_dot_acc(&ws.g_out, &ws.x4, gw, 1, ch * 9, n);
            gb[0] += sum(&ws.g_out);
            ws.gx_big.fill(S::ZERO);
            matmul_axpy_transposed(self.p(o.conv_out_w, ch * 9), &ws.g_out, &mut ws.gx_big, 1, ch * 9, n);
            ws.g_r3.fill(S::ZERO);
            col2im_3x3(&ws.gx_big, &mut ws.g_r3, ch, i, i);
        }

        // film3 + relu (g_r3 -> g_a3 in place)
        film_relu_back(&ws.a3, &ws.r3, &ws.f3, &mut ws.g_r3, &mut ws.g_f[..2 * ch], ch, n);
        {
            let (gw, gb) = grads[o.film3_w..o.film3_b + 2 * ch].split_at_mut(2 * ch * d);
            linear_back(self.p(o.film3_w, 2 * ch * d), &ws.emb, &ws.g_f[..2 * ch], gw, gb, &mut ws.g_emb, 2 * ch, d, false);
        }

        // tconv
        {
            let kk = c2 * 9;
            let (gw_t, gb_t) =
                grads[o.tconv_w..o.tconv_b + ch].split_at_mut(c2 * ch * TCONV_K * TCONV_K);
            for oc in 0..ch {
                gb_t[oc] += sum(&ws.g_r3[oc * n..(oc + 1) * n]);
            }
            ws.gx_mid.fill(S::ZERO);
            let mut gwp = vec![S::ZERO; ch * kk];
            for ph in 0..4 {
                gather_phase(&ws.g_r3, &mut ws.gph, ph, ch, i2, i2);
                gwp.fill(S::ZERO);
                matmul_dot_acc(&ws.gph, &ws.x3, &mut gwp, ch, kk, n2);
                scatter_phase_weights(&gwp, gw_t, ph, c2, ch);
                let wp = &ws.wph[ph * ch * kk..(ph + 1) * ch * kk];
                matmul_axpy_transposed(wp, &ws.gph, &mut ws.gx_mid, ch, kk, n2);
            }
            ws.g_r2.fill(S::ZERO);
            col2im_3x3(&ws.gx_mid, &mut ws.g_r2, c2, i2, i2);
        }

        // film2 + relu
        film_relu_back(&ws.a2, &ws.r2, &ws.f2, &mut ws.g_r2, &mut ws.g_f[..2 * c2], c2, n2);
        {
            let (gw, gb) = grads[o.film2_w..o.film2_b + 2 * c2].split_at_mut(2 * c2 * d);
            linear_back(self.p(o.film2_w, 2 * c2 * d), &ws.emb, &ws.g_f[..2 * c2], gw, gb, &mut ws.g_emb, 2 * c2, d, true);
        }

        // conv2
        {
            let (gw, gb) = grads[o.conv2_w..o.conv2_b + c2].split_at_mut(c2 * ch * 9);
            matmul_dot_acc(&ws.g_r2, &ws.x2, gw, c2, ch * 9, n2);
            for oc in 0..c2 {
                gb[oc] += sum(&ws.g_r2[oc * n2..(oc + 1) * n2]);
            }
            let gx2 = &mut ws.gx_mid[..ch * 9 * n2];
            gx2.fill(S::ZERO);
            matmul_axpy_transposed(self.p(o.conv2_w, c2 * ch * 9), &ws.g_r2, gx2, c2, ch * 9, n2);
            ws.g_r1.fill(S::ZERO);
            col2im_3x3_s2(gx2, &mut ws.g_r1, ch, i, i);
        }

        // film1 + relu
        film_relu_back(&ws.a1, &ws.r1, &ws.f1, &mut ws.g_r1, &mut ws.g_f[..2 * ch], ch, n);
        {
            let (gw, gb) = grads[o.film1_w..o.film1_b + 2 * ch].split_at_mut(2 * ch * d);
            linear_back(self.p(o.film1_w, 2 * ch * d), &ws.emb, &ws.g_f[..2 * ch], gw, gb, &mut ws.g_emb, 2 * ch, d, true);
        }

        // conv1 (input gradient not needed)
        {
            let (gw, gb) = grads[o.conv1_w..o.conv1_b + ch].split_at_mut(ch * 9);
            matmul_dot_acc(&ws.g_r1, &ws.x1, gw, ch, 9, n);
            for oc in 0..ch {
                gb[oc] += sum(&ws.g_r1[oc * n..(oc + 1) * n]);
            }
        }

        // emb = time_mlp(t) + c
        for k in 0..d {
            g_c[k] += ws.g_emb[k];
        }
        {
            let (gw, gb) = grads[o.w2..o.b2 + d].split_at_mut(d * d);
            linear_back(self.p(o.w2, d * d), &ws.h1, &ws.g_emb, gw, gb, &mut ws.g_h1, d, d, false);
        }
        for k in 0..d {
            if !ws.h1pre[k].is_positive_val() {
                ws.g_h1[k] = S::ZERO;
            }
        }
        let mut sink = vec![S::ZERO; dt];
        let (gw, gb) = grads[o.w1..o.b1 + d].split_at_mut(d * dt);
        linear_back(self.p(o.w1, d * dt), &ws.te, &ws.g_h1, gw, gb, &mut sink, d, dt, false);
    }
}

/// Write a checkpoint: every parameter block as a named array plus the
/// model dims and noise-schedule metadata.
pub fn save_checkpoint(
    model: &Denoiser<f32>,
    sched: &crate::schedule::NoiseSchedule,
    path: impl AsRef<std::path::Path>,
) -> Result<()> {
    use crate::fileio::psar::PsarFile;
    let mut f = PsarFile::new();
    let mut off = 0usize;
    for (name, shape) in model.cfg.param_entries() {
        let len: usize = shape.iter().product();
        let data = model.params[off..off + len].to_vec();
        f.push(name, Tensor::new(shape, data)?)?;
        off += len;
    }
    f.push_scalar("meta.img", model.cfg.img as f32)?;
    f.push_scalar("meta.ch", model.cfg.ch as f32)?;
    f.push_scalar("meta.d_embed", model.cfg.d_embed as f32)?;
    f.push_scalar("meta.d_time", model.cfg.d_time as f32)?;
    f.push_scalar("meta.T", sched.t_steps as f32)?;
    f.push_scalar("meta.beta_min", sched.beta_min)?;
    f.push_scalar("meta.beta_max", sched.beta_max)?;
    f.save(path)
}

pub fn load_checkpoint(
    path: impl AsRef<std::path::Path>,
) -> Result<(Denoiser<f32>, crate::schedule::NoiseSchedule)> {
    use crate::fileio::psar::PsarFile;
    let f = PsarFile::load(path)?;
    let cfg = ModelConfig {
        img: f.scalar("meta.img")? as usize,
        ch: f.scalar("meta.ch")? as usize,
        d_embed: f.scalar("meta.d_embed")? as usize,
        d_time: f.scalar("meta.d_time")? as usize,
    };
    cfg.validate()?;
    let mut params = Vec::with_capacity(cfg.param_count());
    for (name, shape) in cfg.param_entries() {
        let t = f.require(name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch { expected: shape, got: t.shape().to_vec() });
        }
        params.extend_from_slice(t.data());
    }
    let sched = crate::schedule::make_schedule(
        f.scalar("meta.T")? as usize,
        f.scalar("meta.beta_min")?,
        f.scalar("meta.beta_max")?,
    )?;
    Ok((Denoiser::from_params(cfg, params)?, sched))
}

/// te[2k] = sin(t * w_k), te[2k+1] = cos(t * w_k), w_k = 10000^(-k/half).
fn sinusoid<S: Scalar>(t: usize, out: &mut [S]) {
    let half = out.len() / 2;
    for k in 0..half {
        let freq = (10_000.0f64).powf(-(k as f64) / half as f64);
        let ang = t as f64 * freq;
        out[2 * k] = S::from_f64(ang.sin());
        out[2 * k + 1] = S::from_f64(ang.cos());
    }
}

fn relu<S: Scalar>(src: &[S], dst: &mut [S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = if s.is_positive_val() { s } else { S::ZERO };
    }
}

fn sum<S: Scalar>(xs: &[S]) -> S {
    let mut acc = [S::ZERO; 8];
    for chunk in xs.chunks_exact(8) {
        for k in 0..8 {
            acc[k] += chunk[k];
        }
    }
    let mut s = S::ZERO;
    for &v in &xs[xs.len() - xs.len() % 8..] {
        s += v;
    }
    for v in acc {
        s += v;
    }
    s
}

/// out[x] += a * src[x]
#[inline]
fn axpy<S: Scalar>(out: &mut [S], a: S, src: &[S]) {
    for (o, &s) in out.iter_mut().zip(src) {
        *o += a * s;
    }
}

#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [S::ZERO; 8];
    for (ca, cb) in a.chunks_exact(8).zip(b.chunks_exact(8)) {
        for k in 0..8 {
            acc[k] += ca[k] * cb[k];
        }
    }
    let rem = n - n % 8;
    let mut s = S::ZERO;
    for (x, y) in a[rem..].iter().zip(&b[rem..]) {
        s += *x * *y;
    }
    for v in acc {
        s += v;
    }
    s
}

/// C[m] = bias[m] (or 0), then C[m] += sum_k A[m,k] * B[k]; rows length n.
fn matmul_axpy<S: Scalar>(
    a: &[S],
    b: &[S],
    c: &mut [S],
    m: usize,
    k: usize,
    n: usize,
    bias: Option<&[S]>,
) {
    for mi in 0..m {
        let crow = &mut c[mi * n..(mi + 1) * n];
        match bias {
            Some(bs) => crow.fill(bs[mi]),
            None => crow.fill(S::ZERO),
        }
        let arow = &a[mi * k..(mi + 1) * k];
        for (ki, &av) in arow.iter().enumerate() {
            if av.to_f64() != 0.0 {
                axpy(crow, av, &b[ki * n..(ki + 1) * n]);
            }
        }
    }
}

/// C[k] += sum_m A[m,k] * B[m]; the A^T product used for input gradients.
fn matmul_axpy_transposed<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for mi in 0..m {
        let brow = &b[mi * n..(mi + 1) * n];
        let arow = &a[mi * k..(mi + 1) * k];
        for (ki, &av) in arow.iter().enumerate() {
            if av.to_f64() != 0.0 {
                axpy(&mut c[ki * n..(ki + 1) * n], av, brow);
            }
        }
    }
}

/// GW[m,k] += dot(G[m], X[k]) over rows of length n.
fn matmul_dot_acc<S: Scalar>(g: &[S], x: &[S], gw: &mut [S], m: usize, k: usize, n: usize) {
    for mi in 0..m {
        let grow = &g[mi * n..(mi + 1) * n];
        let gwrow = &mut gw[mi * k..(mi + 1) * k];
        for ki in 0..k {
            gwrow[ki] += dot(grow, &x[ki * n..(ki + 1) * n]);
        }
    }
}

/// r = relu(a * (1 + gamma[ch]) + beta[ch]); f = [gamma; beta].
fn film_relu<S: Scalar>(a: &[S], f: &[S], r: &mut [S], ch: usize, plane: usize) {
    let (gamma, beta) = f.split_at(ch);
    for c in 0..ch {
        let scale = S::ONE + gamma[c];
        let shift = beta[c];
        let ap = &a[c * plane..(c + 1) * plane];
        let rp = &mut r[c * plane..(c + 1) * plane];
        for (rv, &av) in rp.iter_mut().zip(ap) {
            let m = av * scale + shift;
            *rv = if m.is_positive_val() { m } else { S::ZERO };
        }
    }
}

/// Backward through ReLU and FiLM in place: `g` enters as dL/dr and leaves
/// as dL/da; writes dL/d[gamma;beta] into `gf`.
fn film_relu_back<S: Scalar>(
    a: &[S],
    r: &[S],
    f: &[S],
    g: &mut [S],
    gf: &mut [S],
    ch: usize,
    plane: usize,
) {
    let (gamma, _beta) = f.split_at(ch);
    for c in 0..ch {
        let scale = S::ONE + gamma[c];
        let ap = &a[c * plane..(c + 1) * plane];
        let rp = &r[c * plane..(c + 1) * plane];
        let gp = &mut g[c * plane..(c + 1) * plane];
        let mut gg = S::ZERO;
        let mut gb = S::ZERO;
        for ((gv, &rv), &av) in gp.iter_mut().zip(rp).zip(ap) {
            let gm = if rv.is_positive_val() { *gv } else { S::ZERO };
            gg += gm * av;
            gb += gm;
            *gv = gm * scale;
        }
        gf[c] = gg;
        gf[ch + c] = gb;
    }
}

/// out[r] = b[r] + sum_c w[r,c] x[c]
fn linear<S: Scalar>(w: &[S], b: &[S], x: &[S], out: &mut [S], rows: usize, cols: usize) {
    for r in 0..rows {
        let wr = &w[r * cols..(r + 1) * cols];
        let mut acc = b[r];
        for (wv, xv) in wr.iter().zip(x) {
            acc += *wv * *xv;
        }
        out[r] = acc;
    }
}

/// Gradients of `linear`: gw += outer(gy, x), gb += gy, gx (+)= w^T gy.
#[allow(clippy::too_many_arguments)]
fn linear_back<S: Scalar>(
    w: &[S],
    x: &[S],
    gy: &[S],
    gw: &mut [S],
    gb: &mut [S],
    gx: &mut [S],
    rows: usize,
    cols: usize,
    accumulate_gx: bool,
) {
    if !accumulate_gx {
        gx.fill(S::ZERO);
    }
    for r in 0..rows {
        let g = gy[r];
        gb[r] += g;
        let wr = &w[r * cols..(r + 1) * cols];
        let gwr = &mut gw[r * cols..(r + 1) * cols];
        for k in 0..cols {
            gwr[k] += g * x[k];
            gx[k] += g * wr[k];
        }
    }
}

/// Patch matrix for a same-padded 3x3 conv: row (ic*3+ky)*3+kx holds the
/// input plane shifted by (ky-1, kx-1) with zero padding.
fn im2col_3x3<S: Scalar>(inp: &[S], x: &mut [S], cin: usize, h: usize, wd: usize) {
    let n = h * wd;
    for ic in 0..cin {
        let ip = &inp[ic * n..(ic + 1) * n];
        for ky in 0..3usize {
            for kx in 0..3usize {
                let r0 = ((ic * 3 + ky) * 3 + kx) * n;
                let row = &mut x[r0..r0 + n];
                for y in 0..h {
                    let dst = &mut row[y * wd..(y + 1) * wd];
                    let iy = y as i64 + ky as i64 - 1;
                    if iy < 0 || iy >= h as i64 {
                        dst.fill(S::ZERO);
                        continue;
                    }
                    let src = &ip[iy as usize * wd..(iy as usize + 1) * wd];
                    match kx {
                        0 => {
                            dst[0] = S::ZERO;
                            dst[1..].copy_from_slice(&src[..wd - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..wd - 1].copy_from_slice(&src[1..]);
                            dst[wd - 1] = S::ZERO;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col_3x3`: scatter-add patch-row gradients back to planes.
fn col2im_3x3<S: Scalar>(gx: &[S], gin: &mut [S], cin: usize, h: usize, wd: usize) {
    let n = h * wd;
    for ic in 0..cin {
        let gp = &mut gin[ic * n..(ic + 1) * n];
        for ky in 0..3usize {
            for kx in 0..3usize {
                let r0 = ((ic * 3 + ky) * 3 + kx) * n;
                let row = &gx[r0..r0 + n];
                for y in 0..h {
                    let iy = y as i64 + ky as i64 - 1;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    let dst = &mut gp[iy as usize * wd..(iy as usize + 1) * wd];
                    let src = &row[y * wd..(y + 1) * wd];
                    match kx {
                        0 => axpy(&mut dst[..wd - 1], S::ONE, &src[1..]),
                        1 => axpy(dst, S::ONE, src),
                        _ => axpy(&mut dst[1..], S::ONE, &src[..wd - 1]),
                    }
                }
            }
        }
    }
}

/// Patch matrix for the stride-2 3x3 conv: row (ic*3+ky)*3+kx holds
/// inp[ic][2oy+ky-1][2ox+kx-1] over output positions (oy, ox).
fn im2col_3x3_s2<S: Scalar>(inp: &[S], x: &mut [S], cin: usize, h: usize, wd: usize) {
    let (h2, w2) = (h / 2, wd / 2);
    let n = h * wd;
    let n2 = h2 * w2;
    for ic in 0..cin {
        let ip = &inp[ic * n..(ic + 1) * n];
        for ky in 0..3usize {
            for kx in 0..3usize {
                let r0 = ((ic * 3 + ky) * 3 + kx) * n2;
                let row = &mut x[r0..r0 + n2];
                for oy in 0..h2 {
                    let dst = &mut row[oy * w2..(oy + 1) * w2];
                    let iy = 2 * oy as i64 + ky as i64 - 1;
                    if iy < 0 || iy >= h as i64 {
                        dst.fill(S::ZERO);
                        continue;
                    }
                    let src = &ip[iy as usize * wd..(iy as usize + 1) * wd];
                    // ix = 2ox + kx - 1
                    match kx {
                        0 => {
                            dst[0] = S::ZERO;
                            for ox in 1..w2 {
                                dst[ox] = src[2 * ox - 1];
                            }
                        }
                        1 => {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d = src[2 * ox];
                            }
                        }
                        _ => {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d = src[2 * ox + 1];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col_3x3_s2`.
fn col2im_3x3_s2<S: Scalar>(gx: &[S], gin: &mut [S], cin: usize, h: usize, wd: usize) {
    let (h2, w2) = (h / 2, wd / 2);
    let n = h * wd;
    let n2 = h2 * w2;
    for ic in 0..cin {
        let gp = &mut gin[ic * n..(ic + 1) * n];
        for ky in 0..3usize {
            for kx in 0..3usize {
                let r0 = ((ic * 3 + ky) * 3 + kx) * n2;
                let row = &gx[r0..r0 + n2];
                for oy in 0..h2 {
                    let iy = 2 * oy as i64 + ky as i64 - 1;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    let dst = &mut gp[iy as usize * wd..(iy as usize + 1) * wd];
                    let src = &row[oy * w2..(oy + 1) * w2];
                    match kx {
                        0 => {
                            for ox in 1..w2 {
                                dst[2 * ox - 1] += src[ox];
                            }
                        }
                        1 => {
                            for (ox, &s) in src.iter().enumerate() {
                                dst[2 * ox] += s;
                            }
                        }
                        _ => {
                            for (ox, &s) in src.iter().enumerate() {
                                dst[2 * ox + 1] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Per-phase 3x3 weight views of the 6x6 stride-2 transposed conv.
///
/// Output pixel (2q+py, 2r+px) gathers input (q+1-j, r+1-i) with kernel tap
/// (py+2j, px+2i). Recast over patch offsets (dy, dx) in {0,1,2} with input
/// (q+dy-1, r+dx-1): kernel row = py + 2(2-dy), col = px + 2(2-dx).
fn build_phase_weights<S: Scalar>(w: &[S], wph: &mut [S], cin: usize, cout: usize) {
    let kk = cin * 9;
    let k2 = TCONV_K * TCONV_K;
    for py in 0..2usize {
        for px in 0..2usize {
            let ph = py * 2 + px;
            let base = ph * cout * kk;
            for oc in 0..cout {
                for ic in 0..cin {
                    for dy in 0..3usize {
                        let ky = py + 2 * (2 - dy);
                        for dx in 0..3usize {
                            let kx = px + 2 * (2 - dx);
                            wph[base + oc * kk + (ic * 3 + dy) * 3 + dx] =
                                w[(ic * cout + oc) * k2 + ky * TCONV_K + kx];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of `build_phase_weights`: accumulate a phase's weight gradients
/// back into the 6x6 layout.
fn scatter_phase_weights<S: Scalar>(gwp: &[S], gw: &mut [S], ph: usize, cin: usize, cout: usize) {
    let kk = cin * 9;
    let k2 = TCONV_K * TCONV_K;
    let (py, px) = (ph / 2, ph % 2);
    for oc in 0..cout {
        for ic in 0..cin {
            for dy in 0..3usize {
                let ky = py + 2 * (2 - dy);
                for dx in 0..3usize {
                    let kx = px + 2 * (2 - dx);
                    gw[(ic * cout + oc) * k2 + ky * TCONV_K + kx] +=
                        gwp[oc * kk + (ic * 3 + dy) * 3 + dx];
                }
            }
        }
    }
}

/// full[oc][2q+py][2r+px] = phase[oc][q][r]
fn scatter_phase<S: Scalar>(phase: &[S], full: &mut [S], ph: usize, ch: usize, h2: usize, w2: usize) {
    let (py, px) = (ph / 2, ph % 2);
    let (h, wd) = (2 * h2, 2 * w2);
    for oc in 0..ch {
        for q in 0..h2 {
            let src = &phase[oc * h2 * w2 + q * w2..oc * h2 * w2 + (q + 1) * w2];
            let dst =
                &mut full[oc * h * wd + (2 * q + py) * wd..oc * h * wd + (2 * q + py + 1) * wd];
            for (r, &s) in src.iter().enumerate() {
                dst[2 * r + px] = s;
            }
        }
    }
}

/// phase[oc][q][r] = full[oc][2q+py][2r+px]
fn gather_phase<S: Scalar>(full: &[S], phase: &mut [S], ph: usize, ch: usize, h2: usize, w2: usize) {
    let (py, px) = (ph / 2, ph % 2);
    let (h, wd) = (2 * h2, 2 * w2);
    for oc in 0..ch {
        for q in 0..h2 {
            let dst = &mut phase[oc * h2 * w2 + q * w2..oc * h2 * w2 + (q + 1) * w2];
            let src = &full[oc * h * wd + (2 * q + py) * wd..oc * h * wd + (2 * q + py + 1) * wd];
            for (r, d) in dst.iter_mut().enumerate() {
                *d = src[2 * r + px];
            }
        }
    }
}
