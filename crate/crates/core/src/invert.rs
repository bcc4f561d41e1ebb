//! Recovering conditioning from images against a frozen model: a single
//! learned embedding (the classic inversion baseline) or one embedding per
//! generation stage.

use crate::error::{Error, Result};
use crate::model::Denoiser;
use crate::rng::RngStream;
use crate::sampler::{ddim_sample, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::spectrum::{Provenance, PromptSpectrum, StageConditions, StageSchedule};
use crate::tensor::Tensor;
use crate::train::{with_workspace, EMA_FACTOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InversionMode {
    Ti,
    Prospect,
}

impl InversionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ti" => Ok(InversionMode::Ti),
            "prospect" => Ok(InversionMode::Prospect),
            other => Err(Error::invalid(format!("invert mode must be ti|prospect, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    Zeros,
    NullEmbedding,
    LabelMean,
}

impl InitMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zeros" => Ok(InitMode::Zeros),
            "null-embedding" => Ok(InitMode::NullEmbedding),
            "label-mean" => Ok(InitMode::LabelMean),
            other => Err(Error::invalid(format!("unknown init `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InversionConfig {
    pub mode: InversionMode,
    pub iterations: usize,
    pub lr: f32,
    /// Per-coordinate embedding dropout applied in the forward pass only.
    pub dropout: f32,
    pub init: InitMode,
    pub seed: u64,
    pub momentum: f32,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            mode: InversionMode::Prospect,
            iterations: 2000,
            lr: 0.001,
            dropout: 0.1,
            init: InitMode::NullEmbedding,
            seed: 0,
            momentum: 0.9,
        }
    }
}

impl InversionConfig {
    fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::invalid("iterations must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0,1)"));
        }
        if self.lr < 0.0 {
            return Err(Error::invalid("lr must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct InversionResult {
    pub spectrum: PromptSpectrum,
    pub losses: Vec<f32>,
    pub ema_losses: Vec<f32>,
    /// Stage drawn at each iteration (1-based).
    pub stages: Vec<usize>,
    /// Per-stage update counts; sums to `iterations`.
    pub stage_updates: Vec<usize>,
}

const INVERT_SALT: u64 = 0x494E_5654; // "INVT"

fn initial_embedding(model: &Denoiser<f32>, init: InitMode) -> Vec<f32> {
    let d = model.cfg.d_embed;
    match init {
        InitMode::Zeros => vec![0.0; d],
        InitMode::NullEmbedding => model.null_embedding().to_vec(),
        InitMode::LabelMean => {
            let mut mean = vec![0.0f64; d];
            let mut count = 0usize;
            for label in crate::synth::AttributeLabel::all() {
                for (m, &v) in mean.iter_mut().zip(&model.label_embedding(label)) {
                    *m += v as f64;
                }
                count += 1;
            }
            mean.into_iter().map(|v| (v / count as f64) as f32).collect()
        }
    }
}

/// Single-embedding inversion: optimizes one vector against the noise
/// prediction objective; the result broadcasts it to every stage.
pub fn ti_invert(
    model: &Denoiser<f32>,
    sched: &NoiseSchedule,
    stage_sched: StageSchedule,
    images: &[Tensor],
    cfg: &InversionConfig,
) -> Result<InversionResult> {
    invert_impl(model, sched, stage_sched, images, cfg, false)
}

/// Per-stage inversion: maintains p_1..p_n and updates only the stage that
/// owns the drawn timestep.
pub fn prospect_invert(
    model: &Denoiser<f32>,
    sched: &NoiseSchedule,
    stage_sched: StageSchedule,
    images: &[Tensor],
    cfg: &InversionConfig,
) -> Result<InversionResult> {
    invert_impl(model, sched, stage_sched, images, cfg, true)
}

fn invert_impl(
    model: &Denoiser<f32>,
    sched: &NoiseSchedule,
    stage_sched: StageSchedule,
    images: &[Tensor],
    cfg: &InversionConfig,
    per_stage: bool,
) -> Result<InversionResult> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::EmptyData);
    }
    let img = model.cfg.img;
    for im in images {
        if im.shape() != [img, img] {
            return Err(Error::ShapeMismatch { expected: vec![img, img], got: im.shape().to_vec() });
        }
    }
    if stage_sched.t_steps != sched.t_steps {
        return Err(Error::invalid("stage schedule does not match noise schedule"));
    }
    let d = model.cfg.d_embed;
    let n = stage_sched.n;
    let npix = img * img;
    let slots = if per_stage { n } else { 1 };

    let init = initial_embedding(model, cfg.init);
    let mut embeds = vec![init; slots];
    let mut velocity = vec![vec![0.0f32; d]; slots];
    let mut rng = RngStream::new(cfg.seed, 0).derive(INVERT_SALT);

    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut ema_losses = Vec::with_capacity(cfg.iterations);
    let mut stages = Vec::with_capacity(cfg.iterations);
    let mut stage_updates = vec![0usize; n];
    let mut ema = 0.0f64;

    let mut grad_scratch = vec![0.0f32; model.param_count()];
    let mut z = vec![0.0f32; npix];
    let mut x_t = vec![0.0f32; npix];
    let mut dropped = vec![0.0f32; d];
    let mut mask = vec![1.0f32; d];

    for it in 0..cfg.iterations {
        let image = &images[rng.next_below(images.len() as u64) as usize];
        let t = 1 + rng.next_below(sched.t_steps as u64) as usize;
        let stage = stage_sched.stage_of(t)?;
        let slot = if per_stage { stage - 1 } else { 0 };

        let ab = sched.alpha_bar(t);
        let (s_sig, s_noise) = (ab.sqrt(), (1.0 - ab).sqrt());
        for i in 0..npix {
            let zi = rng.next_gaussian();
            z[i] = zi;
            x_t[i] = s_sig * image.data()[i] + s_noise * zi;
        }

        // forward-only coordinate dropout on the active embedding
        for k in 0..d {
            let keep = !rng.next_bool(cfg.dropout as f64);
            mask[k] = if keep { 1.0 } else { 0.0 };
            dropped[k] = embeds[slot][k] * mask[k];
        }

        let loss = with_workspace(&model.cfg, |ws| {
            model.forward(&x_t, t, &dropped, ws);
            let mut loss = 0.0f64;
            for i in 0..npix {
                let ddiff = ws.out[i] - z[i];
                loss += (ddiff as f64) * (ddiff as f64);
                ws.g_out[i] = 2.0 * ddiff / npix as f32;
            }
            loss /= npix as f64;
            grad_scratch.fill(0.0);
            let mut g_c = vec![0.0f32; d];
            model.backward(&x_t, &dropped, ws, &mut grad_scratch, &mut g_c);
            let v = &mut velocity[slot];
            let p = &mut embeds[slot];
            for k in 0..d {
                let g = g_c[k] * mask[k];
                v[k] = cfg.momentum * v[k] + g;
                p[k] -= cfg.lr * v[k];
            }
            loss
        });

        ema = if it == 0 { loss } else { EMA_FACTOR * ema + (1.0 - EMA_FACTOR) * loss };
        losses.push(loss as f32);
        ema_losses.push(ema as f32);
        stages.push(stage);
        stage_updates[stage - 1] += 1;
    }

    let spectrum = if per_stage {
        PromptSpectrum::new(embeds, Provenance::Inverted)?
    } else {
        PromptSpectrum::constant(embeds.pop().expect("one slot"), n, Provenance::Inverted)?
    };
    Ok(InversionResult { spectrum, losses, ema_losses, stages, stage_updates })
}

/// Sample an image from an inversion result's spectrum.
pub fn reconstruct(
    model: &Denoiser<f32>,
    sched: &NoiseSchedule,
    stage_sched: StageSchedule,
    spectrum: &PromptSpectrum,
    sampler_cfg: &SamplerConfig,
    rng: &mut RngStream,
) -> Result<Tensor> {
    if spectrum.d() != model.cfg.d_embed {
        return Err(Error::DimMismatch { expected: model.cfg.d_embed, got: spectrum.d() });
    }
    let cond = StageConditions::from_spectrum(stage_sched, spectrum)?;
    let (image, _) = ddim_sample(model, sched, &cond, sampler_cfg, rng)?;
    Ok(image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Workspace};
    use crate::rng::gaussian;
    use crate::schedule::make_schedule;

    fn setup() -> (Denoiser<f32>, NoiseSchedule, StageSchedule, Vec<Tensor>) {
        let mut rng = RngStream::new(50, 0);
        let mut model = Denoiser::init(ModelConfig::reduced(), &mut rng).unwrap();
        let nparams = model.params.len();
        for v in &mut model.params[nparams - 3000..] {
            *v = rng.next_gaussian() * 0.05;
        }
        let sched = make_schedule(100, 1e-3, 0.05).unwrap();
        let stage_sched = StageSchedule::new(100, 10).unwrap();
        let images = vec![gaussian(&mut rng, &[8, 8]).unwrap().clamped(-1.0, 1.0)];
        (model, sched, stage_sched, images)
    }

    #[test]
    fn empty_images_rejected() {
        let (model, sched, ss, _) = setup();
        let cfg = InversionConfig::default();
        assert!(matches!(ti_invert(&model, &sched, ss, &[], &cfg), Err(Error::EmptyData)));
    }

    #[test]
    fn zero_lr_returns_initialization() {
        let (model, sched, ss, images) = setup();
        let cfg = InversionConfig { lr: 0.0, iterations: 20, ..Default::default() };
        let r = prospect_invert(&model, &sched, ss, &images, &cfg).unwrap();
        let init = model.null_embedding();
        for i in 1..=10 {
            assert_eq!(r.spectrum.stage(i).unwrap(), init);
        }
        let cfg_ti = InversionConfig { mode: InversionMode::Ti, lr: 0.0, iterations: 5, ..cfg };
        let r = ti_invert(&model, &sched, ss, &images, &cfg_ti).unwrap();
        assert_eq!(r.spectrum.stage(1).unwrap(), init);
    }

    #[test]
    fn one_iteration_touches_one_stage() {
        let (model, sched, ss, images) = setup();
        let cfg = InversionConfig { iterations: 1, lr: 0.05, dropout: 0.0, seed: 3, ..Default::default() };
        let r = prospect_invert(&model, &sched, ss, &images, &cfg).unwrap();
        let init = model.null_embedding();
        let updated = r.stages[0];
        for i in 1..=10 {
            let stage = r.spectrum.stage(i).unwrap();
            if i == updated {
                assert_ne!(stage, init, "stage {i} should have moved");
            } else {
                assert_eq!(stage, init, "stage {i} should be untouched");
            }
        }
        assert_eq!(r.stage_updates.iter().sum::<usize>(), 1);
    }

    #[test]
    fn update_counts_sum_to_iterations_and_cover_stages() {
        let (model, sched, ss, images) = setup();
        let cfg = InversionConfig { iterations: 100, seed: 11, ..Default::default() };
        let r = prospect_invert(&model, &sched, ss, &images, &cfg).unwrap();
        assert_eq!(r.stage_updates.iter().sum::<usize>(), 100);
        // 10n iterations cover every stage with overwhelming probability;
        // this seed is fixed, so the property is exact here
        assert!(r.stage_updates.iter().all(|&c| c > 0), "{:?}", r.stage_updates);
    }

    #[test]
    fn model_params_stay_frozen() {
        let (model, sched, ss, images) = setup();
        let before = model.params.clone();
        let cfg = InversionConfig { iterations: 50, seed: 4, ..Default::default() };
        let _ = prospect_invert(&model, &sched, ss, &images, &cfg).unwrap();
        let _ = ti_invert(
            &model,
            &sched,
            ss,
            &images,
            &InversionConfig { mode: InversionMode::Ti, ..cfg },
        )
        .unwrap();
        assert_eq!(model.params, before);
    }

    #[test]
    fn inversion_is_seed_deterministic() {
        let (model, sched, ss, images) = setup();
        let cfg = InversionConfig { iterations: 30, seed: 21, ..Default::default() };
        let a = prospect_invert(&model, &sched, ss, &images, &cfg).unwrap();
        let b = prospect_invert(&model, &sched, ss, &images, &cfg).unwrap();
        assert_eq!(a.spectrum, b.spectrum);
        assert_eq!(a.losses, b.losses);
    }

    /// FD check of one iteration's loss gradient w.r.t. the embedding, with
    /// the dropout mask held fixed, on the f64 instantiation.
    #[test]
    fn embedding_gradient_matches_finite_differences() {
        let (model32, sched, _, _) = setup();
        let model = model32.to_f64();
        let cfg = model.cfg;
        let npix = (cfg.img * cfg.img) as f64;
        let mut rng = RngStream::new(60, 0);
        let x0: Vec<f64> =
            gaussian(&mut rng, &[cfg.img * cfg.img]).unwrap().data().iter().map(|&v| v as f64).collect();
        let z: Vec<f64> =
            gaussian(&mut rng, &[cfg.img * cfg.img]).unwrap().data().iter().map(|&v| v as f64).collect();
        let t = 37usize;
        let ab = sched.alpha_bar(t) as f64;
        let x_t: Vec<f64> =
            x0.iter().zip(&z).map(|(&x, &n)| ab.sqrt() * x + (1.0 - ab).sqrt() * n).collect();
        // fixed dropout mask with a few zeroed coordinates
        let mask: Vec<f64> = (0..cfg.d_embed).map(|k| if k % 5 == 0 { 0.0 } else { 1.0 }).collect();
        let p: Vec<f64> = (0..cfg.d_embed).map(|k| 0.05 * (k as f64 - 3.0)).collect();

        let loss = |p: &[f64]| -> f64 {
            let dropped: Vec<f64> = p.iter().zip(&mask).map(|(&a, &m)| a * m).collect();
            let mut ws = Workspace::new(&cfg);
            model.forward(&x_t, t, &dropped, &mut ws);
            ws.out.iter().zip(&z).map(|(&o, &n)| (o - n) * (o - n)).sum::<f64>() / npix
        };

        // analytic: g_p = mask * g_c
        let dropped: Vec<f64> = p.iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let mut ws = Workspace::new(&cfg);
        model.forward(&x_t, t, &dropped, &mut ws);
        for i in 0..ws.out.len() {
            ws.g_out[i] = 2.0 * (ws.out[i] - z[i]) / npix;
        }
        let mut grads = vec![0.0f64; model.param_count()];
        let mut g_c = vec![0.0f64; cfg.d_embed];
        model.backward(&x_t, &dropped, &mut ws, &mut grads, &mut g_c);

        let h = 1e-5;
        let mut pv = p.clone();
        for k in 0..cfg.d_embed {
            let orig = pv[k];
            pv[k] = orig + h;
            let lp = loss(&pv);
            pv[k] = orig - h;
            let lm = loss(&pv);
            pv[k] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let analytic = g_c[k] * mask[k];
            let denom = fd.abs().max(analytic.abs()).max(1e-8);
            assert!(
                (fd - analytic).abs() / denom < 1e-3,
                "p[{k}]: fd={fd} analytic={analytic}"
            );
        }
    }
}
