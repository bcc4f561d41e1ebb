//! Noise-prediction training of the denoiser plus its label-embedding table.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::model::{Denoiser, ModelConfig, Workspace};
use crate::parallel::{for_each_chunk_pair_mut, map_chunks_mut};
use crate::rng::RngStream;
use crate::schedule::NoiseSchedule;
use crate::synth::DatasetItem;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub steps: usize,
    /// Probability of replacing the label condition with the learned null
    /// embedding (classifier-free guidance training).
    pub cond_dropout: f32,
    pub momentum: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 0.001, batch_size: 32, steps: 20000, cond_dropout: 0.1, momentum: 0.9 }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.lr < 0.0 {
            return Err(Error::invalid("lr must be nonnegative"));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::invalid("batch_size and steps must be positive"));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(Error::invalid("cond_dropout must lie in [0,1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub model: Denoiser<f32>,
    /// Raw per-step batch losses.
    pub losses: Vec<f32>,
    /// Exponential moving average (factor 0.99) of the losses.
    pub ema_losses: Vec<f32>,
}

pub const EMA_FACTOR: f64 = 0.99;
const INIT_SALT: u64 = 0x494E_4954; // "INIT"
const STEP_SALT: u64 = 0x5354_4550; // "STEP"

thread_local! {
    static TL_WS: RefCell<Option<(ModelConfig, Workspace<f32>)>> = const { RefCell::new(None) };
}

/// Run `f` with this thread's cached workspace for `cfg`.
pub(crate) fn with_workspace<R>(cfg: &ModelConfig, f: impl FnOnce(&mut Workspace<f32>) -> R) -> R {
    TL_WS.with(|cell| {
        let mut slot = cell.borrow_mut();
        match slot.as_mut() {
            Some((c, ws)) if c == cfg => f(ws),
            _ => {
                let mut ws = Workspace::new(cfg);
                let r = f(&mut ws);
                *slot = Some((*cfg, ws));
                r
            }
        }
    })
}

/// Joint SGD-with-momentum training of the denoiser weights and the label
/// embedding table. Deterministic for a fixed seed at any worker count: each
/// example's draws derive only from (seed, step, index), and the batch
/// gradient is summed in index order with f64 accumulation.
pub fn train(
    data: &[DatasetItem],
    cfg: &TrainConfig,
    model_cfg: ModelConfig,
    sched: &NoiseSchedule,
    seed_rng: &RngStream,
    mut progress: impl FnMut(usize, f32, f32),
) -> Result<TrainResult> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    let mut init_rng = seed_rng.derive(INIT_SALT);
    let mut model = Denoiser::init(model_cfg, &mut init_rng)?;
    let pc = model.param_count();
    let npix = model_cfg.img * model_cfg.img;
    let b = cfg.batch_size;

    let mut velocity = vec![0.0f32; pc];
    let mut batch_grads = vec![0.0f32; b * pc];
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut ema_losses = Vec::with_capacity(cfg.steps);
    let mut ema = 0.0f64;

    for step in 0..cfg.steps {
        let model_ref = &model;
        let example_losses: Vec<f64> = map_chunks_mut(&mut batch_grads, pc, |idx, grad| {
            grad.fill(0.0);
            example_pass(model_ref, data, sched, cfg.cond_dropout, seed_rng, step, idx, b, grad, npix)
        });

        let mean_loss: f64 = example_losses.iter().sum::<f64>() / b as f64;

        // reduce over the batch and step the optimizer in one pass, chunked
        // over the parameter axis; each parameter's sum runs in batch-index
        // order with an f64 accumulator, so worker count cannot change it
        let scale = 1.0 / b as f64;
        let grads_ref = &batch_grads;
        for_each_chunk_pair_mut(&mut model.params, &mut velocity, 4096, |start, ps, vs| {
            for (k, (p, v)) in ps.iter_mut().zip(vs.iter_mut()).enumerate() {
                let i = start + k;
                let mut s = 0.0f64;
                for j in 0..b {
                    s += grads_ref[j * pc + i] as f64;
                }
                let g = (s * scale) as f32;
                *v = cfg.momentum * *v + g;
                *p -= cfg.lr * *v;
            }
        });

        ema = if step == 0 { mean_loss } else { EMA_FACTOR * ema + (1.0 - EMA_FACTOR) * mean_loss };
        losses.push(mean_loss as f32);
        ema_losses.push(ema as f32);
        progress(step, mean_loss as f32, ema as f32);
    }

    Ok(TrainResult { model, losses, ema_losses })
}

/// Loss + gradients for one (step, idx) example.
#[allow(clippy::too_many_arguments)]
fn example_pass(
    model: &Denoiser<f32>,
    data: &[DatasetItem],
    sched: &NoiseSchedule,
    dropout: f32,
    base: &RngStream,
    step: usize,
    idx: usize,
    batch: usize,
    grad: &mut [f32],
    npix: usize,
) -> f64 {
    let mut rng = base.derive(STEP_SALT.wrapping_add((step * batch + idx) as u64));
    let item = &data[rng.next_below(data.len() as u64) as usize];
    let t = 1 + rng.next_below(sched.t_steps as u64) as usize;
    let use_null = rng.next_bool(dropout as f64);

    let ab = sched.alpha_bar(t);
    let (s_sig, s_noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    let x0 = item.image.data();
    let mut z = vec![0.0f32; npix];
    let mut x_t = vec![0.0f32; npix];
    for i in 0..npix {
        let zi = rng.next_gaussian();
        z[i] = zi;
        x_t[i] = s_sig * x0[i] + s_noise * zi;
    }

    let cond: Vec<f32> = if use_null {
        model.null_embedding().to_vec()
    } else {
        model.label_embedding(item.spec.label)
    };

    with_workspace(&model.cfg, |ws| {
        model.forward(&x_t, t, &cond, ws);
        let mut loss = 0.0f64;
        for i in 0..npix {
            let d = ws.out[i] - z[i];
            loss += (d as f64) * (d as f64);
            ws.g_out[i] = 2.0 * d / npix as f32;
        }
        loss /= npix as f64;

        let mut g_c = vec![0.0f32; model.cfg.d_embed];
        model.backward(&x_t, &cond, ws, grad, &mut g_c);
        let rows: Vec<usize> = if use_null {
            vec![model.null_row_offset()]
        } else {
            model.label_row_offsets(item.spec.label).to_vec()
        };
        for off in rows {
            for (k, &g) in g_c.iter().enumerate() {
                grad[off + k] += g;
            }
        }
        loss
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::make_schedule;
    use crate::synth::{sample_dataset, SceneSpec};

    fn tiny_data(count: usize) -> Vec<DatasetItem> {
        let mut rng = RngStream::new(2, 0);
        sample_dataset(count, &mut rng, false).unwrap()
    }

    /// Reduced-size data: 8x8 crops of rendered scenes.
    fn tiny_data_8(count: usize) -> Vec<DatasetItem> {
        tiny_data(count)
            .into_iter()
            .map(|item| {
                let src = item.image.data();
                let mut crop = vec![0.0f32; 64];
                for y in 0..8 {
                    for x in 0..8 {
                        crop[y * 8 + x] = src[(y * 4) * 32 + x * 4];
                    }
                }
                DatasetItem {
                    spec: SceneSpec::clean(item.spec.label),
                    image: crate::tensor::Tensor::new(vec![8, 8], crop).unwrap(),
                }
            })
            .collect()
    }

    #[test]
    fn empty_data_rejected() {
        let sched = make_schedule(100, 1e-3, 0.05).unwrap();
        let cfg = TrainConfig { steps: 1, ..Default::default() };
        let r = train(&[], &cfg, ModelConfig::reduced(), &sched, &RngStream::new(1, 0), |_, _, _| {});
        assert!(matches!(r, Err(Error::EmptyData)));
    }

    #[test]
    fn zero_lr_leaves_params_at_init() {
        let sched = make_schedule(100, 1e-3, 0.05).unwrap();
        let data = tiny_data_8(4);
        let cfg = TrainConfig { lr: 0.0, steps: 3, batch_size: 2, ..Default::default() };
        let seed = RngStream::new(9, 0);
        let r = train(&data, &cfg, ModelConfig::reduced(), &sched, &seed, |_, _, _| {}).unwrap();
        let mut init_rng = seed.derive(INIT_SALT);
        let init = Denoiser::init(ModelConfig::reduced(), &mut init_rng).unwrap();
        assert_eq!(r.model.params, init.params);
    }

    #[test]
    fn initial_loss_near_one() {
        // zero-initialized output conv predicts exactly 0, so the first-step
        // loss is E||z||^2 / npix ~ 1
        let sched = make_schedule(100, 1e-3, 0.05).unwrap();
        let data = tiny_data_8(16);
        let cfg = TrainConfig { lr: 0.0, steps: 20, batch_size: 16, ..Default::default() };
        let r = train(&data, &cfg, ModelConfig::reduced(), &sched, &RngStream::new(3, 0), |_, _, _| {})
            .unwrap();
        let mean: f64 = r.losses.iter().map(|&v| v as f64).sum::<f64>() / r.losses.len() as f64;
        assert!((mean - 1.0).abs() < 0.1, "mean initial loss {mean}");
    }

    #[test]
    fn training_is_seed_deterministic() {
        let sched = make_schedule(100, 1e-3, 0.05).unwrap();
        let data = tiny_data_8(8);
        let cfg = TrainConfig { steps: 5, batch_size: 4, ..Default::default() };
        let a = train(&data, &cfg, ModelConfig::reduced(), &sched, &RngStream::new(4, 0), |_, _, _| {})
            .unwrap();
        let b = train(&data, &cfg, ModelConfig::reduced(), &sched, &RngStream::new(4, 0), |_, _, _| {})
            .unwrap();
        assert_eq!(a.model.params, b.model.params);
        assert_eq!(a.losses, b.losses);
    }

    #[test]
    fn loss_decreases_on_tiny_problem() {
        let sched = make_schedule(100, 1e-3, 0.05).unwrap();
        let data = tiny_data_8(8);
        let cfg = TrainConfig { lr: 0.01, steps: 300, batch_size: 8, ..Default::default() };
        let r = train(&data, &cfg, ModelConfig::reduced(), &sched, &RngStream::new(5, 0), |_, _, _| {})
            .unwrap();
        let head: f64 =
            r.losses[..50].iter().map(|&v| v as f64).sum::<f64>() / 50.0;
        let tail: f64 =
            r.losses[250..].iter().map(|&v| v as f64).sum::<f64>() / 50.0;
        assert!(tail < head * 0.8, "head {head} tail {tail}");
    }
}
