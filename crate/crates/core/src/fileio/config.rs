//! `key = value` run configuration.
//!
//! Unknown keys and malformed values are hard errors (with the line number),
//! `#` starts a comment, and parse-then-serialize is idempotent.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Inclusive 1-based stage range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageRange {
    pub lo: usize,
    pub hi: usize,
}

impl StageRange {
    pub fn new(lo: usize, hi: usize) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, stage: usize) -> bool {
        self.lo <= stage && stage <= self.hi
    }

    pub fn parse(s: &str) -> Option<Self> {
        let (a, b) = s.split_once('-')?;
        let lo = a.trim().parse().ok()?;
        let hi = b.trim().parse().ok()?;
        if lo == 0 || hi < lo {
            return None;
        }
        Some(Self { lo, hi })
    }
}

impl std::fmt::Display for StageRange {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}-{}", self.lo, self.hi)
    }
}

/// Every tunable default in one place. Field order below is the canonical
/// serialization order.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub t_steps: usize,
    pub beta_min: f32,
    pub beta_max: f32,
    pub embed_dim: usize,
    pub stages: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub train_steps: usize,
    pub cond_dropout: f32,
    pub momentum: f32,
    pub ddim_steps: usize,
    pub guidance_w: f32,
    pub eta: f32,
    pub layout_band: StageRange,
    pub content_band: StageRange,
    pub material_band: StageRange,
    pub invert_mode: String,
    pub invert_iters: usize,
    pub invert_lr: f32,
    pub invert_dropout: f32,
    pub invert_init: String,
    pub hf_cutoff: f32,
    pub eval_accuracy_min: f32,
    pub eval_transfer_min: f32,
    pub eval_mix3_min: f32,
    pub eval_samples: usize,
    pub eval_trials: usize,
    pub eval_mix_trials: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            t_steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
            embed_dim: 64,
            stages: 10,
            lr: 0.001,
            batch_size: 32,
            train_steps: 20000,
            cond_dropout: 0.1,
            momentum: 0.9,
            ddim_steps: 50,
            guidance_w: 7.5,
            eta: 0.0,
            layout_band: StageRange::new(1, 2),
            content_band: StageRange::new(3, 7),
            material_band: StageRange::new(8, 10),
            invert_mode: "prospect".into(),
            invert_iters: 2000,
            invert_lr: 0.001,
            invert_dropout: 0.1,
            invert_init: "null-embedding".into(),
            hf_cutoff: 0.25,
            eval_accuracy_min: 0.8,
            eval_transfer_min: 0.7,
            eval_mix3_min: 0.6,
            eval_samples: 200,
            eval_trials: 200,
            eval_mix_trials: 100,
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: line_no,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            cfg.set(key.trim(), value.trim(), line_no)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Config> {
        Config::parse(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        macro_rules! val {
            ($ty:ty) => {
                value.parse::<$ty>().map_err(|_| Error::Config {
                    line,
                    msg: format!("bad value `{value}` for key `{key}`"),
                })?
            };
        }
        let range = || {
            StageRange::parse(value).ok_or_else(|| Error::Config {
                line,
                msg: format!("bad stage range `{value}` for key `{key}`"),
            })
        };
        match key {
            "t_steps" => self.t_steps = val!(usize),
            "beta_min" => self.beta_min = val!(f32),
            "beta_max" => self.beta_max = val!(f32),
            "embed_dim" => self.embed_dim = val!(usize),
            "stages" => self.stages = val!(usize),
            "lr" => self.lr = val!(f32),
            "batch_size" => self.batch_size = val!(usize),
            "train_steps" => self.train_steps = val!(usize),
            "cond_dropout" => self.cond_dropout = val!(f32),
            "momentum" => self.momentum = val!(f32),
            "ddim_steps" => self.ddim_steps = val!(usize),
            "guidance_w" => self.guidance_w = val!(f32),
            "eta" => self.eta = val!(f32),
            "layout_band" => self.layout_band = range()?,
            "content_band" => self.content_band = range()?,
            "material_band" => self.material_band = range()?,
            "invert_mode" => self.invert_mode = val!(String),
            "invert_iters" => self.invert_iters = val!(usize),
            "invert_lr" => self.invert_lr = val!(f32),
            "invert_dropout" => self.invert_dropout = val!(f32),
            "invert_init" => self.invert_init = val!(String),
            "hf_cutoff" => self.hf_cutoff = val!(f32),
            "eval_accuracy_min" => self.eval_accuracy_min = val!(f32),
            "eval_transfer_min" => self.eval_transfer_min = val!(f32),
            "eval_mix3_min" => self.eval_mix3_min = val!(f32),
            "eval_samples" => self.eval_samples = val!(usize),
            "eval_trials" => self.eval_trials = val!(usize),
            "eval_mix_trials" => self.eval_mix_trials = val!(usize),
            _ => {
                return Err(Error::Config { line, msg: format!("unknown key `{key}`") });
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config { line: 0, msg });
        if self.t_steps < 2 {
            return bad("t_steps must be >= 2".into());
        }
        if !(self.beta_min > 0.0 && self.beta_min < self.beta_max && self.beta_max < 1.0) {
            return bad("need 0 < beta_min < beta_max < 1".into());
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive".into());
        }
        if self.stages == 0 || self.stages > self.t_steps {
            return bad("need 1 <= stages <= t_steps".into());
        }
        if self.lr < 0.0 || self.invert_lr < 0.0 {
            return bad("learning rates must be nonnegative".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.train_steps == 0 {
            return bad("train_steps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.cond_dropout) || !(0.0..1.0).contains(&self.invert_dropout) {
            return bad("dropout rates must lie in [0,1)".into());
        }
        if self.ddim_steps == 0 || self.ddim_steps > self.t_steps {
            return bad("need 1 <= ddim_steps <= t_steps".into());
        }
        if self.guidance_w < 0.0 {
            return bad("guidance_w must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return bad("eta must lie in [0,1]".into());
        }
        if self.invert_iters == 0 {
            return bad("invert_iters must be positive".into());
        }
        match self.invert_mode.as_str() {
            "ti" | "prospect" => {}
            m => return bad(format!("invert_mode must be ti|prospect, got `{m}`")),
        }
        match self.invert_init.as_str() {
            "zeros" | "null-embedding" | "label-mean" => {}
            m => return bad(format!("invert_init must be zeros|null-embedding|label-mean, got `{m}`")),
        }
        if !(0.0 < self.hf_cutoff && self.hf_cutoff < 1.0) {
            return bad("hf_cutoff must lie in (0,1)".into());
        }
        // the three bands must be ordered, disjoint, and cover 1..stages
        let (l, c, m) = (self.layout_band, self.content_band, self.material_band);
        if !(l.lo == 1 && c.lo == l.hi + 1 && m.lo == c.hi + 1 && m.hi == self.stages) {
            return bad(format!(
                "bands {l}, {c}, {m} must be ordered, disjoint, and cover 1..{}",
                self.stages
            ));
        }
        Ok(())
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("t_steps", self.t_steps.to_string());
        kv("beta_min", self.beta_min.to_string());
        kv("beta_max", self.beta_max.to_string());
        kv("embed_dim", self.embed_dim.to_string());
        kv("stages", self.stages.to_string());
        kv("lr", self.lr.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("train_steps", self.train_steps.to_string());
        kv("cond_dropout", self.cond_dropout.to_string());
        kv("momentum", self.momentum.to_string());
        kv("ddim_steps", self.ddim_steps.to_string());
        kv("guidance_w", self.guidance_w.to_string());
        kv("eta", self.eta.to_string());
        kv("layout_band", self.layout_band.to_string());
        kv("content_band", self.content_band.to_string());
        kv("material_band", self.material_band.to_string());
        kv("invert_mode", self.invert_mode.clone());
        kv("invert_iters", self.invert_iters.to_string());
        kv("invert_lr", self.invert_lr.to_string());
        kv("invert_dropout", self.invert_dropout.to_string());
        kv("invert_init", self.invert_init.clone());
        kv("hf_cutoff", self.hf_cutoff.to_string());
        kv("eval_accuracy_min", self.eval_accuracy_min.to_string());
        kv("eval_transfer_min", self.eval_transfer_min.to_string());
        kv("eval_mix3_min", self.eval_mix3_min.to_string());
        kv("eval_samples", self.eval_samples.to_string());
        kv("eval_trials", self.eval_trials.to_string());
        kv("eval_mix_trials", self.eval_mix_trials.to_string());
        s
    }

    /// FNV-1a hash of the canonical serialization; embedded in reports.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.serialize().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = Config::default();
        let s = c.serialize();
        let d = Config::parse(&s).unwrap();
        assert_eq!(c, d);
        assert_eq!(s, d.serialize());
    }

    #[test]
    fn unknown_key_errors_with_line() {
        let err = Config::parse("lr = 0.5\nbogus = 1\n").unwrap_err();
        match err {
            Error::Config { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("bogus"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let c = Config::parse("# comment\n\nlr = 0.01 # trailing\n").unwrap();
        assert_eq!(c.lr, 0.01);
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(Config::parse("train_steps = 0\n").is_err());
    }

    #[test]
    fn bad_bands_rejected() {
        assert!(Config::parse("layout_band = 1-3\n").is_err());
        assert!(Config::parse("layout_band = 1-3\ncontent_band = 4-7\n").is_ok());
    }

    #[test]
    fn hash_tracks_content() {
        let a = Config::default();
        let mut b = Config::default();
        b.lr = 0.5;
        assert_ne!(a.hash(), b.hash());
    }
}
