use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Parser;
use prospect_core::eval::{
    attribute_accuracy, calibrate_bands, compare_inversions, run_mix3, run_transfer, Factor,
};
use prospect_core::fileio::config::Config;
use prospect_core::invert::{prospect_invert, InversionConfig, InversionMode};
use prospect_core::metrics::psnr_from_mse;
use prospect_core::rng::RngStream;
use prospect_core::sampler::SamplerConfig;
use prospect_core::spectrum::AttributeBands;
use prospect_core::synth::{
    load_dataset, render, AttributeLabel, Content, Layout, Material, SceneSpec,
};

use crate::cmds::{load_config, load_model, stage_schedule};
use crate::errors::{CmdError, CmdResult};

#[derive(Parser)]
pub struct Args {
    #[arg(long)]
    pub model: PathBuf,
    /// accuracy | transfer | mix3 | calibrate | compare
    #[arg(long)]
    pub suite: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Test image directory (required by `compare`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Report output directory (CSV + text summary).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

struct Reporter {
    out: Option<PathBuf>,
    summary: String,
    csv: String,
    failures: Vec<String>,
}

impl Reporter {
    fn new(args: &Args, cfg: &Config) -> Self {
        let mut summary = String::new();
        let _ = writeln!(summary, "suite: {}", args.suite);
        let _ = writeln!(summary, "config_hash: {:016x}", cfg.hash());
        let _ = writeln!(summary, "seed: {}", args.seed);
        let csv = format!("# suite={} config_hash={:016x} seed={}\n", args.suite, cfg.hash(), args.seed);
        Self { out: args.out.clone(), summary, csv, failures: Vec::new() }
    }

    fn line(&mut self, s: impl AsRef<str>) {
        println!("{}", s.as_ref());
        self.summary.push_str(s.as_ref());
        self.summary.push('\n');
    }

    fn csv_line(&mut self, s: impl AsRef<str>) {
        self.csv.push_str(s.as_ref());
        self.csv.push('\n');
    }

    fn check(&mut self, name: &str, value: f32, min: f32) {
        let ok = value >= min;
        let verdict = if ok { "PASS" } else { "FAIL" };
        self.line(format!("[{verdict}] {name}: {value:.3} (min {min:.3})"));
        if !ok {
            self.failures.push(format!("{name} {value:.3} < {min:.3}"));
        }
    }

    fn check_max(&mut self, name: &str, value: f32, max: f32) {
        let ok = value <= max;
        let verdict = if ok { "PASS" } else { "FAIL" };
        self.line(format!("[{verdict}] {name}: {value:.3} (max {max:.3})"));
        if !ok {
            self.failures.push(format!("{name} {value:.3} > {max:.3}"));
        }
    }

    fn finish(self, suite: &str) -> CmdResult {
        if let Some(dir) = &self.out {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join(format!("{suite}.csv")), &self.csv)
                ?;
            std::fs::write(dir.join(format!("{suite}.txt")), &self.summary)
                ?;
        }
        if self.failures.is_empty() {
            Ok(())
        } else {
            Err(CmdError::Threshold(format!("thresholds missed: {}", self.failures.join("; "))))
        }
    }
}

pub fn run(args: Args) -> CmdResult {
    let cfg = load_config(&args.config)?;
    let (model, sched) = load_model(&args.model)?;
    let ss = stage_schedule(&cfg, &sched)?;
    let sampler = SamplerConfig {
        steps: cfg.ddim_steps,
        guidance_w: cfg.guidance_w,
        eta: cfg.eta,
        record_trajectory: false,
    };
    let bands = AttributeBands::new(cfg.layout_band, cfg.content_band, cfg.material_band, ss.n)?;
    let base = RngStream::new(args.seed, 0);
    let mut rep = Reporter::new(&args, &cfg);

    match args.suite.as_str() {
        "accuracy" => {
            let labels: Vec<AttributeLabel> = AttributeLabel::all().collect();
            let per_label = cfg.eval_samples.div_ceil(labels.len()).max(1);
            let report =
                attribute_accuracy(&model, &sched, ss, &labels, per_label, &sampler, &base)?;
            rep.line(format!("accuracy: {}", report.summary()));
            rep.csv_line("factor,rate,hits,valid,oracle_errors");
            for (name, r) in [
                ("layout", report.layout),
                ("content", report.content),
                ("material", report.material),
            ] {
                rep.csv_line(format!(
                    "{name},{},{},{},{}",
                    r.rate(),
                    r.hits,
                    r.valid,
                    r.oracle_errors
                ));
            }
            rep.check("layout accuracy", report.layout.rate(), cfg.eval_accuracy_min);
            rep.check("content accuracy", report.content.rate(), cfg.eval_accuracy_min);
            rep.check("material accuracy", report.material.rate(), cfg.eval_accuracy_min);
        }
        "transfer" => {
            let a = AttributeLabel::new(Layout::TL, Content::Circle, Material::Solid);
            let mut b_mat = a;
            b_mat.material = Material::Checker;
            let mat = run_transfer(
                &model,
                &sched,
                ss,
                a,
                b_mat,
                bands.material.lo,
                bands.material.hi,
                Factor::Material,
                cfg.eval_trials,
                &sampler,
                &base.derive(1),
            )?;
            rep.line(format!("material-band swap: {}", mat.summary()));
            let mut b_lay = a;
            b_lay.layout = Layout::BR;
            let lay = run_transfer(
                &model,
                &sched,
                ss,
                a,
                b_lay,
                bands.layout.lo,
                bands.layout.hi,
                Factor::Layout,
                cfg.eval_trials,
                &sampler,
                &base.derive(2),
            )?;
            rep.line(format!("layout-band swap:   {}", lay.summary()));
            rep.csv_line("experiment,target_rate,retention_min");
            rep.csv_line(format!("material_band,{},{}", mat.target.rate(), mat.min_retention()));
            rep.csv_line(format!("layout_band,{},{}", lay.target.rate(), lay.min_retention()));

            rep.check("material-band target", mat.target.rate(), cfg.eval_transfer_min);
            let mat_layout_ret = mat
                .retention
                .iter()
                .find(|(f, _)| *f == Factor::Layout)
                .map(|(_, r)| r.rate())
                .unwrap_or(0.0);
            rep.check("material-band layout retention", mat_layout_ret, cfg.eval_transfer_min);
            rep.check("layout-band target", lay.target.rate(), cfg.eval_transfer_min);
            let lay_mat_ret = lay
                .retention
                .iter()
                .find(|(f, _)| *f == Factor::Material)
                .map(|(_, r)| r.rate())
                .unwrap_or(0.0);
            rep.check("layout-band material retention", lay_mat_ret, cfg.eval_transfer_min);
        }
        "mix3" => {
            // three scenes with pairwise-distinct factors, inverted per stage
            let la = AttributeLabel::new(Layout::TL, Content::Circle, Material::Solid);
            let lb = AttributeLabel::new(Layout::BR, Content::Square, Material::HStripe);
            let lc = AttributeLabel::new(Layout::TR, Content::Cross, Material::Checker);
            let mut spectra = Vec::new();
            for (i, label) in [la, lb, lc].into_iter().enumerate() {
                let img = render(&SceneSpec::clean(label));
                let inv_cfg = InversionConfig {
                    mode: InversionMode::Prospect,
                    iterations: cfg.invert_iters,
                    lr: cfg.invert_lr,
                    dropout: cfg.invert_dropout,
                    seed: args.seed ^ (i as u64 + 1),
                    ..Default::default()
                };
                let r = prospect_invert(&model, &sched, ss, &[img], &inv_cfg)?;
                spectra.push(r.spectrum);
            }
            let expect = AttributeLabel::new(la.layout, lb.content, lc.material);
            let report = run_mix3(
                &model,
                &sched,
                ss,
                &spectra[0],
                &spectra[1],
                &spectra[2],
                &bands,
                expect,
                cfg.eval_mix_trials,
                &sampler,
                &base.derive(3),
            )?;
            rep.line(format!("mix3: {}", report.summary()));
            rep.csv_line("metric,rate");
            rep.csv_line(format!("layout,{}", report.layout.rate()));
            rep.csv_line(format!("content,{}", report.content.rate()));
            rep.csv_line(format!("material,{}", report.material.rate()));
            rep.csv_line(format!("all_three,{}", report.all_three.rate()));
            rep.check("mix3 all-three hit rate", report.all_three.rate(), cfg.eval_mix3_min);
        }
        "calibrate" => {
            let trials = (cfg.eval_trials / 10).max(8);
            let cal = calibrate_bands(&model, &sched, ss, trials, &sampler, &base.derive(4))?;
            rep.csv_line("layout_band,content_band,material_band,score_layout,score_content,score_material,min_score");
            for cell in &cal.cells {
                rep.csv_line(format!(
                    "{},{},{},{},{},{},{}",
                    cell.bands.layout,
                    cell.bands.content,
                    cell.bands.material,
                    cell.scores[0],
                    cell.scores[1],
                    cell.scores[2],
                    cell.min_score()
                ));
            }
            rep.line(format!(
                "calibrate: best partition layout={} content={} material={} ({} cells, {} trials/cell)",
                cal.best.layout,
                cal.best.content,
                cal.best.material,
                cal.cells.len(),
                trials
            ));
        }
        "compare" => {
            let data_dir = args
                .data
                .as_ref()
                .ok_or_else(|| CmdError::usage("--data DIR is required for the compare suite"))?;
            let items = load_dataset(data_dir)?;
            let take = items.len().min(10);
            let mut ti_mses = Vec::new();
            let mut ps_mses = Vec::new();
            rep.csv_line("image,ti_mse,ti_psnr,prospect_mse,prospect_psnr,ti_edit,prospect_edit");
            for (i, item) in items.iter().take(take).enumerate() {
                let report = compare_inversions(
                    &model,
                    &sched,
                    ss,
                    &item.image,
                    item.spec.label,
                    cfg.invert_iters,
                    &bands,
                    3,
                    20,
                    &sampler,
                    args.seed ^ (i as u64) << 8,
                    &base.derive(5 + i as u64),
                )?;
                rep.line(format!(
                    "image {i}: ti mse {:.4} ({:.1} dB) | prospect mse {:.4} ({:.1} dB)",
                    report.ti.recon_mse,
                    report.ti.recon_psnr,
                    report.prospect.recon_mse,
                    report.prospect.recon_psnr
                ));
                rep.csv_line(format!(
                    "{i},{},{},{},{},{},{}",
                    report.ti.recon_mse,
                    report.ti.recon_psnr,
                    report.prospect.recon_mse,
                    report.prospect.recon_psnr,
                    report.ti.edit.target.rate(),
                    report.prospect.edit.target.rate()
                ));
                ti_mses.push(report.ti.recon_mse);
                ps_mses.push(report.prospect.recon_mse);
            }
            let med = |xs: &mut Vec<f32>| -> f32 {
                xs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
                xs[xs.len() / 2]
            };
            let ti_med = med(&mut ti_mses);
            let ps_med = med(&mut ps_mses);
            rep.line(format!(
                "median mse: ti {ti_med:.4} ({:.1} dB) | prospect {ps_med:.4} ({:.1} dB)",
                psnr_from_mse(ti_med),
                psnr_from_mse(ps_med)
            ));
            rep.check_max("prospect/ti median mse ratio", ps_med / ti_med, 0.7);
            rep.check("prospect reconstruction psnr (dB)", psnr_from_mse(ps_med), 20.0);
        }
        other => {
            return Err(CmdError::usage(format!(
                "unknown suite `{other}` (accuracy|transfer|mix3|calibrate|compare)"
            )));
        }
    }

    rep.finish(&args.suite)
}
