//! Experiment driver for the DM-MIMO link simulator: configuration, seeded
//! Monte Carlo sweeps, training runs and CSV/JSON output.

pub mod config;
pub mod error;
pub mod experiments;
pub mod output;

use std::path::PathBuf;

use dmmimo_core::jscc::ToyCodec;

use config::{Experiment, ExperimentConfig, PredictorData};
use error::{HarnessError, Result};
use experiments::{e2e, gradient_check, load_predictor, mse_sweep, svd_stats, training};
use output::{ensure_dir, load_checkpoint, save_checkpoint, write_csv, write_json, Layout, Provenance};

/// Files written and a short human-readable summary.
#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub files: Vec<PathBuf>,
    pub lines: Vec<String>,
}

/// Runs `exp` and writes its outputs under `cfg.common.out`.
pub fn run(cfg: &ExperimentConfig, exp: Experiment) -> Result<RunSummary> {
    cfg.validate(exp)?;
    let prov = Provenance {
        config_sha256: cfg.hash(exp),
        seed: cfg.common.seed,
    };
    let layout = Layout::new(&cfg.common.out);
    ensure_dir(&layout.dir)?;
    let mut s = RunSummary::default();

    match exp {
        Experiment::SvdStats => {
            let r = svd_stats::run_svd_stats(cfg)?;
            s.files.push(layout.file("svd_stats.json"));
            write_json(&s.files[0], &prov, r.to_json())?;
            s.files.push(layout.file("svd_hist.csv"));
            write_csv(&s.files[1], &prov, &r.histogram_table())?;
            for (i, (lin, d)) in r.mean_lambda_sq.iter().zip(&r.mean_lambda_sq_db).enumerate() {
                s.lines.push(format!("E[lambda_{}^2] = {lin:.5} ({d:.3} dB)", i + 1));
            }
            if let (Some(a), Some(b)) = (r.gap_ratio_of_means_db(), r.gap_mean_db_difference_db()) {
                s.lines.push(format!("gap: ratio of means {a:.3} dB, mean dB difference {b:.3} dB"));
            }
        }
        Experiment::MseSweep => {
            let predictor = load_predictor(&cfg.common.predictor)?;
            let r = mse_sweep::run_mse_sweep(cfg, &predictor)?;
            let path = layout.file("mse_sweep.csv");
            write_csv(&path, &prov, &mse_sweep::metric_table(&r.rows, cfg.common.antennas))?;
            s.files.push(path);
            for (snr, trace) in cfg.mse_sweep.snr.iter().zip(&r.traces) {
                let path = layout.file(&format!("trace_snr_{}.csv", output::fmt_f64(*snr)));
                let table = output::Table {
                    columns: vec!["t".into(), "subchannel".into(), "branch".into(), "row_norm".into()],
                    rows: trace
                        .to_csv()
                        .lines()
                        .skip(1)
                        .map(|l| l.split(',').map(str::to_string).collect())
                        .collect(),
                };
                write_csv(&path, &prov, &table)?;
                s.files.push(path);
            }
            for row in &r.rows {
                s.lines.push(format!(
                    "snr {:>5} dB: eq {:?} dm {:?}",
                    output::fmt_f64(row.snr_db),
                    row.mse_eq,
                    row.mse_dm
                ));
            }
        }
        Experiment::E2eEval => {
            let stage1 = ToyCodec::from_checkpoint(&load_checkpoint(&layout.codec_stage1())?)?;
            let stage3 = ToyCodec::from_checkpoint(&load_checkpoint(&layout.codec_stage3())?)?;
            let predictor = load_predictor(&cfg.common.predictor)?;
            let rows = e2e::run_e2e(cfg, &stage1, &stage3, &predictor)?;
            let path = layout.file("e2e.csv");
            write_csv(&path, &prov, &e2e::e2e_table(&rows))?;
            s.files.push(path);
            for r in &rows {
                s.lines.push(format!(
                    "snr {:>5} dB: stage1 {:.5} stage1+dm {:.5} stage3+dm {:.5}",
                    output::fmt_f64(r.snr_db),
                    r.stage1,
                    r.stage1_dm,
                    r.stage3_dm
                ));
            }
        }
        Experiment::Train(1) => {
            let (codec, report) = training::run_stage1(cfg)?;
            let ck = layout.codec_stage1();
            save_checkpoint(&ck, &prov, codec.to_checkpoint())?;
            let loss = layout.file("stage1_loss.csv");
            write_csv(&loss, &prov, &training::loss_table(&training::codec_history(&report)))?;
            s.lines.push(format!("final loss {:?}", report.epoch_loss.last()));
            s.files.extend([ck, loss]);
        }
        Experiment::Train(2) => {
            let codec = match cfg.stage2.data {
                PredictorData::Codec => Some(ToyCodec::from_checkpoint(&load_checkpoint(&layout.codec_stage1())?)?),
                PredictorData::UnitGaussian => None,
            };
            let out = training::run_stage2(cfg, codec.as_ref())?;
            let ck = layout.predictor();
            save_checkpoint(&ck, &prov, out.model.to_checkpoint())?;
            let loss = layout.file("stage2_loss.csv");
            write_csv(&loss, &prov, &training::loss_table(&training::predictor_history(&out.history)))?;
            let eval = layout.file("stage2_eval.json");
            write_json(&eval, &prov, out.eval.to_json())?;
            s.lines.push(format!(
                "held-out loss {:.5} (oracle {:.5}, E_t[alpha_bar] {:.5}), msd/oracle power {:.4}",
                out.eval.loss,
                out.eval.oracle_loss,
                out.eval.expected_alpha_bar,
                out.eval.msd_ratio()
            ));
            s.files.extend([ck, loss, eval]);
        }
        Experiment::Train(3) => {
            let codec = ToyCodec::from_checkpoint(&load_checkpoint(&layout.codec_stage1())?)?;
            let predictor = load_predictor(&cfg.common.predictor)?;
            let (codec, report) = training::run_stage3(cfg, &codec, &predictor)?;
            let ck = layout.codec_stage3();
            save_checkpoint(&ck, &prov, codec.to_checkpoint())?;
            let loss = layout.file("stage3_loss.csv");
            write_csv(&loss, &prov, &training::loss_table(&training::codec_history(&report)))?;
            s.lines.push(format!("final loss {:?}", report.epoch_loss.last()));
            s.files.extend([ck, loss]);
        }
        Experiment::Train(stage) => return Err(HarnessError::InvalidStage(stage)),
        Experiment::GradientCheck => {
            let r = gradient_check::run_gradient_check(cfg)?;
            let path = layout.file("gradient_check.json");
            write_json(&path, &prov, r.to_json())?;
            s.files.push(path);
            s.lines.push(format!("max relative error {:e} (tolerance {:e})", r.worst(), r.tolerance));
            if !r.passed() {
                return Err(HarnessError::GradientCheckFailed {
                    error: r.worst(),
                    tolerance: r.tolerance,
                });
            }
        }
    }
    Ok(s)
}
