//! Training, evaluation and the four-mode ablation.

mod config;
mod optim;

pub use config::{Mode, TrainConfig, KEYS};
pub use optim::{lr_schedule, Adam, PlateauScheduler};

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::data::{Dataset, MixtureSample};
use crate::error::{Error, Result};
use crate::gradmod::{self, ConflictStats, ConflictTracker, GradientSet, Task};
use crate::losses::{self, LossBundle};
use crate::model::UnifiedNet;
use crate::params::ParamStore;
use crate::signal;
use crate::tensor::Tensor;

/// Spectrogram frame and hop used for probe exports.
pub const PROBE_FRAME: usize = 256;
pub const PROBE_HOP: usize = 64;

/// What one optimizer step did.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub losses: LossBundle,
    /// Conflict statistics before modulation; `None` without an SE network.
    pub conflict: Option<ConflictStats>,
    /// Conflict statistics of the gradients actually combined.
    pub post_conflict: Option<ConflictStats>,
    /// Global norm of the combined gradient before clipping.
    pub grad_norm: f64,
    pub backward_passes: usize,
    pub perm: Vec<usize>,
}

fn layer_dump(store: &ParamStore, name: &str) -> String {
    match store.value(name) {
        Ok(t) => {
            let finite: Vec<f64> = t.data().iter().copied().filter(|v| v.is_finite()).collect();
            let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            format!(
                "layer `{name}` shape {:?}: {} non-finite values, finite range [{lo}, {hi}]",
                t.shape(),
                t.len() - finite.len()
            )
        }
        Err(_) => format!("layer `{name}`"),
    }
}

fn check_finite(g: &GradientSet, store: &ParamStore, what: &str) -> Result<()> {
    match g.first_non_finite() {
        Some(name) => Err(Error::NonFinite(format!("{what} gradient; {}", layer_dump(store, name)))),
        None => Ok(()),
    }
}

/// One forward pass, two backward passes over the retained tape, optional
/// modulation, global clipping and an Adam update.
pub fn train_step(
    net: &UnifiedNet,
    store: &mut ParamStore,
    adam: &mut Adam,
    sample: &MixtureSample,
    cfg: &TrainConfig,
) -> Result<StepOutcome> {
    let mut tape = Tape::new();
    let fwd = net.forward(&mut tape, store, &sample.x_n)?;
    let (l_ss, upit) = losses::upit_graph(&mut tape, &fwd.estimates, &sample.sources)?;
    let l_ss_value = tape.value(l_ss).item();

    let g_ss = tape.gradients(l_ss, store, Task::Ss)?;
    check_finite(&g_ss, store, "SS")?;
    let mut passes = 1;

    let lambda = cfg.mode.effective_lambda(cfg.lambda_se);
    let (l_se_value, g_se) = if net.with_se {
        let h_c = net.clean_target(store, &sample.x_c)?;
        let l_se = losses::se_loss_graph(&mut tape, fwd.h_e, &h_c)?;
        let value = tape.value(l_se).item();
        let scope = g_ss.clone().restrict(UnifiedNet::in_se_scope);
        let g = if lambda > 0.0 {
            let weighted = tape.scale(l_se, lambda)?;
            passes += 1;
            let g = tape.gradients(weighted, store, Task::Se)?.restrict(UnifiedNet::in_se_scope);
            check_finite(&g, store, "SE")?;
            g
        } else {
            // the weighted SE loss is identically zero
            scope.zeros_like(Task::Se)
        };
        (value, Some(g))
    } else {
        (0.0, None)
    };

    let (conflict, post_conflict, mut combined) = match &g_se {
        Some(g_se) => {
            let pre = gradmod::conflict_stats(g_se, &g_ss)?;
            let used = if cfg.mode.modulates() {
                gradmod::modulate(g_se, &g_ss)?
            } else {
                g_se.clone()
            };
            let post = gradmod::conflict_stats(&used, &g_ss)?;
            (Some(pre), Some(post), gradmod::combine(&used, &g_ss)?)
        }
        None => (None, None, g_ss),
    };
    let grad_norm = combined.clip_global_norm(cfg.clip_norm);
    adam.step(store, &combined)?;

    Ok(StepOutcome {
        losses: losses::total_loss(l_se_value, l_ss_value, lambda),
        conflict,
        post_conflict,
        grad_norm,
        backward_passes: passes,
        perm: upit.perm,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub si_snri: f64,
    pub sdri: f64,
}

/// Improvement of the estimates over the noisy mixture, averaged over sources
/// under the permutation that maximizes SI-SNR.
pub fn improvement_metrics(estimates: &[Tensor], sources: &[Tensor], x_n: &Tensor) -> Result<EvalMetrics> {
    let upit = losses::upit_ss_loss(estimates, sources)?;
    let c = sources.len() as f64;
    let (mut si, mut sd) = (0.0, 0.0);
    for (k, &j) in upit.perm.iter().enumerate() {
        let s = &sources[j];
        si += losses::si_snr(&estimates[k], s)? - losses::si_snr(x_n, s)?;
        sd += losses::snr(&estimates[k], s)? - losses::snr(x_n, s)?;
    }
    Ok(EvalMetrics {
        si_snri: si / c,
        sdri: sd / c,
    })
}

/// Mean SI-SNRi and SDRi over `samples`.
pub fn evaluate(net: &UnifiedNet, store: &ParamStore, samples: &[MixtureSample]) -> Result<EvalMetrics> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluate", "empty split"));
    }
    let (mut si, mut sd) = (0.0, 0.0);
    for s in samples {
        let est = net.separate_waveforms(store, &s.x_n)?;
        let m = improvement_metrics(&est, &s.sources, &s.x_n)?;
        si += m.si_snri;
        sd += m.sdri;
    }
    let n = samples.len() as f64;
    Ok(EvalMetrics {
        si_snri: si / n,
        sdri: sd / n,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_se: f64,
    pub l_ss: f64,
    pub l_total: f64,
    pub valid_si_snri: f64,
    pub valid_sdri: f64,
    /// Mean pre-modulation conflict fraction; `None` without an SE network.
    pub conflict_fraction: Option<f64>,
    /// Mean conflict fraction of the gradients actually applied.
    pub post_conflict_fraction: Option<f64>,
    /// Learning rate in effect during the epoch.
    pub lr: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,l_se,l_ss,l_total,valid_si_snri_db,valid_sdri_db,conflict_fraction,post_conflict_fraction,lr";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.l_se,
            self.l_ss,
            self.l_total,
            self.valid_si_snri,
            self.valid_sdri,
            opt(self.conflict_fraction),
            opt(self.post_conflict_fraction),
            self.lr
        )
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub fn conflict_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,mean_fraction\n");
    for r in rows {
        let _ = writeln!(s, "{},{}", r.epoch, opt(r.conflict_fraction));
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub mode: Mode,
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_valid: EvalMetrics,
    /// Test-split scores of the best-validation parameters.
    pub test: Option<EvalMetrics>,
    pub num_params: usize,
    pub steps: usize,
    /// Steps whose applied gradients still conflicted somewhere.
    pub steps_with_post_conflict: usize,
    pub best_params: ParamStore,
}

/// Trains for `cfg.epochs` epochs. With `out`, writes `config.txt`,
/// `metrics.csv`, `conflict.csv`, `best.ckpt` (rewritten at each new best
/// validation score), `summary.txt` and probe spectrograms.
pub fn train(
    cfg: &TrainConfig,
    dataset: &Dataset,
    out: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::invalid("train", "empty training split"));
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.txt"), cfg.to_kv())?;
    }
    let net = UnifiedNet::new(cfg.model.clone(), cfg.mode.has_se_net())?;
    let mut store = net.init(cfg.seed);
    let num_params = store.num_values();
    let mut adam = Adam::new(cfg.lr);
    let mut sched = PlateauScheduler::new(cfg.lr, cfg.patience, cfg.halve_after_epoch);
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, EvalMetrics, ParamStore)> = None;
    let (mut steps, mut post_conflicted) = (0, 0);

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ epoch as u64);
        order.shuffle(&mut rng);
        let lr = adam.lr;
        let (mut se, mut ss, mut tot) = (0.0, 0.0, 0.0);
        let (mut pre, mut post) = (ConflictTracker::default(), ConflictTracker::default());
        for &i in &order {
            let o = train_step(&net, &mut store, &mut adam, &dataset.train[i], cfg)?;
            se += o.losses.l_se;
            ss += o.losses.l_ss;
            tot += o.losses.l_total;
            if let Some(c) = &o.conflict {
                pre.record(c);
            }
            if let Some(c) = &o.post_conflict {
                post.record(c);
                if c.conflicting > 0 {
                    post_conflicted += 1;
                }
            }
            steps += 1;
        }
        let n = order.len() as f64;
        let valid = if dataset.valid.is_empty() {
            EvalMetrics { si_snri: -ss / n, sdri: f64::NAN }
        } else {
            evaluate(&net, &store, &dataset.valid)?
        };
        let m = EpochMetrics {
            epoch,
            l_se: se / n,
            l_ss: ss / n,
            l_total: tot / n,
            valid_si_snri: valid.si_snri,
            valid_sdri: valid.sdri,
            conflict_fraction: pre.mean(),
            post_conflict_fraction: post.mean(),
            lr,
        };
        if sched.observe(epoch, valid.si_snri) {
            if let Some(dir) = out {
                store.save(dir.join("best.ckpt"))?;
            }
            best = Some((epoch, valid, store.clone()));
        }
        adam.lr = sched.lr();
        on_epoch(&m);
        metrics.push(m);
        if let Some(dir) = out {
            std::fs::write(dir.join("metrics.csv"), metrics_csv(&metrics))?;
            std::fs::write(dir.join("conflict.csv"), conflict_csv(&metrics))?;
        }
    }

    let (best_epoch, best_valid, best_params) = best.expect("at least one epoch");
    let test = if dataset.test.is_empty() {
        None
    } else {
        Some(evaluate(&net, &best_params, &dataset.test)?)
    };
    if let Some(dir) = out {
        let mut s = String::new();
        let _ = writeln!(s, "mode = {}", cfg.mode);
        let _ = writeln!(s, "params = {num_params}");
        let _ = writeln!(s, "best_epoch = {best_epoch}");
        let _ = writeln!(s, "valid_si_snri_db = {}", best_valid.si_snri);
        let _ = writeln!(s, "valid_sdri_db = {}", best_valid.sdri);
        if let Some(t) = test {
            let _ = writeln!(s, "test_si_snri_db = {}", t.si_snri);
            let _ = writeln!(s, "test_sdri_db = {}", t.sdri);
        }
        std::fs::write(dir.join("summary.txt"), s)?;
        let probe = dataset.test.first().or(dataset.valid.first()).unwrap_or(&dataset.train[0]);
        write_probe(&net, &best_params, probe, dir)?;
    }
    Ok(TrainReport {
        mode: cfg.mode,
        metrics,
        best_epoch,
        best_valid,
        test,
        num_params,
        steps,
        steps_with_post_conflict: post_conflicted,
        best_params,
    })
}

/// Writes PGM and CSV spectrograms of the noisy mixture and each separated
/// source: `probe_mixture.*`, `probe_source{k}.*`.
pub fn write_probe(net: &UnifiedNet, store: &ParamStore, sample: &MixtureSample, dir: &Path) -> Result<()> {
    let est = net.separate_waveforms(store, &sample.x_n)?;
    let mut panels = vec![("probe_mixture".to_string(), &sample.x_n)];
    for (k, e) in est.iter().enumerate() {
        panels.push((format!("probe_source{k}"), e));
    }
    for (name, x) in panels {
        let s = signal::spectrogram(x.data(), PROBE_FRAME.min(x.len()), PROBE_HOP)?;
        s.write_pgm(dir.join(format!("{name}.pgm")))?;
        s.write_csv(dir.join(format!("{name}.csv")))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationScores {
    pub si_snri: f64,
    pub sdri: f64,
    pub best_epoch: usize,
    pub mean_conflict: Option<f64>,
    pub steps_with_post_conflict: usize,
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub mode: Mode,
    pub params: usize,
    pub result: std::result::Result<AblationScores, String>,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, mode: Mode) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn si_snri(&self, mode: Mode) -> Option<f64> {
        self.row(mode).and_then(|r| r.result.as_ref().ok()).map(|s| s.si_snri)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("mode,test_si_snri_db,test_sdri_db,params,mean_conflict_fraction,best_epoch,error\n");
        for r in &self.rows {
            match &r.result {
                Ok(a) => {
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{},{},",
                        r.mode,
                        a.si_snri,
                        a.sdri,
                        r.params,
                        opt(a.mean_conflict),
                        a.best_epoch
                    );
                }
                Err(e) => {
                    let _ = writeln!(s, "{},,,{},,,\"{}\"", r.mode, r.params, e.replace('"', "'"));
                }
            }
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<18} {:>10} {:>10} {:>9} {:>10}\n",
            "mode", "SI-SNRi", "SDRi", "params", "conflict"
        );
        for r in &self.rows {
            match &r.result {
                Ok(a) => {
                    let c = a.mean_conflict.map(|c| format!("{:.3}", c)).unwrap_or_else(|| "-".into());
                    let _ = writeln!(
                        s,
                        "{:<18} {:>10.3} {:>10.3} {:>9} {:>10}",
                        r.mode.name(),
                        a.si_snri,
                        a.sdri,
                        r.params,
                        c
                    );
                }
                Err(e) => {
                    let _ = writeln!(s, "{:<18} failed: {e}", r.mode.name());
                }
            }
        }
        s
    }
}

/// Directory name used for a mode's outputs.
pub fn mode_dir(mode: Mode) -> String {
    mode.name().replace('+', "-")
}

/// Trains every mode in `modes` from the same seed on the same data. A
/// failing row records its error and the remaining rows still run.
pub fn run_ablation(
    base: &TrainConfig,
    modes: &[Mode],
    dataset: &Dataset,
    out: Option<&Path>,
    mut on_epoch: impl FnMut(Mode, &EpochMetrics),
) -> AblationReport {
    let rows = modes
        .iter()
        .map(|&mode| {
            let cfg = TrainConfig { mode, ..base.clone() };
            let params = UnifiedNet::new(cfg.model.clone(), mode.has_se_net())
                .map(|n| n.init(cfg.seed).num_values())
                .unwrap_or(0);
            let dir = out.map(|d| d.join(mode_dir(mode)));
            let result = train(&cfg, dataset, dir.as_deref(), |m| on_epoch(mode, m))
                .map(|r| {
                    let mean_conflict = {
                        let v: Vec<f64> = r.metrics.iter().filter_map(|m| m.conflict_fraction).collect();
                        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
                    };
                    let t = r.test.unwrap_or(r.best_valid);
                    AblationScores {
                        si_snri: t.si_snri,
                        sdri: t.sdri,
                        best_epoch: r.best_epoch,
                        mean_conflict,
                        steps_with_post_conflict: r.steps_with_post_conflict,
                    }
                })
                .map_err(|e| e.to_string());
            AblationRow { mode, params, result }
        })
        .collect();
    let report = AblationReport { rows };
    if let Some(d) = out {
        let _ = std::fs::create_dir_all(d).and_then(|_| std::fs::write(d.join("ablation.csv"), report.to_csv()));
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetSpec;
    use crate::model::ModelConfig;

    fn tiny_cfg(mode: Mode) -> TrainConfig {
        TrainConfig {
            mode,
            lr: 1e-3,
            epochs: 2,
            model: ModelConfig {
                filters: 6,
                kernel: 8,
                stride: 4,
                chunk: 8,
                se_blocks: 1,
                ss_blocks: 1,
                hidden: 3,
                sources: 2,
                ..ModelConfig::default()
            },
            data: DatasetSpec {
                num_train: 3,
                num_valid: 2,
                num_test: 2,
                len: 300,
                ..DatasetSpec::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn improvement_of_mixture_over_itself_is_zero() {
        let ds = Dataset::generate(&tiny_cfg(Mode::Unified).data).unwrap();
        let s = &ds.test[0];
        let est = vec![s.x_n.clone(); 2];
        let m = improvement_metrics(&est, &s.sources, &s.x_n).unwrap();
        assert_eq!(m.si_snri, 0.0);
        assert_eq!(m.sdri, 0.0);
    }

    #[test]
    fn perfect_estimates_reach_the_cap() {
        let ds = Dataset::generate(&tiny_cfg(Mode::Unified).data).unwrap();
        let s = &ds.test[0];
        let m = improvement_metrics(&s.sources, &s.sources, &s.x_n).unwrap();
        let want: f64 = s
            .sources
            .iter()
            .map(|r| losses::si_snr(r, r).unwrap() - losses::si_snr(&s.x_n, r).unwrap())
            .sum::<f64>()
            / 2.0;
        assert_eq!(m.si_snri, want);
        assert!(evaluate(&UnifiedNet::new(tiny_cfg(Mode::Unified).model, true).unwrap(), &ParamStore::new(), &[]).is_err());
    }

    #[test]
    fn step_contracts_per_mode() {
        let ds = Dataset::generate(&tiny_cfg(Mode::Unified).data).unwrap();
        for mode in Mode::ALL {
            let cfg = tiny_cfg(mode);
            let net = UnifiedNet::new(cfg.model.clone(), mode.has_se_net()).unwrap();
            let mut store = net.init(1);
            let mut adam = Adam::new(cfg.lr);
            let o = train_step(&net, &mut store, &mut adam, &ds.train[0], &cfg).unwrap();
            match mode {
                Mode::BaselineSs => {
                    assert_eq!(o.backward_passes, 1);
                    assert!(o.conflict.is_none());
                    assert!(store.names().all(|n| !n.starts_with("se.")));
                }
                Mode::UnifiedNoSeLoss => {
                    assert_eq!(o.losses.l_total, o.losses.l_ss);
                    assert_eq!(o.conflict.unwrap().fraction, 0.0);
                }
                Mode::Unified => assert_eq!(o.backward_passes, 2),
                Mode::UnifiedGm => assert_eq!(o.post_conflict.unwrap().conflicting, 0),
            }
        }
    }

    #[test]
    fn zero_lambda_unified_matches_nose_loss_mode() {
        let ds = Dataset::generate(&tiny_cfg(Mode::Unified).data).unwrap();
        let mut stores = Vec::new();
        for (mode, lambda) in [(Mode::UnifiedGm, 0.0), (Mode::Unified, 0.0), (Mode::UnifiedNoSeLoss, 0.1)] {
            let cfg = TrainConfig { lambda_se: lambda, ..tiny_cfg(mode) };
            let net = UnifiedNet::new(cfg.model.clone(), true).unwrap();
            let mut store = net.init(4);
            let mut adam = Adam::new(cfg.lr);
            for s in &ds.train {
                train_step(&net, &mut store, &mut adam, s, &cfg).unwrap();
            }
            stores.push(store);
        }
        for name in stores[0].names() {
            assert_eq!(stores[0].value(name).unwrap(), stores[1].value(name).unwrap());
            assert_eq!(stores[0].value(name).unwrap(), stores[2].value(name).unwrap());
        }
    }

    #[test]
    fn clipped_gradient_respects_the_bound() {
        let ds = Dataset::generate(&tiny_cfg(Mode::Unified).data).unwrap();
        let cfg = TrainConfig { clip_norm: 1e-3, ..tiny_cfg(Mode::UnifiedGm) };
        let net = UnifiedNet::new(cfg.model.clone(), true).unwrap();
        let mut store = net.init(2);
        let mut adam = Adam::new(cfg.lr);
        let o = train_step(&net, &mut store, &mut adam, &ds.train[1], &cfg).unwrap();
        assert!(o.grad_norm > 1e-3);
        let applied: f64 = store.iter().map(|(_, p)| p.grad.sq_norm()).sum::<f64>().sqrt();
        assert!(applied <= 1e-3 + 1e-12, "{applied}");
    }

    #[test]
    fn ablation_report_shape() {
        let base = tiny_cfg(Mode::Unified);
        let ds = Dataset::generate(&base.data).unwrap();
        let r = run_ablation(&TrainConfig { epochs: 1, ..base }, &Mode::ALL, &ds, None, |_, _| {});
        assert_eq!(r.rows.len(), 4);
        let p = |m| r.row(m).unwrap().params;
        assert_eq!(p(Mode::Unified), p(Mode::UnifiedGm));
        assert_eq!(p(Mode::Unified), p(Mode::UnifiedNoSeLoss));
        assert!(p(Mode::BaselineSs) < p(Mode::Unified));
        assert!(r.rows.iter().all(|row| row.result.is_ok()));
        assert_eq!(r.to_csv().lines().count(), 5);
    }

    #[test]
    fn failing_rows_do_not_stop_the_grid() {
        let base = tiny_cfg(Mode::Unified);
        let ds = Dataset::generate(&base.data).unwrap();
        // se_blocks = 0 is only invalid for modes with an SE network
        let mut cfg = TrainConfig { epochs: 1, ..base };
        cfg.model.se_blocks = 0;
        let r = run_ablation(&cfg, &Mode::ALL, &ds, None, |_, _| {});
        assert!(r.row(Mode::BaselineSs).unwrap().result.is_ok());
        assert!(r.row(Mode::Unified).unwrap().result.is_err());
    }
}
