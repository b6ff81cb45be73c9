//! Mini-batch training, test-set evaluation and the end-to-end gradient check.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::mlp::{Dense, Mlp, Normalizer};
use super::model::{solve_layer, Grads, LearnableParams, ModelKind, Pass, Physics, SampleOutput};
use super::{raw_weight_for, LearnError, LossBreakdown, TrainConfig, MAX_SKIP_FRACTION};
use crate::conic::{ConicSolver, SolverSettings};
use crate::grid::AdmittanceModel;
use crate::powerflow::{
    eval_measurements, solve_power_flow, Dataset, InjectionSpec, Location, MeasurementKind,
    MeasurementMeta, MeasurementSample,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

/// Serialized model: configuration, parameters, fixed normalisation and loss history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub kind: ModelKind,
    pub case_id: String,
    pub config: TrainConfig,
    pub w_raw: Vec<f64>,
    pub layers: Vec<Dense>,
    pub normalization: Normalizer,
    pub history: Vec<EpochRecord>,
}

impl TrainedModel {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, LearnError> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn params(&self) -> LearnableParams {
        LearnableParams {
            w_raw: self.w_raw.clone(),
            post: Mlp {
                layers: self.layers.clone(),
            },
        }
    }

    fn validate(&self) -> Result<(), LearnError> {
        let p = self.params();
        if !p.post.is_consistent() || p.post.layers.is_empty() {
            return Err(LearnError::Invalid("layer dimensions do not chain".into()));
        }
        if self.w_raw.iter().any(|w| !w.is_finite()) {
            return Err(LearnError::Invalid("non-finite raw weight".into()));
        }
        let n = &self.normalization;
        if n.in_mean.len() != p.post.input_dim()
            || n.in_scale.len() != p.post.input_dim()
            || n.out_mean.len() != p.post.output_dim()
            || n.out_scale.len() != p.post.output_dim()
        {
            return Err(LearnError::Invalid(
                "normalization does not match the layers".into(),
            ));
        }
        Ok(())
    }

    /// `epoch,L_acc,L_huber,L_reg,L_hybrid` lines.
    pub fn history_csv(&self) -> String {
        let mut s = String::from("epoch,L_acc,L_huber,L_reg,L_hybrid\n");
        for r in &self.history {
            s.push_str(&format!(
                "{},{:e},{:e},{:e},{:e}\n",
                r.epoch, r.loss.l_acc, r.loss.l_huber, r.loss.l_reg, r.loss.l_hybrid
            ));
        }
        s
    }
}

fn pool(workers: Option<usize>) -> Result<rayon::ThreadPool, LearnError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| LearnError::Invalid(format!("thread pool: {e}")))
}

fn target(s: &MeasurementSample) -> Vec<f64> {
    s.true_state.stacked()
}

fn check_layout(meta: &[MeasurementMeta], s: &MeasurementSample) -> Result<(), LearnError> {
    let same = s.meta.len() == meta.len()
        && s.meta
            .iter()
            .zip(meta)
            .all(|(a, b)| a.kind == b.kind && a.loc == b.loc);
    if same && s.z.len() == meta.len() {
        Ok(())
    } else {
        Err(LearnError::Invalid(
            "samples use different measurement layouts".into(),
        ))
    }
}

/// Runs Algorithm-style training of one model kind on the dataset's train split.
pub fn train(
    grid: &AdmittanceModel,
    dataset: &Dataset,
    kind: ModelKind,
    cfg: &TrainConfig,
    workers: Option<usize>,
) -> Result<TrainedModel, LearnError> {
    cfg.validate()?;
    let samples: Vec<&MeasurementSample> = dataset.train().collect();
    let first = samples
        .first()
        .ok_or_else(|| LearnError::Invalid("training split is empty".into()))?;
    for s in &samples {
        check_layout(&first.meta, s)?;
    }
    let phys = Physics::new(grid, &first.meta)?;
    let pool = pool(workers)?;
    let n = phys.n_buses();
    let m = phys.n_meas();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let w_raw = match kind {
        ModelKind::OptLayer => vec![raw_weight_for(1.0, cfg.eps_p); m],
        _ => Vec::new(),
    };
    let in_dim = match kind {
        ModelKind::OptLayer => phys.x_dim(),
        _ => m,
    };
    let mut params = LearnableParams {
        w_raw,
        post: Mlp::new(&[in_dim, 4 * n, 2 * n], &mut rng),
    };

    // Normalisation from the network inputs under the initial weights.
    let inputs: Vec<Result<Vec<f64>, LearnError>> = pool.install(|| {
        samples
            .par_iter()
            .map_init(ConicSolver::default, |solver, s| match kind {
                ModelKind::OptLayer => {
                    solve_layer(&phys, &params.w_raw, cfg.eps_p, &s.z, solver, false)
                        .map(|(rp, sol, _)| rp.x_part(&sol.x).to_vec())
                }
                _ => Ok(s.z.clone()),
            })
            .collect()
    });
    let (mut xs, mut ys, mut reasons) = (Vec::new(), Vec::new(), Vec::new());
    for (s, r) in samples.iter().zip(inputs) {
        match r {
            Ok(x) => {
                xs.push(x);
                ys.push(target(s));
            }
            Err(e) => reasons.push(e.to_string()),
        }
    }
    if reasons.len() as f64 > MAX_SKIP_FRACTION * samples.len() as f64 || xs.is_empty() {
        return Err(LearnError::TooManySkipped {
            epoch: 0,
            skipped: reasons.len(),
            total: samples.len(),
            reasons: reasons.into_iter().take(5).collect(),
        });
    }
    let norm = Normalizer::fit(&xs, &ys);

    let mut adam = AdamState::new(&params.shapes());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::with_capacity(samples.len());
        let mut reasons = Vec::new();
        let mut degenerate = 0usize;
        for batch in order.chunks(cfg.batch) {
            let pass = Pass {
                kind,
                params: &params,
                norm: &norm,
                phys: &phys,
                cfg,
                polish: false,
            };
            let outs: Vec<Result<SampleOutput, LearnError>> = pool.install(|| {
                batch
                    .par_iter()
                    .map_init(ConicSolver::default, |solver, &i| {
                        let s = samples[i];
                        pass.run(&s.z, &target(s), solver, true, None)
                    })
                    .collect()
            });
            let mut sum = Grads::zeros_like(&params);
            let mut ok = 0usize;
            for out in outs {
                match out {
                    Ok(o) => {
                        let g = o.grads.expect("gradients requested");
                        sum.add_scaled(&g, 1.0);
                        losses.push(o.loss);
                        degenerate += o.degenerate as usize;
                        ok += 1;
                    }
                    Err(e) => {
                        log::warn!("epoch {epoch}: skipping sample: {e}");
                        reasons.push(e.to_string());
                    }
                }
            }
            if ok > 0 {
                let mean = {
                    let mut g = Grads::zeros_like(&params);
                    g.add_scaled(&sum, 1.0 / ok as f64);
                    g
                };
                adam.update(&mut params.tensors_mut(), &mean.tensors(), cfg);
            }
        }
        if reasons.len() as f64 > MAX_SKIP_FRACTION * samples.len() as f64 {
            return Err(LearnError::TooManySkipped {
                epoch,
                skipped: reasons.len(),
                total: samples.len(),
                reasons: reasons.into_iter().take(5).collect(),
            });
        }
        let loss = LossBreakdown::mean(&losses);
        log::info!(
            "{} epoch {epoch}: L_hybrid {:.6e} L_acc {:.6e} L_huber {:.6e} L_reg {:.6e} (skipped {}, degenerate {degenerate})",
            kind.name(),
            loss.l_hybrid,
            loss.l_acc,
            loss.l_huber,
            loss.l_reg,
            reasons.len()
        );
        history.push(EpochRecord { epoch, loss });
    }

    Ok(TrainedModel {
        kind,
        case_id: dataset.case_id.clone(),
        config: cfg.clone(),
        w_raw: params.w_raw,
        layers: params.post.layers,
        normalization: norm,
        history,
    })
}

/// Test-set metrics of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub kind: ModelKind,
    /// Mean over evaluated samples; `L_huber` uses unit weights for every model.
    pub mean: LossBreakdown,
    pub per_sample: Vec<LossBreakdown>,
    pub predictions: Vec<Vec<f64>>,
    pub skipped: usize,
}

pub fn evaluate(
    tm: &TrainedModel,
    grid: &AdmittanceModel,
    samples: &[&MeasurementSample],
    workers: Option<usize>,
) -> Result<Evaluation, LearnError> {
    let first = samples
        .first()
        .ok_or_else(|| LearnError::Invalid("no samples to evaluate".into()))?;
    for s in samples {
        check_layout(&first.meta, s)?;
    }
    let phys = Physics::new(grid, &first.meta)?;
    let params = tm.params();
    let expected_in = match tm.kind {
        ModelKind::OptLayer => phys.x_dim(),
        _ => phys.n_meas(),
    };
    if params.post.input_dim() != expected_in || params.post.output_dim() != 2 * phys.n_buses() {
        return Err(LearnError::Invalid(format!(
            "model dimensions ({} → {}) do not fit the grid ({} → {})",
            params.post.input_dim(),
            params.post.output_dim(),
            expected_in,
            2 * phys.n_buses()
        )));
    }
    if tm.kind == ModelKind::OptLayer && params.w_raw.len() != phys.n_meas() {
        return Err(LearnError::Invalid(
            "weight count does not match the measurements".into(),
        ));
    }
    let pass = Pass {
        kind: tm.kind,
        params: &params,
        norm: &tm.normalization,
        phys: &phys,
        cfg: &tm.config,
        polish: false,
    };
    let unit = vec![1.0; phys.n_meas()];
    let outs: Vec<Result<SampleOutput, LearnError>> = pool(workers)?.install(|| {
        samples
            .par_iter()
            .map_init(ConicSolver::default, |solver, s| {
                pass.run(&s.z, &target(s), solver, false, Some(&unit))
            })
            .collect()
    });
    let mut per_sample = Vec::new();
    let mut predictions = Vec::new();
    let mut skipped = 0;
    for o in outs {
        match o {
            Ok(o) => {
                per_sample.push(o.loss);
                predictions.push(o.prediction);
            }
            Err(e) => {
                log::warn!("evaluation: skipping sample: {e}");
                skipped += 1;
            }
        }
    }
    if per_sample.is_empty() {
        return Err(LearnError::Invalid("every evaluation sample failed".into()));
    }
    Ok(Evaluation {
        kind: tm.kind,
        mean: LossBreakdown::mean(&per_sample),
        per_sample,
        predictions,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub name: String,
    pub n: usize,
    /// `‖analytic‖`.
    pub norm: f64,
    /// `‖analytic − fd‖ / max(‖analytic‖, ‖fd‖)`.
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub max_rel_error: f64,
    pub degenerate: bool,
}

/// Compares analytic gradients of `L_hybrid` for the layer model against central
/// differences with step `h`, re-solving the layer for every perturbed weight.
pub fn gradient_check(
    grid: &AdmittanceModel,
    meta: &[MeasurementMeta],
    z: &[f64],
    target: &[f64],
    cfg: &TrainConfig,
    h: f64,
) -> Result<GradCheckReport, LearnError> {
    cfg.validate()?;
    let phys = Physics::new(grid, meta)?;
    let n = phys.n_buses();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut post = Mlp::new(&[phys.x_dim(), 4 * n, 2 * n], &mut rng);
    for l in &mut post.layers {
        l.bias
            .iter_mut()
            .for_each(|b| *b = rng.random_range(-0.5..0.5));
    }
    let params = LearnableParams {
        w_raw: (0..phys.n_meas())
            .map(|_| raw_weight_for(rng.random_range(0.05..0.5), cfg.eps_p))
            .collect(),
        post,
    };
    let mut solver = ConicSolver::new(SolverSettings {
        tol: 1e-10,
        ..SolverSettings::default()
    });
    let x0 = {
        let (rp, sol, _) = solve_layer(&phys, &params.w_raw, cfg.eps_p, z, &mut solver, true)?;
        rp.x_part(&sol.x).to_vec()
    };
    let norm = Normalizer {
        in_mean: x0.iter().map(|v| v - 0.02).collect(),
        in_scale: vec![0.05; phys.x_dim()],
        out_mean: vec![0.0; 2 * n],
        out_scale: vec![0.1; 2 * n],
    };
    let loss = |p: &LearnableParams, solver: &mut ConicSolver| -> Result<f64, LearnError> {
        let pass = Pass {
            kind: ModelKind::OptLayer,
            params: p,
            norm: &norm,
            phys: &phys,
            cfg,
            polish: true,
        };
        Ok(pass.run(z, target, solver, false, None)?.loss.l_hybrid)
    };
    let pass = Pass {
        kind: ModelKind::OptLayer,
        params: &params,
        norm: &norm,
        phys: &phys,
        cfg,
        polish: true,
    };
    let out = pass.run(z, target, &mut solver, true, None)?;
    let analytic = out.grads.expect("gradients requested");

    let mut names = vec!["w_raw".to_string()];
    for l in 0..params.post.layers.len() {
        names.push(format!("layer{l}.weights"));
        names.push(format!("layer{l}.bias"));
    }
    let mut groups = Vec::new();
    let a_tensors: Vec<Vec<f64>> = analytic.tensors().iter().map(|t| t.to_vec()).collect();
    for (g, name) in names.into_iter().enumerate() {
        let len = a_tensors[g].len();
        let mut fd = vec![0.0; len];
        for k in 0..len {
            let mut plus = params.clone();
            plus.tensors_mut()[g][k] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[g][k] -= h;
            fd[k] = (loss(&plus, &mut solver)? - loss(&minus, &mut solver)?) / (2.0 * h);
        }
        let a = &a_tensors[g];
        let diff = a
            .iter()
            .zip(&fd)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm = crate::sparse::norm2(a);
        let scale = norm.max(crate::sparse::norm2(&fd));
        let rel_error = if scale > 0.0 { diff / scale } else { 0.0 };
        groups.push(GroupCheck {
            name,
            n: len,
            norm,
            rel_error,
        });
    }
    let max_rel_error = groups.iter().map(|g| g.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        groups,
        max_rel_error,
        degenerate: out.degenerate,
    })
}

/// The five meters of the 3-bus check: all three magnitudes and the P flows 1→2 and 2→3.
pub fn toy_measurement_set(sigma: f64) -> Vec<MeasurementMeta> {
    let mk = |kind, loc| MeasurementMeta {
        kind,
        loc,
        sigma,
        is_outlier: false,
    };
    vec![
        mk(MeasurementKind::Vmag, Location::Bus(0)),
        mk(MeasurementKind::Vmag, Location::Bus(1)),
        mk(MeasurementKind::Vmag, Location::Bus(2)),
        mk(MeasurementKind::Pflow, Location::Branch { from: 0, to: 1 }),
        mk(MeasurementKind::Pflow, Location::Branch { from: 1, to: 2 }),
    ]
}

/// A noisy sample of the bundled 3-bus case on [`toy_measurement_set`]: returns the
/// admittance model, meters, measurements and the true stacked state.
///
/// The 1→2 flow carries a gross error beyond what any voltage profile within the cone
/// bounds can produce, so the layer solution trades residuals across meters and every
/// weight influences it.
pub fn toy_check_sample(
    seed: u64,
) -> Result<(AdmittanceModel, Vec<MeasurementMeta>, Vec<f64>, Vec<f64>), LearnError> {
    let bad = |e: String| LearnError::Invalid(e);
    let case = crate::grid::parse_case(crate::cases::CASE3_TOY).map_err(|e| bad(e.to_string()))?;
    let model = AdmittanceModel::from_case(&case).map_err(|e| bad(e.to_string()))?;
    let state = solve_power_flow(&model, &InjectionSpec::from_case(&case))
        .map_err(|e| bad(e.to_string()))?;
    let meta = toy_measurement_set(1e-2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z: Vec<f64> = eval_measurements(&model, &state, &meta)
        .map_err(|e| bad(e.to_string()))?
        .into_iter()
        .map(|v| v + rng.random_range(-0.02..0.02))
        .collect();
    z[3] += 12.0;
    Ok((model, meta, z, state.stacked()))
}
