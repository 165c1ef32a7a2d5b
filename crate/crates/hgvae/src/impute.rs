//! Occlusion simulation, mean imputation, MAP imputation by gradient
//! ascent, and anomaly-score curves.
//!
//! The free variables of the ascent live in the time domain (the occluded
//! Cartesian entries); gradients flow through the linear DCT into the
//! model's score. Unmasked entries are never touched: their gradients are
//! zeroed before every Adam step, so the update is exactly zero there.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baseline::BaselineVae;
use crate::dct::DctBasis;
use crate::error::{Error, Result};
use crate::model::{HgVae, ScoreObjective, ScoreOutput, stack_batch};
use crate::tensor::{adam_step, AdamState, ParamBinding, ParamStore, Real, Tape, Tensor, TensorId};

/// Boolean (node, timepoint) grid of occluded Cartesian entries.
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionMask {
    cells: Vec<bool>,
    nodes: usize,
    timepoints: usize,
    count: usize,
}

impl OcclusionMask {
    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn timepoints(&self) -> usize {
        self.timepoints
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_masked(&self, node: usize, t: usize) -> bool {
        self.cells[node * self.timepoints + t]
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }
}

/// Exactly `count` uniformly random distinct cells over a
/// `nodes x timepoints` grid.
pub fn make_mask(nodes: usize, timepoints: usize, count: usize, seed: u64) -> Result<OcclusionMask> {
    let total = nodes * timepoints;
    if count > total {
        return Err(Error::InvalidArgument(format!(
            "make_mask: count {count} exceeds {total} cells"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells = vec![false; total];
    let picked = rand::seq::index::sample(&mut rng, total, count);
    for i in picked {
        cells[i] = true;
    }
    Ok(OcclusionMask {
        cells,
        nodes,
        timepoints,
        count,
    })
}

/// Replace masked cells with their training-set means; unmasked cells are
/// copied bit-identically.
pub fn mean_impute(x: &Tensor, mask: &OcclusionMask, means: &Tensor) -> Result<Tensor> {
    let shape = [mask.nodes, mask.timepoints];
    if x.shape() != shape || means.shape() != shape {
        return Err(Error::ShapeMismatch {
            op: "mean_impute",
            lhs: x.shape().to_vec(),
            rhs: shape.to_vec(),
        });
    }
    let data = x
        .data()
        .iter()
        .zip(means.data())
        .zip(mask.cells())
        .map(|((&xv, &mv), &m)| if m { mv } else { xv })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Mean squared error over masked cells only.
pub fn masked_mse(a: &Tensor, b: &Tensor, mask: &OcclusionMask) -> Real {
    if mask.count == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for ((&x, &y), &m) in a.data().iter().zip(b.data()).zip(mask.cells()) {
        if m {
            acc += (x - y) * (x - y);
        }
    }
    acc / mask.count as Real
}

/// A model that can score DCT-encoded inputs differentiably.
pub trait Scorer {
    fn store(&self) -> &ParamStore;
    fn score_dct(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        x_dct: TensorId,
        labels: Option<&[usize]>,
        objective: ScoreObjective,
    ) -> Result<ScoreOutput>;
}

impl Scorer for HgVae {
    fn store(&self) -> &ParamStore {
        HgVae::store(self)
    }

    fn score_dct(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        x_dct: TensorId,
        labels: Option<&[usize]>,
        objective: ScoreObjective,
    ) -> Result<ScoreOutput> {
        let labels = if self.config().condition_classes.is_some() {
            labels
        } else {
            None
        };
        self.score(tape, binding, x_dct, labels, objective)
    }
}

impl Scorer for BaselineVae {
    fn store(&self) -> &ParamStore {
        BaselineVae::store(self)
    }

    fn score_dct(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        x_dct: TensorId,
        _labels: Option<&[usize]>,
        objective: ScoreObjective,
    ) -> Result<ScoreOutput> {
        self.score(tape, binding, x_dct, objective)
    }
}

#[derive(Debug, Clone)]
pub struct ImputeConfig {
    /// Ascent steps; the returned iterate is the best-scoring one.
    pub max_steps: usize,
    /// Ascent learning rate (1.0 suits the hierarchical model, 100.0 the
    /// baseline).
    pub learning_rate: Real,
    pub objective: ScoreObjective,
    /// Datapoints ascended jointly per batch.
    pub batch_size: usize,
}

impl Default for ImputeConfig {
    fn default() -> Self {
        ImputeConfig {
            max_steps: 10,
            learning_rate: 1.0,
            objective: ScoreObjective::LogJoint,
            batch_size: 800,
        }
    }
}

/// Output of one [`map_impute`] call.
pub struct ImputeResult {
    /// Best iterate per datapoint, `[nodes, timepoints]` each.
    pub imputed: Vec<Tensor>,
    /// Score of the best iterate per datapoint.
    pub best_scores: Vec<Real>,
    /// Score of the (mean-imputed) initialization per datapoint.
    pub init_scores: Vec<Real>,
    /// Scores per step (`trace[0]` is the initialization) per datapoint.
    pub trace: Vec<Vec<Real>>,
    /// Set when the ascent hit a non-finite score and returned early.
    pub warning_nonfinite: bool,
}

fn is_nonfinite(e: &Error) -> bool {
    match e {
        Error::NonFinite(_) => true,
        Error::Context { source, .. } => is_nonfinite(source),
        _ => false,
    }
}

/// Score a batch of time-domain inputs; optionally also return the
/// gradient w.r.t. the inputs.
fn score_time_domain<S: Scorer>(
    model: &S,
    basis: &DctBasis,
    x: &Tensor,
    labels: Option<&[usize]>,
    objective: ScoreObjective,
    want_grad: bool,
) -> Result<(Vec<Real>, Option<Vec<Real>>)> {
    let mut tape = Tape::new();
    let binding = model.store().bind(&mut tape)?;
    let xid = tape.leaf(x.clone(), want_grad)?;
    let x_dct = basis.encode_on_tape(&mut tape, xid)?;
    let score = model.score_dct(&mut tape, &binding, x_dct, labels, objective)?;
    let per_dp = tape.data(score.per_dp).to_vec();
    if !want_grad {
        return Ok((per_dp, None));
    }
    let grads = tape.backward(score.total)?;
    Ok((per_dp, Some(grads.get(xid).expect("input gradient").to_vec())))
}

/// Gradient-ascend the masked time-domain entries on the model's score,
/// starting from the provided (already mean-imputed) inputs. Returns the
/// best-scoring iterate per datapoint; unmasked entries are returned
/// bit-identical to the input.
pub fn map_impute<S: Scorer>(
    model: &S,
    basis: &DctBasis,
    inputs: &[Tensor],
    masks: &[OcclusionMask],
    labels: Option<&[usize]>,
    cfg: &ImputeConfig,
) -> Result<ImputeResult> {
    if inputs.is_empty() || inputs.len() != masks.len() {
        return Err(Error::InvalidArgument(format!(
            "map_impute: {} inputs vs {} masks",
            inputs.len(),
            masks.len()
        )));
    }
    if let Some(l) = labels {
        if l.len() != inputs.len() {
            return Err(Error::InvalidArgument(format!(
                "map_impute: {} labels for {} inputs",
                l.len(),
                inputs.len()
            )));
        }
    }
    let (nodes, timepoints) = (masks[0].nodes, masks[0].timepoints);
    let per = nodes * timepoints;

    let mut imputed = Vec::with_capacity(inputs.len());
    let mut best_scores = Vec::with_capacity(inputs.len());
    let mut init_scores = Vec::with_capacity(inputs.len());
    let mut trace: Vec<Vec<Real>> = vec![Vec::new(); cfg.max_steps + 1];
    let mut warning = false;

    let chunk_size = cfg.batch_size.max(1);
    for chunk_start in (0..inputs.len()).step_by(chunk_size) {
        let chunk_end = (chunk_start + chunk_size).min(inputs.len());
        let ids: Vec<usize> = (chunk_start..chunk_end).collect();
        let chunk_labels: Option<Vec<usize>> =
            labels.map(|l| ids.iter().map(|&i| l[i]).collect());

        let mut current = stack_batch(
            &ids.iter().map(|&i| inputs[i].clone()).collect::<Vec<_>>(),
        )?;
        // Adam state over the whole batch tensor; unmasked entries keep
        // zero gradients so their update is exactly zero.
        let mut ascent_store = ParamStore::new();
        let xparam = ascent_store.register("ascent.x", current.clone());
        let mut adam = AdamState::new(&ascent_store);

        let (scores, _) = score_time_domain(
            model,
            basis,
            &current,
            chunk_labels.as_deref(),
            cfg.objective,
            false,
        )?;
        let mut best: Vec<(Real, Tensor)> = scores
            .iter()
            .zip(&ids)
            .map(|(&s, &i)| (s, inputs[i].clone()))
            .collect();
        init_scores.extend(scores.iter().cloned());
        trace[0].extend(scores.iter().cloned());

        for step in 0..cfg.max_steps {
            let grad_result = score_time_domain(
                model,
                basis,
                &current,
                chunk_labels.as_deref(),
                cfg.objective,
                true,
            );
            let (_, grad) = match grad_result {
                Ok(v) => v,
                Err(e) if is_nonfinite(&e) => {
                    warning = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            let mut grad = grad.expect("gradient requested");
            // ascent: descend on the negated gradient; zero it off-mask
            for (bi, &i) in ids.iter().enumerate() {
                for c in 0..per {
                    let g = &mut grad[bi * per + c];
                    *g = if masks[i].cells()[c] { -*g } else { 0.0 };
                }
            }
            adam_step(
                &mut ascent_store,
                &[Some(grad)],
                &mut adam,
                cfg.learning_rate,
            )?;
            current = ascent_store.value(xparam).clone();

            let step_scores = match score_time_domain(
                model,
                basis,
                &current,
                chunk_labels.as_deref(),
                cfg.objective,
                false,
            ) {
                Ok((s, _)) => s,
                Err(e) if is_nonfinite(&e) => {
                    warning = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            for (bi, &s) in step_scores.iter().enumerate() {
                if s > best[bi].0 {
                    let t = Tensor::new(
                        vec![nodes, timepoints],
                        current.data()[bi * per..(bi + 1) * per].to_vec(),
                    )?;
                    best[bi] = (s, t);
                }
            }
            trace[step + 1].extend(step_scores);
        }

        for (s, t) in best {
            best_scores.push(s);
            imputed.push(t);
        }
    }
    trace.retain(|row| !row.is_empty());

    Ok(ImputeResult {
        imputed,
        best_scores,
        init_scores,
        trace,
        warning_nonfinite: warning,
    })
}

/// Row of an anomaly-vs-occlusion table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    GroundTruth,
    Degraded,
    Map,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::GroundTruth => "ground_truth",
            Method::Degraded => "degraded",
            Method::Map => "map",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CurveRow {
    pub count: usize,
    pub method: Method,
    pub mean_score: Real,
    pub std_score: Real,
    pub mean_mse: Real,
    pub std_mse: Real,
}

fn mean_std(values: &[Real]) -> (Real, Real) {
    let n = values.len() as Real;
    let mean = values.iter().sum::<Real>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / n;
    (mean, var.sqrt())
}

/// For each occlusion count: degrade, mean-impute, score, MAP-ascend and
/// score again; ground-truth scores are reported as the count-0 row.
/// Masks are drawn per (count, datapoint) from `seed`.
#[allow(clippy::too_many_arguments)]
pub fn anomaly_curve<S: Scorer>(
    model: &S,
    basis: &DctBasis,
    ground_truth: &[Tensor],
    labels: Option<&[usize]>,
    means: &Tensor,
    counts: &[usize],
    cfg: &ImputeConfig,
    seed: u64,
) -> Result<Vec<CurveRow>> {
    if ground_truth.is_empty() {
        return Err(Error::InvalidArgument("anomaly_curve: empty test set".into()));
    }
    let (nodes, timepoints) = {
        let s = ground_truth[0].shape();
        (s[0], s[1])
    };
    let mut rows = Vec::new();

    let mut gt_scores = Vec::with_capacity(ground_truth.len());
    for chunk in ground_truth.chunks(cfg.batch_size.max(1)) {
        let batch = stack_batch(chunk)?;
        let offset = gt_scores.len();
        let chunk_labels: Option<Vec<usize>> =
            labels.map(|l| (offset..offset + chunk.len()).map(|i| l[i]).collect());
        let (s, _) = score_time_domain(
            model,
            basis,
            &batch,
            chunk_labels.as_deref(),
            cfg.objective,
            false,
        )?;
        gt_scores.extend(s);
    }
    let (gm, gs) = mean_std(&gt_scores);

    for &count in counts {
        if count == 0 {
            rows.push(CurveRow {
                count: 0,
                method: Method::GroundTruth,
                mean_score: gm,
                std_score: gs,
                mean_mse: 0.0,
                std_mse: 0.0,
            });
            continue;
        }
        let masks: Vec<OcclusionMask> = (0..ground_truth.len())
            .map(|i| {
                make_mask(
                    nodes,
                    timepoints,
                    count,
                    seed ^ (count as u64) << 32 ^ i as u64,
                )
            })
            .collect::<Result<_>>()?;
        let degraded: Vec<Tensor> = ground_truth
            .iter()
            .zip(&masks)
            .map(|(x, m)| mean_impute(x, m, means))
            .collect::<Result<_>>()?;

        let result = map_impute(model, basis, &degraded, &masks, labels, cfg)?;

        let deg_mse: Vec<Real> = degraded
            .iter()
            .zip(ground_truth)
            .zip(&masks)
            .map(|((d, g), m)| masked_mse(d, g, m))
            .collect();
        let map_mse: Vec<Real> = result
            .imputed
            .iter()
            .zip(ground_truth)
            .zip(&masks)
            .map(|((d, g), m)| masked_mse(d, g, m))
            .collect();

        let (dm, ds) = mean_std(&result.init_scores);
        let (dmse, dmse_s) = mean_std(&deg_mse);
        rows.push(CurveRow {
            count,
            method: Method::Degraded,
            mean_score: dm,
            std_score: ds,
            mean_mse: dmse,
            std_mse: dmse_s,
        });
        let (mm, ms) = mean_std(&result.best_scores);
        let (mmse, mmse_s) = mean_std(&map_mse);
        rows.push(CurveRow {
            count,
            method: Method::Map,
            mean_score: mm,
            std_score: ms,
            mean_mse: mmse,
            std_mse: mmse_s,
        });
    }
    Ok(rows)
}

/// The score-grid CSV: one row per (count, method).
pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("count,method,mean_score,std_score,mean_mse,std_mse\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.10e},{:.10e},{:.10e},{:.10e}\n",
            r.count,
            r.method.name(),
            r.mean_score,
            r.std_score,
            r.mean_mse,
            r.std_mse
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::Rng;

    #[test]
    fn mask_counts_are_exact_and_deterministic() {
        let empty = make_mask(54, 50, 0, 1).unwrap();
        assert_eq!(empty.count(), 0);
        assert!(empty.cells().iter().all(|&c| !c));

        let full = make_mask(54, 50, 2700, 1).unwrap();
        assert!(full.cells().iter().all(|&c| c));

        let m = make_mask(54, 50, 135, 7).unwrap();
        assert_eq!(m.cells().iter().filter(|&&c| c).count(), 135);
        assert_eq!(m, make_mask(54, 50, 135, 7).unwrap());
        assert_ne!(m, make_mask(54, 50, 135, 8).unwrap());

        assert!(make_mask(54, 50, 2701, 1).is_err());
    }

    #[test]
    fn mean_impute_selects_cellwise() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::new(vec![4, 5], (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let means = Tensor::new(vec![4, 5], (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();

        let empty = make_mask(4, 5, 0, 1).unwrap();
        assert_eq!(mean_impute(&x, &empty, &means).unwrap(), x);

        let full = make_mask(4, 5, 20, 1).unwrap();
        assert_eq!(mean_impute(&x, &full, &means).unwrap(), means);

        let mixed = make_mask(4, 5, 7, 2).unwrap();
        let got = mean_impute(&x, &mixed, &means).unwrap();
        for c in 0..20 {
            let want = if mixed.cells()[c] { means.data()[c] } else { x.data()[c] };
            assert_eq!(got.data()[c], want);
        }
    }

    fn tiny_model() -> HgVae {
        HgVae::init(
            ModelConfig {
                latent_nodes: vec![1, 3],
                latent_features: vec![6, 4],
                route_features: 6,
                obs_nodes: 6,
                obs_features: 5,
                gcbs_per_stage: 1,
                condition_classes: None,
                rezero_on_branch: false,
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn empty_mask_returns_input_with_trace_length_one() {
        let model = tiny_model();
        let basis = DctBasis::new(5).unwrap();
        let x = Tensor::new(vec![6, 5], (0..30).map(|v| v as Real * 0.01).collect()).unwrap();
        let mask = make_mask(6, 5, 0, 1).unwrap();
        let cfg = ImputeConfig {
            max_steps: 0,
            ..ImputeConfig::default()
        };
        let out = map_impute(&model, &basis, &[x.clone()], &[mask], None, &cfg).unwrap();
        assert_eq!(out.imputed[0], x);
        assert_eq!(out.trace.len(), 1);
        assert!(!out.warning_nonfinite);
    }

    #[test]
    fn unmasked_entries_stay_bit_identical_and_score_never_drops() {
        use rand::SeedableRng;
        let model = tiny_model();
        let basis = DctBasis::new(5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xs: Vec<Tensor> = (0..3)
            .map(|_| {
                Tensor::new(vec![6, 5], (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
            })
            .collect();
        let masks: Vec<OcclusionMask> = (0..3)
            .map(|i| make_mask(6, 5, 6, 100 + i as u64).unwrap())
            .collect();
        let cfg = ImputeConfig {
            max_steps: 4,
            learning_rate: 0.05,
            batch_size: 2, // exercise chunking
            ..ImputeConfig::default()
        };
        let out = map_impute(&model, &basis, &xs, &masks, None, &cfg).unwrap();
        for ((x, m), imp) in xs.iter().zip(&masks).zip(&out.imputed) {
            for c in 0..30 {
                if !m.cells()[c] {
                    assert_eq!(
                        x.data()[c].to_bits(),
                        imp.data()[c].to_bits(),
                        "unmasked cell {c} changed"
                    );
                }
            }
        }
        for (b, i) in out.best_scores.iter().zip(&out.init_scores) {
            assert!(b >= i, "best score {b} below initialization {i}");
        }
    }

    #[test]
    fn curve_count_zero_is_ground_truth_row() {
        let model = tiny_model();
        let basis = DctBasis::new(5).unwrap();
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let xs: Vec<Tensor> = (0..4)
            .map(|_| {
                Tensor::new(vec![6, 5], (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
            })
            .collect();
        let means = crate::data::compute_feature_means(&xs).unwrap();
        let cfg = ImputeConfig {
            max_steps: 1,
            learning_rate: 0.05,
            ..ImputeConfig::default()
        };
        let rows = anomaly_curve(&model, &basis, &xs, None, &means, &[0, 4], &cfg, 5).unwrap();
        assert_eq!(rows[0].method, Method::GroundTruth);
        assert_eq!(rows[0].count, 0);
        assert_eq!(rows[0].mean_mse, 0.0);
        assert!(rows.iter().any(|r| r.count == 4 && r.method == Method::Map));
        let csv = curve_csv(&rows);
        assert!(csv.starts_with("count,method,"));
    }
}
