//! End-to-end ELBO training: Adam, linear KL warm-up, global-norm
//! gradient clipping, per-epoch metrics and periodic checkpoints.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baseline::BaselineVae;
use crate::config::TrainConfig;
use crate::data::PreparedDataset;
use crate::error::{Error, Result};
use crate::model::{ElboTerms, HgVae, stack_batch};
use crate::tensor::{adam_step, clip_global_norm, global_norm, AdamState, ParamBinding, ParamStore, Real, Tape, TensorId};

/// KL weight for an epoch: linear warm-up, then flat.
pub fn kl_weight_at(epoch: usize, cfg: &TrainConfig) -> Real {
    let frac = (epoch as Real / cfg.kl_warmup_epochs as Real).min(1.0);
    cfg.kl_start + (cfg.kl_end - cfg.kl_start) * frac
}

/// Anything trainable by [`train`]: both model kinds implement this.
pub trait ElboModel {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn kl_layer_count(&self) -> usize;
    /// One forward pass over a `[B, nodes, coeffs]` batch of DCT graphs.
    fn elbo_batch(
        &mut self,
        tape: &mut Tape,
        binding: &ParamBinding,
        x: TensorId,
        labels: Option<&[usize]>,
        kl_weight: Real,
        rng: &mut ChaCha8Rng,
        training: bool,
    ) -> Result<ElboTerms>;
}

impl ElboModel for HgVae {
    fn store(&self) -> &ParamStore {
        HgVae::store(self)
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        HgVae::store_mut(self)
    }

    fn kl_layer_count(&self) -> usize {
        self.config().layers()
    }

    fn elbo_batch(
        &mut self,
        tape: &mut Tape,
        binding: &ParamBinding,
        x: TensorId,
        labels: Option<&[usize]>,
        kl_weight: Real,
        rng: &mut ChaCha8Rng,
        _training: bool,
    ) -> Result<ElboTerms> {
        // unconditional models ignore dataset labels
        let labels = if self.config().condition_classes.is_some() {
            labels
        } else {
            None
        };
        self.elbo(tape, binding, x, labels, kl_weight, rng)
    }
}

impl ElboModel for BaselineVae {
    fn store(&self) -> &ParamStore {
        BaselineVae::store(self)
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        BaselineVae::store_mut(self)
    }

    fn kl_layer_count(&self) -> usize {
        1
    }

    fn elbo_batch(
        &mut self,
        tape: &mut Tape,
        binding: &ParamBinding,
        x: TensorId,
        _labels: Option<&[usize]>,
        kl_weight: Real,
        rng: &mut ChaCha8Rng,
        training: bool,
    ) -> Result<ElboTerms> {
        self.elbo(tape, binding, x, kl_weight, rng, training)
    }
}

/// One completed epoch.
#[derive(Debug, Clone)]
pub struct EpochRow {
    pub epoch: usize,
    /// Mean per-datapoint objective over the epoch.
    pub objective: Real,
    pub recon: Real,
    pub kl: Vec<Real>,
    pub grad_preclip_mean: Real,
    pub grad_preclip_max: Real,
    pub grad_postclip_max: Real,
    pub wall_secs: f64,
}

/// Append-only training log, one row per completed epoch.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<EpochRow>,
    pub kl_layers: usize,
}

impl TrainLog {
    /// CSV with the documented header. Wall time stays out of the file so
    /// identically-seeded runs emit identical bytes; it remains available
    /// on the in-memory rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,objective,recon");
        for l in 0..self.kl_layers {
            out.push_str(&format!(",kl{l}"));
        }
        out.push_str(",grad_preclip_mean,grad_preclip_max,grad_postclip_max\n");
        for row in &self.rows {
            out.push_str(&format!("{},{:.17e},{:.17e}", row.epoch, row.objective, row.recon));
            for v in &row.kl {
                out.push_str(&format!(",{v:.17e}"));
            }
            out.push_str(&format!(
                ",{:.17e},{:.17e},{:.17e}\n",
                row.grad_preclip_mean, row.grad_preclip_max, row.grad_postclip_max
            ));
        }
        out
    }
}

fn mean_of(tape: &Tape, id: TensorId) -> Real {
    let d = tape.data(id);
    d.iter().sum::<Real>() / d.len() as Real
}

/// Train on the cached DCT coefficient graphs of `data`. Deterministic
/// per seed: per-epoch shuffles and reparameterization noise both derive
/// from `cfg.seed`. `on_checkpoint` runs every `cfg.checkpoint_every`
/// epochs (when nonzero) and after the final epoch.
pub fn train<M: ElboModel>(
    model: &mut M,
    data: &PreparedDataset,
    cfg: &TrainConfig,
    mut on_checkpoint: Option<&mut dyn FnMut(usize, &M) -> Result<()>>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("train: empty dataset".into()));
    }
    let mut log = TrainLog {
        rows: Vec::with_capacity(cfg.epochs),
        kl_layers: model.kl_layer_count(),
    };
    let mut adam = AdamState::new(model.store());
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD1CE_5EED_0000_0001);

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let kl_w = kl_weight_at(epoch, cfg);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut shuffle_rng);

        let mut sum_objective = 0.0;
        let mut sum_recon = 0.0;
        let mut sum_kl = vec![0.0; model.kl_layer_count()];
        let mut steps = 0usize;
        let mut preclip_sum = 0.0;
        let mut preclip_max: Real = 0.0;
        let mut postclip_max: Real = 0.0;

        for (step, batch_ids) in order.chunks(cfg.batch_size).enumerate() {
            let step_ctx = |e: Error| e.with_context(format!("epoch {epoch} step {step}"));
            let mut tape = Tape::new();
            let binding = model.store().bind(&mut tape).map_err(step_ctx)?;
            let coeffs: Vec<_> = batch_ids.iter().map(|&i| data.coeffs[i].clone()).collect();
            let x = tape.constant(stack_batch(&coeffs)?).map_err(step_ctx)?;
            let labels: Option<Vec<usize>> = data
                .labels
                .as_ref()
                .map(|l| batch_ids.iter().map(|&i| l[i]).collect());
            let terms = model
                .elbo_batch(
                    &mut tape,
                    &binding,
                    x,
                    labels.as_deref(),
                    kl_w,
                    &mut noise_rng,
                    true,
                )
                .map_err(step_ctx)?;
            let grads = tape.backward(terms.loss).map_err(step_ctx)?;
            let mut collected = binding.collect_grads(model.store(), &grads);

            let pre = clip_global_norm(&mut collected, cfg.clip_norm).map_err(step_ctx)?;
            if !pre.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient norm at epoch {epoch} step {step}"
                )));
            }
            let post = global_norm(&collected);
            preclip_sum += pre;
            preclip_max = preclip_max.max(pre);
            postclip_max = postclip_max.max(post);

            sum_objective += mean_of(&tape, terms.objective_per_dp);
            sum_recon += mean_of(&tape, terms.recon_per_dp);
            for (acc, &kl) in sum_kl.iter_mut().zip(&terms.kl_per_layer) {
                *acc += mean_of(&tape, kl);
            }
            steps += 1;

            adam_step(model.store_mut(), &collected, &mut adam, cfg.learning_rate)
                .map_err(step_ctx)?;
        }

        let inv = 1.0 / steps as Real;
        log.rows.push(EpochRow {
            epoch,
            objective: sum_objective * inv,
            recon: sum_recon * inv,
            kl: sum_kl.iter().map(|v| v * inv).collect(),
            grad_preclip_mean: preclip_sum * inv,
            grad_preclip_max: preclip_max,
            grad_postclip_max: postclip_max,
            wall_secs: started.elapsed().as_secs_f64(),
        });

        if let Some(cb) = on_checkpoint.as_deref_mut() {
            let last = epoch + 1 == cfg.epochs;
            if last || (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) {
                cb(epoch, model).map_err(|e| e.with_context(format!("checkpoint at epoch {epoch}")))?;
            }
        }
    }
    Ok(log)
}
