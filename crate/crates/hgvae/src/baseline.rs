//! Fully-connected VAE baseline: symmetric encoder/decoder with batch
//! normalization on each hidden layer and a single diagonal-Gaussian
//! latent. Used for the comparative posterior-degradation curves.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{kl_diag, log_normal, ElboTerms, GaussianIds, ScoreObjective, ScoreOutput};
use crate::model::{LOG_SCALE_MAX, LOG_SCALE_MIN};
use crate::tensor::{ParamBinding, ParamId, ParamStore, Real, Tape, Tensor, TensorId};

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    /// Flattened input width (nodes x coefficients).
    pub input_dim: usize,
    /// Encoder hidden widths; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub latent: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            input_dim: 2700,
            hidden: vec![2000, 1000, 500, 100],
            latent: 50,
        }
    }
}

impl BaselineConfig {
    /// Width-scaled configuration for desk-scale runs.
    pub fn desk_scale(input_dim: usize) -> Self {
        BaselineConfig {
            input_dim,
            hidden: vec![128, 64],
            latent: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.latent == 0 || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidArgument(
                "baseline config: zero-width layer".into(),
            ));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> crate::config::KvMap {
        let mut kv = crate::config::KvMap::new();
        kv.set("input_dim", self.input_dim);
        kv.set_list("hidden", &self.hidden);
        kv.set("latent", self.latent);
        kv
    }

    pub fn from_kv(kv: &crate::config::KvMap) -> Result<Self> {
        let d = BaselineConfig::default();
        let cfg = BaselineConfig {
            input_dim: kv.get_or("input_dim", d.input_dim)?,
            hidden: kv.get_list("hidden")?.unwrap_or(d.hidden),
            latent: kv.get_or("latent", d.latent)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as Real).sqrt();
        let w = Tensor::new(
            vec![fan_in, fan_out],
            (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect(),
        )
        .expect("linear init");
        Linear {
            w: store.register(format!("{name}.w"), w),
            b: store.register(format!("{name}.b"), Tensor::zeros(vec![fan_out])),
        }
    }

    fn forward(&self, tape: &mut Tape, binding: &ParamBinding, x: TensorId) -> Result<TensorId> {
        let xw = tape.matmul(x, binding.id(self.w))?;
        tape.add(xw, binding.id(self.b))
    }
}

#[derive(Clone, Copy)]
struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

const BN_EPS: Real = 1e-5;
const BN_MOMENTUM: Real = 0.1;

impl BatchNorm {
    fn init(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        BatchNorm {
            gamma: store.register(format!("{name}.gamma"), Tensor::full(vec![dim], 1.0)),
            beta: store.register(format!("{name}.beta"), Tensor::zeros(vec![dim])),
            running_mean: store.register_buffer(format!("{name}.running_mean"), Tensor::zeros(vec![dim])),
            running_var: store.register_buffer(format!("{name}.running_var"), Tensor::full(vec![dim], 1.0)),
        }
    }

    /// Training mode normalizes by batch statistics and returns them so
    /// the caller can fold them into the running averages; eval mode uses
    /// the frozen running statistics, keeping scoring deterministic per
    /// datapoint.
    fn forward(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        x: TensorId,
        training: bool,
    ) -> Result<(TensorId, Option<(Vec<Real>, Vec<Real>)>)> {
        let (mean, var, stats) = if training {
            let mean = tape.mean_axes(x, &[0])?;
            let centered = tape.sub(x, mean)?;
            let sq = tape.square(centered)?;
            let var = tape.mean_axes(sq, &[0])?;
            let stats = (tape.data(mean).to_vec(), tape.data(var).to_vec());
            (mean, var, Some(stats))
        } else {
            (
                binding.id(self.running_mean),
                binding.id(self.running_var),
                None,
            )
        };
        let centered = tape.sub(x, mean)?;
        let var_eps = tape.affine(var, 1.0, BN_EPS)?;
        let std = tape.sqrt(var_eps)?;
        let xhat = tape.div(centered, std)?;
        let scaled = tape.mul(xhat, binding.id(self.gamma))?;
        let out = tape.add(scaled, binding.id(self.beta))?;
        Ok((out, stats))
    }

    fn update_running(&self, store: &mut ParamStore, batch: usize, mean: &[Real], var: &[Real]) {
        // unbiased variance for the running buffer, biased for
        // normalization (the usual convention)
        let unbias = if batch > 1 {
            batch as Real / (batch as Real - 1.0)
        } else {
            1.0
        };
        let rm = store.value_mut(self.running_mean).data_mut();
        for (r, &m) in rm.iter_mut().zip(mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        let rv = store.value_mut(self.running_var).data_mut();
        for (r, &v) in rv.iter_mut().zip(var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
        }
    }
}

struct BaselineParams {
    enc: Vec<(Linear, BatchNorm)>,
    enc_mean: Linear,
    enc_log_scale: Linear,
    dec: Vec<(Linear, BatchNorm)>,
    dec_mean: Linear,
    dec_log_scale: Linear,
}

pub struct BaselineVae {
    cfg: BaselineConfig,
    store: ParamStore,
    params: BaselineParams,
}

impl BaselineVae {
    pub fn init(cfg: BaselineConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut enc = Vec::new();
        let mut prev = cfg.input_dim;
        for (i, &h) in cfg.hidden.iter().enumerate() {
            let lin = Linear::init(&mut store, &mut rng, &format!("enc.fc{i}"), prev, h);
            let bn = BatchNorm::init(&mut store, &format!("enc.bn{i}"), h);
            enc.push((lin, bn));
            prev = h;
        }
        let enc_mean = Linear::init(&mut store, &mut rng, "enc.mean", prev, cfg.latent);
        let enc_log_scale = Linear::init(&mut store, &mut rng, "enc.log_scale", prev, cfg.latent);

        let mut dec = Vec::new();
        prev = cfg.latent;
        for (i, &h) in cfg.hidden.iter().rev().enumerate() {
            let lin = Linear::init(&mut store, &mut rng, &format!("dec.fc{i}"), prev, h);
            let bn = BatchNorm::init(&mut store, &format!("dec.bn{i}"), h);
            dec.push((lin, bn));
            prev = h;
        }
        let dec_mean = Linear::init(&mut store, &mut rng, "dec.mean", prev, cfg.input_dim);
        let dec_log_scale = Linear::init(&mut store, &mut rng, "dec.log_scale", prev, cfg.input_dim);

        Ok(BaselineVae {
            cfg,
            store,
            params: BaselineParams {
                enc,
                enc_mean,
                enc_log_scale,
                dec,
                dec_mean,
                dec_log_scale,
            },
        })
    }

    pub fn config(&self) -> &BaselineConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Accept `[B, input_dim]` or `[B, nodes, feats]` with
    /// `nodes * feats == input_dim`, flattening the latter.
    fn flatten_input(&self, tape: &mut Tape, x: TensorId) -> Result<(TensorId, usize)> {
        let shape = tape.shape(x).to_vec();
        match shape.as_slice() {
            [b, d] if *d == self.cfg.input_dim => Ok((x, *b)),
            [b, n, f] if n * f == self.cfg.input_dim => {
                Ok((tape.reshape(x, vec![*b, self.cfg.input_dim])?, *b))
            }
            _ => Err(Error::ShapeMismatch {
                op: "baseline input",
                lhs: shape,
                rhs: vec![self.cfg.input_dim],
            }),
        }
    }

    fn encode(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        x: TensorId,
        training: bool,
        bn_updates: &mut Vec<(BatchNorm, Vec<Real>, Vec<Real>)>,
    ) -> Result<GaussianIds> {
        let mut h = x;
        for (lin, bn) in &self.params.enc {
            h = lin.forward(tape, binding, h)?;
            let (out, stats) = bn.forward(tape, binding, h, training)?;
            if let Some((m, v)) = stats {
                bn_updates.push((*bn, m, v));
            }
            h = tape.gelu(out)?;
        }
        let mean = self.params.enc_mean.forward(tape, binding, h)?;
        let raw = self.params.enc_log_scale.forward(tape, binding, h)?;
        let log_scale = tape.clamp(raw, LOG_SCALE_MIN, LOG_SCALE_MAX)?;
        Ok(GaussianIds { mean, log_scale })
    }

    fn decode(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        z: TensorId,
        training: bool,
        bn_updates: &mut Vec<(BatchNorm, Vec<Real>, Vec<Real>)>,
    ) -> Result<GaussianIds> {
        let mut h = z;
        for (lin, bn) in &self.params.dec {
            h = lin.forward(tape, binding, h)?;
            let (out, stats) = bn.forward(tape, binding, h, training)?;
            if let Some((m, v)) = stats {
                bn_updates.push((*bn, m, v));
            }
            h = tape.gelu(out)?;
        }
        let mean = self.params.dec_mean.forward(tape, binding, h)?;
        let raw = self.params.dec_log_scale.forward(tape, binding, h)?;
        let log_scale = tape.clamp(raw, LOG_SCALE_MIN, LOG_SCALE_MAX)?;
        Ok(GaussianIds { mean, log_scale })
    }

    fn standard_normal_prior(&self, tape: &mut Tape, batch: usize) -> Result<GaussianIds> {
        let shape = vec![batch, self.cfg.latent];
        Ok(GaussianIds {
            mean: tape.constant(Tensor::zeros(shape.clone()))?,
            log_scale: tape.constant(Tensor::zeros(shape))?,
        })
    }

    /// Single-sample ELBO over a flattened batch. `training` selects
    /// batch statistics (and updates the running averages).
    pub fn elbo(
        &mut self,
        tape: &mut Tape,
        binding: &ParamBinding,
        x: TensorId,
        kl_weight: Real,
        rng: &mut ChaCha8Rng,
        training: bool,
    ) -> Result<ElboTerms> {
        if !(0.0..=1.0).contains(&kl_weight) {
            return Err(Error::InvalidArgument(format!(
                "kl_weight must lie in [0, 1], got {kl_weight}"
            )));
        }
        let (x, batch) = self.flatten_input(tape, x)?;
        let mut bn_updates = Vec::new();
        let q = self.encode(tape, binding, x, training, &mut bn_updates)?;
        let scale = tape.exp(q.log_scale)?;
        let eps: Vec<Real> = (0..batch * self.cfg.latent)
            .map(|_| {
                let v: f64 = rng.sample(StandardNormal);
                v as Real
            })
            .collect();
        let eps = tape.constant(Tensor::new(vec![batch, self.cfg.latent], eps)?)?;
        let noise = tape.mul(scale, eps)?;
        let z = tape.add(q.mean, noise)?;
        let obs = self.decode(tape, binding, z, training, &mut bn_updates)?;

        let ll = log_normal(tape, x, &obs)?;
        let recon_per_dp = tape.sum_axes(ll, &[1])?;
        let prior = self.standard_normal_prior(tape, batch)?;
        let kl = kl_diag(tape, &q, &prior)?;
        let kl_per_dp = tape.sum_axes(kl, &[1])?;

        let neg_recon = tape.neg(recon_per_dp)?;
        let weighted = tape.affine(kl_per_dp, kl_weight, 0.0)?;
        let objective_per_dp = tape.add(neg_recon, weighted)?;
        let loss = tape.mean_all(objective_per_dp)?;

        for (bn, m, v) in bn_updates {
            bn.update_running(&mut self.store, batch, &m, &v);
        }
        Ok(ElboTerms {
            loss,
            objective_per_dp,
            recon_per_dp,
            kl_per_layer: vec![kl_per_dp],
        })
    }

    /// Deterministic score with frozen batch-norm statistics; same
    /// objective family as the hierarchical model.
    pub fn score(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        x: TensorId,
        objective: ScoreObjective,
    ) -> Result<ScoreOutput> {
        let (x, batch) = self.flatten_input(tape, x)?;
        let mut sink = Vec::new();
        let q = self.encode(tape, binding, x, false, &mut sink)?;
        let z = q.mean; // temperature-0 sample
        let obs = self.decode(tape, binding, z, false, &mut sink)?;
        let prior = self.standard_normal_prior(tape, batch)?;

        let per_dp = match objective {
            ScoreObjective::LogJoint => {
                let ll = log_normal(tape, x, &obs)?;
                let recon = tape.sum_axes(ll, &[1])?;
                let lp = log_normal(tape, z, &prior)?;
                let lp_dp = tape.sum_axes(lp, &[1])?;
                tape.add(recon, lp_dp)?
            }
            ScoreObjective::Elbo => {
                let ll = log_normal(tape, x, &obs)?;
                let recon = tape.sum_axes(ll, &[1])?;
                let kl = kl_diag(tape, &q, &prior)?;
                let kl_dp = tape.sum_axes(kl, &[1])?;
                let neg = tape.neg(kl_dp)?;
                tape.add(recon, neg)?
            }
            ScoreObjective::PosteriorDensity => {
                let lq = log_normal(tape, z, &q)?;
                tape.sum_axes(lq, &[1])?
            }
        };
        let total = tape.sum_all(per_dp)?;
        Ok(ScoreOutput { per_dp, total })
    }
}
