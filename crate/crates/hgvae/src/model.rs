//! The hierarchical graph-convolutional VAE.
//!
//! Four (by default) stochastic layers over graphs of decreasing node
//! count. A deterministic bottom-up encoder contracts the observable graph
//! stage by stage and keeps one feature set per stochastic layer. The
//! top-down decoder maintains a principal deterministic route: each layer
//! reads its prior from the route, reads its posterior from the route
//! concatenated with the matching encoder features, samples with the
//! reparameterization trick, and injects the sample back into the route
//! through a projection with a rezero weight. The final heads emit a
//! diagonal-Gaussian observation model over DCT coefficient graphs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dct::DctBasis;
use crate::error::{Error, Result};
use crate::graph::{gcb, gcl, GcbParams, GclParams, GclShape};
use crate::tensor::{ParamBinding, ParamId, ParamStore, Real, Tape, Tensor, TensorId};

pub const LN_2PI: Real = 1.837_877_066_409_345_3;

/// Clamp bounds for every log-scale head, applied before exponentiation.
pub const LOG_SCALE_MIN: Real = -7.0;
pub const LOG_SCALE_MAX: Real = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Node count per stochastic layer, top (most abstract) first.
    pub latent_nodes: Vec<usize>,
    /// Feature width per stochastic layer, top first.
    pub latent_features: Vec<usize>,
    /// Feature width of the deterministic route (and of the encoder).
    pub route_features: usize,
    /// Observable graph: nodes x features (DCT coefficients per node).
    pub obs_nodes: usize,
    pub obs_features: usize,
    /// GCBs between consecutive stochastic layers, per stage.
    pub gcbs_per_stage: usize,
    /// One-hot class conditioning width appended to the top latent.
    pub condition_classes: Option<usize>,
    /// Residual weight on the branch (conventional rezero) instead of on
    /// the input path.
    pub rezero_on_branch: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_nodes: vec![1, 8, 24, 54],
            latent_features: vec![256, 128, 128, 128],
            route_features: 256,
            obs_nodes: 54,
            obs_features: 50,
            gcbs_per_stage: 2,
            condition_classes: None,
            rezero_on_branch: false,
        }
    }
}

impl ModelConfig {
    pub fn layers(&self) -> usize {
        self.latent_nodes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_nodes.is_empty() || self.latent_nodes.len() != self.latent_features.len() {
            return Err(Error::InvalidArgument(format!(
                "latent_nodes ({:?}) and latent_features ({:?}) must be non-empty and equal length",
                self.latent_nodes, self.latent_features
            )));
        }
        if !self.latent_nodes.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument(format!(
                "latent node counts must strictly increase down the hierarchy, got {:?}",
                self.latent_nodes
            )));
        }
        for &v in self
            .latent_features
            .iter()
            .chain([&self.route_features, &self.obs_nodes, &self.obs_features])
        {
            if v == 0 {
                return Err(Error::InvalidArgument("zero dimension in model config".into()));
            }
        }
        if self.gcbs_per_stage == 0 {
            return Err(Error::InvalidArgument(
                "gcbs_per_stage must be at least 1".into(),
            ));
        }
        if self.condition_classes == Some(0) {
            return Err(Error::InvalidArgument(
                "condition_classes must be positive when set".into(),
            ));
        }
        Ok(())
    }
}

/// Mean and log-scale heads of one diagonal Gaussian, on the tape.
#[derive(Debug, Clone, Copy)]
pub struct GaussianIds {
    pub mean: TensorId,
    pub log_scale: TensorId,
}

/// One stochastic layer of a decode pass.
pub struct LatentLayer {
    pub z: TensorId,
    /// Present in posterior mode.
    pub posterior: Option<GaussianIds>,
    pub prior: GaussianIds,
}

/// Everything a decode pass produces.
pub struct DecodeOutput {
    pub layers: Vec<LatentLayer>,
    pub obs: GaussianIds,
}

struct EncStage {
    contract: GclParams,
    gcbs: Vec<GcbParams>,
}

struct DecStage {
    expand: Option<GclParams>,
    gcbs: Vec<GcbParams>,
    prior_mean: Option<GclParams>,
    prior_log_scale: Option<GclParams>,
    post_mean: GclParams,
    post_log_scale: GclParams,
    inject: GclParams,
    inject_alpha: ParamId,
}

struct ModelParams {
    lift: GclParams,
    /// Indexed by stochastic layer; applied bottom-up (layers-1 .. 0).
    enc_stages: Vec<EncStage>,
    route_init: ParamId,
    dec_stages: Vec<DecStage>,
    final_gcbs: Vec<GcbParams>,
    obs_mean: GclParams,
    obs_log_scale: GclParams,
}

pub struct HgVae {
    cfg: ModelConfig,
    store: ParamStore,
    params: ModelParams,
}

/// Per-datapoint ELBO terms from one forward pass.
pub struct ElboTerms {
    /// Scalar objective for backward: mean over the batch of
    /// `-recon + kl_weight * sum_l KL_l` (minimized).
    pub loss: TensorId,
    /// `[B]` objective per datapoint.
    pub objective_per_dp: TensorId,
    /// `[B]` reconstruction log-likelihood per datapoint.
    pub recon_per_dp: TensorId,
    /// `[B]` KL per stochastic layer.
    pub kl_per_layer: Vec<TensorId>,
}

/// Differentiable score used for MAP imputation and anomaly detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreObjective {
    /// log p(x, z-hat) at the posterior means (default).
    LogJoint,
    /// Deterministic single-sample ELBO at temperature zero.
    Elbo,
    /// The posterior density evaluated at its own mean.
    PosteriorDensity,
}

impl Default for ScoreObjective {
    fn default() -> Self {
        ScoreObjective::LogJoint
    }
}

pub struct ScoreOutput {
    /// `[B]` score per datapoint (higher is more in-distribution).
    pub per_dp: TensorId,
    /// Scalar sum over the batch, the ascent target.
    pub total: TensorId,
}

/// Per-entry log N(x | mean, exp(log_scale)).
pub fn log_normal(tape: &mut Tape, x: TensorId, g: &GaussianIds) -> Result<TensorId> {
    let d = tape.sub(x, g.mean)?;
    let d2 = tape.square(d)?;
    let m2s = tape.affine(g.log_scale, -2.0, 0.0)?;
    let inv_var = tape.exp(m2s)?;
    let quad = tape.mul(d2, inv_var)?;
    let t = tape.affine(quad, -0.5, -0.5 * LN_2PI)?;
    tape.sub(t, g.log_scale)
}

/// Per-entry KL(q || p) for diagonal Gaussians given as (mean, log-scale).
pub fn kl_diag(tape: &mut Tape, q: &GaussianIds, p: &GaussianIds) -> Result<TensorId> {
    let ds = tape.sub(p.log_scale, q.log_scale)?;
    let m2ds = tape.affine(ds, -2.0, 0.0)?;
    let var_ratio = tape.exp(m2ds)?;
    let dm = tape.sub(q.mean, p.mean)?;
    let dm2 = tape.square(dm)?;
    let m2sp = tape.affine(p.log_scale, -2.0, 0.0)?;
    let inv_var_p = tape.exp(m2sp)?;
    let quad = tape.mul(dm2, inv_var_p)?;
    let half_ratio = tape.affine(var_ratio, 0.5, -0.5)?;
    let a = tape.add(ds, half_ratio)?;
    let half_quad = tape.affine(quad, 0.5, 0.0)?;
    tape.add(a, half_quad)
}

/// Decode source: sample from the prior chain, or from posteriors built
/// against encoder features (one per layer, top-first).
pub enum DecodeMode<'a> {
    Prior,
    Posterior(&'a [TensorId]),
}

impl HgVae {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layers = cfg.layers();
        let f = cfg.route_features;

        let lift = GclParams::init(
            &mut store,
            &mut rng,
            "enc.lift",
            GclShape {
                n_in: cfg.obs_nodes,
                n_out: cfg.obs_nodes,
                f_in: cfg.obs_features,
                f_out: f,
            },
        );

        // Encoder stages, registered in application order (bottom-up).
        let mut enc_rev = Vec::with_capacity(layers);
        let mut prev_n = cfg.obs_nodes;
        for l in (0..layers).rev() {
            let n_l = cfg.latent_nodes[l];
            let contract = GclParams::init(
                &mut store,
                &mut rng,
                &format!("enc.stage{l}.contract"),
                GclShape {
                    n_in: prev_n,
                    n_out: n_l,
                    f_in: f,
                    f_out: f,
                },
            );
            let gcbs = (0..cfg.gcbs_per_stage)
                .map(|k| GcbParams::init(&mut store, &mut rng, &format!("enc.stage{l}.gcb{k}"), n_l, f))
                .collect();
            enc_rev.push(EncStage { contract, gcbs });
            prev_n = n_l;
        }
        enc_rev.reverse(); // index by layer
        let enc_stages = enc_rev;

        let route_init = store.register(
            "dec.route_init",
            Tensor::zeros(vec![cfg.latent_nodes[0], f]),
        );

        let mut dec_stages = Vec::with_capacity(layers);
        for l in 0..layers {
            let n_l = cfg.latent_nodes[l];
            let f_l = cfg.latent_features[l];
            let expand = (l > 0).then(|| {
                GclParams::init(
                    &mut store,
                    &mut rng,
                    &format!("dec.stage{l}.expand"),
                    GclShape {
                        n_in: cfg.latent_nodes[l - 1],
                        n_out: n_l,
                        f_in: f,
                        f_out: f,
                    },
                )
            });
            let gcbs = if l > 0 {
                (0..cfg.gcbs_per_stage)
                    .map(|k| {
                        GcbParams::init(&mut store, &mut rng, &format!("dec.stage{l}.gcb{k}"), n_l, f)
                    })
                    .collect()
            } else {
                Vec::new()
            };
            let head_shape = |f_in: usize| GclShape {
                n_in: n_l,
                n_out: n_l,
                f_in,
                f_out: f_l,
            };
            let prior_mean = (l > 0).then(|| {
                GclParams::init(
                    &mut store,
                    &mut rng,
                    &format!("dec.stage{l}.prior_mean"),
                    head_shape(f),
                )
            });
            let prior_log_scale = (l > 0).then(|| {
                GclParams::init(
                    &mut store,
                    &mut rng,
                    &format!("dec.stage{l}.prior_log_scale"),
                    head_shape(f),
                )
            });
            let post_mean = GclParams::init(
                &mut store,
                &mut rng,
                &format!("dec.stage{l}.post_mean"),
                head_shape(2 * f),
            );
            let post_log_scale = GclParams::init(
                &mut store,
                &mut rng,
                &format!("dec.stage{l}.post_log_scale"),
                head_shape(2 * f),
            );
            let inject_in = if l == 0 {
                f_l + cfg.condition_classes.unwrap_or(0)
            } else {
                f_l
            };
            let inject = GclParams::init(
                &mut store,
                &mut rng,
                &format!("dec.stage{l}.inject"),
                GclShape {
                    n_in: n_l,
                    n_out: n_l,
                    f_in: inject_in,
                    f_out: f,
                },
            );
            let inject_alpha =
                store.register(format!("dec.stage{l}.inject_alpha"), Tensor::scalar(0.0));
            dec_stages.push(DecStage {
                expand,
                gcbs,
                prior_mean,
                prior_log_scale,
                post_mean,
                post_log_scale,
                inject,
                inject_alpha,
            });
        }

        let n_bottom = *cfg.latent_nodes.last().unwrap();
        let final_gcbs = (0..cfg.gcbs_per_stage)
            .map(|k| GcbParams::init(&mut store, &mut rng, &format!("dec.final.gcb{k}"), n_bottom, f))
            .collect();
        let obs_head_shape = GclShape {
            n_in: n_bottom,
            n_out: cfg.obs_nodes,
            f_in: f,
            f_out: cfg.obs_features,
        };
        let obs_mean = GclParams::init(&mut store, &mut rng, "dec.obs_mean", obs_head_shape);
        let obs_log_scale =
            GclParams::init(&mut store, &mut rng, "dec.obs_log_scale", obs_head_shape);

        Ok(HgVae {
            cfg,
            store,
            params: ModelParams {
                lift,
                enc_stages,
                route_init,
                dec_stages,
                final_gcbs,
                obs_mean,
                obs_log_scale,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Exact count of learnable scalars.
    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    fn check_input(&self, tape: &Tape, x: TensorId) -> Result<usize> {
        let shape = tape.shape(x);
        match shape {
            [b, n, f] if *n == self.cfg.obs_nodes && *f == self.cfg.obs_features => Ok(*b),
            _ => Err(Error::ShapeMismatch {
                op: "encode",
                lhs: shape.to_vec(),
                rhs: vec![self.cfg.obs_nodes, self.cfg.obs_features],
            }),
        }
    }

    /// Deterministic bottom-up pass: one feature graph per stochastic
    /// layer (returned top-first), node counts contracted stage by stage.
    pub fn encode(&self, tape: &mut Tape, binding: &ParamBinding, x: TensorId) -> Result<Vec<TensorId>> {
        self.check_input(tape, x)?;
        let layers = self.cfg.layers();
        let mut h = gcl(tape, x, &self.params.lift.bind(binding), true)?;
        let mut feats = vec![None; layers];
        for l in (0..layers).rev() {
            let stage = &self.params.enc_stages[l];
            h = gcl(tape, h, &stage.contract.bind(binding), true)
                .map_err(|e| e.with_context(format!("encoder stage {l}")))?;
            for blk in &stage.gcbs {
                h = gcb(tape, h, &blk.bind(binding), self.cfg.rezero_on_branch)
                    .map_err(|e| e.with_context(format!("encoder stage {l}")))?;
            }
            feats[l] = Some(h);
        }
        Ok(feats.into_iter().map(|f| f.unwrap()).collect())
    }

    fn sample_eps(&self, tape: &mut Tape, rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Result<TensorId> {
        let n: usize = shape.iter().product();
        let data: Vec<Real> = (0..n)
            .map(|_| {
                let v: f64 = rng.sample(StandardNormal);
                v as Real
            })
            .collect();
        tape.constant(Tensor::new(shape, data)?)
    }

    /// z = mean + temperature * exp(log_scale) * eps.
    fn reparameterize(
        &self,
        tape: &mut Tape,
        g: &GaussianIds,
        temperature: Real,
        rng: &mut ChaCha8Rng,
    ) -> Result<TensorId> {
        let scale = tape.exp(g.log_scale)?;
        let eps = self.sample_eps(tape, rng, tape.shape(g.mean).to_vec())?;
        let noise = tape.mul(scale, eps)?;
        let scaled = tape.affine(noise, temperature, 0.0)?;
        tape.add(g.mean, scaled)
    }

    fn gaussian_head(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        input: TensorId,
        mean_head: &GclParams,
        scale_head: &GclParams,
    ) -> Result<GaussianIds> {
        let mean = gcl(tape, input, &mean_head.bind(binding), false)?;
        let raw = gcl(tape, input, &scale_head.bind(binding), false)?;
        let log_scale = tape.clamp(raw, LOG_SCALE_MIN, LOG_SCALE_MAX)?;
        Ok(GaussianIds { mean, log_scale })
    }

    /// Top-down pass with the principal deterministic route. In posterior
    /// mode the per-layer posteriors fuse route and encoder features by
    /// concatenation along the feature axis. The one-hot (when given) is
    /// concatenated onto the top latent sample before its route
    /// projection.
    pub fn decode(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        mode: DecodeMode,
        batch: usize,
        temperature: Real,
        one_hot: Option<TensorId>,
        rng: &mut ChaCha8Rng,
    ) -> Result<DecodeOutput> {
        if temperature < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "temperature must be nonnegative, got {temperature}"
            )));
        }
        if let Some(classes) = self.cfg.condition_classes {
            let Some(oh) = one_hot else {
                return Err(Error::InvalidArgument(
                    "conditional model requires a class one-hot for decoding".into(),
                ));
            };
            let s = tape.shape(oh);
            if s != [batch, self.cfg.latent_nodes[0], classes] {
                return Err(Error::ShapeMismatch {
                    op: "decode one-hot",
                    lhs: s.to_vec(),
                    rhs: vec![batch, self.cfg.latent_nodes[0], classes],
                });
            }
        } else if one_hot.is_some() {
            return Err(Error::InvalidArgument(
                "class conditioning requested but the model was built without condition_classes"
                    .into(),
            ));
        }

        let layers = self.cfg.layers();
        let f = self.cfg.route_features;

        // Broadcast the learned route seed over the batch.
        let zeros = tape.constant(Tensor::zeros(vec![batch, self.cfg.latent_nodes[0], f]))?;
        let mut route = tape.add(zeros, binding.id(self.params.route_init))?;

        let mut out_layers = Vec::with_capacity(layers);
        for l in 0..layers {
            let stage = &self.params.dec_stages[l];
            let ctx = |e: Error| e.with_context(format!("decoder layer {l}"));
            if let Some(expand) = &stage.expand {
                route = gcl(tape, route, &expand.bind(binding), true).map_err(ctx)?;
                for blk in &stage.gcbs {
                    route = gcb(tape, route, &blk.bind(binding), self.cfg.rezero_on_branch)
                        .map_err(ctx)?;
                }
            }

            let prior = match (&stage.prior_mean, &stage.prior_log_scale) {
                (Some(pm), Some(ps)) => self
                    .gaussian_head(tape, binding, route, pm, ps)
                    .map_err(ctx)?,
                _ => {
                    // fixed standard normal at the top
                    let shape = vec![batch, self.cfg.latent_nodes[0], self.cfg.latent_features[0]];
                    let mean = tape.constant(Tensor::zeros(shape.clone()))?;
                    let log_scale = tape.constant(Tensor::zeros(shape))?;
                    GaussianIds { mean, log_scale }
                }
            };

            let (posterior, z) = match &mode {
                DecodeMode::Prior => {
                    let z = self.reparameterize(tape, &prior, temperature, rng).map_err(ctx)?;
                    (None, z)
                }
                DecodeMode::Posterior(feats) => {
                    let fused = tape.concat(&[route, feats[l]], 2).map_err(ctx)?;
                    let post = self
                        .gaussian_head(tape, binding, fused, &stage.post_mean, &stage.post_log_scale)
                        .map_err(ctx)?;
                    let z = self.reparameterize(tape, &post, temperature, rng).map_err(ctx)?;
                    (Some(post), z)
                }
            };

            let z_in = if l == 0 {
                match one_hot {
                    Some(oh) => tape.concat(&[z, oh], 2).map_err(ctx)?,
                    None => z,
                }
            } else {
                z
            };
            let proj = gcl(tape, z_in, &stage.inject.bind(binding), false).map_err(ctx)?;
            let weighted = tape.mul(proj, binding.id(stage.inject_alpha)).map_err(ctx)?;
            route = tape.add(route, weighted).map_err(ctx)?;

            out_layers.push(LatentLayer { z, posterior, prior });
        }

        for blk in &self.params.final_gcbs {
            route = gcb(tape, route, &blk.bind(binding), self.cfg.rezero_on_branch)
                .map_err(|e| e.with_context("decoder final blocks"))?;
        }
        let obs = self
            .gaussian_head(tape, binding, route, &self.params.obs_mean, &self.params.obs_log_scale)
            .map_err(|e| e.with_context("observation heads"))?;

        Ok(DecodeOutput {
            layers: out_layers,
            obs,
        })
    }

    fn one_hot_tensor(&self, batch: usize, labels: &[usize]) -> Result<Tensor> {
        let classes = self.cfg.condition_classes.ok_or_else(|| {
            Error::InvalidArgument("labels supplied to an unconditional model".into())
        })?;
        if labels.len() != batch {
            return Err(Error::InvalidArgument(format!(
                "{} labels for a batch of {batch}",
                labels.len()
            )));
        }
        let n0 = self.cfg.latent_nodes[0];
        let mut data = vec![0.0; batch * n0 * classes];
        for (b, &c) in labels.iter().enumerate() {
            if c >= classes {
                return Err(Error::InvalidArgument(format!(
                    "class id {c} out of range for {classes} classes"
                )));
            }
            for node in 0..n0 {
                data[(b * n0 + node) * classes + c] = 1.0;
            }
        }
        Tensor::new(vec![batch, n0, classes], data)
    }

    fn maybe_one_hot(
        &self,
        tape: &mut Tape,
        batch: usize,
        labels: Option<&[usize]>,
    ) -> Result<Option<TensorId>> {
        match (self.cfg.condition_classes, labels) {
            (Some(_), Some(labels)) => {
                let t = self.one_hot_tensor(batch, labels)?;
                Ok(Some(tape.constant(t)?))
            }
            (Some(_), None) => Err(Error::InvalidArgument(
                "conditional model requires per-datapoint class labels".into(),
            )),
            (None, Some(_)) => Err(Error::InvalidArgument(
                "labels supplied to an unconditional model".into(),
            )),
            (None, None) => Ok(None),
        }
    }

    /// Single-sample reparameterized ELBO terms for a `[B, nodes, coeffs]`
    /// batch of DCT graphs.
    pub fn elbo(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        x: TensorId,
        labels: Option<&[usize]>,
        kl_weight: Real,
        rng: &mut ChaCha8Rng,
    ) -> Result<ElboTerms> {
        if !(0.0..=1.0).contains(&kl_weight) {
            return Err(Error::InvalidArgument(format!(
                "kl_weight must lie in [0, 1], got {kl_weight}"
            )));
        }
        let batch = self.check_input(tape, x)?;
        let one_hot = self.maybe_one_hot(tape, batch, labels)?;
        let feats = self.encode(tape, binding, x)?;
        let decoded = self.decode(
            tape,
            binding,
            DecodeMode::Posterior(&feats),
            batch,
            1.0,
            one_hot,
            rng,
        )?;

        let ll = log_normal(tape, x, &decoded.obs)
            .map_err(|e| e.with_context("reconstruction log-likelihood"))?;
        let recon_per_dp = tape.sum_axes(ll, &[1, 2])?;

        let mut kl_per_layer = Vec::with_capacity(decoded.layers.len());
        let mut kl_total: Option<TensorId> = None;
        for (l, layer) in decoded.layers.iter().enumerate() {
            let q = layer.posterior.as_ref().expect("posterior mode");
            let kl = kl_diag(tape, q, &layer.prior)
                .map_err(|e| e.with_context(format!("KL at layer {l}")))?;
            let kl_dp = tape.sum_axes(kl, &[1, 2])?;
            kl_per_layer.push(kl_dp);
            kl_total = Some(match kl_total {
                None => kl_dp,
                Some(acc) => tape.add(acc, kl_dp)?,
            });
        }
        let kl_total = kl_total.expect("at least one layer");

        let neg_recon = tape.neg(recon_per_dp)?;
        let weighted_kl = tape.affine(kl_total, kl_weight, 0.0)?;
        let objective_per_dp = tape.add(neg_recon, weighted_kl)?;
        let loss = tape.mean_all(objective_per_dp)?;

        Ok(ElboTerms {
            loss,
            objective_per_dp,
            recon_per_dp,
            kl_per_layer,
        })
    }

    /// Deterministic differentiable score of `x` (posterior decode at
    /// temperature zero). Higher means more in-distribution.
    pub fn score(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        x: TensorId,
        labels: Option<&[usize]>,
        objective: ScoreObjective,
    ) -> Result<ScoreOutput> {
        use rand::SeedableRng;
        let batch = self.check_input(tape, x)?;
        let one_hot = self.maybe_one_hot(tape, batch, labels)?;
        let feats = self.encode(tape, binding, x)?;
        // temperature 0: the rng is never consulted
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let decoded = self.decode(
            tape,
            binding,
            DecodeMode::Posterior(&feats),
            batch,
            0.0,
            one_hot,
            &mut rng,
        )?;

        let per_dp = match objective {
            ScoreObjective::LogJoint => {
                let ll = log_normal(tape, x, &decoded.obs)?;
                let mut acc = tape.sum_axes(ll, &[1, 2])?;
                for layer in &decoded.layers {
                    let lp = log_normal(tape, layer.z, &layer.prior)?;
                    let lp_dp = tape.sum_axes(lp, &[1, 2])?;
                    acc = tape.add(acc, lp_dp)?;
                }
                acc
            }
            ScoreObjective::Elbo => {
                let ll = log_normal(tape, x, &decoded.obs)?;
                let mut acc = tape.sum_axes(ll, &[1, 2])?;
                for layer in &decoded.layers {
                    let q = layer.posterior.as_ref().expect("posterior mode");
                    let kl = kl_diag(tape, q, &layer.prior)?;
                    let kl_dp = tape.sum_axes(kl, &[1, 2])?;
                    let neg = tape.neg(kl_dp)?;
                    acc = tape.add(acc, neg)?;
                }
                acc
            }
            ScoreObjective::PosteriorDensity => {
                let mut acc: Option<TensorId> = None;
                for layer in &decoded.layers {
                    let q = layer.posterior.as_ref().expect("posterior mode");
                    let lq = log_normal(tape, layer.z, q)?;
                    let lq_dp = tape.sum_axes(lq, &[1, 2])?;
                    acc = Some(match acc {
                        None => lq_dp,
                        Some(a) => tape.add(a, lq_dp)?,
                    });
                }
                acc.expect("at least one layer")
            }
        };
        let total = tape.sum_all(per_dp)?;
        Ok(ScoreOutput { per_dp, total })
    }

    /// Class-conditional (or unconditional) generation: prior-mode decode,
    /// observation mean, then per-node inverse DCT back to trajectories.
    /// Returns `count` motion matrices of shape `[obs_nodes, obs_features]`.
    pub fn generate(
        &self,
        basis: &DctBasis,
        count: usize,
        temperature: Real,
        class_id: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Tensor>> {
        if count == 0 {
            return Err(Error::InvalidArgument("generate: count must be positive".into()));
        }
        if basis.len() != self.cfg.obs_features || basis.kept() != self.cfg.obs_features {
            return Err(Error::InvalidArgument(format!(
                "generate: DCT basis length {} does not match obs_features {}",
                basis.len(),
                self.cfg.obs_features
            )));
        }
        let mut tape = Tape::new();
        let binding = self.store.bind(&mut tape)?;
        let labels: Option<Vec<usize>> = match (self.cfg.condition_classes, class_id) {
            (Some(_), Some(c)) => Some(vec![c; count]),
            (Some(_), None) => {
                return Err(Error::InvalidArgument(
                    "conditional model requires a class id for generation".into(),
                ))
            }
            (None, Some(_)) => {
                return Err(Error::InvalidArgument(
                    "class id supplied but the model is unconditional".into(),
                ))
            }
            (None, None) => None,
        };
        let one_hot = self.maybe_one_hot(&mut tape, count, labels.as_deref())?;
        let decoded = self.decode(
            &mut tape,
            &binding,
            DecodeMode::Prior,
            count,
            temperature,
            one_hot,
            rng,
        )?;
        let mean = tape.tensor(decoded.obs.mean);
        let mut out = Vec::with_capacity(count);
        let per = self.cfg.obs_nodes * self.cfg.obs_features;
        for b in 0..count {
            let coeffs = Tensor::new(
                vec![self.cfg.obs_nodes, self.cfg.obs_features],
                mean.data()[b * per..(b + 1) * per].to_vec(),
            )?;
            out.push(basis.inverse_rows(&coeffs)?);
        }
        Ok(out)
    }

    /// K-sample importance-weighted log-likelihood estimate per
    /// datapoint (no gradients; used to sanity-check the ELBO bound).
    pub fn importance_weighted_ll(
        &self,
        x_batch: &Tensor,
        labels: Option<&[usize]>,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Real>> {
        let batch = x_batch.shape()[0];
        let mut log_ws: Vec<Vec<Real>> = vec![Vec::with_capacity(k); batch];
        for _ in 0..k {
            let mut tape = Tape::new();
            let binding = self.store.bind(&mut tape)?;
            let x = tape.constant(x_batch.clone())?;
            let one_hot = self.maybe_one_hot(&mut tape, batch, labels)?;
            let feats = self.encode(&mut tape, &binding, x)?;
            let decoded = self.decode(
                &mut tape,
                &binding,
                DecodeMode::Posterior(&feats),
                batch,
                1.0,
                one_hot,
                rng,
            )?;
            let ll = log_normal(&mut tape, x, &decoded.obs)?;
            let mut logp = tape.sum_axes(ll, &[1, 2])?;
            let mut logq: Option<TensorId> = None;
            for layer in &decoded.layers {
                let lp = log_normal(&mut tape, layer.z, &layer.prior)?;
                let lp_dp = tape.sum_axes(lp, &[1, 2])?;
                logp = tape.add(logp, lp_dp)?;
                let q = layer.posterior.as_ref().expect("posterior mode");
                let lq = log_normal(&mut tape, layer.z, q)?;
                let lq_dp = tape.sum_axes(lq, &[1, 2])?;
                logq = Some(match logq {
                    None => lq_dp,
                    Some(a) => tape.add(a, lq_dp)?,
                });
            }
            let logq = logq.expect("at least one layer");
            let lp = tape.data(logp);
            let lq = tape.data(logq);
            for b in 0..batch {
                log_ws[b].push(lp[b] - lq[b]);
            }
        }
        Ok(log_ws
            .into_iter()
            .map(|ws| {
                let m = ws.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
                let sum: Real = ws.iter().map(|w| (w - m).exp()).sum();
                m + (sum / k as Real).ln()
            })
            .collect())
    }
}

/// Stack per-datapoint `[nodes, feats]` tensors into a `[B, nodes, feats]`
/// batch.
pub fn stack_batch(items: &[Tensor]) -> Result<Tensor> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("stack_batch: empty batch".into()));
    }
    let shape = items[0].shape().to_vec();
    let mut data = Vec::with_capacity(items.len() * items[0].numel());
    for t in items {
        if t.shape() != shape {
            return Err(Error::ShapeMismatch {
                op: "stack_batch",
                lhs: shape,
                rhs: t.shape().to_vec(),
            });
        }
        data.extend_from_slice(t.data());
    }
    let mut out_shape = vec![items.len()];
    out_shape.extend(shape);
    Tensor::new(out_shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            latent_nodes: vec![1, 3, 6],
            latent_features: vec![8, 4, 4],
            route_features: 8,
            obs_nodes: 6,
            obs_features: 5,
            gcbs_per_stage: 1,
            condition_classes: None,
            rezero_on_branch: false,
        }
    }

    fn random_batch(rng: &mut ChaCha8Rng, b: usize, n: usize, f: usize) -> Tensor {
        let data = (0..b * n * f).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![b, n, f], data).unwrap()
    }

    #[test]
    fn default_config_matches_published_latent_shapes() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.latent_nodes, vec![1, 8, 24, 54]);
        assert_eq!(cfg.latent_features, vec![256, 128, 128, 128]);
        cfg.validate().unwrap();
    }

    #[test]
    fn conditional_default_widens_top_latent_to_269() {
        let mut cfg = ModelConfig::default();
        cfg.condition_classes = Some(13);
        let model = HgVae::init(cfg, 0).unwrap();
        // the top injection projects (256 + 13)-wide features
        let inject = &model.params.dec_stages[0].inject;
        assert_eq!(inject.shape.f_in, 269);
    }

    #[test]
    fn encoder_feature_node_counts_contract_stage_by_stage() {
        let model = HgVae::init(small_cfg(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let binding = model.store().bind(&mut tape).unwrap();
        let x = tape.constant(random_batch(&mut rng, 2, 6, 5)).unwrap();
        let feats = model.encode(&mut tape, &binding, x).unwrap();
        let nodes: Vec<usize> = feats.iter().map(|&f| tape.shape(f)[1]).collect();
        assert_eq!(nodes, vec![1, 3, 6]);
    }

    #[test]
    fn zero_input_gives_zero_features_at_init() {
        let model = HgVae::init(small_cfg(), 3).unwrap();
        let mut tape = Tape::new();
        let binding = model.store().bind(&mut tape).unwrap();
        let x = tape.constant(Tensor::zeros(vec![2, 6, 5])).unwrap();
        let feats = model.encode(&mut tape, &binding, x).unwrap();
        for f in feats {
            assert!(tape.data(f).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn batch_elements_do_not_mix() {
        let model = HgVae::init(small_cfg(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_batch(&mut rng, 1, 6, 5);
        let b = random_batch(&mut rng, 1, 6, 5);
        let joint = stack_batch(&[
            Tensor::new(vec![6, 5], a.data().to_vec()).unwrap(),
            Tensor::new(vec![6, 5], b.data().to_vec()).unwrap(),
        ])
        .unwrap();

        let feats_of = |x: &Tensor| {
            let mut tape = Tape::new();
            let binding = model.store().bind(&mut tape).unwrap();
            let xid = tape.constant(x.clone()).unwrap();
            let feats = model.encode(&mut tape, &binding, xid).unwrap();
            feats
                .iter()
                .map(|&f| tape.data(f).to_vec())
                .collect::<Vec<_>>()
        };
        let fa = feats_of(&a);
        let fj = feats_of(&joint);
        // first element of the joint batch matches the solo pass
        for (solo, joint) in fa.iter().zip(&fj) {
            assert_eq!(&joint[..solo.len()], solo.as_slice());
        }
    }

    #[test]
    fn priors_have_near_zero_means_at_initialization() {
        let model = HgVae::init(small_cfg(), 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let binding = model.store().bind(&mut tape).unwrap();
        let x = tape.constant(random_batch(&mut rng, 2, 6, 5)).unwrap();
        let feats = model.encode(&mut tape, &binding, x).unwrap();
        let decoded = model
            .decode(&mut tape, &binding, DecodeMode::Posterior(&feats), 2, 1.0, None, &mut rng)
            .unwrap();
        for layer in &decoded.layers {
            assert!(tape
                .data(layer.prior.mean)
                .iter()
                .all(|v| v.abs() < 1e-6));
        }
    }

    #[test]
    fn temperature_zero_prior_decode_is_deterministic() {
        let model = HgVae::init(small_cfg(), 8).unwrap();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let binding = model.store().bind(&mut tape).unwrap();
            let d = model
                .decode(&mut tape, &binding, DecodeMode::Prior, 1, 0.0, None, &mut rng)
                .unwrap();
            tape.data(d.obs.mean).to_vec()
        };
        // different rng seeds, same output: the mean path ignores noise
        assert_eq!(run(1), run(2));
    }

    #[test]
    fn same_seed_gives_identical_samples() {
        let model = HgVae::init(small_cfg(), 9).unwrap();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(33);
            let mut tape = Tape::new();
            let binding = model.store().bind(&mut tape).unwrap();
            let d = model
                .decode(&mut tape, &binding, DecodeMode::Prior, 2, 1.0, None, &mut rng)
                .unwrap();
            (
                tape.data(d.layers[0].z).to_vec(),
                tape.data(d.obs.mean).to_vec(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn posterior_latent_shapes_follow_config() {
        let cfg = ModelConfig {
            latent_nodes: vec![1, 8, 24, 54],
            latent_features: vec![256, 128, 128, 128],
            route_features: 16,
            obs_nodes: 54,
            obs_features: 50,
            gcbs_per_stage: 1,
            condition_classes: None,
            rezero_on_branch: false,
        };
        let model = HgVae::init(cfg, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let binding = model.store().bind(&mut tape).unwrap();
        let x = tape.constant(random_batch(&mut rng, 1, 54, 50)).unwrap();
        let feats = model.encode(&mut tape, &binding, x).unwrap();
        let d = model
            .decode(&mut tape, &binding, DecodeMode::Posterior(&feats), 1, 1.0, None, &mut rng)
            .unwrap();
        let shapes: Vec<Vec<usize>> = d
            .layers
            .iter()
            .map(|l| tape.shape(l.z).to_vec())
            .collect();
        assert_eq!(
            shapes,
            vec![
                vec![1, 1, 256],
                vec![1, 8, 128],
                vec![1, 24, 128],
                vec![1, 54, 128]
            ]
        );
    }

    #[test]
    fn kl_of_identical_gaussians_is_zero() {
        let mut tape = Tape::new();
        let mean = tape.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let ls = tape.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let g = GaussianIds {
            mean,
            log_scale: ls,
        };
        let kl = kl_diag(&mut tape, &g, &g).unwrap();
        assert!(tape.data(kl).iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn kl_of_shifted_unit_gaussian_is_half_m_squared() {
        let mut tape = Tape::new();
        let m = 1.7;
        let mean_q = tape.constant(Tensor::full(vec![4], m)).unwrap();
        let ls_q = tape.constant(Tensor::zeros(vec![4])).unwrap();
        let mean_p = tape.constant(Tensor::zeros(vec![4])).unwrap();
        let ls_p = tape.constant(Tensor::zeros(vec![4])).unwrap();
        let kl = kl_diag(
            &mut tape,
            &GaussianIds {
                mean: mean_q,
                log_scale: ls_q,
            },
            &GaussianIds {
                mean: mean_p,
                log_scale: ls_p,
            },
        )
        .unwrap();
        for &v in tape.data(kl) {
            assert!((v - m * m / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn elbo_rejects_out_of_range_kl_weight() {
        let model = HgVae::init(small_cfg(), 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut tape = Tape::new();
        let binding = model.store().bind(&mut tape).unwrap();
        let x = tape.constant(random_batch(&mut rng, 1, 6, 5)).unwrap();
        assert!(model
            .elbo(&mut tape, &binding, x, None, 1.5, &mut rng)
            .is_err());
    }

    #[test]
    fn all_layers_receive_nonzero_kl_gradients_at_init() {
        let model = HgVae::init(small_cfg(), 14).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut tape = Tape::new();
        let binding = model.store().bind(&mut tape).unwrap();
        let x = tape.constant(random_batch(&mut rng, 4, 6, 5)).unwrap();
        let terms = model
            .elbo(&mut tape, &binding, x, None, 1.0, &mut rng)
            .unwrap();
        // each layer's KL must itself respond to the loss: check that the
        // gradient of the summed KLs w.r.t. each posterior-head weight is
        // nonzero
        let grads = tape.backward(terms.loss).unwrap();
        for (l, stage) in model.params.dec_stages.iter().enumerate() {
            let g = grads
                .get(binding.id(stage.post_mean.w))
                .expect("gradient for posterior head");
            let norm: Real = g.iter().map(|v| v * v).sum::<Real>().sqrt();
            assert!(norm > 0.0, "layer {l} posterior head has zero gradient");
        }
        for (l, kl) in terms.kl_per_layer.iter().enumerate() {
            let val: Real = tape.data(*kl).iter().sum();
            assert!(val.is_finite(), "layer {l} KL not finite");
        }
    }

    #[test]
    fn reparameterization_gradients_are_exact_at_zero_noise() {
        // at temperature 0: dz/dmean = 1 per dimension, dz/dlog_scale = 0
        let model = HgVae::init(small_cfg(), 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut tape = Tape::new();
        let binding = model.store().bind(&mut tape).unwrap();
        let x = tape.constant(random_batch(&mut rng, 1, 6, 5)).unwrap();
        let feats = model.encode(&mut tape, &binding, x).unwrap();
        let d = model
            .decode(&mut tape, &binding, DecodeMode::Posterior(&feats), 1, 0.0, None, &mut rng)
            .unwrap();
        let z_sum = {
            let mut acc = tape.sum_all(d.layers[0].z).unwrap();
            for layer in &d.layers[1..] {
                let s = tape.sum_all(layer.z).unwrap();
                acc = tape.add(acc, s).unwrap();
            }
            acc
        };
        let grads = tape.backward(z_sum).unwrap();
        for layer in &d.layers {
            let q = layer.posterior.as_ref().unwrap();
            let gm = grads.get(q.mean).unwrap();
            assert!(gm.iter().all(|&v| (v - 1.0).abs() < 1e-12));
            let gs = grads.get(q.log_scale).unwrap();
            assert!(gs.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn score_is_deterministic_and_sensitive_to_input() {
        let model = HgVae::init(small_cfg(), 18).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let xval = random_batch(&mut rng, 2, 6, 5);
        let score_of = |x: &Tensor| {
            let mut tape = Tape::new();
            let binding = model.store().bind(&mut tape).unwrap();
            let xid = tape.constant(x.clone()).unwrap();
            let s = model
                .score(&mut tape, &binding, xid, None, ScoreObjective::LogJoint)
                .unwrap();
            tape.data(s.per_dp).to_vec()
        };
        assert_eq!(score_of(&xval), score_of(&xval));
    }

    #[test]
    fn generate_rejects_class_on_unconditional_model() {
        let model = HgVae::init(small_cfg(), 20).unwrap();
        let basis = DctBasis::new(5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        assert!(model.generate(&basis, 1, 0.0, Some(0), &mut rng).is_err());
    }

    #[test]
    fn parameter_count_is_positive_and_monotone_in_depth() {
        let c1 = small_cfg();
        let mut c2 = small_cfg();
        c2.gcbs_per_stage = 2;
        let m1 = HgVae::init(c1, 22).unwrap();
        let m2 = HgVae::init(c2, 22).unwrap();
        assert!(m1.parameter_count() > 0);
        assert!(m2.parameter_count() > m1.parameter_count());
    }

    #[test]
    fn score_gradient_wrt_input_matches_finite_differences() {
        use crate::gradcheck::assert_gradients_match;
        let model = HgVae::init(small_cfg(), 23).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let xval = random_batch(&mut rng, 1, 6, 5);
        let score_scalar = |vals: &[Real]| {
            let mut tape = Tape::new();
            let binding = model.store().bind(&mut tape).unwrap();
            let x = tape
                .leaf(Tensor::new(vec![1, 6, 5], vals.to_vec()).unwrap(), false)
                .unwrap();
            let s = model
                .score(&mut tape, &binding, x, None, ScoreObjective::LogJoint)
                .unwrap();
            tape.scalar_value(s.total)
        };
        let mut tape = Tape::new();
        let binding = model.store().bind(&mut tape).unwrap();
        let x = tape.leaf(xval.clone(), true).unwrap();
        let s = model
            .score(&mut tape, &binding, x, None, ScoreObjective::LogJoint)
            .unwrap();
        let grads = tape.backward(s.total).unwrap();
        assert_gradients_match("log-joint score", xval.data(), grads.get(x).unwrap(), score_scalar);
    }
}
