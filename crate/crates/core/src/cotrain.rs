//! Joint optimization of the action and depth objectives, the ablation
//! variants, and closed-loop policy evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Codec, DepthMap};
use crate::config::{canonical_hash, Fnv1a};
use crate::error::{Error, Result};
use crate::experts::{
    cfm_loss, depth_logits, depth_loss, sample_flow, ActionChunk, Branches, CodeSpace,
    ExpertConfig, FlowSample, Model, Observation, StackConfig, DEPTH_PREFIX,
};
use crate::mask::MaskVariant;
use crate::numerics::{
    adamw_step_filtered, batch_gradients, finite_diff_check, AdamWConfig, ExampleOutput, FdOptions,
    LrSchedule, OpCheck, OptimizerState, ParamVars, Tape, Tensor, Var,
};
use crate::par::{self, Exec};
use crate::synthworld::{
    self, random_scene, rollout, stream_rng, Dataset, Policy, Scene, WorldConfig,
};

/// Depth-loss weight `λ_t = λ_0·γ^t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoTrainSchedule {
    pub lambda0: f64,
    pub gamma: f64,
}

impl Default for CoTrainSchedule {
    fn default() -> Self {
        Self {
            lambda0: 0.01,
            gamma: 0.999,
        }
    }
}

impl CoTrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda0 >= 0.0) || !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "schedule needs lambda0 >= 0 and gamma in (0, 1], got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn lambda_at(&self, t: u64) -> f64 {
        lambda_at(self, t)
    }
}

pub fn lambda_at(s: &CoTrainSchedule, t: u64) -> f64 {
    s.lambda0 * s.gamma.powf(t as f64)
}

/// Ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariantSpec {
    pub depth_loss_on: bool,
    pub depth_expert_on: bool,
    /// `false` regresses pixels instead of predicting code indices.
    pub latent_prediction: bool,
    /// `false` selects the mask that also lets proprio read depth.
    pub hybrid_mask: bool,
}

impl Default for VariantSpec {
    fn default() -> Self {
        Self::full()
    }
}

impl VariantSpec {
    pub fn full() -> Self {
        Self {
            depth_loss_on: true,
            depth_expert_on: true,
            latent_prediction: true,
            hybrid_mask: true,
        }
    }

    pub fn without_depth_loss() -> Self {
        Self {
            depth_loss_on: false,
            ..Self::full()
        }
    }

    pub fn without_depth_expert() -> Self {
        Self {
            depth_loss_on: false,
            depth_expert_on: false,
            ..Self::full()
        }
    }

    pub fn pixel_regression() -> Self {
        Self {
            latent_prediction: false,
            ..Self::full()
        }
    }

    pub fn dreamvla_mask() -> Self {
        Self {
            hybrid_mask: false,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth_loss_on && !self.depth_expert_on {
            return Err(Error::Config("depth loss requires the depth expert".into()));
        }
        if !self.latent_prediction && !self.depth_expert_on {
            return Err(Error::Config(
                "pixel regression requires the depth expert".into(),
            ));
        }
        Ok(())
    }

    pub fn branches(&self) -> Branches {
        Branches {
            depth_expert: self.depth_expert_on,
            pixel_head: self.depth_expert_on && !self.latent_prediction,
            mask: if self.hybrid_mask {
                MaskVariant::Hybrid
            } else {
                MaskVariant::DreamVla
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub adam: AdamWConfig,
    pub held_out_fraction: f64,
    /// Held-out depth accuracy every this many steps; 0 disables.
    pub eval_every: usize,
    /// Closed-loop episodes after training; 0 skips the rollout evaluation.
    pub eval_episodes: usize,
    pub max_episode_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 16,
            // Desk-scale models need a far larger step than the 5e-5 used
            // for pretrained backbones.
            lr: LrSchedule {
                peak_lr: 2e-3,
                ..LrSchedule::default()
            },
            adam: AdamWConfig::default(),
            held_out_fraction: 0.1,
            eval_every: 0,
            eval_episodes: 0,
            max_episode_steps: 60,
        }
    }
}

/// Everything that determines a co-training run besides data and codec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct CoTrainConfig {
    pub experts: ExpertConfig,
    pub train: TrainConfig,
    pub schedule: CoTrainSchedule,
    pub variant: VariantSpec,
}

impl CoTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.experts.validate()?;
        self.schedule.validate()?;
        self.variant.validate()?;
        let t = &self.train;
        if t.batch_size == 0 || t.max_episode_steps == 0 {
            return Err(Error::Config(
                "batch_size and max_episode_steps must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&t.held_out_fraction) {
            return Err(Error::Config("held_out_fraction must be in [0, 1)".into()));
        }
        if !(t.lr.peak_lr > 0.0) || t.lr.cycle_length == 0 {
            return Err(Error::Config(
                "learning rate schedule needs a positive peak and cycle".into(),
            ));
        }
        Ok(())
    }
}

/// `L_action + λ_t·L_depth`; without a depth term, or with `λ_t = 0`, the
/// action loss is returned as is.
pub fn total_loss<'t>(action: Var<'t>, depth: Option<Var<'t>>, lambda_t: f64) -> Result<Var<'t>> {
    match depth {
        Some(d) if lambda_t != 0.0 => action.add(d.scale(lambda_t)),
        _ => Ok(action),
    }
}

pub fn pixel_depth_loss(pred: &DepthMap, truth: &DepthMap) -> Result<f64> {
    pred.mse(truth)
}

/// One supervised example: observation, expert chunk, and depth targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub obs: Observation,
    pub chunk: ActionChunk,
    pub depth: DepthMap,
    pub tokens: Vec<usize>,
}

/// Flattens the steps of `episodes` and tokenizes their depth with the
/// frozen codec.
pub fn prepare_samples(
    data: &Dataset,
    episodes: &[usize],
    codec: &Codec,
    exec: Exec,
) -> Result<Vec<TrainSample>> {
    let steps: Vec<(usize, usize)> = episodes
        .iter()
        .flat_map(|&e| (0..data.episodes[e].steps.len()).map(move |t| (e, t)))
        .collect();
    par::try_map_indexed(exec, steps.len(), |i| {
        let (e, t) = steps[i];
        let s = &data.episodes[e].steps[t];
        Ok(TrainSample {
            obs: s.obs.clone(),
            chunk: s.chunk.clone(),
            depth: s.depth.clone(),
            tokens: codec.tokenize(&s.depth)?.indices,
        })
    })
}

/// One line of the training report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub total: f64,
    pub action: f64,
    /// Absent when the depth term was not evaluated.
    pub depth: Option<f64>,
    pub lambda: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub depth_accuracy: Option<f64>,
    pub held_out_action_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub depth_accuracy: Option<f64>,
    pub success_rate: Option<f64>,
    pub codec_checksum: String,
    pub params_checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReportLine {
    Header { seed: u64, config_hash: String },
    Step(StepRecord),
    Eval(EvalRecord),
    Final(FinalMetrics),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub seed: u64,
    pub config_hash: u64,
    pub records: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub final_metrics: Option<FinalMetrics>,
}

impl TrainReport {
    /// Header, step records, evaluations, then final metrics, one JSON object
    /// per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut lines = vec![ReportLine::Header {
            seed: self.seed,
            config_hash: format!("{:016x}", self.config_hash),
        }];
        lines.extend(self.records.iter().cloned().map(ReportLine::Step));
        lines.extend(self.evals.iter().cloned().map(ReportLine::Eval));
        lines.extend(self.final_metrics.clone().map(ReportLine::Final));
        let mut out = String::new();
        for l in &lines {
            out.push_str(&serde_json::to_string(l)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut report = TrainReport {
            seed: 0,
            config_hash: 0,
            records: Vec::new(),
            evals: Vec::new(),
            final_metrics: None,
        };
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str::<ReportLine>(line)? {
                ReportLine::Header { seed, config_hash } => {
                    report.seed = seed;
                    report.config_hash =
                        u64::from_str_radix(&config_hash, 16).map_err(|e| Error::Format {
                            kind: "report",
                            msg: e.to_string(),
                        })?;
                }
                ReportLine::Step(r) => report.records.push(r),
                ReportLine::Eval(e) => report.evals.push(e),
                ReportLine::Final(f) => report.final_metrics = Some(f),
            }
        }
        Ok(report)
    }
}

/// Seed for the flow samples of step `t`.
pub fn step_seed(seed: u64, t: u64) -> u64 {
    let mut h = Fnv1a::new();
    h.write(&seed.to_le_bytes());
    h.write(&t.to_le_bytes());
    h.finish()
}

pub struct ExampleLoss<'t> {
    pub total: Var<'t>,
    pub action: Var<'t>,
    pub depth: Option<Var<'t>>,
}

/// Combined objective of one sample under a fixed flow draw. The depth
/// branch is only evaluated when it carries weight.
#[allow(clippy::too_many_arguments)]
pub fn example_loss<'t>(
    tape: &'t Tape,
    vars: &ParamVars<'t>,
    model: &Model,
    codebook: &Tensor,
    sample: &TrainSample,
    flow: &FlowSample,
    lambda: f64,
    variant: &VariantSpec,
) -> Result<ExampleLoss<'t>> {
    example_loss_with(
        tape, vars, model, codebook, sample, flow, lambda, variant, None,
    )
}

#[allow(clippy::too_many_arguments)]
fn example_loss_with<'t>(
    tape: &'t Tape,
    vars: &ParamVars<'t>,
    model: &Model,
    codebook: &Tensor,
    sample: &TrainSample,
    flow: &FlowSample,
    lambda: f64,
    variant: &VariantSpec,
    frozen: Option<&Tensor>,
) -> Result<ExampleLoss<'t>> {
    let tokens = model.embed_prefix_with(tape, vars, &sample.obs, frozen)?;
    let prefix = model.run_prefix(tape, vars, &tokens)?;
    let field = model.action_expert_forward(tape, vars, &prefix, &flow.noisy, flow.lambda)?;
    let action = cfm_loss(field, flow)?;
    let depth = if variant.depth_loss_on && lambda != 0.0 {
        let pred = prefix
            .depth_pred
            .ok_or_else(|| Error::Contract("depth loss without depth expert".into()))?;
        Some(if variant.latent_prediction {
            let logits = depth_logits(pred, tape.constant(codebook.clone()), model.code_space.tau)?;
            depth_loss(logits, &sample.tokens)?
        } else {
            let px = model.pixel_depth(vars, pred)?;
            let truth = tape.constant(sample.depth.to_tensor().reshape(px.shape())?);
            let n = sample.depth.values().len() as f64;
            px.sub(truth)?.sum_squares().scale(1.0 / n)
        })
    } else {
        None
    };
    Ok(ExampleLoss {
        total: total_loss(action, depth, lambda)?,
        action,
        depth,
    })
}

/// Loss values and gradients of one batch at the current parameters.
pub struct BatchLoss {
    pub record: StepRecord,
    pub grads: BTreeMap<String, Tensor>,
    use_depth: bool,
}

/// Computes the combined objective of `batch` without updating anything.
/// `t` selects `λ_t`, the learning rate, and the flow-sample seed.
pub fn batch_loss(
    model: &Model,
    codec: &Codec,
    batch: &[&TrainSample],
    cfg: &CoTrainConfig,
    seed: u64,
    t: u64,
    exec: Exec,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::Param("empty batch".into()));
    }
    let variant = &cfg.variant;
    let lambda = if variant.depth_loss_on {
        cfg.schedule.lambda_at(t)
    } else {
        0.0
    };
    let use_depth = variant.depth_loss_on && lambda != 0.0;
    let codebook = codec.codebook()?;
    let (lo, hi) = (model.config.lambda_min, model.config.lambda_max);
    let bseed = step_seed(seed, t);
    let out = batch_gradients(exec, &model.params, batch.len(), |tape, vars, i| {
        let s = batch[i];
        let flow = sample_flow(&s.chunk, lo, hi, &mut stream_rng(bseed, i as u64))?;
        let l = example_loss(tape, vars, model, codebook, s, &flow, lambda, variant)?;
        let (action, depth) = (l.action, l.depth);
        let mut metrics = vec![action.item()?];
        metrics.extend(depth.map(|d| d.item()).transpose()?);
        Ok(ExampleOutput {
            loss: l.total,
            metrics,
        })
    });
    let out = match out {
        Ok(o) => o,
        Err(Error::NonFinite(what)) => {
            return Err(Error::NonFinite(format!(
                "step {t}: {what} (lambda {lambda})"
            )));
        }
        Err(e) => return Err(e),
    };
    let n = batch.len() as f64;
    let action = out.metrics.iter().map(|m| m[0]).sum::<f64>() / n;
    let depth = use_depth.then(|| out.metrics.iter().map(|m| m[1]).sum::<f64>() / n);
    if !out.loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "step {t}: total {} action {action} depth {depth:?}",
            out.loss
        )));
    }
    Ok(BatchLoss {
        record: StepRecord {
            step: t,
            total: out.loss,
            action,
            depth,
            lambda,
            lr: cfg.train.lr.lr_at_step(t),
        },
        grads: out.grads,
        use_depth,
    })
}

/// One optimizer update. Depth-expert weights are only updated when the
/// depth term contributed to the loss.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut Model,
    codec: &Codec,
    batch: &[&TrainSample],
    cfg: &CoTrainConfig,
    state: &mut OptimizerState,
    seed: u64,
    t: u64,
    exec: Exec,
) -> Result<StepRecord> {
    let before = codec.params.checksum();
    let out = batch_loss(model, codec, batch, cfg, seed, t, exec)?;
    model.params.set_grads(&out.grads)?;
    let use_depth = out.use_depth;
    adamw_step_filtered(
        &mut model.params,
        state,
        out.record.lr,
        &cfg.train.adam,
        |name| use_depth || !name.starts_with(DEPTH_PREFIX),
    )?;
    if codec.params.checksum() != before {
        return Err(Error::Contract(
            "codec parameters changed during a training step".into(),
        ));
    }
    Ok(out.record)
}

/// Fraction of latent positions where the nearest code to the depth
/// expert's prediction equals the codec's token.
pub fn depth_accuracy(
    model: &Model,
    codec: &Codec,
    samples: &[TrainSample],
    exec: Exec,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Param("no samples for depth accuracy".into()));
    }
    let codebook = codec.codebook()?;
    let hits = par::try_map_indexed(exec, samples.len(), |i| {
        let s = &samples[i];
        let pred = model.predict_depth_codes(&s.obs)?;
        let got = crate::codec::nearest_codes(&pred, codebook)?;
        Ok::<_, Error>(got.iter().zip(&s.tokens).filter(|(a, b)| a == b).count())
    })?;
    let total: usize = samples.iter().map(|s| s.tokens.len()).sum();
    Ok(hits.iter().sum::<usize>() as f64 / total as f64)
}

pub struct TrainOutcome {
    pub model: Model,
    pub report: TrainReport,
    pub held_out: Vec<TrainSample>,
}

/// Seeded-shuffle minibatch training on the non-held-out episodes.
pub fn train_loop(
    data: &Dataset,
    codec: &Codec,
    cfg: &CoTrainConfig,
    seed: u64,
    exec: Exec,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let steps = cfg.train.steps;
    if steps == 0 {
        return Err(Error::Param("steps must be at least 1".into()));
    }
    if data.episodes.is_empty() {
        return Err(Error::Param("empty dataset".into()));
    }
    let (train_eps, held_eps) = data.split(cfg.train.held_out_fraction, seed);
    let train = prepare_samples(data, &train_eps, codec, exec)?;
    let held_out = prepare_samples(data, &held_eps, codec, exec)?;
    let mut model = Model::new(
        cfg.experts.clone(),
        CodeSpace::from(&codec.config),
        cfg.variant.branches(),
        seed,
    )?;
    let mut state = OptimizerState::new(&model.params);
    let mut order: Vec<usize> = Vec::new();
    let mut shuffle = stream_rng(seed, 2);
    let mut report = TrainReport {
        seed,
        config_hash: canonical_hash(cfg)?,
        records: Vec::with_capacity(steps),
        evals: Vec::new(),
        final_metrics: None,
    };
    let depth_eval =
        cfg.variant.depth_expert_on && cfg.variant.latent_prediction && !held_out.is_empty();
    for t in 0..steps as u64 {
        let mut batch = Vec::with_capacity(cfg.train.batch_size);
        while batch.len() < cfg.train.batch_size {
            if order.is_empty() {
                order = (0..train.len()).collect();
                order.shuffle(&mut shuffle);
                order.reverse();
            }
            batch.push(&train[order.pop().expect("refilled")]);
        }
        let rec = train_step(&mut model, codec, &batch, cfg, &mut state, seed, t, exec)?;
        report.records.push(rec);
        let every = cfg.train.eval_every;
        if every > 0 && (t + 1) % every as u64 == 0 && !held_out.is_empty() {
            report.evals.push(evaluate_held_out(
                &model, codec, &held_out, cfg, seed, t, depth_eval, exec,
            )?);
        }
    }
    let success_rate = if cfg.train.eval_episodes > 0 {
        Some(
            evaluate_policy(
                &model,
                &data.config,
                cfg.train.eval_episodes,
                seed,
                cfg.train.max_episode_steps,
                exec,
            )?
            .success_rate,
        )
    } else {
        None
    };
    report.final_metrics = Some(FinalMetrics {
        depth_accuracy: if depth_eval {
            Some(depth_accuracy(&model, codec, &held_out, exec)?)
        } else {
            None
        },
        success_rate,
        codec_checksum: format!("{:016x}", codec.params.checksum()),
        params_checksum: format!("{:016x}", model.params.checksum()),
    });
    Ok(TrainOutcome {
        model,
        report,
        held_out,
    })
}

#[allow(clippy::too_many_arguments)]
fn evaluate_held_out(
    model: &Model,
    codec: &Codec,
    held_out: &[TrainSample],
    cfg: &CoTrainConfig,
    seed: u64,
    t: u64,
    depth_eval: bool,
    exec: Exec,
) -> Result<EvalRecord> {
    let refs: Vec<&TrainSample> = held_out.iter().collect();
    let mut action_cfg = cfg.clone();
    action_cfg.variant.depth_loss_on = false;
    let loss = batch_loss(model, codec, &refs, &action_cfg, seed ^ 0x5eed, t, exec)?;
    Ok(EvalRecord {
        step: t,
        depth_accuracy: if depth_eval {
            Some(depth_accuracy(model, codec, held_out, exec)?)
        } else {
            None
        },
        held_out_action_loss: loss.record.action,
    })
}

/// Samples chunks by integrating the learned field.
pub struct ModelPolicy<'m> {
    pub model: &'m Model,
    pub rng: ChaCha8Rng,
    pub steps: usize,
}

impl Policy for ModelPolicy<'_> {
    fn act(&mut self, obs: &Observation, _scene: &Scene) -> Result<ActionChunk> {
        let chunk = self
            .model
            .integrate_actions(obs, self.steps, &mut self.rng)?;
        let clamped = chunk.values().iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        ActionChunk::new(chunk.horizon(), chunk.dim(), clamped)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub episode: usize,
    pub success: bool,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEval {
    pub success_rate: f64,
    pub episodes: Vec<EpisodeOutcome>,
}

/// Scene of evaluation episode `i` under `seed`, disjoint from the training
/// streams.
pub fn eval_scene(seed: u64, i: usize, world: &WorldConfig) -> Scene {
    random_scene(
        &mut stream_rng(seed ^ 0xe7a1_0000_0000_0000, i as u64),
        world,
    )
}

/// Runs `episodes` closed-loop rollouts with policies from `make`; results
/// are merged in episode order.
pub fn evaluate_with<P, F>(
    world: &WorldConfig,
    episodes: usize,
    seed: u64,
    max_steps: usize,
    exec: Exec,
    make: F,
) -> Result<PolicyEval>
where
    P: Policy,
    F: Fn(usize) -> P + Sync + Send,
{
    if episodes == 0 {
        return Err(Error::Param("episodes must be at least 1".into()));
    }
    let outcomes = par::try_map_indexed(exec, episodes, |i| {
        let scene = eval_scene(seed, i, world);
        let mut policy = make(i);
        let r = rollout(&mut policy, &scene, max_steps, world)?;
        Ok::<_, Error>(EpisodeOutcome {
            episode: i,
            success: r.success,
            steps: r.steps,
        })
    })?;
    let rate = outcomes.iter().filter(|o| o.success).count() as f64 / episodes as f64;
    Ok(PolicyEval {
        success_rate: rate,
        episodes: outcomes,
    })
}

pub fn evaluate_policy(
    model: &Model,
    world: &WorldConfig,
    episodes: usize,
    seed: u64,
    max_steps: usize,
    exec: Exec,
) -> Result<PolicyEval> {
    let steps = model.config.integration_steps;
    evaluate_with(world, episodes, seed, max_steps, exec, |i| ModelPolicy {
        model,
        rng: stream_rng(seed ^ 0x9011_c700_0000_0000, i as u64),
        steps,
    })
}

/// Uniform random chunks; a baseline for the evaluation harness.
pub struct RandomPolicy {
    pub rng: ChaCha8Rng,
    pub horizon: usize,
}

impl Policy for RandomPolicy {
    fn act(&mut self, _obs: &Observation, _scene: &Scene) -> Result<ActionChunk> {
        let v = (0..self.horizon * synthworld::ACTION_DIM)
            .map(|_| self.rng.gen_range(-1.0..=1.0))
            .collect();
        ActionChunk::new(self.horizon, synthworld::ACTION_DIM, v)
    }
}

/// Finite-difference check of the full combined objective on a tiny model
/// (hidden 16, one layer per stack) with random weights and data.
pub fn loss_gradcheck(
    seed: u64,
    variant: VariantSpec,
    max_entries: Option<usize>,
) -> Result<OpCheck> {
    variant.validate()?;
    let stack = StackConfig {
        layers: 1,
        heads: 2,
        hidden: 16,
        intermediate: 32,
    };
    let cfg = ExpertConfig {
        image_size: 8,
        patch: 4,
        backbone: stack,
        depth_expert: stack,
        action_expert: stack,
        depth_decoder_channels: 4,
        init_std: 0.3,
        ..ExpertConfig::default()
    };
    let code_space = CodeSpace {
        code_dim: 3,
        grid: 4,
        tau: 0.8,
        frame_size: 8,
    };
    let model = Model::new(cfg.clone(), code_space, variant.branches(), seed)?;
    let mut r = stream_rng(seed, 0x6c);
    let k = 8;
    let codebook = Tensor::randn([k, code_space.code_dim], 1.0, &mut r);
    let s = code_space.frame_size;
    let sample = TrainSample {
        obs: Observation {
            image: (0..cfg.image_size * cfg.image_size * 3)
                .map(|_| r.gen::<f64>())
                .collect(),
            image_size: cfg.image_size,
            instruction: (0..cfg.instruction_len)
                .map(|_| r.gen_range(0..cfg.vocab_size))
                .collect(),
            proprio: (0..cfg.proprio_dim)
                .map(|_| r.gen_range(-1.0..1.0))
                .collect(),
        },
        chunk: ActionChunk::new(
            cfg.horizon,
            cfg.action_dim,
            (0..cfg.horizon * cfg.action_dim)
                .map(|_| r.gen_range(-1.0..1.0))
                .collect(),
        )?,
        depth: DepthMap::new(s, s, (0..s * s).map(|_| r.gen::<f64>()).collect())?,
        tokens: (0..code_space.grid * code_space.grid)
            .map(|_| r.gen_range(0..k))
            .collect(),
    };
    let flow = sample_flow(&sample.chunk, cfg.lambda_min, cfg.lambda_max, &mut r)?;
    let opts = FdOptions {
        max_entries_per_param: max_entries,
        seed,
        ..FdOptions::default()
    };
    // Depth features reach the backbone through a stop-gradient, so the
    // finite-difference objective holds them at their unperturbed value.
    let frozen = if variant.depth_expert_on {
        Some(model.depth_features(&sample.obs)?)
    } else {
        None
    };
    let objective = |tape: &Tape, frozen: Option<&Tensor>| -> Result<BTreeMap<String, Tensor>> {
        let vars = tape.bind(&model.params);
        let l = example_loss_with(
            tape, &vars, &model, &codebook, &sample, &flow, 0.5, &variant, frozen,
        )?;
        tape.gradients(l.total)
    };
    if objective(&Tape::new(), None)? != objective(&Tape::new(), frozen.as_ref())? {
        return Err(Error::OracleInvalid(
            "frozen-feature objective has different gradients".into(),
        ));
    }
    let report = finite_diff_check(&model.params, &opts, |tape, vars| {
        let l = example_loss_with(
            tape,
            vars,
            &model,
            &codebook,
            &sample,
            &flow,
            0.5,
            &variant,
            frozen.as_ref(),
        )?;
        Ok(l.total)
    })?;
    Ok(OpCheck {
        name: format!(
            "cotrain_loss{}",
            if variant.latent_prediction {
                ""
            } else {
                "_pixel"
            }
        ),
        max_rel_err: report.max_rel_err(),
        checked: report.entries.iter().map(|e| e.checked).sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_closed_form() {
        let s = CoTrainSchedule::default();
        assert_eq!(s.lambda_at(0), 0.01);
        assert!((s.lambda_at(693) - 0.005).abs() < 1e-5);
        assert!((s.lambda_at(693) - 0.01 * 0.999f64.powi(693)).abs() < 1e-12);
        let flat = CoTrainSchedule { gamma: 1.0, ..s };
        assert!((0..1000).all(|t| flat.lambda_at(t) == 0.01));
    }

    #[test]
    fn variant_invariant() {
        let bad = VariantSpec {
            depth_expert_on: false,
            ..VariantSpec::full()
        };
        assert!(bad.validate().is_err());
        for v in [
            VariantSpec::full(),
            VariantSpec::without_depth_loss(),
            VariantSpec::without_depth_expert(),
            VariantSpec::pixel_regression(),
            VariantSpec::dreamvla_mask(),
        ] {
            v.validate().unwrap();
        }
        assert_eq!(
            VariantSpec::dreamvla_mask().branches().mask,
            MaskVariant::DreamVla
        );
        assert!(VariantSpec::pixel_regression().branches().pixel_head);
    }

    #[test]
    fn total_loss_arithmetic() {
        let tape = crate::numerics::Tape::new();
        let a = tape.constant(Tensor::scalar(1.0));
        let d = tape.constant(Tensor::scalar(2.0));
        assert!((total_loss(a, Some(d), 0.01).unwrap().item().unwrap() - 1.02).abs() < 1e-15);
        let same = total_loss(a, Some(d), 0.0).unwrap();
        assert_eq!(same.item().unwrap().to_bits(), 1f64.to_bits());
    }

    #[test]
    fn pixel_loss_cases() {
        let z = DepthMap::new(2, 2, vec![0.0; 4]).unwrap();
        let o = DepthMap::new(2, 2, vec![1.0; 4]).unwrap();
        assert_eq!(pixel_depth_loss(&z, &z).unwrap(), 0.0);
        assert_eq!(pixel_depth_loss(&z, &o).unwrap(), 1.0);
        assert!(pixel_depth_loss(&z, &DepthMap::new(1, 4, vec![0.0; 4]).unwrap()).is_err());
    }

    #[test]
    fn combined_loss_gradients_match_finite_differences() {
        for v in [
            VariantSpec::full(),
            VariantSpec::pixel_regression(),
            VariantSpec::dreamvla_mask(),
        ] {
            let c = loss_gradcheck(1, v, Some(4)).unwrap();
            assert!(c.max_rel_err < 1e-4, "{c:?}");
        }
    }

    #[test]
    fn report_round_trips() {
        let r = TrainReport {
            seed: 3,
            config_hash: 0xdead_beef,
            records: vec![StepRecord {
                step: 0,
                total: 1.5,
                action: 1.25,
                depth: Some(25.0),
                lambda: 0.01,
                lr: 0.0,
            }],
            evals: vec![],
            final_metrics: None,
        };
        let text = r.to_jsonl().unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(TrainReport::from_jsonl(&text).unwrap(), r);
    }
}
