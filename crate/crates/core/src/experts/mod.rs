//! Model bodies: patch vision encoder, a two-expert transformer backbone
//! running under the modality mask, the depth expert with its code-space
//! decoder, and the flow-matching action head.
//!
//! Text, image and depth tokens run through the `vlm` weights of each
//! backbone layer; proprio and action tokens through the `act` weights. Both
//! groups share one attention per layer.

mod flow;
mod types;

use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use flow::{cfm_loss, integrate, sample_flow, time_features, FlowSample};
pub use types::{ActionChunk, Observation};

use crate::codec::{CodecConfig, DepthMap};
use crate::error::{Error, Result};
use crate::mask::{build_mask, AttentionMask, MaskVariant, Modality, TokenLayout};
use crate::numerics::{checkpoint, ParamVars, Params, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub intermediate: usize,
}

impl StackConfig {
    fn validate(&self, name: &str) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.hidden == 0 || self.intermediate == 0 {
            return Err(Error::Config(format!("{name}: sizes must be positive")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{name}: hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertConfig {
    pub vocab_size: usize,
    pub instruction_len: usize,
    pub image_size: usize,
    pub patch: usize,
    pub proprio_dim: usize,
    pub horizon: usize,
    pub action_dim: usize,
    pub backbone: StackConfig,
    pub depth_expert: StackConfig,
    /// Shares layer count, heads and hidden width with the backbone.
    pub action_expert: StackConfig,
    pub depth_decoder_channels: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub integration_steps: usize,
    pub init_std: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        let stack = StackConfig {
            layers: 2,
            heads: 4,
            hidden: 32,
            intermediate: 64,
        };
        Self {
            vocab_size: crate::synthworld::VOCAB_SIZE,
            instruction_len: crate::synthworld::INSTRUCTION_LEN,
            image_size: 32,
            patch: 8,
            proprio_dim: crate::synthworld::PROPRIO_DIM,
            horizon: 4,
            action_dim: crate::synthworld::ACTION_DIM,
            backbone: stack,
            depth_expert: stack,
            action_expert: stack,
            depth_decoder_channels: 16,
            lambda_min: 0.001,
            lambda_max: 0.999,
            integration_steps: 10,
            init_std: 0.02,
        }
    }
}

impl ExpertConfig {
    /// Layer shapes of the full-size reference model. Recorded, never trained here.
    pub fn paper_scale() -> Self {
        let stack = StackConfig {
            layers: 18,
            heads: 8,
            hidden: 1024,
            intermediate: 4096,
        };
        Self {
            image_size: 224,
            patch: 14,
            backbone: stack,
            depth_expert: stack,
            action_expert: stack,
            depth_decoder_channels: 256,
            ..Self::default()
        }
    }

    pub fn image_tokens(&self) -> usize {
        let s = self.image_size / self.patch;
        s * s
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate("backbone")?;
        self.depth_expert.validate("depth_expert")?;
        self.action_expert.validate("action_expert")?;
        let (b, a) = (&self.backbone, &self.action_expert);
        if a.layers != b.layers || a.heads != b.heads || a.hidden != b.hidden {
            return Err(Error::Config(
                "action_expert must match backbone layers, heads and hidden".into(),
            ));
        }
        if self.patch == 0 || !self.image_size.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if self.backbone.hidden < 8 {
            return Err(Error::Config("backbone hidden must be at least 8".into()));
        }
        if [
            self.vocab_size,
            self.instruction_len,
            self.proprio_dim,
            self.horizon,
            self.action_dim,
        ]
        .contains(&0)
        {
            return Err(Error::Config(
                "token counts and dims must be positive".into(),
            ));
        }
        if !(0.0 <= self.lambda_min && self.lambda_min < self.lambda_max && self.lambda_max <= 1.0)
        {
            return Err(Error::Config(
                "need 0 <= lambda_min < lambda_max <= 1".into(),
            ));
        }
        if self.integration_steps == 0 || self.depth_decoder_channels == 0 {
            return Err(Error::Config(
                "integration_steps and decoder channels must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Width of the sinusoidal noise-level features.
    pub fn time_dim(&self) -> usize {
        (self.backbone.hidden / 4).max(2) & !1
    }
}

/// Which optional branches a model is built with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Branches {
    pub depth_expert: bool,
    pub pixel_head: bool,
    pub mask: MaskVariant,
}

impl Default for Branches {
    fn default() -> Self {
        Self {
            depth_expert: true,
            pixel_head: false,
            mask: MaskVariant::Hybrid,
        }
    }
}

/// Codec dimensions the depth expert predicts into.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodeSpace {
    pub code_dim: usize,
    pub grid: usize,
    pub tau: f64,
    pub frame_size: usize,
}

impl From<&CodecConfig> for CodeSpace {
    fn from(c: &CodecConfig) -> Self {
        Self {
            code_dim: c.code_dim,
            grid: c.grid,
            tau: c.tau,
            frame_size: c.frame_size,
        }
    }
}

fn linear<'t>(x: Var<'t>, vars: &ParamVars<'t>, name: &str) -> Result<Var<'t>> {
    x.matmul(vars.get(&format!("{name}.w"))?)?
        .add_row(vars.get(&format!("{name}.b"))?)
}

fn norm<'t>(x: Var<'t>, vars: &ParamVars<'t>, name: &str) -> Result<Var<'t>> {
    x.layer_norm(LN_EPS)
        .mul_row(vars.get(&format!("{name}.g"))?)?
        .add_row(vars.get(&format!("{name}.b"))?)
}

fn conv<'t>(x: Var<'t>, vars: &ParamVars<'t>, name: &str) -> Result<Var<'t>> {
    x.conv2d(vars.get(&format!("{name}.w"))?, 1, 1)?
        .add_channel(vars.get(&format!("{name}.b"))?)
}

/// Rows of one expert inside a layer.
struct Segment<'t> {
    x: Var<'t>,
    prefix: String,
}

/// Keys and values of every earlier position, per layer.
type KvCache<'t> = Vec<(Var<'t>, Var<'t>)>;

/// One pre-norm transformer layer over `segments`, in order. `past` keys and
/// values come before the segment rows; `mask` is `rows × (past + rows)`.
/// Returns the full key/value matrices, and the new rows unless `skip_output`.
fn layer<'t>(
    tape: &'t Tape,
    vars: &ParamVars<'t>,
    segments: &[Segment<'t>],
    past: Option<&(Var<'t>, Var<'t>)>,
    heads: usize,
    mask: Rc<[bool]>,
    skip_output: bool,
) -> Result<(Option<Vec<Var<'t>>>, (Var<'t>, Var<'t>))> {
    let mut q = Vec::new();
    let mut k = Vec::new();
    let mut v = Vec::new();
    if let Some((pk, pv)) = past {
        k.push(*pk);
        v.push(*pv);
    }
    for s in segments {
        let h = norm(s.x, vars, &format!("{}.ln1", s.prefix))?;
        q.push(h.matmul(vars.get(&format!("{}.wq", s.prefix))?)?);
        k.push(h.matmul(vars.get(&format!("{}.wk", s.prefix))?)?);
        v.push(h.matmul(vars.get(&format!("{}.wv", s.prefix))?)?);
    }
    let keys = tape.concat_rows(&k)?;
    let values = tape.concat_rows(&v)?;
    if skip_output {
        return Ok((None, (keys, values)));
    }
    let att = tape.attention(tape.concat_rows(&q)?, keys, values, heads, 1, mask)?;
    let mut out = Vec::with_capacity(segments.len());
    let mut row = 0;
    for s in segments {
        let n = s.x.shape()[0];
        let o = att
            .slice_rows(row, n)?
            .matmul(vars.get(&format!("{}.wo", s.prefix))?)?;
        row += n;
        let x = s.x.add(o)?;
        let h = norm(x, vars, &format!("{}.ln2", s.prefix))?;
        let m = linear(
            linear(h, vars, &format!("{}.fc1", s.prefix))?.gelu(),
            vars,
            &format!("{}.fc2", s.prefix),
        )?;
        out.push(x.add(m)?);
    }
    Ok((Some(out), (keys, values)))
}

fn insert_layer(
    p: &mut Params,
    prefix: &str,
    hidden: usize,
    inter: usize,
    std: f64,
    rng: &mut impl Rng,
) -> Result<()> {
    for ln in ["ln1", "ln2"] {
        p.insert(format!("{prefix}.{ln}.g"), Tensor::full([hidden], 1.0))?;
        p.insert(format!("{prefix}.{ln}.b"), Tensor::zeros([hidden]))?;
    }
    for w in ["wq", "wk", "wv", "wo"] {
        p.insert(
            format!("{prefix}.{w}"),
            Tensor::randn([hidden, hidden], std, rng),
        )?;
    }
    insert_linear(p, &format!("{prefix}.fc1"), hidden, inter, std, rng)?;
    insert_linear(p, &format!("{prefix}.fc2"), inter, hidden, std, rng)
}

fn insert_linear(
    p: &mut Params,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    std: f64,
    rng: &mut impl Rng,
) -> Result<()> {
    p.insert(
        format!("{name}.w"),
        Tensor::randn([fan_in, fan_out], std, rng),
    )?;
    p.insert(format!("{name}.b"), Tensor::zeros([fan_out]))
}

fn insert_conv(
    p: &mut Params,
    name: &str,
    c_in: usize,
    c_out: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let std = (2.0 / (9 * c_in) as f64).sqrt();
    p.insert(
        format!("{name}.w"),
        Tensor::randn([c_out, c_in, 3, 3], std, rng),
    )?;
    p.insert(format!("{name}.b"), Tensor::zeros([c_out]))
}

/// Prefix embeddings of one observation (everything except action tokens).
pub struct PrefixTokens<'t> {
    pub text: Var<'t>,
    pub image: Var<'t>,
    pub depth: Option<Var<'t>>,
    pub proprio: Var<'t>,
    /// Depth-expert code-space prediction, `[g² × d]`.
    pub depth_pred: Option<Var<'t>>,
}

/// Per-layer keys and values of a processed observation prefix.
pub struct Prefix<'t> {
    kv: KvCache<'t>,
    pub depth_pred: Option<Var<'t>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelMeta {
    config: ExpertConfig,
    code_space: CodeSpace,
    branches: Branches,
}

/// Parameters plus the structure they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ExpertConfig,
    pub code_space: CodeSpace,
    pub branches: Branches,
    pub params: Params,
    layout: TokenLayout,
}

pub const DEPTH_PREFIX: &str = "depth.";

impl Model {
    /// Each component draws from its own stream of `seed`, so adding or
    /// dropping a branch leaves the others' initial values unchanged.
    pub fn new(
        config: ExpertConfig,
        code_space: CodeSpace,
        branches: Branches,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let params = Self::init_params(&config, &code_space, &branches, seed)?;
        Self::assemble(config, code_space, branches, params)
    }

    fn assemble(
        config: ExpertConfig,
        code_space: CodeSpace,
        branches: Branches,
        params: Params,
    ) -> Result<Self> {
        let (t, i, h) = (
            config.instruction_len,
            config.image_tokens(),
            config.horizon,
        );
        let layout = if branches.depth_expert {
            TokenLayout::new(t, i, i, 1, h)?
        } else {
            TokenLayout::without_depth(t, i, 1, h)?
        };
        Ok(Self {
            config,
            code_space,
            branches,
            params,
            layout,
        })
    }

    fn init_params(c: &ExpertConfig, cs: &CodeSpace, br: &Branches, seed: u64) -> Result<Params> {
        let stream = |i: u64| crate::synthworld::stream_rng(seed, i);
        let d = c.backbone.hidden;
        let std = c.init_std;
        let mut p = Params::new();

        let mut r = stream(0);
        let patch_in = c.patch * c.patch * 3;
        insert_linear(
            &mut p,
            "vis.patch",
            patch_in,
            d,
            (1.0 / patch_in as f64).sqrt(),
            &mut r,
        )?;

        let mut r = stream(1);
        p.insert("emb.text", Tensor::randn([c.vocab_size, d], std, &mut r))?;
        p.insert(
            "emb.text_pos",
            Tensor::randn([c.instruction_len, d], std, &mut r),
        )?;
        p.insert(
            "emb.image_pos",
            Tensor::randn([c.image_tokens(), d], std, &mut r),
        )?;
        p.insert(
            "emb.modality",
            Tensor::randn([Modality::ALL.len(), d], std, &mut r),
        )?;

        let mut r = stream(2);
        for l in 0..c.backbone.layers {
            insert_layer(
                &mut p,
                &format!("bb.{l}.vlm"),
                d,
                c.backbone.intermediate,
                std,
                &mut r,
            )?;
        }
        let mut r = stream(3);
        for l in 0..c.backbone.layers {
            insert_layer(
                &mut p,
                &format!("bb.{l}.act"),
                d,
                c.action_expert.intermediate,
                std,
                &mut r,
            )?;
        }

        let mut r = stream(4);
        let td = c.time_dim();
        insert_linear(
            &mut p,
            "act.proprio",
            c.proprio_dim,
            d,
            (1.0 / c.proprio_dim as f64).sqrt(),
            &mut r,
        )?;
        insert_linear(
            &mut p,
            "act.in",
            c.action_dim,
            d,
            (1.0 / c.action_dim as f64).sqrt(),
            &mut r,
        )?;
        insert_linear(&mut p, "act.time", td, d, (1.0 / td as f64).sqrt(), &mut r)?;
        p.insert("act.pos", Tensor::randn([c.horizon, d], std, &mut r))?;
        p.insert("act.ln_f.g", Tensor::full([d], 1.0))?;
        p.insert("act.ln_f.b", Tensor::zeros([d]))?;
        insert_linear(&mut p, "act.head", d, c.action_dim, std, &mut r)?;

        if br.depth_expert {
            let de = &c.depth_expert;
            let mut r = stream(5);
            insert_linear(
                &mut p,
                "depth.in1",
                d,
                de.hidden,
                (1.0 / d as f64).sqrt(),
                &mut r,
            )?;
            insert_linear(
                &mut p,
                "depth.in2",
                de.hidden,
                de.hidden,
                (1.0 / de.hidden as f64).sqrt(),
                &mut r,
            )?;
            p.insert(
                "depth.pos",
                Tensor::randn([c.image_tokens(), de.hidden], std, &mut r),
            )?;
            for l in 0..de.layers {
                insert_layer(
                    &mut p,
                    &format!("depth.{l}"),
                    de.hidden,
                    de.intermediate,
                    std,
                    &mut r,
                )?;
            }
            p.insert("depth.ln_f.g", Tensor::full([de.hidden], 1.0))?;
            p.insert("depth.ln_f.b", Tensor::zeros([de.hidden]))?;
            let side = (c.image_tokens() as f64).sqrt().round() as usize;
            let f = if side > 0 && cs.grid.is_multiple_of(side) {
                cs.grid / side
            } else {
                1
            };
            insert_conv(
                &mut p,
                "depth.dec0",
                de.hidden,
                c.depth_decoder_channels * f * f,
                &mut r,
            )?;
            insert_conv(
                &mut p,
                "depth.dec1",
                c.depth_decoder_channels,
                cs.code_dim,
                &mut r,
            )?;

            let mut r = stream(6);
            insert_linear(
                &mut p,
                "bb.depth_in",
                de.hidden,
                d,
                (1.0 / de.hidden as f64).sqrt(),
                &mut r,
            )?;

            if br.pixel_head {
                let mut r = stream(7);
                insert_conv(&mut p, "depth.pixel", cs.code_dim, 1, &mut r)?;
            }
        } else if br.pixel_head {
            return Err(Error::Config("pixel head requires the depth expert".into()));
        }
        Ok(p)
    }

    pub fn layout(&self) -> &TokenLayout {
        &self.layout
    }

    pub fn mask(&self) -> AttentionMask {
        build_mask(&self.layout, self.branches.mask)
    }

    fn prefix_len(&self) -> usize {
        self.layout.total() - self.layout.action
    }

    /// Non-overlapping patch embedding, `[T_img × hidden]`.
    pub fn vision_encode<'t>(
        &self,
        tape: &'t Tape,
        vars: &ParamVars<'t>,
        image: &[f64],
    ) -> Result<Var<'t>> {
        let c = &self.config;
        let (s, p) = (c.image_size, c.patch);
        if image.len() != s * s * 3 {
            return Err(Error::shape("vision_encode", &[s, s, 3], &[image.len()]));
        }
        let n = s / p;
        let mut patches = Vec::with_capacity(s * s * 3);
        for py in 0..n {
            for px in 0..n {
                for y in 0..p {
                    let start = ((py * p + y) * s + px * p) * 3;
                    patches.extend_from_slice(&image[start..start + p * 3]);
                }
            }
        }
        let x = tape.constant(Tensor::new([n * n, p * p * 3], patches)?);
        linear(x, vars, "vis.patch")
    }

    /// Depth expert on pre-fusion visual tokens. Returns the transformer
    /// features `[T_img × d_expert]` and code-space vectors `[g² × d]`.
    pub fn depth_expert_forward<'t>(
        &self,
        tape: &'t Tape,
        vars: &ParamVars<'t>,
        visual: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        if !self.branches.depth_expert {
            return Err(Error::Contract("model has no depth expert".into()));
        }
        let de = &self.config.depth_expert;
        let cs = &self.code_space;
        let t = visual.shape()[0];
        let side = (t as f64).sqrt().round() as usize;
        if side * side != t {
            return Err(Error::Config(format!(
                "{t} visual tokens do not form a square grid"
            )));
        }
        if !cs.grid.is_multiple_of(side) {
            return Err(Error::Config(format!(
                "latent grid {} is not a multiple of {side}",
                cs.grid
            )));
        }
        let mut h = linear(linear(visual, vars, "depth.in1")?.gelu(), vars, "depth.in2")?
            .add(vars.get("depth.pos")?)?;
        let full: Rc<[bool]> = vec![true; t * t].into();
        for l in 0..de.layers {
            let seg = [Segment {
                x: h,
                prefix: format!("depth.{l}"),
            }];
            let (out, _) = layer(tape, vars, &seg, None, de.heads, full.clone(), false)?;
            h = out.expect("outputs requested")[0];
        }
        let feat = norm(h, vars, "depth.ln_f")?;
        let mut x = feat.transpose()?.reshape(&[de.hidden, side, side])?;
        x = conv(x, vars, "depth.dec0")?.silu();
        if cs.grid > side {
            x = depth_to_space(x, cs.grid / side)?;
        }
        x = conv(x, vars, "depth.dec1")?;
        let pred = x.reshape(&[cs.code_dim, cs.grid * cs.grid])?.transpose()?;
        Ok((feat, pred))
    }

    /// Pixel-regression head over the code-space prediction, `[1 × S × S]`.
    pub fn pixel_depth<'t>(&self, vars: &ParamVars<'t>, pred: Var<'t>) -> Result<Var<'t>> {
        let cs = &self.code_space;
        let mut x = pred
            .transpose()?
            .reshape(&[cs.code_dim, cs.grid, cs.grid])?;
        if cs.frame_size > cs.grid {
            x = x.upsample(cs.frame_size / cs.grid)?;
        }
        Ok(conv(x, vars, "depth.pixel")?.sigmoid())
    }

    fn modality<'t>(&self, vars: &ParamVars<'t>, m: Modality) -> Result<Var<'t>> {
        let idx = Modality::ALL.iter().position(|&x| x == m).expect("listed");
        vars.get("emb.modality")?.slice_rows(idx, 1)
    }

    pub fn embed_prefix<'t>(
        &self,
        tape: &'t Tape,
        vars: &ParamVars<'t>,
        obs: &Observation,
    ) -> Result<PrefixTokens<'t>> {
        self.embed_prefix_with(tape, vars, obs, None)
    }

    /// Depth features as the backbone sees them: the expert's output with
    /// gradients stopped.
    pub fn depth_features(&self, obs: &Observation) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = tape.bind_frozen(&self.params);
        let visual = self.vision_encode(&tape, &vars, &obs.image)?;
        Ok(self.depth_expert_forward(&tape, &vars, visual)?.0.value())
    }

    /// As [`Model::embed_prefix`], with the detached depth features replaced
    /// by `frozen` when given. The depth prediction is still computed from
    /// the live parameters.
    pub fn embed_prefix_with<'t>(
        &self,
        tape: &'t Tape,
        vars: &ParamVars<'t>,
        obs: &Observation,
        frozen: Option<&Tensor>,
    ) -> Result<PrefixTokens<'t>> {
        let c = &self.config;
        obs.validate(c.vocab_size, c.proprio_dim)?;
        if obs.instruction.len() != c.instruction_len {
            return Err(Error::shape(
                "instruction",
                &[c.instruction_len],
                &[obs.instruction.len()],
            ));
        }
        let visual = self.vision_encode(tape, vars, &obs.image)?;
        let text = vars
            .get("emb.text")?
            .gather_rows(&obs.instruction)?
            .add(vars.get("emb.text_pos")?)?
            .add_row(self.modality(vars, Modality::Text)?)?;
        let image = visual
            .add(vars.get("emb.image_pos")?)?
            .add_row(self.modality(vars, Modality::Image)?)?;
        let (depth, depth_pred) = if self.branches.depth_expert {
            let (feat, pred) = self.depth_expert_forward(tape, vars, visual)?;
            // The backbone reads depth features but does not train the expert.
            let feat = match frozen {
                Some(f) if f.shape() == feat.shape().as_slice() => tape.constant(f.clone()),
                Some(f) => {
                    return Err(Error::shape(
                        "frozen depth features",
                        &feat.shape(),
                        f.shape(),
                    ))
                }
                None => feat.detach(),
            };
            let tok = linear(feat, vars, "bb.depth_in")?
                .add_row(self.modality(vars, Modality::Depth)?)?;
            (Some(tok), Some(pred))
        } else {
            (None, None)
        };
        let proprio = linear(
            tape.constant(Tensor::new([1, c.proprio_dim], obs.proprio.clone())?),
            vars,
            "act.proprio",
        )?
        .add_row(self.modality(vars, Modality::Proprio)?)?;
        Ok(PrefixTokens {
            text,
            image,
            depth,
            proprio,
            depth_pred,
        })
    }

    pub fn embed_actions<'t>(
        &self,
        tape: &'t Tape,
        vars: &ParamVars<'t>,
        noisy: &Tensor,
        lambda: f64,
    ) -> Result<Var<'t>> {
        let c = &self.config;
        if noisy.shape() != [c.horizon, c.action_dim] {
            return Err(Error::shape(
                "noisy actions",
                &[c.horizon, c.action_dim],
                noisy.shape(),
            ));
        }
        let t = linear(
            tape.constant(time_features(lambda, c.time_dim())),
            vars,
            "act.time",
        )?;
        linear(tape.constant(noisy.clone()), vars, "act.in")?
            .add(vars.get("act.pos")?)?
            .add_row(t)?
            .add_row(self.modality(vars, Modality::Action)?)
    }

    fn vlm_rows<'t>(&self, tape: &'t Tape, p: &PrefixTokens<'t>) -> Result<Var<'t>> {
        let mut rows = vec![p.text, p.image];
        rows.extend(p.depth);
        tape.concat_rows(&rows)
    }

    /// Runs the backbone over the prefix rows only. Prefix rows never attend
    /// action columns, so their keys and values do not depend on the actions.
    pub fn run_prefix<'t>(
        &self,
        tape: &'t Tape,
        vars: &ParamVars<'t>,
        tokens: &PrefixTokens<'t>,
    ) -> Result<Prefix<'t>> {
        let lp = self.prefix_len();
        let mask = self.mask().submatrix(0..lp, 0..lp);
        let mut segs = vec![
            Segment {
                x: self.vlm_rows(tape, tokens)?,
                prefix: String::new(),
            },
            Segment {
                x: tokens.proprio,
                prefix: String::new(),
            },
        ];
        let layers = self.config.backbone.layers;
        let mut kv = Vec::with_capacity(layers);
        for l in 0..layers {
            segs[0].prefix = format!("bb.{l}.vlm");
            segs[1].prefix = format!("bb.{l}.act");
            let (out, cache) = layer(
                tape,
                vars,
                &segs,
                None,
                self.config.backbone.heads,
                mask.clone(),
                l + 1 == layers,
            )?;
            kv.push(cache);
            if let Some(out) = out {
                for (s, x) in segs.iter_mut().zip(out) {
                    s.x = x;
                }
            }
        }
        Ok(Prefix {
            kv,
            depth_pred: tokens.depth_pred,
        })
    }

    /// Predicted flow field `[H × A]` for embedded action tokens.
    pub fn run_actions<'t>(
        &self,
        tape: &'t Tape,
        vars: &ParamVars<'t>,
        prefix: &Prefix<'t>,
        actions: Var<'t>,
    ) -> Result<Var<'t>> {
        let lp = self.prefix_len();
        let mask = self
            .mask()
            .submatrix(lp..self.layout.total(), 0..self.layout.total());
        let mut x = actions;
        for (l, past) in prefix.kv.iter().enumerate() {
            let seg = [Segment {
                x,
                prefix: format!("bb.{l}.act"),
            }];
            let (out, _) = layer(
                tape,
                vars,
                &seg,
                Some(past),
                self.config.backbone.heads,
                mask.clone(),
                false,
            )?;
            x = out.expect("outputs requested")[0];
        }
        linear(norm(x, vars, "act.ln_f")?, vars, "act.head")
    }

    /// Field at `(noisy, λ)` for an observation, on the given tape.
    pub fn action_expert_forward<'t>(
        &self,
        tape: &'t Tape,
        vars: &ParamVars<'t>,
        prefix: &Prefix<'t>,
        noisy: &Tensor,
        lambda: f64,
    ) -> Result<Var<'t>> {
        let a = self.embed_actions(tape, vars, noisy, lambda)?;
        self.run_actions(tape, vars, prefix, a)
    }

    /// Whole-sequence backbone pass, `[L × hidden]` after the last layer.
    /// Equivalent to [`Model::run_prefix`] followed by [`Model::run_actions`]
    /// on the action rows.
    pub fn backbone_forward<'t>(
        &self,
        tape: &'t Tape,
        vars: &ParamVars<'t>,
        tokens: &PrefixTokens<'t>,
        actions: Var<'t>,
        mask: &AttentionMask,
    ) -> Result<Var<'t>> {
        if mask.len() != self.layout.total() {
            return Err(Error::shape(
                "backbone mask",
                &[self.layout.total()],
                &[mask.len()],
            ));
        }
        let mut segs = vec![
            Segment {
                x: self.vlm_rows(tape, tokens)?,
                prefix: String::new(),
            },
            Segment {
                x: tape.concat_rows(&[tokens.proprio, actions])?,
                prefix: String::new(),
            },
        ];
        for l in 0..self.config.backbone.layers {
            segs[0].prefix = format!("bb.{l}.vlm");
            segs[1].prefix = format!("bb.{l}.act");
            let (out, _) = layer(
                tape,
                vars,
                &segs,
                None,
                self.config.backbone.heads,
                mask.shared(),
                false,
            )?;
            for (s, x) in segs.iter_mut().zip(out.expect("outputs requested")) {
                s.x = x;
            }
        }
        tape.concat_rows(&[segs[0].x, segs[1].x])
    }

    /// Sampled action chunk for `obs`: Euler integration of the learned field
    /// from noise at `λ = 0` to `λ = 1`.
    pub fn integrate_actions(
        &self,
        obs: &Observation,
        steps: usize,
        rng: &mut impl Rng,
    ) -> Result<ActionChunk> {
        let c = &self.config;
        let tape = Tape::new();
        let vars = tape.bind_frozen(&self.params);
        let tokens = self.embed_prefix(&tape, &vars, obs)?;
        let prefix = self.run_prefix(&tape, &vars, &tokens)?;
        let noise = Tensor::randn([c.horizon, c.action_dim], 1.0, rng);
        let out = integrate(noise, steps, |a, lambda| {
            Ok(self
                .action_expert_forward(&tape, &vars, &prefix, a, lambda)?
                .value())
        })?;
        ActionChunk::new(c.horizon, c.action_dim, out.into_data())
    }

    /// Decoded depth prediction is not part of the model; this returns the
    /// code-space prediction for one observation, `[g² × d]`.
    pub fn predict_depth_codes(&self, obs: &Observation) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = tape.bind_frozen(&self.params);
        let visual = self.vision_encode(&tape, &vars, &obs.image)?;
        Ok(self.depth_expert_forward(&tape, &vars, visual)?.1.value())
    }

    pub fn predict_pixels(&self, obs: &Observation) -> Result<DepthMap> {
        let tape = Tape::new();
        let vars = tape.bind_frozen(&self.params);
        let visual = self.vision_encode(&tape, &vars, &obs.image)?;
        let pred = self.depth_expert_forward(&tape, &vars, visual)?.1;
        let s = self.code_space.frame_size;
        DepthMap::new(s, s, self.pixel_depth(&vars, pred)?.value().into_data())
    }

    fn sidecar(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    /// Weights as a QDVW container at `path`, structure as JSON beside it.
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.params)?;
        let meta = ModelMeta {
            config: self.config.clone(),
            code_space: self.code_space,
            branches: self.branches,
        };
        let side = Self::sidecar(path);
        std::fs::write(&side, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = Self::sidecar(path);
        let meta: ModelMeta =
            serde_json::from_slice(&std::fs::read(&side).map_err(|e| Error::io(&side, e))?)?;
        meta.config.validate()?;
        let params = checkpoint::load(path)?;
        let expected = Self::init_params(&meta.config, &meta.code_space, &meta.branches, 0)?;
        let names: Vec<&str> = expected.names().collect();
        if names != params.names().collect::<Vec<_>>() {
            return Err(Error::Format {
                kind: "checkpoint",
                msg: "parameter names do not match the recorded model structure".into(),
            });
        }
        for (name, t) in expected.iter() {
            if params.require(name)?.shape() != t.shape() {
                return Err(Error::shape(
                    "checkpoint",
                    t.shape(),
                    params.require(name)?.shape(),
                ));
            }
        }
        Self::assemble(meta.config, meta.code_space, meta.branches, params)
    }
}

/// Rearranges `[c·f² × h × w]` into `[c × h·f × w·f]`: channel
/// `ch·f² + dy·f + dx` at `(y, x)` moves to `(y·f + dy, x·f + dx)`.
pub fn depth_to_space<'t>(x: Var<'t>, f: usize) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape.len() != 3 || f == 0 || !shape[0].is_multiple_of(f * f) {
        return Err(Error::shape("depth_to_space", &shape, &[f, f]));
    }
    let (h, w) = (shape[1], shape[2]);
    let c = shape[0] / (f * f);
    let mut idx = Vec::with_capacity(shape[0] * h * w);
    for ch in 0..c {
        for oy in 0..h * f {
            for ox in 0..w * f {
                let src = ch * f * f + (oy % f) * f + ox % f;
                idx.push((src * h + oy / f) * w + ox / f);
            }
        }
    }
    x.reshape(&[idx.len(), 1])?
        .gather_rows(&idx)?
        .reshape(&[c, h * f, w * f])
}

/// `l[i][k] = −‖x_i − c_k‖² / τ`; the codebook receives no gradient.
pub fn depth_logits<'t>(pred: Var<'t>, codebook: Var<'t>, tau: f64) -> Result<Var<'t>> {
    pred.neg_sq_dist(codebook, tau)
}

/// Mean cross-entropy of the distance logits against code indices.
pub fn depth_loss<'t>(logits: Var<'t>, targets: &[usize]) -> Result<Var<'t>> {
    logits.cross_entropy(targets)
}
