//! Vector-quantized depth codec: a strided conv encoder, a nearest-code
//! quantizer with a straight-through backward path, and an upsampling conv
//! decoder, trained with reconstruction, codebook and commitment terms.

mod depth_map;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use depth_map::DepthMap;

use crate::error::{Error, Result};
use crate::numerics::{
    adamw_step, batch_gradients, checkpoint, AdamWConfig, ExampleOutput, OptimizerState, ParamVars,
    Params, Tape, Tensor, Var,
};
use crate::par::Exec;

pub const CODEBOOK: &str = "codec.codebook";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub codebook_size: usize,
    pub code_dim: usize,
    /// Latent grid side `g`; the latent has `g²` positions.
    pub grid: usize,
    pub beta: f64,
    /// Temperature of the distance logits used for depth supervision.
    pub tau: f64,
    /// Side of the square depth frames.
    pub frame_size: usize,
    pub channels: usize,
    pub decoder_kernel: usize,
    pub codebook_init_std: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            codebook_size: 64,
            code_dim: 16,
            grid: 8,
            beta: 0.25,
            tau: 1.0,
            frame_size: 32,
            channels: 8,
            decoder_kernel: 3,
            codebook_init_std: 0.1,
        }
    }
}

impl CodecConfig {
    /// Reference size: 256 codes of dimension 160 on a 16×16 grid.
    pub fn paper_scale() -> Self {
        Self {
            codebook_size: 256,
            code_dim: 160,
            grid: 16,
            frame_size: 64,
            channels: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("codec: {m}")));
        if self.codebook_size < 2 {
            return bad(format!("codebook_size {} < 2", self.codebook_size));
        }
        if self.code_dim == 0 || self.channels == 0 {
            return bad("code_dim and channels must be positive".into());
        }
        if self.grid < 2 {
            return bad(format!("grid {} < 2", self.grid));
        }
        if !(self.beta > 0.0) || !(self.tau > 0.0) {
            return bad("beta and tau must be positive".into());
        }
        if self.decoder_kernel.is_multiple_of(2) {
            return bad("decoder_kernel must be odd".into());
        }
        self.downsamples().map(|_| ())
    }

    /// Number of stride-2 encoder layers mapping the frame to the grid.
    pub fn downsamples(&self) -> Result<usize> {
        let ratio = self.frame_size / self.grid.max(1);
        if self.grid == 0 || ratio * self.grid != self.frame_size || !ratio.is_power_of_two() {
            return Err(Error::Config(format!(
                "codec: frame_size {} is not grid {} times a power of two",
                self.frame_size, self.grid
            )));
        }
        Ok(ratio.trailing_zeros() as usize)
    }

    pub fn positions(&self) -> usize {
        self.grid * self.grid
    }

    /// Fresh parameters: He-normal conv kernels, zero biases, and a
    /// zero-mean normal codebook.
    pub fn init_params(&self, rng: &mut impl Rng) -> Result<Params> {
        self.validate()?;
        let mut p = Params::new();
        for (name, c_out, c_in, k) in self.layers()? {
            let std = (2.0 / (c_in * k * k) as f64).sqrt();
            p.insert(
                format!("{name}.w"),
                Tensor::randn([c_out, c_in, k, k], std, rng),
            )?;
            p.insert(format!("{name}.b"), Tensor::zeros([c_out]))?;
        }
        p.insert(
            CODEBOOK,
            Tensor::randn(
                [self.codebook_size, self.code_dim],
                self.codebook_init_std,
                rng,
            ),
        )?;
        Ok(p)
    }

    /// `(name, c_out, c_in, kernel)` for every conv layer, encoder first.
    fn layers(&self) -> Result<Vec<(String, usize, usize, usize)>> {
        let n = self.downsamples()?;
        let (c, d, dk) = (self.channels, self.code_dim, self.decoder_kernel);
        let mut out = Vec::new();
        let mut c_in = 1;
        for i in 0..n {
            out.push((format!("codec.enc{i}"), c, c_in, 4));
            c_in = c;
        }
        out.push((format!("codec.enc{n}"), d, c_in, 3));
        out.push(("codec.dec0".to_string(), c, d, dk));
        for i in 0..n {
            out.push((format!("codec.dec{}", i + 1), c, c, dk));
        }
        out.push((format!("codec.dec{}", n + 1), 1, c, dk));
        Ok(out)
    }
}

/// Continuous or quantized latent: `g²` positions of dimension `d`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub side: usize,
    /// `[g² × d]`.
    pub vectors: Tensor,
}

/// Code index per latent position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    pub side: usize,
    pub indices: Vec<usize>,
}

impl TokenGrid {
    pub fn new(side: usize, indices: Vec<usize>) -> Result<Self> {
        if indices.len() != side * side {
            return Err(Error::shape("token grid", &[side, side], &[indices.len()]));
        }
        Ok(Self { side, indices })
    }

    pub fn check_range(&self, k: usize) -> Result<()> {
        match self.indices.iter().find(|&&i| i >= k) {
            Some(&index) => Err(Error::Index { index, bound: k }),
            None => Ok(()),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        crate::io::encode_tokens(self.side, &self.indices)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (side, indices) = crate::io::decode_tokens(bytes)?;
        Self::new(side, indices)
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest code for each row of `z` (`[n × d]`), lowest index
/// on ties.
pub fn nearest_codes(z: &Tensor, codebook: &Tensor) -> Result<Vec<usize>> {
    let (n, d) = z.as_matrix();
    let (k, dc) = codebook.as_matrix();
    if codebook.rank() != 2 || k == 0 {
        return Err(Error::Config("empty codebook".into()));
    }
    if d != dc {
        return Err(Error::shape("quantize", z.shape(), codebook.shape()));
    }
    Ok((0..n)
        .map(|i| {
            let row = z.row(i);
            let mut best = (0, f64::INFINITY);
            for j in 0..k {
                let dist = squared_distance(row, codebook.row(j));
                if dist < best.1 {
                    best = (j, dist);
                }
            }
            best.0
        })
        .collect())
}

fn lookup(codebook: &Tensor, tokens: &[usize]) -> Result<Tensor> {
    let (k, d) = codebook.as_matrix();
    let mut data = Vec::with_capacity(tokens.len() * d);
    for &t in tokens {
        if t >= k {
            return Err(Error::Index { index: t, bound: k });
        }
        data.extend_from_slice(codebook.row(t));
    }
    Tensor::new([tokens.len(), d], data)
}

/// Snaps every latent position to its nearest code.
pub fn quantize(z_e: &LatentGrid, codebook: &Tensor) -> Result<(LatentGrid, TokenGrid)> {
    let tokens = nearest_codes(&z_e.vectors, codebook)?;
    let vectors = lookup(codebook, &tokens)?;
    Ok((
        LatentGrid {
            side: z_e.side,
            vectors,
        },
        TokenGrid::new(z_e.side, tokens)?,
    ))
}

fn conv<'t>(
    x: Var<'t>,
    vars: &ParamVars<'t>,
    name: &str,
    stride: usize,
    pad: usize,
) -> Result<Var<'t>> {
    x.conv2d(vars.get(&format!("{name}.w"))?, stride, pad)?
        .add_channel(vars.get(&format!("{name}.b"))?)
}

/// Encoder on the tape: `[1 × S × S]` frame to `[g² × d]` latent.
pub fn encode_var<'t>(
    tape: &'t Tape,
    vars: &ParamVars<'t>,
    x: &DepthMap,
    cfg: &CodecConfig,
) -> Result<Var<'t>> {
    if x.height() != cfg.frame_size || x.width() != cfg.frame_size {
        return Err(Error::shape(
            "encode",
            &[cfg.frame_size, cfg.frame_size],
            &[x.height(), x.width()],
        ));
    }
    let n = cfg.downsamples()?;
    let mut h = tape.constant(x.to_tensor());
    for i in 0..n {
        h = conv(h, vars, &format!("codec.enc{i}"), 2, 1)?.silu();
    }
    let z = conv(h, vars, &format!("codec.enc{n}"), 1, 1)?;
    z.reshape(&[cfg.code_dim, cfg.positions()])?.transpose()
}

/// Decoder on the tape: `[g² × d]` latent to a `[1 × S × S]` map in `(0, 1)`.
pub fn decode_var<'t>(vars: &ParamVars<'t>, z_q: Var<'t>, cfg: &CodecConfig) -> Result<Var<'t>> {
    if z_q.shape() != [cfg.positions(), cfg.code_dim] {
        return Err(Error::shape(
            "decode",
            &[cfg.positions(), cfg.code_dim],
            &z_q.shape(),
        ));
    }
    let n = cfg.downsamples()?;
    let pad = cfg.decoder_kernel / 2;
    let mut h = z_q
        .transpose()?
        .reshape(&[cfg.code_dim, cfg.grid, cfg.grid])?;
    h = conv(h, vars, "codec.dec0", 1, pad)?.silu();
    for i in 0..n {
        h = conv(h.upsample(2)?, vars, &format!("codec.dec{}", i + 1), 1, pad)?.silu();
    }
    Ok(conv(h, vars, &format!("codec.dec{}", n + 1), 1, pad)?.sigmoid())
}

/// The three objective terms for one frame, as tape values.
pub struct VqTerms<'t> {
    pub total: Var<'t>,
    pub reconstruction: Var<'t>,
    /// `‖sg[z_e] − c‖²`, mean over latent entries.
    pub codebook: Var<'t>,
    /// `β·‖z_e − sg[c]‖²`, mean over latent entries.
    pub commitment: Var<'t>,
    /// The commitment term before the `β` weight.
    pub commitment_raw: Var<'t>,
    pub tokens: TokenGrid,
}

pub fn vq_terms<'t>(
    tape: &'t Tape,
    vars: &ParamVars<'t>,
    x: &DepthMap,
    cfg: &CodecConfig,
) -> Result<VqTerms<'t>> {
    let z_e = encode_var(tape, vars, x, cfg)?;
    let codebook = vars.get(CODEBOOK)?;
    let tokens = nearest_codes(&z_e.value_ref(), &codebook.value_ref())?;
    let chosen = codebook.gather_rows(&tokens)?;
    let z_q = z_e.straight_through(chosen.value())?;
    let recon = decode_var(vars, z_q, cfg)?;
    let n = recon.value_ref().numel() as f64;
    let reconstruction = recon
        .sub(tape.constant(x.to_tensor()))?
        .sum_squares()
        .scale(1.0 / n);
    let m = (cfg.positions() * cfg.code_dim) as f64;
    let codebook_term = z_e.detach().sub(chosen)?.sum_squares().scale(1.0 / m);
    let commitment_raw = z_e.sub(chosen.detach())?.sum_squares().scale(1.0 / m);
    let commitment = commitment_raw.scale(cfg.beta);
    let total = reconstruction.add(codebook_term)?.add(commitment)?;
    Ok(VqTerms {
        total,
        reconstruction,
        codebook: codebook_term,
        commitment,
        commitment_raw,
        tokens: TokenGrid::new(cfg.grid, tokens)?,
    })
}

/// Loss values of [`vq_terms`] for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VqLoss {
    pub total: f64,
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
}

pub fn vq_loss(x: &DepthMap, params: &Params, cfg: &CodecConfig) -> Result<VqLoss> {
    let tape = Tape::new();
    let vars = tape.bind_frozen(params);
    let t = vq_terms(&tape, &vars, x, cfg)?;
    Ok(VqLoss {
        total: t.total.item()?,
        reconstruction: t.reconstruction.item()?,
        codebook: t.codebook.item()?,
        commitment: t.commitment.item()?,
    })
}

/// `exp(−Σ p ln p)` of the empirical code distribution.
pub fn perplexity(tokens: impl IntoIterator<Item = usize>, k: usize) -> f64 {
    let mut counts = vec![0usize; k];
    let mut total = 0usize;
    for t in tokens {
        counts[t] += 1;
        total += 1;
    }
    if total == 0 {
        return 0.0;
    }
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    h.exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    /// Defaults to `1e-5 · batch_size`.
    pub lr: Option<f64>,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 24,
            lr: None,
            seed: 0,
        }
    }
}

impl PretrainOptions {
    pub fn learning_rate(&self) -> f64 {
        self.lr.unwrap_or(1e-5 * self.batch_size as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodecMetrics {
    pub step: usize,
    pub total: f64,
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
    /// Of the tokens assigned in this step's batch.
    pub perplexity: f64,
}

/// A trained (or freshly initialized) codec.
#[derive(Debug, Clone, PartialEq)]
pub struct Codec {
    pub config: CodecConfig,
    pub params: Params,
}

impl Codec {
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        let params = config.init_params(&mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(Self { config, params })
    }

    pub fn codebook(&self) -> Result<&Tensor> {
        self.params.require(CODEBOOK)
    }

    pub fn encode(&self, x: &DepthMap) -> Result<LatentGrid> {
        let tape = Tape::new();
        let vars = tape.bind_frozen(&self.params);
        Ok(LatentGrid {
            side: self.config.grid,
            vectors: encode_var(&tape, &vars, x, &self.config)?.value(),
        })
    }

    pub fn decode(&self, z_q: &LatentGrid) -> Result<DepthMap> {
        let tape = Tape::new();
        let vars = tape.bind_frozen(&self.params);
        let out = decode_var(&vars, tape.constant(z_q.vectors.clone()), &self.config)?.value();
        let s = self.config.frame_size;
        DepthMap::new(s, s, out.into_data())
    }

    pub fn tokenize(&self, x: &DepthMap) -> Result<TokenGrid> {
        Ok(quantize(&self.encode(x)?, self.codebook()?)?.1)
    }

    pub fn detokenize(&self, tokens: &TokenGrid) -> Result<DepthMap> {
        if tokens.side != self.config.grid {
            return Err(Error::shape(
                "detokenize",
                &[self.config.grid],
                &[tokens.side],
            ));
        }
        let vectors = lookup(self.codebook()?, &tokens.indices)?;
        self.decode(&LatentGrid {
            side: tokens.side,
            vectors,
        })
    }

    /// `decode(quantize(encode(x)))`.
    pub fn reconstruct(&self, x: &DepthMap) -> Result<DepthMap> {
        let (z_q, _) = quantize(&self.encode(x)?, self.codebook()?)?;
        self.decode(&z_q)
    }

    fn sidecar(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    /// Weights go to `path` as a QDVW container, the config next to it as JSON.
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.params)?;
        let json = serde_json::to_string_pretty(&self.config)?;
        let side = Self::sidecar(path);
        std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = Self::sidecar(path);
        let text = std::fs::read(&side).map_err(|e| Error::io(&side, e))?;
        let config: CodecConfig = serde_json::from_slice(&text)?;
        config.validate()?;
        let params = checkpoint::load(path)?;
        let expected = config.init_params(&mut ChaCha8Rng::seed_from_u64(0))?;
        for (name, t) in expected.iter() {
            if params.require(name)?.shape() != t.shape() {
                return Err(Error::shape(
                    "codec checkpoint",
                    t.shape(),
                    params.require(name)?.shape(),
                ));
            }
        }
        Ok(Self { config, params })
    }
}

/// Minibatch AdamW on the VQ objective at a constant learning rate.
/// `steps = 0` returns the initial codec and no metrics.
pub fn pretrain_codec(
    frames: &[DepthMap],
    config: &CodecConfig,
    opts: &PretrainOptions,
    exec: Exec,
) -> Result<(Codec, Vec<CodecMetrics>)> {
    if frames.is_empty() {
        return Err(Error::Param(
            "codec pretraining needs at least one frame".into(),
        ));
    }
    if opts.batch_size == 0 {
        return Err(Error::Param("batch_size must be positive".into()));
    }
    let lr = opts.learning_rate();
    if !(lr > 0.0) {
        return Err(Error::Param(format!("learning rate {lr} must be positive")));
    }
    let mut codec = Codec::new(config.clone(), opts.seed)?;
    let mut state = OptimizerState::new(&codec.params);
    let adam = AdamWConfig::default();
    let mut rng = crate::synthworld::stream_rng(opts.seed, 1);
    let mut log = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let batch: Vec<usize> = (0..opts.batch_size)
            .map(|_| rng.gen_range(0..frames.len()))
            .collect();
        let out = batch_gradients(exec, &codec.params, batch.len(), |tape, vars, i| {
            let t = vq_terms(tape, vars, &frames[batch[i]], config)?;
            let mut metrics = vec![
                t.reconstruction.item()?,
                t.codebook.item()?,
                t.commitment.item()?,
            ];
            metrics.extend(t.tokens.indices.iter().map(|&k| k as f64));
            Ok(ExampleOutput {
                loss: t.total,
                metrics,
            })
        })?;
        if !out.loss.is_finite() {
            return Err(Error::NonFinite(format!("codec loss at step {step}")));
        }
        let mean = |j: usize| out.metrics.iter().map(|m| m[j]).sum::<f64>() / batch.len() as f64;
        let tokens = out
            .metrics
            .iter()
            .flat_map(|m| m[3..].iter().map(|&v| v as usize));
        log.push(CodecMetrics {
            step,
            total: out.loss,
            reconstruction: mean(0),
            codebook: mean(1),
            commitment: mean(2),
            perplexity: perplexity(tokens, config.codebook_size),
        });
        codec.params.set_grads(&out.grads)?;
        adamw_step(&mut codec.params, &mut state, lr, &adam)?;
    }
    Ok((codec, log))
}

/// Mean reconstruction error and token perplexity of `codec` over `frames`.
pub fn evaluate_codec(codec: &Codec, frames: &[DepthMap], exec: Exec) -> Result<(f64, f64)> {
    let per = crate::par::try_map_indexed(exec, frames.len(), |i| {
        let (z_q, tokens) = quantize(&codec.encode(&frames[i])?, codec.codebook()?)?;
        Ok::<_, Error>((codec.decode(&z_q)?.mse(&frames[i])?, tokens.indices))
    })?;
    let mse = per.iter().map(|p| p.0).sum::<f64>() / frames.len().max(1) as f64;
    let ppl = perplexity(
        per.iter().flat_map(|p| p.1.iter().copied()),
        codec.config.codebook_size,
    );
    Ok((mse, ppl))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> CodecConfig {
        CodecConfig {
            codebook_size: 8,
            code_dim: 4,
            grid: 2,
            frame_size: 8,
            channels: 3,
            ..CodecConfig::default()
        }
    }

    fn frame(seed: u64, size: usize) -> DepthMap {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        DepthMap::new(
            size,
            size,
            (0..size * size).map(|_| r.gen::<f64>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn desk_shapes() {
        let c = Codec::new(CodecConfig::default(), 1).unwrap();
        let z = c.encode(&frame(0, 32)).unwrap();
        assert_eq!(z.vectors.shape(), &[64, 16]);
        let out = c.reconstruct(&frame(0, 32)).unwrap();
        assert_eq!((out.height(), out.width()), (32, 32));
        assert!(out.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn constant_input_gives_identical_positions() {
        let c = Codec::new(CodecConfig::default(), 2).unwrap();
        let z = c
            .encode(&DepthMap::new(32, 32, vec![0.0; 1024]).unwrap())
            .unwrap();
        let first = z.vectors.row(0).to_vec();
        assert!((1..64).all(|i| z.vectors.row(i) == first.as_slice()));
        let again = c
            .encode(&DepthMap::new(32, 32, vec![0.0; 1024]).unwrap())
            .unwrap();
        assert_eq!(z, again);
    }

    #[test]
    fn exact_match_and_tie_rules() {
        let cb = Tensor::new(
            [5, 2],
            vec![9.0, 9.0, 1.0, 0.0, 5.0, 5.0, 0.0, 2.0, -1.0, 0.0],
        )
        .unwrap();
        let z = LatentGrid {
            side: 1,
            vectors: Tensor::new([1, 2], vec![0.0, 2.0]).unwrap(),
        };
        let (q, t) = quantize(&z, &cb).unwrap();
        assert_eq!(t.indices, vec![3]);
        assert_eq!(q.vectors.data(), &[0.0, 2.0]);
        // (0,0) is distance 1 from codes 1 and 4.
        let z0 = Tensor::new([1, 2], vec![0.0, 0.0]).unwrap();
        assert_eq!(nearest_codes(&z0, &cb).unwrap(), vec![1]);
        let empty = Tensor::new([1, 2], vec![0.0, 0.0])
            .unwrap()
            .reshape([2])
            .unwrap();
        assert!(nearest_codes(&z0, &empty).is_err());
    }

    #[test]
    fn loss_parts_sum_to_total() {
        let cfg = tiny();
        let c = Codec::new(cfg.clone(), 3).unwrap();
        let l = vq_loss(&frame(4, 8), &c.params, &cfg).unwrap();
        assert!((l.total - (l.reconstruction + l.codebook + l.commitment)).abs() < 1e-12);
        assert!((l.commitment - cfg.beta * l.codebook).abs() < 1e-12);
    }

    #[test]
    fn latent_on_code_has_zero_vq_terms() {
        let cfg = tiny();
        let mut c = Codec::new(cfg.clone(), 5).unwrap();
        let x = frame(6, 8);
        let mut cb = c.codebook().unwrap().clone();
        // Encoder reduced to its final bias, which also sits in the codebook.
        for (name, t) in c.params.clone().iter() {
            if name.starts_with("codec.enc") {
                *c.params.get_mut(name).unwrap() = Tensor::zeros(t.shape().to_vec());
            }
        }
        let b = Tensor::new([4], vec![0.3, -0.2, 0.1, 0.7]).unwrap();
        *c.params.get_mut("codec.enc2.b").unwrap() = b.clone();
        cb.data_mut()[..4].copy_from_slice(b.data());
        *c.params.get_mut(CODEBOOK).unwrap() = cb;
        let l = vq_loss(&x, &c.params, &cfg).unwrap();
        assert_eq!(l.codebook, 0.0);
        assert_eq!(l.commitment, 0.0);
    }

    #[test]
    fn tokenize_detokenize_matches_pipeline() {
        let c = Codec::new(tiny(), 7).unwrap();
        let x = frame(8, 8);
        let t = c.tokenize(&x).unwrap();
        assert_eq!(c.detokenize(&t).unwrap(), c.reconstruct(&x).unwrap());
        let bad = TokenGrid::new(2, vec![0, 1, 2, 99]).unwrap();
        assert!(matches!(
            c.detokenize(&bad),
            Err(Error::Index { index: 99, .. })
        ));
    }

    #[test]
    fn repeated_token_with_pointwise_decoder_is_uniform() {
        let cfg = CodecConfig {
            decoder_kernel: 1,
            ..tiny()
        };
        let c = Codec::new(cfg, 9).unwrap();
        let out = c
            .detokenize(&TokenGrid::new(2, vec![5; 4]).unwrap())
            .unwrap();
        assert!(out.values().iter().all(|&v| v == out.values()[0]));
    }

    #[test]
    fn zero_steps_returns_initial_codec() {
        let cfg = tiny();
        let opts = PretrainOptions {
            steps: 0,
            seed: 11,
            ..PretrainOptions::default()
        };
        let (c, log) = pretrain_codec(&[frame(1, 8)], &cfg, &opts, Exec::Sequential).unwrap();
        assert!(log.is_empty());
        assert_eq!(c, Codec::new(cfg.clone(), 11).unwrap());
        assert!(pretrain_codec(&[], &cfg, &opts, Exec::Sequential).is_err());
    }

    #[test]
    fn perplexity_of_uniform_usage() {
        assert!((perplexity([0, 1, 2, 3], 8) - 4.0).abs() < 1e-12);
        assert!((perplexity([2, 2, 2], 8) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_rejects_bad_geometry() {
        assert!(CodecConfig {
            grid: 6,
            ..CodecConfig::default()
        }
        .validate()
        .is_err());
        assert!(CodecConfig {
            codebook_size: 1,
            ..CodecConfig::default()
        }
        .validate()
        .is_err());
        assert!(CodecConfig::paper_scale().validate().is_ok());
        assert_eq!(CodecConfig::default().downsamples().unwrap(), 2);
    }
}
