//! The SCINet architecture: SCI-Blocks arranged as a binary tree, an
//! optional stack of trees with intermediate supervision, and the L1 loss.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{
    DecoderLayer, Forward, InteractionModule, InteractionSpec, ParamStore,
};
use crate::tensor::{Tape, Tensor, Var};

/// Operator joining the scaled sub-sequence with its correction term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Sign {
    #[default]
    Add,
    Sub,
}

impl std::str::FromStr for Sign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" | "+" => Ok(Sign::Add),
            "sub" | "-" => Ok(Sign::Sub),
            other => Err(Error::Config(format!("sign must be add or sub, got '{other}'"))),
        }
    }
}

impl std::fmt::Display for Sign {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Sign::Add => "add",
            Sign::Sub => "sub",
        })
    }
}

/// Component switches for ablation runs. All off is the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Ablation {
    /// Replace the cross-coupled update with `ρ(φ(F_odd))`, `η(ψ(F_even))`.
    pub no_interlearn: bool,
    /// One interaction module serves as φ, ψ, ρ and η in each block.
    pub weight_share: bool,
    pub no_residual: bool,
    /// Drop the decoder and read the prediction off the last τ steps.
    pub no_decoder: bool,
}

impl Ablation {
    pub const VARIANTS: [&'static str; 4] =
        ["no_interlearn", "weight_share", "no_residual", "no_decoder"];

    pub fn variant(name: &str) -> Result<Self> {
        let mut a = Ablation::default();
        match name {
            "no_interlearn" => a.no_interlearn = true,
            "weight_share" => a.weight_share = true,
            "no_residual" => a.no_residual = true,
            "no_decoder" => a.no_decoder = true,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation variant '{other}' (expected one of {})",
                    Self::VARIANTS.join(", ")
                )))
            }
        }
        Ok(a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Look-back window length `T`.
    pub lookback: usize,
    /// Forecast horizon `τ`.
    pub horizon: usize,
    pub variates: usize,
    pub levels: usize,
    pub stacks: usize,
    pub kernel_size: usize,
    pub hidden_ratio: usize,
    pub dropout: f64,
    pub sign: Sign,
    pub ablation: Ablation,
    pub identity_init: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lookback: 48,
            horizon: 24,
            variates: 1,
            levels: 3,
            stacks: 1,
            kernel_size: 5,
            hidden_ratio: 2,
            dropout: 0.5,
            sign: Sign::Add,
            ablation: Ablation::default(),
            identity_init: true,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("variates", self.variates),
            ("levels", self.levels),
            ("stacks", self.stacks),
            ("kernel_size", self.kernel_size),
            ("hidden_ratio", self.hidden_ratio),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.levels >= usize::BITS as usize || !self.lookback.is_multiple_of(1usize << self.levels) {
            return Err(Error::Config(format!(
                "T not divisible by 2^L: lookback {} is not a multiple of 2^{}",
                self.lookback, self.levels
            )));
        }
        if self.stacks >= 2 && self.horizon >= self.lookback {
            return Err(Error::Config(format!(
                "stacking needs horizon < lookback, got horizon {} and lookback {}",
                self.horizon, self.lookback
            )));
        }
        if self.ablation.no_decoder && self.horizon > self.lookback {
            return Err(Error::Config(format!(
                "without a decoder the horizon ({}) cannot exceed the lookback ({})",
                self.horizon, self.lookback
            )));
        }
        Ok(())
    }

    /// SCI-Blocks per tree: one root, doubling at every level below it.
    pub fn blocks_per_tree(&self) -> usize {
        (1 << self.levels) - 1
    }

    pub fn leaf_len(&self) -> usize {
        self.lookback >> self.levels
    }

    /// Canonical `key=value` rendering; the basis of [`ModelConfig::hash`].
    pub fn canonical(&self) -> String {
        let a = &self.ablation;
        format!(
            "lookback={}\nhorizon={}\nvariates={}\nlevels={}\nstacks={}\nkernel_size={}\n\
             hidden_ratio={}\ndropout={:?}\nsign={}\nno_interlearn={}\nweight_share={}\n\
             no_residual={}\nno_decoder={}\nidentity_init={}\nseed={}\n",
            self.lookback,
            self.horizon,
            self.variates,
            self.levels,
            self.stacks,
            self.kernel_size,
            self.hidden_ratio,
            self.dropout,
            self.sign,
            a.no_interlearn,
            a.weight_share,
            a.no_residual,
            a.no_decoder,
            self.identity_init,
            self.seed
        )
    }

    /// Hex SHA-256 of [`ModelConfig::canonical`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

/// φ, ψ, ρ and η of one block.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockModules {
    Distinct(Box<[InteractionModule; 4]>),
    Shared(InteractionModule),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SciBlock {
    pub modules: BlockModules,
}

impl SciBlock {
    fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let spec = InteractionSpec {
            channels: cfg.variates,
            hidden_ratio: cfg.hidden_ratio,
            kernel_size: cfg.kernel_size,
            dropout: cfg.dropout,
            identity_init: cfg.identity_init,
        };
        let modules = if cfg.ablation.weight_share {
            BlockModules::Shared(InteractionModule::new(store, &format!("{prefix}.shared"), spec, rng))
        } else {
            let mut make = |name: &str| InteractionModule::new(store, &format!("{prefix}.{name}"), spec, rng);
            BlockModules::Distinct(Box::new([make("phi"), make("psi"), make("rho"), make("eta")]))
        };
        Self { modules }
    }

    fn module(&self, i: usize) -> &InteractionModule {
        match &self.modules {
            BlockModules::Distinct(m) => &m[i],
            BlockModules::Shared(m) => m,
        }
    }

    pub fn phi(&self) -> &InteractionModule {
        self.module(0)
    }

    pub fn psi(&self) -> &InteractionModule {
        self.module(1)
    }

    pub fn rho(&self) -> &InteractionModule {
        self.module(2)
    }

    pub fn eta(&self) -> &InteractionModule {
        self.module(3)
    }

    /// Splits `x` into even/odd sub-sequences and runs interactive learning,
    /// returning `(F'_even, F'_odd)`.
    pub fn forward(
        &self,
        fwd: &mut Forward<'_>,
        x: Var,
        sign: Sign,
        no_interlearn: bool,
    ) -> Result<(Var, Var)> {
        let even = fwd.tape.strided(x, 0)?;
        let odd = fwd.tape.strided(x, 1)?;
        self.interact(fwd, even, odd, sign, no_interlearn)
    }

    /// Interactive learning on already-split sub-sequences.
    pub fn interact(
        &self,
        fwd: &mut Forward<'_>,
        even: Var,
        odd: Var,
        sign: Sign,
        no_interlearn: bool,
    ) -> Result<(Var, Var)> {
        if no_interlearn {
            let p = self.phi().forward(fwd, odd)?;
            let odd_out = self.rho().forward(fwd, p)?;
            let q = self.psi().forward(fwd, even)?;
            let even_out = self.eta().forward(fwd, q)?;
            return Ok((even_out, odd_out));
        }

        let phi = self.phi().forward(fwd, even)?;
        let scale_odd = fwd.tape.exp(phi)?;
        let odd_s = fwd.tape.mul(odd, scale_odd)?;

        let psi = self.psi().forward(fwd, odd)?;
        let scale_even = fwd.tape.exp(psi)?;
        let even_s = fwd.tape.mul(even, scale_even)?;

        let rho = self.rho().forward(fwd, even_s)?;
        let eta = self.eta().forward(fwd, odd_s)?;
        let join = |tape: &mut Tape, a, b| match sign {
            Sign::Add => tape.add(a, b),
            Sign::Sub => tape.sub(a, b),
        };
        let odd_out = join(fwd.tape, odd_s, rho)?;
        let even_out = join(fwd.tape, even_s, eta)?;
        Ok((even_out, odd_out))
    }
}

/// One SCINet: a complete binary tree of blocks (heap order, root first)
/// followed by the residual connection and the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct SciNetTree {
    pub blocks: Vec<SciBlock>,
    pub decoder: Option<DecoderLayer>,
}

/// Values produced by one tree.
#[derive(Debug, Clone, Copy)]
pub struct TreeOutput {
    /// Realigned tree output plus the residual, before decoding: `[B, d, T]`.
    pub representation: Var,
    /// `[B, d, τ]`.
    pub prediction: Var,
}

impl SciNetTree {
    fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let blocks = (0..cfg.blocks_per_tree())
            .map(|i| SciBlock::new(store, &format!("{prefix}.block{i}"), cfg, rng))
            .collect();
        let decoder = (!cfg.ablation.no_decoder)
            .then(|| DecoderLayer::new(store, &format!("{prefix}.decoder"), cfg.lookback, cfg.horizon, rng));
        Self { blocks, decoder }
    }

    pub fn forward(&self, fwd: &mut Forward<'_>, x: Var, cfg: &ModelConfig) -> Result<TreeOutput> {
        let shape = fwd.tape.value(x).shape();
        if shape.len() != 3 || shape[1] != cfg.variates || shape[2] != cfg.lookback {
            return Err(Error::Dimension(format!(
                "model expects input [B, {}, {}], got {:?}",
                cfg.variates, cfg.lookback, shape
            )));
        }
        let encoded = self.encode(fwd, 0, 1, x, cfg)?;
        let representation = if cfg.ablation.no_residual {
            encoded
        } else {
            fwd.tape.add(encoded, x)?
        };
        let prediction = match &self.decoder {
            Some(dec) => dec.forward(fwd, representation)?,
            None => fwd
                .tape
                .slice_last(representation, cfg.lookback - cfg.horizon, cfg.horizon)?,
        };
        Ok(TreeOutput {
            representation,
            prediction,
        })
    }

    /// Processes the subtree rooted at `node` (at `level`, 1-based) and
    /// returns its output already realigned to the order of `x`.
    fn encode(
        &self,
        fwd: &mut Forward<'_>,
        node: usize,
        level: usize,
        x: Var,
        cfg: &ModelConfig,
    ) -> Result<Var> {
        let (even, odd) =
            self.blocks[node].forward(fwd, x, cfg.sign, cfg.ablation.no_interlearn)?;
        if level == cfg.levels {
            return fwd.tape.interleave(even, odd);
        }
        let even = self.encode(fwd, 2 * node + 1, level + 1, even, cfg)?;
        let odd = self.encode(fwd, 2 * node + 2, level + 1, odd, cfg)?;
        fwd.tape.interleave(even, odd)
    }
}

/// Outputs of a full (possibly stacked) forward pass.
#[derive(Debug, Clone)]
pub struct StackOutput {
    /// Prediction of every stack, first to last; the last is the forecast.
    pub predictions: Vec<Var>,
    /// Pre-decoder representation of the first stack.
    pub representation: Var,
}

/// A stack of `K` SCINets sharing one configuration, with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Scinet {
    config: ModelConfig,
    params: ParamStore,
    stacks: Vec<SciNetTree>,
}

impl Scinet {
    /// Builds and initialises a model. Initialisation is fully determined by
    /// `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let stacks = (0..config.stacks)
            .map(|k| SciNetTree::new(&mut params, &format!("stack{k}"), &config, &mut rng))
            .collect();
        Ok(Self {
            config,
            params,
            stacks,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn stacks(&self) -> &[SciNetTree] {
        &self.stacks
    }

    /// Records the forward pass on `fwd.tape`. Parameters must already be
    /// bound (see [`ParamStore::bind`]) into `fwd.params`.
    pub fn forward(&self, fwd: &mut Forward<'_>, x: Var) -> Result<StackOutput> {
        let cfg = &self.config;
        let mut predictions = Vec::with_capacity(self.stacks.len());
        let mut representation = None;
        let mut input = x;
        for (k, tree) in self.stacks.iter().enumerate() {
            if k > 0 {
                let prev = *predictions.last().unwrap();
                let recent = fwd
                    .tape
                    .slice_last(x, cfg.horizon, cfg.lookback - cfg.horizon)?;
                input = fwd.tape.concat_last(recent, prev)?;
            }
            let out = tree.forward(fwd, input, cfg)?;
            representation.get_or_insert(out.representation);
            predictions.push(out.prediction);
        }
        Ok(StackOutput {
            predictions,
            representation: representation.expect("at least one stack"),
        })
    }

    /// Inference-mode forward pass on `[B, d, T]`, returning every stack's
    /// prediction and the first stack's representation as plain tensors.
    pub fn infer(&self, x: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.params.bind_constants(&mut tape);
        let xv = tape.constant(x.clone());
        let mut fwd = Forward {
            tape: &mut tape,
            params: &bound,
            rng: None,
        };
        let out = self.forward(&mut fwd, xv)?;
        let preds = out
            .predictions
            .iter()
            .map(|v| tape.value(*v).clone())
            .collect();
        Ok((preds, tape.value(out.representation).clone()))
    }

    /// Final forecast `[B, d, τ]` in inference mode.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let (mut preds, _) = self.infer(x)?;
        Ok(preds.pop().expect("at least one stack"))
    }

    /// Pre-decoder representation `[B, d, T]` of the first stack.
    pub fn representation(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.infer(x)?.1)
    }
}

/// Per-stack L1 losses and their sum.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Var,
    pub components: Vec<Var>,
}

/// `L_k = mean |X̂ᵏ − Y|` over every element, and `L = Σ_k L_k`.
pub fn compute_loss(tape: &mut Tape, predictions: &[Var], target: Var) -> Result<LossTerms> {
    if predictions.is_empty() {
        return Err(Error::Usage("compute_loss needs at least one prediction".into()));
    }
    let mut components = Vec::with_capacity(predictions.len());
    for &p in predictions {
        if tape.value(p).shape() != tape.value(target).shape() {
            return Err(Error::Dimension(format!(
                "prediction {:?} and target {:?} differ",
                tape.value(p).shape(),
                tape.value(target).shape()
            )));
        }
        let diff = tape.sub(p, target)?;
        let abs = tape.abs(diff)?;
        components.push(tape.mean(abs)?);
    }
    let mut total = components[0];
    for &c in &components[1..] {
        total = tape.add(total, c)?;
    }
    Ok(LossTerms { total, components })
}

/// Even (0-based index 0, 2, …) and odd (1, 3, …) elements of the last axis.
pub fn split_even_odd(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let e = tape.strided(v, 0)?;
    let o = tape.strided(v, 1)?;
    Ok((tape.value(e).clone(), tape.value(o).clone()))
}

/// Inverse of `levels`-fold recursive even/odd splitting. `parts` are the
/// leaves in tree order (even child before odd child at every node).
pub fn realign(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() || !parts.len().is_power_of_two() {
        return Err(Error::Dimension(format!(
            "realign needs a power-of-two number of parts, got {}",
            parts.len()
        )));
    }
    if let Some(bad) = parts.iter().find(|p| p.shape() != parts[0].shape()) {
        return Err(Error::Dimension(format!(
            "realign parts differ in shape: {:?} vs {:?}",
            parts[0].shape(),
            bad.shape()
        )));
    }
    let mut tape = Tape::new();
    let mut level: Vec<Var> = parts.iter().map(|p| tape.constant(p.clone())).collect();
    while level.len() > 1 {
        level = level
            .chunks(2)
            .map(|pair| tape.interleave(pair[0], pair[1]))
            .collect::<Result<_>>()?;
    }
    Ok(tape.value(level[0]).clone())
}

/// Leaves of `levels`-fold splitting, in the order [`realign`] expects.
pub fn split_levels(x: &Tensor, levels: usize) -> Result<Vec<Tensor>> {
    let mut parts = vec![x.clone()];
    for _ in 0..levels {
        let mut next = Vec::with_capacity(parts.len() * 2);
        for p in &parts {
            let (e, o) = split_even_odd(p)?;
            next.push(e);
            next.push(o);
        }
        parts = next;
    }
    Ok(parts)
}
