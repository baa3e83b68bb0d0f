//! The two-stream network: a mobility stream (GRU, attention, mobility
//! decoder, edge generator) feeding learned edges into a case stream
//! (stacked GCN, GRU, attention, case decoder).

mod rollout;

pub use rollout::{rollout, RolloutStep};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{mobility_feature_width, CASE_FEATURES};
use crate::diffcore::{Activation, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{
    join, AttentionHead, AttentionVars, GcnLayer, GcnVars, GruCell, GruVars, Mlp, MlpVars, Module,
};


/// Source of the GCN edges.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeMode {
    /// Produced by the generator from mobility-stream hidden states.
    #[default]
    Learned,
    /// Raw mobility scaled by the window's largest flow.
    Mobility,
}

impl fmt::Display for EdgeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EdgeMode::Learned => "learned",
            EdgeMode::Mobility => "mobility",
        })
    }
}

impl FromStr for EdgeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(EdgeMode::Learned),
            "mobility" => Ok(EdgeMode::Mobility),
            other => Err(Error::Validation(format!(
                "unknown edge mode `{other}` (expected `learned` or `mobility`)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_regions: usize,
    pub window: usize,
    /// Output widths of the stacked GCN layers.
    pub gcn_dims: Vec<usize>,
    pub case_hidden: usize,
    pub mobility_hidden: usize,
    pub attention_dim: usize,
    pub generator_hidden: usize,
    pub decoder_hidden: usize,
    pub edge_mode: EdgeMode,
    pub attention_enabled: bool,
}

impl ModelConfig {
    pub fn new(n_regions: usize, window: usize) -> Self {
        ModelConfig {
            n_regions,
            window,
            gcn_dims: vec![16, 16],
            case_hidden: 16,
            mobility_hidden: 16,
            attention_dim: 16,
            generator_hidden: 32,
            decoder_hidden: 32,
            edge_mode: EdgeMode::Learned,
            attention_enabled: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_regions < 1 || self.window < 1 {
            return Err(Error::Validation(format!(
                "model needs N >= 1 and K >= 1, got N={} K={}",
                self.n_regions, self.window
            )));
        }
        let dims = [
            self.case_hidden,
            self.mobility_hidden,
            self.attention_dim,
            self.generator_hidden,
            self.decoder_hidden,
        ];
        if self.gcn_dims.is_empty() || self.gcn_dims.iter().chain(&dims).any(|&d| d == 0) {
            return Err(Error::Validation("layer widths must be positive and at least one GCN layer is needed".into()));
        }
        Ok(())
    }
}

/// Every learnable weight of both streams.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub gcn: Vec<GcnLayer>,
    pub case_gru: GruCell,
    pub case_attention: Option<AttentionHead>,
    pub case_decoder: Mlp,
    pub mobility_gru: GruCell,
    pub mobility_attention: Option<AttentionHead>,
    pub mobility_decoder: Mlp,
    /// Absent when edges come from raw mobility.
    pub generator: Option<Mlp>,
}

impl ModelParams {
    /// Freshly initialized weights drawn from a generator seeded with `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let leaky = Activation::leaky_relu();
        let mut gcn = Vec::with_capacity(config.gcn_dims.len());
        let mut width = CASE_FEATURES;
        for &d in &config.gcn_dims {
            gcn.push(GcnLayer::new(width, d, Activation::Relu, &mut rng));
            width = d;
        }
        let case_gru = GruCell::new(width, config.case_hidden, &mut rng);
        let case_attention = config
            .attention_enabled
            .then(|| AttentionHead::new(config.case_hidden, config.attention_dim, &mut rng));
        let case_decoder = Mlp::new(
            &[config.case_hidden, config.decoder_hidden, 1],
            leaky,
            Activation::Identity,
            &mut rng,
        );
        let n = config.n_regions;
        let mobility_gru = GruCell::new(mobility_feature_width(n), config.mobility_hidden, &mut rng);
        let mobility_attention = config
            .attention_enabled
            .then(|| AttentionHead::new(config.mobility_hidden, config.attention_dim, &mut rng));
        let mobility_decoder = Mlp::new(
            &[config.mobility_hidden, config.decoder_hidden, n],
            leaky,
            Activation::Identity,
            &mut rng,
        );
        let generator = (config.edge_mode == EdgeMode::Learned).then(|| {
            Mlp::new(
                &[2 * config.mobility_hidden, config.generator_hidden, config.generator_hidden, 1],
                leaky,
                Activation::Sigmoid,
                &mut rng,
            )
        });
        Ok(ModelParams {
            config,
            gcn,
            case_gru,
            case_attention,
            case_decoder,
            mobility_gru,
            mobility_attention,
            mobility_decoder,
            generator,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

impl Module for ModelParams {
    type Vars = ModelVars;

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, l) in self.gcn.iter().enumerate() {
            l.visit(&join(prefix, &format!("gcn.{i}")), out);
        }
        self.case_gru.visit(&join(prefix, "case_gru"), out);
        if let Some(a) = &self.case_attention {
            a.visit(&join(prefix, "case_attention"), out);
        }
        self.case_decoder.visit(&join(prefix, "case_decoder"), out);
        self.mobility_gru.visit(&join(prefix, "mobility_gru"), out);
        if let Some(a) = &self.mobility_attention {
            a.visit(&join(prefix, "mobility_attention"), out);
        }
        self.mobility_decoder.visit(&join(prefix, "mobility_decoder"), out);
        if let Some(g) = &self.generator {
            g.visit(&join(prefix, "generator"), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (i, l) in self.gcn.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("gcn.{i}")), out);
        }
        self.case_gru.visit_mut(&join(prefix, "case_gru"), out);
        if let Some(a) = &mut self.case_attention {
            a.visit_mut(&join(prefix, "case_attention"), out);
        }
        self.case_decoder.visit_mut(&join(prefix, "case_decoder"), out);
        self.mobility_gru.visit_mut(&join(prefix, "mobility_gru"), out);
        if let Some(a) = &mut self.mobility_attention {
            a.visit_mut(&join(prefix, "mobility_attention"), out);
        }
        self.mobility_decoder.visit_mut(&join(prefix, "mobility_decoder"), out);
        if let Some(g) = &mut self.generator {
            g.visit_mut(&join(prefix, "generator"), out);
        }
    }

    fn vars_from(&self, vars: &mut dyn Iterator<Item = Var>) -> Result<ModelVars> {
        let gcn = self.gcn.iter().map(|l| l.vars_from(vars)).collect::<Result<_>>()?;
        let case_gru = self.case_gru.vars_from(vars)?;
        let case_attention = self.case_attention.as_ref().map(|a| a.vars_from(vars)).transpose()?;
        let case_decoder = self.case_decoder.vars_from(vars)?;
        let mobility_gru = self.mobility_gru.vars_from(vars)?;
        let mobility_attention = self.mobility_attention.as_ref().map(|a| a.vars_from(vars)).transpose()?;
        let mobility_decoder = self.mobility_decoder.vars_from(vars)?;
        let generator = self.generator.as_ref().map(|g| g.vars_from(vars)).transpose()?;
        Ok(ModelVars {
            config: self.config.clone(),
            gcn,
            case_gru,
            case_attention,
            case_decoder,
            mobility_gru,
            mobility_attention,
            mobility_decoder,
            generator,
        })
    }
}

/// [`ModelParams`] bound onto a tape.
#[derive(Clone, Debug)]
pub struct ModelVars {
    config: ModelConfig,
    gcn: Vec<GcnVars>,
    case_gru: GruVars,
    case_attention: Option<AttentionVars>,
    case_decoder: MlpVars,
    mobility_gru: GruVars,
    mobility_attention: Option<AttentionVars>,
    mobility_decoder: MlpVars,
    generator: Option<MlpVars>,
}

/// K days of model input.
#[derive(Clone, Debug, PartialEq)]
pub struct StepInput {
    /// K matrices N×3 (daily cases, cumulative cases, population), normalized.
    pub case_features: Vec<Tensor>,
    /// K raw N×N mobility matrices.
    pub mobility_window: Vec<Tensor>,
    /// K matrices N×(N+8) (mobility row, cumulative cases, weekday one-hot), normalized.
    pub mobility_features: Vec<Tensor>,
}

impl StepInput {
    pub fn window(&self) -> usize {
        self.case_features.len()
    }

    fn check(&self, config: &ModelConfig) -> Result<()> {
        let (n, k) = (config.n_regions, config.window);
        let lens = [self.case_features.len(), self.mobility_window.len(), self.mobility_features.len()];
        if lens.iter().any(|&l| l != k) {
            return Err(Error::Contract(format!(
                "model expects a {k}-day window, got {lens:?} days"
            )));
        }
        let expect = |ts: &[Tensor], shape: (usize, usize), what: &str| -> Result<()> {
            match ts.iter().find(|t| t.shape() != shape) {
                Some(t) => Err(Error::Contract(format!(
                    "{what} has shape {:?}, model expects {shape:?}",
                    t.shape()
                ))),
                None => Ok(()),
            }
        };
        expect(&self.case_features, (n, CASE_FEATURES), "case features")?;
        expect(&self.mobility_window, (n, n), "mobility window")?;
        expect(&self.mobility_features, (n, mobility_feature_width(n)), "mobility features")
    }
}

/// Prediction for the day after the window.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    /// N×1 predicted daily cases, normalized.
    pub cases_next: Tensor,
    /// N×N predicted mobility, normalized.
    pub mobility_next: Tensor,
    /// The K edge matrices fed to the GCN layers.
    pub adjacency_seq: Vec<Tensor>,
    /// 1×K attention weights of the case stream, when attention is enabled.
    pub case_attention: Option<Tensor>,
    pub mobility_attention: Option<Tensor>,
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub cases_next: Var,
    pub mobility_next: Var,
    pub adjacency_seq: Vec<Var>,
    pub case_attention: Option<Var>,
    pub mobility_attention: Option<Var>,
}

/// Row-major pair indices: entry `i*N + j` pairs node `i` (left) with node `j` (right).
fn pair_indices(n: usize) -> (Vec<usize>, Vec<usize>) {
    let left = (0..n * n).map(|p| p / n).collect();
    let right = (0..n * n).map(|p| p % n).collect();
    (left, right)
}

impl ModelVars {
    /// Edge matrices from mobility-stream hidden states, one per time step.
    pub fn generate_adjacency(&self, tape: &mut Tape, hidden_seq: &[Var]) -> Result<Vec<Var>> {
        let generator = self
            .generator
            .as_ref()
            .ok_or_else(|| Error::Contract("model has no edge generator (edge mode is mobility)".into()))?;
        let n = self.config.n_regions;
        let (left, right) = pair_indices(n);
        hidden_seq
            .iter()
            .map(|&h| {
                let hl = tape.gather_rows(h, &left)?;
                let hr = tape.gather_rows(h, &right)?;
                let pairs = tape.concat_cols(&[hl, hr])?;
                let scores = generator.forward(tape, pairs)?;
                tape.reshape(scores, n, n)
            })
            .collect()
    }

    fn readout(
        tape: &mut Tape,
        attention: &Option<AttentionVars>,
        states: &[Var],
    ) -> Result<(Var, Option<Var>)> {
        match attention {
            Some(head) => {
                let (context, weights) = head.pool(tape, states)?;
                Ok((context, Some(weights)))
            }
            None => Ok((*states.last().expect("window is nonempty"), None)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, input: &StepInput) -> Result<ForwardVars> {
        input.check(&self.config)?;
        let mobility_inputs: Vec<Var> = input
            .mobility_features
            .iter()
            .map(|x| tape.constant(x.detached()))
            .collect();
        let mobility_states = self.mobility_gru.run(tape, &mobility_inputs)?;

        let adjacency_seq = match self.config.edge_mode {
            EdgeMode::Learned => self.generate_adjacency(tape, &mobility_states)?,
            EdgeMode::Mobility => {
                let max = input
                    .mobility_window
                    .iter()
                    .flat_map(|m| m.data().iter().copied())
                    .fold(0.0_f64, f64::max);
                input
                    .mobility_window
                    .iter()
                    .map(|m| {
                        let scaled = if max > 0.0 { m.map(|v| v / max) } else { Tensor::zeros(m.rows(), m.cols()) };
                        tape.constant(scaled)
                    })
                    .collect()
            }
        };

        let mut encoded = Vec::with_capacity(input.window());
        for (x, &a) in input.case_features.iter().zip(&adjacency_seq) {
            let mut h = tape.constant(x.detached());
            for layer in &self.gcn {
                h = layer.forward(tape, h, a)?;
            }
            encoded.push(h);
        }
        let case_states = self.case_gru.run(tape, &encoded)?;
        let (case_context, case_attention) = Self::readout(tape, &self.case_attention, &case_states)?;
        let cases_next = self.case_decoder.forward(tape, case_context)?;

        let (mob_context, mobility_attention) =
            Self::readout(tape, &self.mobility_attention, &mobility_states)?;
        let mobility_next = self.mobility_decoder.forward(tape, mob_context)?;

        Ok(ForwardVars {
            cases_next,
            mobility_next,
            adjacency_seq,
            case_attention,
            mobility_attention,
        })
    }
}

/// One prediction step on a private tape.
pub fn forward(params: &ModelParams, input: &StepInput) -> Result<StepOutput> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape)?;
    let out = vars.forward(&mut tape, input)?;
    let value = |v: Var| tape.value(v).map(Tensor::detached);
    Ok(StepOutput {
        cases_next: value(out.cases_next)?,
        mobility_next: value(out.mobility_next)?,
        adjacency_seq: out.adjacency_seq.iter().map(|&a| value(a)).collect::<Result<_>>()?,
        case_attention: out.case_attention.map(value).transpose()?,
        mobility_attention: out.mobility_attention.map(value).transpose()?,
    })
}

/// Edge matrices for a sequence of mobility-stream hidden states, off-tape.
pub fn generate_adjacency(params: &ModelParams, hidden_seq: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape)?;
    let hs: Vec<Var> = hidden_seq.iter().map(|h| tape.constant(h.detached())).collect();
    let out = vars.generate_adjacency(&mut tape, &hs)?;
    out.into_iter().map(|a| tape.value(a).map(Tensor::detached)).collect()
}
