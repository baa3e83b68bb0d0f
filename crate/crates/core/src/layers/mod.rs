//! Neural building blocks: symmetric-normalized GCN, GRU cell, attention
//! pooling over time, and plain MLPs.
//!
//! Every layer owns its weights as [`Tensor`]s and is bound onto a [`Tape`]
//! per forward pass. Binding walks the weights in the same order as
//! [`Module::visit`], which is also the order gradients come back in.

use rand::Rng;

use crate::diffcore::{Activation, Reduction, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[cfg(test)]
mod tests;

/// A set of trainable tensors that can be bound onto a tape.
pub trait Module {
    type Vars;

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>);

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>);

    /// Builds the bound form from handles yielded in `visit` order.
    fn vars_from(&self, vars: &mut dyn Iterator<Item = Var>) -> Result<Self::Vars>;

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.visit_mut("", &mut out);
        out.into_iter().map(|(_, t)| t).collect()
    }

    fn bind(&self, tape: &mut Tape) -> Result<Self::Vars> {
        let leaves: Vec<Var> = self
            .named_tensors()
            .into_iter()
            .map(|(_, t)| tape.leaf(t))
            .collect();
        self.vars_from(&mut leaves.into_iter())
    }
}

pub(crate) fn next_var(vars: &mut dyn Iterator<Item = Var>) -> Result<Var> {
    vars.next()
        .ok_or_else(|| Error::Contract("too few variables to bind module".into()))
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Glorot-uniform weight matrix, trainable.
pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(rows, cols, data)
        .expect("length matches shape")
        .with_grad()
}

/// `D̂^{-1/2} Â D̂^{-1/2}` with `Â = A + I` and `D̂_ii = Σ_j Â_ij`.
///
/// Directed inputs are normalised as given, without symmetrisation.
pub fn normalize_adjacency(tape: &mut Tape, adjacency: Var) -> Result<Var> {
    let a = tape.value(adjacency)?;
    let (n, m) = a.shape();
    if n != m {
        return Err(Error::Shape {
            op: "normalize_adjacency",
            lhs: (n, m),
            rhs: (m, n),
        });
    }
    if a.data().iter().any(|&v| v < 0.0) {
        return Err(Error::Domain(
            "adjacency entries must be nonnegative".into(),
        ));
    }
    let eye = tape.constant(Tensor::identity(n));
    let with_loops = tape.add(adjacency, eye)?;
    let degree = tape.row_sums(with_loops)?;
    let inv_sqrt = tape.powf(degree, -0.5)?;
    let inv_sqrt_row = tape.transpose(inv_sqrt)?;
    let left = tape.mul(with_loops, inv_sqrt)?;
    tape.mul(left, inv_sqrt_row)
}

/// Tape-free convenience wrapper around [`normalize_adjacency`].
pub fn normalized_adjacency(adjacency: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let a = tape.constant(adjacency.detached());
    let out = normalize_adjacency(&mut tape, a)?;
    Ok(tape.value(out)?.clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: glorot(input, output, rng),
            bias: Tensor::zeros(1, output).with_grad(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, self.weight)?;
        tape.add(xw, self.bias)
    }
}

impl Module for Linear {
    type Vars = LinearVars;

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }

    fn vars_from(&self, vars: &mut dyn Iterator<Item = Var>) -> Result<LinearVars> {
        Ok(LinearVars {
            weight: next_var(vars)?,
            bias: next_var(vars)?,
        })
    }
}

/// Linear blocks with a shared hidden activation and a terminal activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden: Activation,
    pub output: Activation,
}

impl Mlp {
    /// `dims` lists every width from input to output, e.g. `[16, 32, 32, 1]`.
    pub fn new(dims: &[usize], hidden: Activation, output: Activation, rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output widths");
        let layers = dims.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect();
        Mlp {
            layers,
            hidden,
            output,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::output_dim)
    }
}

#[derive(Clone, Debug)]
pub struct MlpVars {
    layers: Vec<LinearVars>,
    hidden: Activation,
    output: Activation,
}

impl MlpVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            let act = if i == last { self.output } else { self.hidden };
            h = tape.activation(act, h)?;
        }
        Ok(h)
    }
}

impl Module for Mlp {
    type Vars = MlpVars;

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &i.to_string()), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &i.to_string()), out);
        }
    }

    fn vars_from(&self, vars: &mut dyn Iterator<Item = Var>) -> Result<MlpVars> {
        let layers = self
            .layers
            .iter()
            .map(|l| l.vars_from(vars))
            .collect::<Result<_>>()?;
        Ok(MlpVars {
            layers,
            hidden: self.hidden,
            output: self.output,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcnLayer {
    pub weight: Tensor,
    pub activation: Activation,
}

impl GcnLayer {
    pub fn new(input: usize, output: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        GcnLayer {
            weight: glorot(input, output, rng),
            activation,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GcnVars {
    pub weight: Var,
    pub activation: Activation,
}

impl GcnVars {
    /// `σ(norm(A) · X · W)`; `adjacency` is raw and normalised here.
    pub fn forward(&self, tape: &mut Tape, x: Var, adjacency: Var) -> Result<Var> {
        let (n, _) = tape.shape(x)?;
        let (an, _) = tape.shape(adjacency)?;
        if n != an {
            return Err(Error::Shape {
                op: "gcn_forward",
                lhs: tape.shape(adjacency)?,
                rhs: tape.shape(x)?,
            });
        }
        let norm = normalize_adjacency(tape, adjacency)?;
        let xw = tape.matmul(x, self.weight)?;
        let mixed = tape.matmul(norm, xw)?;
        tape.activation(self.activation, mixed)
    }
}

impl Module for GcnLayer {
    type Vars = GcnVars;

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((join(prefix, "weight"), &self.weight));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
    }

    fn vars_from(&self, vars: &mut dyn Iterator<Item = Var>) -> Result<GcnVars> {
        Ok(GcnVars {
            weight: next_var(vars)?,
            activation: self.activation,
        })
    }
}

/// Standard gated recurrent unit shared across graph nodes (one row per node).
#[derive(Clone, Debug, PartialEq)]
pub struct GruCell {
    pub update_input: Tensor,
    pub update_hidden: Tensor,
    pub update_bias: Tensor,
    pub reset_input: Tensor,
    pub reset_hidden: Tensor,
    pub reset_bias: Tensor,
    pub candidate_input: Tensor,
    pub candidate_hidden: Tensor,
    pub candidate_bias: Tensor,
}

impl GruCell {
    pub fn new(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        GruCell {
            update_input: glorot(input, hidden, rng),
            update_hidden: glorot(hidden, hidden, rng),
            update_bias: Tensor::zeros(1, hidden).with_grad(),
            reset_input: glorot(input, hidden, rng),
            reset_hidden: glorot(hidden, hidden, rng),
            reset_bias: Tensor::zeros(1, hidden).with_grad(),
            candidate_input: glorot(input, hidden, rng),
            candidate_hidden: glorot(hidden, hidden, rng),
            candidate_bias: Tensor::zeros(1, hidden).with_grad(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.update_input.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.update_hidden.rows()
    }

    fn fields(&self) -> [(&'static str, &Tensor); 9] {
        [
            ("update_input", &self.update_input),
            ("update_hidden", &self.update_hidden),
            ("update_bias", &self.update_bias),
            ("reset_input", &self.reset_input),
            ("reset_hidden", &self.reset_hidden),
            ("reset_bias", &self.reset_bias),
            ("candidate_input", &self.candidate_input),
            ("candidate_hidden", &self.candidate_hidden),
            ("candidate_bias", &self.candidate_bias),
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    update: (Var, Var, Var),
    reset: (Var, Var, Var),
    candidate: (Var, Var, Var),
    hidden_dim: usize,
}

impl GruVars {
    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    fn gate(tape: &mut Tape, x: Var, h: Var, w: (Var, Var, Var)) -> Result<Var> {
        let xi = tape.matmul(x, w.0)?;
        let hh = tape.matmul(h, w.1)?;
        let s = tape.add(xi, hh)?;
        tape.add(s, w.2)
    }

    /// One step: `z = σ(xU_z + hW_z + b_z)`, `r = σ(xU_r + hW_r + b_r)`,
    /// `h̃ = tanh(xU_h + (r⊙h)W_h + b_h)`, `h' = (1−z)⊙h + z⊙h̃`.
    pub fn step(&self, tape: &mut Tape, x: Var, h_prev: Var) -> Result<Var> {
        let (xn, _) = tape.shape(x)?;
        let (hn, hd) = tape.shape(h_prev)?;
        if xn != hn || hd != self.hidden_dim {
            return Err(Error::Shape {
                op: "gru_step",
                lhs: tape.shape(x)?,
                rhs: (hn, hd),
            });
        }
        let z_pre = Self::gate(tape, x, h_prev, self.update)?;
        let z = tape.sigmoid(z_pre)?;
        let r_pre = Self::gate(tape, x, h_prev, self.reset)?;
        let r = tape.sigmoid(r_pre)?;
        let rh = tape.mul(r, h_prev)?;
        let c_pre = Self::gate(tape, x, rh, self.candidate)?;
        let candidate = tape.tanh(c_pre)?;
        let keep = tape.affine(z, -1.0, 1.0)?;
        let old = tape.mul(keep, h_prev)?;
        let new = tape.mul(z, candidate)?;
        tape.add(old, new)
    }

    /// Runs the cell over a sequence from a zero state, returning every hidden state.
    pub fn run(&self, tape: &mut Tape, inputs: &[Var]) -> Result<Vec<Var>> {
        let Some(&first) = inputs.first() else {
            return Err(Error::Domain("GRU over an empty sequence".into()));
        };
        let (n, _) = tape.shape(first)?;
        let mut h = tape.constant(Tensor::zeros(n, self.hidden_dim));
        let mut states = Vec::with_capacity(inputs.len());
        for &x in inputs {
            h = self.step(tape, x, h)?;
            states.push(h);
        }
        Ok(states)
    }
}

impl Module for GruCell {
    type Vars = GruVars;

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (name, t) in self.fields() {
            out.push((join(prefix, name), t));
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        let names = self.fields().map(|(n, _)| n);
        let tensors = [
            &mut self.update_input,
            &mut self.update_hidden,
            &mut self.update_bias,
            &mut self.reset_input,
            &mut self.reset_hidden,
            &mut self.reset_bias,
            &mut self.candidate_input,
            &mut self.candidate_hidden,
            &mut self.candidate_bias,
        ];
        for (name, t) in names.into_iter().zip(tensors) {
            out.push((join(prefix, name), t));
        }
    }

    fn vars_from(&self, vars: &mut dyn Iterator<Item = Var>) -> Result<GruVars> {
        let mut triple = || -> Result<(Var, Var, Var)> {
            Ok((next_var(vars)?, next_var(vars)?, next_var(vars)?))
        };
        Ok(GruVars {
            update: triple()?,
            reset: triple()?,
            candidate: triple()?,
            hidden_dim: self.hidden_dim(),
        })
    }
}

/// Scores each time step with linear → tanh → linear, averages the score over
/// nodes, softmaxes over time and returns the weighted sum of hidden states.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHead {
    pub projection: Linear,
    pub score: Linear,
}

impl AttentionHead {
    pub fn new(hidden: usize, attention_dim: usize, rng: &mut impl Rng) -> Self {
        AttentionHead {
            projection: Linear::new(hidden, attention_dim, rng),
            score: Linear::new(attention_dim, 1, rng),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    projection: LinearVars,
    score: LinearVars,
}

impl AttentionVars {
    /// Scalar score of one time step, before the softmax.
    pub fn score(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let p = self.projection.forward(tape, h)?;
        let u = tape.tanh(p)?;
        let s = self.score.forward(tape, u)?;
        tape.reduce(Reduction::Mean, s)
    }

    /// Returns `(context, weights)` with weights as a 1×K row.
    pub fn pool(&self, tape: &mut Tape, states: &[Var]) -> Result<(Var, Var)> {
        let Some(&first) = states.first() else {
            return Err(Error::Domain("attention over an empty sequence".into()));
        };
        let shape = tape.shape(first)?;
        for &h in &states[1..] {
            if tape.shape(h)? != shape {
                return Err(Error::Shape {
                    op: "attention_pool",
                    lhs: shape,
                    rhs: tape.shape(h)?,
                });
            }
        }
        let scores = states
            .iter()
            .map(|&h| self.score(tape, h))
            .collect::<Result<Vec<_>>>()?;
        let logits = tape.concat_cols(&scores)?;
        let weights = tape.softmax_rows(logits)?;
        let mut context = None;
        for (t, &h) in states.iter().enumerate() {
            let alpha = tape.slice_cols(weights, t, 1)?;
            let term = tape.mul(h, alpha)?;
            context = Some(match context {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        Ok((context.expect("nonempty"), weights))
    }
}

impl Module for AttentionHead {
    type Vars = AttentionVars;

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.projection.visit(&join(prefix, "projection"), out);
        self.score.visit(&join(prefix, "score"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.projection.visit_mut(&join(prefix, "projection"), out);
        self.score.visit_mut(&join(prefix, "score"), out);
    }

    fn vars_from(&self, vars: &mut dyn Iterator<Item = Var>) -> Result<AttentionVars> {
        Ok(AttentionVars {
            projection: self.projection.vars_from(vars)?,
            score: self.score.vars_from(vars)?,
        })
    }
}
