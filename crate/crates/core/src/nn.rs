//! Neural-network building blocks on top of the tape: named parameter
//! storage, linear and LSTM layers, and the two loss terms.

use indexmap::IndexMap;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Ordered map from parameter name to tensor. Iteration order is insertion
/// order, which fixes the layout of checkpoints and optimizer state.
#[derive(Debug, Default, Clone)]
pub struct ParameterSet {
    params: IndexMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Names are unique; a duplicate is a usage bug.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        let prev = self.params.insert(name.clone(), value);
        assert!(prev.is_none(), "duplicate parameter name {name:?}");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl ExactSizeIterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// True when both sets hold the same names with the same shapes, in the
    /// same order.
    pub fn same_layout(&self, other: &ParameterSet) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(other.params.iter())
                .all(|((an, av), (bn, bv))| an == bn && av.shape() == bv.shape())
    }

    /// Add a linear layer's weight `{prefix}.w` of shape [fan_in, fan_out]
    /// drawn uniformly from +-1/sqrt(fan_in), and zero bias `{prefix}.b`.
    pub fn init_linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
        let k = 1.0 / (fan_in as f64).sqrt();
        self.insert(
            format!("{prefix}.w"),
            Tensor::rand_uniform(rng, &[fan_in, fan_out], -k, k),
        );
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
    }

    /// Add an LSTM cell's matrices `{prefix}.w_ih` [input, 4H] and
    /// `{prefix}.w_hh` [H, 4H], each uniform in +-1/sqrt(own fan-in), plus a
    /// zero bias `{prefix}.b` [4H]. Gate column order is input, forget,
    /// candidate, output.
    pub fn init_lstm(&mut self, prefix: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) {
        let ki = 1.0 / (input as f64).sqrt();
        let kh = 1.0 / (hidden as f64).sqrt();
        self.insert(
            format!("{prefix}.w_ih"),
            Tensor::rand_uniform(rng, &[input, 4 * hidden], -ki, ki),
        );
        self.insert(
            format!("{prefix}.w_hh"),
            Tensor::rand_uniform(rng, &[hidden, 4 * hidden], -kh, kh),
        );
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[4 * hidden]));
    }
}

/// Node ids of a ParameterSet leafed onto one tape, looked up by name.
pub struct TapeParams {
    ids: IndexMap<String, NodeId>,
}

impl TapeParams {
    /// Record every parameter as a leaf on the tape.
    pub fn leaf_all(tape: &mut Tape, params: &ParameterSet) -> Self {
        let mut ids = IndexMap::new();
        for (name, value) in params.iter() {
            ids.insert(name.to_string(), tape.leaf(value.clone()));
        }
        Self { ids }
    }

    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// input . W + b for a rank-2 input of row vectors.
pub fn linear_forward(
    tape: &mut Tape,
    ids: &TapeParams,
    prefix: &str,
    input: NodeId,
) -> Result<NodeId> {
    let w = ids.id(&format!("{prefix}.w"));
    let b = ids.id(&format!("{prefix}.b"));
    let xw = tape.matmul(input, w)?;
    tape.add_bias(xw, b)
}

/// One LSTM cell update: sigmoid input/forget/output gates, tanh candidate
/// and output squashing. Pure function of its inputs.
pub fn lstm_step(
    tape: &mut Tape,
    ids: &TapeParams,
    prefix: &str,
    x_t: NodeId,
    hidden: NodeId,
    cell: NodeId,
) -> Result<(NodeId, NodeId)> {
    let w_ih = ids.id(&format!("{prefix}.w_ih"));
    let w_hh = ids.id(&format!("{prefix}.w_hh"));
    let b = ids.id(&format!("{prefix}.b"));

    let h4 = tape.value(w_hh).shape()[1];
    if h4 % 4 != 0 {
        return Err(Error::ShapeMismatch {
            context: "lstm_step gate width",
            left: tape.value(w_hh).shape().to_vec(),
            right: vec![4],
        });
    }
    let h = h4 / 4;

    let xi = tape.matmul(x_t, w_ih)?;
    let hh = tape.matmul(hidden, w_hh)?;
    let pre = tape.add(xi, hh)?;
    let gates = tape.add_bias(pre, b)?;

    let i_pre = tape.slice_cols(gates, 0, h)?;
    let f_pre = tape.slice_cols(gates, h, h)?;
    let g_pre = tape.slice_cols(gates, 2 * h, h)?;
    let o_pre = tape.slice_cols(gates, 3 * h, h)?;

    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let g = tape.tanh(g_pre);
    let o = tape.sigmoid(o_pre);

    let fc = tape.mul(f, cell)?;
    let ig = tape.mul(i, g)?;
    let cell_next = tape.add(fc, ig)?;
    let ct = tape.tanh(cell_next);
    let hidden_next = tape.mul(o, ct)?;
    Ok((hidden_next, cell_next))
}

/// Mean of squared elementwise differences.
pub fn mse_loss(tape: &mut Tape, pred: NodeId, target: NodeId) -> Result<NodeId> {
    let n = tape.value(pred).len();
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum_all(sq);
    Ok(tape.scale(total, 1.0 / n as f64))
}

/// Closed-form KL divergence of a diagonal Gaussian against the standard
/// normal: -1/2 * sum(1 + logvar - mu^2 - exp(logvar)), summed over latent
/// dimensions and averaged over the batch (leading) dimension.
pub fn kl_divergence(tape: &mut Tape, mu: NodeId, logvar: NodeId) -> Result<NodeId> {
    if tape.value(mu).shape() != tape.value(logvar).shape() {
        return Err(Error::ShapeMismatch {
            context: "kl_divergence",
            left: tape.value(mu).shape().to_vec(),
            right: tape.value(logvar).shape().to_vec(),
        });
    }
    let batch = tape.value(mu).rows();
    let mu2 = tape.mul(mu, mu)?;
    let ev = tape.exp(logvar);
    let one_plus = tape.add_const(logvar, 1.0);
    let t1 = tape.sub(one_plus, mu2)?;
    let inner = tape.sub(t1, ev)?;
    let total = tape.sum_all(inner);
    Ok(tape.scale(total, -0.5 / batch as f64))
}
