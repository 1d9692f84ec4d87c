//! Feedforward networks, interval bound propagation, stability pruning and
//! grouping of unstable ReLU neurons into blocks.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relation::Interval;

pub const NETWORK_FORMAT: &str = "qcert-network/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    /// Saturation at +-1.
    Sat,
    Identity,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Sat => v.clamp(-1.0, 1.0),
            Activation::Identity => v,
        }
    }
}

/// Hidden layer `theta = sigma(W theta_prev + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
    /// Neurons whose activation is replaced by the identity.
    pub identity: Vec<bool>,
}

impl Layer {
    pub fn new(weights: DMatrix<f64>, bias: DVector<f64>, activation: Activation) -> Self {
        let n = weights.nrows();
        Self {
            weights,
            bias,
            activation,
            identity: vec![false; n],
        }
    }

    pub fn width(&self) -> usize {
        self.weights.nrows()
    }

    /// Effective activation of neuron `i`.
    pub fn activation_of(&self, i: usize) -> Activation {
        if self.identity[i] {
            Activation::Identity
        } else {
            self.activation
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub input_dim: usize,
    pub hidden: Vec<Layer>,
    pub output_weights: DMatrix<f64>,
    pub output_bias: DVector<f64>,
}

/// Pre- and postactivations of every hidden layer for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub pre: Vec<DVector<f64>>,
    pub post: Vec<DVector<f64>>,
    pub output: DVector<f64>,
}

impl Network {
    pub fn new(input_dim: usize, hidden: Vec<Layer>, output_weights: DMatrix<f64>, output_bias: DVector<f64>) -> Result<Self> {
        let net = Self {
            input_dim,
            hidden,
            output_weights,
            output_bias,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        let mut prev = self.input_dim;
        let check = |what: String, w: &DMatrix<f64>, b: &DVector<f64>, prev: usize| -> Result<()> {
            if w.ncols() != prev {
                return Err(Error::parse(&what, format!("weights have {} columns, expected {prev}", w.ncols())));
            }
            if b.len() != w.nrows() {
                return Err(Error::parse(&what, format!("bias has length {}, expected {}", b.len(), w.nrows())));
            }
            if w.iter().chain(b.iter()).any(|v| !v.is_finite()) {
                return Err(Error::parse(&what, "non-finite entry"));
            }
            Ok(())
        };
        for (l, layer) in self.hidden.iter().enumerate() {
            check(format!("layer {}", l + 1), &layer.weights, &layer.bias, prev)?;
            if layer.identity.len() != layer.width() {
                return Err(Error::parse(format!("layer {}", l + 1), "identity mask length differs from width"));
            }
            prev = layer.width();
        }
        check("output layer".into(), &self.output_weights, &self.output_bias, prev)
    }

    pub fn output_dim(&self) -> usize {
        self.output_weights.nrows()
    }

    pub fn depth(&self) -> usize {
        self.hidden.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.hidden.iter().map(Layer::width).collect()
    }

    pub fn forward_trace(&self, x: &[f64]) -> ForwardTrace {
        assert_eq!(x.len(), self.input_dim, "input dimension");
        let mut theta = DVector::from_column_slice(x);
        let mut pre = Vec::with_capacity(self.depth());
        let mut post = Vec::with_capacity(self.depth());
        for layer in &self.hidden {
            let phi = &layer.weights * &theta + &layer.bias;
            theta = DVector::from_iterator(phi.len(), phi.iter().enumerate().map(|(i, v)| layer.activation_of(i).apply(*v)));
            pre.push(phi);
            post.push(theta.clone());
        }
        let output = &self.output_weights * &theta + &self.output_bias;
        ForwardTrace { pre, post, output }
    }

    pub fn forward_eval(&self, x: &[f64]) -> DVector<f64> {
        self.forward_trace(x).output
    }

    /// The sub-network whose output is the postactivation of hidden layer
    /// `l` (0-based).
    pub fn prefix(&self, l: usize) -> Network {
        let n = self.hidden[l].width();
        Network {
            input_dim: self.input_dim,
            hidden: self.hidden[..=l].to_vec(),
            output_weights: DMatrix::identity(n, n),
            output_bias: DVector::zeros(n),
        }
    }

    /// Weights and bias feeding hidden layer `l + 1`, or the output map for
    /// the last hidden layer.
    pub fn next_affine(&self, l: usize) -> (&DMatrix<f64>, &DVector<f64>) {
        match self.hidden.get(l + 1) {
            Some(next) => (&next.weights, &next.bias),
            None => (&self.output_weights, &self.output_bias),
        }
    }
}

// --- file formats --------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    activation: Activation,
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    identity: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AffineRecord {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkFile {
    format: String,
    input_dim: usize,
    layers: Vec<LayerRecord>,
    output: AffineRecord,
}

fn matrix_from_rows(rows: &[Vec<f64>], cols: usize, loc: &str) -> Result<DMatrix<f64>> {
    if let Some((k, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != cols) {
        return Err(Error::parse(loc, format!("row {k} has {} entries, expected {cols}", r.len())));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl Network {
    /// Parses the native JSON format.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let f: NetworkFile = serde_json::from_str(text).map_err(|e| Error::parse("network", e.to_string()))?;
        if f.format != NETWORK_FORMAT {
            return Err(Error::parse("network.format", format!("expected '{NETWORK_FORMAT}', found '{}'", f.format)));
        }
        let mut prev = f.input_dim;
        let mut hidden = Vec::with_capacity(f.layers.len());
        for (l, rec) in f.layers.into_iter().enumerate() {
            let loc = format!("layers[{l}]");
            let w = matrix_from_rows(&rec.weights, prev, &loc)?;
            let mut layer = Layer::new(w, DVector::from_vec(rec.bias), rec.activation);
            for i in rec.identity {
                if i >= layer.width() {
                    return Err(Error::parse(&loc, format!("identity index {i} out of range")));
                }
                layer.identity[i] = true;
            }
            prev = layer.width();
            hidden.push(layer);
        }
        let w = matrix_from_rows(&f.output.weights, prev, "output")?;
        Network::new(f.input_dim, hidden, w, DVector::from_vec(f.output.bias))
    }

    pub fn to_json(&self) -> Result<String> {
        let f = NetworkFile {
            format: NETWORK_FORMAT.into(),
            input_dim: self.input_dim,
            layers: self
                .hidden
                .iter()
                .map(|l| LayerRecord {
                    activation: l.activation,
                    weights: rows_of(&l.weights),
                    bias: l.bias.iter().copied().collect(),
                    identity: (0..l.width()).filter(|&i| l.identity[i]).collect(),
                })
                .collect(),
            output: AffineRecord {
                weights: rows_of(&self.output_weights),
                bias: self.output_bias.iter().copied().collect(),
            },
        };
        let mut s = serde_json::to_string_pretty(&f)?;
        s.push('\n');
        Ok(s)
    }

    /// Parses the comma-separated layered `.nnet` format. Input and output
    /// normalization is folded into the first and last affine maps; the
    /// declared input range is returned alongside.
    pub fn from_nnet_str(text: &str) -> Result<(Self, InputBox)> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim_start().starts_with("//") && !l.trim().is_empty());
        let mut next_values = |what: &str| -> Result<(usize, Vec<f64>)> {
            let (k, line) = lines
                .next()
                .ok_or_else(|| Error::parse("nnet", format!("unexpected end of file reading {what}")))?;
            let vals = line
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::parse(format!("nnet line {}", k + 1), format!("{what}: {e}")))?;
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::parse(format!("nnet line {}", k + 1), "non-finite entry"));
            }
            Ok((k + 1, vals))
        };
        let (line, header) = next_values("header")?;
        if header.len() < 4 {
            return Err(Error::parse(format!("nnet line {line}"), "header needs 4 entries"));
        }
        let n_layers = header[0] as usize;
        let n_in = header[1] as usize;
        let (line, sizes) = next_values("layer sizes")?;
        let sizes: Vec<usize> = sizes.iter().map(|&v| v as usize).collect();
        if sizes.len() != n_layers + 1 || sizes[0] != n_in {
            return Err(Error::parse(format!("nnet line {line}"), "layer sizes disagree with header"));
        }
        next_values("symmetric flag")?;
        let (_, in_min) = next_values("input minimums")?;
        let (_, in_max) = next_values("input maximums")?;
        let (_, means) = next_values("means")?;
        let (line, ranges) = next_values("ranges")?;
        if in_min.len() != n_in || in_max.len() != n_in || means.len() != n_in + 1 || ranges.len() != n_in + 1 {
            return Err(Error::parse(format!("nnet line {line}"), "normalization vectors have wrong length"));
        }
        let mut affine = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (rows, cols) = (sizes[l + 1], sizes[l]);
            let mut w = DMatrix::zeros(rows, cols);
            for i in 0..rows {
                let (line, r) = next_values("weights")?;
                if r.len() != cols {
                    return Err(Error::parse(
                        format!("nnet line {line}"),
                        format!("layer {} weight row has {} entries, expected {cols}", l + 1, r.len()),
                    ));
                }
                for (j, v) in r.into_iter().enumerate() {
                    w[(i, j)] = v;
                }
            }
            let mut b = DVector::zeros(rows);
            for i in 0..rows {
                let (line, r) = next_values("bias")?;
                if r.len() != 1 {
                    return Err(Error::parse(format!("nnet line {line}"), "bias rows hold one value"));
                }
                b[i] = r[0];
            }
            affine.push((w, b));
        }
        // x_norm = (x - mean) / range, y = y_norm * range_out + mean_out
        let (w1, b1) = &mut affine[0];
        for j in 0..n_in {
            let r = ranges[j];
            if r == 0.0 {
                return Err(Error::parse("nnet", format!("zero input range at {j}")));
            }
            for i in 0..w1.nrows() {
                let v = w1[(i, j)];
                b1[i] -= v * means[j] / r;
                w1[(i, j)] = v / r;
            }
        }
        let (wl, bl) = affine.last_mut().expect("at least one layer");
        *wl *= ranges[n_in];
        bl.apply(|v| *v = *v * ranges[n_in] + means[n_in]);

        let (wo, bo) = affine.pop().expect("output layer");
        let hidden = affine.into_iter().map(|(w, b)| Layer::new(w, b, Activation::Relu)).collect();
        let net = Network::new(n_in, hidden, wo, bo)?;
        Ok((net, InputBox::new(in_min, in_max)?))
    }

    /// Loads by extension: `.nnet` or native JSON.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let wrap = |e: Error| match e {
            Error::Parse { location, message } => Error::Parse {
                location: format!("{}: {location}", path.display()),
                message,
            },
            e => e,
        };
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("nnet")) {
            Self::from_nnet_str(&text).map(|(n, _)| n).map_err(wrap)
        } else {
            Self::from_json_str(&text).map_err(wrap)
        }
    }

    /// Random ReLU network with weights uniform in `[-1, 1]` and biases
    /// uniform in `[-0.5, 0.5]`.
    pub fn random_relu(input_dim: usize, hidden: &[usize], output_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut prev = input_dim;
        let mut layers = Vec::with_capacity(hidden.len());
        for &n in hidden {
            let w = DMatrix::from_fn(n, prev, |_, _| rng.gen_range(-1.0..=1.0));
            let b = DVector::from_fn(n, |_, _| rng.gen_range(-0.5..=0.5));
            layers.push(Layer::new(w, b, Activation::Relu));
            prev = n;
        }
        let w = DMatrix::from_fn(output_dim, prev, |_, _| rng.gen_range(-1.0..=1.0));
        let b = DVector::from_fn(output_dim, |_, _| rng.gen_range(-0.5..=0.5));
        Network::new(input_dim, layers, w, b).expect("shapes are consistent")
    }
}

/// Hyperrectangular input set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl InputBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        let b = Self { lo, hi };
        b.validate()?;
        Ok(b)
    }

    pub fn uniform(dim: usize, lo: f64, hi: f64) -> Self {
        Self::new(vec![lo; dim], vec![hi; dim]).expect("valid box")
    }

    pub fn validate(&self) -> Result<()> {
        if self.lo.len() != self.hi.len() {
            return Err(Error::Invalid("input box bounds differ in length".into()));
        }
        for (k, (l, h)) in self.lo.iter().zip(&self.hi).enumerate() {
            if !(l.is_finite() && h.is_finite() && l <= h) {
                return Err(Error::Invalid(format!("input box coordinate {k} is [{l}, {h}]")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn intervals(&self) -> Vec<Interval> {
        self.lo.iter().zip(&self.hi).map(|(&l, &h)| Interval::new(l, h)).collect()
    }

    /// Uniform random points in the box.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                self.lo
                    .iter()
                    .zip(&self.hi)
                    .map(|(&l, &h)| if l == h { l } else { rng.gen_range(l..=h) })
                    .collect()
            })
            .collect()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let b: Self = toml::from_str(text).map_err(|e| Error::parse("input box", e.to_string()))?;
        b.validate()?;
        Ok(b)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

// --- interval bounds -----------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stability {
    Inactive,
    Active,
    Unstable,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronBounds {
    pub pre: Interval,
    pub post: Interval,
    /// Present for ReLU neurons only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stability: Option<Stability>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsState {
    pub layers: Vec<Vec<NeuronBounds>>,
    pub output: Vec<Interval>,
}

impl BoundsState {
    pub fn neuron(&self, id: NeuronId) -> &NeuronBounds {
        &self.layers[id.layer][id.index]
    }

    pub fn count(&self, s: Stability) -> usize {
        self.layers.iter().flatten().filter(|b| b.stability == Some(s)).count()
    }
}

fn affine_interval(w: &DMatrix<f64>, b: &DVector<f64>, input: &[Interval]) -> Vec<Interval> {
    (0..w.nrows())
        .map(|i| {
            let (mut lo, mut hi) = (b[i], b[i]);
            for (j, iv) in input.iter().enumerate() {
                let a = w[(i, j)];
                if a >= 0.0 {
                    lo += a * iv.lo;
                    hi += a * iv.hi;
                } else {
                    lo += a * iv.hi;
                    hi += a * iv.lo;
                }
            }
            Interval::new(lo, hi)
        })
        .collect()
}

fn neuron_bounds(act: Activation, pre: Interval) -> NeuronBounds {
    let post = Interval::new(act.apply(pre.lo), act.apply(pre.hi));
    let stability = (act == Activation::Relu).then_some({
        if pre.hi <= 0.0 {
            Stability::Inactive
        } else if pre.lo >= 0.0 {
            Stability::Active
        } else {
            Stability::Unstable
        }
    });
    NeuronBounds { pre, post, stability }
}

/// Interval bound propagation through the network.
pub fn interval_propagate(net: &Network, input: &InputBox) -> Result<BoundsState> {
    interval_propagate_refined(net, input, &[])
}

/// Interval bound propagation where the preactivation intervals of the
/// first `refined.len()` layers are intersected with the given ones.
pub fn interval_propagate_refined(net: &Network, input: &InputBox, refined: &[Vec<Interval>]) -> Result<BoundsState> {
    if input.dim() != net.input_dim {
        return Err(Error::Precondition(format!(
            "input box has dimension {}, network expects {}",
            input.dim(),
            net.input_dim
        )));
    }
    let mut cur = input.intervals();
    let mut layers = Vec::with_capacity(net.depth());
    for (l, layer) in net.hidden.iter().enumerate() {
        let mut pre = affine_interval(&layer.weights, &layer.bias, &cur);
        if let Some(r) = refined.get(l) {
            if r.len() != pre.len() {
                return Err(Error::Precondition(format!("refined bounds for layer {l} have wrong length")));
            }
            for (p, t) in pre.iter_mut().zip(r) {
                let (lo, hi) = (p.lo.max(t.lo), p.hi.min(t.hi));
                if lo > hi {
                    return Err(Error::Inconsistent(format!(
                        "layer {l}: refined interval [{}, {}] misses [{}, {}]",
                        t.lo, t.hi, p.lo, p.hi
                    )));
                }
                *p = Interval::new(lo, hi);
            }
        }
        let bounds: Vec<NeuronBounds> = pre
            .into_iter()
            .enumerate()
            .map(|(i, p)| neuron_bounds(layer.activation_of(i), p))
            .collect();
        cur = bounds.iter().map(|b| b.post).collect();
        layers.push(bounds);
    }
    let output = affine_interval(&net.output_weights, &net.output_bias, &cur);
    Ok(BoundsState { layers, output })
}

// --- pruning -------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct Pruned {
    pub net: Network,
    /// `kept[l][k]` is the original index of neuron `k` of reduced layer `l`.
    pub kept: Vec<Vec<usize>>,
    /// Reduced indices newly switched to the identity, per layer.
    pub identity: Vec<Vec<usize>>,
    pub original_widths: Vec<usize>,
}

impl Pruned {
    /// Restricts a bounds state of the original network to the kept neurons.
    pub fn restrict(&self, bounds: &BoundsState) -> BoundsState {
        BoundsState {
            layers: self
                .kept
                .iter()
                .enumerate()
                .map(|(l, kept)| kept.iter().map(|&i| bounds.layers[l][i]).collect())
                .collect(),
            output: bounds.output.clone(),
        }
    }

    /// Number of neurons removed.
    pub fn removed(&self) -> usize {
        self.original_widths.iter().sum::<usize>() - self.kept.iter().map(Vec::len).sum::<usize>()
    }
}

/// Removes always-inactive ReLU neurons and turns always-active ones into
/// identities. The reduced network agrees with the original on the box the
/// bounds were computed for.
pub fn prune_stable(net: &Network, bounds: &BoundsState) -> Result<Pruned> {
    if bounds.layers.len() != net.depth() || bounds.layers.iter().zip(&net.hidden).any(|(b, l)| b.len() != l.width()) {
        return Err(Error::Precondition("bounds do not match the network".into()));
    }
    let mut hidden = Vec::with_capacity(net.depth());
    let mut kept_all = Vec::with_capacity(net.depth());
    let mut identity_all = Vec::with_capacity(net.depth());
    let mut prev_kept: Vec<usize> = (0..net.input_dim).collect();
    for (l, layer) in net.hidden.iter().enumerate() {
        let kept: Vec<usize> = (0..layer.width())
            .filter(|&i| !(layer.activation_of(i) == Activation::Relu && bounds.layers[l][i].stability == Some(Stability::Inactive)))
            .collect();
        let w = layer.weights.select_rows(&kept).select_columns(&prev_kept);
        let b = layer.bias.select_rows(&kept);
        let mut reduced = Layer::new(w, b, layer.activation);
        let mut ids = Vec::new();
        for (k, &i) in kept.iter().enumerate() {
            reduced.identity[k] = layer.identity[i];
            if layer.activation_of(i) == Activation::Relu && bounds.layers[l][i].stability == Some(Stability::Active) {
                reduced.identity[k] = true;
                ids.push(k);
            }
        }
        hidden.push(reduced);
        identity_all.push(ids);
        prev_kept = kept.clone();
        kept_all.push(kept);
    }
    let ow = net.output_weights.select_columns(&prev_kept);
    let pruned = Network::new(net.input_dim, hidden, ow, net.output_bias.clone())?;
    Ok(Pruned {
        net: pruned,
        kept: kept_all,
        identity: identity_all,
        original_widths: net.widths(),
    })
}

// --- blocks --------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockStrategy {
    Sequential,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockPartition {
    pub blocks: Vec<Vec<NeuronId>>,
    pub s_max: usize,
}

impl BlockPartition {
    pub fn sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(Vec::len).collect()
    }
}

/// Unstable ReLU neurons in layer-major order.
pub fn unstable_neurons(net: &Network, bounds: &BoundsState) -> Vec<NeuronId> {
    let mut out = Vec::new();
    for (l, layer) in net.hidden.iter().enumerate() {
        for i in 0..layer.width() {
            if layer.activation_of(i) == Activation::Relu && bounds.layers[l][i].stability == Some(Stability::Unstable) {
                out.push(NeuronId { layer: l, index: i });
            }
        }
    }
    out
}

fn cosine(a: nalgebra::DVectorView<f64>, b: nalgebra::DVectorView<f64>) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(&b) / (na * nb)
    }
}

/// Groups the unstable ReLU neurons into blocks of at most `s_max`.
pub fn group_blocks(net: &Network, bounds: &BoundsState, s_max: usize, strategy: BlockStrategy) -> Result<BlockPartition> {
    if s_max == 0 {
        return Err(Error::Precondition("s_max must be at least 1".into()));
    }
    let unstable = unstable_neurons(net, bounds);
    let blocks = match strategy {
        BlockStrategy::Sequential => unstable.chunks(s_max).map(<[NeuronId]>::to_vec).collect(),
        BlockStrategy::Cosine => {
            let mut blocks = Vec::new();
            for l in 0..net.depth() {
                let ids: Vec<NeuronId> = unstable.iter().copied().filter(|n| n.layer == l).collect();
                blocks.extend(cosine_groups(&net.hidden[l].weights, &ids, s_max));
            }
            blocks
        }
    };
    Ok(BlockPartition { blocks, s_max })
}

/// Greedy merging by descending similarity of incoming weight rows, ties
/// by lower index pair; merges never exceed `s_max`.
fn cosine_groups(w: &DMatrix<f64>, ids: &[NeuronId], s_max: usize) -> Vec<Vec<NeuronId>> {
    let n = ids.len();
    let rows: Vec<DVector<f64>> = ids.iter().map(|id| w.row(id.index).transpose()).collect();
    let mut pairs = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for a in 0..n {
        for b in a + 1..n {
            pairs.push((cosine(rows[a].as_view(), rows[b].as_view()), a, b));
        }
    }
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut group: Vec<usize> = (0..n).collect();
    let mut members: Vec<Vec<usize>> = (0..n).map(|k| vec![k]).collect();
    for (_, a, b) in pairs {
        let (ga, gb) = (group[a], group[b]);
        if ga == gb || members[ga].len() + members[gb].len() > s_max {
            continue;
        }
        let moved = std::mem::take(&mut members[gb]);
        for &k in &moved {
            group[k] = ga;
        }
        members[ga].extend(moved);
    }
    let mut out: Vec<Vec<NeuronId>> = members
        .into_iter()
        .filter(|m| !m.is_empty())
        .map(|mut m| {
            m.sort_unstable();
            m.into_iter().map(|k| ids[k]).collect()
        })
        .collect();
    out.sort();
    out
}

// --- bounds report -------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronRecord {
    pub layer: usize,
    pub index: usize,
    pub pre: Interval,
    pub post: Interval,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stability: Option<Stability>,
}

/// Flat per-neuron listing of a bounds state.
pub fn bounds_records(bounds: &BoundsState) -> Vec<NeuronRecord> {
    bounds
        .layers
        .iter()
        .enumerate()
        .flat_map(|(l, layer)| {
            layer.iter().enumerate().map(move |(i, b)| NeuronRecord {
                layer: l,
                index: i,
                pre: b.pre,
                post: b.post,
                stability: b.stability,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_neuron(act: Activation, bias: f64) -> Network {
        Network::new(
            1,
            vec![Layer::new(DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, bias), act)],
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(1),
        )
        .unwrap()
    }

    #[test]
    fn forward_examples() {
        let relu = one_neuron(Activation::Relu, 0.0);
        assert_eq!(relu.forward_eval(&[2.0])[0], 2.0);
        assert_eq!(relu.forward_eval(&[-3.0])[0], 0.0);
        assert_eq!(one_neuron(Activation::Tanh, 0.0).forward_eval(&[0.0])[0], 0.0);
    }

    #[test]
    fn forward_matches_hand_rolled_recursion() {
        let net = Network::random_relu(3, &[5, 4], 2, 11);
        for x in InputBox::uniform(3, -2.0, 2.0).sample(100, 1) {
            let mut v = x.clone();
            for layer in &net.hidden {
                let mut next = vec![0.0; layer.width()];
                for (i, out) in next.iter_mut().enumerate() {
                    let mut s = layer.bias[i];
                    for (j, vj) in v.iter().enumerate() {
                        s += layer.weights[(i, j)] * vj;
                    }
                    *out = if s > 0.0 { s } else { 0.0 };
                }
                v = next;
            }
            let y = net.forward_eval(&x);
            for i in 0..2 {
                let mut s = net.output_bias[i];
                for (j, vj) in v.iter().enumerate() {
                    s += net.output_weights[(i, j)] * vj;
                }
                assert!((s - y[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ibp_examples() {
        let w = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let net = Network::new(
            1,
            vec![Layer::new(w, DVector::zeros(2), Activation::Relu)],
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::zeros(1),
        )
        .unwrap();
        let b = interval_propagate(&net, &InputBox::uniform(1, -1.0, 1.0)).unwrap();
        for n in &b.layers[0] {
            assert_eq!(n.pre, Interval::new(-1.0, 1.0));
            assert_eq!(n.post, Interval::new(0.0, 1.0));
            assert_eq!(n.stability, Some(Stability::Unstable));
        }
        let b = interval_propagate(&one_neuron(Activation::Relu, 5.0), &InputBox::uniform(1, -1.0, 1.0)).unwrap();
        assert_eq!(b.layers[0][0].pre, Interval::new(4.0, 6.0));
        assert_eq!(b.layers[0][0].stability, Some(Stability::Active));
    }

    #[test]
    fn ibp_contains_samples() {
        let net = Network::random_relu(3, &[6, 5], 2, 4);
        let bx = InputBox::uniform(3, -1.0, 1.0);
        let b = interval_propagate(&net, &bx).unwrap();
        for x in bx.sample(10_000, 2) {
            let t = net.forward_trace(&x);
            for (l, layer) in b.layers.iter().enumerate() {
                for (i, nb) in layer.iter().enumerate() {
                    assert!(t.pre[l][i] >= nb.pre.lo - 1e-9 && t.pre[l][i] <= nb.pre.hi + 1e-9);
                    assert!(t.post[l][i] >= nb.post.lo - 1e-9 && t.post[l][i] <= nb.post.hi + 1e-9);
                }
            }
            for (i, iv) in b.output.iter().enumerate() {
                assert!(t.output[i] >= iv.lo - 1e-9 && t.output[i] <= iv.hi + 1e-9);
            }
        }
    }

    fn net_with_stable_neurons() -> Network {
        // neuron 0 inactive (bias -5), neuron 1 active (bias +5), neuron 2 unstable
        let w1 = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, -1.0, 1.0, 0.5]);
        let b1 = DVector::from_column_slice(&[-5.0, 5.0, 0.0]);
        let w2 = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, -1.0, 0.5, -1.0, 1.0]);
        let b2 = DVector::from_column_slice(&[0.1, -0.1]);
        Network::new(
            2,
            vec![Layer::new(w1, b1, Activation::Relu), Layer::new(w2, b2, Activation::Relu)],
            DMatrix::from_row_slice(1, 2, &[1.0, -1.0]),
            DVector::zeros(1),
        )
        .unwrap()
    }

    #[test]
    fn pruning_preserves_outputs() {
        let net = net_with_stable_neurons();
        let bx = InputBox::uniform(2, -1.0, 1.0);
        let b = interval_propagate(&net, &bx).unwrap();
        let p = prune_stable(&net, &b).unwrap();
        assert_eq!(p.kept[0], vec![1, 2]);
        assert_eq!(p.identity[0], vec![0]);
        assert!(p.net.hidden[0].identity[0]);
        assert_eq!(p.removed(), b.count(Stability::Inactive));
        for x in bx.sample(1000, 3) {
            let (a, r) = (net.forward_eval(&x), p.net.forward_eval(&x));
            assert!((a - r).amax() <= 1e-12);
        }
    }

    #[test]
    fn all_unstable_net_is_unchanged() {
        let w = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let net = Network::new(
            1,
            vec![Layer::new(w, DVector::zeros(2), Activation::Relu)],
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::zeros(1),
        )
        .unwrap();
        let b = interval_propagate(&net, &InputBox::uniform(1, -1.0, 1.0)).unwrap();
        let p = prune_stable(&net, &b).unwrap();
        assert_eq!(p.net, net);
        assert_eq!(p.removed(), 0);
    }

    #[test]
    fn restricted_bounds_follow_kept_neurons() {
        let net = net_with_stable_neurons();
        let b = interval_propagate(&net, &InputBox::uniform(2, -1.0, 1.0)).unwrap();
        let p = prune_stable(&net, &b).unwrap();
        let r = p.restrict(&b);
        assert_eq!(r.layers[0].len(), 2);
        assert_eq!(r.layers[0][1], b.layers[0][2]);
    }

    #[test]
    fn sequential_blocks() {
        let w = DMatrix::from_fn(7, 1, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 });
        let net = Network::new(
            1,
            vec![Layer::new(w, DVector::zeros(7), Activation::Relu)],
            DMatrix::from_element(1, 7, 1.0),
            DVector::zeros(1),
        )
        .unwrap();
        let b = interval_propagate(&net, &InputBox::uniform(1, -1.0, 1.0)).unwrap();
        let p = group_blocks(&net, &b, 3, BlockStrategy::Sequential).unwrap();
        assert_eq!(p.sizes(), vec![3, 3, 1]);
        let p = group_blocks(&net, &b, 1, BlockStrategy::Sequential).unwrap();
        assert_eq!(p.sizes(), vec![1; 7]);
        assert!(group_blocks(&net, &b, 0, BlockStrategy::Cosine).is_err());
    }

    #[test]
    fn cosine_groups_identical_rows() {
        let w = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.1, 2.0, 0.0]);
        let net = Network::new(
            2,
            vec![Layer::new(w, DVector::zeros(4), Activation::Relu)],
            DMatrix::from_element(1, 4, 1.0),
            DVector::zeros(1),
        )
        .unwrap();
        let b = interval_propagate(&net, &InputBox::uniform(2, -1.0, 1.0)).unwrap();
        let p = group_blocks(&net, &b, 2, BlockStrategy::Cosine).unwrap();
        let id = |i| NeuronId { layer: 0, index: i };
        assert!(p.blocks.contains(&vec![id(0), id(3)]));
        assert!(p.blocks.contains(&vec![id(1), id(2)]));
    }

    #[test]
    fn json_round_trip() {
        let mut net = Network::random_relu(2, &[3, 2], 2, 5);
        net.hidden[1].identity[1] = true;
        let back = Network::from_json_str(&net.to_json().unwrap()).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn json_shape_errors() {
        let net = Network::random_relu(2, &[3], 1, 5);
        let text = net.to_json().unwrap().replacen("\"output\": {\n    \"weights\": [\n      [", "\"output\": {\n    \"weights\": [\n      [0.5, ", 1);
        assert!(matches!(Network::from_json_str(&text), Err(Error::Parse { .. })));
    }

    #[test]
    fn nnet_normalization_is_folded() {
        // one hidden layer of 2 neurons on a scalar input, linear output
        let text = "// tiny\n2,1,1,2,\n1,2,1,\n0,\n-1,\n1,\n0.5,2.0,\n2.0,4.0,\n1.0,\n-1.0,\n0.0,\n0.0,\n1.0,1.0,\n0.25,\n";
        let (net, bx) = Network::from_nnet_str(text).unwrap();
        assert_eq!(bx, InputBox::new(vec![-1.0], vec![1.0]).unwrap());
        for x in [-1.0, -0.3, 0.0, 0.7, 1.0] {
            let xn = (x - 0.5) / 2.0;
            let yn = f64::max(xn, 0.0) + f64::max(-xn, 0.0) + 0.25;
            let want = yn * 4.0 + 2.0;
            assert!((net.forward_eval(&[x])[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn nnet_rejects_short_rows() {
        let text = "2,1,1,2,\n1,2,1,\n0,\n-1,\n1,\n0.5,2.0,\n2.0,4.0,\n1.0,\n-1.0,\n0.0,\n0.0,\n1.0,\n0.25,\n";
        let err = Network::from_nnet_str(text).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
    }
}
