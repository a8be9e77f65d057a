//! The two-component model: an encoder stack feeding a language-model stack,
//! each a sequence of dense layers computing `x -> act(W x + b)`.

mod archive;

pub use archive::{decode_model, encode_model, load_model, manifest, save_model, MODEL_MAGIC, MODEL_VERSION};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{dot, ActivationNorms, Matrix, NormAccumulator, WeightMatrix};

/// Which half of the model a layer belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ComponentTag {
    Encoder,
    Lm,
}

impl ComponentTag {
    pub fn code(self) -> u8 {
        match self {
            ComponentTag::Encoder => 0,
            ComponentTag::Lm => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ComponentTag::Encoder),
            1 => Some(ComponentTag::Lm),
            _ => None,
        }
    }
}

impl fmt::Display for ComponentTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ComponentTag::Encoder => "ENCODER",
            ComponentTag::Lm => "LM",
        })
    }
}

impl FromStr for ComponentTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "ENCODER" => Ok(ComponentTag::Encoder),
            "LM" => Ok(ComponentTag::Lm),
            _ => Err(Error::config(format!("unknown component `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
        }
    }
}

/// One prunable layer. Biases are never pruned.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub component: ComponentTag,
    pub weight: WeightMatrix,
    pub bias: Option<Vec<f64>>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(
        component: ComponentTag,
        weight: WeightMatrix,
        bias: Option<Vec<f64>>,
        activation: Activation,
    ) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != weight.rows() {
                return Err(Error::structural(format!(
                    "layer `{}` bias has length {}, expected {}",
                    weight.layer_id(),
                    b.len(),
                    weight.rows()
                )));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical {
                    layer: weight.layer_id().to_owned(),
                });
            }
        }
        Ok(Self {
            component,
            weight,
            bias,
            activation,
        })
    }

    pub fn id(&self) -> &str {
        self.weight.layer_id()
    }

    /// `act(x W^T + b)` for a batch `x` with one sample per row.
    fn apply(&self, x: &Matrix) -> Matrix {
        let w = &self.weight;
        let (n, out) = (x.rows(), w.rows());
        let mut data = Vec::with_capacity(n * out);
        for s in 0..n {
            let xs = x.row(s);
            for i in 0..out {
                let z = dot(w.row(i), xs);
                let b = self.bias.as_ref().map_or(0.0, |b| b[i]);
                data.push(self.activation.apply(z + b));
            }
        }
        Matrix::new(n, out, data).expect("shape follows from layer dims")
    }
}

/// An ordered stack of encoder layers followed by language-model layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    input_dim: usize,
    layers: Vec<Layer>,
}

impl ModelGraph {
    /// Validates dimension chaining, id uniqueness, and that the graph is
    /// one or more ENCODER layers followed by one or more LM layers.
    pub fn new(input_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::structural("input_dim must be positive"));
        }
        if layers.len() < 2 {
            return Err(Error::structural(format!(
                "a model needs at least 2 layers, got {}",
                layers.len()
            )));
        }
        let mut width = input_dim;
        for (k, layer) in layers.iter().enumerate() {
            if layer.weight.cols() != width {
                return Err(Error::structural(format!(
                    "layer {k} (`{}`) expects input width {}, previous width is {width}",
                    layer.id(),
                    layer.weight.cols()
                )));
            }
            width = layer.weight.rows();
            if layers[..k].iter().any(|l| l.id() == layer.id()) {
                return Err(Error::structural(format!("duplicate layer id `{}`", layer.id())));
            }
        }
        if layers[0].component != ComponentTag::Encoder {
            return Err(Error::structural("the first layer must belong to the encoder"));
        }
        if layers.last().map(|l| l.component) != Some(ComponentTag::Lm) {
            return Err(Error::structural("the last layer must belong to the LM"));
        }
        if layers.windows(2).any(|p| p[0].component > p[1].component) {
            return Err(Error::structural("encoder layers must all precede LM layers"));
        }
        Ok(Self { input_dim, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.rows())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layer(&self, id: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.id() == id)
    }

    pub fn layer_ids(&self) -> impl Iterator<Item = &str> {
        self.layers.iter().map(Layer::id)
    }

    /// Layers matching `filter`, or all layers for `None`.
    pub fn layers_in(&self, filter: Option<ComponentTag>) -> impl Iterator<Item = &Layer> {
        self.layers
            .iter()
            .filter(move |l| filter.is_none_or(|t| l.component == t))
    }

    /// Number of weight entries (biases excluded) in layers matching `filter`.
    pub fn parameter_count(&self, filter: Option<ComponentTag>) -> usize {
        self.layers_in(filter).map(|l| l.weight.len()).sum()
    }

    /// Returns a copy with the weights of the named layers replaced.
    pub fn with_weights(&self, replacements: Vec<WeightMatrix>) -> Result<ModelGraph> {
        let mut layers = self.layers.clone();
        for w in replacements {
            let layer = layers
                .iter_mut()
                .find(|l| l.id() == w.layer_id())
                .ok_or_else(|| Error::structural(format!("no layer `{}` in graph", w.layer_id())))?;
            if layer.weight.rows() != w.rows() || layer.weight.cols() != w.cols() {
                return Err(Error::structural(format!(
                    "replacement for `{}` is {}x{}, layer is {}x{}",
                    w.layer_id(),
                    w.rows(),
                    w.cols(),
                    layer.weight.rows(),
                    layer.weight.cols()
                )));
            }
            layer.weight = w;
        }
        Ok(ModelGraph {
            input_dim: self.input_dim,
            layers,
        })
    }

    /// Runs the batch through every layer, returning each layer's input
    /// followed by the final output (`len() + 1` matrices).
    pub fn layer_inputs(&self, batch: &Matrix) -> Result<Vec<Matrix>> {
        if batch.cols() != self.input_dim {
            return Err(Error::structural(format!(
                "batch width {} does not match model input_dim {}",
                batch.cols(),
                self.input_dim
            )));
        }
        if !batch.is_finite() {
            return Err(Error::precondition("input batch contains non-finite values"));
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(batch.clone());
        for layer in &self.layers {
            let next = layer.apply(acts.last().expect("non-empty"));
            if !next.is_finite() {
                return Err(Error::Numerical {
                    layer: layer.id().to_owned(),
                });
            }
            acts.push(next);
        }
        Ok(acts)
    }

    /// Forward pass plus the column L2 norms of every layer's input.
    pub fn forward(&self, batch: &Matrix) -> Result<(Matrix, ActivationTrace)> {
        let mut acts = self.layer_inputs(batch)?;
        let output = acts.pop().expect("output present");
        let mut norms = Vec::with_capacity(self.layers.len());
        for (layer, input) in self.layers.iter().zip(&acts) {
            let mut acc = NormAccumulator::new(input.cols());
            acc.update(input)?;
            norms.push(acc.finish(layer.id()));
        }
        Ok((output, ActivationTrace { norms }))
    }

    /// Output only; skips norm bookkeeping.
    pub fn predict(&self, batch: &Matrix) -> Result<Matrix> {
        Ok(self.layer_inputs(batch)?.pop().expect("output present"))
    }
}

/// Input-activation norms for every layer of a graph, in graph order.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    norms: Vec<ActivationNorms>,
}

impl ActivationTrace {
    pub fn new(norms: Vec<ActivationNorms>) -> Self {
        Self { norms }
    }

    pub fn get(&self, layer_id: &str) -> Option<&ActivationNorms> {
        self.norms.iter().find(|n| n.layer_id == layer_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ActivationNorms> {
        self.norms.iter()
    }

    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }
}

/// Accumulates a trace over several batches with a single final square root.
#[derive(Debug, Clone)]
pub struct TraceAccumulator<'g> {
    graph: &'g ModelGraph,
    accs: Vec<NormAccumulator>,
}

impl<'g> TraceAccumulator<'g> {
    pub fn new(graph: &'g ModelGraph) -> Self {
        let accs = graph
            .layers
            .iter()
            .map(|l| NormAccumulator::new(l.weight.cols()))
            .collect();
        Self { graph, accs }
    }

    pub fn update(&mut self, batch: &Matrix) -> Result<()> {
        let acts = self.graph.layer_inputs(batch)?;
        for (acc, input) in self.accs.iter_mut().zip(&acts) {
            acc.update(input)?;
        }
        Ok(())
    }

    pub fn finish(self) -> ActivationTrace {
        let norms = self
            .accs
            .into_iter()
            .zip(&self.graph.layers)
            .map(|(acc, l)| acc.finish(l.id()))
            .collect();
        ActivationTrace { norms }
    }
}
