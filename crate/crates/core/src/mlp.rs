//! Fully connected classifier producing logits, plus its JSON checkpoint format.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// `[d_in, hidden.., classes]`
    pub layer_sizes: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub seed: u64,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, seed: u64) -> Result<Self> {
        let spec = MlpSpec {
            layer_sizes,
            activation: Activation::Relu,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = &self.layer_sizes;
        if sizes.len() < 2 {
            return Err(Error::config(format!(
                "an MLP needs at least an input and an output size, got {sizes:?}"
            )));
        }
        if sizes.contains(&0) {
            return Err(Error::config(format!("layer sizes must be positive: {sizes:?}")));
        }
        if *sizes.last().unwrap() < 2 {
            return Err(Error::config("a classifier needs at least 2 output classes"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// `(in, out)` for each affine layer.
    pub fn layer_dims(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.layer_sizes.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().map(|(i, o)| o * i + o).sum()
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        MlpSpec {
            seed,
            ..self.clone()
        }
    }
}

/// Weights and biases stored as one flat vector.
///
/// Layout per layer: the `[out × in]` weight matrix in row-major order, then
/// the `out` biases.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    spec: MlpSpec,
    flat: Vec<f64>,
}

impl ModelParams {
    /// He-style uniform init: weights in `[-sqrt(6/in), sqrt(6/in)]`, zero biases.
    pub fn init(spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut flat = Vec::with_capacity(spec.num_params());
        for (d_in, d_out) in spec.layer_dims() {
            let bound = (6.0 / d_in as f64).sqrt();
            flat.extend((0..d_in * d_out).map(|_| rng.random_range(-bound..=bound)));
            flat.extend(std::iter::repeat_n(0.0, d_out));
        }
        Ok(ModelParams {
            spec: spec.clone(),
            flat,
        })
    }

    pub fn from_flat(spec: &MlpSpec, flat: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if flat.len() != spec.num_params() {
            return Err(Error::shape(format!(
                "spec {:?} has {} parameters, got {}",
                spec.layer_sizes,
                spec.num_params(),
                flat.len()
            )));
        }
        Ok(ModelParams {
            spec: spec.clone(),
            flat,
        })
    }

    pub fn zeros(spec: &MlpSpec) -> Result<Self> {
        Self::from_flat(spec, vec![0.0; spec.num_params()])
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.flat
    }

    pub fn num_params(&self) -> usize {
        self.flat.len()
    }

    /// `(weights [out × in], biases [out])` for layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (start, d_in, d_out) = self.layer_offset(l);
        let w_end = start + d_in * d_out;
        (&self.flat[start..w_end], &self.flat[w_end..w_end + d_out])
    }

    fn layer_offset(&self, l: usize) -> (usize, usize, usize) {
        let mut start = 0;
        for (i, (d_in, d_out)) in self.spec.layer_dims().enumerate() {
            if i == l {
                return (start, d_in, d_out);
            }
            start += d_in * d_out + d_out;
        }
        panic!("layer {l} out of range for {} layers", self.spec.num_layers());
    }

    /// Logits for a `[m × d_in]` batch.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.leaf(batch.clone());
        let vars = self.register(&mut tape)?;
        let logits = forward_on_tape(&mut tape, &self.spec, &vars, x)?;
        Ok(tape.value(logits).clone())
    }

    /// Puts every layer's weights and biases on the tape as leaves.
    pub fn register(&self, tape: &mut Tape) -> Result<LayerVars> {
        let mut vars = Vec::with_capacity(self.spec.num_layers());
        for (l, (d_in, d_out)) in self.spec.layer_dims().enumerate() {
            let (w, b) = self.layer(l);
            let wv = tape.leaf(Tensor::new(vec![d_out, d_in], w.to_vec())?);
            let bv = tape.leaf(Tensor::vector(b.to_vec()));
            vars.push((wv, bv));
        }
        Ok(LayerVars(vars))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.to_checkpoint())
            .map_err(|e| Error::parse(path.display().to_string(), e))?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
            other => other,
        })
    }

    /// Loads a checkpoint and checks that it matches `spec`'s layer sizes.
    pub fn load_into(spec: &MlpSpec, path: &Path) -> Result<Self> {
        let params = Self::load(path)?;
        if params.spec.layer_sizes != spec.layer_sizes {
            return Err(Error::shape(format!(
                "checkpoint has layers {:?}, expected {:?}",
                params.spec.layer_sizes, spec.layer_sizes
            )));
        }
        Ok(params)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_checkpoint()).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::parse("checkpoint", e))?;
        Self::from_checkpoint(ckpt)
    }

    fn to_checkpoint(&self) -> Checkpoint {
        let layers = (0..self.spec.num_layers())
            .map(|l| {
                let (w, b) = self.layer(l);
                let d_in = self.spec.layer_sizes[l];
                CheckpointLayer {
                    w: w.chunks(d_in).map(<[f64]>::to_vec).collect(),
                    b: b.to_vec(),
                }
            })
            .collect();
        Checkpoint {
            spec: self.spec.clone(),
            layers,
        }
    }

    fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.spec.validate()?;
        if ckpt.layers.len() != ckpt.spec.num_layers() {
            return Err(Error::shape(format!(
                "checkpoint lists {} layers, spec implies {}",
                ckpt.layers.len(),
                ckpt.spec.num_layers()
            )));
        }
        let mut flat = Vec::with_capacity(ckpt.spec.num_params());
        for (l, ((d_in, d_out), layer)) in ckpt.spec.layer_dims().zip(&ckpt.layers).enumerate() {
            if layer.w.len() != d_out || layer.w.iter().any(|r| r.len() != d_in) {
                return Err(Error::shape(format!(
                    "layers[{l}].w must be {d_out}x{d_in}"
                )));
            }
            if layer.b.len() != d_out {
                return Err(Error::shape(format!(
                    "layers[{l}].b has {} entries, expected {d_out}",
                    layer.b.len()
                )));
            }
            layer.w.iter().for_each(|r| flat.extend_from_slice(r));
            flat.extend_from_slice(&layer.b);
        }
        ModelParams::from_flat(&ckpt.spec, flat)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    spec: MlpSpec,
    layers: Vec<CheckpointLayer>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointLayer {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

/// Tape handles for each layer's `(weights, biases)`.
#[derive(Clone, Debug)]
pub struct LayerVars(pub Vec<(Var, Var)>);

impl LayerVars {
    /// Collects the leaf gradients back into the flat parameter layout.
    pub fn flat_grad(&self, grads: &crate::tensor::Gradients) -> Vec<f64> {
        let mut out = Vec::new();
        for &(w, b) in &self.0 {
            out.extend_from_slice(grads.wrt(w).data());
            out.extend_from_slice(grads.wrt(b).data());
        }
        out
    }
}

/// Affine + ReLU for hidden layers, affine only for the output layer.
pub fn forward_on_tape(tape: &mut Tape, spec: &MlpSpec, vars: &LayerVars, x: Var) -> Result<Var> {
    let d = tape.value(x).cols();
    if tape.value(x).dims2()?.1 != spec.input_dim() {
        return Err(Error::shape(format!(
            "batch has {d} features, model expects {}",
            spec.input_dim()
        )));
    }
    let mut h = x;
    let last = vars.0.len() - 1;
    for (l, &(w, b)) in vars.0.iter().enumerate() {
        h = tape.linear(h, w, b)?;
        if l < last {
            h = match spec.activation {
                Activation::Relu => tape.relu(h)?,
            };
        }
    }
    Ok(h)
}
