//! MLP classifiers with a named tensor-parameter registry.
//!
//! The registry fixes the scalar address space: a [`ParamId`] is the index
//! of a tensor in registry order plus a row-major flat offset into it.
//! Base layers register as `layers.{i}.weight` / `layers.{i}.bias`; low-rank
//! adapters are appended after them as `layers.{i}.adapter_a` /
//! `layers.{i}.adapter_b`, so attaching one never renumbers existing ids.
//!
//! Initialisation: weights and adapter `A` are drawn uniformly from
//! `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases and adapter `B` start at zero.

use crate::codec::{put_f64, put_str, put_u32, to_u32, Reader};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};
use crate::tensor::{NodeId, Tape, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Address of one scalar parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId {
    pub tensor: usize,
    pub offset: usize,
}

impl ParamId {
    pub fn new(tensor: usize, offset: usize) -> Self {
        ParamId { tensor, offset }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    AdapterA,
    AdapterB,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Layer widths from input to output, e.g. `[2, 16, 16, 2]`.
    pub widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    /// Rank of the low-rank adapters; 0 disables them.
    #[serde(default)]
    pub adapter_rank: usize,
    /// Layers that receive an adapter when `adapter_rank > 0`.
    #[serde(default)]
    pub adapter_layers: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn mlp(widths: &[usize], seed: u64) -> Self {
        ModelConfig {
            widths: widths.to_vec(),
            activation: Activation::Relu,
            adapter_rank: 0,
            adapter_layers: Vec::new(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Config(format!(
                "need at least input and output widths, got {:?}",
                self.widths
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "widths must be positive, got {:?}",
                self.widths
            )));
        }
        if self.adapter_rank > 0 && self.adapter_layers.is_empty() {
            return Err(Error::Config(
                "adapter_rank set but no adapter_layers given".into(),
            ));
        }
        Ok(())
    }

    /// Scalar count of the base MLP (without adapters).
    pub fn base_param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorParam {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Layer {
    weight: usize,
    bias: usize,
    adapter: Option<(usize, usize)>,
}

/// Node ids of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: NodeId,
    /// One leaf per registry tensor, in registry order.
    pub params: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<TensorParam>,
    layers: Vec<Layer>,
}

fn uniform_init(rows: usize, cols: usize, fan_in: usize, seed: u64) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut rng = seeded(seed);
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("non-zero extents")
}

impl Model {
    /// Builds an MLP from its config, attaching any configured adapters.
    pub fn build(config: &ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut params = Vec::new();
        let mut layers = Vec::new();
        for (i, w) in config.widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weight = uniform_init(fan_out, fan_in, fan_in, derive_seed(config.seed, i as u64));
            params.push(TensorParam {
                name: format!("layers.{i}.weight"),
                kind: ParamKind::Weight,
                value: weight,
                trainable: true,
            });
            params.push(TensorParam {
                name: format!("layers.{i}.bias"),
                kind: ParamKind::Bias,
                value: Tensor::zeros(&[fan_out]),
                trainable: true,
            });
            layers.push(Layer {
                weight: params.len() - 2,
                bias: params.len() - 1,
                adapter: None,
            });
        }
        let mut model = Model {
            config: ModelConfig {
                adapter_rank: 0,
                adapter_layers: Vec::new(),
                ..config.clone()
            },
            params,
            layers,
        };
        if config.adapter_rank > 0 {
            for &layer in &config.adapter_layers {
                model.attach_low_rank_adapter(layer, config.adapter_rank)?;
            }
        }
        Ok(model)
    }

    /// Adds `ΔW = B·A` to `layer` and freezes the layer's base weight.
    ///
    /// `A` is `rank × fan_in` with random init, `B` is `fan_out × rank` with
    /// zeros, so the model's function is unchanged at attach time.
    pub fn attach_low_rank_adapter(&mut self, layer: usize, rank: usize) -> Result<()> {
        let Some(&slot) = self.layers.get(layer) else {
            return Err(Error::Config(format!(
                "no layer {layer}; model has {}",
                self.layers.len()
            )));
        };
        if slot.adapter.is_some() {
            return Err(Error::Config(format!(
                "layer {layer} already has an adapter"
            )));
        }
        if self.config.adapter_rank != 0 && self.config.adapter_rank != rank {
            return Err(Error::Config(format!(
                "adapter rank {rank} differs from existing rank {}",
                self.config.adapter_rank
            )));
        }
        let w = &self.params[slot.weight].value;
        let (fan_out, fan_in) = (w.shape()[0], w.shape()[1]);
        if rank == 0 || rank > fan_in.min(fan_out) {
            return Err(Error::Config(format!(
                "adapter rank {rank} outside 1..={} for a {fan_out}x{fan_in} layer",
                fan_in.min(fan_out)
            )));
        }
        let seed = derive_seed(self.config.seed, 1_000 + layer as u64);
        self.params.push(TensorParam {
            name: format!("layers.{layer}.adapter_a"),
            kind: ParamKind::AdapterA,
            value: uniform_init(rank, fan_in, fan_in, seed),
            trainable: true,
        });
        self.params.push(TensorParam {
            name: format!("layers.{layer}.adapter_b"),
            kind: ParamKind::AdapterB,
            value: Tensor::zeros(&[fan_out, rank]),
            trainable: true,
        });
        let n = self.params.len();
        self.layers[layer].adapter = Some((n - 2, n - 1));
        self.params[slot.weight].trainable = false;
        self.config.adapter_rank = rank;
        self.config.adapter_layers.push(layer);
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.config.widths[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.config.widths.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Tensor parameters in registry order.
    pub fn params(&self) -> &[TensorParam] {
        &self.params
    }

    pub fn param_mut(&mut self, index: usize) -> &mut TensorParam {
        &mut self.params[index]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Total scalar count N.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Every scalar address, in registry order.
    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params
            .iter()
            .enumerate()
            .flat_map(|(t, p)| (0..p.value.len()).map(move |o| ParamId::new(t, o)))
    }

    /// Addresses of scalars in trainable tensors.
    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.trainable)
            .flat_map(|(t, p)| (0..p.value.len()).map(move |o| ParamId::new(t, o)))
    }

    pub fn value(&self, id: ParamId) -> f64 {
        self.params[id.tensor].value.data()[id.offset]
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let idx = self
            .find(name)
            .ok_or_else(|| Error::Config(format!("unknown tensor '{name}'")))?;
        self.params[idx].trainable = trainable;
        Ok(())
    }

    /// Leaves only adapter tensors trainable.
    pub fn freeze_all_but_adapters(&mut self) {
        for p in &mut self.params {
            p.trainable = matches!(p.kind, ParamKind::AdapterA | ParamKind::AdapterB);
        }
    }

    /// Records the forward pass on `tape`; `input` is `[batch, d_in]`.
    pub fn forward(&self, tape: &mut Tape, input: &Tensor) -> Result<ForwardPass> {
        if input.rank() != 2 || input.cols() != self.input_dim() {
            return Err(Error::dim("forward", input.shape(), &[self.input_dim()]));
        }
        let params: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect();
        let mut h = tape.leaf(input.clone());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let wt = tape.transpose(params[layer.weight])?;
            let mut z = tape.matmul(h, wt)?;
            if let Some((a, b)) = layer.adapter {
                let at = tape.transpose(params[a])?;
                let bt = tape.transpose(params[b])?;
                let down = tape.matmul(h, at)?;
                let up = tape.matmul(down, bt)?;
                z = tape.add(z, up)?;
            }
            z = tape.add(z, params[layer.bias])?;
            h = if i == last {
                z
            } else {
                match self.config.activation {
                    Activation::Relu => tape.relu(z),
                    Activation::Tanh => tape.tanh(z),
                }
            };
        }
        Ok(ForwardPass { logits: h, params })
    }

    pub fn logits(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, input)?;
        Ok(tape.value(pass.logits).clone())
    }

    /// Mean cross-entropy and its gradient for every registry tensor.
    pub fn loss_and_grads(&self, input: &Tensor, labels: &[usize]) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, input)?;
        let loss = tape.softmax_cross_entropy(pass.logits, labels)?;
        let grads = tape.backward(loss)?;
        let loss_value = tape.value(loss).item().expect("scalar loss");
        Ok((
            loss_value,
            pass.params.iter().map(|&p| grads.get(p)).collect(),
        ))
    }

    pub fn loss(&self, input: &Tensor, labels: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, input)?;
        let loss = tape.softmax_cross_entropy(pass.logits, labels)?;
        Ok(tape.value(loss).item().expect("scalar loss"))
    }

    /// Dense snapshot: shape table followed by every value in registry order.
    ///
    /// Layout (little-endian): `"IDDN"`, version `u32`, tensor count `u32`,
    /// then per tensor name length `u32`, name bytes, rank `u32`, dims `u32`
    /// each; then all values as `f64`.
    pub fn save_dense(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(16 + self.num_scalars() * 8);
        out.extend_from_slice(DENSE_MAGIC);
        put_u32(&mut out, DENSE_VERSION);
        put_u32(&mut out, to_u32(self.params.len(), "tensor count")?);
        for p in &self.params {
            put_str(&mut out, &p.name)?;
            put_u32(&mut out, to_u32(p.value.rank(), "rank")?);
            for &d in p.value.shape() {
                put_u32(&mut out, to_u32(d, "dimension")?);
            }
        }
        for p in &self.params {
            for &v in p.value.data() {
                put_f64(&mut out, v);
            }
        }
        Ok(out)
    }

    /// Overwrites every value from a dense snapshot of an identically shaped model.
    pub fn load_dense(&mut self, bytes: &[u8]) -> Result<()> {
        let mut r = Reader::new(bytes);
        if r.take(4, "magic")? != DENSE_MAGIC {
            return Err(Error::format(0, "bad dense checkpoint magic"));
        }
        let version = r.u32("version")?;
        if version != DENSE_VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let count = r.u32("tensor count")? as usize;
        if count != self.params.len() {
            return Err(Error::format(
                8,
                format!("{count} tensors, model has {}", self.params.len()),
            ));
        }
        for p in &self.params {
            let at = r.offset();
            let name = r.string("tensor name")?;
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            if name != p.name || shape != p.value.shape() {
                return Err(Error::format(
                    at,
                    format!(
                        "tensor '{name}' {shape:?} does not match '{}' {:?}",
                        p.name,
                        p.value.shape()
                    ),
                ));
            }
        }
        let mut values = Vec::with_capacity(self.num_scalars());
        for _ in 0..self.num_scalars() {
            values.push(r.f64("values")?);
        }
        if r.remaining() != 0 {
            return Err(Error::format(r.offset(), "trailing bytes"));
        }
        let mut it = values.into_iter();
        for p in &mut self.params {
            for x in p.value.data_mut() {
                *x = it.next().unwrap();
            }
        }
        Ok(())
    }
}

const DENSE_MAGIC: &[u8; 4] = b"IDDN";
const DENSE_VERSION: u32 = 1;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_matches_widths() {
        let m = Model::build(&ModelConfig::mlp(&[2, 8, 2], 0)).unwrap();
        assert_eq!(m.num_scalars(), 42);
        assert_eq!(m.params().len(), 4);
        let per_tensor: usize = m.params().iter().map(|p| p.value.len()).sum();
        assert_eq!(per_tensor, m.num_scalars());
        assert_eq!(m.param_ids().count(), 42);
    }

    #[test]
    fn build_is_deterministic() {
        let a = Model::build(&ModelConfig::mlp(&[2, 8, 2], 9)).unwrap();
        let b = Model::build(&ModelConfig::mlp(&[2, 8, 2], 9)).unwrap();
        assert_eq!(a, b);
        let c = Model::build(&ModelConfig::mlp(&[2, 8, 2], 10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_width_rejected() {
        assert!(Model::build(&ModelConfig::mlp(&[2, 0, 2], 0))
            .unwrap_err()
            .is_config());
    }

    #[test]
    fn registry_layout() {
        let m = Model::build(&ModelConfig::mlp(&[2, 8, 2], 0)).unwrap();
        let names: Vec<_> = m.params().iter().map(|p| p.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "layers.0.weight",
                "layers.0.bias",
                "layers.1.weight",
                "layers.1.bias"
            ]
        );
        assert_eq!(m.value(ParamId::new(0, 0)), m.params()[0].value.at(0, 0));
        for p in m.params() {
            assert_eq!(p.kind == ParamKind::Bias, p.value.rank() == 1);
        }
    }

    #[test]
    fn adapter_attach_counts_and_preserves_function() {
        let mut m = Model::build(&ModelConfig::mlp(&[2, 8, 2], 3)).unwrap();
        let x = Tensor::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.5]]).unwrap();
        let before = m.logits(&x).unwrap();
        let n0 = m.num_scalars();
        m.attach_low_rank_adapter(0, 2).unwrap();
        assert_eq!(m.num_scalars() - n0, 20);
        assert_eq!(m.logits(&x).unwrap(), before);
        assert!(!m.params()[0].trainable);
        assert!(m.attach_low_rank_adapter(0, 2).is_err());
        assert!(m.attach_low_rank_adapter(5, 1).is_err());
    }

    #[test]
    fn adapter_rank_bounds() {
        let mut m = Model::build(&ModelConfig::mlp(&[2, 8, 2], 3)).unwrap();
        assert!(m.attach_low_rank_adapter(0, 3).is_err());
        assert!(m.attach_low_rank_adapter(0, 0).is_err());
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let mut m = Model::build(&ModelConfig::mlp(&[3, 4, 2], 1)).unwrap();
        for i in 0..m.params().len() {
            m.param_mut(i).value.data_mut().fill(0.0);
        }
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 3.0]]).unwrap();
        assert!(m.logits(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_single_layer() {
        let mut m = Model::build(&ModelConfig::mlp(&[2, 2], 1)).unwrap();
        m.param_mut(0).value = Tensor::identity(2);
        let x = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        assert_eq!(m.logits(&x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn batch_rows_are_independent() {
        let m = Model::build(&ModelConfig::mlp(&[2, 5, 3], 4)).unwrap();
        let rows = vec![
            vec![0.1, 0.2],
            vec![-1.0, 0.4],
            vec![0.7, -0.3],
            vec![2.0, 1.0],
        ];
        let batch = m.logits(&Tensor::from_rows(&rows).unwrap()).unwrap();
        let single = m.logits(&Tensor::from_rows(&rows[2..3]).unwrap()).unwrap();
        assert_eq!(batch.row(2), single.data());
    }

    #[test]
    fn forward_rejects_wrong_input_width() {
        let m = Model::build(&ModelConfig::mlp(&[2, 5, 3], 4)).unwrap();
        assert!(matches!(
            m.logits(&Tensor::zeros(&[1, 3])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn dense_roundtrip_and_validation() {
        let cfg = ModelConfig::mlp(&[2, 4, 2], 7);
        let src = Model::build(&cfg).unwrap();
        let bytes = src.save_dense().unwrap();
        let mut dst = Model::build(&ModelConfig {
            seed: 8,
            ..cfg.clone()
        })
        .unwrap();
        assert_ne!(dst, src);
        dst.load_dense(&bytes).unwrap();
        assert_eq!(dst.params(), src.params());

        let mut other = Model::build(&ModelConfig::mlp(&[2, 5, 2], 7)).unwrap();
        assert!(matches!(
            other.load_dense(&bytes),
            Err(Error::Format { .. })
        ));
        assert!(dst.load_dense(&bytes[..bytes.len() - 1]).is_err());
    }
}
