//! The three-headed MLP: encoder, projection head, linear classifier.
//!
//! The encoder maps inputs to feature space; the projection head is only
//! used by the contrastive pre-training stage and is discarded afterwards;
//! the classifier reads encoder features. Graph forwards are used for
//! training, plain forwards for evaluation (per-sample losses, probes,
//! feature export) so that recorded values are exactly reproducible.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, CoreError, Result};
use crate::graph::{Tape, Var};
use crate::seed::rng_from;
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// [in, out]
    pub weight: Tensor,
    /// [out]
    pub bias: Tensor,
}

impl Linear {
    fn init(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        // He initialization, the usual choice for ReLU stacks
        let std = libm::sqrt(2.0 / input as f64);
        let normal = Normal::new(0.0, std).expect("valid std");
        let data = (0..input * output).map(|_| normal.sample(rng)).collect();
        Linear {
            weight: Tensor::new(vec![input, output], data).expect("shape"),
            bias: Tensor::zeros(vec![output]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    fn forward_plain(&self, x: &Tensor) -> Result<Tensor> {
        tensor::add_row_broadcast(&x.matmul(&self.weight)?, &self.bias)
    }
}

/// Dense stack with ReLU between layers and a linear final layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    fn init(dims: &[usize], rng: &mut impl Rng) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward_plain(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward_plain(&h)?;
            if i + 1 < self.layers.len() {
                h = tensor::relu(&h);
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub projection_dim: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 16,
            hidden_dims: vec![64, 64],
            feature_dim: 32,
            projection_dim: 16,
            num_classes: 8,
        }
    }
}

/// Which parameter subset a training stage updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScope {
    EncoderProjection,
    EncoderClassifier,
    ClassifierOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: Mlp,
    pub projection: Mlp,
    pub classifier: Linear,
}

impl Model {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        if cfg.input_dim == 0 || cfg.feature_dim == 0 || cfg.num_classes < 2 {
            return Err(invalid("model dims must be positive, classes >= 2"));
        }
        let mut rng = rng_from(seed);
        let mut enc_dims = vec![cfg.input_dim];
        enc_dims.extend_from_slice(&cfg.hidden_dims);
        enc_dims.push(cfg.feature_dim);
        Ok(Model {
            encoder: Mlp::init(&enc_dims, &mut rng),
            projection: Mlp::init(&[cfg.feature_dim, cfg.projection_dim], &mut rng),
            classifier: Linear::init(cfg.feature_dim, cfg.num_classes, &mut rng),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.layers[0].in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.layers.last().expect("nonempty").out_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.out_dim()
    }

    /// Fresh classifier head; used when transferring a pre-trained encoder.
    pub fn reinit_classifier(&mut self, seed: u64) {
        let mut rng = rng_from(seed);
        self.classifier = Linear::init(self.feature_dim(), self.num_classes(), &mut rng);
    }

    /// Insert every parameter into the tape as a leaf and return the
    /// handles; training steps read gradients back through them.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let bind_stack = |tape: &mut Tape, mlp: &Mlp| {
            mlp.layers
                .iter()
                .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
                .collect()
        };
        BoundModel {
            encoder: bind_stack(tape, &self.encoder),
            projection: bind_stack(tape, &self.projection),
            classifier: (
                tape.leaf(self.classifier.weight.clone()),
                tape.leaf(self.classifier.bias.clone()),
            ),
        }
    }

    /// Eval-mode encoder features, [N, F].
    pub fn encode_eval(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.forward_plain(x)
    }

    /// Eval-mode class probabilities, [N, C].
    pub fn predict_probs(&self, x: &Tensor) -> Result<Tensor> {
        let f = self.encode_eval(x)?;
        let logits = self.classifier.forward_plain(&f)?;
        Ok(tensor::softmax_rows(&logits))
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.layers.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), &l.weight));
            out.push((format!("encoder.{i}.bias"), &l.bias));
        }
        for (i, l) in self.projection.layers.iter().enumerate() {
            out.push((format!("projection.{i}.weight"), &l.weight));
            out.push((format!("projection.{i}.bias"), &l.bias));
        }
        out.push((String::from("classifier.weight"), &self.classifier.weight));
        out.push((String::from("classifier.bias"), &self.classifier.bias));
        out
    }

    pub fn named_params_mut(&mut self, scope: TrainScope) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        let encoder = matches!(
            scope,
            TrainScope::EncoderProjection | TrainScope::EncoderClassifier
        );
        if encoder {
            for (i, l) in self.encoder.layers.iter_mut().enumerate() {
                out.push((format!("encoder.{i}.weight"), &mut l.weight));
                out.push((format!("encoder.{i}.bias"), &mut l.bias));
            }
        }
        if scope == TrainScope::EncoderProjection {
            for (i, l) in self.projection.layers.iter_mut().enumerate() {
                out.push((format!("projection.{i}.weight"), &mut l.weight));
                out.push((format!("projection.{i}.bias"), &mut l.bias));
            }
        }
        if matches!(
            scope,
            TrainScope::EncoderClassifier | TrainScope::ClassifierOnly
        ) {
            out.push((
                String::from("classifier.weight"),
                &mut self.classifier.weight,
            ));
            out.push((String::from("classifier.bias"), &mut self.classifier.bias));
        }
        out
    }

    /// One training step driver: forward/backward already done on `tape`,
    /// collect the gradients for `scope` in the same order as
    /// [`Model::named_params_mut`].
    pub fn scope_grads(&self, tape: &Tape, bound: &BoundModel, scope: TrainScope) -> Result<Vec<Tensor>> {
        bound
            .scope_vars(scope)
            .into_iter()
            .map(|v| {
                tape.grad(v).cloned().ok_or_else(|| {
                    invalid("a parameter in the training scope is unreachable from the loss")
                })
            })
            .collect()
    }

    // ---- checkpoint codec ---------------------------------------------
    //
    // One plain-text header line: `c2d-ckpt v1 name=d0xd1 name=d0 ...`,
    // followed by the tensors' little-endian f64 payloads in header order.

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let params = self.named_params();
        let mut header = String::from("c2d-ckpt v1");
        for (name, t) in &params {
            header.push(' ');
            header.push_str(name);
            header.push('=');
            let dims: Vec<String> = t.shape().iter().map(|d| format!("{d}")).collect();
            header.push_str(&dims.join("x"));
        }
        header.push('\n');
        let mut bytes = header.into_bytes();
        for (_, t) in &params {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Model> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or(CoreError::Parse {
                line: 1,
                msg: String::from("missing checkpoint header line"),
            })?;
        let header = core::str::from_utf8(&bytes[..nl]).map_err(|_| CoreError::Parse {
            line: 1,
            msg: String::from("header is not UTF-8"),
        })?;
        let mut toks = header.split_whitespace();
        if toks.next() != Some("c2d-ckpt") || toks.next() != Some("v1") {
            return Err(CoreError::Parse {
                line: 1,
                msg: String::from("bad checkpoint magic"),
            });
        }
        let mut named: Vec<(String, Tensor)> = Vec::new();
        let mut payload = &bytes[nl + 1..];
        for tok in toks {
            let (name, dims) = tok.split_once('=').ok_or_else(|| CoreError::Parse {
                line: 1,
                msg: format!("bad header token `{tok}`"),
            })?;
            let shape: Vec<usize> = dims
                .split('x')
                .map(|d| {
                    d.parse::<usize>().map_err(|_| CoreError::Parse {
                        line: 1,
                        msg: format!("bad dimension `{d}` for `{name}`"),
                    })
                })
                .collect::<Result<_>>()?;
            let numel: usize = shape.iter().product();
            if payload.len() < numel * 8 {
                return Err(CoreError::Parse {
                    line: 1,
                    msg: format!("truncated payload for `{name}`"),
                });
            }
            let data = payload[..numel * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            payload = &payload[numel * 8..];
            named.push((String::from(name), Tensor::new(shape, data)?));
        }
        if !payload.is_empty() {
            return Err(CoreError::Parse {
                line: 1,
                msg: format!("{} trailing bytes after payload", payload.len()),
            });
        }
        Model::from_named_tensors(named)
    }

    fn from_named_tensors(named: Vec<(String, Tensor)>) -> Result<Model> {
        fn collect_stack(named: &[(String, Tensor)], prefix: &str) -> Result<Mlp> {
            let mut layers = Vec::new();
            for i in 0.. {
                let wname = format!("{prefix}.{i}.weight");
                let bname = format!("{prefix}.{i}.bias");
                let w = named.iter().find(|(n, _)| n == &wname);
                let b = named.iter().find(|(n, _)| n == &bname);
                match (w, b) {
                    (Some((_, w)), Some((_, b))) => layers.push(Linear {
                        weight: w.clone(),
                        bias: b.clone(),
                    }),
                    (None, None) => break,
                    _ => {
                        return Err(CoreError::Parse {
                            line: 1,
                            msg: format!("checkpoint has weight without bias in `{prefix}.{i}`"),
                        })
                    }
                }
            }
            if layers.is_empty() {
                return Err(CoreError::Parse {
                    line: 1,
                    msg: format!("checkpoint has no `{prefix}` layers"),
                });
            }
            Ok(Mlp { layers })
        }

        let encoder = collect_stack(&named, "encoder")?;
        let projection = collect_stack(&named, "projection")?;
        let cw = named
            .iter()
            .find(|(n, _)| n == "classifier.weight")
            .ok_or_else(|| CoreError::Parse {
                line: 1,
                msg: String::from("checkpoint missing classifier.weight"),
            })?;
        let cb = named
            .iter()
            .find(|(n, _)| n == "classifier.bias")
            .ok_or_else(|| CoreError::Parse {
                line: 1,
                msg: String::from("checkpoint missing classifier.bias"),
            })?;
        let model = Model {
            encoder,
            projection,
            classifier: Linear {
                weight: cw.1.clone(),
                bias: cb.1.clone(),
            },
        };
        let f = model.feature_dim();
        if model.projection.layers[0].in_dim() != f || model.classifier.in_dim() != f {
            return Err(CoreError::Parse {
                line: 1,
                msg: String::from("checkpoint head dims disagree with encoder output"),
            });
        }
        Ok(model)
    }
}

/// Parameter handles of a model bound into one tape.
pub struct BoundModel {
    encoder: Vec<(Var, Var)>,
    projection: Vec<(Var, Var)>,
    classifier: (Var, Var),
}

impl BoundModel {
    fn forward_stack(tape: &mut Tape, layers: &[(Var, Var)], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in layers.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            h = tape.add(z, b)?;
            if i + 1 < layers.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn encode(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        Self::forward_stack(tape, &self.encoder, x)
    }

    pub fn project(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        Self::forward_stack(tape, &self.projection, features)
    }

    pub fn classify(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let z = tape.matmul(features, self.classifier.0)?;
        tape.add(z, self.classifier.1)
    }

    /// Handles of the parameters a scope trains, in the exact order of
    /// [`Model::named_params_mut`] for that scope.
    pub fn scope_vars(&self, scope: TrainScope) -> Vec<Var> {
        let mut out = Vec::new();
        let encoder = matches!(
            scope,
            TrainScope::EncoderProjection | TrainScope::EncoderClassifier
        );
        if encoder {
            for &(w, b) in &self.encoder {
                out.push(w);
                out.push(b);
            }
        }
        if scope == TrainScope::EncoderProjection {
            for &(w, b) in &self.projection {
                out.push(w);
                out.push(b);
            }
        }
        if matches!(
            scope,
            TrainScope::EncoderClassifier | TrainScope::ClassifierOnly
        ) {
            out.push(self.classifier.0);
            out.push(self.classifier.1);
        }
        out
    }
}
