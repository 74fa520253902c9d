//! MLP classifier with exposed penultimate features, and the projector head
//! that maps those features into the embedding space of the SSL loss.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{matmul_raw, NodeId, Tape, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    #[default]
    HeNormal,
    /// Uniform on `[-0.01, 0.01]`.
    UniformSmall,
}

/// Stack of affine layers with ReLU between them and no activation after
/// the last one. Weight `l` is `sizes[l] x sizes[l + 1]`; bias `l` has
/// length `sizes[l + 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseStack {
    layer_sizes: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

/// Classifier parameters: `[d_in, h_1, ..., h_L, n_classes]`.
pub type MlpParams = DenseStack;
/// Projector parameters: `[h_L, ..., d_emb]`.
pub type ProjectorParams = DenseStack;

/// Node handles for a [`DenseStack`] registered on a tape.
#[derive(Debug, Clone)]
pub struct StackNodes {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
}

impl StackNodes {
    /// Weight and bias ids interleaved per layer, matching [`DenseStack::tensors`].
    pub fn ids(&self) -> Vec<NodeId> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(&w, &b)| [w, b])
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// `B x n_classes`.
    pub logits: NodeId,
    /// `B x h_L`, post-activation input of the final layer.
    pub penultimate: NodeId,
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
        return Err(Error::invalid(format!(
            "layer sizes need at least two positive entries, got {layer_sizes:?}"
        )));
    }
    Ok(())
}

impl DenseStack {
    pub fn init(layer_sizes: &[usize], seed: u64, init: Init) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let n = fan_in * fan_out;
            let values: Vec<f64> = match init {
                Init::HeNormal => {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                        .map_err(|e| Error::invalid(e.to_string()))?;
                    normal.sample_iter(&mut rng).take(n).collect()
                }
                Init::UniformSmall => {
                    let uniform = Uniform::new_inclusive(-0.01, 0.01)
                        .map_err(|e| Error::invalid(e.to_string()))?;
                    uniform.sample_iter(&mut rng).take(n).collect()
                }
            };
            weights.push(Tensor::matrix(fan_in, fan_out, values)?);
            biases.push(Tensor::zeros(vec![fan_out]));
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
        })
    }

    pub fn from_tensors(layer_sizes: &[usize], weights: Vec<Tensor>, biases: Vec<Tensor>) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let layers = layer_sizes.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(Error::shape(
                "dense_stack",
                format!("{layers} layers need {layers} weights and biases"),
            ));
        }
        for (l, pair) in layer_sizes.windows(2).enumerate() {
            if weights[l].shape() != [pair[0], pair[1]] || biases[l].shape() != [pair[1]] {
                return Err(Error::shape(
                    "dense_stack",
                    format!(
                        "layer {l}: weight {:?}, bias {:?}, expected [{}, {}] and [{}]",
                        weights[l].shape(),
                        biases[l].shape(),
                        pair[0],
                        pair[1],
                        pair[1]
                    ),
                ));
            }
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated sizes")
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    /// Weights and biases interleaved per layer: `[W0, b0, W1, b1, ...]`.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn tensor_names(&self, prefix: &str) -> Vec<String> {
        (0..self.weights.len())
            .flat_map(|l| [format!("{prefix}.w{l}"), format!("{prefix}.b{l}")])
            .collect()
    }

    /// Inverse of [`DenseStack::tensors`].
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != 2 * self.weights.len() {
            return Err(Error::shape(
                "dense_stack",
                format!("expected {} tensors, got {}", 2 * self.weights.len(), tensors.len()),
            ));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (i, t) in tensors.into_iter().enumerate() {
            if i % 2 == 0 {
                weights.push(t);
            } else {
                biases.push(t);
            }
        }
        Self::from_tensors(&self.layer_sizes, weights, biases)
    }

    pub fn register(&self, tape: &mut Tape) -> StackNodes {
        StackNodes {
            weights: self.weights.iter().map(|w| tape.leaf(w.clone())).collect(),
            biases: self.biases.iter().map(|b| tape.leaf(b.clone())).collect(),
        }
    }

    /// Forward pass without a tape. Returns `(output, input of the last layer)`.
    pub fn infer(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        if x.shape().len() != 2 || x.cols() != self.input_dim() {
            return Err(Error::shape(
                "mlp_forward",
                format!("input {:?} for input width {}", x.shape(), self.input_dim()),
            ));
        }
        let rows = x.rows();
        let mut h = x.values().to_vec();
        let mut hidden = h.clone();
        let layers = self.weights.len();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
            hidden = h;
            let mut out = matmul_raw(&hidden, w.values(), rows, fan_in, fan_out);
            for row in out.chunks_mut(fan_out) {
                row.iter_mut().zip(b.values()).for_each(|(o, b)| *o += b);
                if l + 1 < layers {
                    row.iter_mut().for_each(|o| *o = o.max(0.0));
                }
            }
            h = out;
        }
        let penultimate_width = self.layer_sizes[layers - 1];
        Ok((
            Tensor::matrix(rows, self.output_dim(), h)?,
            Tensor::matrix(rows, penultimate_width, hidden)?,
        ))
    }
}

fn stack_forward(nodes: &StackNodes, tape: &mut Tape, x: NodeId, op: &'static str) -> Result<(NodeId, NodeId)> {
    let want = tape.value(nodes.weights[0]).shape()[0];
    let got = tape.value(x).shape();
    if got.len() != 2 || got[1] != want {
        return Err(Error::shape(op, format!("input {got:?} for input width {want}")));
    }
    let layers = nodes.weights.len();
    let mut h = x;
    let mut input_of_last = x;
    for (l, (&w, &b)) in nodes.weights.iter().zip(&nodes.biases).enumerate() {
        input_of_last = h;
        let z = tape.matmul(h, w)?;
        let z = tape.add_row_bias(z, b)?;
        h = if l + 1 < layers { tape.relu(z)? } else { z };
    }
    Ok((h, input_of_last))
}

/// Logits and post-activation penultimate features for a batch `x`.
pub fn mlp_forward(params: &StackNodes, tape: &mut Tape, x: NodeId) -> Result<ForwardOutput> {
    let (logits, penultimate) = stack_forward(params, tape, x, "mlp_forward")?;
    Ok(ForwardOutput { logits, penultimate })
}

/// Embeddings `B x d_emb` from penultimate features.
pub fn projector_forward(params: &StackNodes, tape: &mut Tape, penultimate: NodeId) -> Result<NodeId> {
    stack_forward(params, tape, penultimate, "projector_forward").map(|(out, _)| out)
}

/// Classifier plus optional projector head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub mlp: MlpParams,
    pub projector: Option<ProjectorParams>,
}

impl Model {
    pub fn new(mlp: MlpParams, projector: Option<ProjectorParams>) -> Result<Self> {
        if let Some(p) = &projector {
            let h = mlp.layer_sizes[mlp.layer_sizes.len() - 2];
            if p.input_dim() != h {
                return Err(Error::shape(
                    "model",
                    format!("projector input {} != penultimate width {h}", p.input_dim()),
                ));
            }
        }
        Ok(Self { mlp, projector })
    }

    /// All parameter tensors, classifier first.
    pub fn parameters(&self) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = self.mlp.tensors().into_iter().cloned().collect();
        if let Some(p) = &self.projector {
            out.extend(p.tensors().into_iter().cloned());
        }
        out
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let mut names = self.mlp.tensor_names("mlp");
        if let Some(p) = &self.projector {
            names.extend(p.tensor_names("projector"));
        }
        names
    }

    pub fn with_parameters(&self, mut params: Vec<Tensor>) -> Result<Self> {
        let n_mlp = 2 * self.mlp.weights.len();
        if params.len() < n_mlp {
            return Err(Error::shape("model", "too few parameter tensors"));
        }
        let rest = params.split_off(n_mlp);
        let mlp = self.mlp.with_tensors(params)?;
        let projector = match &self.projector {
            Some(p) => Some(p.with_tensors(rest)?),
            None if rest.is_empty() => None,
            None => return Err(Error::shape("model", "too many parameter tensors")),
        };
        Ok(Self { mlp, projector })
    }

    /// Class predictions (argmax of logits, lowest index on ties).
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let (logits, _) = self.mlp.infer(x)?;
        Ok(argmax_rows(&logits))
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), &Checkpoint::from_model(self))?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let ckpt: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        ckpt.into_model()
    }
}

pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|i| {
            let row = t.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// On-disk parameter file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub layer_sizes: Vec<usize>,
    #[serde(default)]
    pub projector_sizes: Option<Vec<usize>>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        let tensors = model
            .parameter_names()
            .into_iter()
            .zip(model.parameters())
            .map(|(name, t)| NamedTensor {
                name,
                shape: t.shape().to_vec(),
                values: t.into_values(),
            })
            .collect();
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            layer_sizes: model.mlp.layer_sizes.clone(),
            projector_sizes: model.projector.as_ref().map(|p| p.layer_sizes.clone()),
            tensors,
        }
    }

    pub fn into_model(self) -> Result<Model> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint format_version {}",
                self.format_version
            )));
        }
        let template_mlp = DenseStack::init(&self.layer_sizes, 0, Init::HeNormal)?;
        let template_proj = self
            .projector_sizes
            .as_deref()
            .map(|s| DenseStack::init(s, 0, Init::HeNormal))
            .transpose()?;
        let template = Model::new(template_mlp, template_proj)?;
        let expected = template.parameter_names();
        if expected.len() != self.tensors.len()
            || expected.iter().zip(&self.tensors).any(|(e, t)| *e != t.name)
        {
            return Err(Error::Data(format!(
                "checkpoint tensors do not match layout; expected {expected:?}"
            )));
        }
        let params = self
            .tensors
            .into_iter()
            .map(|t| Tensor::new(t.shape, t.values))
            .collect::<Result<Vec<_>>>()?;
        template.with_parameters(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;

    #[test]
    fn init_shapes_and_zero_bias() {
        let p = DenseStack::init(&[2, 8, 3], 1, Init::HeNormal).unwrap();
        assert_eq!(p.weights()[0].shape(), &[2, 8]);
        assert_eq!(p.biases()[0].shape(), &[8]);
        assert_eq!(p.weights()[1].shape(), &[8, 3]);
        assert_eq!(p.biases()[1].shape(), &[3]);
        assert!(p.biases().iter().all(|b| b.values().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn init_is_seeded() {
        let a = DenseStack::init(&[4, 5, 2], 9, Init::HeNormal).unwrap();
        let b = DenseStack::init(&[4, 5, 2], 9, Init::HeNormal).unwrap();
        let c = DenseStack::init(&[4, 5, 2], 10, Init::HeNormal).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn init_rejects_bad_sizes() {
        assert!(DenseStack::init(&[], 0, Init::HeNormal).is_err());
        assert!(DenseStack::init(&[3], 0, Init::HeNormal).is_err());
        assert!(DenseStack::init(&[3, 0, 2], 0, Init::HeNormal).is_err());
    }

    #[test]
    fn he_normal_std() {
        let p = DenseStack::init(&[100, 100], 5, Init::HeNormal).unwrap();
        let v = p.weights()[0].values();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt();
        let target = (2.0_f64 / 100.0).sqrt();
        assert!((std - target).abs() / target < 0.1, "std {std}");
    }

    #[test]
    fn uniform_small_range() {
        let p = DenseStack::init(&[10, 10], 5, Init::UniformSmall).unwrap();
        assert!(p.weights()[0].values().iter().all(|v| v.abs() <= 0.01));
    }

    #[test]
    fn zero_params_give_uniform_softmax() {
        let zero = DenseStack::init(&[3, 4, 5], 0, Init::HeNormal).unwrap();
        let zeroed: Vec<Tensor> = zero.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        let zero = zero.with_tensors(zeroed).unwrap();
        let mut tape = Tape::new();
        let nodes = zero.register(&mut tape);
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, -2.0, 3.0]]).unwrap());
        let out = mlp_forward(&nodes, &mut tape, x).unwrap();
        let probs = tape.softmax_rows(out.logits).unwrap();
        assert!(tape.value(probs).values().iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn one_hidden_unit_hand_case() {
        let net = DenseStack::from_tensors(
            &[1, 1, 1],
            vec![Tensor::matrix(1, 1, vec![1.0]).unwrap(), Tensor::matrix(1, 1, vec![2.0]).unwrap()],
            vec![Tensor::vector(vec![0.0]).unwrap(), Tensor::vector(vec![1.0]).unwrap()],
        )
        .unwrap();
        let mut tape = Tape::new();
        let nodes = net.register(&mut tape);
        let x = tape.constant(Tensor::matrix(1, 1, vec![3.0]).unwrap());
        let out = mlp_forward(&nodes, &mut tape, x).unwrap();
        assert_eq!(tape.value(out.penultimate).values(), &[3.0]);
        assert_eq!(tape.value(out.logits).values(), &[7.0]);
        let (logits, pen) = net.infer(&Tensor::matrix(1, 1, vec![3.0]).unwrap()).unwrap();
        assert_eq!(logits.values(), &[7.0]);
        assert_eq!(pen.values(), &[3.0]);
    }

    #[test]
    fn penultimate_width_and_shape_mismatch() {
        let net = DenseStack::init(&[2, 6, 4, 3], 1, Init::HeNormal).unwrap();
        let mut tape = Tape::new();
        let nodes = net.register(&mut tape);
        let x = tape.constant(Tensor::matrix(5, 2, vec![0.5; 10]).unwrap());
        let out = mlp_forward(&nodes, &mut tape, x).unwrap();
        assert_eq!(tape.value(out.penultimate).shape(), &[5, 4]);
        assert_eq!(tape.value(out.logits).shape(), &[5, 3]);
        let bad = tape.constant(Tensor::matrix(5, 3, vec![0.5; 15]).unwrap());
        assert!(mlp_forward(&nodes, &mut tape, bad).is_err());
    }

    #[test]
    fn projector_identity_and_hand_case() {
        let ident = DenseStack::from_tensors(
            &[2, 2],
            vec![Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()],
            vec![Tensor::zeros(vec![2])],
        )
        .unwrap();
        let x = Tensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 4.0]]).unwrap();
        let mut tape = Tape::new();
        let nodes = ident.register(&mut tape);
        let h = tape.constant(x.clone());
        let z = projector_forward(&nodes, &mut tape, h).unwrap();
        assert_eq!(tape.value(z), &x);

        // Row [a, b] times [[1, 0], [1, 1]] is [a + b, b].
        let w = DenseStack::from_tensors(
            &[2, 2],
            vec![Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap()],
            vec![Tensor::zeros(vec![2])],
        )
        .unwrap();
        let mut tape = Tape::new();
        let nodes = w.register(&mut tape);
        let h = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0]]).unwrap());
        let z = projector_forward(&nodes, &mut tape, h).unwrap();
        assert_eq!(tape.value(z).values(), &[3.0, 2.0, 2.0, -1.0]);
        assert_eq!(tape.value(z).cols(), 2);
    }

    #[test]
    fn mlp_parameter_gradients() {
        let net = DenseStack::init(&[3, 5, 4], 2, Init::HeNormal).unwrap();
        let x = Tensor::from_rows(&[vec![0.3, -0.7, 1.1], vec![-0.4, 0.9, 0.2]]).unwrap();
        let point: Vec<Tensor> = net.tensors().into_iter().cloned().collect();
        let report = finite_diff_check(
            |tape, leaves| {
                let nodes = StackNodes {
                    weights: leaves.iter().step_by(2).copied().collect(),
                    biases: leaves.iter().skip(1).step_by(2).copied().collect(),
                };
                let xn = tape.constant(x.clone());
                let out = mlp_forward(&nodes, tape, xn)?;
                let ls = tape.log_softmax_rows(out.logits)?;
                tape.reduce_mean(ls)
            },
            &point,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn batch_independence() {
        let net = DenseStack::init(&[2, 7, 3], 4, Init::HeNormal).unwrap();
        let a = Tensor::from_rows(&[vec![0.1, 0.2], vec![-1.0, 0.5]]).unwrap();
        let b = Tensor::from_rows(&[vec![2.0, -0.3]]).unwrap();
        let ab = Tensor::from_rows(&[vec![0.1, 0.2], vec![-1.0, 0.5], vec![2.0, -0.3]]).unwrap();
        let (la, _) = net.infer(&a).unwrap();
        let (lb, _) = net.infer(&b).unwrap();
        let (lab, _) = net.infer(&ab).unwrap();
        let joined: Vec<f64> = la.values().iter().chain(lb.values()).copied().collect();
        assert_eq!(lab.values(), joined.as_slice());
    }

    #[test]
    fn checkpoint_roundtrip_and_version() {
        let mlp = DenseStack::init(&[2, 4, 3], 1, Init::HeNormal).unwrap();
        let proj = DenseStack::init(&[4, 3, 2], 2, Init::HeNormal).unwrap();
        let model = Model::new(mlp, Some(proj)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        model.save_checkpoint(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"format_version\":1"));
        assert_eq!(Model::load_checkpoint(&path).unwrap(), model);

        let mut ckpt = Checkpoint::from_model(&model);
        ckpt.format_version = 2;
        assert!(ckpt.into_model().is_err());
    }

    #[test]
    fn projector_width_must_match() {
        let mlp = DenseStack::init(&[2, 4, 3], 1, Init::HeNormal).unwrap();
        let proj = DenseStack::init(&[5, 2], 2, Init::HeNormal).unwrap();
        assert!(Model::new(mlp, Some(proj)).is_err());
    }
}
