use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;
const EMBEDDING_INIT_STD: f64 = 1.0;
const IDENTITY_INIT: [&str; 4] = ["conv.kernel", "title_projection", "label.key", "label.value"];

/// Adds the identity to a square matrix, or to the centre tap of a
/// `W x D x D` kernel.
fn add_identity(t: &mut Tensor) {
    let shape = t.shape().to_vec();
    let d = shape[shape.len() - 1];
    let offset = if shape.len() == 3 { (shape[0] / 2) * d * d } else { 0 };
    let data = t.data_mut();
    for i in 0..d {
        data[offset + i * d + i] += 1.0;
    }
}

/// Weights of one encoder block. Generic so the same layout can hold
/// tensors or tape handles.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<T> {
    pub query: T,
    pub query_bias: T,
    pub key: T,
    pub key_bias: T,
    pub value: T,
    pub value_bias: T,
    pub output: T,
    pub output_bias: T,
    pub norm1_gain: T,
    pub norm1_bias: T,
    pub ffn_in: T,
    pub ffn_in_bias: T,
    pub ffn_out: T,
    pub ffn_out_bias: T,
    pub norm2_gain: T,
    pub norm2_bias: T,
}

/// All learned weights of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    /// `|V| x D`, shared by note tokens and code titles.
    pub token_embedding: T,
    pub conv_kernel: T,
    pub conv_bias: T,
    pub layers: Vec<EncoderLayer<T>>,
    pub title_projection: T,
    pub label_key: T,
    pub label_value: T,
    /// Per-code scoring vectors `u_l`, `L x D`.
    pub output_weight: T,
    pub output_bias: T,
}

pub type RacParameters = Params<Tensor>;

impl<T> EncoderLayer<T> {
    fn fields(&self) -> [(&'static str, &T); 16] {
        [
            ("query", &self.query),
            ("query_bias", &self.query_bias),
            ("key", &self.key),
            ("key_bias", &self.key_bias),
            ("value", &self.value),
            ("value_bias", &self.value_bias),
            ("output", &self.output),
            ("output_bias", &self.output_bias),
            ("norm1_gain", &self.norm1_gain),
            ("norm1_bias", &self.norm1_bias),
            ("ffn_in", &self.ffn_in),
            ("ffn_in_bias", &self.ffn_in_bias),
            ("ffn_out", &self.ffn_out),
            ("ffn_out_bias", &self.ffn_out_bias),
            ("norm2_gain", &self.norm2_gain),
            ("norm2_bias", &self.norm2_bias),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut T); 16] {
        [
            ("query", &mut self.query),
            ("query_bias", &mut self.query_bias),
            ("key", &mut self.key),
            ("key_bias", &mut self.key_bias),
            ("value", &mut self.value),
            ("value_bias", &mut self.value_bias),
            ("output", &mut self.output),
            ("output_bias", &mut self.output_bias),
            ("norm1_gain", &mut self.norm1_gain),
            ("norm1_bias", &mut self.norm1_bias),
            ("ffn_in", &mut self.ffn_in),
            ("ffn_in_bias", &mut self.ffn_in_bias),
            ("ffn_out", &mut self.ffn_out),
            ("ffn_out_bias", &mut self.ffn_out_bias),
            ("norm2_gain", &mut self.norm2_gain),
            ("norm2_bias", &mut self.norm2_bias),
        ]
    }

    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> EncoderLayer<U> {
        EncoderLayer {
            query: f(&self.query),
            query_bias: f(&self.query_bias),
            key: f(&self.key),
            key_bias: f(&self.key_bias),
            value: f(&self.value),
            value_bias: f(&self.value_bias),
            output: f(&self.output),
            output_bias: f(&self.output_bias),
            norm1_gain: f(&self.norm1_gain),
            norm1_bias: f(&self.norm1_bias),
            ffn_in: f(&self.ffn_in),
            ffn_in_bias: f(&self.ffn_in_bias),
            ffn_out: f(&self.ffn_out),
            ffn_out_bias: f(&self.ffn_out_bias),
            norm2_gain: f(&self.norm2_gain),
            norm2_bias: f(&self.norm2_bias),
        }
    }
}

impl<T> Params<T> {
    /// Every tensor with its stable name, in checkpoint order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("conv.kernel".into(), &self.conv_kernel),
            ("conv.bias".into(), &self.conv_bias),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(layer.fields().into_iter().map(|(n, t)| (format!("encoder.{i}.{n}"), t)));
        }
        out.extend([
            ("title_projection".to_string(), &self.title_projection),
            ("label.key".into(), &self.label_key),
            ("label.value".into(), &self.label_value),
            ("output.weight".into(), &self.output_weight),
            ("output.bias".into(), &self.output_bias),
        ]);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = vec![
            ("token_embedding".to_string(), &mut self.token_embedding),
            ("conv.kernel".into(), &mut self.conv_kernel),
            ("conv.bias".into(), &mut self.conv_bias),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.extend(layer.fields_mut().into_iter().map(|(n, t)| (format!("encoder.{i}.{n}"), t)));
        }
        out.extend([
            ("title_projection".to_string(), &mut self.title_projection),
            ("label.key".into(), &mut self.label_key),
            ("label.value".into(), &mut self.label_value),
            ("output.weight".into(), &mut self.output_weight),
            ("output.bias".into(), &mut self.output_bias),
        ]);
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Params<U> {
        Params {
            token_embedding: f(&self.token_embedding),
            conv_kernel: f(&self.conv_kernel),
            conv_bias: f(&self.conv_bias),
            layers: self.layers.iter().map(|l| l.map(&mut f)).collect(),
            title_projection: f(&self.title_projection),
            label_key: f(&self.label_key),
            label_value: f(&self.label_value),
            output_weight: f(&self.output_weight),
            output_bias: f(&self.output_bias),
        }
    }

    /// Rebuilds from values listed in [`Params::named`] order.
    pub fn from_ordered(config: &ModelConfig, values: Vec<T>) -> Result<Self> {
        let expected = expected_shapes(config).len();
        if values.len() != expected {
            return Err(Error::Dimension(format!("expected {expected} parameter tensors, got {}", values.len())));
        }
        let mut it = values.into_iter();
        let mut next = || it.next().expect("length checked above");
        let token_embedding = next();
        let conv_kernel = next();
        let conv_bias = next();
        let layers = (0..config.encoder_layers)
            .map(|_| EncoderLayer {
                query: next(),
                query_bias: next(),
                key: next(),
                key_bias: next(),
                value: next(),
                value_bias: next(),
                output: next(),
                output_bias: next(),
                norm1_gain: next(),
                norm1_bias: next(),
                ffn_in: next(),
                ffn_in_bias: next(),
                ffn_out: next(),
                ffn_out_bias: next(),
                norm2_gain: next(),
                norm2_bias: next(),
            })
            .collect();
        Ok(Params {
            token_embedding,
            conv_kernel,
            conv_bias,
            layers,
            title_projection: next(),
            label_key: next(),
            label_value: next(),
            output_weight: next(),
            output_bias: next(),
        })
    }
}

/// Name and shape of every tensor, in checkpoint order.
pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (v, d, w, f, l) = (config.vocab_size, config.embed_dim, config.conv_width, config.ffn_dim, config.label_count);
    let layer = |i: usize| {
        [
            ("query", vec![d, d]),
            ("query_bias", vec![d]),
            ("key", vec![d, d]),
            ("key_bias", vec![d]),
            ("value", vec![d, d]),
            ("value_bias", vec![d]),
            ("output", vec![d, d]),
            ("output_bias", vec![d]),
            ("norm1_gain", vec![d]),
            ("norm1_bias", vec![d]),
            ("ffn_in", vec![d, f]),
            ("ffn_in_bias", vec![f]),
            ("ffn_out", vec![f, d]),
            ("ffn_out_bias", vec![d]),
            ("norm2_gain", vec![d]),
            ("norm2_bias", vec![d]),
        ]
        .into_iter()
        .map(move |(n, s)| (format!("encoder.{i}.{n}"), s))
    };
    let mut out = vec![
        ("token_embedding".to_string(), vec![v, d]),
        ("conv.kernel".into(), vec![w, d, d]),
        ("conv.bias".into(), vec![d]),
    ];
    for i in 0..config.encoder_layers {
        out.extend(layer(i));
    }
    out.extend([
        ("title_projection".to_string(), vec![d, d]),
        ("label.key".into(), vec![d, d]),
        ("label.value".into(), vec![d, d]),
        ("output.weight".into(), vec![l, d]),
        ("output.bias".into(), vec![l]),
    ]);
    out
}

impl RacParameters {
    /// Seeded initialisation. Token embeddings are drawn from `normal(0, 1)`
    /// and every other weight matrix from `normal(0, 0.02)`; biases start at
    /// zero and layer-norm gains at one.
    ///
    /// The centre tap of the convolution and the title, label-key and
    /// label-value projections additionally get an identity added. With the
    /// encoder blocks close to the identity at this scale, a code's query
    /// then starts out matching note tokens that resemble its title words.
    ///
    /// The per-code scoring vectors are left at zero;
    /// [`super::RacModel::new`] copies the title queries into them.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(config.seed);
        let values = expected_shapes(config)
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with("_gain") {
                    Tensor::full(&shape, 1.0)
                } else if name.ends_with("bias") || name == "output.weight" {
                    Tensor::zeros(&shape)
                } else if name == "token_embedding" {
                    Tensor::randn(&shape, EMBEDDING_INIT_STD, &mut rng)
                } else {
                    let mut t = Tensor::randn(&shape, INIT_STD, &mut rng);
                    if IDENTITY_INIT.contains(&name.as_str()) {
                        add_identity(&mut t);
                    }
                    t
                }
            })
            .collect();
        Self::from_ordered(config, values)
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    /// Checks every tensor against the shapes implied by `config`.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let expected = expected_shapes(config);
        let named = self.named();
        if named.len() != expected.len() {
            return Err(Error::Dimension(format!("expected {} tensors, found {}", expected.len(), named.len())));
        }
        for ((name, t), (_, shape)) in named.iter().zip(&expected) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "tensor {name} has shape {:?}, config implies {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}
