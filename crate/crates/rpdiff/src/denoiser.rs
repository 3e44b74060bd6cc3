//! Noise-prediction model: a dense net over the latent, a sinusoidal timestep
//! embedding, and optionally a learned per-class embedding.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{timestep_embedding, Activation, DenseNet, GradientVector};

/// Anything that predicts the cumulative noise in a latent at a timestep.
///
/// Samplers and feature extraction are generic over this so tests can rig
/// predictors with known outputs.
pub trait NoisePredictor {
    fn data_dim(&self) -> usize;
    fn horizon(&self) -> u32;
    fn predict(&self, x_t: &[f64], t: u32, label: Option<u32>) -> Result<Vec<f64>>;
}

/// Learned per-class embedding table, flattened row-major (`n_classes x dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbedding {
    pub n_classes: usize,
    pub embed_dim: usize,
    table: Vec<f64>,
}

impl ClassEmbedding {
    fn init<R: Rng + ?Sized>(n_classes: usize, embed_dim: usize, rng: &mut R) -> Self {
        let table = (0..n_classes * embed_dim)
            .map(|_| rng.random_range(-0.5..0.5))
            .collect();
        Self {
            n_classes,
            embed_dim,
            table,
        }
    }

    pub(crate) fn from_parts(n_classes: usize, embed_dim: usize, table: Vec<f64>) -> Result<Self> {
        if table.len() != n_classes * embed_dim {
            return Err(Error::InvalidConfig(
                "class embedding table length mismatch".into(),
            ));
        }
        Ok(Self {
            n_classes,
            embed_dim,
            table,
        })
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    fn row(&self, label: u32) -> Result<&[f64]> {
        let label = label as usize;
        if label >= self.n_classes {
            return Err(Error::InvalidConfig(format!(
                "label {label} out of range for {} classes",
                self.n_classes
            )));
        }
        Ok(&self.table[label * self.embed_dim..(label + 1) * self.embed_dim])
    }
}

/// Feed-forward noise predictor. Timestep and class conditioning are
/// concatenated to the latent before the first dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    net: DenseNet,
    data_dim: usize,
    t_embed_dim: usize,
    horizon: u32,
    class_embed: Option<ClassEmbedding>,
}

impl Denoiser {
    /// Initialize with tanh hidden layers and an identity output layer.
    pub fn init<R: Rng + ?Sized>(
        data_dim: usize,
        hidden: &[usize],
        t_embed_dim: usize,
        horizon: u32,
        conditioning: Option<(usize, usize)>,
        rng: &mut R,
    ) -> Result<Self> {
        if data_dim == 0 {
            return Err(Error::InvalidConfig("data_dim must be positive".into()));
        }
        if t_embed_dim == 0 || t_embed_dim % 2 != 0 {
            return Err(Error::InvalidConfig(
                "t_embed_dim must be even and positive".into(),
            ));
        }
        let class_embed = match conditioning {
            Some((n_classes, embed_dim)) => {
                if n_classes == 0 || embed_dim == 0 {
                    return Err(Error::InvalidConfig(
                        "class conditioning needs positive class count and dim".into(),
                    ));
                }
                Some(ClassEmbedding::init(n_classes, embed_dim, rng))
            }
            None => None,
        };
        let cond_dim = class_embed.as_ref().map_or(0, |c| c.embed_dim);
        let mut dims = vec![data_dim + t_embed_dim + cond_dim];
        dims.extend_from_slice(hidden);
        dims.push(data_dim);
        let mut activations = vec![Activation::Tanh; dims.len() - 2];
        activations.push(Activation::Identity);
        let net = DenseNet::init(&dims, &activations, rng)?;
        Ok(Self {
            net,
            data_dim,
            t_embed_dim,
            horizon,
            class_embed,
        })
    }

    pub(crate) fn from_parts(
        net: DenseNet,
        data_dim: usize,
        t_embed_dim: usize,
        horizon: u32,
        class_embed: Option<ClassEmbedding>,
    ) -> Result<Self> {
        let cond_dim = class_embed.as_ref().map_or(0, |c| c.embed_dim);
        if net.input_dim() != data_dim + t_embed_dim + cond_dim {
            return Err(Error::InvalidConfig(
                "denoiser net input dim inconsistent with header".into(),
            ));
        }
        if net.output_dim() != data_dim {
            return Err(Error::InvalidConfig(
                "denoiser net output dim inconsistent with data dim".into(),
            ));
        }
        Ok(Self {
            net,
            data_dim,
            t_embed_dim,
            horizon,
            class_embed,
        })
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn t_embed_dim(&self) -> usize {
        self.t_embed_dim
    }

    pub fn class_embed(&self) -> Option<&ClassEmbedding> {
        self.class_embed.as_ref()
    }

    pub fn is_conditional(&self) -> bool {
        self.class_embed.is_some()
    }

    /// Total trainable parameters: net weights plus the class table.
    pub fn parameter_count(&self) -> usize {
        self.net.parameter_count() + self.class_embed.as_ref().map_or(0, |c| c.table.len())
    }

    /// Flat parameter vector: net parameters first, then the class table.
    pub fn params(&self) -> Vec<f64> {
        let mut out = self.net.params().to_vec();
        if let Some(c) = &self.class_embed {
            out.extend_from_slice(&c.table);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.parameter_count() {
            return Err(Error::InvalidConfig(format!(
                "parameter vector length {} does not match denoiser ({})",
                params.len(),
                self.parameter_count()
            )));
        }
        let net_len = self.net.parameter_count();
        self.net.set_params(&params[..net_len])?;
        if let Some(c) = &mut self.class_embed {
            c.table.copy_from_slice(&params[net_len..]);
        }
        Ok(())
    }

    fn assemble_input(&self, x_t: &[f64], t: u32, label: Option<u32>) -> Result<Vec<f64>> {
        if x_t.len() != self.data_dim {
            return Err(Error::DimensionMismatch {
                layer: 0,
                got: x_t.len(),
                expected: self.data_dim,
            });
        }
        let mut input = Vec::with_capacity(self.net.input_dim());
        input.extend_from_slice(x_t);
        input.extend(timestep_embedding(t, self.t_embed_dim, self.horizon)?);
        match (&self.class_embed, label) {
            (Some(c), Some(y)) => input.extend_from_slice(c.row(y)?),
            (Some(_), None) => {
                return Err(Error::InvalidConfig(
                    "conditional denoiser called without a label".into(),
                ))
            }
            (None, Some(_)) => {
                return Err(Error::InvalidConfig(
                    "unconditional denoiser called with a label".into(),
                ))
            }
            (None, None) => {}
        }
        Ok(input)
    }

    /// Loss `||target_noise - predict(x_in, t)||^2` and its gradient with
    /// respect to the full parameter vector (net plus class table).
    pub fn noise_prediction_gradient(
        &self,
        x_in: &[f64],
        t: u32,
        label: Option<u32>,
        target_noise: &[f64],
    ) -> Result<(f64, GradientVector)> {
        if target_noise.len() != self.data_dim {
            return Err(Error::DimensionMismatch {
                layer: 0,
                got: target_noise.len(),
                expected: self.data_dim,
            });
        }
        let input = self.assemble_input(x_in, t, label)?;
        let trace = self.net.forward_trace(&input)?;
        let mut loss = 0.0;
        let mut d_out = Vec::with_capacity(self.data_dim);
        for (&o, &n) in trace.output().iter().zip(target_noise) {
            let d = o - n;
            loss += d * d;
            d_out.push(2.0 * d);
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { example: 0 });
        }
        let (net_grad, d_input) = self.net.backward(&trace, &d_out);
        let mut values = net_grad.values().to_vec();
        if let Some(c) = &self.class_embed {
            let mut table_grad = vec![0.0; c.table.len()];
            let y = label.expect("conditional input was assembled") as usize;
            let start = self.data_dim + self.t_embed_dim;
            table_grad[y * c.embed_dim..(y + 1) * c.embed_dim]
                .copy_from_slice(&d_input[start..start + c.embed_dim]);
            values.extend_from_slice(&table_grad);
        }
        Ok((loss, GradientVector::from_values(values)))
    }
}

impl NoisePredictor for Denoiser {
    fn data_dim(&self) -> usize {
        self.data_dim
    }

    fn horizon(&self) -> u32 {
        self.horizon
    }

    fn predict(&self, x_t: &[f64], t: u32, label: Option<u32>) -> Result<Vec<f64>> {
        let input = self.assemble_input(x_t, t, label)?;
        self.net.forward(&input)
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    /// Predictor returning a fixed function of the latent, for rigged tests.
    pub struct RiggedPredictor<F: Fn(&[f64], u32) -> Vec<f64>> {
        pub data_dim: usize,
        pub horizon: u32,
        pub f: F,
    }

    impl<F: Fn(&[f64], u32) -> Vec<f64>> NoisePredictor for RiggedPredictor<F> {
        fn data_dim(&self) -> usize {
            self.data_dim
        }

        fn horizon(&self) -> u32 {
            self.horizon
        }

        fn predict(&self, x_t: &[f64], t: u32, _label: Option<u32>) -> Result<Vec<f64>> {
            Ok((self.f)(x_t, t))
        }
    }

    pub fn zero_predictor(data_dim: usize, horizon: u32) -> impl NoisePredictor {
        RiggedPredictor {
            data_dim,
            horizon,
            f: move |_x: &[f64], _t| vec![0.0; data_dim],
        }
    }
}
